#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <set>

#include "evtrack/errors.hpp"
#include "evtrack/evsim.hpp"

using namespace evtrack;

namespace {

Grid constant(Geometry g, double v) { return Grid(int(g.width), int(g.height), v); }

}  // namespace

TEST_CASE("a log-intensity ramp emits floor(L / C) events of its sign") {
    const Geometry g{2, 1};
    const Timestamp T = 1'000'000'000;
    // Pixel 0 rises by 1.0, pixel 1 falls by 0.7, linearly over the sequence.
    auto render = [&](Timestamp t) {
        Grid out = constant(g, 0.0);
        const double a = double(t) / double(T);
        out.at(0, 0) = a;
        out.at(1, 0) = -0.7 * a;
        return out;
    };
    auto s = simulate_events(render, g, T, 1000.0, 0.25, 0.0, 1);
    int pos = 0, neg = 0;
    for (const auto& e : s.events) {
        if (e.x == 0) {
            CHECK(e.p == 1);
            ++pos;
        } else {
            CHECK(e.p == -1);
            ++neg;
        }
        CHECK(e.t < T);
    }
    CHECK(pos == 4);  // exact multiple of C counts fully
    CHECK(neg == 2);
    for (std::size_t i = 1; i < s.events.size(); ++i) CHECK(s.events[i - 1].t <= s.events[i].t);
}

TEST_CASE("a step larger than several thresholds emits them all at once") {
    const Geometry g{1, 1};
    auto render = [&](Timestamp t) { return constant(g, t >= 500'000'000 ? 1.0 : 0.0); };
    auto s = simulate_events(render, g, 1'000'000'000, 100.0, 0.3, 0.0, 1);
    CHECK(s.events.size() == 3);
}

TEST_CASE("static scene without noise is silent; noise rate sets the count") {
    const Geometry g{20, 10};
    auto flat = [&](Timestamp) { return constant(g, 0.5); };
    CHECK(simulate_events(flat, g, 1'000'000'000, 200.0, 0.15, 0.0, 3).events.empty());
    auto noisy = simulate_events(flat, g, 1'000'000'000, 200.0, 0.15, 2.0, 3);
    // Poisson with mean 400: well inside +-5 sigma.
    CHECK(std::abs(double(noisy.events.size()) - 400.0) < 100.0);
}

TEST_CASE("more contrast never means fewer signal events") {
    auto spec = sample_scene(Scenario::plain, 6);
    spec.noise_rate = 0.0;
    std::size_t previous = 0;
    for (double k : {0.5, 1.0, 2.0, 4.0}) {
        auto s = spec;
        s.target.offset = spec.target.offset * k;
        s.checker_contrast = spec.checker_contrast * k;
        const auto n = emit_events(s).events.events.size();
        CHECK(n >= previous);
        previous = n;
    }
}

TEST_CASE("ground truth follows the analytic linear path") {
    SceneSpec spec;
    spec.target.size = 10;
    spec.target.trajectory = Trajectory{TrajectoryKind::linear, 30.0, 40.0, 20.0, -10.0};
    for (double t : {0.0, 0.5, 1.0, 1.5}) {
        auto b = object_box(spec.target, spec.geometry, t);
        CHECK(b.cx == doctest::Approx((30.0 + 20.0 * t) / 128.0));
        CHECK(b.cy == doctest::Approx((40.0 - 10.0 * t) / 128.0));
        CHECK(b.w == doctest::Approx(10.0 / 128.0));
    }
}

TEST_CASE("linear paths reflect and every object stays inside the frame") {
    ObjectSpec o;
    o.size = 12;
    o.trajectory = Trajectory{TrajectoryKind::linear, 100.0, 64.0, 80.0, 0.0};
    // Reaches the right limit (122) after 0.275 s and comes back.
    auto [x, y] = object_center(o, {128, 128}, 0.5);
    CHECK(x == doctest::Approx(122.0 - (80.0 * 0.5 - 22.0)));
    CHECK(y == 64.0);
    for (auto sc : {Scenario::plain, Scenario::distractor, Scenario::camera_motion, Scenario::combined}) {
        for (std::uint64_t seed = 0; seed < 5; ++seed) {
            auto spec = sample_scene(sc, seed);
            CHECK_NOTHROW(spec.validate());
            for (double t = 0; t <= 2.0; t += 0.05) {
                auto b = object_box(spec.target, spec.geometry, t);
                CHECK(b.left() >= -1e-12);
                CHECK(b.right() <= 1.0 + 1e-12);
            }
        }
    }
}

TEST_CASE("scenario sampling: distractors and jitter only where expected") {
    CHECK(sample_scene(Scenario::plain, 1).distractors.empty());
    CHECK(sample_scene(Scenario::plain, 1).jitter_amplitude == 0.0);
    CHECK(sample_scene(Scenario::distractor, 1).distractors.size() >= 2);
    CHECK(sample_scene(Scenario::camera_motion, 1).jitter_amplitude > 0.0);
    CHECK(parse_scenario("combined") == Scenario::combined);
    CHECK_THROWS_AS(parse_scenario("hdr"), DataError);
}

TEST_CASE("split seeds never collide") {
    std::set<std::uint64_t> seen;
    for (auto split : {Split::train, Split::val, Split::test})
        for (std::size_t i = 0; i < 200; ++i) seen.insert(sequence_seed(42, split, i));
    CHECK(seen.size() == 600);
}

TEST_CASE("scene JSON round trip and validation") {
    auto spec = sample_scene(Scenario::combined, 9);
    CHECK(to_json(scene_spec_from_json(to_json(spec))) == to_json(spec));
    auto bad = to_json(spec);
    bad["contrast_threshold"] = 0.0;
    CHECK_THROWS_AS(scene_spec_from_json(bad), DataError);
    spec.target.size = 500;
    CHECK_THROWS_AS(spec.validate(), DataError);
}

TEST_CASE("sequences: one box per window, retiming keeps events") {
    auto seq = emit_events(sample_scene(Scenario::plain, 4));
    CHECK(seq.boxes.size() == 80);
    CHECK_FALSE(seq.events.events.empty());
    auto slow = with_window(seq, 50'000'000);
    CHECK(slow.boxes.size() == 40);
    CHECK(slow.events.events == seq.events.events);
    // Slow window 1 spans [50, 100) ms.
    auto mid = object_box(seq.spec.target, seq.spec.geometry, 0.075);
    CHECK(slow.boxes[1].cx == doctest::Approx(mid.cx));
}

TEST_CASE("dataset generation is deterministic and independent of worker count") {
    auto a = make_dataset(Scenario::distractor, 2, 1, 1, 77, 1);
    auto b = make_dataset(Scenario::distractor, 2, 1, 1, 77, 3);
    REQUIRE(a.train.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
        CHECK(a.train[i].events.events == b.train[i].events.events);
        CHECK(a.train[i].boxes == b.train[i].boxes);
    }
    CHECK(a.test[0].events.events != a.train[0].events.events);
}

TEST_CASE("dataset files round trip") {
    auto dir = std::filesystem::temp_directory_path() / "evtrack_unit" / "ds";
    std::filesystem::remove_all(dir);
    auto a = make_dataset(Scenario::plain, 1, 0, 1, 5);
    write_dataset(dir, a);
    auto b = read_dataset(dir);
    CHECK(b.scenario == a.scenario);
    CHECK(b.seed == a.seed);
    REQUIRE(b.test.size() == 1);
    CHECK(b.test[0].name == a.test[0].name);
    CHECK(b.test[0].events.events == a.test[0].events.events);
    CHECK(b.test[0].boxes == a.test[0].boxes);
    std::filesystem::remove(dir / "manifest.json");
    CHECK_THROWS_AS(read_dataset(dir), DataError);
}
