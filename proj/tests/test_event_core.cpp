#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>

#include "evtrack/errors.hpp"
#include "evtrack/event_core.hpp"
#include "oracles.hpp"

using namespace evtrack;

namespace {

EventStream random_stream(std::mt19937_64& rng, std::size_t n, Geometry g, Timestamp span) {
    EventStream s{g, {}};
    std::uniform_int_distribution<Timestamp> t(0, span - 1);
    for (std::size_t i = 0; i < n; ++i) {
        s.events.push_back(Event{t(rng), std::uint16_t(rng() % g.width), std::uint16_t(rng() % g.height),
                                 std::int8_t(rng() % 2 ? 1 : -1)});
    }
    std::sort(s.events.begin(), s.events.end(), [](const Event& a, const Event& b) { return a.t < b.t; });
    return s;
}

std::filesystem::path temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "evtrack_unit";
    std::filesystem::create_directories(dir);
    return dir / name;
}

}  // namespace

TEST_CASE("CSV parsing: header, polarity tokens and errors") {
    Geometry g{4, 3};
    auto s = parse_events_csv("t,x,y,p\n0,1,2,1\n5,3,0,0\n9,0,0,-1\n", g);
    REQUIRE(s.events.size() == 3);
    CHECK(s.events[1] == Event{5, 3, 0, -1});
    CHECK(s.events[2].p == -1);
    CHECK_THROWS_AS(parse_events_csv("0,1,2,2\n", g), DataError);
    CHECK_THROWS_AS(parse_events_csv("0,4,0,1\n", g), DataError);
    CHECK_THROWS_AS(parse_events_csv("0,1,1\n", g), DataError);
    // Out-of-order records are sorted stably.
    auto late = parse_events_csv("5,0,0,1\n4,1,0,1\n5,2,0,-1\n", g);
    CHECK(late.events[0].x == 1);
    CHECK(late.events[1].x == 0);
    CHECK(late.events[2].x == 2);
}

TEST_CASE("binary format: exact round trip and malformed inputs") {
    std::mt19937_64 rng(1);
    auto s = random_stream(rng, 500, {31, 17}, 1'000'000);
    auto bytes = serialize_events_binary(s);
    CHECK(bytes.size() == kBinaryHeaderBytes + 500 * kBinaryRecordBytes);
    auto back = parse_events_binary(bytes);
    CHECK(back.geometry == s.geometry);
    CHECK(back.events == s.events);
    CHECK_THROWS_AS(parse_events_binary(bytes.substr(0, bytes.size() - 1)), DataError);
    CHECK_THROWS_AS(parse_events_binary("EVT2" + bytes.substr(4)), DataError);
    auto bad = bytes;
    bad[kBinaryHeaderBytes + 12] = 3;  // polarity of the first record
    CHECK_THROWS_AS(parse_events_binary(bad), DataError);
}

TEST_CASE("CSV round trip through files") {
    std::mt19937_64 rng(2);
    auto s = random_stream(rng, 50, {8, 8}, 1000);
    auto path = temp_path("rt.csv");
    write_event_file(path, s, EventFormat::csv);
    CHECK_THROWS_AS(read_event_file(path), DataError);  // CSV needs a geometry
    CHECK(read_event_file(path, Geometry{8, 8}).events == s.events);
}

TEST_CASE("windows are half-open and partition the stream") {
    EventStream s{{2, 1}, {{0, 0, 0, 1}, {24'999'999, 1, 0, 1}, {25'000'000, 0, 0, -1}, {50'000'000, 1, 0, 1}}};
    CHECK(window_events(s, 0, kDefaultWindowNs).events.size() == 2);
    CHECK(window_events(s, kDefaultWindowNs, kDefaultWindowNs).events.size() == 1);
    CHECK(window_count(s, kDefaultWindowNs) == 3);
    auto f = aggregate_frame(window_events(s, 0, kDefaultWindowNs));
    CHECK(f.at(0, 0) == 1);
    CHECK(f.at(1, 0) == 1);
}

TEST_CASE("aggregate_frame agrees with per-event accumulation") {
    std::mt19937_64 rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        auto s = random_stream(rng, 1 + rng() % 3000, {Geometry{1 + std::uint32_t(rng() % 40), 1 + std::uint32_t(rng() % 40)}},
                               200'000'000);
        const Timestamp dt = 1 + rng() % 50'000'000;
        for (std::size_t k = 0; k < window_count(s, dt); ++k) {
            auto f = aggregate_frame(window_events(s, k * dt, dt));
            auto ref = oracle::accumulate(s, k * dt, dt);
            REQUIRE(f.grid.size() == ref.size());
            for (std::size_t i = 0; i < ref.size(); ++i) REQUIRE(f.grid[i] == ref[i]);
        }
    }
}

TEST_CASE("normalize clamps to +-clip then scales") {
    EventFrame f{{3, 1}, 0, 1, {25, -4, -11}};
    auto g = normalize_frame(f);
    CHECK(g.values == std::vector<double>{1.0, -0.4, -1.0});
    CHECK(normalize_frame(f, 5).values[1] == doctest::Approx(-0.8));
    CHECK_THROWS_AS(normalize_frame(f, 0), DataError);
}

TEST_CASE("voxel grid: linear bins conserve polarity mass") {
    // dt = 300, 3 bins centered at 50, 150, 250.
    EventStream s{{1, 1}, {{0, 0, 0, 1}, {100, 0, 0, 1}, {150, 0, 0, -1}, {299, 0, 0, 1}}};
    auto v = voxel_grid(window_events(s, 0, 300), 3);
    CHECK(v.at(0, 0, 0) == doctest::Approx(1.0 + 0.5));
    CHECK(v.at(1, 0, 0) == doctest::Approx(0.5 - 1.0));
    CHECK(v.at(2, 0, 0) == doctest::Approx(1.0));
    double mass = 0;
    for (double x : v.values) mass += x;
    CHECK(mass == doctest::Approx(2.0));
}

TEST_CASE("crop_resize: identity crop, zero padding and transform inverse") {
    Grid img(8, 8);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) img.at(x, y) = x + 10 * y;
    auto full = crop_resize(img, BBoxN{0.5, 0.5, 1.0, 1.0}, 1.0, 8, 8);
    CHECK(full.grid.values == img.values);

    auto corner = crop_resize(img, BBoxN{0.0, 0.0, 0.5, 0.5}, 2.0, 8, 8);
    CHECK(corner.grid.at(0, 0) == 0.0);  // outside the image
    CHECK(corner.grid.at(7, 7) == doctest::Approx(img.at(3, 3)));

    auto t = crop_transform(BBoxN{0.3, 0.6, 0.1, 0.2}, 2.0, 100, 50);
    CHECK(t.side == doctest::Approx(20.0));
    BBoxN b{0.31, 0.58, 0.05, 0.1};
    auto rt = t.box_to_image(t.box_to_crop(b, 100, 50), 100, 50);
    CHECK(rt.cx == doctest::Approx(b.cx));
    CHECK(rt.h == doctest::Approx(b.h));
    CHECK_THROWS_AS(crop_resize(img, BBoxN{0.5, 0.5, 0.0, 0.1}, 2.0, 8, 8), DataError);
}

TEST_CASE("streaming aggregation equals batch aggregation") {
    std::mt19937_64 rng(4);
    auto s = random_stream(rng, 20000, {16, 12}, 300'000'000);
    auto path = temp_path("stream.bin");
    write_event_file(path, s, EventFormat::binary);
    std::vector<EventFrame> frames;
    auto n = stream_binary_file(path, kDefaultWindowNs, [&](const EventFrame& f) { frames.push_back(f); }, 1000);
    CHECK(n == s.events.size());
    REQUIRE(frames.size() == window_count(s, kDefaultWindowNs));
    for (std::size_t k = 0; k < frames.size(); ++k) {
        CHECK(frames[k].t0 == Timestamp(k) * kDefaultWindowNs);
        CHECK(frames[k].grid == aggregate_frame(window_events(s, k * kDefaultWindowNs, kDefaultWindowNs)).grid);
    }
}

TEST_CASE("streaming aggregator rejects unsorted input") {
    StreamingAggregator agg({2, 2}, 10, [](const EventFrame&) {});
    agg.push(Event{50, 0, 0, 1});
    CHECK_THROWS_AS(agg.push(Event{5, 0, 0, 1}), DataError);
}

TEST_CASE("box CSV round trip") {
    std::vector<BBoxN> boxes{{0.1, 0.2, 0.3, 0.4}, {0.5, 0.5, 0.125, 1.0 / 3.0}};
    CHECK(parse_boxes_csv(serialize_boxes_csv(boxes)) == boxes);
    CHECK_THROWS_AS(parse_boxes_csv("frame,cx,cy,w,h\n1,0.5,0.5,0.1,0.1\n"), DataError);
}
