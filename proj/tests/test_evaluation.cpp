#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "evtrack/errors.hpp"
#include "evtrack/evaluation.hpp"
#include "oracles.hpp"

using namespace evtrack;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

TEST_CASE("iou: hand cases") {
    BBoxN a{0.5, 0.5, 0.2, 0.2};
    CHECK(iou(a, a) == 1.0);
    CHECK(iou(a, BBoxN{0.6, 0.5, 0.2, 0.2}) == doctest::Approx(0.02 / 0.06));
    CHECK(iou(a, BBoxN{0.9, 0.9, 0.1, 0.1}) == 0.0);
    CHECK(iou(a, BBoxN{0.5, 0.5, 0.0, 0.2}) == 0.0);
}

TEST_CASE("iou agrees with the raster oracle") {
    std::mt19937_64 rng(1);
    std::uniform_real_distribution<double> c(0.2, 0.8), s(0.05, 0.4);
    for (int i = 0; i < 50; ++i) {
        BBoxN a{c(rng), c(rng), s(rng), s(rng)}, b{c(rng), c(rng), s(rng), s(rng)};
        CHECK(std::abs(iou(a, b) - oracle::raster_iou(a, b, 400)) < 1e-2);
    }
}

TEST_CASE("success curve uses >= and OP uses >") {
    std::vector<double> ious{0.5, 0.75, 1.0, 0.0};
    auto curve = success_curve(ious);
    REQUIRE(curve.size() == kSuccessPoints);
    CHECK(curve[0] == 1.0);
    CHECK(curve[50] == 0.75);   // 0.5 counts at t = 0.5
    CHECK(curve[51] == 0.5);
    CHECK(curve[100] == 0.25);  // exactly 1.0
    CHECK(op_threshold(ious, 0.5) == 0.5);
    CHECK(op_threshold(ious, 0.75) == 0.25);
    CHECK(auc(curve) == doctest::Approx(oracle::success_auc_per_frame(ious)).epsilon(1e-12));
}

TEST_CASE("precision curves use <=") {
    std::vector<double> err{0.0, 20.0, 20.5, 100.0};
    auto p = precision_curve(err);
    REQUIRE(p.size() == kPrecisionPoints);
    CHECK(p[0] == 0.25);
    CHECK(p[20] == 0.5);
    CHECK(p[21] == 0.75);
    CHECK(p[50] == 0.75);
    auto np = norm_precision_curve(std::vector<double>{0.2, 0.21});
    CHECK(np[20] == 0.5);
    CHECK(norm_precision_threshold(20) == doctest::Approx(0.2));
}

TEST_CASE("OPE with the oracle tracker scores perfectly; static tracker does not") {
    auto ds = make_dataset(Scenario::plain, 0, 0, 2, 13);
    auto perfect = build_report(run_ope(oracle_tracker(), ds.test, {}));
    CHECK(perfect.overall.auc == 1.0);
    CHECK(perfect.overall.precision20 == 1.0);
    CHECK(perfect.overall.frames == 2 * 79);
    auto still = build_report(run_ope(static_tracker(), ds.test, {}, 2));
    CHECK(still.overall.auc < 0.5);
    CHECK(still.by_scenario.at("plain") == still.overall);
    for (std::size_t i = 1; i < still.success.size(); ++i) CHECK(still.success[i] <= still.success[i - 1]);
}

TEST_CASE("degenerate ground truth frames are excluded") {
    SequenceResult s{"x", "plain", {10, 10}, {}};
    s.frames.push_back(FrameResult{1, {0.5, 0.5, 0.1, 0.1}, {0.5, 0.5, 0.1, 0.1}, 1.0, 0.0, 0.0, true});
    s.frames.push_back(FrameResult{2, {0.5, 0.5, 0.1, 0.1}, {0.5, 0.5, 0.0, 0.1}, 0.0, 0.0, 0.0, false});
    auto r = build_report({s});
    CHECK(r.excluded_frames == 1);
    CHECK(r.overall.frames == 1);
    s.frames.erase(s.frames.begin());
    CHECK_THROWS_AS(build_report({s}), DataError);
}

TEST_CASE("report JSON round trip and emitted files") {
    auto ds = make_dataset(Scenario::plain, 0, 0, 1, 2);
    auto r = build_report(run_ope(static_tracker(), ds.test, {}));
    CHECK(report_from_json(to_json(r)) == r);
    auto dir = std::filesystem::temp_directory_path() / "evtrack_unit" / "report";
    std::filesystem::remove_all(dir);
    emit_report(r, dir);
    for (auto f : {"report.json", "success.csv", "precision.csv", "norm_precision.csv", "success.svg", "norm_precision.svg"}) {
        CHECK(std::filesystem::exists(dir / f));
    }
    auto csv = slurp(dir / "success.csv");
    CHECK(csv.rfind("threshold,value\n0.00,1.000000\n", 0) == 0);
    CHECK(slurp(dir / "success.svg").find("<svg") != std::string::npos);
}
