#pragma once

#include <cstddef>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "evtrack/bbox.hpp"
#include "evtrack/danet.hpp"
#include "evtrack/evsim.hpp"

namespace evtrack {

/// Intersection over union; 0 when either box has zero area.
double iou(const BBoxN& a, const BBoxN& b);

struct FrameResult {
    std::size_t frame = 0;
    BBoxN pred;
    BBoxN gt;
    double iou = 0.0;
    double center_error = 0.0;  // px
    double norm_error = 0.0;    // |(dcx / gt w, dcy / gt h)|
    bool valid = true;          // false when the gt box is degenerate

    friend bool operator==(const FrameResult&, const FrameResult&) = default;
};

struct SequenceResult {
    std::string name;
    std::string scenario;
    Geometry geometry;
    std::vector<FrameResult> frames;

    friend bool operator==(const SequenceResult&, const SequenceResult&) = default;
};

/// One tracker instance per sequence.
class OpeTracker {
public:
    virtual ~OpeTracker() = default;
    virtual void init(const ChannelStack& frame, const BBoxN& gt) = 0;
    virtual BBoxN update(const ChannelStack& frame) = 0;
};

using TrackerFactory = std::function<std::unique_ptr<OpeTracker>(const SyntheticSequence&)>;

/// Reports the ground truth (for harness checks).
TrackerFactory oracle_tracker();
/// Keeps the initial box forever.
TrackerFactory static_tracker();
/// The trained model. When `heatmap_dir` is set, center-probability and mean
/// fused-feature maps are written per frame as <seq>_<frame>_{center,fused}.pgm.
TrackerFactory danet_tracker(const Danet& model, std::optional<std::filesystem::path> heatmap_dir = std::nullopt);

struct InputSpec {
    Representation representation = Representation::frame;
    int voxel_bins = 3;
};

/// One-pass evaluation: initialize on frame 0's ground truth, never reset,
/// score every later frame. Sequences run on up to `workers` threads.
std::vector<SequenceResult> run_ope(const TrackerFactory& factory, std::span<const SyntheticSequence> sequences,
                                    const InputSpec& input, int workers = 1);

constexpr std::size_t kSuccessPoints = 101;    // 0, 0.01, ..., 1
constexpr std::size_t kPrecisionPoints = 51;   // 0, 1, ..., 50 px
constexpr std::size_t kNormPrecisionPoints = 51;  // 0, 0.01, ..., 0.5

double success_threshold(std::size_t i);
double precision_threshold(std::size_t i);
double norm_precision_threshold(std::size_t i);

/// rate(t) = fraction of IoUs >= t over the 101-point grid.
std::vector<double> success_curve(std::span<const double> ious);
/// Mean of the curve samples.
double auc(std::span<const double> curve);
/// Fraction of IoUs strictly greater than T.
double op_threshold(std::span<const double> ious, double T);
/// Fraction of errors <= each threshold.
std::vector<double> precision_curve(std::span<const double> center_errors);
std::vector<double> norm_precision_curve(std::span<const double> norm_errors);

struct MetricSummary {
    std::size_t frames = 0;
    double auc = 0.0;
    double op50 = 0.0;
    double op75 = 0.0;
    double precision20 = 0.0;
    double norm_precision20 = 0.0;

    friend bool operator==(const MetricSummary&, const MetricSummary&) = default;
};

struct EvalReport {
    std::vector<SequenceResult> sequences;
    std::vector<double> success;
    std::vector<double> precision;
    std::vector<double> norm_precision;
    MetricSummary overall;
    std::size_t excluded_frames = 0;
    std::map<std::string, MetricSummary> by_scenario;

    friend bool operator==(const EvalReport&, const EvalReport&) = default;
};

/// Throws DataError when no valid frame remains.
EvalReport build_report(std::vector<SequenceResult> sequences);

nlohmann::json to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);

/// report.json, success.csv, precision.csv, norm_precision.csv and SVG plots
/// of the success and normalized precision curves.
void emit_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace evtrack
