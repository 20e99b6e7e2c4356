#include "evtrack/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "evtrack/errors.hpp"

namespace evtrack {

double iou(const BBoxN& a, const BBoxN& b) {
    if (!a.has_positive_area() || !b.has_positive_area()) return 0.0;
    const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
    const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
    const double inter = iw * ih;
    // Areas from the same edges as the intersection, so identical boxes give exactly 1.
    const double area_a = (a.right() - a.left()) * (a.bottom() - a.top());
    const double area_b = (b.right() - b.left()) * (b.bottom() - b.top());
    const double uni = area_a + area_b - inter;
    return uni > 0.0 ? std::clamp(inter / uni, 0.0, 1.0) : 0.0;
}

// ---- trackers ----

namespace {

class OracleTracker : public OpeTracker {
public:
    explicit OracleTracker(std::vector<BBoxN> boxes) : boxes_(std::move(boxes)) {}
    void init(const ChannelStack&, const BBoxN&) override { next_ = 1; }
    BBoxN update(const ChannelStack&) override {
        if (next_ >= boxes_.size()) throw DataError("oracle tracker ran past the ground truth");
        return boxes_[next_++];
    }

private:
    std::vector<BBoxN> boxes_;
    std::size_t next_ = 0;
};

class StaticTracker : public OpeTracker {
public:
    void init(const ChannelStack&, const BBoxN& gt) override { box_ = gt; }
    BBoxN update(const ChannelStack&) override { return box_; }

private:
    BBoxN box_;
};

class DanetOpeTracker : public OpeTracker {
public:
    DanetOpeTracker(const Danet& model, std::string name, std::optional<std::filesystem::path> heatmaps)
        : tracker_(model), name_(std::move(name)), heatmaps_(std::move(heatmaps)) {}

    void init(const ChannelStack& frame, const BBoxN& gt) override { state_ = track_init(tracker_, frame, gt); }

    BBoxN update(const ChannelStack& frame) override {
        auto [box, next] = track_step(tracker_, std::move(state_), frame);
        state_ = std::move(next);
        if (heatmaps_) dump();
        return box;
    }

private:
    void dump() const {
        const auto& pred = tracker_.last_prediction();
        const std::size_t g = pred.center_prob.dim(0);
        char stem[96];
        std::snprintf(stem, sizeof stem, "%s_%04zu", name_.c_str(), state_.frame_index);
        write_pgm(*heatmaps_ / (std::string(stem) + "_center.pgm"), pred.center_prob.data(), g, g);
        const std::size_t d = pred.fused.dim(0);
        std::vector<double> mean(g * g, 0.0);
        for (std::size_t c = 0; c < d; ++c)
            for (std::size_t i = 0; i < g * g; ++i) mean[i] += pred.fused[c * g * g + i] / static_cast<double>(d);
        write_pgm(*heatmaps_ / (std::string(stem) + "_fused.pgm"), mean, g, g);
    }

    DanetTracker tracker_;
    TrackerState state_;
    std::string name_;
    std::optional<std::filesystem::path> heatmaps_;
};

}  // namespace

TrackerFactory oracle_tracker() {
    return [](const SyntheticSequence& seq) { return std::make_unique<OracleTracker>(seq.boxes); };
}

TrackerFactory static_tracker() {
    return [](const SyntheticSequence&) { return std::make_unique<StaticTracker>(); };
}

TrackerFactory danet_tracker(const Danet& model, std::optional<std::filesystem::path> heatmap_dir) {
    if (heatmap_dir) {
        std::error_code ec;
        std::filesystem::create_directories(*heatmap_dir, ec);
        if (ec) throw DataError("cannot create " + heatmap_dir->string() + ": " + ec.message());
    }
    return [&model, heatmap_dir](const SyntheticSequence& seq) {
        return std::make_unique<DanetOpeTracker>(model, seq.name, heatmap_dir);
    };
}

// ---- one-pass evaluation ----

namespace {

SequenceResult evaluate_sequence(const TrackerFactory& factory, const SyntheticSequence& seq, const InputSpec& input) {
    if (seq.boxes.empty()) throw DataError("sequence " + seq.name + " has no ground truth for frame 0");
    if (!seq.boxes[0].has_positive_area()) throw DataError("sequence " + seq.name + ": frame 0 ground truth is degenerate");
    const auto& geo = seq.events.geometry;
    auto frame = [&](std::size_t k) { return window_input(seq.events, k, seq.window, input.representation, input.voxel_bins); };

    SequenceResult out;
    out.name = seq.name;
    out.scenario = to_string(seq.scenario);
    out.geometry = geo;
    auto tracker = factory(seq);
    tracker->init(frame(0), seq.boxes[0]);
    for (std::size_t k = 1; k < seq.boxes.size(); ++k) {
        FrameResult r;
        r.frame = k;
        r.gt = seq.boxes[k];
        r.pred = tracker->update(frame(k));
        r.valid = r.gt.has_positive_area();
        if (r.valid) {
            r.iou = iou(r.pred, r.gt);
            const double dx = (r.pred.cx - r.gt.cx) * geo.width, dy = (r.pred.cy - r.gt.cy) * geo.height;
            r.center_error = std::hypot(dx, dy);
            r.norm_error = std::hypot((r.pred.cx - r.gt.cx) / r.gt.w, (r.pred.cy - r.gt.cy) / r.gt.h);
        }
        out.frames.push_back(r);
    }
    return out;
}

}  // namespace

std::vector<SequenceResult> run_ope(const TrackerFactory& factory, std::span<const SyntheticSequence> sequences,
                                    const InputSpec& input, int workers) {
    std::vector<SequenceResult> out(sequences.size());
    const auto threads = std::min<std::size_t>(static_cast<std::size_t>(std::clamp(workers, 1, 64)), sequences.size());
    if (threads <= 1) {
        for (std::size_t i = 0; i < sequences.size(); ++i) out[i] = evaluate_sequence(factory, sequences[i], input);
        return out;
    }
    std::vector<std::thread> pool;
    std::vector<std::exception_ptr> errors(threads);
    for (std::size_t w = 0; w < threads; ++w) {
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < sequences.size(); i += threads) out[i] = evaluate_sequence(factory, sequences[i], input);
            } catch (...) {
                errors[w] = std::current_exception();
            }
        });
    }
    for (auto& t : pool) t.join();
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
    return out;
}

// ---- curves ----

double success_threshold(std::size_t i) { return static_cast<double>(i) / 100.0; }
double precision_threshold(std::size_t i) { return static_cast<double>(i); }
double norm_precision_threshold(std::size_t i) { return static_cast<double>(i) / 100.0; }

namespace {

template <typename Pred>
std::vector<double> rate_curve(std::span<const double> values, std::size_t points, Pred hit) {
    if (values.empty()) throw DataError("curve needs at least one frame");
    std::vector<double> curve(points);
    for (std::size_t i = 0; i < points; ++i) {
        std::size_t count = 0;
        for (double v : values) count += hit(v, i) ? 1 : 0;
        curve[i] = static_cast<double>(count) / static_cast<double>(values.size());
    }
    return curve;
}

}  // namespace

std::vector<double> success_curve(std::span<const double> ious) {
    return rate_curve(ious, kSuccessPoints, [](double v, std::size_t i) { return v >= success_threshold(i); });
}

double auc(std::span<const double> curve) {
    if (curve.empty()) throw DataError("auc: empty curve");
    double s = 0.0;
    for (double v : curve) s += v;
    return s / static_cast<double>(curve.size());
}

double op_threshold(std::span<const double> ious, double T) {
    if (ious.empty()) throw DataError("op_threshold: no frames");
    std::size_t count = 0;
    for (double v : ious) count += v > T ? 1 : 0;
    return static_cast<double>(count) / static_cast<double>(ious.size());
}

std::vector<double> precision_curve(std::span<const double> errors) {
    return rate_curve(errors, kPrecisionPoints, [](double v, std::size_t i) { return v <= precision_threshold(i); });
}

std::vector<double> norm_precision_curve(std::span<const double> errors) {
    return rate_curve(errors, kNormPrecisionPoints, [](double v, std::size_t i) { return v <= norm_precision_threshold(i); });
}

namespace {

struct Columns {
    std::vector<double> ious, center, norm;
};

void collect(const SequenceResult& seq, Columns& c, std::size_t& excluded) {
    for (const auto& f : seq.frames) {
        if (!f.valid) {
            ++excluded;
            continue;
        }
        c.ious.push_back(f.iou);
        c.center.push_back(f.center_error);
        c.norm.push_back(f.norm_error);
    }
}

MetricSummary summarize(const Columns& c) {
    MetricSummary m;
    m.frames = c.ious.size();
    if (m.frames == 0) return m;
    m.auc = auc(success_curve(c.ious));
    m.op50 = op_threshold(c.ious, 0.5);
    m.op75 = op_threshold(c.ious, 0.75);
    m.precision20 = precision_curve(c.center)[20];
    m.norm_precision20 = norm_precision_curve(c.norm)[20];
    return m;
}

}  // namespace

EvalReport build_report(std::vector<SequenceResult> sequences) {
    EvalReport r;
    Columns all;
    std::map<std::string, Columns> per;
    for (const auto& s : sequences) {
        std::size_t ignored = 0;
        collect(s, all, r.excluded_frames);
        collect(s, per[s.scenario], ignored);
    }
    if (all.ious.empty()) throw DataError("evaluation has no valid frames");
    r.success = success_curve(all.ious);
    r.precision = precision_curve(all.center);
    r.norm_precision = norm_precision_curve(all.norm);
    r.overall = summarize(all);
    for (const auto& [name, cols] : per) r.by_scenario[name] = summarize(cols);
    r.sequences = std::move(sequences);
    return r;
}

// ---- serialization ----

namespace {

nlohmann::json box_json(const BBoxN& b) { return nlohmann::json::array({b.cx, b.cy, b.w, b.h}); }

BBoxN box_from(const nlohmann::json& j) {
    return BBoxN{j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(), j.at(3).get<double>()};
}

nlohmann::json summary_json(const MetricSummary& m) {
    return nlohmann::json{{"frames", m.frames},           {"auc", m.auc},
                          {"op50", m.op50},               {"op75", m.op75},
                          {"precision20", m.precision20}, {"norm_precision20", m.norm_precision20}};
}

MetricSummary summary_from(const nlohmann::json& j) {
    MetricSummary m;
    j.at("frames").get_to(m.frames);
    j.at("auc").get_to(m.auc);
    j.at("op50").get_to(m.op50);
    j.at("op75").get_to(m.op75);
    j.at("precision20").get_to(m.precision20);
    j.at("norm_precision20").get_to(m.norm_precision20);
    return m;
}

}  // namespace

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json seqs = nlohmann::json::array();
    for (const auto& s : r.sequences) {
        nlohmann::json frames = nlohmann::json::array();
        for (const auto& f : s.frames) {
            frames.push_back({{"frame", f.frame},
                              {"pred", box_json(f.pred)},
                              {"gt", box_json(f.gt)},
                              {"iou", f.iou},
                              {"center_error", f.center_error},
                              {"norm_error", f.norm_error},
                              {"valid", f.valid}});
        }
        seqs.push_back({{"name", s.name},
                        {"scenario", s.scenario},
                        {"width", s.geometry.width},
                        {"height", s.geometry.height},
                        {"frames", frames}});
    }
    nlohmann::json scenarios = nlohmann::json::object();
    for (const auto& [name, m] : r.by_scenario) scenarios[name] = summary_json(m);
    return nlohmann::json{{"metrics", summary_json(r.overall)},
                          {"excluded_frames", r.excluded_frames},
                          {"success", r.success},
                          {"precision", r.precision},
                          {"norm_precision", r.norm_precision},
                          {"by_scenario", scenarios},
                          {"sequences", seqs}};
}

EvalReport report_from_json(const nlohmann::json& j) {
    EvalReport r;
    try {
        r.overall = summary_from(j.at("metrics"));
        j.at("excluded_frames").get_to(r.excluded_frames);
        j.at("success").get_to(r.success);
        j.at("precision").get_to(r.precision);
        j.at("norm_precision").get_to(r.norm_precision);
        for (const auto& [name, m] : j.at("by_scenario").items()) r.by_scenario[name] = summary_from(m);
        for (const auto& s : j.at("sequences")) {
            SequenceResult seq;
            s.at("name").get_to(seq.name);
            s.at("scenario").get_to(seq.scenario);
            seq.geometry = Geometry{s.at("width").get<std::uint32_t>(), s.at("height").get<std::uint32_t>()};
            for (const auto& f : s.at("frames")) {
                FrameResult fr;
                f.at("frame").get_to(fr.frame);
                fr.pred = box_from(f.at("pred"));
                fr.gt = box_from(f.at("gt"));
                f.at("iou").get_to(fr.iou);
                f.at("center_error").get_to(fr.center_error);
                f.at("norm_error").get_to(fr.norm_error);
                f.at("valid").get_to(fr.valid);
                seq.frames.push_back(fr);
            }
            r.sequences.push_back(std::move(seq));
        }
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid report JSON: ") + e.what());
    }
    return r;
}

// ---- files ----

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << text;
    if (!out) throw DataError("write failed for " + path.string());
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

std::string curve_csv(const std::vector<double>& curve, double (*threshold)(std::size_t)) {
    std::string out = "threshold,value\n";
    for (std::size_t i = 0; i < curve.size(); ++i) out += fmt("%.2f", threshold(i)) + "," + fmt("%.6f", curve[i]) + "\n";
    return out;
}

// Line plot on a fixed 800x600 canvas with a 0..1 y axis.
std::string curve_svg(const std::vector<double>& curve, double (*threshold)(std::size_t), const std::string& title,
                      const std::string& xlabel, const std::string& legend) {
    const double left = 80, right = 760, top = 60, bottom = 520;
    const double x_max = threshold(curve.size() - 1);
    auto px = [&](double x) { return left + (right - left) * x / x_max; };
    auto py = [&](double y) { return bottom - (bottom - top) * y; };

    std::string s;
    s += "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 800 600\" width=\"800\" height=\"600\">\n";
    s += "<rect width=\"800\" height=\"600\" fill=\"white\"/>\n";
    s += "<text x=\"400\" y=\"35\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"20\">" + title + "</text>\n";
    for (int i = 0; i <= 10; ++i) {
        const double y = i / 10.0, x = x_max * i / 10.0;
        s += "<line x1=\"" + fmt("%.1f", left) + "\" y1=\"" + fmt("%.1f", py(y)) + "\" x2=\"" + fmt("%.1f", right) + "\" y2=\"" +
             fmt("%.1f", py(y)) + "\" stroke=\"#ddd\"/>\n";
        s += "<text x=\"" + fmt("%.1f", left - 8) + "\" y=\"" + fmt("%.1f", py(y) + 4) +
             "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"12\">" + fmt("%.1f", y) + "</text>\n";
        s += "<text x=\"" + fmt("%.1f", px(x)) + "\" y=\"" + fmt("%.1f", bottom + 20) +
             "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"12\">" + fmt(x_max >= 10 ? "%.0f" : "%.2f", x) +
             "</text>\n";
    }
    s += "<rect x=\"" + fmt("%.1f", left) + "\" y=\"" + fmt("%.1f", top) + "\" width=\"" + fmt("%.1f", right - left) +
         "\" height=\"" + fmt("%.1f", bottom - top) + "\" fill=\"none\" stroke=\"black\"/>\n";
    s += "<text x=\"400\" y=\"565\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">" + xlabel + "</text>\n";
    s += "<polyline fill=\"none\" stroke=\"#c0392b\" stroke-width=\"2\" points=\"";
    for (std::size_t i = 0; i < curve.size(); ++i) {
        if (i) s += ' ';
        s += fmt("%.2f", px(threshold(i))) + "," + fmt("%.2f", py(curve[i]));
    }
    s += "\"/>\n";
    s += "<text x=\"" + fmt("%.1f", right - 10) + "\" y=\"" + fmt("%.1f", top + 24) +
         "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"14\">" + legend + "</text>\n";
    s += "</svg>\n";
    return s;
}

}  // namespace

void emit_report(const EvalReport& report, const std::filesystem::path& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) throw DataError("cannot create " + dir.string() + ": " + ec.message());
    write_file(dir / "report.json", to_json(report).dump(2) + "\n");
    write_file(dir / "success.csv", curve_csv(report.success, success_threshold));
    write_file(dir / "precision.csv", curve_csv(report.precision, precision_threshold));
    write_file(dir / "norm_precision.csv", curve_csv(report.norm_precision, norm_precision_threshold));
    write_file(dir / "success.svg", curve_svg(report.success, success_threshold, "Success plot", "Overlap threshold",
                                              "AUC " + fmt("%.4f", report.overall.auc)));
    write_file(dir / "norm_precision.svg",
               curve_svg(report.norm_precision, norm_precision_threshold, "Normalized precision plot",
                         "Normalized center error threshold", "NormPrec@0.2 " + fmt("%.4f", report.overall.norm_precision20)));
}

}  // namespace evtrack
