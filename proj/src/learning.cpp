#include "evtrack/learning.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "evtrack/errors.hpp"

namespace evtrack {

// ---- loss ----

void LossConfig::validate() const {
    if (!(lambda_iou >= 0.0) || !(lambda_l1 >= 0.0)) throw DataError("loss weights must be >= 0");
}

LossConfig LossConfig::preset(std::string_view name) {
    if (name == "A") return {1.0, 2.0};
    if (name == "B") return {1.0, 1.0};
    if (name == "C") return {2.0, 1.0};
    if (name == "ours") return {1.0, 5.0};
    throw DataError("unknown loss preset '" + std::string(name) + "' (expected A, B, C or ours)");
}

double giou(const BBoxN& a, const BBoxN& b) {
    if (!a.has_positive_area() || !b.has_positive_area()) throw DataError("giou: degenerate box");
    const double iw = std::max(0.0, std::min(a.right(), b.right()) - std::max(a.left(), b.left()));
    const double ih = std::max(0.0, std::min(a.bottom(), b.bottom()) - std::max(a.top(), b.top()));
    const double inter = iw * ih;
    // Areas from the same edges as the intersection, so identical boxes give exactly 1.
    const double area_a = (a.right() - a.left()) * (a.bottom() - a.top());
    const double area_b = (b.right() - b.left()) * (b.bottom() - b.top());
    const double uni = area_a + area_b - inter;
    const double ew = std::max(a.right(), b.right()) - std::min(a.left(), b.left());
    const double eh = std::max(a.bottom(), b.bottom()) - std::min(a.top(), b.top());
    const double enclose = ew * eh;
    return inter / uni - (enclose - uni) / enclose;
}

LossTerms box_loss(const Tensor& pred, const BBoxN& gt, const LossConfig& cfg) {
    if (pred.numel() != 4) throw ShapeError("loss: prediction must have 4 components, got " + shape_str(pred.shape()));
    if (!gt.has_positive_area()) throw DataError("loss: degenerate ground-truth box");
    const double min_size = 1e-4;
    auto p = reshape(pred, {4});
    auto cx = element(p, 0), cy = element(p, 1);
    auto w = clamp_min(element(p, 2), min_size), h = clamp_min(element(p, 3), min_size);
    auto l = cx - 0.5 * w, r = cx + 0.5 * w, t = cy - 0.5 * h, b = cy + 0.5 * h;
    auto g = [](double v) { return Tensor::scalar(v); };
    auto gl = g(gt.left()), gr = g(gt.right()), gtop = g(gt.top()), gb = g(gt.bottom());

    auto iw = relu(minimum(r, gr) - maximum(l, gl));
    auto ih = relu(minimum(b, gb) - maximum(t, gtop));
    auto inter = iw * ih;
    auto uni = w * h + gt.area() - inter;
    auto enclose = (maximum(r, gr) - minimum(l, gl)) * (maximum(b, gb) - minimum(t, gtop));
    auto giou_t = inter / uni - (enclose - uni) / enclose;
    auto giou_term = scale(1.0 - giou_t, cfg.lambda_iou);

    auto target = Tensor::from({4}, {gt.cx, gt.cy, gt.w, gt.h});
    auto l1_term = scale(sum(abs(p - target)), cfg.lambda_l1);
    return LossTerms{reshape(giou_term + l1_term, {1}), giou_term.item(), l1_term.item()};
}

// ---- configuration ----

void TrainConfig::validate() const {
    auto fail = [](const std::string& msg) { throw DataError("invalid train config: " + msg); };
    if (epochs < 1) fail("epochs must be >= 1");
    if (warmup_epochs < 0 || warmup_epochs > epochs) fail("warmup_epochs must lie in [0, epochs]");
    if (batch_size < 1) fail("batch_size must be >= 1");
    if (pairs_per_epoch < 1) fail("pairs_per_epoch must be >= 1");
    if (!(lr_start >= 0.0) || !(lr_peak >= 0.0)) fail("learning rates must be >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) fail("momentum must lie in [0, 1)");
    if (!(weight_decay >= 0.0)) fail("weight_decay must be >= 0");
    if (max_gap < 1) fail("max_gap must be >= 1");
    if (!(shift_px >= 0.0)) fail("shift_px must be >= 0");
    if (!(scale_min > 0.0) || !(scale_max >= scale_min)) fail("scale range must satisfy 0 < scale_min <= scale_max");
    loss.validate();
}

TrainConfig TrainConfig::desk() { return TrainConfig{}; }

TrainConfig TrainConfig::paper() {
    TrainConfig c;
    c.epochs = 20;
    c.pairs_per_epoch = 300000;
    c.batch_size = 128;
    c.lr_start = 1e-5;
    c.lr_peak = 8e-2;
    return c;
}

TrainConfig TrainConfig::smoke() {
    TrainConfig c;
    c.epochs = 2;
    c.pairs_per_epoch = 64;
    c.batch_size = 8;
    return c;
}

nlohmann::json to_json(const TrainConfig& c) {
    return nlohmann::json{{"epochs", c.epochs},
                          {"warmup_epochs", c.warmup_epochs},
                          {"pairs_per_epoch", c.pairs_per_epoch},
                          {"batch_size", c.batch_size},
                          {"lr_start", c.lr_start},
                          {"lr_peak", c.lr_peak},
                          {"momentum", c.momentum},
                          {"weight_decay", c.weight_decay},
                          {"clip_norm", c.clip_norm},
                          {"max_gap", c.max_gap},
                          {"shift_px", c.shift_px},
                          {"scale_min", c.scale_min},
                          {"scale_max", c.scale_max},
                          {"lambda_iou", c.loss.lambda_iou},
                          {"lambda_l1", c.loss.lambda_l1},
                          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("epochs", c.epochs);
        get("warmup_epochs", c.warmup_epochs);
        get("pairs_per_epoch", c.pairs_per_epoch);
        get("batch_size", c.batch_size);
        get("lr_start", c.lr_start);
        get("lr_peak", c.lr_peak);
        get("momentum", c.momentum);
        get("weight_decay", c.weight_decay);
        get("clip_norm", c.clip_norm);
        get("max_gap", c.max_gap);
        get("shift_px", c.shift_px);
        get("scale_min", c.scale_min);
        get("scale_max", c.scale_max);
        get("lambda_iou", c.loss.lambda_iou);
        get("lambda_l1", c.loss.lambda_l1);
        get("seed", c.seed);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid train config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

double lr_schedule(int step, const TrainConfig& cfg) {
    const int total = cfg.total_steps();
    if (step < 0 || step >= total) {
        throw DataError("lr_schedule: step " + std::to_string(step) + " outside [0, " + std::to_string(total) + ")");
    }
    const int warm = cfg.warmup_epochs * cfg.steps_per_epoch();
    if (step < warm) {
        if (warm == 1) return cfg.lr_peak;
        return cfg.lr_start + (cfg.lr_peak - cfg.lr_start) * static_cast<double>(step) / static_cast<double>(warm - 1);
    }
    // The cosine phase starts from the last warm-up step, where it equals lr_peak.
    const int origin = warm > 0 ? warm - 1 : 0;
    const int span = total - 1 - origin;
    if (span <= 0) return cfg.lr_peak;
    const double progress = static_cast<double>(step - origin) / static_cast<double>(span);
    return cfg.lr_peak * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- sampling ----

TrainingPair sample_pair(std::span<const SyntheticSequence> dataset, const ModelConfig& model, const TrainConfig& cfg,
                         std::mt19937_64& rng) {
    std::vector<std::size_t> usable;
    for (std::size_t i = 0; i < dataset.size(); ++i)
        if (dataset[i].boxes.size() >= 2) usable.push_back(i);
    if (usable.empty()) throw DataError("sample_pair: every sequence is shorter than 2 frames");

    const std::size_t s = usable[std::uniform_int_distribution<std::size_t>(0, usable.size() - 1)(rng)];
    const auto& seq = dataset[s];
    const std::size_t n = seq.boxes.size();
    const std::size_t ti = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    const std::size_t gap = static_cast<std::size_t>(cfg.max_gap);
    const std::size_t lo = ti > gap ? ti - gap : 0;
    const std::size_t hi = std::min(n - 1, ti + gap);
    // Draw from [lo, hi] without ti.
    std::size_t si = std::uniform_int_distribution<std::size_t>(lo, hi - 1)(rng);
    if (si >= ti) ++si;

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double W = seq.events.geometry.width, H = seq.events.geometry.height;
    const double dx = (2.0 * unit(rng) - 1.0) * cfg.shift_px;
    const double dy = (2.0 * unit(rng) - 1.0) * cfg.shift_px;
    const double scale = std::exp(std::log(cfg.scale_min) + unit(rng) * (std::log(cfg.scale_max) - std::log(cfg.scale_min)));

    const BBoxN& tbox = seq.boxes[ti];
    const BBoxN& sbox = seq.boxes[si];
    const BBoxN anchor{sbox.cx + dx / W, sbox.cy + dy / H, sbox.w * scale, sbox.h * scale};

    auto frame = [&](std::size_t index) {
        return window_input(seq.events, index, seq.window, model.representation, model.voxel_bins);
    };
    TrainingPair pair;
    pair.sequence = s;
    pair.template_frame = ti;
    pair.search_frame = si;
    pair.template_box = tbox;
    pair.template_input = crop_to_tensor(frame(ti), tbox, model.template_context, model.template_size);
    CropTransform tf;
    pair.search_input = crop_to_tensor(frame(si), anchor, model.search_context, model.search_size, &tf);
    pair.search_box = tf.box_to_crop(sbox, static_cast<int>(W), static_cast<int>(H));
    return pair;
}

// ---- optimizer ----

double sgd_step(std::span<NamedTensor> params, std::vector<std::vector<double>>& velocity, double lr, const SgdConfig& cfg) {
    if (velocity.size() != params.size()) {
        velocity.assign(params.size(), {});
        for (std::size_t i = 0; i < params.size(); ++i) velocity[i].assign(params[i].tensor.numel(), 0.0);
    }
    double sq = 0.0;
    for (const auto& [name, p] : params) {
        if (!p.has_grad()) continue;
        for (double g : p.grad()) {
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter '" + name + "'");
            sq += g * g;
        }
    }
    const double norm = std::sqrt(sq);
    const double factor = cfg.clip_norm > 0.0 && norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].tensor;
        auto values = p.mutable_data();
        auto& v = velocity[i];
        if (v.size() != values.size()) throw ShapeError("sgd_step: velocity buffer does not match '" + params[i].name + "'");
        std::span<double> grad;
        if (p.has_grad()) grad = p.mutable_grad();
        for (std::size_t k = 0; k < values.size(); ++k) {
            double g = 0.0;
            if (!grad.empty()) {
                if (factor != 1.0) grad[k] *= factor;
                g = grad[k];
            }
            v[k] = cfg.momentum * v[k] + g;
            values[k] -= lr * v[k] + lr * cfg.weight_decay * values[k];
        }
    }
    return norm;
}

// ---- training loop ----

nlohmann::json to_json(const StepLog& s) {
    return nlohmann::json{{"step", s.step},       {"epoch", s.epoch},         {"lr", s.lr},
                          {"loss", s.loss},       {"giou_term", s.giou_term}, {"l1_term", s.l1_term},
                          {"grad_norm", s.grad_norm}};
}

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const SyntheticSequence> dataset,
                  const TrainOptions& options) {
    model_cfg.validate();
    cfg.validate();
    if (dataset.empty()) throw DataError("train: empty dataset");

    TrainResult result{Danet(model_cfg, cfg.seed), {}, {}};
    Danet& model = result.model;
    auto params = model.params().named_parameters();
    std::vector<std::vector<double>> velocity;
    const SgdConfig sgd{cfg.momentum, cfg.weight_decay, cfg.clip_norm};

    std::mt19937_64 sample_rng(cfg.seed * 0x9E3779B97F4A7C15ull + 1);
    std::mt19937_64 dropout_rng(cfg.seed * 0xD1B54A32D192ED03ull + 2);

    std::ofstream log;
    if (options.log_path) {
        log.open(*options.log_path, std::ios::trunc);
        if (!log) throw DataError("cannot write training log " + options.log_path->string());
    }
    if (options.checkpoint_dir) {
        std::error_code ec;
        std::filesystem::create_directories(*options.checkpoint_dir, ec);
        if (ec) throw DataError("cannot create " + options.checkpoint_dir->string() + ": " + ec.message());
    }

    const int steps = cfg.steps_per_epoch();
    int global = 0;
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        double epoch_sum = 0.0;
        int remaining = cfg.pairs_per_epoch;
        for (int s = 0; s < steps; ++s, ++global) {
            const int batch = std::min(cfg.batch_size, remaining);
            remaining -= batch;
            std::vector<TrainingPair> pairs;
            std::vector<Tensor> templates, searches;
            for (int b = 0; b < batch; ++b) {
                pairs.push_back(sample_pair(dataset, model_cfg, cfg, sample_rng));
                templates.push_back(pairs.back().template_input);
                searches.push_back(pairs.back().search_input);
            }
            auto preds = model.forward_batch(stack(templates), stack(searches), Mode::train, &dropout_rng);

            Tensor total;
            double giou_sum = 0.0, l1_sum = 0.0;
            for (int b = 0; b < batch; ++b) {
                auto terms = box_loss(preds[b].box, pairs[b].search_box, cfg.loss);
                total = total.defined() ? add(total, terms.total) : terms.total;
                giou_sum += terms.giou_term;
                l1_sum += terms.l1_term;
            }
            total = scale(total, 1.0 / batch);
            const double value = total.item();
            if (!std::isfinite(value)) throw NumericError("non-finite loss at step " + std::to_string(global));

            for (auto& p : params) p.tensor.zero_grad();
            backward(total);
            const double lr = lr_schedule(global, cfg);
            const double norm = sgd_step(params, velocity, lr, sgd);

            StepLog entry{global, epoch, lr, value, giou_sum / batch, l1_sum / batch, norm};
            result.log.push_back(entry);
            epoch_sum += value;
            if (log) log << to_json(entry).dump() << '\n';
            if (options.on_step) options.on_step(entry);
        }
        result.epoch_loss.push_back(epoch_sum / steps);
        if (options.checkpoint_dir) {
            char name[32];
            std::snprintf(name, sizeof name, "epoch_%03d.ckpt", epoch);
            save_checkpoint(*options.checkpoint_dir / name,
                            model.to_checkpoint({{"epoch", epoch}, {"step", global}, {"train_config", to_json(cfg)}}));
        }
    }
    if (log) log.flush();
    return result;
}

}  // namespace evtrack
