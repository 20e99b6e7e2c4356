#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "evtrack/bbox.hpp"
#include "evtrack/danet.hpp"
#include "evtrack/evsim.hpp"

namespace evtrack {

struct LossConfig {
    double lambda_iou = 1.0;
    double lambda_l1 = 5.0;

    void validate() const;
    /// Loss-weight study rows: "A" (1,2), "B" (1,1), "C" (2,1), "ours" (1,5).
    static LossConfig preset(std::string_view name);
};

/// Generalized IoU of two positive-area boxes, in (-1, 1]. Throws DataError
/// on a degenerate box.
double giou(const BBoxN& a, const BBoxN& b);

struct LossTerms {
    Tensor total;        // scalar
    double giou_term = 0;  // lambda_iou * (1 - GIoU)
    double l1_term = 0;    // lambda_l1 * sum |pred - gt|
};

/// pred: [4] tensor (cx, cy, w, h). Width and height are clamped to >= 1e-4
/// inside the GIoU term only.
LossTerms box_loss(const Tensor& pred, const BBoxN& gt, const LossConfig& cfg);
inline Tensor loss(const Tensor& pred, const BBoxN& gt, const LossConfig& cfg) { return box_loss(pred, gt, cfg).total; }

struct TrainConfig {
    int epochs = 12;  // the first one is warm-up
    int warmup_epochs = 1;
    int pairs_per_epoch = 512;
    int batch_size = 16;
    double lr_start = 1e-5;
    double lr_peak = 1e-2;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double clip_norm = 10.0;
    int max_gap = 20;           // frames between template and search
    double shift_px = 8.0;      // search-crop center jitter, per axis
    double scale_min = 0.5;     // search-crop size jitter (log-uniform)
    double scale_max = 2.0;
    LossConfig loss;
    std::uint64_t seed = 1;

    int steps_per_epoch() const { return (pairs_per_epoch + batch_size - 1) / batch_size; }
    int total_steps() const { return steps_per_epoch() * epochs; }
    void validate() const;  // throws DataError

    static TrainConfig desk();
    static TrainConfig paper();
    /// Two short epochs for smoke tests.
    static TrainConfig smoke();
};

nlohmann::json to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const nlohmann::json& j);

/// Linear warm-up across the warm-up epochs (reaching lr_peak on the last
/// warm-up step), then cosine annealing to 0 on the final step.
double lr_schedule(int step, const TrainConfig& cfg);

struct TrainingPair {
    Tensor template_input;  // [Cin x t x t]
    Tensor search_input;    // [Cin x s x s]
    BBoxN template_box;     // image-normalized
    BBoxN search_box;       // search-crop coordinates
    std::size_t sequence = 0;
    std::size_t template_frame = 0;
    std::size_t search_frame = 0;
};

/// Two frames of one sequence at most max_gap apart. The search crop is
/// centered on the ground truth shifted and scaled by the configured jitter.
TrainingPair sample_pair(std::span<const SyntheticSequence> dataset, const ModelConfig& model, const TrainConfig& cfg,
                         std::mt19937_64& rng);

struct SgdConfig {
    double momentum = 0.9;
    double weight_decay = 1e-4;
    double clip_norm = 10.0;  // <= 0 disables clipping
};

/// Global-norm clip (written back into the grads), then
/// v = momentum * v + g and p -= lr * v + lr * weight_decay * p.
/// `velocity` is resized on first use. Returns the pre-clip gradient norm.
/// Throws NumericError naming the first parameter with a non-finite gradient.
double sgd_step(std::span<NamedTensor> params, std::vector<std::vector<double>>& velocity, double lr, const SgdConfig& cfg);

struct StepLog {
    int step = 0;
    int epoch = 0;
    double lr = 0;
    double loss = 0;
    double giou_term = 0;
    double l1_term = 0;
    double grad_norm = 0;  // before clipping
};

nlohmann::json to_json(const StepLog& s);

struct TrainOptions {
    std::optional<std::filesystem::path> log_path;        // JSON lines
    std::optional<std::filesystem::path> checkpoint_dir;  // epoch_XXX.ckpt per epoch
    std::function<void(const StepLog&)> on_step;
};

struct TrainResult {
    Danet model;
    std::vector<StepLog> log;
    std::vector<double> epoch_loss;  // mean loss per epoch
};

/// Deterministic given cfg.seed. Throws NumericError with the step index on a
/// non-finite loss.
TrainResult train(const ModelConfig& model_cfg, const TrainConfig& cfg, std::span<const SyntheticSequence> dataset,
                  const TrainOptions& options = {});

}  // namespace evtrack
