#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <utility>
#include <vector>

#include <json.hpp>

#include "evtrack/bbox.hpp"
#include "evtrack/checkpoint.hpp"
#include "evtrack/event_core.hpp"
#include "evtrack/ops.hpp"

namespace evtrack {

enum class Representation { frame, voxel };

/// Architecture and input geometry. The desk preset is the default; the
/// paper preset reproduces the published widths and the 17x17 search grid.
struct ModelConfig {
    int template_size = 48;
    int search_size = 96;
    Representation representation = Representation::frame;
    int voxel_bins = 3;

    // Backbone: one stride-s Conv-BN-ReLU per stage, plus `blocks_per_stage - 1`
    // stride-1 Conv-BN-ReLU layers.
    std::vector<int> backbone_channels{8, 16, 32};
    std::vector<int> backbone_strides{2, 2, 2};
    int blocks_per_stage = 1;

    int width = 32;  // transformer width d
    int heads = 2;
    int tan_encoders = 3;
    int tan_decoders = 3;
    int man_encoders = 2;
    int ffn_hidden = 128;
    double dropout = 0.1;
    bool positional_encoding = true;
    int man_stride = 1;
    int template_kernel = 0;  // 0: largest odd size that fits the template grid
    std::vector<int> head_channels{16, 8};

    double template_context = 2.0;
    double search_context = 4.0;

    // Ablation switches.
    bool use_tan = true;
    bool use_man = true;
    bool self_attention = true;
    bool fusion_shortcut = true;

    int input_channels() const { return representation == Representation::voxel ? voxel_bins : 1; }
    int feature_channels() const { return backbone_channels.empty() ? 0 : backbone_channels.back(); }
    int total_stride() const;
    int search_grid() const { return search_size / total_stride(); }
    int template_grid() const { return template_size / total_stride(); }
    int kernel_size() const;
    int man_grid() const { return (search_grid() + 2 - 3) / man_stride + 1; }

    /// Throws DataError when the configuration violates a shape contract
    /// (including the TAN/MAN grid equality).
    void validate() const;

    static ModelConfig desk();
    static ModelConfig paper();
};

nlohmann::json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

struct ConvBnLayer {
    Tensor kernel;
    Tensor gamma;
    Tensor beta;
    mutable BatchNormState bn;  // running statistics are buffers, updated in train mode
    std::size_t stride = 1;
};

struct ConvLayer {
    Tensor kernel;
    Tensor bias;
    std::size_t stride = 1;
    std::size_t pad = 0;
};

/// Which crop a backbone pass sees; selects the batch-norm running statistics.
enum class Branch { exemplar, search };

/// Conv-BN-ReLU stages followed by a 1x1 output conv.
struct RegressionHead {
    std::vector<ConvBnLayer> hidden;
    ConvLayer out;
};

struct EncoderBlock {
    AttentionWeights attention;
    FfnWeights ffn;
};

struct DecoderBlock {
    AttentionWeights self_attention;
    AttentionWeights cross_attention;
    FfnWeights ffn;
};

struct ModelParams {
    std::vector<ConvBnLayer> backbone;  // running statistics of search crops
    // Template crops are framed differently, so the backbone keeps their
    // running statistics apart. Weights and affine terms are shared.
    mutable std::vector<BatchNormState> backbone_template_bn;
    ConvLayer template_proj;  // applied to template features before correlation
    ConvLayer search_proj;    // applied to search features before correlation
    ConvLayer bottleneck;     // 1x1, C -> d
    std::vector<EncoderBlock> tan_encoder;
    std::vector<DecoderBlock> tan_decoder;
    Tensor target_query;  // [1 x d]
    ConvLayer man_compress;
    std::vector<EncoderBlock> man_encoder;
    RegressionHead center_head;  // 1 output channel
    RegressionHead size_head;    // 2 output channels

    /// Learnable tensors with stable dotted names.
    std::vector<NamedTensor> named_parameters() const;
    /// Non-learnable state (batch-norm running statistics).
    std::vector<NamedTensor> named_buffers() const;
};

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed);

/// Box prediction plus the maps it was read from.
struct Prediction {
    Tensor box;          // [4]: cx, cy, w, h in search-crop coordinates
    Tensor center_prob;  // [G x G], sums to 1
    Tensor fused;        // [d x G x G]
};

class Danet {
public:
    explicit Danet(ModelConfig cfg, std::uint64_t seed = 1);
    Danet(ModelConfig cfg, ModelParams params);

    const ModelConfig& config() const { return cfg_; }
    ModelParams& params() { return params_; }
    const ModelParams& params() const { return params_; }
    std::vector<Tensor> parameters() const;

    Checkpoint to_checkpoint(nlohmann::json extra = nlohmann::json::object()) const;
    static Danet from_checkpoint(const Checkpoint& ckpt);

    /// frames [N x Cin x H x W] or [Cin x H x W] -> [N x C x H/s x W/s] (or unbatched).
    Tensor extract_features(const Tensor& frames, Mode mode, Branch branch = Branch::search) const;
    /// Depthwise correlation of the projected features, before the bottleneck: [C x G x G].
    Tensor correlate(const Tensor& template_features, const Tensor& search_features) const;
    /// Correlation followed by the 1x1 bottleneck: [d x G x G].
    Tensor tan_correlate(const Tensor& template_features, const Tensor& search_features) const;
    /// [d x G x G] -> [G^2 x d].
    Tensor tan_encode(const Tensor& response, Mode mode, std::mt19937_64* rng) const;
    /// [G^2 x d] -> target embedding [1 x d].
    Tensor tan_decode(const Tensor& memory, Mode mode, std::mt19937_64* rng) const;
    /// Search features [C x G0 x G0] -> [G^2 x d].
    Tensor man_encode(const Tensor& search_features, Mode mode, std::mt19937_64* rng) const;
    /// Template and search features of one sample -> fused features [d x G x G].
    Tensor fuse_features(const Tensor& template_features, const Tensor& search_features, Mode mode, std::mt19937_64* rng) const;
    /// Soft-argmax box readout from fused features [d x G x G].
    Prediction regress(const Tensor& fused, Mode mode = Mode::eval) const;
    /// Readout of a stacked batch [N x d x G x G]; head batch norm spans the batch.
    std::vector<Prediction> regress_batch(const Tensor& fused, Mode mode) const;

    /// Everything after the backbone for one sample.
    Prediction head(const Tensor& template_features, const Tensor& search_features, Mode mode, std::mt19937_64* rng) const;
    /// One template/search pair, inputs [Cin x H x W].
    Prediction forward(const Tensor& template_input, const Tensor& search_input, Mode mode, std::mt19937_64* rng = nullptr) const;
    /// Batched inputs [N x Cin x H x W]; batch-norm statistics span the batch.
    std::vector<Prediction> forward_batch(const Tensor& templates, const Tensor& searches, Mode mode,
                                          std::mt19937_64* rng = nullptr) const;

private:
    Tensor encoder_stack(Tensor tokens, const std::vector<EncoderBlock>& blocks, Mode mode, std::mt19937_64* rng) const;
    Tensor positional(std::size_t grid) const;

    ModelConfig cfg_;
    ModelParams params_;
    AttentionConfig attn_;
};

/// gate_j = sigmoid(<M'_j, T> / sqrt(d)); fused_j = M'_j * gate_j (+ R'_j when
/// shortcut). Returns [d x G x G].
Tensor fuse(const Tensor& target, const Tensor& motion, const Tensor& response, std::size_t grid, bool shortcut = true);
/// The per-token gate values of `fuse`, [G^2].
Tensor fusion_gate(const Tensor& target, const Tensor& motion);

/// Fixed 2-D sinusoidal encoding for a grid x grid token map, [grid^2 x d].
Tensor sinusoidal_encoding_2d(std::size_t grid, std::size_t width);

// ---- tracking ----

/// One input image as a stack of channels (1 for event frames, B for voxel grids).
using ChannelStack = std::vector<Grid>;

/// Network input for window `index` of a stream: one normalized event frame,
/// or `bins` voxel planes clamped and scaled the same way.
ChannelStack window_input(const EventStream& stream, std::size_t index, Timestamp dt, Representation representation,
                          int bins, int clip = kDefaultClip);

/// Crops every channel around `box` and packs the result as [C x h x w].
Tensor crop_to_tensor(const ChannelStack& image, const BBoxN& box, double context, int size, CropTransform* transform = nullptr);

struct TrackerState {
    Tensor template_features;  // [C x h_z x w_z]
    BBoxN previous;            // image-normalized
    double template_context = 2.0;
    double search_context = 4.0;
    std::size_t frame_index = 0;
    bool initialized = false;
};

/// What the tracking loop needs from a model. Danet implements it; tests can
/// substitute stubs.
class TrackingModel {
public:
    virtual ~TrackingModel() = default;
    virtual int template_size() const = 0;
    virtual int search_size() const = 0;
    virtual double template_context() const = 0;
    virtual double search_context() const = 0;
    virtual Tensor encode_template(const Tensor& template_crop) const = 0;
    /// Box in search-crop coordinates.
    virtual BBoxN predict(const TrackerState& state, const Tensor& search_crop, const CropTransform& crop) const = 0;
};

class DanetTracker : public TrackingModel {
public:
    explicit DanetTracker(const Danet& model) : model_(model) {}
    int template_size() const override { return model_.config().template_size; }
    int search_size() const override { return model_.config().search_size; }
    double template_context() const override { return model_.config().template_context; }
    double search_context() const override { return model_.config().search_context; }
    Tensor encode_template(const Tensor& template_crop) const override;
    BBoxN predict(const TrackerState& state, const Tensor& search_crop, const CropTransform& crop) const override;

    /// Last center-probability and fused maps (for heatmap dumps); empty until predict runs.
    const Prediction& last_prediction() const { return last_; }

private:
    const Danet& model_;
    mutable Prediction last_;
};

TrackerState track_init(const TrackingModel& model, const ChannelStack& frame, const BBoxN& gt_box);
/// Crops around the previous box, predicts, maps back to the image frame and
/// clips into [0,1]. The template is never updated.
std::pair<BBoxN, TrackerState> track_step(const TrackingModel& model, TrackerState state, const ChannelStack& frame);

/// 8-bit binary PGM (P5), min-max scaled.
void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t width, std::size_t height);

}  // namespace evtrack
