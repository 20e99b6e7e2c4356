#include "evtrack/danet.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include "evtrack/errors.hpp"

namespace evtrack {

// ---- configuration ----

int ModelConfig::total_stride() const {
    int s = 1;
    for (int v : backbone_strides) s *= v;
    return s;
}

int ModelConfig::kernel_size() const {
    if (template_kernel > 0) return template_kernel;
    int g = template_grid();
    return g % 2 == 1 ? g : g - 1;
}

void ModelConfig::validate() const {
    auto fail = [](const std::string& msg) { throw DataError("invalid model config: " + msg); };
    if (backbone_channels.empty() || backbone_channels.size() != backbone_strides.size()) {
        fail("backbone channel and stride schedules must be non-empty and equally long");
    }
    for (int s : backbone_strides)
        if (s < 1) fail("backbone strides must be >= 1");
    for (int c : backbone_channels)
        if (c < 1) fail("backbone channels must be >= 1");
    if (blocks_per_stage < 1) fail("blocks_per_stage must be >= 1");
    const int s = total_stride();
    if (template_size < 1 || search_size < 1) fail("input sizes must be positive");
    if (template_size % s != 0 || search_size % s != 0) {
        fail("template/search sizes must be divisible by the total stride " + std::to_string(s));
    }
    if (representation == Representation::voxel && voxel_bins < 1) fail("voxel_bins must be >= 1");
    const int k = kernel_size();
    if (k < 1 || k % 2 == 0) fail("template kernel must be odd, got " + std::to_string(k));
    if (k > template_grid()) fail("template kernel " + std::to_string(k) + " exceeds template grid " + std::to_string(template_grid()));
    if (width < 1 || heads < 1 || width % heads != 0) fail("width must be divisible by heads");
    if (tan_encoders < 0 || tan_decoders < 0 || man_encoders < 0) fail("block counts must be >= 0");
    if (ffn_hidden < 1) fail("ffn_hidden must be >= 1");
    if (dropout < 0.0 || dropout >= 1.0) fail("dropout must lie in [0, 1)");
    if (man_stride < 1) fail("man_stride must be >= 1");
    if (use_man && man_grid() != search_grid()) {
        fail("MAN grid " + std::to_string(man_grid()) + " differs from TAN grid " + std::to_string(search_grid()) +
             " (fusion needs equal grids; use man_stride 1)");
    }
    if (!use_tan && !use_man) fail("at least one of TAN and MAN must be enabled");
    if (template_context <= 0.0 || search_context <= 0.0) fail("crop contexts must be positive");
}

ModelConfig ModelConfig::desk() { return ModelConfig{}; }

ModelConfig ModelConfig::paper() {
    ModelConfig c;
    c.template_size = 128;
    c.search_size = 272;
    c.backbone_channels = {16, 32, 64, 128};
    c.backbone_strides = {2, 2, 2, 2};
    c.width = 128;
    c.heads = 4;
    c.ffn_hidden = 2048;
    c.head_channels = {128, 64, 32, 16};
    return c;
}

namespace {
const char* to_string(Representation r) { return r == Representation::voxel ? "voxel" : "frame"; }
}  // namespace

nlohmann::json to_json(const ModelConfig& c) {
    return nlohmann::json{{"template_size", c.template_size},
                          {"search_size", c.search_size},
                          {"representation", to_string(c.representation)},
                          {"voxel_bins", c.voxel_bins},
                          {"backbone_channels", c.backbone_channels},
                          {"backbone_strides", c.backbone_strides},
                          {"blocks_per_stage", c.blocks_per_stage},
                          {"width", c.width},
                          {"heads", c.heads},
                          {"tan_encoders", c.tan_encoders},
                          {"tan_decoders", c.tan_decoders},
                          {"man_encoders", c.man_encoders},
                          {"ffn_hidden", c.ffn_hidden},
                          {"dropout", c.dropout},
                          {"positional_encoding", c.positional_encoding},
                          {"man_stride", c.man_stride},
                          {"template_kernel", c.template_kernel},
                          {"head_channels", c.head_channels},
                          {"template_context", c.template_context},
                          {"search_context", c.search_context},
                          {"use_tan", c.use_tan},
                          {"use_man", c.use_man},
                          {"self_attention", c.self_attention},
                          {"fusion_shortcut", c.fusion_shortcut}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
    ModelConfig c;
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j.at(key).get<std::decay_t<decltype(field)>>();
        };
        get("template_size", c.template_size);
        get("search_size", c.search_size);
        if (j.contains("representation")) {
            auto r = j.at("representation").get<std::string>();
            if (r == "frame") c.representation = Representation::frame;
            else if (r == "voxel") c.representation = Representation::voxel;
            else throw DataError("unknown representation '" + r + "'");
        }
        get("voxel_bins", c.voxel_bins);
        get("backbone_channels", c.backbone_channels);
        get("backbone_strides", c.backbone_strides);
        get("blocks_per_stage", c.blocks_per_stage);
        get("width", c.width);
        get("heads", c.heads);
        get("tan_encoders", c.tan_encoders);
        get("tan_decoders", c.tan_decoders);
        get("man_encoders", c.man_encoders);
        get("ffn_hidden", c.ffn_hidden);
        get("dropout", c.dropout);
        get("positional_encoding", c.positional_encoding);
        get("man_stride", c.man_stride);
        get("template_kernel", c.template_kernel);
        get("head_channels", c.head_channels);
        get("template_context", c.template_context);
        get("search_context", c.search_context);
        get("use_tan", c.use_tan);
        get("use_man", c.use_man);
        get("self_attention", c.self_attention);
        get("fusion_shortcut", c.fusion_shortcut);
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("invalid model config JSON: ") + e.what());
    }
    c.validate();
    return c;
}

// ---- parameters ----

namespace {

class Init {
public:
    explicit Init(std::uint64_t seed) : rng_(seed) {}

    Tensor normal(Shape shape, double stddev) {
        std::normal_distribution<double> n(0.0, stddev);
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = n(rng_);
        return Tensor::from(std::move(shape), std::move(v), true);
    }
    Tensor uniform(Shape shape, double bound) {
        std::uniform_real_distribution<double> u(-bound, bound);
        std::vector<double> v(shape_numel(shape));
        for (auto& x : v) x = u(rng_);
        return Tensor::from(std::move(shape), std::move(v), true);
    }
    Tensor constant(Shape shape, double value) { return Tensor::full(std::move(shape), value, true); }

    // He-normal for convs feeding ReLUs.
    Tensor conv(std::size_t out, std::size_t in, std::size_t k) {
        return normal({out, in, k, k}, std::sqrt(2.0 / static_cast<double>(in * k * k)));
    }
    // Glorot-uniform for projections.
    Tensor dense(std::size_t in, std::size_t out) {
        return uniform({in, out}, std::sqrt(6.0 / static_cast<double>(in + out)));
    }

private:
    std::mt19937_64 rng_;
};

// Without normalization layers the residual stream grows with depth, so the
// layers writing into it start small.
constexpr double kResidualInit = 0.1;

Tensor scale_init(Tensor t, double factor) {
    for (auto& v : t.mutable_data()) v *= factor;
    return t;
}

AttentionWeights init_attention(Init& init, std::size_t d, std::size_t heads) {
    AttentionWeights w;
    const std::size_t dk = d / heads;
    for (std::size_t h = 0; h < heads; ++h) {
        w.query.push_back(init.dense(d, dk));
        w.key.push_back(init.dense(d, dk));
        w.value.push_back(init.dense(d, dk));
    }
    w.output = scale_init(init.dense(heads * dk, d), kResidualInit);
    return w;
}

FfnWeights init_ffn(Init& init, std::size_t d, std::size_t hidden) {
    return FfnWeights{init.dense(d, hidden), init.constant({hidden}, 0.0), scale_init(init.dense(hidden, d), kResidualInit),
                      init.constant({d}, 0.0)};
}

ConvLayer init_conv(Init& init, std::size_t out, std::size_t in, std::size_t k, std::size_t stride, std::size_t pad) {
    return ConvLayer{init.conv(out, in, k), init.constant({out}, 0.0), stride, pad};
}

void add_attention(std::vector<NamedTensor>& out, const std::string& prefix, const AttentionWeights& w) {
    for (std::size_t h = 0; h < w.query.size(); ++h) {
        out.push_back({prefix + ".q." + std::to_string(h), w.query[h]});
        out.push_back({prefix + ".k." + std::to_string(h), w.key[h]});
        out.push_back({prefix + ".v." + std::to_string(h), w.value[h]});
    }
    out.push_back({prefix + ".o", w.output});
}

void add_ffn(std::vector<NamedTensor>& out, const std::string& prefix, const FfnWeights& w) {
    out.push_back({prefix + ".w1", w.w1});
    out.push_back({prefix + ".b1", w.b1});
    out.push_back({prefix + ".w2", w.w2});
    out.push_back({prefix + ".b2", w.b2});
}

void add_conv(std::vector<NamedTensor>& out, const std::string& prefix, const ConvLayer& c) {
    out.push_back({prefix + ".kernel", c.kernel});
    out.push_back({prefix + ".bias", c.bias});
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    Init init(seed);
    ModelParams p;
    std::size_t in = static_cast<std::size_t>(cfg.input_channels());
    for (std::size_t s = 0; s < cfg.backbone_channels.size(); ++s) {
        const auto out = static_cast<std::size_t>(cfg.backbone_channels[s]);
        for (int b = 0; b < cfg.blocks_per_stage; ++b) {
            const std::size_t stride = b == 0 ? static_cast<std::size_t>(cfg.backbone_strides[s]) : 1;
            p.backbone.push_back(ConvBnLayer{init.conv(out, in, 3), init.constant({out}, 1.0), init.constant({out}, 0.0),
                                             BatchNormState::make(out), stride});
            p.backbone_template_bn.push_back(BatchNormState::make(out));
            in = out;
        }
    }
    const auto C = static_cast<std::size_t>(cfg.feature_channels());
    const auto d = static_cast<std::size_t>(cfg.width);
    const auto heads = static_cast<std::size_t>(cfg.heads);
    const auto hidden = static_cast<std::size_t>(cfg.ffn_hidden);
    p.template_proj = init_conv(init, C, C, 3, 1, 1);
    p.search_proj = init_conv(init, C, C, 3, 1, 1);
    p.bottleneck = init_conv(init, d, C, 1, 1, 0);
    for (int i = 0; i < cfg.tan_encoders; ++i) p.tan_encoder.push_back({init_attention(init, d, heads), init_ffn(init, d, hidden)});
    for (int i = 0; i < cfg.tan_decoders; ++i) {
        p.tan_decoder.push_back({init_attention(init, d, heads), init_attention(init, d, heads), init_ffn(init, d, hidden)});
    }
    p.target_query = init.normal({1, d}, 1.0);
    p.man_compress = init_conv(init, d, C, 3, static_cast<std::size_t>(cfg.man_stride), 1);
    for (int i = 0; i < cfg.man_encoders; ++i) p.man_encoder.push_back({init_attention(init, d, heads), init_ffn(init, d, hidden)});

    auto build_head = [&](RegressionHead& head, std::size_t out_channels) {
        std::size_t ch = d;
        for (int c : cfg.head_channels) {
            const auto out = static_cast<std::size_t>(c);
            head.hidden.push_back(ConvBnLayer{init.conv(out, ch, 3), init.constant({out}, 1.0), init.constant({out}, 0.0),
                                              BatchNormState::make(out), 1});
            ch = out;
        }
        head.out = init_conv(init, out_channels, ch, 1, 1, 0);
        // Near-uniform center map and near-prior sizes at the start.
        scale_init(head.out.kernel, kResidualInit);
    };
    build_head(p.center_head, 1);
    build_head(p.size_head, 2);
    // Start the size readout near the size of a target framed by the search context.
    const double prior = 1.0 / cfg.search_context;
    std::fill(p.size_head.out.bias.mutable_data().begin(), p.size_head.out.bias.mutable_data().end(),
              std::log(prior / (1.0 - prior)));
    return p;
}

std::vector<NamedTensor> ModelParams::named_parameters() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
        auto prefix = "backbone." + std::to_string(i);
        out.push_back({prefix + ".kernel", backbone[i].kernel});
        out.push_back({prefix + ".gamma", backbone[i].gamma});
        out.push_back({prefix + ".beta", backbone[i].beta});
    }
    add_conv(out, "template_proj", template_proj);
    add_conv(out, "search_proj", search_proj);
    add_conv(out, "bottleneck", bottleneck);
    for (std::size_t i = 0; i < tan_encoder.size(); ++i) {
        auto prefix = "tan_encoder." + std::to_string(i);
        add_attention(out, prefix + ".attn", tan_encoder[i].attention);
        add_ffn(out, prefix + ".ffn", tan_encoder[i].ffn);
    }
    for (std::size_t i = 0; i < tan_decoder.size(); ++i) {
        auto prefix = "tan_decoder." + std::to_string(i);
        add_attention(out, prefix + ".self_attn", tan_decoder[i].self_attention);
        add_attention(out, prefix + ".cross_attn", tan_decoder[i].cross_attention);
        add_ffn(out, prefix + ".ffn", tan_decoder[i].ffn);
    }
    out.push_back({"target_query", target_query});
    add_conv(out, "man_compress", man_compress);
    for (std::size_t i = 0; i < man_encoder.size(); ++i) {
        auto prefix = "man_encoder." + std::to_string(i);
        add_attention(out, prefix + ".attn", man_encoder[i].attention);
        add_ffn(out, prefix + ".ffn", man_encoder[i].ffn);
    }
    for (const auto& [name, head] : {std::pair{"center_head", &center_head}, std::pair{"size_head", &size_head}}) {
        for (std::size_t i = 0; i < head->hidden.size(); ++i) {
            auto prefix = std::string(name) + "." + std::to_string(i);
            out.push_back({prefix + ".kernel", head->hidden[i].kernel});
            out.push_back({prefix + ".gamma", head->hidden[i].gamma});
            out.push_back({prefix + ".beta", head->hidden[i].beta});
        }
        add_conv(out, std::string(name) + "." + std::to_string(head->hidden.size()), head->out);
    }
    return out;
}

std::vector<NamedTensor> ModelParams::named_buffers() const {
    std::vector<NamedTensor> out;
    for (std::size_t i = 0; i < backbone.size(); ++i) {
        auto prefix = "backbone." + std::to_string(i);
        out.push_back({prefix + ".running_mean", backbone[i].bn.running_mean});
        out.push_back({prefix + ".running_var", backbone[i].bn.running_var});
        out.push_back({prefix + ".template_running_mean", backbone_template_bn[i].running_mean});
        out.push_back({prefix + ".template_running_var", backbone_template_bn[i].running_var});
    }
    for (const auto& [name, head] : {std::pair{"center_head", &center_head}, std::pair{"size_head", &size_head}}) {
        for (std::size_t i = 0; i < head->hidden.size(); ++i) {
            auto prefix = std::string(name) + "." + std::to_string(i);
            out.push_back({prefix + ".running_mean", head->hidden[i].bn.running_mean});
            out.push_back({prefix + ".running_var", head->hidden[i].bn.running_var});
        }
    }
    return out;
}

// ---- model ----

Danet::Danet(ModelConfig cfg, std::uint64_t seed) : Danet(cfg, init_params(cfg, seed)) {}

Danet::Danet(ModelConfig cfg, ModelParams params)
    : cfg_(std::move(cfg)),
      params_(std::move(params)),
      attn_(AttentionConfig::uniform(static_cast<std::size_t>(cfg_.width), static_cast<std::size_t>(cfg_.heads))) {
    cfg_.validate();
}

std::vector<Tensor> Danet::parameters() const {
    std::vector<Tensor> out;
    for (auto& nt : params_.named_parameters()) out.push_back(nt.tensor);
    return out;
}

Checkpoint Danet::to_checkpoint(nlohmann::json extra) const {
    Checkpoint ckpt;
    ckpt.manifest = std::move(extra);
    ckpt.manifest["model_config"] = to_json(cfg_);
    for (auto& nt : params_.named_parameters()) ckpt.tensors.push_back({nt.name, nt.tensor.clone()});
    for (auto& nt : params_.named_buffers()) ckpt.tensors.push_back({nt.name, nt.tensor.clone()});
    return ckpt;
}

Danet Danet::from_checkpoint(const Checkpoint& ckpt) {
    if (!ckpt.manifest.contains("model_config")) throw DataError("checkpoint manifest lacks model_config");
    auto cfg = model_config_from_json(ckpt.manifest.at("model_config"));
    Danet model(cfg, 0);
    auto assign = [&](const NamedTensor& target) {
        const Tensor* src = ckpt.find(target.name);
        if (!src) throw DataError("checkpoint/config mismatch: missing tensor '" + target.name + "'");
        if (src->shape() != target.tensor.shape()) {
            throw DataError("checkpoint/config mismatch: tensor '" + target.name + "' has shape " + shape_str(src->shape()) +
                            ", config expects " + shape_str(target.tensor.shape()));
        }
        auto dst = target.tensor;
        std::copy(src->data().begin(), src->data().end(), dst.mutable_data().begin());
    };
    for (auto& nt : model.params_.named_parameters()) assign(nt);
    for (auto& nt : model.params_.named_buffers()) assign(nt);
    return model;
}

Tensor Danet::extract_features(const Tensor& frames, Mode mode, Branch branch) const {
    const bool batched = frames.rank() == 4;
    if (!batched && frames.rank() != 3) throw ShapeError("extract_features: expected [Cin x H x W] or [N x Cin x H x W]");
    const std::size_t h = frames.dim(batched ? 2 : 1), w = frames.dim(batched ? 3 : 2);
    const auto s = static_cast<std::size_t>(cfg_.total_stride());
    if (h % s != 0 || w % s != 0) {
        throw ShapeError("extract_features: input " + std::to_string(h) + "x" + std::to_string(w) + " not divisible by stride " +
                         std::to_string(s));
    }
    Tensor x = batched ? frames : reshape(frames, {1, frames.dim(0), h, w});
    for (std::size_t i = 0; i < params_.backbone.size(); ++i) {
        const auto& layer = params_.backbone[i];
        auto& stats = branch == Branch::exemplar ? params_.backbone_template_bn[i] : layer.bn;
        x = conv2d(x, layer.kernel, layer.stride, 1);
        x = relu(batch_norm(x, layer.gamma, layer.beta, stats, mode));
    }
    return batched ? x : select(x, 0);
}

Tensor Danet::correlate(const Tensor& fz, const Tensor& fx) const {
    const auto k = static_cast<std::size_t>(cfg_.kernel_size());
    if (fz.rank() != 3 || k > fz.dim(1) || k > fz.dim(2)) throw ShapeError("tan_correlate: template grid smaller than kernel");
    if (k % 2 == 0) throw ShapeError("tan_correlate: template kernel must be odd");
    auto tz = center_crop(conv2d(fz, params_.template_proj.kernel, params_.template_proj.bias, 1, 1), k);
    auto tx = conv2d(fx, params_.search_proj.kernel, params_.search_proj.bias, 1, 1);
    // Mean over the template window keeps the response on the feature scale.
    return scale(depthwise_xcorr(tx, tz, (k - 1) / 2), 1.0 / static_cast<double>(k * k));
}

Tensor Danet::tan_correlate(const Tensor& fz, const Tensor& fx) const {
    return conv2d(correlate(fz, fx), params_.bottleneck.kernel, params_.bottleneck.bias, 1, 0);
}

Tensor Danet::positional(std::size_t grid) const { return sinusoidal_encoding_2d(grid, static_cast<std::size_t>(cfg_.width)); }

Tensor Danet::encoder_stack(Tensor x, const std::vector<EncoderBlock>& blocks, Mode mode, std::mt19937_64* rng) const {
    for (const auto& block : blocks) {
        Tensor fe = cfg_.self_attention ? add(x, multi_head_attention(x, x, x, attn_, block.attention)) : x;
        x = add(fe, ffn(fe, block.ffn, cfg_.dropout, mode, rng));
    }
    return x;
}

Tensor Danet::tan_encode(const Tensor& response, Mode mode, std::mt19937_64* rng) const {
    if (response.rank() != 3 || response.dim(0) != static_cast<std::size_t>(cfg_.width) || response.dim(1) != response.dim(2)) {
        throw ShapeError("tan_encode: expected [d x G x G], got " + shape_str(response.shape()));
    }
    auto tokens = to_tokens(response);
    if (cfg_.positional_encoding) tokens = add(tokens, positional(response.dim(1)));
    return encoder_stack(tokens, params_.tan_encoder, mode, rng);
}

Tensor Danet::tan_decode(const Tensor& memory, Mode mode, std::mt19937_64* rng) const {
    if (memory.rank() != 2 || memory.dim(1) != static_cast<std::size_t>(cfg_.width)) {
        throw ShapeError("tan_decode: expected [G^2 x d] memory, got " + shape_str(memory.shape()));
    }
    const Tensor& tq = params_.target_query;
    Tensor x = tq;
    for (const auto& block : params_.tan_decoder) {
        auto q = add(x, tq);
        auto a = add(x, multi_head_attention(q, q, x, attn_, block.self_attention));
        auto fd = add(a, multi_head_attention(add(a, tq), memory, memory, attn_, block.cross_attention));
        x = add(fd, ffn(fd, block.ffn, cfg_.dropout, mode, rng));
    }
    return x;
}

Tensor Danet::man_encode(const Tensor& fx, Mode mode, std::mt19937_64* rng) const {
    const auto& c = params_.man_compress;
    auto m = conv2d(fx, c.kernel, c.bias, c.stride, c.pad);
    const auto g = static_cast<std::size_t>(cfg_.search_grid());
    if (m.dim(1) != g || m.dim(2) != g) {
        throw ShapeError("man_encode: compressed grid " + std::to_string(m.dim(1)) + " differs from TAN grid " + std::to_string(g));
    }
    auto tokens = to_tokens(m);
    if (cfg_.positional_encoding) tokens = add(tokens, positional(g));
    return encoder_stack(tokens, params_.man_encoder, mode, rng);
}

Prediction Danet::regress(const Tensor& fused, Mode mode) const {
    if (fused.rank() != 3) throw ShapeError("regress: expected [d x G x G]");
    return regress_batch(reshape(fused, {1, fused.dim(0), fused.dim(1), fused.dim(2)}), mode).front();
}

std::vector<Prediction> Danet::regress_batch(const Tensor& fused, Mode mode) const {
    if (fused.rank() != 4 || fused.dim(2) != fused.dim(3)) throw ShapeError("regress: expected [N x d x G x G]");
    const std::size_t n = fused.dim(0), g = fused.dim(2);
    auto run = [&](const RegressionHead& head) {
        Tensor x = fused;
        for (const auto& layer : head.hidden) x = relu(batch_norm(conv2d(x, layer.kernel, layer.stride, 1), layer.gamma, layer.beta, layer.bn, mode));
        return conv2d(x, head.out.kernel, head.out.bias, head.out.stride, head.out.pad);
    };
    const auto center_logits = run(params_.center_head);
    const auto size_logits = sigmoid(run(params_.size_head));

    // Expected pixel position of cell (row r, col c) is ((c+1) s, (r+1) s), normalized by the crop size G s.
    std::vector<double> coords(g * g * 2);
    for (std::size_t r = 0; r < g; ++r)
        for (std::size_t c = 0; c < g; ++c) {
            coords[(r * g + c) * 2 + 0] = static_cast<double>(c + 1) / static_cast<double>(g);
            coords[(r * g + c) * 2 + 1] = static_cast<double>(r + 1) / static_cast<double>(g);
        }
    const auto grid = Tensor::from({g * g, 2}, std::move(coords));

    std::vector<Prediction> out;
    for (std::size_t i = 0; i < n; ++i) {
        auto prob = softmax(reshape(select(center_logits, i), {1, g * g}), 1);
        auto center = matmul(prob, grid);
        auto size = matmul(prob, to_tokens(select(size_logits, i)));
        out.push_back(Prediction{reshape(concat_cols({center, size}), {4}), reshape(prob, {g, g}), select(fused, i)});
    }
    return out;
}

Tensor Danet::fuse_features(const Tensor& fz, const Tensor& fx, Mode mode, std::mt19937_64* rng) const {
    const auto g = static_cast<std::size_t>(cfg_.search_grid());
    Tensor response, target, motion;
    if (cfg_.use_tan) {
        response = tan_encode(tan_correlate(fz, fx), mode, rng);
        target = tan_decode(response, mode, rng);
    }
    if (cfg_.use_man) motion = man_encode(fx, mode, rng);

    if (cfg_.use_tan && cfg_.use_man) return fuse(target, motion, response, g, cfg_.fusion_shortcut);
    // Without MAN the target embedding gates the TAN encoder output itself.
    if (cfg_.use_tan) return fuse(target, response, response, g, cfg_.fusion_shortcut);
    return from_tokens(motion, g, g);
}

Prediction Danet::head(const Tensor& fz, const Tensor& fx, Mode mode, std::mt19937_64* rng) const {
    return regress(fuse_features(fz, fx, mode, rng), mode);
}

Prediction Danet::forward(const Tensor& template_input, const Tensor& search_input, Mode mode, std::mt19937_64* rng) const {
    return head(extract_features(template_input, mode, Branch::exemplar), extract_features(search_input, mode), mode, rng);
}

std::vector<Prediction> Danet::forward_batch(const Tensor& templates, const Tensor& searches, Mode mode, std::mt19937_64* rng) const {
    if (templates.rank() != 4 || searches.rank() != 4 || templates.dim(0) != searches.dim(0)) {
        throw ShapeError("forward_batch: expected equally sized [N x Cin x H x W] batches");
    }
    auto fz = extract_features(templates, mode, Branch::exemplar);
    auto fx = extract_features(searches, mode);
    std::vector<Tensor> fused;
    for (std::size_t i = 0; i < templates.dim(0); ++i) fused.push_back(fuse_features(select(fz, i), select(fx, i), mode, rng));
    return regress_batch(stack(fused), mode);
}

Tensor fusion_gate(const Tensor& target, const Tensor& motion) {
    if (target.rank() != 2 || target.dim(0) != 1 || motion.rank() != 2 || motion.dim(1) != target.dim(1)) {
        throw ShapeError("fuse: expected T [1 x d] and M' [n x d]");
    }
    const double inv = 1.0 / std::sqrt(static_cast<double>(target.dim(1)));
    return reshape(sigmoid(scale(matmul(motion, transpose(target)), inv)), {motion.dim(0)});
}

Tensor fuse(const Tensor& target, const Tensor& motion, const Tensor& response, std::size_t grid, bool shortcut) {
    if (shortcut && response.shape() != motion.shape()) throw ShapeError("fuse: M' and R' shapes differ");
    if (motion.dim(0) != grid * grid) throw ShapeError("fuse: token count does not match grid");
    auto gated = row_scale(motion, fusion_gate(target, motion));
    return from_tokens(shortcut ? add(gated, response) : gated, grid, grid);
}

Tensor sinusoidal_encoding_2d(std::size_t grid, std::size_t width) {
    // First half of the channels encodes the row, second half the column.
    const std::size_t half = width / 2;
    std::vector<double> pe(grid * grid * width, 0.0);
    for (std::size_t r = 0; r < grid; ++r)
        for (std::size_t c = 0; c < grid; ++c) {
            double* row = pe.data() + (r * grid + c) * width;
            for (std::size_t k = 0; k < width; ++k) {
                const bool col_part = k >= half;
                const std::size_t kk = col_part ? k - half : k;
                const std::size_t span = col_part ? width - half : half;
                const double pos = static_cast<double>(col_part ? c : r);
                const double freq = std::pow(10000.0, -static_cast<double>(kk / 2 * 2) / static_cast<double>(std::max<std::size_t>(span, 1)));
                row[k] = kk % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq);
            }
        }
    return Tensor::from({grid * grid, width}, std::move(pe));
}

// ---- tracking ----

ChannelStack window_input(const EventStream& stream, std::size_t index, Timestamp dt, Representation representation,
                          int bins, int clip) {
    auto slice = window_events(stream, static_cast<Timestamp>(index) * dt, dt);
    if (representation == Representation::frame) return {normalize_frame(aggregate_frame(slice), clip)};
    if (clip < 1) throw DataError("clip must be >= 1");
    auto vox = voxel_grid(slice, bins);
    ChannelStack out;
    const std::size_t plane = std::size_t(vox.width) * vox.height;
    for (int b = 0; b < vox.bins; ++b) {
        Grid g(vox.width, vox.height);
        for (std::size_t i = 0; i < plane; ++i) {
            g.values[i] = std::clamp(vox.values[b * plane + i], -double(clip), double(clip)) / clip;
        }
        out.push_back(std::move(g));
    }
    return out;
}

Tensor crop_to_tensor(const ChannelStack& image, const BBoxN& box, double context, int size, CropTransform* transform) {
    if (image.empty()) throw DataError("crop: image has no channels");
    std::vector<double> data;
    data.reserve(image.size() * std::size_t(size) * size);
    for (const auto& channel : image) {
        auto crop = crop_resize(channel, box, context, size, size);
        data.insert(data.end(), crop.grid.values.begin(), crop.grid.values.end());
        if (transform) *transform = crop.transform;
    }
    return Tensor::from({image.size(), std::size_t(size), std::size_t(size)}, std::move(data));
}

Tensor DanetTracker::encode_template(const Tensor& template_crop) const {
    NoGradGuard no_grad;
    return model_.extract_features(template_crop, Mode::eval, Branch::exemplar);
}

BBoxN DanetTracker::predict(const TrackerState& state, const Tensor& search_crop, const CropTransform&) const {
    NoGradGuard no_grad;
    auto fx = model_.extract_features(search_crop, Mode::eval);
    last_ = model_.head(state.template_features, fx, Mode::eval, nullptr);
    const auto& b = last_.box;
    return BBoxN{b[0], b[1], b[2], b[3]};
}

namespace {

// Keeps the crop well defined when a prediction collapses.
BBoxN crop_anchor(const BBoxN& box, const ChannelStack& frame) {
    BBoxN b = box;
    const double min_w = 2.0 / frame.front().width, min_h = 2.0 / frame.front().height;
    b.w = std::max(b.w, min_w);
    b.h = std::max(b.h, min_h);
    return b;
}

}  // namespace

TrackerState track_init(const TrackingModel& model, const ChannelStack& frame, const BBoxN& gt_box) {
    if (!gt_box.has_positive_area()) throw DataError("track_init: degenerate ground-truth box");
    if (frame.empty()) throw DataError("track_init: empty frame");
    TrackerState state;
    state.template_context = model.template_context();
    state.search_context = model.search_context();
    auto crop = crop_to_tensor(frame, gt_box, state.template_context, model.template_size());
    state.template_features = model.encode_template(crop);
    state.previous = gt_box;
    state.frame_index = 0;
    state.initialized = true;
    return state;
}

std::pair<BBoxN, TrackerState> track_step(const TrackingModel& model, TrackerState state, const ChannelStack& frame) {
    if (!state.initialized) throw DataError("track_step: tracker state is not initialized");
    if (frame.empty()) throw DataError("track_step: empty frame");
    CropTransform tf;
    auto crop = crop_to_tensor(frame, crop_anchor(state.previous, frame), state.search_context, model.search_size(), &tf);
    BBoxN crop_box = model.predict(state, crop, tf);
    BBoxN image_box = clip_unit(tf.box_to_image(crop_box, frame.front().width, frame.front().height));
    state.previous = image_box;
    ++state.frame_index;
    return {image_box, std::move(state)};
}

void write_pgm(const std::filesystem::path& path, std::span<const double> values, std::size_t width, std::size_t height) {
    if (values.size() != width * height) throw DataError("write_pgm: size mismatch");
    double lo = values.empty() ? 0.0 : values[0], hi = lo;
    for (double v : values) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out << "P5\n" << width << ' ' << height << "\n255\n";
    for (double v : values) {
        const double t = hi > lo ? (v - lo) / (hi - lo) : 0.0;
        out.put(static_cast<char>(static_cast<unsigned char>(std::lround(t * 255.0))));
    }
}

}  // namespace evtrack
