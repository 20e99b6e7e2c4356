#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "evtrack/danet.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/ops.hpp"
#include "oracles.hpp"

using namespace evtrack;

namespace {

ModelConfig tiny() {
    auto c = ModelConfig::desk();
    c.dropout = 0.0;
    return c;
}

// Moves cell perm[i] of a [d x G x G] map to cell i.
Tensor permute_cells(const Tensor& x, const std::vector<std::size_t>& perm) {
    const std::size_t d = x.dim(0), n = x.dim(1) * x.dim(2);
    std::vector<double> out(x.numel());
    for (std::size_t c = 0; c < d; ++c)
        for (std::size_t i = 0; i < n; ++i) out[c * n + i] = x[c * n + perm[i]];
    return Tensor::from(x.shape(), std::move(out));
}

// Same for token rows of [n x d].
std::vector<double> permute_rows(const Tensor& t, const std::vector<std::size_t>& perm) {
    const std::size_t d = t.dim(1);
    std::vector<double> out(t.numel());
    for (std::size_t i = 0; i < perm.size(); ++i)
        for (std::size_t c = 0; c < d; ++c) out[i * d + c] = t[perm[i] * d + c];
    return out;
}

double max_diff(std::span<const double> a, std::span<const double> b) {
    double m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("desk config geometry") {
    auto c = ModelConfig::desk();
    CHECK_NOTHROW(c.validate());
    CHECK(c.total_stride() == 8);
    CHECK(c.search_grid() == 12);
    CHECK(c.template_grid() == 6);
    CHECK(c.kernel_size() == 5);
    CHECK(c.man_grid() == c.search_grid());
}

TEST_CASE("paper config reproduces the 128 x 17 x 17 map") {
    auto c = ModelConfig::paper();
    CHECK_NOTHROW(c.validate());
    CHECK(c.search_grid() == 17);
    CHECK(c.feature_channels() == 128);
    CHECK(c.width == 128);
}

TEST_CASE("config validation rejects broken shape contracts") {
    auto c = ModelConfig::desk();
    c.heads = 3;  // 32 % 3 != 0
    CHECK_THROWS_AS(c.validate(), DataError);
    c = ModelConfig::desk();
    c.man_stride = 2;  // MAN grid no longer equals the TAN grid
    CHECK_THROWS_AS(c.validate(), DataError);
    c = ModelConfig::desk();
    c.use_tan = c.use_man = false;
    CHECK_THROWS_AS(c.validate(), DataError);
    c = ModelConfig::desk();
    c.search_size = 100;
    CHECK_THROWS_AS(c.validate(), DataError);
}

TEST_CASE("config JSON round trip") {
    auto c = ModelConfig::paper();
    c.use_man = false;
    c.representation = Representation::voxel;
    CHECK(to_json(model_config_from_json(to_json(c))) == to_json(c));
}

TEST_CASE("forward shapes and soft-argmax invariants") {
    Danet net(tiny(), 3);
    std::mt19937_64 rng(1);
    auto z = oracle::random_tensor({1, 48, 48}, rng), x = oracle::random_tensor({1, 96, 96}, rng);
    auto p = net.forward(z, x, Mode::eval);
    CHECK(p.box.shape() == Shape{4});
    CHECK(p.center_prob.shape() == Shape{12, 12});
    CHECK(p.fused.shape() == Shape{32, 12, 12});
    CHECK(std::accumulate(p.center_prob.data().begin(), p.center_prob.data().end(), 0.0) == doctest::Approx(1.0));
    for (double v : p.box.data()) {
        CHECK(v > 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("regress: uniform center map and constant size readout") {
    // A zeroed center head gives a uniform map; the center is then the mean of (i+1)/G.
    auto cfg = tiny();
    Danet net(cfg, 3);
    auto& center = net.params().center_head;
    std::fill(center.out.kernel.mutable_data().begin(), center.out.kernel.mutable_data().end(), 0.0);
    std::fill(center.out.bias.mutable_data().begin(), center.out.bias.mutable_data().end(), 0.0);
    auto p = net.regress(Tensor::zeros({32, 12, 12}));
    CHECK(p.box[0] == doctest::Approx(6.5 / 12));
    CHECK(p.box[1] == doctest::Approx(6.5 / 12));

    // A zeroed size head with bias b reads sigmoid(b) everywhere.
    auto& last = net.params().size_head.out;
    std::fill(last.kernel.mutable_data().begin(), last.kernel.mutable_data().end(), 0.0);
    last.bias.mutable_data()[0] = 0.0;
    last.bias.mutable_data()[1] = std::log(3.0);
    auto q = net.regress(Tensor::zeros({32, 12, 12}));
    CHECK(q.box[2] == doctest::Approx(0.5));
    CHECK(q.box[3] == doctest::Approx(0.75));
}

TEST_CASE("fusion gate and shortcut") {
    auto T = Tensor::from({1, 2}, {1.0, 0.0});
    auto M = Tensor::from({4, 2}, {2, 0, -2, 0, 0, 1, 0, 0});
    auto R = Tensor::full({4, 2}, 0.5);
    auto gate = fusion_gate(T, M);
    CHECK(gate[0] == doctest::Approx(1.0 / (1.0 + std::exp(-2.0 / std::sqrt(2.0)))));
    CHECK(gate[3] == doctest::Approx(0.5));
    auto with = fuse(T, M, R, 2, true), without = fuse(T, M, R, 2, false);
    CHECK(with.shape() == Shape{2, 2, 2});
    // Channel 0, cell 0: M * gate + R.
    CHECK(with[0] == doctest::Approx(2 * gate[0] + 0.5));
    CHECK(without[0] == doctest::Approx(2 * gate[0]));
    // Orthogonal target and motion tokens give a half-open gate.
    CHECK(gate[2] == doctest::Approx(0.5));
    CHECK_THROWS_AS(fuse(T, M, Tensor::zeros({3, 2}), 2, true), ShapeError);
}

TEST_CASE("encoders are permutation-equivariant without positional encoding") {
    auto cfg = tiny();
    cfg.positional_encoding = false;
    Danet net(cfg, 5);
    std::mt19937_64 rng(3);
    std::vector<std::size_t> perm(144);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);

    auto r = oracle::random_tensor({32, 12, 12}, rng);
    auto a = net.tan_encode(r, Mode::eval, nullptr);
    auto b = net.tan_encode(permute_cells(r, perm), Mode::eval, nullptr);
    CHECK(max_diff(permute_rows(a, perm), b.data()) < 1e-9);

    // A pointwise compression keeps the MAN path equivariant too.
    auto& k = net.params().man_compress.kernel;
    auto kd = k.mutable_data();
    for (std::size_t i = 0; i < kd.size(); ++i)
        if (i % 9 != 4) kd[i] = 0.0;
    auto f = oracle::random_tensor({32, 12, 12}, rng);
    auto m1 = net.man_encode(f, Mode::eval, nullptr);
    auto m2 = net.man_encode(permute_cells(f, perm), Mode::eval, nullptr);
    CHECK(max_diff(permute_rows(m1, perm), m2.data()) < 1e-9);
}

TEST_CASE("positional encoding breaks the equivariance") {
    Danet net(tiny(), 5);
    std::mt19937_64 rng(4);
    std::vector<std::size_t> perm(144);
    std::iota(perm.begin(), perm.end(), 0);
    std::swap(perm[0], perm[143]);
    auto r = oracle::random_tensor({32, 12, 12}, rng);
    auto a = net.tan_encode(r, Mode::eval, nullptr);
    auto b = net.tan_encode(permute_cells(r, perm), Mode::eval, nullptr);
    CHECK(max_diff(permute_rows(a, perm), b.data()) > 1e-6);
}

TEST_CASE("sinusoidal encoding: rows and columns in separate halves") {
    auto pe = sinusoidal_encoding_2d(3, 8);
    CHECK(pe.shape() == Shape{9, 8});
    // Cell (0,0): sin(0)=0, cos(0)=1 in both halves.
    CHECK(pe[0] == 0.0);
    CHECK(pe[1] == 1.0);
    CHECK(pe[4] == 0.0);
    // Cell (0,2) shares the row half with (0,0).
    for (int k = 0; k < 4; ++k) CHECK(pe[2 * 8 + k] == pe[k]);
    CHECK(pe[2 * 8 + 4] == doctest::Approx(std::sin(2.0)));
}

TEST_CASE("eval forward is bit-identical across runs and batch matches single") {
    Danet net(tiny(), 7);
    std::mt19937_64 rng(5);
    auto z = oracle::random_tensor({2, 1, 48, 48}, rng), x = oracle::random_tensor({2, 1, 96, 96}, rng);
    auto a = net.forward_batch(z, x, Mode::eval);
    auto b = net.forward_batch(z, x, Mode::eval);
    for (int i = 0; i < 2; ++i) CHECK(std::equal(a[i].box.data().begin(), a[i].box.data().end(), b[i].box.data().begin()));
    auto single = net.forward(select(z, 1), select(x, 1), Mode::eval);
    CHECK(max_diff(single.box.data(), a[1].box.data()) < 1e-12);
}

TEST_CASE("backbone keeps template and search statistics apart") {
    Danet net(tiny(), 8);
    std::mt19937_64 rng(9);
    auto z = oracle::random_tensor({4, 1, 48, 48}, rng);
    for (auto& v : z.mutable_data()) v = 3.0 + 2.0 * v;
    // Repeated passes on one batch pull the template running statistics onto its batch statistics.
    for (int i = 0; i < 200; ++i) net.extract_features(z, Mode::train, Branch::exemplar);
    const auto& p = net.params();
    for (double v : p.backbone[0].bn.running_mean.data()) CHECK(v == 0.0);
    for (double v : p.backbone[0].bn.running_var.data()) CHECK(v == 1.0);
    CHECK(max_diff(p.backbone[0].bn.running_mean.data(), p.backbone_template_bn[0].running_mean.data()) > 0.1);

    auto train = net.extract_features(z, Mode::train, Branch::exemplar);
    auto eval = net.extract_features(z, Mode::eval, Branch::exemplar);
    auto search_eval = net.extract_features(z, Mode::eval, Branch::search);
    double scale = 0;
    for (double v : train.data()) scale = std::max(scale, std::abs(v));
    // Running variance is unbiased, batch normalization biased: small layers differ by a few percent.
    CHECK(max_diff(train.data(), eval.data()) < 0.05 * scale);
    CHECK(max_diff(train.data(), search_eval.data()) > 0.5 * scale);
}

TEST_CASE("ablations change the computation path") {
    std::mt19937_64 rng(6);
    auto z = oracle::random_tensor({1, 48, 48}, rng), x = oracle::random_tensor({1, 96, 96}, rng);
    auto run = [&](auto edit) {
        auto c = tiny();
        edit(c);
        return Danet(c, 11).forward(z, x, Mode::eval).box;
    };
    auto full = run([](ModelConfig&) {});
    auto tan_only = run([](ModelConfig& c) { c.use_man = false; });
    auto man_only = run([](ModelConfig& c) { c.use_tan = false; });
    auto no_short = run([](ModelConfig& c) { c.fusion_shortcut = false; });
    CHECK(max_diff(full.data(), tan_only.data()) > 0);
    CHECK(max_diff(full.data(), man_only.data()) > 0);
    CHECK(max_diff(full.data(), no_short.data()) > 0);
}

TEST_CASE("checkpoint round trip and mismatch errors") {
    Danet net(tiny(), 9);
    auto ckpt = net.to_checkpoint({{"note", 1}});
    auto back = Danet::from_checkpoint(parse_checkpoint(serialize_checkpoint(ckpt)));
    CHECK(serialize_checkpoint(back.to_checkpoint({{"note", 1}})) == serialize_checkpoint(ckpt));

    auto missing = ckpt;
    missing.tensors.pop_back();
    CHECK_THROWS_AS(Danet::from_checkpoint(missing), DataError);
    auto reshaped = ckpt;
    reshaped.tensors[0].tensor = Tensor::zeros({1});
    CHECK_THROWS_AS(Danet::from_checkpoint(reshaped), DataError);
}

TEST_CASE("parameter names are unique and stable") {
    Danet net(tiny(), 1);
    auto named = net.params().named_parameters();
    std::set<std::string> names;
    for (auto& n : named) names.insert(n.name);
    CHECK(names.size() == named.size());
    CHECK(names.count("backbone.0.kernel") == 1);
    CHECK(names.count("target_query") == 1);
    CHECK(names.count("tan_encoder.0.attn.o") == 1);
}

TEST_CASE("tracking step returns a clipped image box and keeps the template") {
    Danet net(tiny(), 2);
    DanetTracker tracker(net);
    Grid frame(128, 128);
    frame.at(64, 64) = 1.0;
    auto state = track_init(tracker, {frame}, BBoxN{0.5, 0.5, 0.1, 0.1});
    auto tmpl = state.template_features.clone();
    auto [box, next] = track_step(tracker, state, {frame});
    CHECK(box.cx >= 0.0);
    CHECK(box.cx <= 1.0);
    CHECK(box.w > 0.0);
    CHECK(next.frame_index == state.frame_index + 1);
    CHECK(max_diff(next.template_features.data(), tmpl.data()) == 0.0);
    CHECK(tracker.last_prediction().center_prob.numel() == 144);
}
