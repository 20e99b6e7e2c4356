#include <doctest.h>

#include <cmath>
#include <random>

#include "evtrack/checkpoint.hpp"
#include "evtrack/errors.hpp"
#include "evtrack/grad_check.hpp"
#include "evtrack/ops.hpp"
#include "oracles.hpp"

using namespace evtrack;

namespace {

double max_abs_diff(std::span<const double> a, const std::vector<double>& b) {
    REQUIRE(a.size() == b.size());
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("elementwise ops and scalar broadcasting") {
    auto a = Tensor::from({2, 2}, {1, -2, 3, -4});
    auto b = Tensor::from({2, 2}, {0.5, 0.5, 2, 2});
    CHECK((a + b)[1] == doctest::Approx(-1.5));
    CHECK((a * b)[3] == doctest::Approx(-8));
    CHECK((a / b)[2] == doctest::Approx(1.5));
    CHECK(relu(a)[1] == 0.0);
    CHECK(abs(a)[3] == 4.0);
    CHECK(add(a, Tensor::scalar(1.0))[0] == 2.0);
    CHECK_THROWS_AS(add(a, Tensor::zeros({3})), ShapeError);
}

TEST_CASE("matmul against hand values") {
    auto a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    auto b = Tensor::from({3, 2}, {7, 8, 9, 10, 11, 12});
    auto c = matmul(a, b);
    CHECK(c.shape() == Shape{2, 2});
    CHECK(c[0] == 58);
    CHECK(c[1] == 64);
    CHECK(c[2] == 139);
    CHECK(c[3] == 154);
    CHECK_THROWS_AS(matmul(a, a), ShapeError);
}

TEST_CASE("conv2d matches the naive oracle, stride and padding") {
    std::mt19937_64 rng(3);
    for (std::size_t stride : {1u, 2u})
        for (std::size_t pad : {0u, 1u}) {
            auto x = oracle::random_tensor({2, 3, 9, 7}, rng);
            auto k = oracle::random_tensor({4, 3, 3, 3}, rng);
            auto b = oracle::random_tensor({4}, rng);
            auto y = conv2d(x, k, b, stride, pad);
            CHECK(max_abs_diff(y.data(), oracle::conv2d(x, k, b, stride, pad)) < 1e-12);
        }
}

TEST_CASE("conv2d rejects mismatched channels") {
    CHECK_THROWS_AS(conv2d(Tensor::zeros({2, 5, 5}), Tensor::zeros({1, 3, 3, 3}), 1, 1), ShapeError);
}

TEST_CASE("depthwise_xcorr: delta template reproduces the search map") {
    std::mt19937_64 rng(4);
    auto s = oracle::random_tensor({2, 6, 6}, rng);
    std::vector<double> delta(2 * 3 * 3, 0.0);
    delta[4] = delta[9 + 4] = 1.0;
    auto y = depthwise_xcorr(s, Tensor::from({2, 3, 3}, delta), 1);
    CHECK(max_abs_diff(y.data(), std::vector<double>(s.data().begin(), s.data().end())) == 0.0);
}

TEST_CASE("softmax along each axis") {
    std::mt19937_64 rng(5);
    auto x = oracle::random_tensor({3, 4, 5}, rng);
    for (std::size_t axis = 0; axis < 3; ++axis) {
        auto y = softmax(x, axis);
        CHECK(max_abs_diff(y.data(), oracle::softmax({x.data().begin(), x.data().end()}, x.shape(), axis)) < 1e-12);
    }
    // Large logits do not overflow.
    auto big = softmax(Tensor::from({2}, {1000.0, 1000.0}), 0);
    CHECK(big[0] == doctest::Approx(0.5));
}

TEST_CASE("multi-head attention matches the oracle") {
    std::mt19937_64 rng(6);
    const auto cfg = AttentionConfig::uniform(8, 2);
    AttentionWeights w;
    std::vector<oracle::Mat> wq, wk, wv;
    for (int h = 0; h < 2; ++h) {
        w.query.push_back(oracle::random_tensor({8, 4}, rng));
        w.key.push_back(oracle::random_tensor({8, 4}, rng));
        w.value.push_back(oracle::random_tensor({8, 4}, rng));
        wq.push_back(oracle::mat(w.query.back()));
        wk.push_back(oracle::mat(w.key.back()));
        wv.push_back(oracle::mat(w.value.back()));
    }
    w.output = oracle::random_tensor({8, 8}, rng);
    auto q = oracle::random_tensor({3, 8}, rng), kv = oracle::random_tensor({5, 8}, rng);
    auto y = multi_head_attention(q, kv, kv, cfg, w);
    auto ref = oracle::attention(oracle::mat(q), oracle::mat(kv), oracle::mat(kv), wq, wk, wv, oracle::mat(w.output));
    CHECK(y.shape() == Shape{3, 8});
    CHECK(max_abs_diff(y.data(), ref.v) < 1e-12);
}

TEST_CASE("batch norm: train statistics, running update, eval mode") {
    auto x = Tensor::from({2, 1, 1, 2}, {1, 3, 5, 7});
    auto state = BatchNormState::make(1);
    auto g = Tensor::from({1}, {1.0}), b = Tensor::from({1}, {0.0});
    auto y = batch_norm(x, g, b, state, Mode::train);
    // mean 4, biased var 5
    CHECK(y[0] == doctest::Approx(-3.0 / std::sqrt(5.0 + 1e-5)));
    CHECK(state.running_mean[0] == doctest::Approx(0.4));
    CHECK(state.running_var[0] == doctest::Approx(0.9 + 0.1 * 20.0 / 3.0));
    auto e = batch_norm(x, g, b, state, Mode::eval);
    CHECK(e[0] == doctest::Approx((1 - 0.4) / std::sqrt(state.running_var[0] + 1e-5)));
}

TEST_CASE("dropout is identity in eval mode and unbiased in train mode") {
    auto x = Tensor::full({10000}, 1.0);
    CHECK(dropout(x, 0.5, Mode::eval, nullptr)[17] == 1.0);
    std::mt19937_64 rng(1);
    auto y = dropout(x, 0.25, Mode::train, &rng);
    double s = 0;
    for (double v : y.data()) {
        CHECK((v == 0.0 || v == doctest::Approx(1.0 / 0.75)));
        s += v;
    }
    CHECK(s / 10000 == doctest::Approx(1.0).epsilon(0.03));
}

TEST_CASE("backward accumulates into leaves") {
    auto a = Tensor::from({2}, {2, 3}, true);
    auto loss = sum(a * a);
    backward(loss);
    CHECK(a.grad()[0] == 4);
    CHECK(a.grad()[1] == 6);
    backward(sum(a * a));
    CHECK(a.grad()[0] == 8);
    a.zero_grad();
    CHECK(a.grad()[0] == 0);
}

TEST_CASE("no-grad guard builds no graph") {
    auto a = Tensor::from({2}, {1, 2}, true);
    NoGradGuard guard;
    auto y = a * a;
    CHECK_FALSE(y.requires_grad());
}

TEST_CASE("grad_check passes for composite expressions and flags a wrong gradient") {
    std::mt19937_64 rng(8);
    auto x = oracle::random_tensor({2, 5, 5}, rng, true);
    auto k = oracle::random_tensor({3, 2, 3, 3}, rng, true);
    auto f = [&] { return sum(sigmoid(conv2d(x, k, 1, 1))) * sum(softmax(conv2d(x, k, 2, 1), 1) * conv2d(x, k, 2, 1)); };
    auto r = grad_check(f, {x, k}, 1e-6, 100, 1);
    CHECK(r.coordinates_checked == 100);
    CHECK(r.max_relative_error < 1e-6);

    // An op whose backward is deliberately off by 2x is caught.
    auto bad = [&] {
        auto y = sum(x);
        return make_result({1}, {y.item()}, {x}, [xn = x.node_ptr()](const TensorNode& out) {
            auto& g = xn->grad_buffer();
            for (auto& v : g) v += 2.0 * out.grad[0];
        });
    };
    CHECK(grad_check(bad, {x}, 1e-6, 20, 2).max_relative_error > 0.4);
}

TEST_CASE("checkpoint round trip is exact and rejects corruption") {
    std::mt19937_64 rng(9);
    Checkpoint c;
    c.manifest = {{"model", "x"}, {"step", 3}};
    c.tensors.push_back({"a.kernel", oracle::random_tensor({2, 3}, rng)});
    c.tensors.push_back({"b", Tensor::from({1}, {-0.0})});
    const auto bytes = serialize_checkpoint(c);
    auto d = parse_checkpoint(bytes);
    CHECK(d.manifest == c.manifest);
    REQUIRE(d.tensors.size() == 2);
    CHECK(d.tensors[0].name == "a.kernel");
    CHECK(d.find("a.kernel")->shape() == Shape{2, 3});
    CHECK(serialize_checkpoint(d) == bytes);
    CHECK_THROWS_AS(parse_checkpoint(bytes.substr(0, bytes.size() - 3)), DataError);
    CHECK_THROWS_AS(parse_checkpoint("EVCKPT02" + bytes.substr(8)), DataError);
}
