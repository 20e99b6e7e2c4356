#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "evtrack/tensor.hpp"

namespace evtrack {

enum class Mode { train, eval };

// ---- elementwise (equal shapes, or one operand with a single element) ----

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor add_scalar(const Tensor& a, double value);
Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double s) { return scale(a, s); }
inline Tensor operator*(double s, const Tensor& a) { return scale(a, s); }
inline Tensor operator+(const Tensor& a, double s) { return add_scalar(a, s); }
inline Tensor operator-(double s, const Tensor& a) { return add_scalar(scale(a, -1.0), s); }

// ---- reductions ----

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

// ---- shape ----

Tensor reshape(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);                 // 2-D
Tensor select(const Tensor& a, std::size_t index);  // along dim 0, drops it
Tensor element(const Tensor& a, std::size_t flat_index);  // scalar [1]
Tensor stack(const std::vector<Tensor>& parts);     // new leading dim
Tensor concat_cols(const std::vector<Tensor>& parts);  // 2-D, same rows
Tensor center_crop(const Tensor& a, std::size_t size);  // [C x H x W] -> [C x size x size]
/// [C x H x W] -> [H*W x C] token matrix.
Tensor to_tokens(const Tensor& a);
/// [H*W x C] -> [C x H x W].
Tensor from_tokens(const Tensor& a, std::size_t height, std::size_t width);

// ---- neural kernels ----

Tensor matmul(const Tensor& a, const Tensor& b);
/// x [n x in] * w [in x out] + b [out] (bias optional).
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b = Tensor());
/// x [n x d] with each row i multiplied by g[i]; g has n elements.
Tensor row_scale(const Tensor& x, const Tensor& g);

/// input [C_in x H x W] or [N x C_in x H x W]; kernel [C_out x C_in x k x k];
/// bias [C_out] optional. Zero padding.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t pad);
inline Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t pad) {
    return conv2d(input, kernel, Tensor(), stride, pad);
}

/// Per-channel 2-D cross-correlation of search [C x G x G] with template [C x K x K].
Tensor depthwise_xcorr(const Tensor& search, const Tensor& tmpl, std::size_t pad);

/// Max-subtracted softmax along `axis`.
Tensor softmax(const Tensor& x, std::size_t axis);

struct BatchNormState {
    Tensor running_mean;  // [C]
    Tensor running_var;   // [C]
    double momentum = 0.1;
    double eps = 1e-5;

    static BatchNormState make(std::size_t channels);
};

/// x [N x C x ...]. Train mode uses batch statistics and updates `state`;
/// eval mode uses the running statistics.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode);

/// Inverted dropout. Identity in eval mode or when rate == 0.
Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64* rng);

struct AttentionConfig {
    std::size_t model_width = 0;  // d_m
    std::size_t heads = 1;        // n_h
    std::size_t key_width = 0;    // d_k per head
    std::size_t value_width = 0;  // d_v per head

    /// d_k = d_v = d_m / n_h.
    static AttentionConfig uniform(std::size_t model_width, std::size_t heads);
    void validate() const;
};

struct AttentionWeights {
    std::vector<Tensor> query;  // n_h x [d_m x d_k]
    std::vector<Tensor> key;    // n_h x [d_m x d_k]
    std::vector<Tensor> value;  // n_h x [d_m x d_v]
    Tensor output;              // [n_h*d_v x d_m]
};

/// concat_i softmax(Q Wq_i (K Wk_i)^T / sqrt(d_k)) V Wv_i, then * W_o.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& cfg,
                            const AttentionWeights& w);

struct FfnWeights {
    Tensor w1;  // [d x hidden]
    Tensor b1;  // [hidden]
    Tensor w2;  // [hidden x d]
    Tensor b2;  // [d]
};

/// max(0, x W1 + b1) W2 + b2, dropout on the hidden activation in train mode.
Tensor ffn(const Tensor& x, const FfnWeights& w, double dropout_rate, Mode mode, std::mt19937_64* rng);

}  // namespace evtrack
