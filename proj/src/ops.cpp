#include "evtrack/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "evtrack/errors.hpp"

namespace evtrack {

namespace {

std::vector<double>* grad_of(const TensorNode& out, std::size_t i) {
    auto& p = out.parents[i];
    return p->requires_grad ? &p->grad_buffer() : nullptr;
}

const std::vector<double>& data_of(const TensorNode& out, std::size_t i) { return out.parents[i]->data; }

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
    if (!t.defined() || t.rank() != rank) {
        throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + " tensor, got " +
                         (t.defined() ? shape_str(t.shape()) : std::string("undefined")));
    }
}

// Elementwise binary op with scalar broadcasting. df_da/df_db take (a, b, out).
template <typename F, typename DA, typename DB>
Tensor binary(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
    const std::size_t na = a.numel(), nb = b.numel();
    if (na != nb && na != 1 && nb != 1) {
        throw ShapeError(std::string(name) + ": incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
    }
    const std::size_t n = std::max(na, nb);
    const Shape shape = na >= nb ? a.shape() : b.shape();
    const auto& ad = a.data();
    const auto& bd = b.data();
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = f(ad[na == 1 ? 0 : i], bd[nb == 1 ? 0 : i]);
    return make_result(shape, std::move(out), {a, b}, [na, nb, n, da, db](const TensorNode& o) {
        const auto& av = data_of(o, 0);
        const auto& bv = data_of(o, 1);
        auto* ga = grad_of(o, 0);
        auto* gb = grad_of(o, 1);
        for (std::size_t i = 0; i < n; ++i) {
            double x = av[na == 1 ? 0 : i], y = bv[nb == 1 ? 0 : i], g = o.grad[i];
            if (ga) (*ga)[na == 1 ? 0 : i] += g * da(x, y, o.data[i]);
            if (gb) (*gb)[nb == 1 ? 0 : i] += g * db(x, y, o.data[i]);
        }
    });
}

// Elementwise unary op; d takes (x, out).
template <typename F, typename D>
Tensor unary(const Tensor& a, F f, D d) {
    const auto& ad = a.data();
    std::vector<double> out(ad.size());
    for (std::size_t i = 0; i < ad.size(); ++i) out[i] = f(ad[i]);
    return make_result(a.shape(), std::move(out), {a}, [d](const TensorNode& o) {
        const auto& x = data_of(o, 0);
        auto* g = grad_of(o, 0);
        for (std::size_t i = 0; i < x.size(); ++i) (*g)[i] += o.grad[i] * d(x[i], o.data[i]);
    });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
        [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
        [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
        [](double, double y, double o) { return -o / y; });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "minimum", [](double x, double y) { return std::min(x, y); },
        [](double x, double y, double) { return x <= y ? 1.0 : 0.0; }, [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}

Tensor maximum(const Tensor& a, const Tensor& b) {
    return binary(
        a, b, "maximum", [](double x, double y) { return std::max(x, y); },
        [](double x, double y, double) { return x >= y ? 1.0 : 0.0; }, [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Tensor scale(const Tensor& a, double factor) {
    return unary(a, [factor](double x) { return x * factor; }, [factor](double, double) { return factor; });
}

Tensor add_scalar(const Tensor& a, double value) {
    return unary(a, [value](double x) { return x + value; }, [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; }, [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& a) {
    return unary(
        a,
        [](double x) {
            if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
            double e = std::exp(x);
            return e / (1.0 + e);
        },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor abs(const Tensor& a) {
    return unary(a, [](double x) { return std::fabs(x); }, [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Tensor clamp_min(const Tensor& a, double lo) {
    return unary(a, [lo](double x) { return std::max(x, lo); }, [lo](double x, double) { return x >= lo ? 1.0 : 0.0; });
}

Tensor sum(const Tensor& a) {
    double s = std::accumulate(a.data().begin(), a.data().end(), 0.0);
    return make_result({1}, {s}, {a}, [](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (auto& v : g) v += o.grad[0];
    });
}

Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.numel()) {
        throw ShapeError("reshape: " + shape_str(a.shape()) + " cannot become " + shape_str(shape));
    }
    std::vector<double> out(a.data().begin(), a.data().end());
    return make_result(std::move(shape), std::move(out), {a}, [](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    });
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    std::vector<double> out(m * n);
    const auto& ad = a.data();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = ad[i * n + j];
    return make_result({n, m}, std::move(out), {a}, [m, n](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) g[i * n + j] += o.grad[j * m + i];
    });
}

Tensor select(const Tensor& a, std::size_t index) {
    if (a.rank() < 2 || index >= a.dim(0)) throw ShapeError("select: index out of range for " + shape_str(a.shape()));
    Shape shape(a.shape().begin() + 1, a.shape().end());
    const std::size_t block = shape_numel(shape);
    std::vector<double> out(a.data().begin() + index * block, a.data().begin() + (index + 1) * block);
    return make_result(std::move(shape), std::move(out), {a}, [index, block](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t i = 0; i < block; ++i) g[index * block + i] += o.grad[i];
    });
}

Tensor element(const Tensor& a, std::size_t flat_index) {
    if (flat_index >= a.numel()) throw ShapeError("element: index out of range for " + shape_str(a.shape()));
    return make_result({1}, {a[flat_index]}, {a}, [flat_index](const TensorNode& o) { (*grad_of(o, 0))[flat_index] += o.grad[0]; });
}

Tensor stack(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("stack: no tensors");
    Shape inner = parts[0].shape();
    for (const auto& p : parts) {
        if (p.shape() != inner) throw ShapeError("stack: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(inner));
    }
    const std::size_t block = shape_numel(inner);
    std::vector<double> out;
    out.reserve(block * parts.size());
    for (const auto& p : parts) out.insert(out.end(), p.data().begin(), p.data().end());
    Shape shape{parts.size()};
    shape.insert(shape.end(), inner.begin(), inner.end());
    return make_result(std::move(shape), std::move(out), parts, [block](const TensorNode& o) {
        for (std::size_t k = 0; k < o.parents.size(); ++k) {
            if (auto* g = grad_of(o, k))
                for (std::size_t i = 0; i < block; ++i) (*g)[i] += o.grad[k * block + i];
        }
    });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: no tensors");
    const std::size_t rows = parts[0].dim(0);
    std::vector<std::size_t> widths, offsets;
    std::size_t total = 0;
    for (const auto& p : parts) {
        require_rank(p, 2, "concat_cols");
        if (p.dim(0) != rows) throw ShapeError("concat_cols: row count mismatch");
        offsets.push_back(total);
        widths.push_back(p.dim(1));
        total += p.dim(1);
    }
    std::vector<double> out(rows * total);
    for (std::size_t k = 0; k < parts.size(); ++k) {
        const auto& d = parts[k].data();
        for (std::size_t r = 0; r < rows; ++r)
            std::copy_n(d.begin() + r * widths[k], widths[k], out.begin() + r * total + offsets[k]);
    }
    return make_result({rows, total}, std::move(out), parts, [rows, total, widths, offsets](const TensorNode& o) {
        for (std::size_t k = 0; k < o.parents.size(); ++k) {
            auto* g = grad_of(o, k);
            if (!g) continue;
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < widths[k]; ++c) (*g)[r * widths[k] + c] += o.grad[r * total + offsets[k] + c];
        }
    });
}

Tensor center_crop(const Tensor& a, std::size_t size) {
    require_rank(a, 3, "center_crop");
    const std::size_t c = a.dim(0), h = a.dim(1), w = a.dim(2);
    if (size == 0 || size > h || size > w) throw ShapeError("center_crop: size " + std::to_string(size) + " exceeds " + shape_str(a.shape()));
    const std::size_t oy = (h - size) / 2, ox = (w - size) / 2;
    std::vector<double> out(c * size * size);
    const auto& d = a.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < size; ++y)
            for (std::size_t x = 0; x < size; ++x) out[(ch * size + y) * size + x] = d[(ch * h + y + oy) * w + x + ox];
    return make_result({c, size, size}, std::move(out), {a}, [c, h, w, size, oy, ox](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < size; ++y)
                for (std::size_t x = 0; x < size; ++x) g[(ch * h + y + oy) * w + x + ox] += o.grad[(ch * size + y) * size + x];
    });
}

Tensor to_tokens(const Tensor& a) {
    require_rank(a, 3, "to_tokens");
    const std::size_t c = a.dim(0), hw = a.dim(1) * a.dim(2);
    std::vector<double> out(c * hw);
    const auto& d = a.data();
    for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = d[ch * hw + p];
    return make_result({hw, c}, std::move(out), {a}, [c, hw](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t p = 0; p < hw; ++p) g[ch * hw + p] += o.grad[p * c + ch];
    });
}

Tensor from_tokens(const Tensor& a, std::size_t height, std::size_t width) {
    require_rank(a, 2, "from_tokens");
    const std::size_t hw = a.dim(0), c = a.dim(1);
    if (hw != height * width) throw ShapeError("from_tokens: token count does not match grid");
    std::vector<double> out(c * hw);
    const auto& d = a.data();
    for (std::size_t p = 0; p < hw; ++p)
        for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] = d[p * c + ch];
    return make_result({c, height, width}, std::move(out), {a}, [c, hw](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t p = 0; p < hw; ++p)
            for (std::size_t ch = 0; ch < c; ++ch) g[p * c + ch] += o.grad[ch * hw + p];
    });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, "matmul");
    require_rank(b, 2, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) throw ShapeError("matmul: inner extents differ " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    std::vector<double> out(m * n, 0.0);
    const double* A = a.data().data();
    const double* B = b.data().data();
    for (std::size_t i = 0; i < m; ++i) {
        double* row = out.data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = A[i * k + p];
            const double* brow = B + p * n;
            for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
        }
    }
    return make_result({m, n}, std::move(out), {a, b}, [m, k, n](const TensorNode& o) {
        const double* A = data_of(o, 0).data();
        const double* B = data_of(o, 1).data();
        const double* G = o.grad.data();
        if (auto* ga = grad_of(o, 0)) {
            // dA = G * B^T, row by row as axpy over a transposed copy of B.
            std::vector<double> bt(n * k);
            for (std::size_t p = 0; p < k; ++p)
                for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B[p * n + j];
            for (std::size_t i = 0; i < m; ++i) {
                double* arow = ga->data() + i * k;
                for (std::size_t j = 0; j < n; ++j) {
                    const double g = G[i * n + j];
                    const double* brow = bt.data() + j * k;
                    for (std::size_t p = 0; p < k; ++p) arow[p] += g * brow[p];
                }
            }
        }
        if (auto* gb = grad_of(o, 1)) {
            // dB = A^T * G
            for (std::size_t i = 0; i < m; ++i)
                for (std::size_t p = 0; p < k; ++p) {
                    const double av = A[i * k + p];
                    double* grow = gb->data() + p * n;
                    for (std::size_t j = 0; j < n; ++j) grow[j] += av * G[i * n + j];
                }
        }
    });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    auto y = matmul(x, w);
    if (!b.defined()) return y;
    const std::size_t rows = y.dim(0), cols = y.dim(1);
    if (b.numel() != cols) throw ShapeError("linear: bias length " + std::to_string(b.numel()) + " vs width " + std::to_string(cols));
    std::vector<double> out(y.data().begin(), y.data().end());
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] += b[c];
    return make_result({rows, cols}, std::move(out), {y, b}, [rows, cols](const TensorNode& o) {
        if (auto* gy = grad_of(o, 0))
            for (std::size_t i = 0; i < rows * cols; ++i) (*gy)[i] += o.grad[i];
        if (auto* gb = grad_of(o, 1))
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) (*gb)[c] += o.grad[r * cols + c];
    });
}

Tensor row_scale(const Tensor& x, const Tensor& g) {
    require_rank(x, 2, "row_scale");
    const std::size_t rows = x.dim(0), cols = x.dim(1);
    if (g.numel() != rows) throw ShapeError("row_scale: gate length does not match row count");
    std::vector<double> out(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = x[r * cols + c] * g[r];
    return make_result({rows, cols}, std::move(out), {x, g}, [rows, cols](const TensorNode& o) {
        const auto& xv = data_of(o, 0);
        const auto& gv = data_of(o, 1);
        auto* gx = grad_of(o, 0);
        auto* gg = grad_of(o, 1);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) {
                double go = o.grad[r * cols + c];
                if (gx) (*gx)[r * cols + c] += go * gv[r];
                if (gg) (*gg)[r] += go * xv[r * cols + c];
            }
    });
}

namespace {

struct ConvGeometry {
    std::size_t Ci, H, W, K, stride, pad, Ho, Wo;
    std::size_t rows() const { return Ci * K * K; }
    std::size_t cols() const { return Ho * Wo; }
};

// Unfolds one [Ci x H x W] image into [Ci*K*K x Ho*Wo] patch columns.
void im2col(const double* x, const ConvGeometry& g, double* cols) {
    for (std::size_t ci = 0; ci < g.Ci; ++ci)
        for (std::size_t ky = 0; ky < g.K; ++ky)
            for (std::size_t kx = 0; kx < g.K; ++kx) {
                double* row = cols + ((ci * g.K + ky) * g.K + kx) * g.cols();
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    double* out = row + oy * g.Wo;
                    if (iy < 0 || iy >= static_cast<long>(g.H)) {
                        std::fill(out, out + g.Wo, 0.0);
                        continue;
                    }
                    const double* in = x + (ci * g.H + static_cast<std::size_t>(iy)) * g.W;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        out[ox] = ix < 0 || ix >= static_cast<long>(g.W) ? 0.0 : in[ix];
                    }
                }
            }
}

// Scatter-adds patch columns back into a [Ci x H x W] gradient.
void col2im(const double* cols, const ConvGeometry& g, double* x) {
    for (std::size_t ci = 0; ci < g.Ci; ++ci)
        for (std::size_t ky = 0; ky < g.K; ++ky)
            for (std::size_t kx = 0; kx < g.K; ++kx) {
                const double* row = cols + ((ci * g.K + ky) * g.K + kx) * g.cols();
                for (std::size_t oy = 0; oy < g.Ho; ++oy) {
                    const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
                    if (iy < 0 || iy >= static_cast<long>(g.H)) continue;
                    double* out = x + (ci * g.H + static_cast<std::size_t>(iy)) * g.W;
                    for (std::size_t ox = 0; ox < g.Wo; ++ox) {
                        const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
                        if (ix >= 0 && ix < static_cast<long>(g.W)) out[ix] += row[oy * g.Wo + ox];
                    }
                }
            }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, const Tensor& bias, std::size_t stride, std::size_t pad) {
    const bool batched = input.defined() && input.rank() == 4;
    if (!batched) require_rank(input, 3, "conv2d");
    require_rank(kernel, 4, "conv2d kernel");
    if (stride == 0) throw ShapeError("conv2d: stride must be >= 1");
    const std::size_t N = batched ? input.dim(0) : 1;
    const std::size_t Ci = input.dim(batched ? 1 : 0), H = input.dim(batched ? 2 : 1), W = input.dim(batched ? 3 : 2);
    const std::size_t Co = kernel.dim(0), K = kernel.dim(2);
    if (kernel.dim(1) != Ci || kernel.dim(3) != K) {
        throw ShapeError("conv2d: kernel " + shape_str(kernel.shape()) + " incompatible with input " + shape_str(input.shape()));
    }
    if (H + 2 * pad < K || W + 2 * pad < K) throw ShapeError("conv2d: kernel larger than padded input");
    if (bias.defined() && bias.numel() != Co) throw ShapeError("conv2d: bias length mismatch");
    const ConvGeometry g{Ci, H, W, K, stride, pad, (H + 2 * pad - K) / stride + 1, (W + 2 * pad - K) / stride + 1};
    const std::size_t R = g.rows(), P = g.cols();

    std::vector<double> out(N * Co * P, 0.0);
    std::vector<double> cols(R * P);
    const double* X = input.data().data();
    const double* Kd = kernel.data().data();
    for (std::size_t n = 0; n < N; ++n) {
        im2col(X + n * Ci * H * W, g, cols.data());
        for (std::size_t co = 0; co < Co; ++co) {
            double* O = out.data() + (n * Co + co) * P;
            if (bias.defined()) std::fill(O, O + P, bias[co]);
            const double* wrow = Kd + co * R;
            for (std::size_t r = 0; r < R; ++r) {
                const double wv = wrow[r];
                if (wv == 0.0) continue;
                const double* crow = cols.data() + r * P;
                for (std::size_t p = 0; p < P; ++p) O[p] += wv * crow[p];
            }
        }
    }

    Shape shape = batched ? Shape{N, Co, g.Ho, g.Wo} : Shape{Co, g.Ho, g.Wo};
    std::vector<Tensor> parents{input, kernel};
    if (bias.defined()) parents.push_back(bias);
    return make_result(std::move(shape), std::move(out), parents, [N, Co, g](const TensorNode& o) {
        const std::size_t R = g.rows(), P = g.cols();
        const double* X = data_of(o, 0).data();
        const double* Kd = data_of(o, 1).data();
        auto* gx = grad_of(o, 0);
        auto* gk = grad_of(o, 1);
        auto* gb = o.parents.size() > 2 ? grad_of(o, 2) : nullptr;
        std::vector<double> cols, cols_t, dcols;
        if (gk) {
            cols.resize(R * P);
            cols_t.resize(P * R);
        }
        if (gx) dcols.resize(R * P);
        for (std::size_t n = 0; n < N; ++n) {
            const double* G = o.grad.data() + n * Co * P;
            if (gb) {
                for (std::size_t co = 0; co < Co; ++co) {
                    double s = 0.0;
                    for (std::size_t p = 0; p < P; ++p) s += G[co * P + p];
                    (*gb)[co] += s;
                }
            }
            if (gk) {
                // dK[co, :] += sum_p G[co, p] * cols[:, p]
                im2col(X + n * g.Ci * g.H * g.W, g, cols.data());
                for (std::size_t r = 0; r < R; ++r)
                    for (std::size_t p = 0; p < P; ++p) cols_t[p * R + r] = cols[r * P + p];
                for (std::size_t co = 0; co < Co; ++co) {
                    double* krow = gk->data() + co * R;
                    for (std::size_t p = 0; p < P; ++p) {
                        const double gv = G[co * P + p];
                        if (gv == 0.0) continue;
                        const double* crow = cols_t.data() + p * R;
                        for (std::size_t r = 0; r < R; ++r) krow[r] += gv * crow[r];
                    }
                }
            }
            if (gx) {
                // dcols = K^T G, folded back onto the input grid.
                std::fill(dcols.begin(), dcols.end(), 0.0);
                for (std::size_t co = 0; co < Co; ++co) {
                    const double* wrow = Kd + co * R;
                    const double* grow = G + co * P;
                    for (std::size_t r = 0; r < R; ++r) {
                        const double wv = wrow[r];
                        if (wv == 0.0) continue;
                        double* drow = dcols.data() + r * P;
                        for (std::size_t p = 0; p < P; ++p) drow[p] += wv * grow[p];
                    }
                }
                col2im(dcols.data(), g, gx->data() + n * g.Ci * g.H * g.W);
            }
        }
    });
}

Tensor depthwise_xcorr(const Tensor& search, const Tensor& tmpl, std::size_t pad) {
    require_rank(search, 3, "depthwise_xcorr");
    require_rank(tmpl, 3, "depthwise_xcorr template");
    const std::size_t C = search.dim(0), H = search.dim(1), W = search.dim(2), K = tmpl.dim(1);
    if (tmpl.dim(0) != C || tmpl.dim(2) != K) {
        throw ShapeError("depthwise_xcorr: template " + shape_str(tmpl.shape()) + " incompatible with search " + shape_str(search.shape()));
    }
    if (H + 2 * pad < K || W + 2 * pad < K) throw ShapeError("depthwise_xcorr: template larger than padded search");
    const std::size_t Ho = H + 2 * pad - K + 1, Wo = W + 2 * pad - K + 1;
    const long P = static_cast<long>(pad);
    std::vector<double> out(C * Ho * Wo, 0.0);
    const double* S = search.data().data();
    const double* T = tmpl.data().data();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ky = 0; ky < K; ++ky)
            for (std::size_t kx = 0; kx < K; ++kx) {
                const double tv = T[(c * K + ky) * K + kx];
                for (std::size_t oy = 0; oy < Ho; ++oy) {
                    long iy = static_cast<long>(oy + ky) - P;
                    if (iy < 0 || iy >= static_cast<long>(H)) continue;
                    for (std::size_t ox = 0; ox < Wo; ++ox) {
                        long ix = static_cast<long>(ox + kx) - P;
                        if (ix < 0 || ix >= static_cast<long>(W)) continue;
                        out[(c * Ho + oy) * Wo + ox] += tv * S[(c * H + iy) * W + ix];
                    }
                }
            }
    return make_result({C, Ho, Wo}, std::move(out), {search, tmpl}, [=](const TensorNode& o) {
        const double* S = data_of(o, 0).data();
        const double* T = data_of(o, 1).data();
        auto* gs = grad_of(o, 0);
        auto* gt = grad_of(o, 1);
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t ky = 0; ky < K; ++ky)
                for (std::size_t kx = 0; kx < K; ++kx) {
                    const std::size_t tidx = (c * K + ky) * K + kx;
                    double acc = 0.0;
                    for (std::size_t oy = 0; oy < Ho; ++oy) {
                        long iy = static_cast<long>(oy + ky) - P;
                        if (iy < 0 || iy >= static_cast<long>(H)) continue;
                        for (std::size_t ox = 0; ox < Wo; ++ox) {
                            long ix = static_cast<long>(ox + kx) - P;
                            if (ix < 0 || ix >= static_cast<long>(W)) continue;
                            const double g = o.grad[(c * Ho + oy) * Wo + ox];
                            const std::size_t sidx = (c * H + iy) * W + ix;
                            acc += g * S[sidx];
                            if (gs) (*gs)[sidx] += g * T[tidx];
                        }
                    }
                    if (gt) (*gt)[tidx] += acc;
                }
    });
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw ShapeError("softmax: axis out of range for " + shape_str(x.shape()));
    std::size_t outer = 1, inner = 1;
    const std::size_t n = x.dim(axis);
    for (std::size_t i = 0; i < axis; ++i) outer *= x.dim(i);
    for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    std::vector<double> out(x.numel());
    const auto& d = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * n * inner + in;
            double mx = d[base];
            for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, d[base + k * inner]);
            double s = 0.0;
            for (std::size_t k = 0; k < n; ++k) s += out[base + k * inner] = std::exp(d[base + k * inner] - mx);
            const double inv = 1.0 / s;
            for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
        }
    return make_result(x.shape(), std::move(out), {x}, [outer, inner, n](const TensorNode& o) {
        auto& g = *grad_of(o, 0);
        for (std::size_t a = 0; a < outer; ++a)
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = a * n * inner + in;
                double dot = 0.0;
                for (std::size_t k = 0; k < n; ++k) dot += o.grad[base + k * inner] * o.data[base + k * inner];
                for (std::size_t k = 0; k < n; ++k) {
                    const std::size_t i = base + k * inner;
                    g[i] += o.data[i] * (o.grad[i] - dot);
                }
            }
    });
}

BatchNormState BatchNormState::make(std::size_t channels) {
    return BatchNormState{Tensor::zeros({channels}), Tensor::full({channels}, 1.0)};
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state, Mode mode) {
    if (!x.defined() || x.rank() < 2) throw ShapeError("batch_norm: expected [N x C x ...]");
    const std::size_t N = x.dim(0), C = x.dim(1);
    const std::size_t S = x.numel() / (N * C);
    if (gamma.numel() != C || beta.numel() != C || state.running_mean.numel() != C || state.running_var.numel() != C) {
        throw ShapeError("batch_norm: parameter length does not match channel count " + std::to_string(C));
    }
    const double eps = state.eps;
    const std::size_t count = N * S;
    const auto& d = x.data();
    std::vector<double> mu(C), inv_std(C);
    if (mode == Mode::train) {
        auto rm = state.running_mean.mutable_data();
        auto rv = state.running_var.mutable_data();
        for (std::size_t c = 0; c < C; ++c) {
            double s = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) s += d[(n * C + c) * S + i];
            const double m = s / count;
            double v = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) {
                    const double z = d[(n * C + c) * S + i] - m;
                    v += z * z;
                }
            const double var = v / count;
            mu[c] = m;
            inv_std[c] = 1.0 / std::sqrt(var + eps);
            const double unbiased = count > 1 ? v / (count - 1) : var;
            rm[c] = (1.0 - state.momentum) * rm[c] + state.momentum * m;
            rv[c] = (1.0 - state.momentum) * rv[c] + state.momentum * unbiased;
        }
    } else {
        for (std::size_t c = 0; c < C; ++c) {
            mu[c] = state.running_mean[c];
            inv_std[c] = 1.0 / std::sqrt(state.running_var[c] + eps);
        }
    }
    std::vector<double> out(x.numel());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t c = 0; c < C; ++c)
            for (std::size_t i = 0; i < S; ++i) {
                const std::size_t k = (n * C + c) * S + i;
                out[k] = gamma[c] * (d[k] - mu[c]) * inv_std[c] + beta[c];
            }
    const bool batch_stats = mode == Mode::train;
    return make_result(x.shape(), std::move(out), {x, gamma, beta}, [=](const TensorNode& o) {
        const auto& xd = data_of(o, 0);
        const auto& gd = data_of(o, 1);
        auto* gx = grad_of(o, 0);
        auto* gg = grad_of(o, 1);
        auto* gbeta = grad_of(o, 2);
        for (std::size_t c = 0; c < C; ++c) {
            double sum_g = 0.0, sum_gx = 0.0;
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t k = (n * C + c) * S + i;
                    const double xhat = (xd[k] - mu[c]) * inv_std[c];
                    sum_g += o.grad[k];
                    sum_gx += o.grad[k] * xhat;
                }
            if (gg) (*gg)[c] += sum_gx;
            if (gbeta) (*gbeta)[c] += sum_g;
            if (!gx) continue;
            const double scale_c = gd[c] * inv_std[c];
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t i = 0; i < S; ++i) {
                    const std::size_t k = (n * C + c) * S + i;
                    if (batch_stats) {
                        const double xhat = (xd[k] - mu[c]) * inv_std[c];
                        (*gx)[k] += scale_c * (o.grad[k] - sum_g / count - xhat * sum_gx / count);
                    } else {
                        (*gx)[k] += scale_c * o.grad[k];
                    }
                }
        }
    });
}

Tensor dropout(const Tensor& x, double rate, Mode mode, std::mt19937_64* rng) {
    if (mode == Mode::eval || rate <= 0.0) return x;
    if (rate >= 1.0) throw ShapeError("dropout: rate must be < 1");
    if (!rng) throw ShapeError("dropout: training mode needs a random generator");
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double keep_scale = 1.0 / (1.0 - rate);
    std::vector<double> mask(x.numel());
    for (auto& m : mask) m = u(*rng) < rate ? 0.0 : keep_scale;
    return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

AttentionConfig AttentionConfig::uniform(std::size_t model_width, std::size_t heads) {
    if (heads == 0 || model_width % heads != 0) throw ShapeError("attention: model width must be divisible by head count");
    return AttentionConfig{model_width, heads, model_width / heads, model_width / heads};
}

void AttentionConfig::validate() const {
    if (model_width == 0 || heads == 0 || key_width == 0 || value_width == 0) throw ShapeError("attention: widths must be positive");
}

Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionConfig& cfg, const AttentionWeights& w) {
    cfg.validate();
    require_rank(q, 2, "multi_head_attention Q");
    require_rank(k, 2, "multi_head_attention K");
    require_rank(v, 2, "multi_head_attention V");
    if (q.dim(1) != cfg.model_width || k.dim(1) != cfg.model_width || v.dim(1) != cfg.model_width || k.dim(0) != v.dim(0)) {
        throw ShapeError("multi_head_attention: Q/K/V shapes inconsistent with model width " + std::to_string(cfg.model_width));
    }
    if (w.query.size() != cfg.heads || w.key.size() != cfg.heads || w.value.size() != cfg.heads) {
        throw ShapeError("multi_head_attention: expected one projection per head");
    }
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.key_width));
    std::vector<Tensor> heads;
    heads.reserve(cfg.heads);
    for (std::size_t i = 0; i < cfg.heads; ++i) {
        auto qi = matmul(q, w.query[i]);
        auto ki = matmul(k, w.key[i]);
        auto vi = matmul(v, w.value[i]);
        auto scores = scale(matmul(qi, transpose(ki)), inv_sqrt_dk);
        heads.push_back(matmul(softmax(scores, 1), vi));
    }
    auto cat = heads.size() == 1 ? heads[0] : concat_cols(heads);
    return matmul(cat, w.output);
}

Tensor ffn(const Tensor& x, const FfnWeights& w, double dropout_rate, Mode mode, std::mt19937_64* rng) {
    auto hidden = relu(linear(x, w.w1, w.b1));
    hidden = dropout(hidden, dropout_rate, mode, rng);
    return linear(hidden, w.w2, w.b2);
}

}  // namespace evtrack
