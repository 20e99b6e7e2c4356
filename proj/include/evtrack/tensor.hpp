#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace evtrack {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

/// Storage plus autodiff bookkeeping. Non-leaf nodes hold their parents and a
/// closure that pushes `grad` into the parents' grads.
struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(const TensorNode&)> backward_fn;

    bool is_leaf() const { return !backward_fn; }
    /// Grad buffer, allocated and zeroed on first use.
    std::vector<double>& grad_buffer();
};

/// Dense row-major float64 tensor handle. Copies share storage; use clone()
/// for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr node) : node_(std::move(node)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false);
    static Tensor full(Shape shape, double value, bool requires_grad = false);
    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
    static Tensor scalar(double value, bool requires_grad = false);

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<const double> data() const { return node_->data; }
    std::span<double> mutable_data() { return node_->data; }
    double item() const;
    double operator[](std::size_t i) const { return node_->data[i]; }

    bool requires_grad() const { return node_ && node_->requires_grad; }
    Tensor& set_requires_grad(bool on = true);
    bool has_grad() const { return !node_->grad.empty(); }
    /// Empty span if no gradient has been accumulated yet.
    std::span<const double> grad() const { return node_->grad; }
    std::span<double> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad();

    /// Deep copy of the values, detached from any graph.
    Tensor clone() const;
    /// Shares nothing with the graph; keeps requires_grad off.
    Tensor detach() const { return clone(); }

    TensorNode* node() const { return node_.get(); }
    const NodePtr& node_ptr() const { return node_; }

private:
    NodePtr node_;
};

/// Disables graph construction on the current thread for its lifetime.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool previous_;
};

bool grad_enabled();

/// Builds an op result. If grad mode is on and any parent requires grad, the
/// result records the parents and `backward`; otherwise it is a plain value.
Tensor make_result(Shape shape, std::vector<double> data, std::initializer_list<Tensor> parents,
                   std::function<void(const TensorNode&)> backward);
Tensor make_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& parents,
                   std::function<void(const TensorNode&)> backward);

/// Reverse-mode sweep from a scalar. Leaf grads accumulate (+=); interior
/// grads are recomputed on every call.
void backward(const Tensor& loss);

}  // namespace evtrack
