#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "kdkit/error.hpp"

namespace kd {

// Extent list, NCHW convention for rank 4. Rank 1..4.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_size(const Shape& s);

class Tape;

namespace detail {

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty means "no gradient yet"
    bool requires_grad = false;
    Tape* tape = nullptr;  // recording tape for op outputs
    int node = -1;         // node index on `tape`, -1 for leaves
};

}  // namespace detail

// Dense double-precision tensor. Value-semantics handle onto a shared
// buffer: copies alias, use `clone` for a deep copy. All arithmetic on
// tensors goes through the free functions below, which record backward
// closures on the active Tape when gradients are needed.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor from(Shape shape, std::vector<double> values);
    static Tensor scalar(double value);
    // Leaf with requires_grad set; the usual way to make a parameter.
    static Tensor param(Shape shape, std::vector<double> values);

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    int rank() const { return static_cast<int>(impl_->shape.size()); }
    int extent(int axis) const { return impl_->shape[static_cast<std::size_t>(axis)]; }
    std::size_t size() const { return impl_->values.size(); }

    std::span<const double> values() const { return impl_->values; }
    std::span<double> values() { return impl_->values; }

    // scalar (size-1) accessor
    double item() const;

    double at(std::initializer_list<int> idx) const;
    double& at(std::initializer_list<int> idx);

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool rg);

    bool has_grad() const { return !impl_->grad.empty(); }
    std::span<const double> grad() const { return impl_->grad; }
    void zero_grad();

    // Deep copy of values only; result is a grad-free leaf.
    Tensor clone() const;
    // Same values buffer semantics as clone but keeps nothing autodiff-related.
    Tensor detach() const { return clone(); }

    const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

private:
    explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
    std::shared_ptr<detail::TensorImpl> impl_;
    friend class Tape;
};

// Reverse-mode tape. Nodes are appended in execution order, which is a
// valid topological order; backward walks them once in reverse. Gradients
// of leaf parameters accumulate additively across backward calls.
class Tape {
public:
    Tape() = default;
    ~Tape();
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    static Tape* current() noexcept { return current_; }

    int size() const { return static_cast<int>(nodes_.size()); }
    void clear();

    // Gradient accumulation target for `t` during a backward pass, or
    // nullptr when `t` does not require grad. Used by op closures.
    double* grad_sink(const std::shared_ptr<detail::TensorImpl>& t);

    void backward_from(const std::shared_ptr<detail::TensorImpl>& root);

    using BackwardFn = std::function<void(Tape&, std::span<const double>)>;
    void record(Tensor& out, BackwardFn fn);

private:
    struct Node {
        std::shared_ptr<detail::TensorImpl> out;
        BackwardFn backward;
    };
    std::vector<Node> nodes_;
    std::vector<std::vector<double>> pass_grads_;  // per-node, live only during backward
    static thread_local Tape* current_;
    friend class TapeScope;
};

// RAII activation of a tape: ops record onto Tape::current() while a scope
// is alive. Evaluation code simply runs without a scope.
class TapeScope {
public:
    explicit TapeScope(Tape& tape) : prev_(Tape::current_) { Tape::current_ = &tape; }
    ~TapeScope() { Tape::current_ = prev_; }
    TapeScope(const TapeScope&) = delete;
    TapeScope& operator=(const TapeScope&) = delete;

private:
    Tape* prev_;
};

// ---- differentiable ops -------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

Tensor matmul(const Tensor& a, const Tensor& b);            // [M,K]x[K,N]
Tensor batched_matmul(const Tensor& a, const Tensor& b);    // [B,M,K]x[B,K,N]
Tensor transpose_last2(const Tensor& a);                    // swap last two axes
Tensor reshape(const Tensor& a, Shape shape);               // same element count

// Cross-correlation convolution, NCHW, kernel k in {1,3}.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad);
inline Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad) {
    return conv2d(x, w, Tensor{}, stride, pad);
}

Tensor relu(const Tensor& x);
Tensor global_avg_pool(const Tensor& x);  // [N,C,H,W] -> [N,C]

Tensor softmax(const Tensor& x, int axis, double temperature = 1.0);
Tensor log_softmax(const Tensor& x, int axis, double temperature = 1.0);

Tensor reduce_sum(const Tensor& x);
Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes);
Tensor reduce_mean(const Tensor& x);
Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes);

// Mean negative log-softmax probability of the true class over non-ignored
// positions. Logits [N,K] with N labels, or [N,K,H,W] with N*H*W labels in
// row-major (n,h,w) order.
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     std::optional<int> ignore_label = std::nullopt);

// Populates grads of all requires_grad ancestors of a scalar root.
void backward(const Tensor& root);

// Max over elements of |autodiff - central difference| / max(|a|,|n|,1e-8).
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace kd
