#include "kdkit/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace kd {

// ---- shape helpers -------------------------------------------------------

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << "x";
        os << s[i];
    }
    os << "]";
    return os.str();
}

std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int e : s) n *= static_cast<std::size_t>(e);
    return n;
}

namespace {

void validate_shape(const Shape& s) {
    if (s.empty() || s.size() > 4)
        throw ShapeError("tensor rank must be 1..4, got " + shape_str(s));
    for (int e : s)
        if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(s));
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

const std::shared_ptr<detail::TensorImpl>& I(const Tensor& t) { return t.impl(); }

// Records `fn` onto the active tape when any input needs a gradient.
void maybe_record(Tensor& out, std::initializer_list<const Tensor*> inputs,
                  Tape::BackwardFn fn) {
    Tape* tape = Tape::current();
    if (!tape) return;
    bool needs_grad = false;
    for (const Tensor* t : inputs) {
        if (!t->defined() || !t->requires_grad()) continue;
        needs_grad = true;
        if (t->impl()->node >= 0 && t->impl()->tape != tape)
            throw ContractError("input tensor was produced on a different tape");
    }
    if (needs_grad) tape->record(out, std::move(fn));
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape) {
    validate_shape(shape);
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->values.assign(shape_size(shape), 0.0);
    impl->shape = std::move(shape);
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value) {
    Tensor t = zeros(std::move(shape));
    std::fill(t.impl_->values.begin(), t.impl_->values.end(), value);
    return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values) {
    validate_shape(shape);
    if (shape_size(shape) != values.size())
        throw ShapeError("value count " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->values = std::move(values);
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::param(Shape shape, std::vector<double> values) {
    Tensor t = from(std::move(shape), std::move(values));
    t.impl_->requires_grad = true;
    return t;
}

double Tensor::item() const {
    if (size() != 1) throw ShapeError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->values[0];
}

namespace {
std::size_t flat_index(const Shape& shape, std::initializer_list<int> idx) {
    if (idx.size() != shape.size())
        throw ShapeError("index rank " + std::to_string(idx.size()) +
                         " does not match tensor " + shape_str(shape));
    std::size_t flat = 0;
    std::size_t d = 0;
    for (int i : idx) {
        if (i < 0 || i >= shape[d])
            throw ShapeError("index out of range for " + shape_str(shape));
        flat = flat * static_cast<std::size_t>(shape[d]) + static_cast<std::size_t>(i);
        ++d;
    }
    return flat;
}
}  // namespace

double Tensor::at(std::initializer_list<int> idx) const {
    return impl_->values[flat_index(impl_->shape, idx)];
}

double& Tensor::at(std::initializer_list<int> idx) {
    return impl_->values[flat_index(impl_->shape, idx)];
}

Tensor& Tensor::set_requires_grad(bool rg) {
    impl_->requires_grad = rg;
    return *this;
}

void Tensor::zero_grad() { impl_->grad.assign(impl_->values.size(), 0.0); }

Tensor Tensor::clone() const {
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = impl_->shape;
    impl->values = impl_->values;
    return Tensor(std::move(impl));
}

// ---- Tape ------------------------------------------------------------------

thread_local Tape* Tape::current_ = nullptr;

Tape::~Tape() { clear(); }

void Tape::clear() {
    for (auto& n : nodes_) {
        n.out->tape = nullptr;
        n.out->node = -1;
    }
    nodes_.clear();
    pass_grads_.clear();
}

void Tape::record(Tensor& out, BackwardFn fn) {
    out.impl_->requires_grad = true;
    out.impl_->tape = this;
    out.impl_->node = static_cast<int>(nodes_.size());
    nodes_.push_back(Node{out.impl_, std::move(fn)});
}

double* Tape::grad_sink(const std::shared_ptr<detail::TensorImpl>& t) {
    if (!t->requires_grad) return nullptr;
    if (t->node >= 0) {
        if (t->tape != this) throw ContractError("gradient sink for a tensor from another tape");
        auto& buf = pass_grads_[static_cast<std::size_t>(t->node)];
        if (buf.empty()) buf.assign(t->values.size(), 0.0);
        return buf.data();
    }
    if (t->grad.empty()) t->grad.assign(t->values.size(), 0.0);
    return t->grad.data();
}

void Tape::backward_from(const std::shared_ptr<detail::TensorImpl>& root) {
    if (root->values.size() != 1)
        throw ShapeError("backward root must be scalar, got " + shape_str(root->shape));
    if (root->tape != this || root->node < 0)
        throw ContractError("backward root is not on this tape");
    pass_grads_.assign(nodes_.size(), {});
    pass_grads_[static_cast<std::size_t>(root->node)] = {1.0};
    for (int i = root->node; i >= 0; --i) {
        auto& g = pass_grads_[static_cast<std::size_t>(i)];
        if (g.empty()) continue;  // not an ancestor-of-root path
        nodes_[static_cast<std::size_t>(i)].backward(*this, g);
    }
    // Fold this pass into the stored grads so intermediate tensors expose
    // the same additive accumulation as leaves.
    for (int i = 0; i <= root->node; ++i) {
        auto& g = pass_grads_[static_cast<std::size_t>(i)];
        if (g.empty()) continue;
        auto& out = *nodes_[static_cast<std::size_t>(i)].out;
        if (out.grad.empty()) out.grad.assign(out.values.size(), 0.0);
        for (std::size_t j = 0; j < g.size(); ++j) out.grad[j] += g[j];
    }
    pass_grads_.clear();
}

void backward(const Tensor& root) {
    if (root.size() != 1)
        throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
    if (!root.impl()->tape || root.impl()->node < 0)
        throw ContractError("backward root is not on a tape");
    root.impl()->tape->backward_from(root.impl());
}

// ---- elementwise -----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape("add", a, b);
    std::vector<double> v(a.size());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
    Tensor out = Tensor::from(a.shape(), std::move(v));
    auto ai = I(a), bi = I(b);
    maybe_record(out, {&a, &b}, [ai, bi](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (double* gb = t.grad_sink(bi))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
    });
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape("sub", a, b);
    std::vector<double> v(a.size());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
    Tensor out = Tensor::from(a.shape(), std::move(v));
    auto ai = I(a), bi = I(b);
    maybe_record(out, {&a, &b}, [ai, bi](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
        if (double* gb = t.grad_sink(bi))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    });
    return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape("mul", a, b);
    std::vector<double> v(a.size());
    auto av = a.values(), bv = b.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
    Tensor out = Tensor::from(a.shape(), std::move(v));
    auto ai = I(a), bi = I(b);
    maybe_record(out, {&a, &b}, [ai, bi](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bi->values[i];
        if (double* gb = t.grad_sink(bi))
            for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * ai->values[i];
    });
    return out;
}

Tensor scale(const Tensor& a, double s) {
    std::vector<double> v(a.size());
    auto av = a.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = av[i] * s;
    Tensor out = Tensor::from(a.shape(), std::move(v));
    auto ai = I(a);
    maybe_record(out, {&a}, [ai, s](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
    });
    return out;
}

// ---- matmul family ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const int m = a.extent(0), k = a.extent(1), n = b.extent(1);
    if (b.extent(0) != k)
        throw ShapeError("matmul inner extents differ: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<double> v(static_cast<std::size_t>(m) * n, 0.0);
    auto av = a.values(), bv = b.values();
    for (int i = 0; i < m; ++i)
        for (int kk = 0; kk < k; ++kk) {
            const double aik = av[static_cast<std::size_t>(i) * k + kk];
            for (int j = 0; j < n; ++j)
                v[static_cast<std::size_t>(i) * n + j] += aik * bv[static_cast<std::size_t>(kk) * n + j];
        }
    Tensor out = Tensor::from({m, n}, std::move(v));
    auto ai = I(a), bi = I(b);
    maybe_record(out, {&a, &b}, [ai, bi, m, k, n](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (int i = 0; i < m; ++i)
                for (int kk = 0; kk < k; ++kk) {
                    double acc = 0.0;
                    for (int j = 0; j < n; ++j)
                        acc += g[static_cast<std::size_t>(i) * n + j] *
                               bi->values[static_cast<std::size_t>(kk) * n + j];
                    ga[static_cast<std::size_t>(i) * k + kk] += acc;
                }
        if (double* gb = t.grad_sink(bi))
            for (int kk = 0; kk < k; ++kk)
                for (int j = 0; j < n; ++j) {
                    double acc = 0.0;
                    for (int i = 0; i < m; ++i)
                        acc += ai->values[static_cast<std::size_t>(i) * k + kk] *
                               g[static_cast<std::size_t>(i) * n + j];
                    gb[static_cast<std::size_t>(kk) * n + j] += acc;
                }
    });
    return out;
}

Tensor batched_matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 3 || b.rank() != 3)
        throw ShapeError("batched_matmul expects rank-3 tensors, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    const int nb = a.extent(0), m = a.extent(1), k = a.extent(2), n = b.extent(2);
    if (b.extent(0) != nb || b.extent(1) != k)
        throw ShapeError("batched_matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    std::vector<double> v(static_cast<std::size_t>(nb) * m * n, 0.0);
    auto av = a.values(), bv = b.values();
    for (int bb = 0; bb < nb; ++bb) {
        const std::size_t ao = static_cast<std::size_t>(bb) * m * k;
        const std::size_t bo = static_cast<std::size_t>(bb) * k * n;
        const std::size_t oo = static_cast<std::size_t>(bb) * m * n;
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                const double aik = av[ao + static_cast<std::size_t>(i) * k + kk];
                for (int j = 0; j < n; ++j)
                    v[oo + static_cast<std::size_t>(i) * n + j] +=
                        aik * bv[bo + static_cast<std::size_t>(kk) * n + j];
            }
    }
    Tensor out = Tensor::from({nb, m, n}, std::move(v));
    auto ai = I(a), bi = I(b);
    maybe_record(out, {&a, &b}, [ai, bi, nb, m, k, n](Tape& t, std::span<const double> g) {
        double* ga = t.grad_sink(ai);
        double* gb = t.grad_sink(bi);
        for (int bb = 0; bb < nb; ++bb) {
            const std::size_t ao = static_cast<std::size_t>(bb) * m * k;
            const std::size_t bo = static_cast<std::size_t>(bb) * k * n;
            const std::size_t oo = static_cast<std::size_t>(bb) * m * n;
            if (ga)
                for (int i = 0; i < m; ++i)
                    for (int kk = 0; kk < k; ++kk) {
                        double acc = 0.0;
                        for (int j = 0; j < n; ++j)
                            acc += g[oo + static_cast<std::size_t>(i) * n + j] *
                                   bi->values[bo + static_cast<std::size_t>(kk) * n + j];
                        ga[ao + static_cast<std::size_t>(i) * k + kk] += acc;
                    }
            if (gb)
                for (int kk = 0; kk < k; ++kk)
                    for (int j = 0; j < n; ++j) {
                        double acc = 0.0;
                        for (int i = 0; i < m; ++i)
                            acc += ai->values[ao + static_cast<std::size_t>(i) * k + kk] *
                                   g[oo + static_cast<std::size_t>(i) * n + j];
                        gb[bo + static_cast<std::size_t>(kk) * n + j] += acc;
                    }
        }
    });
    return out;
}

Tensor transpose_last2(const Tensor& a) {
    if (a.rank() < 2)
        throw ShapeError("transpose_last2 needs rank >= 2, got " + shape_str(a.shape()));
    Shape s = a.shape();
    const int p = s[s.size() - 2], q = s[s.size() - 1];
    std::swap(s[s.size() - 2], s[s.size() - 1]);
    const std::size_t batch = a.size() / (static_cast<std::size_t>(p) * q);
    std::vector<double> v(a.size());
    auto av = a.values();
    for (std::size_t bb = 0; bb < batch; ++bb) {
        const std::size_t o = bb * static_cast<std::size_t>(p) * q;
        for (int i = 0; i < p; ++i)
            for (int j = 0; j < q; ++j)
                v[o + static_cast<std::size_t>(j) * p + i] = av[o + static_cast<std::size_t>(i) * q + j];
    }
    Tensor out = Tensor::from(std::move(s), std::move(v));
    auto ai = I(a);
    maybe_record(out, {&a}, [ai, batch, p, q](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (std::size_t bb = 0; bb < batch; ++bb) {
                const std::size_t o = bb * static_cast<std::size_t>(p) * q;
                for (int i = 0; i < p; ++i)
                    for (int j = 0; j < q; ++j)
                        ga[o + static_cast<std::size_t>(i) * q + j] +=
                            g[o + static_cast<std::size_t>(j) * p + i];
            }
    });
    return out;
}

Tensor reshape(const Tensor& a, Shape shape) {
    validate_shape(shape);
    if (shape_size(shape) != a.size())
        throw ShapeError("reshape from " + shape_str(a.shape()) + " to incompatible " +
                         shape_str(shape));
    std::vector<double> v(a.values().begin(), a.values().end());
    Tensor out = Tensor::from(std::move(shape), std::move(v));
    auto ai = I(a);
    maybe_record(out, {&a}, [ai](Tape& t, std::span<const double> g) {
        if (double* ga = t.grad_sink(ai))
            for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
    return out;
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int pad) {
    if (x.rank() != 4 || w.rank() != 4)
        throw ShapeError("conv2d expects NCHW input and OIKK weight, got " +
                         shape_str(x.shape()) + " and " + shape_str(w.shape()));
    const int n = x.extent(0), ci = x.extent(1), h = x.extent(2), ww = x.extent(3);
    const int co = w.extent(0), k = w.extent(2);
    if (w.extent(2) != w.extent(3))
        throw ShapeError("conv2d kernel must be square, got " + shape_str(w.shape()));
    if (k != 1 && k != 3)
        throw ValueError("conv2d: unsupported kernel size " + std::to_string(k) +
                         ", supported {1, 3}");
    if (w.extent(1) != ci)
        throw ShapeError("conv2d channel mismatch: input " + shape_str(x.shape()) +
                         " vs weight " + shape_str(w.shape()));
    if (stride < 1) throw ValueError("conv2d: stride must be positive");
    if (pad < 0) throw ValueError("conv2d: pad must be non-negative");
    if (h + 2 * pad < k || ww + 2 * pad < k)
        throw ShapeError("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                         shape_str(x.shape()) + " with pad " + std::to_string(pad));
    if (bias.defined() && (bias.rank() != 1 || bias.extent(0) != co))
        throw ShapeError("conv2d bias must be [" + std::to_string(co) + "], got " +
                         shape_str(bias.shape()));

    const int ho = (h + 2 * pad - k) / stride + 1;
    const int wo = (ww + 2 * pad - k) / stride + 1;
    std::vector<double> v(static_cast<std::size_t>(n) * co * ho * wo);
    auto xv = x.values(), wv = w.values();
    const double* bv = bias.defined() ? bias.values().data() : nullptr;

    // channel-pair inner kernels keep the 1 or 9 weights in registers
    for (int nn = 0; nn < n; ++nn)
        for (int oc = 0; oc < co; ++oc) {
            double* out_plane = v.data() + ((static_cast<std::size_t>(nn) * co + oc) * ho) * wo;
            const double b0 = bv ? bv[oc] : 0.0;
            for (int i = 0; i < ho * wo; ++i) out_plane[i] = b0;
            for (int ic = 0; ic < ci; ++ic) {
                const double* x_plane =
                    xv.data() + ((static_cast<std::size_t>(nn) * ci + ic) * h) * ww;
                const double* wk = wv.data() + (static_cast<std::size_t>(oc) * ci + ic) * k * k;
                if (k == 1) {
                    const double w0 = wk[0];
                    for (int oh = 0; oh < ho; ++oh) {
                        const double* xr = x_plane + static_cast<std::size_t>(oh) * stride * ww;
                        double* orow = out_plane + static_cast<std::size_t>(oh) * wo;
                        for (int ow2 = 0; ow2 < wo; ++ow2) orow[ow2] += w0 * xr[ow2 * stride];
                    }
                    continue;
                }
                // interior columns get a branch-free unrolled stencil
                int wlo = 0;
                while (wlo < wo && wlo * stride - pad < 0) ++wlo;
                int whi = wo;
                while (whi > wlo && (whi - 1) * stride - pad + 2 >= ww) --whi;
                for (int oh = 0; oh < ho; ++oh) {
                    double* orow = out_plane + static_cast<std::size_t>(oh) * wo;
                    const int ih0 = oh * stride - pad;
                    const bool row_interior = ih0 >= 0 && ih0 + 2 < h;
                    auto edge = [&](int ow2) {
                        const int iw0 = ow2 * stride - pad;
                        double acc = 0.0;
                        for (int kh = 0; kh < 3; ++kh) {
                            const int ih = ih0 + kh;
                            if (ih < 0 || ih >= h) continue;
                            for (int kw = 0; kw < 3; ++kw) {
                                const int iw = iw0 + kw;
                                if (iw < 0 || iw >= ww) continue;
                                acc += wk[kh * 3 + kw] *
                                       x_plane[static_cast<std::size_t>(ih) * ww + iw];
                            }
                        }
                        orow[ow2] += acc;
                    };
                    if (!row_interior) {
                        for (int ow2 = 0; ow2 < wo; ++ow2) edge(ow2);
                        continue;
                    }
                    for (int ow2 = 0; ow2 < wlo; ++ow2) edge(ow2);
                    const double* r0 = x_plane + static_cast<std::size_t>(ih0) * ww;
                    const double* r1 = r0 + ww;
                    const double* r2 = r1 + ww;
                    for (int ow2 = wlo; ow2 < whi; ++ow2) {
                        const int iw0 = ow2 * stride - pad;
                        orow[ow2] += wk[0] * r0[iw0] + wk[1] * r0[iw0 + 1] + wk[2] * r0[iw0 + 2] +
                                     wk[3] * r1[iw0] + wk[4] * r1[iw0 + 1] + wk[5] * r1[iw0 + 2] +
                                     wk[6] * r2[iw0] + wk[7] * r2[iw0 + 1] + wk[8] * r2[iw0 + 2];
                    }
                    for (int ow2 = whi; ow2 < wo; ++ow2) edge(ow2);
                }
            }
        }

    Tensor out = Tensor::from({n, co, ho, wo}, std::move(v));
    auto xi = I(x), wi = I(w);
    auto bi = bias.defined() ? I(bias) : nullptr;
    maybe_record(out, {&x, &w, &bias},
                 [xi, wi, bi, n, ci, h, ww, co, k, ho, wo, stride, pad](
                     Tape& t, std::span<const double> g) {
                     double* gx = t.grad_sink(xi);
                     double* gw = t.grad_sink(wi);
                     double* gb = bi ? t.grad_sink(bi) : nullptr;
                     const double* xv = xi->values.data();
                     const double* wv = wi->values.data();
                     if (gb)
                         for (int nn = 0; nn < n; ++nn)
                             for (int oc = 0; oc < co; ++oc) {
                                 const double* g_plane =
                                     g.data() + ((static_cast<std::size_t>(nn) * co + oc) * ho) * wo;
                                 double acc = 0.0;
                                 for (int i = 0; i < ho * wo; ++i) acc += g_plane[i];
                                 gb[oc] += acc;
                             }
                     if (!gx && !gw) return;
                     const bool fast = k == 3 && stride == 1;
                     for (int nn = 0; nn < n; ++nn)
                         for (int oc = 0; oc < co; ++oc) {
                             const double* g_plane =
                                 g.data() + ((static_cast<std::size_t>(nn) * co + oc) * ho) * wo;
                             for (int ic = 0; ic < ci; ++ic) {
                                 const double* x_plane =
                                     xv + ((static_cast<std::size_t>(nn) * ci + ic) * h) * ww;
                                 double* gx_plane =
                                     gx ? gx + ((static_cast<std::size_t>(nn) * ci + ic) * h) * ww
                                        : nullptr;
                                 const std::size_t wk0 =
                                     (static_cast<std::size_t>(oc) * ci + ic) * k * k;
                                 if (fast) {
                                     // gather form: both dw and dx become contiguous
                                     // row passes over the output gradient
                                     if (gw)
                                         for (int kh = 0; kh < 3; ++kh)
                                             for (int kw = 0; kw < 3; ++kw) {
                                                 const int oh_lo = std::max(0, pad - kh);
                                                 const int oh_hi = std::min(ho, h - kh + pad);
                                                 const int ow_lo = std::max(0, pad - kw);
                                                 const int ow_hi = std::min(wo, ww - kw + pad);
                                                 double acc = 0.0;
                                                 for (int oh = oh_lo; oh < oh_hi; ++oh) {
                                                     const double* grow =
                                                         g_plane + static_cast<std::size_t>(oh) * wo;
                                                     const double* xrow =
                                                         x_plane +
                                                         static_cast<std::size_t>(oh - pad + kh) * ww -
                                                         pad + kw;
                                                     for (int ow2 = ow_lo; ow2 < ow_hi; ++ow2)
                                                         acc += grow[ow2] * xrow[ow2];
                                                 }
                                                 gw[wk0 + kh * 3 + kw] += acc;
                                             }
                                     if (gx_plane)
                                         for (int ih = 0; ih < h; ++ih) {
                                             double* gx_row =
                                                 gx_plane + static_cast<std::size_t>(ih) * ww;
                                             for (int kh = 0; kh < 3; ++kh) {
                                                 const int oh = ih + pad - kh;
                                                 if (oh < 0 || oh >= ho) continue;
                                                 const double* grow =
                                                     g_plane + static_cast<std::size_t>(oh) * wo;
                                                 for (int kw = 0; kw < 3; ++kw) {
                                                     const double wgt = wv[wk0 + kh * 3 + kw];
                                                     const int iw_lo = std::max(0, kw - pad);
                                                     const int iw_hi = std::min(ww, wo + kw - pad);
                                                     const double* gsh = grow + pad - kw;
                                                     for (int iw = iw_lo; iw < iw_hi; ++iw)
                                                         gx_row[iw] += wgt * gsh[iw];
                                                 }
                                             }
                                         }
                                 } else {
                                     double wacc[9] = {0, 0, 0, 0, 0, 0, 0, 0, 0};
                                     for (int oh = 0; oh < ho; ++oh) {
                                         const int ih0 = oh * stride - pad;
                                         const double* grow = g_plane + static_cast<std::size_t>(oh) * wo;
                                         for (int ow2 = 0; ow2 < wo; ++ow2) {
                                             const double go = grow[ow2];
                                             const int iw0 = ow2 * stride - pad;
                                             for (int kh = 0; kh < k; ++kh) {
                                                 const int ih = ih0 + kh;
                                                 if (ih < 0 || ih >= h) continue;
                                                 for (int kw = 0; kw < k; ++kw) {
                                                     const int iw = iw0 + kw;
                                                     if (iw < 0 || iw >= ww) continue;
                                                     const std::size_t xo =
                                                         static_cast<std::size_t>(ih) * ww + iw;
                                                     wacc[kh * k + kw] += go * x_plane[xo];
                                                     if (gx_plane) gx_plane[xo] += go * wv[wk0 + kh * k + kw];
                                                 }
                                             }
                                         }
                                     }
                                     if (gw)
                                         for (int i = 0; i < k * k; ++i) gw[wk0 + i] += wacc[i];
                                 }
                             }
                         }
                 });
    return out;
}

// ---- activations and pooling -------------------------------------------------

Tensor relu(const Tensor& x) {
    std::vector<double> v(x.size());
    auto xv = x.values();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] = xv[i] > 0.0 ? xv[i] : 0.0;
    Tensor out = Tensor::from(x.shape(), std::move(v));
    auto xi = I(x);
    maybe_record(out, {&x}, [xi](Tape& t, std::span<const double> g) {
        if (double* gx = t.grad_sink(xi))
            for (std::size_t i = 0; i < g.size(); ++i)
                if (xi->values[i] > 0.0) gx[i] += g[i];  // grad at exactly 0 is 0
    });
    return out;
}

Tensor global_avg_pool(const Tensor& x) {
    if (x.rank() != 4)
        throw ShapeError("global_avg_pool expects NCHW, got " + shape_str(x.shape()));
    const int n = x.extent(0), c = x.extent(1), h = x.extent(2), w = x.extent(3);
    const double inv = 1.0 / (static_cast<double>(h) * w);
    std::vector<double> v(static_cast<std::size_t>(n) * c);
    auto xv = x.values();
    for (int nn = 0; nn < n; ++nn)
        for (int cc = 0; cc < c; ++cc) {
            double acc = 0.0;
            const std::size_t o = (static_cast<std::size_t>(nn) * c + cc) * h * w;
            for (int i = 0; i < h * w; ++i) acc += xv[o + static_cast<std::size_t>(i)];
            v[static_cast<std::size_t>(nn) * c + cc] = acc * inv;
        }
    Tensor out = Tensor::from({n, c}, std::move(v));
    auto xi = I(x);
    maybe_record(out, {&x}, [xi, n, c, h, w, inv](Tape& t, std::span<const double> g) {
        if (double* gx = t.grad_sink(xi))
            for (int nn = 0; nn < n; ++nn)
                for (int cc = 0; cc < c; ++cc) {
                    const double go = g[static_cast<std::size_t>(nn) * c + cc] * inv;
                    const std::size_t o = (static_cast<std::size_t>(nn) * c + cc) * h * w;
                    for (int i = 0; i < h * w; ++i) gx[o + static_cast<std::size_t>(i)] += go;
                }
    });
    return out;
}

// ---- softmax family ----------------------------------------------------------

namespace {

struct AxisSplit {
    std::size_t outer, len, inner;
};

AxisSplit split_axis(const Shape& shape, int axis) {
    if (axis < 0 || axis >= static_cast<int>(shape.size()))
        throw ShapeError("axis " + std::to_string(axis) + " invalid for " + shape_str(shape));
    AxisSplit s{1, static_cast<std::size_t>(shape[static_cast<std::size_t>(axis)]), 1};
    for (int i = 0; i < axis; ++i) s.outer *= static_cast<std::size_t>(shape[static_cast<std::size_t>(i)]);
    for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < shape.size(); ++i)
        s.inner *= static_cast<std::size_t>(shape[i]);
    return s;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis, double temperature) {
    if (temperature <= 0.0) throw ValueError("softmax: temperature must be positive");
    const AxisSplit s = split_axis(x.shape(), axis);
    std::vector<double> v(x.size());
    auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.len; ++i) m = std::max(m, xv[base + i * s.inner]);
            double sum = 0.0;
            for (std::size_t i = 0; i < s.len; ++i) {
                const double e = std::exp((xv[base + i * s.inner] - m) / temperature);
                v[base + i * s.inner] = e;
                sum += e;
            }
            for (std::size_t i = 0; i < s.len; ++i) v[base + i * s.inner] /= sum;
        }
    Tensor out = Tensor::from(x.shape(), std::move(v));
    auto xi = I(x), oi = I(out);
    maybe_record(out, {&x}, [xi, oi, s, temperature](Tape& t, std::span<const double> g) {
        if (double* gx = t.grad_sink(xi))
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t base = o * s.len * s.inner + in;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < s.len; ++i)
                        dot += g[base + i * s.inner] * oi->values[base + i * s.inner];
                    for (std::size_t i = 0; i < s.len; ++i)
                        gx[base + i * s.inner] += oi->values[base + i * s.inner] *
                                                  (g[base + i * s.inner] - dot) / temperature;
                }
    });
    return out;
}

Tensor log_softmax(const Tensor& x, int axis, double temperature) {
    if (temperature <= 0.0) throw ValueError("log_softmax: temperature must be positive");
    const AxisSplit s = split_axis(x.shape(), axis);
    std::vector<double> v(x.size());
    auto xv = x.values();
    for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t in = 0; in < s.inner; ++in) {
            const std::size_t base = o * s.len * s.inner + in;
            double m = -std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < s.len; ++i) m = std::max(m, xv[base + i * s.inner]);
            double sum = 0.0;
            for (std::size_t i = 0; i < s.len; ++i)
                sum += std::exp((xv[base + i * s.inner] - m) / temperature);
            const double lse = std::log(sum);
            for (std::size_t i = 0; i < s.len; ++i)
                v[base + i * s.inner] = (xv[base + i * s.inner] - m) / temperature - lse;
        }
    Tensor out = Tensor::from(x.shape(), std::move(v));
    auto xi = I(x), oi = I(out);
    maybe_record(out, {&x}, [xi, oi, s, temperature](Tape& t, std::span<const double> g) {
        if (double* gx = t.grad_sink(xi))
            for (std::size_t o = 0; o < s.outer; ++o)
                for (std::size_t in = 0; in < s.inner; ++in) {
                    const std::size_t base = o * s.len * s.inner + in;
                    double gsum = 0.0;
                    for (std::size_t i = 0; i < s.len; ++i) gsum += g[base + i * s.inner];
                    for (std::size_t i = 0; i < s.len; ++i)
                        gx[base + i * s.inner] +=
                            (g[base + i * s.inner] -
                             std::exp(oi->values[base + i * s.inner]) * gsum) /
                            temperature;
                }
    });
    return out;
}

// ---- reductions ----------------------------------------------------------------

namespace {

// Per-element map from input flat index to output flat index when reducing
// the given axes (true entries in `reduced`).
std::vector<std::size_t> reduction_map(const Shape& shape, const std::vector<bool>& reduced,
                                       std::size_t out_size) {
    const std::size_t total = shape_size(shape);
    std::vector<std::size_t> map(total);
    const std::size_t rank = shape.size();
    std::vector<std::size_t> out_stride(rank, 0);
    std::size_t stride = out_size;
    for (std::size_t d = 0; d < rank; ++d) {
        if (reduced[d]) continue;
        stride /= static_cast<std::size_t>(shape[d]);
        out_stride[d] = stride;
    }
    std::vector<int> coord(rank, 0);
    for (std::size_t i = 0; i < total; ++i) {
        std::size_t oi = 0;
        for (std::size_t d = 0; d < rank; ++d)
            if (!reduced[d]) oi += static_cast<std::size_t>(coord[d]) * out_stride[d];
        map[i] = oi;
        for (std::size_t d = rank; d-- > 0;) {
            if (++coord[d] < shape[d]) break;
            coord[d] = 0;
        }
    }
    return map;
}

Tensor reduce_impl(const Tensor& x, const std::vector<int>& axes, bool mean) {
    const std::size_t rank = x.shape().size();
    std::vector<bool> reduced(rank, false);
    for (int a : axes) {
        if (a < 0 || a >= static_cast<int>(rank))
            throw ShapeError("reduce: axis " + std::to_string(a) + " invalid for " +
                             shape_str(x.shape()));
        if (reduced[static_cast<std::size_t>(a)])
            throw ShapeError("reduce: duplicate axis " + std::to_string(a));
        reduced[static_cast<std::size_t>(a)] = true;
    }
    Shape out_shape;
    std::size_t reduced_count = 1;
    for (std::size_t d = 0; d < rank; ++d) {
        if (reduced[d])
            reduced_count *= static_cast<std::size_t>(x.shape()[d]);
        else
            out_shape.push_back(x.shape()[d]);
    }
    if (out_shape.empty()) out_shape.push_back(1);
    const std::size_t out_size = shape_size(out_shape);
    const double factor = mean ? 1.0 / static_cast<double>(reduced_count) : 1.0;

    auto map = std::make_shared<std::vector<std::size_t>>(
        reduction_map(x.shape(), reduced, out_size));
    std::vector<double> v(out_size, 0.0);
    auto xv = x.values();
    for (std::size_t i = 0; i < xv.size(); ++i) v[(*map)[i]] += xv[i];
    if (mean)
        for (double& e : v) e *= factor;
    Tensor out = Tensor::from(std::move(out_shape), std::move(v));
    auto xi = I(x);
    maybe_record(out, {&x}, [xi, map, factor](Tape& t, std::span<const double> g) {
        if (double* gx = t.grad_sink(xi))
            for (std::size_t i = 0; i < xi->values.size(); ++i) gx[i] += g[(*map)[i]] * factor;
    });
    return out;
}

}  // namespace

Tensor reduce_sum(const Tensor& x) {
    std::vector<int> axes(static_cast<std::size_t>(x.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_impl(x, axes, false);
}

Tensor reduce_sum(const Tensor& x, const std::vector<int>& axes) {
    return reduce_impl(x, axes, false);
}

Tensor reduce_mean(const Tensor& x) {
    std::vector<int> axes(static_cast<std::size_t>(x.rank()));
    std::iota(axes.begin(), axes.end(), 0);
    return reduce_impl(x, axes, true);
}

Tensor reduce_mean(const Tensor& x, const std::vector<int>& axes) {
    return reduce_impl(x, axes, true);
}

// ---- cross entropy ---------------------------------------------------------------

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels,
                     std::optional<int> ignore_label) {
    if (logits.rank() != 2 && logits.rank() != 4)
        throw ShapeError("cross_entropy expects [N,K] or [N,K,H,W], got " +
                         shape_str(logits.shape()));
    const int n = logits.extent(0);
    const int k = logits.extent(1);
    const int h = logits.rank() == 4 ? logits.extent(2) : 1;
    const int w = logits.rank() == 4 ? logits.extent(3) : 1;
    const std::size_t positions = static_cast<std::size_t>(n) * h * w;
    if (labels.size() != positions)
        throw ShapeError("cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                         std::to_string(positions) + " positions");

    auto lv = logits.values();
    auto probs = std::make_shared<std::vector<double>>(positions * static_cast<std::size_t>(k));
    double total = 0.0;
    std::size_t count = 0;
    // position index = (n*h + hh)*w + ww; logit offset for class c at that
    // position is ((n*k + c)*h + hh)*w + ww
    for (int nn = 0; nn < n; ++nn)
        for (int hh = 0; hh < h; ++hh)
            for (int ww2 = 0; ww2 < w; ++ww2) {
                const std::size_t pos =
                    (static_cast<std::size_t>(nn) * h + hh) * w + ww2;
                const int label = labels[pos];
                const bool ignored = ignore_label && label == *ignore_label;
                if (!ignored && (label < 0 || label >= k))
                    throw ValueError("cross_entropy: label " + std::to_string(label) +
                                     " out of range [0, " + std::to_string(k) + ")");
                double m = -std::numeric_limits<double>::infinity();
                for (int c = 0; c < k; ++c)
                    m = std::max(m, lv[((static_cast<std::size_t>(nn) * k + c) * h + hh) * w + ww2]);
                double sum = 0.0;
                for (int c = 0; c < k; ++c)
                    sum += std::exp(lv[((static_cast<std::size_t>(nn) * k + c) * h + hh) * w + ww2] - m);
                const double lse = m + std::log(sum);
                for (int c = 0; c < k; ++c)
                    (*probs)[pos * k + c] = std::exp(
                        lv[((static_cast<std::size_t>(nn) * k + c) * h + hh) * w + ww2] - lse);
                if (!ignored) {
                    total += lse - lv[((static_cast<std::size_t>(nn) * k + label) * h + hh) * w + ww2];
                    ++count;
                }
            }
    const double loss = count ? total / static_cast<double>(count) : 0.0;
    Tensor out = Tensor::scalar(loss);
    auto li = I(logits);
    auto labels_copy = std::make_shared<std::vector<int>>(labels);
    maybe_record(out, {&logits},
                 [li, probs, labels_copy, ignore_label, n, k, h, w, count](
                     Tape& t, std::span<const double> g) {
                     if (count == 0) return;
                     double* gl = t.grad_sink(li);
                     if (!gl) return;
                     const double gs = g[0] / static_cast<double>(count);
                     for (int nn = 0; nn < n; ++nn)
                         for (int hh = 0; hh < h; ++hh)
                             for (int ww2 = 0; ww2 < w; ++ww2) {
                                 const std::size_t pos =
                                     (static_cast<std::size_t>(nn) * h + hh) * w + ww2;
                                 const int label = (*labels_copy)[pos];
                                 if (ignore_label && label == *ignore_label) continue;
                                 for (int c = 0; c < k; ++c) {
                                     const double p = (*probs)[pos * k + c];
                                     gl[((static_cast<std::size_t>(nn) * k + c) * h + hh) * w + ww2] +=
                                         gs * (p - (c == label ? 1.0 : 0.0));
                                 }
                             }
                 });
    return out;
}

// ---- gradient checking --------------------------------------------------------------

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
    if (eps <= 0.0) throw ValueError("grad_check: eps must be positive");

    Tensor xp = Tensor::param(x.shape(), {x.values().begin(), x.values().end()});
    Tape tape;
    {
        TapeScope scope(tape);
        Tensor y = f(xp);
        backward(y);
    }
    std::vector<double> analytic(x.size(), 0.0);
    if (xp.has_grad()) analytic.assign(xp.grad().begin(), xp.grad().end());

    Tensor xe = x.clone();
    double max_err = 0.0;
    for (std::size_t j = 0; j < xe.size(); ++j) {
        const double orig = xe.values()[j];
        xe.values()[j] = orig + eps;
        const double fp = f(xe).item();
        xe.values()[j] = orig - eps;
        const double fm = f(xe).item();
        xe.values()[j] = orig;
        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = analytic[j];
        const double err =
            std::abs(a - numeric) / std::max({std::abs(a), std::abs(numeric), 1e-8});
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace kd
