#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "vpl/common.hpp"
#include "vpl/kernels.hpp"

namespace vpl {

using Shape = std::vector<int>;

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

struct TensorNode {
    Shape shape;
    std::vector<double> data;
    std::vector<double> grad;  // empty until touched; exact-shape match once allocated
    bool requires_grad = false;
    std::string name;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    }
};

// Gradient recording is on by default; eval paths suspend it with this guard
// so forwards allocate no graph.
inline int& nograd_depth() {
    thread_local int d = 0;
    return d;
}
struct NoGradGuard {
    NoGradGuard() { ++nograd_depth(); }
    ~NoGradGuard() { --nograd_depth(); }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};
inline bool grad_enabled() { return nograd_depth() == 0; }

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0) : n_(std::make_shared<TensorNode>()) {
        n_->shape = std::move(shape);
        n_->data.assign(shape_numel(n_->shape), fill);
    }
    static Tensor from(Shape shape, std::vector<double> values) {
        Tensor t;
        t.n_ = std::make_shared<TensorNode>();
        VPL_SHAPE_CHECK(shape_numel(shape) == values.size(),
                        "Tensor::from: %zu values for shape %s", values.size(),
                        shape_str(shape).c_str());
        t.n_->shape = std::move(shape);
        t.n_->data = std::move(values);
        return t;
    }

    bool defined() const { return static_cast<bool>(n_); }
    const Shape& shape() const { return n_->shape; }
    int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    size_t numel() const { return n_->data.size(); }
    std::vector<double>& data() { return n_->data; }
    const std::vector<double>& data() const { return n_->data; }
    std::vector<double>& grad() {
        n_->ensure_grad();
        return n_->grad;
    }
    bool requires_grad() const { return n_->requires_grad; }
    Tensor& set_requires_grad(bool v) {
        n_->requires_grad = v;
        return *this;
    }
    Tensor& set_name(std::string name) {
        n_->name = std::move(name);
        return *this;
    }
    const std::string& name() const { return n_->name; }
    double item() const {
        VPL_SHAPE_CHECK(numel() == 1, "item: tensor has shape %s", shape_str(n_->shape).c_str());
        return n_->data[0];
    }
    void zero_grad() { n_->grad.assign(n_->data.size(), 0.0); }
    const std::shared_ptr<TensorNode>& node() const { return n_; }

private:
    std::shared_ptr<TensorNode> n_;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> parents) {
    if (!grad_enabled()) return false;
    for (const Tensor* p : parents)
        if (p->requires_grad()) return true;
    return false;
}

inline void attach(Tensor& out, std::initializer_list<const Tensor*> parents,
                   std::function<void(TensorNode&)> fn) {
    auto& node = *out.node();
    node.requires_grad = true;
    for (const Tensor* p : parents) node.parents.push_back(p->node());
    node.backward_fn = std::move(fn);
}

inline double* grad_of(TensorNode& self, size_t i) {
    TensorNode& p = *self.parents[i];
    if (!p.requires_grad) return nullptr;
    p.ensure_grad();
    return p.grad.data();
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    VPL_SHAPE_CHECK(a.shape() == b.shape(), "add: %s vs %s", shape_str(a.shape()).c_str(),
                    shape_str(b.shape()).c_str());
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    if (detail::recording({&a, &b}))
        detail::attach(out, {&a, &b}, [](TensorNode& self) {
            for (size_t p = 0; p < 2; ++p)
                if (double* g = detail::grad_of(self, p))
                    for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        });
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    VPL_SHAPE_CHECK(a.shape() == b.shape(), "sub: %s vs %s", shape_str(a.shape()).c_str(),
                    shape_str(b.shape()).c_str());
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    if (detail::recording({&a, &b}))
        detail::attach(out, {&a, &b}, [](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            if (double* g = detail::grad_of(self, 1))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        });
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    VPL_SHAPE_CHECK(a.shape() == b.shape(), "mul: %s vs %s", shape_str(a.shape()).c_str(),
                    shape_str(b.shape()).c_str());
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    if (detail::recording({&a, &b}))
        detail::attach(out, {&a, &b}, [](TensorNode& self) {
            const auto& ad = self.parents[0]->data;
            const auto& bd = self.parents[1]->data;
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * bd[i];
            if (double* g = detail::grad_of(self, 1))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * ad[i];
        });
    return out;
}

inline Tensor mul_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] * s;
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [s](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * s;
        });
    return out;
}

inline Tensor add_scalar(const Tensor& a, double s) {
    Tensor out(a.shape());
    for (size_t i = 0; i < a.numel(); ++i) out.data()[i] = a.data()[i] + s;
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        });
    return out;
}

inline Tensor silu(const Tensor& a) {
    Tensor out(a.shape());
    kern::silu_forward(a.numel(), a.data().data(), out.data().data());
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                kern::silu_backward(self.data.size(), self.parents[0]->data.data(),
                                    self.grad.data(), g);
        });
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    VPL_SHAPE_CHECK(shape_numel(shape) == a.numel(), "reshape: %s -> %s",
                    shape_str(a.shape()).c_str(), shape_str(shape).c_str());
    Tensor out = Tensor::from(std::move(shape), a.data());
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        });
    return out;
}

inline Tensor transpose(const Tensor& a) {
    VPL_SHAPE_CHECK(a.rank() == 2, "transpose: rank-2 required, got %s",
                    shape_str(a.shape()).c_str());
    const int m = a.dim(0), n = a.dim(1);
    Tensor out(Shape{n, m});
    kern::transpose(m, n, a.data().data(), out.data().data());
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [m, n](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0)) {
                std::vector<double> tmp(self.grad.size());
                kern::transpose(n, m, self.grad.data(), tmp.data());
                for (size_t i = 0; i < tmp.size(); ++i) g[i] += tmp[i];
            }
        });
    return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, int axis) {
    VPL_CHECK(!parts.empty(), "concat: no inputs");
    const Shape& s0 = parts[0].shape();
    VPL_SHAPE_CHECK(axis >= 0 && axis < static_cast<int>(s0.size()), "concat: axis %d for %s",
                    axis, shape_str(s0).c_str());
    Shape out_shape = s0;
    int total = 0;
    for (const auto& p : parts) {
        VPL_SHAPE_CHECK(p.rank() == static_cast<int>(s0.size()), "concat: rank mismatch %s vs %s",
                        shape_str(p.shape()).c_str(), shape_str(s0).c_str());
        for (int i = 0; i < p.rank(); ++i)
            if (i != axis)
                VPL_SHAPE_CHECK(p.dim(i) == s0[static_cast<size_t>(i)],
                                "concat: dim %d mismatch %s vs %s", i,
                                shape_str(p.shape()).c_str(), shape_str(s0).c_str());
        total += p.dim(axis);
    }
    out_shape[static_cast<size_t>(axis)] = total;

    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s0[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(axis) + 1; i < s0.size(); ++i) inner *= static_cast<size_t>(s0[i]);

    Tensor out(out_shape);
    std::vector<size_t> widths;
    size_t off = 0;
    for (const auto& p : parts) {
        const size_t w = static_cast<size_t>(p.dim(axis)) * inner;
        widths.push_back(w);
        for (size_t ou = 0; ou < outer; ++ou)
            std::memcpy(out.data().data() + ou * static_cast<size_t>(total) * inner + off,
                        p.data().data() + ou * w, sizeof(double) * w);
        off += w;
    }

    bool rec = grad_enabled();
    if (rec) {
        rec = false;
        for (const auto& p : parts) rec = rec || p.requires_grad();
    }
    if (rec) {
        auto& node = *out.node();
        node.requires_grad = true;
        for (const auto& p : parts) node.parents.push_back(p.node());
        const size_t row = static_cast<size_t>(total) * inner;
        node.backward_fn = [outer, widths, row](TensorNode& self) {
            size_t off2 = 0;
            for (size_t pi = 0; pi < self.parents.size(); ++pi) {
                const size_t w = widths[pi];
                if (double* g = detail::grad_of(self, pi)) {
                    for (size_t ou = 0; ou < outer; ++ou) {
                        const double* src = self.grad.data() + ou * row + off2;
                        double* dst = g + ou * w;
                        for (size_t i = 0; i < w; ++i) dst[i] += src[i];
                    }
                }
                off2 += w;
            }
        };
    }
    return out;
}

inline Tensor narrow(const Tensor& a, int axis, int start, int len) {
    const Shape& s = a.shape();
    VPL_SHAPE_CHECK(axis >= 0 && axis < a.rank(), "narrow: axis %d for %s", axis,
                    shape_str(s).c_str());
    VPL_SHAPE_CHECK(start >= 0 && len > 0 && start + len <= s[static_cast<size_t>(axis)],
                    "narrow: [%d,%d) on axis %d of %s", start, start + len, axis,
                    shape_str(s).c_str());
    size_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(s[static_cast<size_t>(i)]);
    for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) inner *= static_cast<size_t>(s[i]);
    const size_t src_row = static_cast<size_t>(s[static_cast<size_t>(axis)]) * inner;
    const size_t dst_row = static_cast<size_t>(len) * inner;

    Shape out_shape = s;
    out_shape[static_cast<size_t>(axis)] = len;
    Tensor out(out_shape);
    for (size_t ou = 0; ou < outer; ++ou)
        std::memcpy(out.data().data() + ou * dst_row,
                    a.data().data() + ou * src_row + static_cast<size_t>(start) * inner,
                    sizeof(double) * dst_row);
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [outer, inner, src_row, dst_row, start](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t ou = 0; ou < outer; ++ou) {
                    const double* src = self.grad.data() + ou * dst_row;
                    double* dst = g + ou * src_row + static_cast<size_t>(start) * inner;
                    for (size_t i = 0; i < dst_row; ++i) dst[i] += src[i];
                }
        });
    return out;
}

inline Tensor detach(const Tensor& a) {
    Tensor out = Tensor::from(a.shape(), a.data());
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    VPL_SHAPE_CHECK(a.rank() == 2 && b.rank() == 2 && a.dim(1) == b.dim(0),
                    "matmul: %s x %s", shape_str(a.shape()).c_str(),
                    shape_str(b.shape()).c_str());
    const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor out(Shape{m, n});
    kern::gemm(m, n, k, a.data().data(), b.data().data(), out.data().data(), false);
    if (detail::recording({&a, &b}))
        detail::attach(out, {&a, &b}, [m, k, n](TensorNode& self) {
            const auto& ad = self.parents[0]->data;
            const auto& bd = self.parents[1]->data;
            if (double* ga = detail::grad_of(self, 0)) {
                // dA += dY * B^T
                std::vector<double> bT(static_cast<size_t>(k) * n);
                kern::transpose(k, n, bd.data(), bT.data());
                kern::gemm(m, k, n, self.grad.data(), bT.data(), ga, true);
            }
            if (double* gb = detail::grad_of(self, 1)) {
                // dB += A^T * dY
                std::vector<double> aT(static_cast<size_t>(m) * k);
                kern::transpose(m, k, ad.data(), aT.data());
                kern::gemm(k, n, m, aT.data(), self.grad.data(), gb, true);
            }
        });
    return out;
}

// y = W x + b for a rank-1 x. W (out,in), b (out) optional.
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    VPL_SHAPE_CHECK(x.rank() == 1 && w.rank() == 2 && w.dim(1) == x.dim(0),
                    "linear: x %s w %s", shape_str(x.shape()).c_str(),
                    shape_str(w.shape()).c_str());
    const int out_dim = w.dim(0), in_dim = w.dim(1);
    const bool has_b = b.defined();
    if (has_b)
        VPL_SHAPE_CHECK(b.rank() == 1 && b.dim(0) == out_dim, "linear: bias %s for w %s",
                        shape_str(b.shape()).c_str(), shape_str(w.shape()).c_str());
    Tensor out(Shape{out_dim});
    for (int o = 0; o < out_dim; ++o) {
        double s = has_b ? b.data()[static_cast<size_t>(o)] : 0.0;
        const double* wr = w.data().data() + static_cast<size_t>(o) * in_dim;
        for (int i = 0; i < in_dim; ++i) s += wr[i] * x.data()[static_cast<size_t>(i)];
        out.data()[static_cast<size_t>(o)] = s;
    }
    const bool rec = has_b ? detail::recording({&x, &w, &b}) : detail::recording({&x, &w});
    if (rec) {
        auto fn = [out_dim, in_dim, has_b](TensorNode& self) {
            const auto& xd = self.parents[0]->data;
            const auto& wd = self.parents[1]->data;
            double* gx = detail::grad_of(self, 0);
            double* gw = detail::grad_of(self, 1);
            double* gb = has_b ? detail::grad_of(self, 2) : nullptr;
            for (int o = 0; o < out_dim; ++o) {
                const double g = self.grad[static_cast<size_t>(o)];
                if (gb) gb[o] += g;
                const double* wr = wd.data() + static_cast<size_t>(o) * in_dim;
                double* gwr = gw ? gw + static_cast<size_t>(o) * in_dim : nullptr;
                for (int i = 0; i < in_dim; ++i) {
                    if (gx) gx[i] += g * wr[i];
                    if (gwr) gwr[i] += g * xd[static_cast<size_t>(i)];
                }
            }
        };
        if (has_b)
            detail::attach(out, {&x, &w, &b}, fn);
        else
            detail::attach(out, {&x, &w}, fn);
    }
    return out;
}

inline Tensor linear(const Tensor& x, const Tensor& w) { return linear(x, w, Tensor{}); }

inline Tensor softmax_rows(const Tensor& a) {
    VPL_SHAPE_CHECK(a.rank() == 2, "softmax_rows: rank-2 required, got %s",
                    shape_str(a.shape()).c_str());
    const int m = a.dim(0), n = a.dim(1);
    Tensor out(a.shape());
    kern::softmax_rows(m, n, a.data().data(), out.data().data());
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [m, n](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                kern::softmax_rows_backward(m, n, self.data.data(), self.grad.data(), g);
        });
    return out;
}

// Single-head scaled dot-product attention. q (nq,d), k (nk,d), v (nk,d).
inline Tensor sdpa(const Tensor& q, const Tensor& k, const Tensor& v) {
    VPL_SHAPE_CHECK(q.rank() == 2 && k.rank() == 2 && v.rank() == 2 && q.dim(1) == k.dim(1) &&
                        k.dim(0) == v.dim(0),
                    "sdpa: q %s k %s v %s", shape_str(q.shape()).c_str(),
                    shape_str(k.shape()).c_str(), shape_str(v.shape()).c_str());
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(1)));
    Tensor attn = softmax_rows(mul_scalar(matmul(q, transpose(k)), scale));
    return matmul(attn, v);
}

// ---------------------------------------------------------------------------
// Convolutions and friends
// ---------------------------------------------------------------------------

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    VPL_SHAPE_CHECK(x.rank() == 4 && w.rank() == 4 && x.dim(1) == w.dim(1),
                    "conv2d: x %s w %s", shape_str(x.shape()).c_str(),
                    shape_str(w.shape()).c_str());
    VPL_CHECK(stride == 1 || stride == 2, "conv2d: stride %d unsupported", stride);
    const bool has_b = b.defined();
    if (has_b)
        VPL_SHAPE_CHECK(b.rank() == 1 && b.dim(0) == w.dim(0), "conv2d: bias %s for w %s",
                        shape_str(b.shape()).c_str(), shape_str(w.shape()).c_str());
    kern::Conv2dDims d(x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3),
                       stride);
    Tensor out(Shape{d.batch, d.out_ch, d.out_h, d.out_w});
    std::vector<double> scratch;
    kern::conv2d_forward(d, x.data().data(), w.data().data(),
                         has_b ? b.data().data() : nullptr, out.data().data(), scratch);
    const bool rec = has_b ? detail::recording({&x, &w, &b}) : detail::recording({&x, &w});
    if (rec) {
        auto fn = [d, has_b](TensorNode& self) {
            double* gx = detail::grad_of(self, 0);
            double* gw = detail::grad_of(self, 1);
            double* gb = has_b ? detail::grad_of(self, 2) : nullptr;
            std::vector<double> scratch2;
            kern::conv2d_backward(d, self.parents[0]->data.data(), self.parents[1]->data.data(),
                                  self.grad.data(), gx, gw, gb, scratch2);
        };
        if (has_b)
            detail::attach(out, {&x, &w, &b}, fn);
        else
            detail::attach(out, {&x, &w}, fn);
    }
    return out;
}

inline Tensor conv1d(const Tensor& x, const Tensor& w, const Tensor& b, int stride) {
    VPL_SHAPE_CHECK(x.rank() == 2 && w.rank() == 3 && x.dim(0) == w.dim(1),
                    "conv1d: x %s w %s", shape_str(x.shape()).c_str(),
                    shape_str(w.shape()).c_str());
    VPL_CHECK(stride == 1 || stride == 2, "conv1d: stride %d unsupported", stride);
    const bool has_b = b.defined();
    kern::Conv1dDims d(x.dim(0), x.dim(1), w.dim(0), w.dim(2), stride);
    Tensor out(Shape{d.out_ch, d.out_len});
    kern::conv1d_forward(d, x.data().data(), w.data().data(),
                         has_b ? b.data().data() : nullptr, out.data().data());
    const bool rec = has_b ? detail::recording({&x, &w, &b}) : detail::recording({&x, &w});
    if (rec) {
        auto fn = [d, has_b](TensorNode& self) {
            kern::conv1d_backward(d, self.parents[0]->data.data(), self.parents[1]->data.data(),
                                  self.grad.data(), detail::grad_of(self, 0),
                                  detail::grad_of(self, 1),
                                  has_b ? detail::grad_of(self, 2) : nullptr);
        };
        if (has_b)
            detail::attach(out, {&x, &w, &b}, fn);
        else
            detail::attach(out, {&x, &w}, fn);
    }
    return out;
}

// Transposed conv1d with stride 2: (C,L) -> (O,2L). Weight (C,O,k).
inline Tensor conv_transpose1d(const Tensor& x, const Tensor& w, const Tensor& b) {
    VPL_SHAPE_CHECK(x.rank() == 2 && w.rank() == 3 && x.dim(0) == w.dim(0),
                    "conv_transpose1d: x %s w %s", shape_str(x.shape()).c_str(),
                    shape_str(w.shape()).c_str());
    const bool has_b = b.defined();
    kern::ConvT1dDims d(x.dim(0), x.dim(1), w.dim(1), w.dim(2), 2);
    Tensor out(Shape{d.out_ch, d.out_len});
    kern::convt1d_forward(d, x.data().data(), w.data().data(),
                          has_b ? b.data().data() : nullptr, out.data().data());
    const bool rec = has_b ? detail::recording({&x, &w, &b}) : detail::recording({&x, &w});
    if (rec) {
        auto fn = [d, has_b](TensorNode& self) {
            kern::convt1d_backward(d, self.parents[0]->data.data(), self.parents[1]->data.data(),
                                   self.grad.data(), detail::grad_of(self, 0),
                                   detail::grad_of(self, 1),
                                   has_b ? detail::grad_of(self, 2) : nullptr);
        };
        if (has_b)
            detail::attach(out, {&x, &w, &b}, fn);
        else
            detail::attach(out, {&x, &w}, fn);
    }
    return out;
}

// Depthwise conv along axis 0 of (T,C,H,W) with kernel (C,k).
inline Tensor temporal_dwconv(const Tensor& x, const Tensor& w) {
    VPL_SHAPE_CHECK(x.rank() == 4 && w.rank() == 2 && w.dim(0) == x.dim(1),
                    "temporal_dwconv: x %s w %s", shape_str(x.shape()).c_str(),
                    shape_str(w.shape()).c_str());
    const int T = x.dim(0), C = x.dim(1), S = x.dim(2) * x.dim(3), k = w.dim(1);
    Tensor out(x.shape());
    kern::temporal_dwconv_forward(T, C, S, k, x.data().data(), w.data().data(),
                                  out.data().data());
    if (detail::recording({&x, &w}))
        detail::attach(out, {&x, &w}, [T, C, S, k](TensorNode& self) {
            kern::temporal_dwconv_backward(T, C, S, k, self.parents[0]->data.data(),
                                           self.parents[1]->data.data(), self.grad.data(),
                                           detail::grad_of(self, 0), detail::grad_of(self, 1));
        });
    return out;
}

inline Tensor nearest_upsample2d(const Tensor& x) {
    VPL_SHAPE_CHECK(x.rank() == 4, "nearest_upsample2d: %s", shape_str(x.shape()).c_str());
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    Tensor out(Shape{N, C, 2 * H, 2 * W});
    for (int nc = 0; nc < N * C; ++nc) {
        const double* src = x.data().data() + static_cast<size_t>(nc) * H * W;
        double* dst = out.data().data() + static_cast<size_t>(nc) * 4 * H * W;
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                const double v = src[h * W + w];
                double* d0 = dst + (2 * h) * 2 * W + 2 * w;
                double* d1 = dst + (2 * h + 1) * 2 * W + 2 * w;
                d0[0] = d0[1] = d1[0] = d1[1] = v;
            }
    }
    if (detail::recording({&x}))
        detail::attach(out, {&x}, [N, C, H, W](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (int nc = 0; nc < N * C; ++nc) {
                    const double* gy = self.grad.data() + static_cast<size_t>(nc) * 4 * H * W;
                    double* gx = g + static_cast<size_t>(nc) * H * W;
                    for (int h = 0; h < H; ++h)
                        for (int w = 0; w < W; ++w) {
                            const double* g0 = gy + (2 * h) * 2 * W + 2 * w;
                            const double* g1 = gy + (2 * h + 1) * 2 * W + 2 * w;
                            gx[h * W + w] += g0[0] + g0[1] + g1[0] + g1[1];
                        }
                }
        });
    return out;
}

// GroupNorm. Accepts (N,C,spatial...) or (C,L) treated as a single sample.
// Groups with zero variance normalize to zero before the affine transform.
inline Tensor group_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, int groups,
                         double eps = 1e-5) {
    VPL_SHAPE_CHECK(x.rank() >= 2, "group_norm: %s", shape_str(x.shape()).c_str());
    int N, C;
    size_t S = 1;
    if (x.rank() == 2) {
        N = 1;
        C = x.dim(0);
        S = static_cast<size_t>(x.dim(1));
    } else {
        N = x.dim(0);
        C = x.dim(1);
        for (int i = 2; i < x.rank(); ++i) S *= static_cast<size_t>(x.dim(i));
    }
    VPL_SHAPE_CHECK(C % groups == 0, "group_norm: %d channels, %d groups", C, groups);
    VPL_SHAPE_CHECK(gamma.rank() == 1 && gamma.dim(0) == C && beta.rank() == 1 && beta.dim(0) == C,
                    "group_norm: affine %s/%s for %d channels", shape_str(gamma.shape()).c_str(),
                    shape_str(beta.shape()).c_str(), C);
    Tensor out(x.shape());
    auto mean = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * groups);
    auto rstd = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * groups);
    kern::group_norm_forward(N, C, static_cast<int>(S), groups, eps, x.data().data(),
                             gamma.data().data(), beta.data().data(), out.data().data(),
                             mean->data(), rstd->data());
    if (detail::recording({&x, &gamma, &beta}))
        detail::attach(out, {&x, &gamma, &beta}, [N, C, S, groups, mean, rstd](TensorNode& self) {
            kern::group_norm_backward(N, C, static_cast<int>(S), groups,
                                      self.parents[0]->data.data(), self.parents[1]->data.data(),
                                      self.grad.data(), mean->data(), rstd->data(),
                                      detail::grad_of(self, 0), detail::grad_of(self, 1),
                                      detail::grad_of(self, 2));
        });
    return out;
}

// ---------------------------------------------------------------------------
// Broadcast helpers
// ---------------------------------------------------------------------------

// x (N,C,spatial...) + b (C), broadcast over batch and spatial dims.
inline Tensor bias_add_channel(const Tensor& x, const Tensor& b) {
    VPL_SHAPE_CHECK(x.rank() >= 2 && b.rank() == 1, "bias_add_channel: x %s b %s",
                    shape_str(x.shape()).c_str(), shape_str(b.shape()).c_str());
    int N, C;
    size_t S = 1;
    if (x.rank() == 2) {
        N = 1;
        C = x.dim(0);
        S = static_cast<size_t>(x.dim(1));
    } else {
        N = x.dim(0);
        C = x.dim(1);
        for (int i = 2; i < x.rank(); ++i) S *= static_cast<size_t>(x.dim(i));
    }
    VPL_SHAPE_CHECK(b.dim(0) == C, "bias_add_channel: bias %s for %d channels",
                    shape_str(b.shape()).c_str(), C);
    Tensor out(x.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double bv = b.data()[static_cast<size_t>(c)];
            const double* src = x.data().data() + (static_cast<size_t>(n) * C + c) * S;
            double* dst = out.data().data() + (static_cast<size_t>(n) * C + c) * S;
            for (size_t s = 0; s < S; ++s) dst[s] = src[s] + bv;
        }
    if (detail::recording({&x, &b}))
        detail::attach(out, {&x, &b}, [N, C, S](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            if (double* gb = detail::grad_of(self, 1))
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* gr = self.grad.data() + (static_cast<size_t>(n) * C + c) * S;
                        double acc = 0.0;
                        for (size_t s = 0; s < S; ++s) acc += gr[s];
                        gb[c] += acc;
                    }
        });
    return out;
}

// FiLM modulation: y = x * (1 + scale[c]) + shift[c], per channel.
inline Tensor film(const Tensor& x, const Tensor& scale, const Tensor& shift) {
    VPL_SHAPE_CHECK(x.rank() >= 2 && scale.rank() == 1 && shift.rank() == 1 &&
                        scale.dim(0) == shift.dim(0),
                    "film: x %s scale %s shift %s", shape_str(x.shape()).c_str(),
                    shape_str(scale.shape()).c_str(), shape_str(shift.shape()).c_str());
    int N, C;
    size_t S = 1;
    if (x.rank() == 2) {
        N = 1;
        C = x.dim(0);
        S = static_cast<size_t>(x.dim(1));
    } else {
        N = x.dim(0);
        C = x.dim(1);
        for (int i = 2; i < x.rank(); ++i) S *= static_cast<size_t>(x.dim(i));
    }
    VPL_SHAPE_CHECK(scale.dim(0) == C, "film: %s for %d channels",
                    shape_str(scale.shape()).c_str(), C);
    Tensor out(x.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double sc = 1.0 + scale.data()[static_cast<size_t>(c)];
            const double sh = shift.data()[static_cast<size_t>(c)];
            const double* src = x.data().data() + (static_cast<size_t>(n) * C + c) * S;
            double* dst = out.data().data() + (static_cast<size_t>(n) * C + c) * S;
            for (size_t s = 0; s < S; ++s) dst[s] = src[s] * sc + sh;
        }
    if (detail::recording({&x, &scale, &shift}))
        detail::attach(out, {&x, &scale, &shift}, [N, C, S](TensorNode& self) {
            const auto& xd = self.parents[0]->data;
            const auto& sd = self.parents[1]->data;
            double* gx = detail::grad_of(self, 0);
            double* gs = detail::grad_of(self, 1);
            double* gh = detail::grad_of(self, 2);
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const size_t base = (static_cast<size_t>(n) * C + c) * S;
                    const double sc = 1.0 + sd[static_cast<size_t>(c)];
                    double acc_s = 0.0, acc_h = 0.0;
                    for (size_t s = 0; s < S; ++s) {
                        const double g = self.grad[base + s];
                        if (gx) gx[base + s] += g * sc;
                        acc_s += g * xd[base + s];
                        acc_h += g;
                    }
                    if (gs) gs[c] += acc_s;
                    if (gh) gh[c] += acc_h;
                }
        });
    return out;
}

inline Tensor embedding_row(const Tensor& table, int row) {
    VPL_SHAPE_CHECK(table.rank() == 2, "embedding_row: table %s",
                    shape_str(table.shape()).c_str());
    VPL_CHECK(row >= 0 && row < table.dim(0), "embedding_row: row %d of %d", row, table.dim(0));
    const int D = table.dim(1);
    Tensor out(Shape{D});
    std::memcpy(out.data().data(), table.data().data() + static_cast<size_t>(row) * D,
                sizeof(double) * static_cast<size_t>(D));
    if (detail::recording({&table}))
        detail::attach(out, {&table}, [row, D](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (int i = 0; i < D; ++i) g[static_cast<size_t>(row) * D + i] += self.grad[static_cast<size_t>(i)];
        });
    return out;
}

// Gathers table rows into an (n, D) matrix; gradients accumulate per row, so
// repeated indices are fine.
inline Tensor embedding_rows(const Tensor& table, std::vector<int> rows) {
    VPL_SHAPE_CHECK(table.rank() == 2, "embedding_rows: table %s",
                    shape_str(table.shape()).c_str());
    const int D = table.dim(1);
    const int n = static_cast<int>(rows.size());
    for (int r : rows)
        VPL_CHECK(r >= 0 && r < table.dim(0), "embedding_rows: row %d of %d", r, table.dim(0));
    Tensor out(Shape{n, D});
    for (int i = 0; i < n; ++i)
        std::memcpy(out.data().data() + static_cast<size_t>(i) * D,
                    table.data().data() + static_cast<size_t>(rows[i]) * D,
                    sizeof(double) * static_cast<size_t>(D));
    if (detail::recording({&table}))
        detail::attach(out, {&table}, [rows = std::move(rows), D](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < rows.size(); ++i)
                    for (int d = 0; d < D; ++d)
                        g[static_cast<size_t>(rows[i]) * D + d] += self.grad[i * D + d];
        });
    return out;
}

// x (N,C,spatial...) + b (N,C): a distinct channel bias per sample, broadcast
// over the spatial dims.
inline Tensor bias_add_per_sample(const Tensor& x, const Tensor& b) {
    VPL_SHAPE_CHECK(x.rank() >= 3 && b.rank() == 2, "bias_add_per_sample: x %s b %s",
                    shape_str(x.shape()).c_str(), shape_str(b.shape()).c_str());
    const int N = x.dim(0), C = x.dim(1);
    size_t S = 1;
    for (int i = 2; i < x.rank(); ++i) S *= static_cast<size_t>(x.dim(i));
    VPL_SHAPE_CHECK(b.dim(0) == N && b.dim(1) == C, "bias_add_per_sample: bias %s for (%d,%d)",
                    shape_str(b.shape()).c_str(), N, C);
    Tensor out(x.shape());
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double bv = b.data()[static_cast<size_t>(n) * C + c];
            const size_t base = (static_cast<size_t>(n) * C + c) * S;
            for (size_t s = 0; s < S; ++s) out.data()[base + s] = x.data()[base + s] + bv;
        }
    if (detail::recording({&x, &b}))
        detail::attach(out, {&x, &b}, [N, C, S](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
            if (double* gb = detail::grad_of(self, 1))
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const size_t base = (static_cast<size_t>(n) * C + c) * S;
                        double acc = 0.0;
                        for (size_t s = 0; s < S; ++s) acc += self.grad[base + s];
                        gb[static_cast<size_t>(n) * C + c] += acc;
                    }
        });
    return out;
}

// (N,C,spatial...) -> (N*S, C): one row per spatial site, so attention over
// sites batches across samples. from_tokens inverts it.
inline Tensor to_tokens(const Tensor& x) {
    VPL_SHAPE_CHECK(x.rank() >= 3, "to_tokens: %s", shape_str(x.shape()).c_str());
    const int N = x.dim(0), C = x.dim(1);
    size_t S = 1;
    for (int i = 2; i < x.rank(); ++i) S *= static_cast<size_t>(x.dim(i));
    Tensor out(Shape{static_cast<int>(N * S), C});
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* src = x.data().data() + (static_cast<size_t>(n) * C + c) * S;
            for (size_t s = 0; s < S; ++s)
                out.data()[(static_cast<size_t>(n) * S + s) * C + c] = src[s];
        }
    if (detail::recording({&x}))
        detail::attach(out, {&x}, [N, C, S](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        double* dst = g + (static_cast<size_t>(n) * C + c) * S;
                        for (size_t s = 0; s < S; ++s)
                            dst[s] += self.grad[(static_cast<size_t>(n) * S + s) * C + c];
                    }
        });
    return out;
}

inline Tensor from_tokens(const Tensor& t, Shape shape) {
    VPL_SHAPE_CHECK(t.rank() == 2 && shape.size() >= 3, "from_tokens: %s to %s",
                    shape_str(t.shape()).c_str(), shape_str(shape).c_str());
    const int N = shape[0], C = shape[1];
    size_t S = 1;
    for (size_t i = 2; i < shape.size(); ++i) S *= static_cast<size_t>(shape[i]);
    VPL_SHAPE_CHECK(static_cast<size_t>(t.dim(0)) == static_cast<size_t>(N) * S &&
                        t.dim(1) == C,
                    "from_tokens: %s to %s", shape_str(t.shape()).c_str(),
                    shape_str(shape).c_str());
    Tensor out(shape);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            double* dst = out.data().data() + (static_cast<size_t>(n) * C + c) * S;
            for (size_t s = 0; s < S; ++s)
                dst[s] = t.data()[(static_cast<size_t>(n) * S + s) * C + c];
        }
    if (detail::recording({&t}))
        detail::attach(out, {&t}, [N, C, S](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (int n = 0; n < N; ++n)
                    for (int c = 0; c < C; ++c) {
                        const double* src =
                            self.grad.data() + (static_cast<size_t>(n) * C + c) * S;
                        for (size_t s = 0; s < S; ++s)
                            g[(static_cast<size_t>(n) * S + s) * C + c] += src[s];
                    }
        });
    return out;
}

// Mean over all axes except channel axis 1 of (T,C,H,W) (or axis 0 of (C,L)).
inline Tensor global_avg_pool(const Tensor& x) {
    VPL_SHAPE_CHECK(x.rank() >= 2, "global_avg_pool: %s", shape_str(x.shape()).c_str());
    int N, C;
    size_t S = 1;
    if (x.rank() == 2) {
        N = 1;
        C = x.dim(0);
        S = static_cast<size_t>(x.dim(1));
    } else {
        N = x.dim(0);
        C = x.dim(1);
        for (int i = 2; i < x.rank(); ++i) S *= static_cast<size_t>(x.dim(i));
    }
    const double inv = 1.0 / (static_cast<double>(N) * static_cast<double>(S));
    Tensor out(Shape{C});
    for (int c = 0; c < C; ++c) {
        double acc = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* src = x.data().data() + (static_cast<size_t>(n) * C + c) * S;
            for (size_t s = 0; s < S; ++s) acc += src[s];
        }
        out.data()[static_cast<size_t>(c)] = acc * inv;
    }
    if (detail::recording({&x}))
        detail::attach(out, {&x}, [N, C, S, inv](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0))
                for (int c = 0; c < C; ++c) {
                    const double gv = self.grad[static_cast<size_t>(c)] * inv;
                    for (int n = 0; n < N; ++n) {
                        double* dst = g + (static_cast<size_t>(n) * C + c) * S;
                        for (size_t s = 0; s < S; ++s) dst[s] += gv;
                    }
                }
        });
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum_all(const Tensor& a) {
    Tensor out(Shape{1});
    double acc = 0.0;
    for (double v : a.data()) acc += v;
    out.data()[0] = acc;
    if (detail::recording({&a}))
        detail::attach(out, {&a}, [](TensorNode& self) {
            if (double* g = detail::grad_of(self, 0)) {
                const double gv = self.grad[0];
                for (size_t i = 0; i < self.parents[0]->data.size(); ++i) g[i] += gv;
            }
        });
    return out;
}

inline Tensor mean_all(const Tensor& a) {
    return mul_scalar(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

inline Tensor mse(const Tensor& a, const Tensor& b) {
    VPL_SHAPE_CHECK(a.shape() == b.shape(), "mse: %s vs %s", shape_str(a.shape()).c_str(),
                    shape_str(b.shape()).c_str());
    Tensor out(Shape{1});
    double acc = 0.0;
    for (size_t i = 0; i < a.numel(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        acc += d * d;
    }
    const double inv = 1.0 / static_cast<double>(a.numel());
    out.data()[0] = acc * inv;
    if (detail::recording({&a, &b}))
        detail::attach(out, {&a, &b}, [inv](TensorNode& self) {
            const auto& ad = self.parents[0]->data;
            const auto& bd = self.parents[1]->data;
            const double g2 = 2.0 * inv * self.grad[0];
            if (double* g = detail::grad_of(self, 0))
                for (size_t i = 0; i < ad.size(); ++i) g[i] += g2 * (ad[i] - bd[i]);
            if (double* g = detail::grad_of(self, 1))
                for (size_t i = 0; i < ad.size(); ++i) g[i] -= g2 * (ad[i] - bd[i]);
        });
    return out;
}

// ---------------------------------------------------------------------------
// Reverse pass
// ---------------------------------------------------------------------------

struct BackwardStats {
    size_t nodes_visited = 0;
};

inline BackwardStats backward(const Tensor& loss) {
    VPL_SHAPE_CHECK(loss.numel() == 1, "backward: loss has shape %s",
                    shape_str(loss.shape()).c_str());
    VPL_CHECK(loss.requires_grad(),
              "backward: loss does not depend on any gradient-enabled tensor");

    // Post-order DFS over the recorded graph gives parents before children;
    // walking it in reverse visits every node exactly once, children first.
    std::vector<TensorNode*> order;
    std::unordered_set<TensorNode*> seen;
    struct Frame {
        TensorNode* n;
        size_t next;
    };
    std::vector<Frame> stack;
    stack.push_back({loss.node().get(), 0});
    seen.insert(loss.node().get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.n->parents.size()) {
            TensorNode* p = f.n->parents[f.next++].get();
            if (p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.n);
            stack.pop_back();
        }
    }

    loss.node()->ensure_grad();
    loss.node()->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorNode* n = *it;
        if (n->backward_fn) {
            n->ensure_grad();
            n->backward_fn(*n);
        }
    }
    return BackwardStats{order.size()};
}

}  // namespace vpl
