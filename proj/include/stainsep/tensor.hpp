// Reverse-mode autodiff over the fixed op set used by the encoder, the
// Beer-Lambert decoder and the loss terms. Dense row-major tensors up to
// 4 dimensions, scalar templated (float for training, double for
// finite-difference checks).
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace stainsep {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (int d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& msg) : std::runtime_error(msg) {}
};

inline void op_shape_error(const std::string& op, const Shape& a, const Shape& b) {
    throw TensorError(op + ": incompatible shapes " + shape_str(a) + " vs " + shape_str(b));
}

// When set, ops reject non-finite inputs.
inline bool& strict_finite_mode() {
    static bool flag = false;
    return flag;
}

template <typename T>
struct TensorImpl {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;   // lazily allocated, same length as data
    bool requires_grad = false;

    // backward-graph record
    std::vector<std::shared_ptr<TensorImpl<T>>> parents;
    std::function<void(TensorImpl<T>&)> backward_fn;

    std::int64_t size() const { return static_cast<std::int64_t>(data.size()); }

    void ensure_grad() {
        if (grad.empty()) grad.assign(data.size(), T(0));
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(const Shape& s) { return full(s, T(0)); }

    static Tensor full(const Shape& s, T value) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = s;
        t.impl_->data.assign(static_cast<size_t>(shape_numel(s)), value);
        return t;
    }

    static Tensor from_data(const Shape& s, std::vector<T> values) {
        if (static_cast<std::int64_t>(values.size()) != shape_numel(s))
            throw TensorError("from_data: " + std::to_string(values.size()) +
                              " values for shape " + shape_str(s));
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl<T>>();
        t.impl_->shape = s;
        t.impl_->data = std::move(values);
        return t;
    }

    static Tensor scalar(T value) { return full({1}, value); }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::int64_t size() const { return impl_->size(); }
    std::vector<T>& data() { return impl_->data; }
    const std::vector<T>& data() const { return impl_->data; }
    std::vector<T>& grad() { impl_->ensure_grad(); return impl_->grad; }
    bool has_grad() const { return !impl_->grad.empty(); }

    bool requires_grad() const { return impl_->requires_grad; }
    Tensor& set_requires_grad(bool v) { impl_->requires_grad = v; return *this; }

    void zero_grad() { if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), T(0)); }

    T item() const {
        if (size() != 1) throw TensorError("item: tensor of size " + std::to_string(size()) + " is not scalar");
        return impl_->data[0];
    }

    std::shared_ptr<TensorImpl<T>> impl() const { return impl_; }

    // Reverse sweep from a scalar loss. Gradients accumulate additively;
    // call zero_grad between steps.
    void backward() const {
        if (size() != 1) throw TensorError("backward: loss must be scalar, got shape " + shape_str(shape()));
        // topological order via iterative DFS
        std::vector<TensorImpl<T>*> order;
        std::unordered_set<TensorImpl<T>*> visited;
        std::vector<std::pair<TensorImpl<T>*, size_t>> stack;
        stack.emplace_back(impl_.get(), 0);
        visited.insert(impl_.get());
        while (!stack.empty()) {
            auto& [node, child] = stack.back();
            if (child < node->parents.size()) {
                TensorImpl<T>* p = node->parents[child++].get();
                if (!visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
        impl_->ensure_grad();
        impl_->grad[0] += T(1);
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorImpl<T>* node = *it;
            if (node->backward_fn) node->backward_fn(*node);
        }
    }

private:
    std::shared_ptr<TensorImpl<T>> impl_;
};

namespace detail {

template <typename T>
inline void check_finite(const std::string& op, const Tensor<T>& t) {
    if (!strict_finite_mode()) return;
    for (T v : t.data())
        if (!std::isfinite(static_cast<double>(v)))
            throw TensorError(op + ": non-finite input value");
}

template <typename T>
inline bool needs_graph(const Tensor<T>& a) { return a.requires_grad(); }

template <typename T, typename... Rest>
inline bool needs_graph(const Tensor<T>& a, const Rest&... rest) {
    return a.requires_grad() || needs_graph(rest...);
}

template <typename T, typename Fn>
inline void attach(Tensor<T>& out, std::vector<std::shared_ptr<TensorImpl<T>>> parents, Fn fn) {
    out.impl()->requires_grad = true;
    out.impl()->parents = std::move(parents);
    out.impl()->backward_fn = std::move(fn);
}

// Shapes padded to 4 dims (leading 1s); broadcasting dims get stride 0.
struct Bcast {
    int dims[4];
    std::int64_t sa[4];
    std::int64_t sb[4];
};

inline Shape pad4(const Shape& s) {
    Shape out(4, 1);
    for (size_t i = 0; i < s.size(); ++i) out[4 - s.size() + i] = s[i];
    return out;
}

inline bool make_bcast(const Shape& a, const Shape& b, Shape& out, Bcast& bc) {
    if (a.size() > 4 || b.size() > 4) return false;
    Shape pa = pad4(a), pb = pad4(b);
    Shape po(4, 1);
    for (int i = 0; i < 4; ++i) {
        if (pa[i] == pb[i]) po[i] = pa[i];
        else if (pa[i] == 1) po[i] = pb[i];
        else if (pb[i] == 1) po[i] = pa[i];
        else return false;
    }
    std::int64_t stra[4], strb[4];
    std::int64_t ra = 1, rb = 1;
    for (int i = 3; i >= 0; --i) {
        stra[i] = ra; strb[i] = rb;
        ra *= pa[i]; rb *= pb[i];
    }
    for (int i = 0; i < 4; ++i) {
        bc.dims[i] = po[i];
        bc.sa[i] = (pa[i] == 1 && po[i] != 1) ? 0 : stra[i];
        bc.sb[i] = (pb[i] == 1 && po[i] != 1) ? 0 : strb[i];
    }
    // output keeps the larger rank of the operands
    size_t rank = std::max(a.size(), b.size());
    out.assign(po.end() - rank, po.end());
    if (out.empty()) out = {1};
    return true;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise binary ops with restricted broadcasting

template <typename T, typename FwdF, typename GradA, typename GradB>
Tensor<T> binary_op(const std::string& name, const Tensor<T>& a, const Tensor<T>& b,
                    FwdF f, GradA ga, GradB gb) {
    detail::check_finite(name, a);
    detail::check_finite(name, b);
    Shape out_shape;
    detail::Bcast bc;
    if (!detail::make_bcast(a.shape(), b.shape(), out_shape, bc))
        op_shape_error(name, a.shape(), b.shape());

    Tensor<T> out = Tensor<T>::zeros(out_shape);
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    if (a.shape() == b.shape()) {
        const std::int64_t n = a.size();
        for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
    } else {
        std::int64_t o = 0;
        for (int i0 = 0; i0 < bc.dims[0]; ++i0)
        for (int i1 = 0; i1 < bc.dims[1]; ++i1)
        for (int i2 = 0; i2 < bc.dims[2]; ++i2) {
            std::int64_t base_a = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
            std::int64_t base_b = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
            for (int i3 = 0; i3 < bc.dims[3]; ++i3, ++o)
                po[o] = f(pa[base_a + i3 * bc.sa[3]], pb[base_b + i3 * bc.sb[3]]);
        }
    }

    if (detail::needs_graph(a, b)) {
        auto ai = a.impl(), bi = b.impl();
        bool same = a.shape() == b.shape();
        detail::attach(out, {ai, bi},
            [ai, bi, bc, same, ga, gb](TensorImpl<T>& o) {
                ai->ensure_grad();
                bi->ensure_grad();
                const T* pa = ai->data.data();
                const T* pb = bi->data.data();
                const T* g = o.grad.data();
                if (same) {
                    const std::int64_t n = o.size();
                    for (std::int64_t i = 0; i < n; ++i) {
                        ai->grad[i] += g[i] * ga(pa[i], pb[i]);
                        bi->grad[i] += g[i] * gb(pa[i], pb[i]);
                    }
                } else {
                    std::int64_t oi = 0;
                    for (int i0 = 0; i0 < bc.dims[0]; ++i0)
                    for (int i1 = 0; i1 < bc.dims[1]; ++i1)
                    for (int i2 = 0; i2 < bc.dims[2]; ++i2) {
                        std::int64_t base_a = i0 * bc.sa[0] + i1 * bc.sa[1] + i2 * bc.sa[2];
                        std::int64_t base_b = i0 * bc.sb[0] + i1 * bc.sb[1] + i2 * bc.sb[2];
                        for (int i3 = 0; i3 < bc.dims[3]; ++i3, ++oi) {
                            std::int64_t ia = base_a + i3 * bc.sa[3];
                            std::int64_t ib = base_b + i3 * bc.sb[3];
                            ai->grad[ia] += g[oi] * ga(pa[ia], pb[ib]);
                            bi->grad[ib] += g[oi] * gb(pa[ia], pb[ib]);
                        }
                    }
                }
            });
    }
    return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>("add", a, b,
        [](T x, T y) { return x + y; },
        [](T, T) { return T(1); },
        [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>("sub", a, b,
        [](T x, T y) { return x - y; },
        [](T, T) { return T(1); },
        [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>("mul", a, b,
        [](T x, T y) { return x * y; },
        [](T, T y) { return y; },
        [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return binary_op<T>("div", a, b,
        [](T x, T y) { return x / y; },
        [](T, T y) { return T(1) / y; },
        [](T x, T y) { return -x / (y * y); });
}

template <typename T> Tensor<T> add(const Tensor<T>& a, T c) { return add(a, Tensor<T>::scalar(c)); }
template <typename T> Tensor<T> sub(T c, const Tensor<T>& a) { return sub(Tensor<T>::scalar(c), a); }

// ---------------------------------------------------------------------------
// elementwise unary ops

template <typename T, typename FwdF, typename GradF>
Tensor<T> unary_op(const std::string& name, const Tensor<T>& x, FwdF f, GradF g) {
    detail::check_finite(name, x);
    Tensor<T> out = Tensor<T>::zeros(x.shape());
    const T* px = x.data().data();
    T* po = out.data().data();
    const std::int64_t n = x.size();
    for (std::int64_t i = 0; i < n; ++i) po[i] = f(px[i]);
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi, g](TensorImpl<T>& o) {
            xi->ensure_grad();
            const T* px = xi->data.data();
            const T* po = o.data.data();
            const T* gr = o.grad.data();
            const std::int64_t n = o.size();
            for (std::int64_t i = 0; i < n; ++i) xi->grad[i] += gr[i] * g(px[i], po[i]);
        });
    }
    return out;
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T a) {
    return unary_op<T>("scale", x, [a](T v) { return a * v; }, [a](T, T) { return a; });
}

template <typename T>
Tensor<T> exp_t(const Tensor<T>& x) {
    return unary_op<T>("exp", x,
        [](T v) { return std::exp(v); },
        [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log_eps(const Tensor<T>& x, T eps) {
    if (!(eps > T(0))) throw TensorError("log_eps: eps must be > 0");
    return unary_op<T>("log_eps", x,
        [eps](T v) { return std::log(v + eps); },
        [eps](T v, T) { return T(1) / (v + eps); });
}

template <typename T>
Tensor<T> sqrt_t(const Tensor<T>& x) {
    return unary_op<T>("sqrt", x,
        [](T v) { return std::sqrt(v); },
        [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return unary_op<T>("softplus", x,
        [](T v) { return v > T(30) ? v : std::log1p(std::exp(v)); },
        [](T v, T) { return T(1) / (T(1) + std::exp(-v)); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
    return unary_op<T>("relu", x,
        [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> abs_t(const Tensor<T>& x) {
    return unary_op<T>("abs", x,
        [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// max(x, c) elementwise
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T c) {
    return unary_op<T>("clamp_min", x,
        [c](T v) { return v > c ? v : c; },
        [c](T v, T) { return v > c ? T(1) : T(0); });
}

// ---------------------------------------------------------------------------
// matmul (2-D)

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_finite("matmul", a);
    detail::check_finite("matmul", b);
    if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0])
        op_shape_error("matmul", a.shape(), b.shape());
    const int m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    const T* pa = a.data().data();
    const T* pb = b.data().data();
    T* po = out.data().data();
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            const T av = pa[i * k + l];
            for (int j = 0; j < n; ++j) po[i * n + j] += av * pb[l * n + j];
        }
    if (detail::needs_graph(a, b)) {
        auto ai = a.impl(), bi = b.impl();
        detail::attach(out, {ai, bi}, [ai, bi, m, k, n](TensorImpl<T>& o) {
            ai->ensure_grad();
            bi->ensure_grad();
            const T* g = o.grad.data();
            const T* pa = ai->data.data();
            const T* pb = bi->data.data();
            // dA = g * B^T ; dB = A^T * g
            for (int i = 0; i < m; ++i)
                for (int l = 0; l < k; ++l) {
                    T acc = 0;
                    for (int j = 0; j < n; ++j) acc += g[i * n + j] * pb[l * n + j];
                    ai->grad[i * k + l] += acc;
                }
            for (int l = 0; l < k; ++l)
                for (int j = 0; j < n; ++j) {
                    T acc = 0;
                    for (int i = 0; i < m; ++i) acc += pa[i * k + l] * g[i * n + j];
                    bi->grad[l * n + j] += acc;
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// conv2d: input [N,Cin,H,W], kernel [Cout,Cin,kh,kw], cross-correlation

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kernel, int stride = 1, int padding = 0) {
    detail::check_finite("conv2d", x);
    detail::check_finite("conv2d", kernel);
    if (x.shape().size() != 4 || kernel.shape().size() != 4 || x.shape()[1] != kernel.shape()[1])
        op_shape_error("conv2d", x.shape(), kernel.shape());
    if (stride < 1) throw TensorError("conv2d: stride must be >= 1");
    const int N = x.shape()[0], Cin = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Cout = kernel.shape()[0], kh = kernel.shape()[2], kw = kernel.shape()[3];
    const int Ho = (H + 2 * padding - kh) / stride + 1;
    const int Wo = (W + 2 * padding - kw) / stride + 1;
    if (Ho < 1 || Wo < 1) op_shape_error("conv2d", x.shape(), kernel.shape());

    Tensor<T> out = Tensor<T>::zeros({N, Cout, Ho, Wo});
    const T* px = x.data().data();
    const T* pk = kernel.data().data();
    T* po = out.data().data();
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Cout; ++co) {
            T* orow = po + ((std::int64_t)n * Cout + co) * Ho * Wo;
            for (int ci = 0; ci < Cin; ++ci) {
                const T* irow = px + ((std::int64_t)n * Cin + ci) * H * W;
                const T* krow = pk + ((std::int64_t)co * Cin + ci) * kh * kw;
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        const T wv = krow[ky * kw + kx];
                        if (wv == T(0)) continue;
                        for (int oy = 0; oy < Ho; ++oy) {
                            const int iy = oy * stride - padding + ky;
                            if (iy < 0 || iy >= H) continue;
                            // valid ox range for this kx
                            int ox0 = 0, ox1 = Wo;
                            if (stride == 1) {
                                ox0 = std::max(0, padding - kx);
                                ox1 = std::min(Wo, W + padding - kx);
                            }
                            const T* in_line = irow + iy * W - padding + kx;
                            T* out_line = orow + oy * Wo;
                            if (stride == 1) {
                                for (int ox = ox0; ox < ox1; ++ox)
                                    out_line[ox] += wv * in_line[ox];
                            } else {
                                for (int ox = 0; ox < Wo; ++ox) {
                                    const int ix = ox * stride - padding + kx;
                                    if (ix >= 0 && ix < W) out_line[ox] += wv * irow[iy * W + ix];
                                }
                            }
                        }
                    }
            }
        }

    if (detail::needs_graph(x, kernel)) {
        auto xi = x.impl();
        auto ki = kernel.impl();
        detail::attach(out, {xi, ki},
            [xi, ki, N, Cin, Cout, H, W, Ho, Wo, kh, kw, stride, padding](TensorImpl<T>& o) {
                xi->ensure_grad();
                ki->ensure_grad();
                const T* g = o.grad.data();
                const T* px = xi->data.data();
                const T* pk = ki->data.data();
                for (int n = 0; n < N; ++n)
                    for (int co = 0; co < Cout; ++co) {
                        const T* grow = g + ((std::int64_t)n * Cout + co) * Ho * Wo;
                        for (int ci = 0; ci < Cin; ++ci) {
                            const T* irow = px + ((std::int64_t)n * Cin + ci) * H * W;
                            T* dirow = xi->grad.data() + ((std::int64_t)n * Cin + ci) * H * W;
                            const T* krow = pk + ((std::int64_t)co * Cin + ci) * kh * kw;
                            T* dkrow = ki->grad.data() + ((std::int64_t)co * Cin + ci) * kh * kw;
                            for (int ky = 0; ky < kh; ++ky)
                                for (int kx = 0; kx < kw; ++kx) {
                                    const T wv = krow[ky * kw + kx];
                                    T wacc = 0;
                                    for (int oy = 0; oy < Ho; ++oy) {
                                        const int iy = oy * stride - padding + ky;
                                        if (iy < 0 || iy >= H) continue;
                                        const T* g_line = grow + oy * Wo;
                                        if (stride == 1) {
                                            const int ox0 = std::max(0, padding - kx);
                                            const int ox1 = std::min(Wo, W + padding - kx);
                                            const T* in_line = irow + iy * W - padding + kx;
                                            T* din_line = dirow + iy * W - padding + kx;
                                            for (int ox = ox0; ox < ox1; ++ox) {
                                                wacc += g_line[ox] * in_line[ox];
                                                din_line[ox] += wv * g_line[ox];
                                            }
                                        } else {
                                            for (int ox = 0; ox < Wo; ++ox) {
                                                const int ix = ox * stride - padding + kx;
                                                if (ix < 0 || ix >= W) continue;
                                                wacc += g_line[ox] * irow[iy * W + ix];
                                                dirow[iy * W + ix] += wv * g_line[ox];
                                            }
                                        }
                                    }
                                    dkrow[ky * kw + kx] += wacc;
                                }
                        }
                    }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// channel concat / slice on axis 1 of [N,C,H,W]

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.shape().size() != 4 || b.shape().size() != 4 ||
        a.shape()[0] != b.shape()[0] || a.shape()[2] != b.shape()[2] || a.shape()[3] != b.shape()[3])
        op_shape_error("concat_channels", a.shape(), b.shape());
    const int N = a.shape()[0], Ca = a.shape()[1], Cb = b.shape()[1];
    const int H = a.shape()[2], W = a.shape()[3];
    const std::int64_t plane = (std::int64_t)H * W;
    Tensor<T> out = Tensor<T>::zeros({N, Ca + Cb, H, W});
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data().data() + n * Ca * plane, Ca * plane,
                    out.data().data() + (std::int64_t)n * (Ca + Cb) * plane);
        std::copy_n(b.data().data() + n * Cb * plane, Cb * plane,
                    out.data().data() + (std::int64_t)n * (Ca + Cb) * plane + Ca * plane);
    }
    if (detail::needs_graph(a, b)) {
        auto ai = a.impl(), bi = b.impl();
        detail::attach(out, {ai, bi}, [ai, bi, N, Ca, Cb, plane](TensorImpl<T>& o) {
            ai->ensure_grad();
            bi->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T* g = o.grad.data() + (std::int64_t)n * (Ca + Cb) * plane;
                T* da = ai->grad.data() + n * Ca * plane;
                T* db = bi->grad.data() + n * Cb * plane;
                for (std::int64_t i = 0; i < Ca * plane; ++i) da[i] += g[i];
                for (std::int64_t i = 0; i < Cb * plane; ++i) db[i] += g[Ca * plane + i];
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> slice_channels(const Tensor<T>& x, int start, int count) {
    if (x.shape().size() != 4) throw TensorError("slice_channels: expects 4-d, got " + shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    if (start < 0 || count < 1 || start + count > C)
        throw TensorError("slice_channels: range [" + std::to_string(start) + "," +
                          std::to_string(start + count) + ") out of " + std::to_string(C) + " channels");
    const std::int64_t plane = (std::int64_t)H * W;
    Tensor<T> out = Tensor<T>::zeros({N, count, H, W});
    for (int n = 0; n < N; ++n)
        std::copy_n(x.data().data() + ((std::int64_t)n * C + start) * plane, count * plane,
                    out.data().data() + (std::int64_t)n * count * plane);
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi, N, C, start, count, plane](TensorImpl<T>& o) {
            xi->ensure_grad();
            for (int n = 0; n < N; ++n) {
                const T* g = o.grad.data() + (std::int64_t)n * count * plane;
                T* dx = xi->grad.data() + ((std::int64_t)n * C + start) * plane;
                for (std::int64_t i = 0; i < count * plane; ++i) dx[i] += g[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// 2x average pooling / nearest upsampling on [N,C,H,W]

template <typename T>
Tensor<T> avg_pool2(const Tensor<T>& x) {
    if (x.shape().size() != 4 || x.shape()[2] % 2 || x.shape()[3] % 2)
        throw TensorError("avg_pool2: needs 4-d input with even spatial dims, got " + shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Ho = H / 2, Wo = W / 2;
    Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* in = px + (std::int64_t)nc * H * W;
        T* o = po + (std::int64_t)nc * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xw = 0; xw < Wo; ++xw)
                o[y * Wo + xw] = (in[(2 * y) * W + 2 * xw] + in[(2 * y) * W + 2 * xw + 1] +
                                  in[(2 * y + 1) * W + 2 * xw] + in[(2 * y + 1) * W + 2 * xw + 1]) * T(0.25);
    }
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi, N, C, H, W, Ho, Wo](TensorImpl<T>& o) {
            xi->ensure_grad();
            for (int nc = 0; nc < N * C; ++nc) {
                const T* g = o.grad.data() + (std::int64_t)nc * Ho * Wo;
                T* dx = xi->grad.data() + (std::int64_t)nc * H * W;
                for (int y = 0; y < Ho; ++y)
                    for (int xw = 0; xw < Wo; ++xw) {
                        const T gv = g[y * Wo + xw] * T(0.25);
                        dx[(2 * y) * W + 2 * xw] += gv;
                        dx[(2 * y) * W + 2 * xw + 1] += gv;
                        dx[(2 * y + 1) * W + 2 * xw] += gv;
                        dx[(2 * y + 1) * W + 2 * xw + 1] += gv;
                    }
            }
        });
    }
    return out;
}

template <typename T>
Tensor<T> upsample_nearest2(const Tensor<T>& x) {
    if (x.shape().size() != 4)
        throw TensorError("upsample_nearest2: expects 4-d, got " + shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const int Ho = H * 2, Wo = W * 2;
    Tensor<T> out = Tensor<T>::zeros({N, C, Ho, Wo});
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int nc = 0; nc < N * C; ++nc) {
        const T* in = px + (std::int64_t)nc * H * W;
        T* o = po + (std::int64_t)nc * Ho * Wo;
        for (int y = 0; y < H; ++y)
            for (int xw = 0; xw < W; ++xw) {
                const T v = in[y * W + xw];
                o[(2 * y) * Wo + 2 * xw] = v;
                o[(2 * y) * Wo + 2 * xw + 1] = v;
                o[(2 * y + 1) * Wo + 2 * xw] = v;
                o[(2 * y + 1) * Wo + 2 * xw + 1] = v;
            }
    }
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi, N, C, H, W, Ho, Wo](TensorImpl<T>& o) {
            xi->ensure_grad();
            for (int nc = 0; nc < N * C; ++nc) {
                const T* g = o.grad.data() + (std::int64_t)nc * Ho * Wo;
                T* dx = xi->grad.data() + (std::int64_t)nc * H * W;
                for (int y = 0; y < H; ++y)
                    for (int xw = 0; xw < W; ++xw)
                        dx[y * W + xw] += g[(2 * y) * Wo + 2 * xw] + g[(2 * y) * Wo + 2 * xw + 1] +
                                          g[(2 * y + 1) * Wo + 2 * xw] + g[(2 * y + 1) * Wo + 2 * xw + 1];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reshape (same element count)

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, const Shape& s) {
    if (shape_numel(s) != x.size()) op_shape_error("reshape", x.shape(), s);
    Tensor<T> out = Tensor<T>::from_data(s, x.data());
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi](TensorImpl<T>& o) {
            xi->ensure_grad();
            for (std::int64_t i = 0; i < o.size(); ++i) xi->grad[i] += o.grad[i];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    detail::check_finite("sum", x);
    T acc = 0;
    for (T v : x.data()) acc += v;
    Tensor<T> out = Tensor<T>::scalar(acc);
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi](TensorImpl<T>& o) {
            xi->ensure_grad();
            const T g = o.grad[0];
            for (auto& dv : xi->grad) dv += g;
        });
    }
    return out;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    return scale(sum(x), T(1) / T(x.size()));
}

// sum over channel axis of [N,C,H,W], keepdim -> [N,1,H,W]
template <typename T>
Tensor<T> sum_channels(const Tensor<T>& x) {
    if (x.shape().size() != 4)
        throw TensorError("sum_channels: expects 4-d, got " + shape_str(x.shape()));
    const int N = x.shape()[0], C = x.shape()[1], H = x.shape()[2], W = x.shape()[3];
    const std::int64_t plane = (std::int64_t)H * W;
    Tensor<T> out = Tensor<T>::zeros({N, 1, H, W});
    const T* px = x.data().data();
    T* po = out.data().data();
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const T* in = px + ((std::int64_t)n * C + c) * plane;
            T* o = po + n * plane;
            for (std::int64_t i = 0; i < plane; ++i) o[i] += in[i];
        }
    if (x.requires_grad()) {
        auto xi = x.impl();
        detail::attach(out, {xi}, [xi, N, C, plane](TensorImpl<T>& o) {
            xi->ensure_grad();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const T* g = o.grad.data() + n * plane;
                    T* dx = xi->grad.data() + ((std::int64_t)n * C + c) * plane;
                    for (std::int64_t i = 0; i < plane; ++i) dx[i] += g[i];
                }
        });
    }
    return out;
}

// masked reductions; mask is a constant weight tensor broadcastable against x
template <typename T>
Tensor<T> masked_sum(const Tensor<T>& x, const Tensor<T>& mask) {
    return sum(mul(x, mask));
}

template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, const Tensor<T>& mask) {
    T count = 0;
    for (T v : mask.data()) count += v;
    // mask of shape [N,1,H,W] against [N,C,H,W]: each mask entry covers C elements
    if (mask.size() != x.size()) count *= T(x.size() / mask.size());
    if (count <= T(0)) return Tensor<T>::scalar(T(0));
    return scale(masked_sum(x, mask), T(1) / count);
}

}  // namespace stainsep
