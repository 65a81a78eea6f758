#pragma once

// Differentiable primitives over Tensor<T>.
//
// Elementwise binary ops broadcast numpy-style. Every op validates shapes
// and throws ShapeError / DomainError naming the primitive.

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pseg/tensor.hpp"

namespace pseg {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapMat = Eigen::Map<RowMat<T>>;
template <class T>
using CMapMat = Eigen::Map<const RowMat<T>>;

inline Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
    const std::size_t r = std::max(a.size(), b.size());
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        const std::size_t da = i < r - a.size() ? 1 : a[i - (r - a.size())];
        const std::size_t db = i < r - b.size() ? 1 : b[i - (r - b.size())];
        if (da != db && da != 1 && db != 1) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " +
                             shape_str(b) + " are not broadcastable");
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// For every flat index of `out`, the flat index into an operand of shape `in`.
// Empty result means the identity mapping.
inline std::vector<std::size_t> broadcast_index(const Shape& in, const Shape& out) {
    if (in == out) return {};
    const std::size_t n = numel(out);
    std::vector<std::size_t> idx(n, 0);
    if (numel(in) == 1) return idx;
    const std::size_t r = out.size();
    std::vector<std::size_t> in_stride(r, 0);
    std::size_t s = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        const std::size_t oi = i + (r - in.size());
        in_stride[oi] = in[i] == 1 ? 0 : s;
        s *= in[i];
    }
    std::vector<std::size_t> counter(r, 0);
    std::size_t cur = 0;
    for (std::size_t k = 0; k < n; ++k) {
        idx[k] = cur;
        for (std::size_t d = r; d-- > 0;) {
            ++counter[d];
            cur += in_stride[d];
            if (counter[d] < out[d]) break;
            cur -= in_stride[d] * counter[d];
            counter[d] = 0;
        }
    }
    return idx;
}

inline std::size_t map_index(const std::vector<std::size_t>& m, std::size_t i) {
    return m.empty() ? i : m[i];
}

// Generic elementwise binary op. `fwd(a, b)` gives the value, `da(a, b, y)` and
// `db(a, b, y)` the partial derivatives.
template <class T, class Fwd, class Da, class Db>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, Da da, Db db) {
    Shape out_shape = broadcast_shape(a.shape(), b.shape(), op);
    auto ia = broadcast_index(a.shape(), out_shape);
    auto ib = broadcast_index(b.shape(), out_shape);
    const std::size_t n = numel(out_shape);
    std::vector<T> y(n);
    const auto av = a.data();
    const auto bv = b.data();
    if (ia.empty() && ib.empty()) {
        for (std::size_t i = 0; i < n; ++i) y[i] = fwd(av[i], bv[i]);
    } else {
        for (std::size_t i = 0; i < n; ++i) y[i] = fwd(av[map_index(ia, i)], bv[map_index(ib, i)]);
    }
    return make_result<T>(op, std::move(out_shape), std::move(y), {a, b},
                          [ia = std::move(ia), ib = std::move(ib), da, db](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              const auto& g = self.grad;
                              const std::size_t m = g.size();
                              if (pa.requires_grad) {
                                  auto& ga = pa.grad_buffer();
                                  for (std::size_t i = 0; i < m; ++i) {
                                      const std::size_t j = map_index(ia, i), k = map_index(ib, i);
                                      ga[j] += g[i] * da(pa.value[j], pb.value[k], self.value[i]);
                                  }
                              }
                              if (pb.requires_grad) {
                                  auto& gb = pb.grad_buffer();
                                  for (std::size_t i = 0; i < m; ++i) {
                                      const std::size_t j = map_index(ia, i), k = map_index(ib, i);
                                      gb[k] += g[i] * db(pa.value[j], pb.value[k], self.value[i]);
                                  }
                              }
                          });
}

// Generic elementwise unary op; `d(x, y)` is dy/dx.
template <class T, class Fwd, class D>
Tensor<T> unary(const char* op, const Tensor<T>& x, Fwd fwd, D d) {
    const auto xv = x.data();
    std::vector<T> y(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) y[i] = fwd(xv[i]);
    return make_result<T>(op, x.shape(), std::move(y), {x}, [d](Node<T>& self) {
        auto& p = *self.parents[0];
        auto& gp = p.grad_buffer();
        const auto& g = self.grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
            if (g[i] != T(0)) gp[i] += g[i] * d(p.value[i], self.value[i]);
        }
    });
}

inline std::size_t norm_axis(long axis, std::size_t rank, const char* op) {
    const long r = static_cast<long>(rank);
    if (axis < -r || axis >= r) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) +
                         " out of range for rank " + std::to_string(rank));
    }
    return static_cast<std::size_t>(axis < 0 ? axis + r : axis);
}

// Splits a shape around `axis` into (outer, len, inner) extents.
inline void split_axis(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& len,
                       std::size_t& inner) {
    outer = 1;
    inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    len = s[axis];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

// ---------------------------------------------------------------- elementwise

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(1); });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
        [](T, T, T) { return T(-1); });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary<T>(
        "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
        [](T x, T, T) { return x; });
}

template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    for (T v : b.data()) {
        if (v == T(0)) throw DomainError("div: division by zero");
    }
    return detail::binary<T>(
        "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
        [](T, T y, T r) { return -r / y; });
}

template <class T>
Tensor<T> neg(const Tensor<T>& x) {
    return detail::unary<T>("neg", x, [](T v) { return -v; }, [](T, T) { return T(-1); });
}

template <class T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary<T>(
        "exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <class T>
Tensor<T> log(const Tensor<T>& x) {
    for (T v : x.data()) {
        if (!(v > T(0))) throw DomainError("log: non-positive operand " + std::to_string(v));
    }
    return detail::unary<T>(
        "log", x, [](T v) { return std::log(v); }, [](T v, T) { return T(1) / v; });
}

// d/dx at 0 is infinite; a zero upstream gradient contributes nothing there.
template <class T>
Tensor<T> sqrt(const Tensor<T>& x) {
    for (T v : x.data()) {
        if (v < T(0)) throw DomainError("sqrt: negative operand " + std::to_string(v));
    }
    return detail::unary<T>(
        "sqrt", x, [](T v) { return std::sqrt(v); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> abs(const Tensor<T>& x) {
    return detail::unary<T>(
        "abs", x, [](T v) { return std::abs(v); },
        [](T v, T) { return v > T(0) ? T(1) : (v < T(0) ? T(-1) : T(0)); });
}

// Subgradient at 0 is 0.
template <class T>
Tensor<T> relu(const Tensor<T>& x) {
    return detail::unary<T>(
        "relu", x, [](T v) { return v > T(0) ? v : T(0); },
        [](T v, T) { return v > T(0) ? T(1) : T(0); });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.2)) {
    return detail::unary<T>(
        "leaky_relu", x, [slope](T v) { return v > T(0) ? v : slope * v; },
        [slope](T v, T) { return v > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> tanh(const Tensor<T>& x) {
    return detail::unary<T>(
        "tanh", x, [](T v) { return std::tanh(v); }, [](T, T y) { return T(1) - y * y; });
}

// max(x, floor); gradient passes only where x > floor.
template <class T>
Tensor<T> clamp_min(const Tensor<T>& x, T floor) {
    return detail::unary<T>(
        "clamp_min", x, [floor](T v) { return v > floor ? v : floor; },
        [floor](T v, T) { return v > floor ? T(1) : T(0); });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary<T>("scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary<T>("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> div_scalar(const Tensor<T>& x, T c) {
    if (c == T(0)) throw DomainError("div_scalar: division by zero");
    return detail::unary<T>(
        "div_scalar", x, [c](T v) { return v / c; }, [c](T, T) { return T(1) / c; });
}

template <class T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }
template <class T>
Tensor<T> operator-(const Tensor<T>& a) { return neg(a); }
template <class T>
Tensor<T> operator*(const Tensor<T>& a, T c) { return scale(a, c); }
template <class T>
Tensor<T> operator*(T c, const Tensor<T>& a) { return scale(a, c); }
template <class T>
Tensor<T> operator+(const Tensor<T>& a, T c) { return add_scalar(a, c); }
template <class T>
Tensor<T> operator+(T c, const Tensor<T>& a) { return add_scalar(a, c); }
template <class T>
Tensor<T> operator-(T c, const Tensor<T>& a) { return add_scalar(neg(a), c); }
template <class T>
Tensor<T> operator/(const Tensor<T>& a, T c) { return div_scalar(a, c); }

// ---------------------------------------------------------------- reductions

// Sum of all elements, accumulated in storage order.
template <class T>
Tensor<T> sum(const Tensor<T>& x) {
    T acc = T(0);
    for (T v : x.data()) acc += v;
    return make_result<T>("sum", Shape{}, {acc}, {x}, [](Node<T>& self) {
        auto& gp = self.parents[0]->grad_buffer();
        const T g = self.grad[0];
        for (auto& v : gp) v += g;
    });
}

// Sum along one axis; each output accumulates in increasing index order.
template <class T>
Tensor<T> sum(const Tensor<T>& x, long axis, bool keepdim = false) {
    const std::size_t ax = detail::norm_axis(axis, x.rank(), "sum");
    std::size_t outer, len, inner;
    detail::split_axis(x.shape(), ax, outer, len, inner);
    std::vector<T> y(outer * inner, T(0));
    const auto xv = x.data();
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < len; ++j)
            for (std::size_t i = 0; i < inner; ++i) y[o * inner + i] += xv[(o * len + j) * inner + i];
    Shape s = x.shape();
    if (keepdim) s[ax] = 1; else s.erase(s.begin() + static_cast<long>(ax));
    return make_result<T>("sum", std::move(s), std::move(y), {x},
                          [outer, len, inner](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t j = 0; j < len; ++j)
                                      for (std::size_t i = 0; i < inner; ++i)
                                          gp[(o * len + j) * inner + i] += self.grad[o * inner + i];
                          });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
    return div_scalar(sum(x), static_cast<T>(x.numel()));
}

template <class T>
Tensor<T> mean(const Tensor<T>& x, long axis, bool keepdim = false) {
    const std::size_t ax = detail::norm_axis(axis, x.rank(), "mean");
    return div_scalar(sum(x, axis, keepdim), static_cast<T>(x.dim(ax)));
}

// Maximum element; the gradient goes to the first maximal element.
template <class T>
Tensor<T> max_reduce(const Tensor<T>& x) {
    const auto xv = x.data();
    const std::size_t arg =
        static_cast<std::size_t>(std::max_element(xv.begin(), xv.end()) - xv.begin());
    return make_result<T>("max_reduce", Shape{}, {xv[arg]}, {x}, [arg](Node<T>& self) {
        self.parents[0]->grad_buffer()[arg] += self.grad[0];
    });
}

template <class T>
Tensor<T> max_reduce(const Tensor<T>& x, long axis, bool keepdim = false) {
    const std::size_t ax = detail::norm_axis(axis, x.rank(), "max_reduce");
    std::size_t outer, len, inner;
    detail::split_axis(x.shape(), ax, outer, len, inner);
    const auto xv = x.data();
    std::vector<T> y(outer * inner);
    std::vector<std::size_t> arg(outer * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
            std::size_t best = (o * len) * inner + i;
            for (std::size_t j = 1; j < len; ++j) {
                const std::size_t k = (o * len + j) * inner + i;
                if (xv[k] > xv[best]) best = k;
            }
            y[o * inner + i] = xv[best];
            arg[o * inner + i] = best;
        }
    Shape s = x.shape();
    if (keepdim) s[ax] = 1; else s.erase(s.begin() + static_cast<long>(ax));
    return make_result<T>("max_reduce", std::move(s), std::move(y), {x},
                          [arg = std::move(arg)](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < arg.size(); ++i) gp[arg[i]] += self.grad[i];
                          });
}

template <class T>
Tensor<T> broadcast_to(const Tensor<T>& x, const Shape& shape) {
    const Shape s = detail::broadcast_shape(x.shape(), shape, "broadcast");
    if (s != shape) {
        throw ShapeError("broadcast: cannot broadcast " + shape_str(x.shape()) + " to " +
                         shape_str(shape));
    }
    auto idx = detail::broadcast_index(x.shape(), shape);
    const auto xv = x.data();
    std::vector<T> y(numel(shape));
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = xv[detail::map_index(idx, i)];
    return make_result<T>("broadcast", shape, std::move(y), {x},
                          [idx = std::move(idx)](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              for (std::size_t i = 0; i < self.grad.size(); ++i)
                                  gp[detail::map_index(idx, i)] += self.grad[i];
                          });
}

// ---------------------------------------------------------------- shape ops

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
    if (numel(shape) != x.numel()) {
        throw ShapeError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    std::vector<T> y(x.data().begin(), x.data().end());
    return make_result<T>("reshape", std::move(shape), std::move(y), {x}, [](Node<T>& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += self.grad[i];
    });
}

template <class T>
Tensor<T> transpose(const Tensor<T>& x) {
    if (x.rank() != 2) throw ShapeError("transpose: rank-2 operand required, got " + shape_str(x.shape()));
    const std::size_t r = x.dim(0), c = x.dim(1);
    const auto xv = x.data();
    std::vector<T> y(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) y[j * r + i] = xv[i * c + j];
    return make_result<T>("transpose", Shape{c, r}, std::move(y), {x}, [r, c](Node<T>& self) {
        auto& gp = self.parents[0]->grad_buffer();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += self.grad[j * r + i];
    });
}

// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, long axis, std::size_t begin, std::size_t end) {
    const std::size_t ax = detail::norm_axis(axis, x.rank(), "slice");
    if (begin >= end || end > x.dim(ax)) {
        throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") invalid for extent " + std::to_string(x.dim(ax)));
    }
    std::size_t outer, len, inner;
    detail::split_axis(x.shape(), ax, outer, len, inner);
    const std::size_t w = end - begin;
    const auto xv = x.data();
    std::vector<T> y(outer * w * inner);
    for (std::size_t o = 0; o < outer; ++o)
        std::copy_n(xv.begin() + static_cast<long>((o * len + begin) * inner), w * inner,
                    y.begin() + static_cast<long>(o * w * inner));
    Shape s = x.shape();
    s[ax] = w;
    return make_result<T>("slice", std::move(s), std::move(y), {x},
                          [outer, len, inner, begin, w](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t k = 0; k < w * inner; ++k)
                                      gp[(o * len + begin) * inner + k] += self.grad[o * w * inner + k];
                          });
}

// Selects entries `indices` along `axis` (repeats allowed).
template <class T>
Tensor<T> gather(const Tensor<T>& x, long axis, std::vector<std::size_t> indices) {
    const std::size_t ax = detail::norm_axis(axis, x.rank(), "gather");
    if (indices.empty()) throw ShapeError("gather: empty index list");
    std::size_t outer, len, inner;
    detail::split_axis(x.shape(), ax, outer, len, inner);
    for (std::size_t k : indices) {
        if (k >= len) throw ShapeError("gather: index " + std::to_string(k) + " out of range " + std::to_string(len));
    }
    const std::size_t w = indices.size();
    const auto xv = x.data();
    std::vector<T> y(outer * w * inner);
    for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < w; ++j)
            for (std::size_t i = 0; i < inner; ++i)
                y[(o * w + j) * inner + i] = xv[(o * len + indices[j]) * inner + i];
    Shape s = x.shape();
    s[ax] = w;
    return make_result<T>("gather", std::move(s), std::move(y), {x},
                          [outer, len, inner, idx = std::move(indices)](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              const std::size_t w2 = idx.size();
                              for (std::size_t o = 0; o < outer; ++o)
                                  for (std::size_t j = 0; j < w2; ++j)
                                      for (std::size_t i = 0; i < inner; ++i)
                                          gp[(o * len + idx[j]) * inner + i] +=
                                              self.grad[(o * w2 + j) * inner + i];
                          });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& xs, long axis) {
    if (xs.empty()) throw ShapeError("concat: no operands");
    const std::size_t ax = detail::norm_axis(axis, xs[0].rank(), "concat");
    Shape s = xs[0].shape();
    std::size_t total = 0;
    for (const auto& t : xs) {
        if (t.rank() != s.size()) throw ShapeError("concat: rank mismatch");
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != ax && t.dim(d) != s[d]) {
                throw ShapeError("concat: shape " + shape_str(t.shape()) + " incompatible with " +
                                 shape_str(s) + " along axis " + std::to_string(ax));
            }
        }
        total += t.dim(ax);
    }
    s[ax] = total;
    std::size_t outer, len, inner;
    detail::split_axis(s, ax, outer, len, inner);
    std::vector<T> y(numel(s));
    std::vector<std::size_t> offs;
    std::size_t off = 0;
    for (const auto& t : xs) {
        offs.push_back(off);
        const std::size_t w = t.dim(ax);
        const auto tv = t.data();
        for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(tv.begin() + static_cast<long>(o * w * inner), w * inner,
                        y.begin() + static_cast<long>((o * len + off) * inner));
        off += w;
    }
    return make_result<T>("concat", std::move(s), std::move(y), xs,
                          [outer, len, inner, offs = std::move(offs)](Node<T>& self) {
                              for (std::size_t p = 0; p < self.parents.size(); ++p) {
                                  auto& par = *self.parents[p];
                                  if (!par.requires_grad) continue;
                                  auto& gp = par.grad_buffer();
                                  const std::size_t w = gp.size() / (outer * inner);
                                  for (std::size_t o = 0; o < outer; ++o)
                                      for (std::size_t k = 0; k < w * inner; ++k)
                                          gp[o * w * inner + k] += self.grad[(o * len + offs[p]) * inner + k];
                              }
                          });
}

// ---------------------------------------------------------------- structured

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
        throw ShapeError("matmul: incompatible operands " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const long m = static_cast<long>(a.dim(0)), k = static_cast<long>(a.dim(1)),
               n = static_cast<long>(b.dim(1));
    std::vector<T> y(static_cast<std::size_t>(m * n));
    detail::MapMat<T>(y.data(), m, n).noalias() =
        detail::CMapMat<T>(a.data().data(), m, k) * detail::CMapMat<T>(b.data().data(), k, n);
    return make_result<T>("matmul", Shape{a.dim(0), b.dim(1)}, std::move(y), {a, b},
                          [m, k, n](Node<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              detail::CMapMat<T> g(self.grad.data(), m, n);
                              if (pa.requires_grad) {
                                  detail::MapMat<T>(pa.grad_buffer().data(), m, k).noalias() +=
                                      g * detail::CMapMat<T>(pb.value.data(), k, n).transpose();
                              }
                              if (pb.requires_grad) {
                                  detail::MapMat<T>(pb.grad_buffer().data(), k, n).noalias() +=
                                      detail::CMapMat<T>(pa.value.data(), m, k).transpose() * g;
                              }
                          });
}

struct Conv2dAttrs {
    std::size_t stride = 1;
    std::size_t pad = 0;
};

// Cross-correlation of x (N,C,H,W) with w (O,C,K,K), zero padding, optional
// per-output-channel bias (O). Implemented as im2col followed by one GEMM.
template <class T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias = {},
                 Conv2dAttrs attrs = {}) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be rank 4, got " + shape_str(x.shape()));
    if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
        throw ShapeError("conv2d: kernel must be (O,C,K,K), got " + shape_str(w.shape()));
    }
    if (w.dim(1) != x.dim(1)) {
        throw ShapeError("conv2d: kernel expects " + std::to_string(w.dim(1)) +
                         " input channels, input has " + std::to_string(x.dim(1)));
    }
    if (attrs.stride == 0) throw ShapeError("conv2d: stride must be positive");
    const std::size_t N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t O = w.dim(0), K = w.dim(2), S = attrs.stride, P = attrs.pad;
    if (H + 2 * P < K || W + 2 * P < K) throw ShapeError("conv2d: kernel larger than padded input");
    if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != O)) {
        throw ShapeError("conv2d: bias must have shape [" + std::to_string(O) + "]");
    }
    const std::size_t Ho = (H + 2 * P - K) / S + 1, Wo = (W + 2 * P - K) / S + 1;
    const std::size_t rows = C * K * K, cols = N * Ho * Wo, plane = Ho * Wo;

    auto col = std::make_shared<std::vector<T>>(rows * cols, T(0));
    const auto xv = x.data();
    for (std::size_t c = 0; c < C; ++c)
        for (std::size_t ki = 0; ki < K; ++ki)
            for (std::size_t kj = 0; kj < K; ++kj) {
                T* dst = col->data() + ((c * K + ki) * K + kj) * cols;
                for (std::size_t n = 0; n < N; ++n) {
                    const T* src = xv.data() + (n * C + c) * H * W;
                    for (std::size_t oh = 0; oh < Ho; ++oh) {
                        const long ih = static_cast<long>(oh * S + ki) - static_cast<long>(P);
                        T* d = dst + n * plane + oh * Wo;
                        if (ih < 0 || ih >= static_cast<long>(H)) continue;
                        for (std::size_t ow = 0; ow < Wo; ++ow) {
                            const long iw = static_cast<long>(ow * S + kj) - static_cast<long>(P);
                            if (iw >= 0 && iw < static_cast<long>(W)) d[ow] = src[ih * static_cast<long>(W) + iw];
                        }
                    }
                }
            }

    std::vector<T> prod(O * cols);
    detail::MapMat<T>(prod.data(), static_cast<long>(O), static_cast<long>(cols)).noalias() =
        detail::CMapMat<T>(w.data().data(), static_cast<long>(O), static_cast<long>(rows)) *
        detail::CMapMat<T>(col->data(), static_cast<long>(rows), static_cast<long>(cols));

    std::vector<T> y(N * O * plane);
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t o = 0; o < O; ++o) {
            const T b = bias.defined() ? bias[o] : T(0);
            const T* src = prod.data() + o * cols + n * plane;
            T* dst = y.data() + (n * O + o) * plane;
            for (std::size_t p = 0; p < plane; ++p) dst[p] = src[p] + b;
        }

    std::vector<Tensor<T>> parents{x, w};
    if (bias.defined()) parents.push_back(bias);
    return make_result<T>(
        "conv2d", Shape{N, O, Ho, Wo}, std::move(y), parents,
        [=](Node<T>& self) {
            // Output gradient laid out as (O, N*Ho*Wo) to match the GEMM.
            std::vector<T> g(O * cols);
            for (std::size_t n = 0; n < N; ++n)
                for (std::size_t o = 0; o < O; ++o)
                    std::copy_n(self.grad.data() + (n * O + o) * plane, plane,
                                g.data() + o * cols + n * plane);
            detail::CMapMat<T> G(g.data(), static_cast<long>(O), static_cast<long>(cols));
            auto& px = *self.parents[0];
            auto& pw = *self.parents[1];
            if (pw.requires_grad) {
                detail::MapMat<T>(pw.grad_buffer().data(), static_cast<long>(O), static_cast<long>(rows))
                    .noalias() += G * detail::CMapMat<T>(col->data(), static_cast<long>(rows),
                                                         static_cast<long>(cols))
                                          .transpose();
            }
            if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
                auto& gb = self.parents[2]->grad_buffer();
                for (std::size_t o = 0; o < O; ++o) {
                    T acc = T(0);
                    for (std::size_t j = 0; j < cols; ++j) acc += g[o * cols + j];
                    gb[o] += acc;
                }
            }
            if (px.requires_grad) {
                std::vector<T> dcol(rows * cols);
                detail::MapMat<T>(dcol.data(), static_cast<long>(rows), static_cast<long>(cols)).noalias() =
                    detail::CMapMat<T>(pw.value.data(), static_cast<long>(O), static_cast<long>(rows))
                        .transpose() *
                    G;
                auto& gx = px.grad_buffer();
                for (std::size_t c = 0; c < C; ++c)
                    for (std::size_t ki = 0; ki < K; ++ki)
                        for (std::size_t kj = 0; kj < K; ++kj) {
                            const T* src = dcol.data() + ((c * K + ki) * K + kj) * cols;
                            for (std::size_t n = 0; n < N; ++n) {
                                T* dst = gx.data() + (n * C + c) * H * W;
                                for (std::size_t oh = 0; oh < Ho; ++oh) {
                                    const long ih = static_cast<long>(oh * S + ki) - static_cast<long>(P);
                                    if (ih < 0 || ih >= static_cast<long>(H)) continue;
                                    const T* s = src + n * plane + oh * Wo;
                                    for (std::size_t ow = 0; ow < Wo; ++ow) {
                                        const long iw = static_cast<long>(ow * S + kj) - static_cast<long>(P);
                                        if (iw >= 0 && iw < static_cast<long>(W))
                                            dst[ih * static_cast<long>(W) + iw] += s[ow];
                                    }
                                }
                            }
                        }
            }
        });
}

// Nearest-neighbour upsampling of the two trailing axes by an integer factor.
template <class T>
Tensor<T> upsample_nearest(const Tensor<T>& x, std::size_t factor) {
    if (x.rank() != 4) throw ShapeError("upsample_nearest: rank-4 operand required");
    if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H * factor, Wo = W * factor;
    const auto xv = x.data();
    std::vector<T> y(NC * Ho * Wo);
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t i = 0; i < Ho; ++i)
            for (std::size_t j = 0; j < Wo; ++j)
                y[(p * Ho + i) * Wo + j] = xv[(p * H + i / factor) * W + j / factor];
    return make_result<T>("upsample_nearest", Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(y), {x},
                          [=](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              for (std::size_t p = 0; p < NC; ++p)
                                  for (std::size_t i = 0; i < Ho; ++i)
                                      for (std::size_t j = 0; j < Wo; ++j)
                                          gp[(p * H + i / factor) * W + j / factor] +=
                                              self.grad[(p * Ho + i) * Wo + j];
                          });
}

namespace detail {
template <class T>
void check_rank4(const Tensor<T>& x, const char* op) {
    if (x.rank() != 4) {
        throw ShapeError(std::string(op) + ": rank-4 (N,C,H,W) operand required, got " +
                         shape_str(x.shape()));
    }
}
}  // namespace detail

// Softmax over axis 1 of an (N,C,H,W) tensor.
template <class T>
Tensor<T> softmax_channel(const Tensor<T>& x) {
    detail::check_rank4(x, "softmax_channel");
    const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    const auto xv = x.data();
    std::vector<T> y(xv.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
            const std::size_t base = n * C * P + p;
            T mx = xv[base];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * P]);
            T z = T(0);
            for (std::size_t c = 0; c < C; ++c) {
                const T e = std::exp(xv[base + c * P] - mx);
                y[base + c * P] = e;
                z += e;
            }
            for (std::size_t c = 0; c < C; ++c) y[base + c * P] /= z;
        }
    return make_result<T>("softmax_channel", x.shape(), std::move(y), {x}, [N, C, P](Node<T>& self) {
        auto& gp = self.parents[0]->grad_buffer();
        const auto& yv = self.value;
        const auto& g = self.grad;
        for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < P; ++p) {
                const std::size_t base = n * C * P + p;
                T dot = T(0);
                for (std::size_t c = 0; c < C; ++c) dot += g[base + c * P] * yv[base + c * P];
                for (std::size_t c = 0; c < C; ++c)
                    gp[base + c * P] += yv[base + c * P] * (g[base + c * P] - dot);
            }
    });
}

// log(softmax) over axis 1, computed stably.
template <class T>
Tensor<T> log_softmax_channel(const Tensor<T>& x) {
    detail::check_rank4(x, "log_softmax_channel");
    const std::size_t N = x.dim(0), C = x.dim(1), P = x.dim(2) * x.dim(3);
    const auto xv = x.data();
    std::vector<T> y(xv.size());
    for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < P; ++p) {
            const std::size_t base = n * C * P + p;
            T mx = xv[base];
            for (std::size_t c = 1; c < C; ++c) mx = std::max(mx, xv[base + c * P]);
            T z = T(0);
            for (std::size_t c = 0; c < C; ++c) z += std::exp(xv[base + c * P] - mx);
            const T lz = mx + std::log(z);
            for (std::size_t c = 0; c < C; ++c) y[base + c * P] = xv[base + c * P] - lz;
        }
    return make_result<T>("log_softmax_channel", x.shape(), std::move(y), {x},
                          [N, C, P](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              const auto& yv = self.value;
                              const auto& g = self.grad;
                              for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t p = 0; p < P; ++p) {
                                      const std::size_t base = n * C * P + p;
                                      T gs = T(0);
                                      for (std::size_t c = 0; c < C; ++c) gs += g[base + c * P];
                                      for (std::size_t c = 0; c < C; ++c)
                                          gp[base + c * P] += g[base + c * P] - std::exp(yv[base + c * P]) * gs;
                                  }
                          });
}

template <class T>
Tensor<T> concat_channel(const std::vector<Tensor<T>>& xs) {
    for (const auto& t : xs) detail::check_rank4(t, "concat_channel");
    return concat(xs, 1);
}

// Zero padding of the two trailing axes.
template <class T>
Tensor<T> pad2d(const Tensor<T>& x, std::size_t pad) {
    detail::check_rank4(x, "pad");
    const std::size_t NC = x.dim(0) * x.dim(1), H = x.dim(2), W = x.dim(3);
    const std::size_t Ho = H + 2 * pad, Wo = W + 2 * pad;
    const auto xv = x.data();
    std::vector<T> y(NC * Ho * Wo, T(0));
    for (std::size_t p = 0; p < NC; ++p)
        for (std::size_t i = 0; i < H; ++i)
            std::copy_n(xv.begin() + static_cast<long>((p * H + i) * W), W,
                        y.begin() + static_cast<long>((p * Ho + i + pad) * Wo + pad));
    return make_result<T>("pad", Shape{x.dim(0), x.dim(1), Ho, Wo}, std::move(y), {x},
                          [=](Node<T>& self) {
                              auto& gp = self.parents[0]->grad_buffer();
                              for (std::size_t p = 0; p < NC; ++p)
                                  for (std::size_t i = 0; i < H; ++i)
                                      for (std::size_t j = 0; j < W; ++j)
                                          gp[(p * H + i) * W + j] += self.grad[(p * Ho + i + pad) * Wo + pad + j];
                          });
}

// ---------------------------------------------------------------- dispatch

enum class Primitive {
    add, sub, mul, div, neg, exp, log, sqrt, relu, leaky_relu, tanh, sum, mean, max_reduce, broadcast
};

struct PrimitiveAttrs {
    double slope = 0.2;               // leaky_relu
    std::optional<long> axis;         // sum / mean / max_reduce
    Shape target;                     // broadcast
};

inline const char* primitive_name(Primitive k) {
    switch (k) {
        case Primitive::add: return "add";
        case Primitive::sub: return "sub";
        case Primitive::mul: return "mul";
        case Primitive::div: return "div";
        case Primitive::neg: return "neg";
        case Primitive::exp: return "exp";
        case Primitive::log: return "log";
        case Primitive::sqrt: return "sqrt";
        case Primitive::relu: return "relu";
        case Primitive::leaky_relu: return "leaky_relu";
        case Primitive::tanh: return "tanh";
        case Primitive::sum: return "sum";
        case Primitive::mean: return "mean";
        case Primitive::max_reduce: return "max_reduce";
        case Primitive::broadcast: return "broadcast";
    }
    return "?";
}

template <class T>
Tensor<T> apply_primitive(Primitive kind, std::span<const Tensor<T>> operands,
                          const PrimitiveAttrs& attrs = {}) {
    const bool binary = kind == Primitive::add || kind == Primitive::sub ||
                        kind == Primitive::mul || kind == Primitive::div;
    const std::size_t want = binary ? 2 : 1;
    if (operands.size() != want) {
        throw ShapeError(std::string(primitive_name(kind)) + ": expects " + std::to_string(want) +
                         " operand(s), got " + std::to_string(operands.size()));
    }
    const auto& a = operands[0];
    switch (kind) {
        case Primitive::add: return add(a, operands[1]);
        case Primitive::sub: return sub(a, operands[1]);
        case Primitive::mul: return mul(a, operands[1]);
        case Primitive::div: return div(a, operands[1]);
        case Primitive::neg: return neg(a);
        case Primitive::exp: return pseg::exp(a);
        case Primitive::log: return pseg::log(a);
        case Primitive::sqrt: return pseg::sqrt(a);
        case Primitive::relu: return relu(a);
        case Primitive::leaky_relu: return leaky_relu(a, static_cast<T>(attrs.slope));
        case Primitive::tanh: return pseg::tanh(a);
        case Primitive::sum: return attrs.axis ? sum(a, *attrs.axis) : sum(a);
        case Primitive::mean: return attrs.axis ? mean(a, *attrs.axis) : mean(a);
        case Primitive::max_reduce: return attrs.axis ? max_reduce(a, *attrs.axis) : max_reduce(a);
        case Primitive::broadcast: return broadcast_to(a, attrs.target);
    }
    throw ShapeError("unknown primitive");
}

enum class Structured { matmul, conv2d, conv2d_stride, upsample_nearest, softmax_channel, concat_channel, pad };

struct StructuredAttrs {
    std::size_t stride = 2;   // conv2d_stride
    std::size_t pad = 0;      // conv2d, conv2d_stride, pad
    std::size_t factor = 2;   // upsample_nearest
};

// conv2d / conv2d_stride take (input, kernel[, bias]).
template <class T>
Tensor<T> apply_structured(Structured kind, std::span<const Tensor<T>> operands,
                           const StructuredAttrs& attrs = {}) {
    auto need = [&](std::size_t lo, std::size_t hi, const char* op) {
        if (operands.size() < lo || operands.size() > hi) {
            throw ShapeError(std::string(op) + ": wrong operand count " + std::to_string(operands.size()));
        }
    };
    switch (kind) {
        case Structured::matmul:
            need(2, 2, "matmul");
            return matmul(operands[0], operands[1]);
        case Structured::conv2d:
        case Structured::conv2d_stride: {
            need(2, 3, "conv2d");
            const std::size_t stride = kind == Structured::conv2d ? 1 : attrs.stride;
            return conv2d(operands[0], operands[1], operands.size() > 2 ? operands[2] : Tensor<T>{},
                          Conv2dAttrs{stride, attrs.pad});
        }
        case Structured::upsample_nearest:
            need(1, 1, "upsample_nearest");
            return upsample_nearest(operands[0], attrs.factor);
        case Structured::softmax_channel:
            need(1, 1, "softmax_channel");
            return softmax_channel(operands[0]);
        case Structured::concat_channel:
            need(1, operands.size(), "concat_channel");
            return concat_channel(std::vector<Tensor<T>>(operands.begin(), operands.end()));
        case Structured::pad:
            need(1, 1, "pad");
            return pad2d(operands[0], attrs.pad);
    }
    throw ShapeError("unknown structured op");
}

}  // namespace pseg
