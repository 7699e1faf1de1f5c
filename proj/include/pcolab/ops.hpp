// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "pcolab/rng.hpp"
#include "pcolab/tensor.hpp"

namespace pcolab::ops {

namespace detail {

template <typename T>
std::vector<T>* parent_grad(Node<T>& out, std::size_t i) {
    auto& p = *out.parents[i];
    return p.requires_grad ? &p.ensure_grad() : nullptr;
}

[[noreturn]] inline void shape_fail(const char* op, const std::string& detail) {
    throw Error(ErrorKind::shape, std::string("op '") + op + "': " + detail);
}

template <typename T>
void expect_rank(const char* op, const Tensor<T>& x, std::size_t rank) {
    if (x.ndim() != rank) {
        shape_fail(op, "expected rank " + std::to_string(rank) + ", got shape " + shape_str(x.shape()));
    }
}

// Last-axis geometry: rows x cols view of any tensor with rank >= 1.
template <typename T>
std::pair<std::size_t, std::size_t> rows_cols(const char* op, const Tensor<T>& x) {
    if (x.ndim() == 0) {
        shape_fail(op, "needs rank >= 1, got a scalar");
    }
    std::size_t cols = x.shape().back();
    return {cols == 0 ? 0 : x.numel() / cols, cols};
}

inline Shape broadcast_shape(const char* op, const Shape& a, const Shape& b) {
    std::size_t n = std::max(a.size(), b.size());
    Shape out(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t da = i < n - a.size() ? 1 : a[i - (n - a.size())];
        std::size_t db = i < n - b.size() ? 1 : b[i - (n - b.size())];
        if (da != db && da != 1 && db != 1) {
            shape_fail(op, "cannot broadcast " + shape_str(a) + " with " + shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

// For each flat output index, the flat index into an operand of shape `in`.
inline std::vector<std::size_t> broadcast_offsets(const Shape& out, const Shape& in) {
    std::size_t n = out.size();
    std::vector<std::size_t> in_strides(n, 0);
    std::size_t stride = 1;
    for (std::size_t i = in.size(); i-- > 0;) {
        std::size_t axis = i + (n - in.size());
        in_strides[axis] = in[i] == 1 ? 0 : stride;
        stride *= in[i];
    }
    std::size_t total = shape_numel(out);
    std::vector<std::size_t> offsets(total);
    std::vector<std::size_t> idx(n, 0);
    std::size_t off = 0;
    for (std::size_t flat = 0; flat < total; ++flat) {
        offsets[flat] = off;
        for (std::size_t axis = n; axis-- > 0;) {
            ++idx[axis];
            off += in_strides[axis];
            if (idx[axis] < out[axis]) {
                break;
            }
            off -= in_strides[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
    return offsets;
}

enum class BinaryKind { add, sub, mul, div };

template <typename T>
Tensor<T> binary(const char* op, BinaryKind kind, const Tensor<T>& a, const Tensor<T>& b) {
    auto apply = [kind](T x, T y) -> T {
        switch (kind) {
            case BinaryKind::add: return x + y;
            case BinaryKind::sub: return x - y;
            case BinaryKind::mul: return x * y;
            case BinaryKind::div: return x / y;
        }
        return T{0};
    };
    if (a.shape() == b.shape()) {
        auto ad = a.data();
        auto bd = b.data();
        std::vector<T> out(ad.size());
        for (std::size_t i = 0; i < out.size(); ++i) {
            out[i] = apply(ad[i], bd[i]);
        }
        return make_op<T>(op, a.shape(), std::move(out), {a, b}, [kind](Node<T>& o) {
            auto& pa = *o.parents[0];
            auto& pb = *o.parents[1];
            auto* ga = parent_grad(o, 0);
            auto* gb = parent_grad(o, 1);
            for (std::size_t i = 0; i < o.grad.size(); ++i) {
                T g = o.grad[i];
                switch (kind) {
                    case BinaryKind::add:
                        if (ga) (*ga)[i] += g;
                        if (gb) (*gb)[i] += g;
                        break;
                    case BinaryKind::sub:
                        if (ga) (*ga)[i] += g;
                        if (gb) (*gb)[i] -= g;
                        break;
                    case BinaryKind::mul:
                        if (ga) (*ga)[i] += g * pb.data[i];
                        if (gb) (*gb)[i] += g * pa.data[i];
                        break;
                    case BinaryKind::div:
                        if (ga) (*ga)[i] += g / pb.data[i];
                        if (gb) (*gb)[i] -= g * pa.data[i] / (pb.data[i] * pb.data[i]);
                        break;
                }
            }
        });
    }
    Shape shape = broadcast_shape(op, a.shape(), b.shape());
    auto oa = broadcast_offsets(shape, a.shape());
    auto ob = broadcast_offsets(shape, b.shape());
    std::vector<T> out(oa.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = apply(a.data()[oa[i]], b.data()[ob[i]]);
    }
    return make_op<T>(op, std::move(shape), std::move(out), {a, b},
                      [kind, oa = std::move(oa), ob = std::move(ob)](Node<T>& o) {
                          auto& pa = *o.parents[0];
                          auto& pb = *o.parents[1];
                          auto* ga = parent_grad(o, 0);
                          auto* gb = parent_grad(o, 1);
                          for (std::size_t i = 0; i < o.grad.size(); ++i) {
                              T g = o.grad[i];
                              T x = pa.data[oa[i]];
                              T y = pb.data[ob[i]];
                              switch (kind) {
                                  case BinaryKind::add:
                                      if (ga) (*ga)[oa[i]] += g;
                                      if (gb) (*gb)[ob[i]] += g;
                                      break;
                                  case BinaryKind::sub:
                                      if (ga) (*ga)[oa[i]] += g;
                                      if (gb) (*gb)[ob[i]] -= g;
                                      break;
                                  case BinaryKind::mul:
                                      if (ga) (*ga)[oa[i]] += g * y;
                                      if (gb) (*gb)[ob[i]] += g * x;
                                      break;
                                  case BinaryKind::div:
                                      if (ga) (*ga)[oa[i]] += g / y;
                                      if (gb) (*gb)[ob[i]] -= g * x / (y * y);
                                      break;
                              }
                          }
                      });
}

// Elementwise unary op given value and derivative (in terms of input x and output y).
template <typename T, typename F, typename DF>
Tensor<T> unary(const char* op, const Tensor<T>& x, F f, DF df) {
    auto xd = x.data();
    std::vector<T> out(xd.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        out[i] = f(xd[i]);
    }
    return make_op<T>(op, x.shape(), std::move(out), {x}, [df](Node<T>& o) {
        auto* g = parent_grad(o, 0);
        if (!g) return;
        const auto& in = o.parents[0]->data;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            (*g)[i] += o.grad[i] * df(in[i], o.data[i]);
        }
    });
}

template <typename T>
T stable_sigmoid(T x) {
    if (x >= T{0}) {
        return T{1} / (T{1} + std::exp(-x));
    }
    T e = std::exp(x);
    return e / (T{1} + e);
}

template <typename T>
T stable_softplus(T x) {
    return std::max(x, T{0}) + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace detail

// ----------------------------- elementwise -----------------------------

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("add", detail::BinaryKind::add, a, b);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("sub", detail::BinaryKind::sub, a, b);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("mul", detail::BinaryKind::mul, a, b);
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
    return detail::binary("div", detail::BinaryKind::div, a, b);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T c) {
    return detail::unary("scale", x, [c](T v) { return v * c; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T c) {
    return detail::unary("add_scalar", x, [c](T v) { return v + c; }, [](T, T) { return T{1}; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& x) {
    return scale(x, T{-1});
}

template <typename T>
Tensor<T> exp(const Tensor<T>& x) {
    return detail::unary("exp", x, [](T v) { return std::exp(v); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& x) {
    return detail::unary("log", x, [](T v) { return std::log(v); }, [](T v, T) { return T{1} / v; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
    return detail::unary(
        "sigmoid", x, [](T v) { return detail::stable_sigmoid(v); }, [](T, T y) { return y * (T{1} - y); });
}

/// log(1 + exp(x)), evaluated without overflow.
template <typename T>
Tensor<T> softplus(const Tensor<T>& x) {
    return detail::unary(
        "softplus", x, [](T v) { return detail::stable_softplus(v); },
        [](T v, T) { return detail::stable_sigmoid(v); });
}

/// max(x, lo); zero gradient where the clamp is active.
template <typename T>
Tensor<T> clamp_min(const Tensor<T>& x, T lo) {
    return detail::unary(
        "clamp_min", x, [lo](T v) { return std::max(v, lo); }, [lo](T v, T) { return v < lo ? T{0} : T{1}; });
}

/// min(x, hi); zero gradient where the clamp is active.
template <typename T>
Tensor<T> clamp_max(const Tensor<T>& x, T hi) {
    return detail::unary(
        "clamp_max", x, [hi](T v) { return std::min(v, hi); }, [hi](T v, T) { return v > hi ? T{0} : T{1}; });
}

/// Tanh-approximated GELU.
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    constexpr T c = T(0.7978845608028654);  // sqrt(2/pi)
    constexpr T a = T(0.044715);
    return detail::unary(
        "gelu", x,
        [](T v) { return T(0.5) * v * (T{1} + std::tanh(c * (v + a * v * v * v))); },
        [](T v, T) {
            T u = c * (v + a * v * v * v);
            T t = std::tanh(u);
            T du = c * (T{1} + T{3} * a * v * v);
            return T(0.5) * (T{1} + t) + T(0.5) * v * (T{1} - t * t) * du;
        });
}

/// Same values, no gradient pathway.
template <typename T>
Tensor<T> detach(const Tensor<T>& x) {
    return Tensor<T>::from_data(x.shape(), x.to_vector(), false);
}

// ----------------------------- reductions -----------------------------

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
    T s{0};
    for (T v : x.data()) s += v;
    return make_op<T>("sum", {}, {s}, {x}, [](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (auto& v : *g) v += o.grad[0];
    });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
    if (x.numel() == 0) {
        detail::shape_fail("mean", "empty tensor");
    }
    return scale(sum(x), T{1} / static_cast<T>(x.numel()));
}

/// Sum over positions whose mask entry is nonzero.
template <typename T>
Tensor<T> masked_sum(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
    if (mask.size() != x.numel()) {
        detail::shape_fail("masked_sum", "mask of length " + std::to_string(mask.size()) + " vs tensor " +
                                             shape_str(x.shape()));
    }
    T s{0};
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask[i]) s += x.data()[i];
    }
    std::vector<std::uint8_t> m(mask.begin(), mask.end());
    return make_op<T>("masked_sum", {}, {s}, {x}, [m = std::move(m)](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (m[i]) (*g)[i] += o.grad[0];
        }
    });
}

/// Mean over valid positions; an all-invalid mask yields 0.
template <typename T>
Tensor<T> masked_mean(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
    auto count = std::count_if(mask.begin(), mask.end(), [](std::uint8_t v) { return v != 0; });
    auto s = masked_sum(x, mask);
    return count == 0 ? scale(s, T{0}) : scale(s, T{1} / static_cast<T>(count));
}

// ----------------------------- linear algebra -----------------------------

/// [m x k] * [k x n] -> [m x n]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::expect_rank("matmul", a, 2);
    detail::expect_rank("matmul", b, 2);
    const std::size_t m = a.size(0), k = a.size(1), n = b.size(1);
    if (b.size(0) != k) {
        detail::shape_fail("matmul", "inner extents differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    }
    using Mat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using CMap = Eigen::Map<const Mat>;
    using MMap = Eigen::Map<Mat>;
    std::vector<T> out(m * n);
    MMap(out.data(), m, n).noalias() = CMap(a.data().data(), m, k) * CMap(b.data().data(), k, n);
    return make_op<T>("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](Node<T>& o) {
        auto& pa = *o.parents[0];
        auto& pb = *o.parents[1];
        CMap go(o.grad.data(), m, n);
        if (auto* ga = detail::parent_grad(o, 0)) {
            MMap(ga->data(), m, k).noalias() += go * CMap(pb.data.data(), k, n).transpose();
        }
        if (auto* gb = detail::parent_grad(o, 1)) {
            MMap(gb->data(), k, n).noalias() += CMap(pa.data.data(), m, k).transpose() * go;
        }
    });
}

/// x[rows x in] * w[in x out] + bias[out]
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& bias) {
    return add(matmul(x, w), bias);
}

// ----------------------------- indexing -----------------------------

/// Rows of weight[V x D] selected by indices -> [n x D].
template <typename T>
Tensor<T> embedding(const Tensor<T>& weight, std::span<const std::int32_t> indices) {
    detail::expect_rank("embedding", weight, 2);
    const std::size_t v = weight.size(0), d = weight.size(1);
    std::vector<std::int32_t> idx(indices.begin(), indices.end());
    std::vector<T> out(idx.size() * d);
    for (std::size_t r = 0; r < idx.size(); ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= v) {
            detail::shape_fail("embedding", "index " + std::to_string(idx[r]) + " out of range for table " +
                                                shape_str(weight.shape()));
        }
        std::copy_n(weight.data().begin() + idx[r] * d, d, out.begin() + r * d);
    }
    return make_op<T>("embedding", {idx.size(), d}, std::move(out), {weight}, [idx, d](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            for (std::size_t j = 0; j < d; ++j) {
                (*g)[idx[r] * d + j] += o.grad[r * d + j];
            }
        }
    });
}

/// x[R x V] at column idx[r] for each row -> [R]. A rank-1 x is one row.
template <typename T>
Tensor<T> gather_last(const Tensor<T>& x, std::span<const std::int32_t> indices) {
    auto [rows, cols] = detail::rows_cols("gather_last", x);
    if (indices.size() != rows) {
        detail::shape_fail("gather_last", std::to_string(indices.size()) + " indices for " + std::to_string(rows) +
                                              " rows of " + shape_str(x.shape()));
    }
    std::vector<std::int32_t> idx(indices.begin(), indices.end());
    std::vector<T> out(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        if (idx[r] < 0 || static_cast<std::size_t>(idx[r]) >= cols) {
            detail::shape_fail("gather_last", "index " + std::to_string(idx[r]) + " out of range for " +
                                                  shape_str(x.shape()));
        }
        out[r] = x.data()[r * cols + idx[r]];
    }
    Shape shape(x.shape().begin(), x.shape().end() - 1);
    return make_op<T>("gather_last", std::move(shape), std::move(out), {x}, [idx, cols](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t r = 0; r < idx.size(); ++r) {
            (*g)[r * cols + idx[r]] += o.grad[r];
        }
    });
}

/// Rows [begin, end) of a rank-2 tensor.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& x, std::size_t begin, std::size_t end) {
    detail::expect_rank("slice_rows", x, 2);
    const std::size_t cols = x.size(1);
    if (begin > end || end > x.size(0)) {
        detail::shape_fail("slice_rows", "range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                             ") outside " + shape_str(x.shape()));
    }
    std::vector<T> out(x.data().begin() + begin * cols, x.data().begin() + end * cols);
    return make_op<T>("slice_rows", {end - begin, cols}, std::move(out), {x}, [begin, cols](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t i = 0; i < o.grad.size(); ++i) {
            (*g)[begin * cols + i] += o.grad[i];
        }
    });
}

/// Values and indices of the k largest entries per row, descending; equal
/// values are ordered by lower index first. Indices carry no gradient.
template <typename T>
struct TopK {
    Tensor<T> values;
    std::vector<std::int32_t> indices;  // rows x k, row-major
};

/// Index order of one row under the top-k ordering (value desc, index asc).
template <typename T>
std::vector<std::int32_t> topk_indices(std::span<const T> row, std::size_t k) {
    std::vector<std::int32_t> order(row.size());
    std::iota(order.begin(), order.end(), 0);
    auto better = [&row](std::int32_t a, std::int32_t b) {
        return row[a] > row[b] || (row[a] == row[b] && a < b);
    };
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(), better);
    order.resize(k);
    return order;
}

template <typename T>
TopK<T> topk(const Tensor<T>& x, std::size_t k) {
    auto [rows, cols] = detail::rows_cols("topk", x);
    if (k == 0 || k > cols) {
        detail::shape_fail("topk", "k=" + std::to_string(k) + " invalid for last extent " + std::to_string(cols));
    }
    std::vector<std::int32_t> indices;
    indices.reserve(rows * k);
    for (std::size_t r = 0; r < rows; ++r) {
        auto top = topk_indices(x.data().subspan(r * cols, cols), k);
        indices.insert(indices.end(), top.begin(), top.end());
    }
    // values[r, j] = x[r, indices[r, j]], differentiable like a gather
    std::vector<T> vals(rows * k);
    for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < k; ++j) {
            vals[r * k + j] = x.data()[r * cols + indices[r * k + j]];
        }
    }
    Shape shape(x.shape());
    shape.back() = k;
    auto values = make_op<T>("topk", std::move(shape), std::move(vals), {x}, [indices, rows, cols, k](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
            for (std::size_t j = 0; j < k; ++j) {
                (*g)[r * cols + indices[r * k + j]] += o.grad[r * k + j];
            }
        }
    });
    return {std::move(values), std::move(indices)};
}

// ----------------------------- normalization -----------------------------

template <typename T>
Tensor<T> softmax(const Tensor<T>& x) {
    auto [rows, cols] = detail::rows_cols("softmax", x);
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = x.data().subspan(r * cols, cols);
        T mx = *std::max_element(row.begin(), row.end());
        T z{0};
        for (std::size_t j = 0; j < cols; ++j) {
            out[r * cols + j] = std::exp(row[j] - mx);
            z += out[r * cols + j];
        }
        for (std::size_t j = 0; j < cols; ++j) {
            out[r * cols + j] /= z;
        }
    }
    return make_op<T>("softmax", x.shape(), std::move(out), {x}, [rows, cols](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
            T dot{0};
            for (std::size_t j = 0; j < cols; ++j) dot += o.grad[r * cols + j] * o.data[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j) {
                (*g)[r * cols + j] += o.data[r * cols + j] * (o.grad[r * cols + j] - dot);
            }
        }
    });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& x) {
    auto [rows, cols] = detail::rows_cols("log_softmax", x);
    std::vector<T> out(x.numel());
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = x.data().subspan(r * cols, cols);
        T mx = *std::max_element(row.begin(), row.end());
        T z{0};
        for (std::size_t j = 0; j < cols; ++j) z += std::exp(row[j] - mx);
        T lse = mx + std::log(z);
        for (std::size_t j = 0; j < cols; ++j) out[r * cols + j] = row[j] - lse;
    }
    return make_op<T>("log_softmax", x.shape(), std::move(out), {x}, [rows, cols](Node<T>& o) {
        auto* g = detail::parent_grad(o, 0);
        if (!g) return;
        for (std::size_t r = 0; r < rows; ++r) {
            T s{0};
            for (std::size_t j = 0; j < cols; ++j) s += o.grad[r * cols + j];
            for (std::size_t j = 0; j < cols; ++j) {
                (*g)[r * cols + j] += o.grad[r * cols + j] - std::exp(o.data[r * cols + j]) * s;
            }
        }
    });
}

/// Normalizes over the last axis, then applies gain[D] and shift[D].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift, T eps = T(1e-5)) {
    auto [rows, cols] = detail::rows_cols("layer_norm", x);
    if (gain.numel() != cols || shift.numel() != cols) {
        detail::shape_fail("layer_norm", "affine params " + shape_str(gain.shape()) + "/" + shape_str(shift.shape()) +
                                             " vs input " + shape_str(x.shape()));
    }
    std::vector<T> out(x.numel());
    std::vector<T> xhat(x.numel());
    std::vector<T> inv_std(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        auto row = x.data().subspan(r * cols, cols);
        T mu{0};
        for (T v : row) mu += v;
        mu /= static_cast<T>(cols);
        T var{0};
        for (T v : row) var += (v - mu) * (v - mu);
        var /= static_cast<T>(cols);
        inv_std[r] = T{1} / std::sqrt(var + eps);
        for (std::size_t j = 0; j < cols; ++j) {
            xhat[r * cols + j] = (row[j] - mu) * inv_std[r];
            out[r * cols + j] = xhat[r * cols + j] * gain.data()[j] + shift.data()[j];
        }
    }
    return make_op<T>("layer_norm", x.shape(), std::move(out), {x, gain, shift},
                      [rows, cols, xhat = std::move(xhat), inv_std = std::move(inv_std)](Node<T>& o) {
                          const auto& gamma = o.parents[1]->data;
                          auto* gx = detail::parent_grad(o, 0);
                          auto* gg = detail::parent_grad(o, 1);
                          auto* gb = detail::parent_grad(o, 2);
                          for (std::size_t r = 0; r < rows; ++r) {
                              T mean_d{0}, mean_dx{0};
                              for (std::size_t j = 0; j < cols; ++j) {
                                  std::size_t i = r * cols + j;
                                  T d = o.grad[i] * gamma[j];
                                  mean_d += d;
                                  mean_dx += d * xhat[i];
                                  if (gg) (*gg)[j] += o.grad[i] * xhat[i];
                                  if (gb) (*gb)[j] += o.grad[i];
                              }
                              if (!gx) continue;
                              mean_d /= static_cast<T>(cols);
                              mean_dx /= static_cast<T>(cols);
                              for (std::size_t j = 0; j < cols; ++j) {
                                  std::size_t i = r * cols + j;
                                  T d = o.grad[i] * gamma[j];
                                  (*gx)[i] += inv_std[r] * (d - mean_d - xhat[i] * mean_dx);
                              }
                          }
                      });
}

// ----------------------------- attention / regularization -----------------------------

/// Multi-head causal self-attention over packed projections.
/// qkv: [T x 3D] laid out as [q | k | v]; returns [T x D]. Row t attends to rows <= t.
template <typename T>
Tensor<T> causal_self_attention(const Tensor<T>& qkv, std::size_t n_heads) {
    detail::expect_rank("causal_self_attention", qkv, 2);
    const std::size_t len = qkv.size(0);
    if (n_heads == 0 || qkv.size(1) % (3 * n_heads) != 0) {
        detail::shape_fail("causal_self_attention",
                           "width " + std::to_string(qkv.size(1)) + " not divisible into 3 x " +
                               std::to_string(n_heads) + " heads");
    }
    const std::size_t d = qkv.size(1) / 3;
    const std::size_t hd = d / n_heads;
    const std::size_t w = 3 * d;
    const T inv_sqrt = T{1} / std::sqrt(static_cast<T>(hd));
    const auto in = qkv.data();
    std::vector<T> probs(n_heads * len * len, T{0});
    std::vector<T> out(len * d, T{0});
    for (std::size_t h = 0; h < n_heads; ++h) {
        const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
        for (std::size_t i = 0; i < len; ++i) {
            T* p = &probs[(h * len + i) * len];
            T mx = -std::numeric_limits<T>::infinity();
            for (std::size_t j = 0; j <= i; ++j) {
                T s{0};
                for (std::size_t c = 0; c < hd; ++c) s += in[i * w + qo + c] * in[j * w + ko + c];
                p[j] = s * inv_sqrt;
                mx = std::max(mx, p[j]);
            }
            T z{0};
            for (std::size_t j = 0; j <= i; ++j) {
                p[j] = std::exp(p[j] - mx);
                z += p[j];
            }
            for (std::size_t j = 0; j <= i; ++j) {
                p[j] /= z;
                for (std::size_t c = 0; c < hd; ++c) out[i * d + h * hd + c] += p[j] * in[j * w + vo + c];
            }
        }
    }
    return make_op<T>(
        "causal_self_attention", {len, d}, std::move(out), {qkv},
        [len, d, hd, w, n_heads, inv_sqrt, probs = std::move(probs)](Node<T>& o) {
            auto* g = detail::parent_grad(o, 0);
            if (!g) return;
            const auto& in = o.parents[0]->data;
            std::vector<T> dp(len);
            for (std::size_t h = 0; h < n_heads; ++h) {
                const std::size_t qo = h * hd, ko = d + h * hd, vo = 2 * d + h * hd;
                for (std::size_t i = 0; i < len; ++i) {
                    const T* p = &probs[(h * len + i) * len];
                    const T* dout = &o.grad[i * d + h * hd];
                    T dot{0};
                    for (std::size_t j = 0; j <= i; ++j) {
                        T s{0};
                        for (std::size_t c = 0; c < hd; ++c) {
                            s += dout[c] * in[j * w + vo + c];
                            (*g)[j * w + vo + c] += p[j] * dout[c];
                        }
                        dp[j] = s;
                        dot += p[j] * s;
                    }
                    for (std::size_t j = 0; j <= i; ++j) {
                        T ds = p[j] * (dp[j] - dot) * inv_sqrt;
                        for (std::size_t c = 0; c < hd; ++c) {
                            (*g)[i * w + qo + c] += ds * in[j * w + ko + c];
                            (*g)[j * w + ko + c] += ds * in[i * w + qo + c];
                        }
                    }
                }
            }
        });
}

/// Inverted dropout with keep-probability 1 - p.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
    if (p <= 0.0) {
        return x;
    }
    std::vector<T> keep(x.numel());
    const T s = static_cast<T>(1.0 / (1.0 - p));
    for (auto& k : keep) k = rng.uniform() < p ? T{0} : s;
    return mul(x, Tensor<T>::from_data(x.shape(), std::move(keep)));
}

}  // namespace pcolab::ops
