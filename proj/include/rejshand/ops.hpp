#pragma once

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "rejshand/errors.hpp"
#include "rejshand/tensor.hpp"

// Differentiable forward ops. Every op takes the tape it records into; when
// no input requires a gradient (or the tape is not recording) nothing is
// recorded and the op is a plain forward computation.
namespace rejshand {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMat>;
using MutMap = Eigen::Map<RowMat>;

// C (MxN) [+]= op(A) * op(B); A is MxK (or KxM when trans_a), B is KxN (or NxK).
inline void gemm(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
    const auto M = static_cast<Eigen::Index>(m);
    const auto N = static_cast<Eigen::Index>(n);
    const auto K = static_cast<Eigen::Index>(k);
    MutMap C(c, M, N);
    if (!accumulate) C.setZero();
    if (!trans_a && !trans_b) {
        C.noalias() += ConstMap(a, M, K) * ConstMap(b, K, N);
    } else if (trans_a && !trans_b) {
        C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, K, N);
    } else if (!trans_a && trans_b) {
        C.noalias() += ConstMap(a, M, K) * ConstMap(b, N, K).transpose();
    } else {
        C.noalias() += ConstMap(a, K, M).transpose() * ConstMap(b, N, K).transpose();
    }
}

inline void require_rank(const Tensor& t, std::size_t rank, const char* op, const char* name) {
    if (t.rank() != rank) {
        throw DimensionError(std::string(op) + ": " + name + " must have rank " + std::to_string(rank) +
                             ", got " + shape_str(t.shape()));
    }
}

inline std::size_t conv_out(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t pad) {
    return (in + 2 * pad - kernel) / stride + 1;
}

// Unfold C x H x W into (C*k*k) x (Ho*Wo) patch columns.
inline void im2col(const double* x, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, double* cols) {
    const std::size_t plane = ho * wo;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                double* row = cols + ((ci * k + ky) * k + kx) * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        const bool inside = iy >= 0 && ix >= 0 && iy < static_cast<std::ptrdiff_t>(h) &&
                                            ix < static_cast<std::ptrdiff_t>(w);
                        row[oy * wo + ox] = inside ? x[(ci * h + static_cast<std::size_t>(iy)) * w +
                                                       static_cast<std::size_t>(ix)]
                                                   : 0.0;
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch columns back into C x H x W.
inline void col2im(const double* cols, std::size_t c, std::size_t h, std::size_t w, std::size_t k,
                   std::size_t stride, std::size_t pad, std::size_t ho, std::size_t wo, double* x) {
    const std::size_t plane = ho * wo;
    for (std::size_t ci = 0; ci < c; ++ci) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const double* row = cols + ((ci * k + ky) * k + kx) * plane;
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                    for (std::size_t ox = 0; ox < wo; ++ox) {
                        const auto ix =
                            static_cast<std::ptrdiff_t>(ox * stride + kx) - static_cast<std::ptrdiff_t>(pad);
                        if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                        x[(ci * h + static_cast<std::size_t>(iy)) * w + static_cast<std::size_t>(ix)] +=
                            row[oy * wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(Tape& tape, const Tensor& a, const Tensor& b) {
    detail::require_rank(a, 2, "matmul", "lhs");
    detail::require_rank(b, 2, "matmul", "rhs");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dims differ for " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
    }
    Tensor out = Tensor::zeros({m, n});
    detail::gemm(false, false, m, n, k, a.data().data(), b.data().data(), out.mutable_data().data(), false);
    if (tape.wants_grad({&a, &b})) {
        tape.record("matmul", {a, b}, out, [a, b, out, m, n, k]() mutable {
            const double* g = out.grad().data();
            if (a.requires_grad()) detail::gemm(false, true, m, k, n, g, b.data().data(), a.grad_mut().data(), true);
            if (b.requires_grad()) detail::gemm(true, false, k, n, m, a.data().data(), g, b.grad_mut().data(), true);
        });
    }
    return out;
}

/// x * W + b, row by row. `bias` may be undefined.
inline Tensor linear(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank(x, 2, "linear", "input");
    detail::require_rank(weight, 2, "linear", "weight");
    const std::size_t t = x.dim(0), cin = x.dim(1), cout = weight.dim(1);
    if (weight.dim(0) != cin) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not conform to weight " +
                             shape_str(weight.shape()));
    }
    if (bias.defined() && bias.numel() != cout) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) +
                             " outputs");
    }
    Tensor out = Tensor::zeros({t, cout});
    auto o = out.mutable_data();
    detail::gemm(false, false, t, cout, cin, x.data().data(), weight.data().data(), o.data(), false);
    if (bias.defined()) {
        const auto bv = bias.data();
        for (std::size_t r = 0; r < t; ++r)
            for (std::size_t c = 0; c < cout; ++c) o[r * cout + c] += bv[c];
    }
    if (tape.wants_grad({&x, &weight, &bias})) {
        tape.record("linear", {x, weight, bias}, out, [x, weight, bias, out, t, cin, cout]() mutable {
            const double* g = out.grad().data();
            if (x.requires_grad())
                detail::gemm(false, true, t, cin, cout, g, weight.data().data(), x.grad_mut().data(), true);
            if (weight.requires_grad())
                detail::gemm(true, false, cin, cout, t, x.data().data(), g, weight.grad_mut().data(), true);
            if (bias.defined() && bias.requires_grad()) {
                auto bg = bias.grad_mut();
                for (std::size_t r = 0; r < t; ++r)
                    for (std::size_t c = 0; c < cout; ++c) bg[c] += g[r * cout + c];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Elementwise

enum class BinaryOp { add, sub, mul };

namespace detail {

inline Tensor binary(Tape& tape, BinaryOp op, const Tensor& a, const Tensor& b) {
    const bool a_scalar = a.numel() == 1 && b.numel() != 1;
    const bool b_scalar = b.numel() == 1 && a.numel() != 1;
    if (!a_scalar && !b_scalar && a.shape() != b.shape()) {
        throw DimensionError("elementwise: incompatible shapes " + shape_str(a.shape()) + " and " +
                             shape_str(b.shape()));
    }
    const Shape& shape = a_scalar ? b.shape() : a.shape();
    const std::size_t n = shape_numel(shape);
    Tensor out = Tensor::zeros(shape);
    auto o = out.mutable_data();
    const auto av = a.data();
    const auto bv = b.data();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (op) {
            case BinaryOp::add: o[i] = x + y; break;
            case BinaryOp::sub: o[i] = x - y; break;
            case BinaryOp::mul: o[i] = x * y; break;
        }
    }
    if (tape.wants_grad({&a, &b})) {
        static constexpr const char* names[] = {"add", "sub", "mul"};
        tape.record(names[static_cast<int>(op)], {a, b}, out, [op, a, b, out, n, a_scalar, b_scalar]() mutable {
            const auto g = out.grad();
            const auto av = a.data();
            const auto bv = b.data();
            if (a.requires_grad()) {
                auto ga = a.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = op == BinaryOp::mul ? bv[b_scalar ? 0 : i] : 1.0;
                    ga[a_scalar ? 0 : i] += g[i] * d;
                }
            }
            if (b.requires_grad()) {
                auto gb = b.grad_mut();
                for (std::size_t i = 0; i < n; ++i) {
                    const double d = op == BinaryOp::mul ? av[a_scalar ? 0 : i] : (op == BinaryOp::sub ? -1.0 : 1.0);
                    gb[b_scalar ? 0 : i] += g[i] * d;
                }
            }
        });
    }
    return out;
}

// y = f(x) with dy/dx expressed through (x, y).
template <class Fwd, class Deriv>
Tensor unary(Tape& tape, const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
    Tensor out = Tensor::zeros(x.shape());
    auto o = out.mutable_data();
    const auto xv = x.data();
    for (std::size_t i = 0; i < o.size(); ++i) o[i] = fwd(xv[i]);
    if (tape.wants_grad({&x})) {
        tape.record(name, {x}, out, [x, out, deriv]() mutable {
            const auto g = out.grad();
            const auto xv = x.data();
            const auto yv = out.data();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * deriv(xv[i], yv[i]);
        });
    }
    return out;
}

}  // namespace detail

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) { return detail::binary(tape, BinaryOp::add, a, b); }
inline Tensor sub(Tape& tape, const Tensor& a, const Tensor& b) { return detail::binary(tape, BinaryOp::sub, a, b); }
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) { return detail::binary(tape, BinaryOp::mul, a, b); }

inline Tensor scale(Tape& tape, const Tensor& x, double factor) {
    return detail::unary(
        tape, "scale", x, [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add_scalar(Tape& tape, const Tensor& x, double offset) {
    return detail::unary(
        tape, "add_scalar", x, [offset](double v) { return v + offset; }, [](double, double) { return 1.0; });
}

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
    return detail::unary(
        tape, "sigmoid", x,
        [](double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); },
        [](double, double y) { return y * (1.0 - y); });
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    return detail::unary(
        tape, "relu", x, [](double v) { return v > 0 ? v : 0.0; }, [](double v, double) { return v > 0 ? 1.0 : 0.0; });
}

inline Tensor abs(Tape& tape, const Tensor& x) {
    return detail::unary(
        tape, "abs", x, [](double v) { return std::abs(v); },
        [](double v, double) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); });
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(Tape& tape, const Tensor& x) {
    double s = 0.0;
    for (double v : x.data()) s += v;
    Tensor out = Tensor::scalar(s);
    if (tape.wants_grad({&x})) {
        tape.record("sum", {x}, out, [x, out]() mutable {
            const double g = out.grad()[0];
            for (auto& v : x.grad_mut()) v += g;
        });
    }
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

/// Euclidean norm of every row of an N x D matrix, as an N x 1 column.
inline Tensor row_norms(Tape& tape, const Tensor& x) {
    detail::require_rank(x, 2, "row_norms", "input");
    const std::size_t n = x.dim(0), d = x.dim(1);
    Tensor out = Tensor::zeros({n, 1});
    auto o = out.mutable_data();
    const auto xv = x.data();
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < d; ++c) s += xv[r * d + c] * xv[r * d + c];
        o[r] = std::sqrt(s);
    }
    if (tape.wants_grad({&x})) {
        tape.record("row_norms", {x}, out, [x, out, n, d]() mutable {
            const auto g = out.grad();
            const auto xv = x.data();
            const auto nv = out.data();
            auto gx = x.grad_mut();
            for (std::size_t r = 0; r < n; ++r) {
                if (nv[r] == 0.0) continue;  // subgradient 0 at the kink
                for (std::size_t c = 0; c < d; ++c) gx[r * d + c] += g[r] * xv[r * d + c] / nv[r];
            }
        });
    }
    return out;
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (shape_numel(shape) != x.numel()) {
        throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
    }
    Tensor out = Tensor::from(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
    if (tape.wants_grad({&x})) {
        tape.record("reshape", {x}, out, [x, out]() mutable { x.accumulate_grad(out.grad()); });
    }
    return out;
}

inline Tensor transpose(Tape& tape, const Tensor& x) {
    detail::require_rank(x, 2, "transpose", "input");
    const std::size_t r = x.dim(0), c = x.dim(1);
    Tensor out = Tensor::zeros({c, r});
    auto o = out.mutable_data();
    const auto xv = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) o[j * r + i] = xv[i * c + j];
    if (tape.wants_grad({&x})) {
        tape.record("transpose", {x}, out, [x, out, r, c]() mutable {
            const auto g = out.grad();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gx[i * c + j] += g[j * r + i];
        });
    }
    return out;
}

/// Columns [begin, begin + count) of a matrix.
inline Tensor slice_cols(Tape& tape, const Tensor& x, std::size_t begin, std::size_t count) {
    detail::require_rank(x, 2, "slice_cols", "input");
    const std::size_t r = x.dim(0), c = x.dim(1);
    if (count == 0 || begin + count > c) {
        throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(begin + count) +
                             ") out of " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({r, count});
    auto o = out.mutable_data();
    const auto xv = x.data();
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < count; ++j) o[i * count + j] = xv[i * c + begin + j];
    if (tape.wants_grad({&x})) {
        tape.record("slice_cols", {x}, out, [x, out, r, c, begin, count]() mutable {
            const auto g = out.grad();
            auto gx = x.grad_mut();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < count; ++j) gx[i * c + begin + j] += g[i * count + j];
        });
    }
    return out;
}

/// Horizontal concatenation of matrices with equal row counts.
inline Tensor concat_cols(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_cols: no inputs");
    const std::size_t r = parts.front().dim(0);
    std::size_t total = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_cols", "part");
        if (p.dim(0) != r) {
            throw DimensionError("concat_cols: row counts differ, " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        total += p.dim(1);
    }
    Tensor out = Tensor::zeros({r, total});
    auto o = out.mutable_data();
    std::size_t off = 0;
    for (const auto& p : parts) {
        const std::size_t c = p.dim(1);
        const auto pv = p.data();
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) o[i * total + off + j] = pv[i * c + j];
        off += c;
    }
    bool any = false;
    for (const auto& p : parts) any = any || tape.wants_grad({&p});
    if (any) {
        tape.record("concat_cols", parts, out, [parts, out, r, total]() mutable {
            const auto g = out.grad();
            std::size_t off = 0;
            for (auto& p : parts) {
                const std::size_t c = p.dim(1);
                if (p.requires_grad()) {
                    auto gp = p.grad_mut();
                    for (std::size_t i = 0; i < r; ++i)
                        for (std::size_t j = 0; j < c; ++j) gp[i * c + j] += g[i * total + off + j];
                }
                off += c;
            }
        });
    }
    return out;
}

/// Vertical concatenation of matrices with equal column counts.
inline Tensor concat_rows(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t c = parts.front().dim(1);
    std::size_t rows = 0;
    for (const auto& p : parts) {
        detail::require_rank(p, 2, "concat_rows", "part");
        if (p.dim(1) != c) {
            throw DimensionError("concat_rows: column counts differ, " + shape_str(parts.front().shape()) + " vs " +
                                 shape_str(p.shape()));
        }
        rows += p.dim(0);
    }
    std::vector<double> data;
    data.reserve(rows * c);
    for (const auto& p : parts) data.insert(data.end(), p.data().begin(), p.data().end());
    Tensor out = Tensor::from({rows, c}, std::move(data));
    bool any = false;
    for (const auto& p : parts) any = any || tape.wants_grad({&p});
    if (any) {
        tape.record("concat_rows", parts, out, [parts, out]() mutable {
            const auto g = out.grad();
            std::size_t off = 0;
            for (auto& p : parts) {
                if (p.requires_grad()) p.accumulate_grad(g.subspan(off, p.numel()));
                off += p.numel();
            }
        });
    }
    return out;
}

/// Rows of `x` picked by `indices` (repeats allowed); gradient scatter-adds.
inline Tensor gather_rows(Tape& tape, const Tensor& x, const std::vector<std::size_t>& indices) {
    detail::require_rank(x, 2, "gather_rows", "input");
    const std::size_t n = x.dim(0), c = x.dim(1);
    if (indices.empty()) throw ContractError("gather_rows: empty index list");
    for (auto i : indices) {
        if (i >= n) throw DimensionError("gather_rows: index " + std::to_string(i) + " out of " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({indices.size(), c});
    auto o = out.mutable_data();
    const auto xv = x.data();
    for (std::size_t r = 0; r < indices.size(); ++r)
        std::copy_n(xv.begin() + static_cast<std::ptrdiff_t>(indices[r] * c), c, o.begin() + static_cast<std::ptrdiff_t>(r * c));
    if (tape.wants_grad({&x})) {
        tape.record("gather_rows", {x}, out, [x, out, indices, c]() mutable {
            const auto g = out.grad();
            auto gx = x.grad_mut();
            for (std::size_t r = 0; r < indices.size(); ++r)
                for (std::size_t j = 0; j < c; ++j) gx[indices[r] * c + j] += g[r * c + j];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolutions

/// Cross-correlation of C x H x W input with Cout x Cin x k x k kernels.
inline Tensor conv2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t stride,
                     std::size_t padding) {
    detail::require_rank(x, 3, "conv2d", "input");
    detail::require_rank(weight, 4, "conv2d", "weight");
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = weight.dim(0), k = weight.dim(2);
    if (weight.dim(1) != cin || weight.dim(3) != k) {
        throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " for input " + shape_str(x.shape()));
    }
    if (stride == 0) throw DimensionError("conv2d: stride must be >= 1");
    if (h + 2 * padding < k || w + 2 * padding < k) {
        throw DimensionError("conv2d: kernel " + std::to_string(k) + " exceeds padded input " + shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != cout) throw DimensionError("conv2d: bias " + shape_str(bias.shape()));
    const std::size_t ho = detail::conv_out(h, k, stride, padding);
    const std::size_t wo = detail::conv_out(w, k, stride, padding);
    const std::size_t patch = cin * k * k, plane = ho * wo;

    auto cols = std::make_shared<std::vector<double>>(patch * plane);
    detail::im2col(x.data().data(), cin, h, w, k, stride, padding, ho, wo, cols->data());
    Tensor out = Tensor::zeros({cout, ho, wo});
    auto o = out.mutable_data();
    detail::gemm(false, false, cout, plane, patch, weight.data().data(), cols->data(), o.data(), false);
    if (bias.defined()) {
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t p = 0; p < plane; ++p) o[co * plane + p] += bias[co];
    }
    if (tape.wants_grad({&x, &weight, &bias})) {
        tape.record("conv2d", {x, weight, bias}, out,
                    [=, x = x, weight = weight, bias = bias, out = out]() mutable {
                        const double* g = out.grad().data();
                        if (weight.requires_grad())
                            detail::gemm(false, true, cout, patch, plane, g, cols->data(), weight.grad_mut().data(),
                                         true);
                        if (bias.defined() && bias.requires_grad()) {
                            auto gb = bias.grad_mut();
                            for (std::size_t co = 0; co < cout; ++co)
                                for (std::size_t p = 0; p < plane; ++p) gb[co] += g[co * plane + p];
                        }
                        if (x.requires_grad()) {
                            std::vector<double> dcols(patch * plane);
                            detail::gemm(true, false, patch, plane, cout, weight.data().data(), g, dcols.data(), false);
                            detail::col2im(dcols.data(), cin, h, w, k, stride, padding, ho, wo, x.grad_mut().data());
                        }
                    });
    }
    return out;
}

/// Transposed convolution (no padding): Cin x H x W with Cin x Cout x k x k
/// kernels gives Cout x ((H-1)*stride + k) x ((W-1)*stride + k). It is the
/// adjoint of conv2d with the same kernel and stride.
inline Tensor conv_transpose2d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias,
                               std::size_t stride) {
    detail::require_rank(x, 3, "conv_transpose2d", "input");
    detail::require_rank(weight, 4, "conv_transpose2d", "weight");
    if (stride == 0) throw DimensionError("conv_transpose2d: stride must be >= 1");
    const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
    const std::size_t cout = weight.dim(1), k = weight.dim(2);
    if (weight.dim(0) != cin || weight.dim(3) != k) {
        throw DimensionError("conv_transpose2d: weight " + shape_str(weight.shape()) + " for input " +
                             shape_str(x.shape()));
    }
    if (bias.defined() && bias.numel() != cout) throw DimensionError("conv_transpose2d: bias " + shape_str(bias.shape()));
    const std::size_t ho = (h - 1) * stride + k, wo = (w - 1) * stride + k;
    const std::size_t patch = cout * k * k, plane = h * w;

    // cols (Cout*k*k x H*W) = W^T x; folding the columns produces the output.
    std::vector<double> cols(patch * plane);
    detail::gemm(true, false, patch, plane, cin, weight.data().data(), x.data().data(), cols.data(), false);
    Tensor out = Tensor::zeros({cout, ho, wo});
    auto o = out.mutable_data();
    detail::col2im(cols.data(), cout, ho, wo, k, stride, 0, h, w, o.data());
    if (bias.defined()) {
        for (std::size_t co = 0; co < cout; ++co)
            for (std::size_t p = 0; p < ho * wo; ++p) o[co * ho * wo + p] += bias[co];
    }
    if (tape.wants_grad({&x, &weight, &bias})) {
        tape.record("conv_transpose2d", {x, weight, bias}, out,
                    [=, x = x, weight = weight, bias = bias, out = out]() mutable {
                        const double* g = out.grad().data();
                        std::vector<double> gcols(patch * plane);
                        detail::im2col(g, cout, ho, wo, k, stride, 0, h, w, gcols.data());
                        if (x.requires_grad())
                            detail::gemm(false, false, cin, plane, patch, weight.data().data(), gcols.data(),
                                         x.grad_mut().data(), true);
                        if (weight.requires_grad())
                            detail::gemm(false, true, cin, patch, plane, x.data().data(), gcols.data(),
                                         weight.grad_mut().data(), true);
                        if (bias.defined() && bias.requires_grad()) {
                            auto gb = bias.grad_mut();
                            for (std::size_t co = 0; co < cout; ++co)
                                for (std::size_t p = 0; p < ho * wo; ++p) gb[co] += g[co * ho * wo + p];
                        }
                    });
    }
    return out;
}

/// Depthwise 1D cross-correlation along the token axis of a T x C matrix.
/// `weight` is C x k (one kernel per channel), `bias` is C (may be undefined).
inline Tensor conv1d(Tape& tape, const Tensor& x, const Tensor& weight, const Tensor& bias, std::size_t padding) {
    detail::require_rank(x, 2, "conv1d", "input");
    detail::require_rank(weight, 2, "conv1d", "weight");
    const std::size_t t = x.dim(0), c = x.dim(1), k = weight.dim(1);
    if (weight.dim(0) != c) {
        throw DimensionError("conv1d: weight " + shape_str(weight.shape()) + " for input " + shape_str(x.shape()));
    }
    if (k > t + 2 * padding) {
        throw DimensionError("conv1d: kernel " + std::to_string(k) + " longer than padded sequence of " +
                             std::to_string(t + 2 * padding));
    }
    if (t + 2 * padding - k + 1 != t) {
        throw DimensionError("conv1d: padding " + std::to_string(padding) + " does not preserve " +
                             std::to_string(t) + " tokens for kernel " + std::to_string(k));
    }
    if (bias.defined() && bias.numel() != c) throw DimensionError("conv1d: bias " + shape_str(bias.shape()));
    Tensor out = Tensor::zeros({t, c});
    auto o = out.mutable_data();
    const auto xv = x.data();
    const auto wv = weight.data();
    for (std::size_t i = 0; i < t; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = bias.defined() ? bias[ch] : 0.0;
            for (std::size_t j = 0; j < k; ++j) {
                const auto src = static_cast<std::ptrdiff_t>(i + j) - static_cast<std::ptrdiff_t>(padding);
                if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
                s += wv[ch * k + j] * xv[static_cast<std::size_t>(src) * c + ch];
            }
            o[i * c + ch] = s;
        }
    }
    if (tape.wants_grad({&x, &weight, &bias})) {
        tape.record("conv1d", {x, weight, bias}, out, [=, x = x, weight = weight, bias = bias, out = out]() mutable {
            const auto g = out.grad();
            const auto xv = x.data();
            const auto wv = weight.data();
            std::span<double> gx, gw, gb;
            if (x.requires_grad()) gx = x.grad_mut();
            if (weight.requires_grad()) gw = weight.grad_mut();
            if (bias.defined() && bias.requires_grad()) gb = bias.grad_mut();
            for (std::size_t i = 0; i < t; ++i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double gi = g[i * c + ch];
                    if (!gb.empty()) gb[ch] += gi;
                    for (std::size_t j = 0; j < k; ++j) {
                        const auto src = static_cast<std::ptrdiff_t>(i + j) - static_cast<std::ptrdiff_t>(padding);
                        if (src < 0 || src >= static_cast<std::ptrdiff_t>(t)) continue;
                        const auto s = static_cast<std::size_t>(src);
                        if (!gw.empty()) gw[ch * k + j] += gi * xv[s * c + ch];
                        if (!gx.empty()) gx[s * c + ch] += gi * wv[ch * k + j];
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Normalization

/// Numerically stabilized softmax along `axis`.
inline Tensor softmax(Tape& tape, const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis " + std::to_string(axis) + " for " + shape_str(x.shape()));
    const auto& s = x.shape();
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t n = s[axis];
    Tensor out = Tensor::zeros(s);
    auto o = out.mutable_data();
    const auto xv = x.data();
    for (std::size_t a = 0; a < outer; ++a) {
        for (std::size_t b = 0; b < inner; ++b) {
            const std::size_t base = a * n * inner + b;
            double mx = xv[base];
            for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, xv[base + i * inner]);
            double z = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                o[base + i * inner] = std::exp(xv[base + i * inner] - mx);
                z += o[base + i * inner];
            }
            for (std::size_t i = 0; i < n; ++i) o[base + i * inner] /= z;
        }
    }
    if (tape.wants_grad({&x})) {
        tape.record("softmax", {x}, out, [x, out, outer, inner, n]() mutable {
            const auto g = out.grad();
            const auto y = out.data();
            auto gx = x.grad_mut();
            for (std::size_t a = 0; a < outer; ++a) {
                for (std::size_t b = 0; b < inner; ++b) {
                    const std::size_t base = a * n * inner + b;
                    double dot = 0.0;
                    for (std::size_t i = 0; i < n; ++i) dot += g[base + i * inner] * y[base + i * inner];
                    for (std::size_t i = 0; i < n; ++i)
                        gx[base + i * inner] += y[base + i * inner] * (g[base + i * inner] - dot);
                }
            }
        });
    }
    return out;
}

inline constexpr double kLayerNormEps = 1e-5;

/// Per-row standardization (biased variance, eps 1e-5) followed by gain/shift.
inline Tensor layer_norm(Tape& tape, const Tensor& x, const Tensor& gain, const Tensor& shift) {
    detail::require_rank(x, 2, "layer_norm", "input");
    const std::size_t t = x.dim(0), c = x.dim(1);
    if (gain.numel() != c || shift.numel() != c) {
        throw DimensionError("layer_norm: gain/shift " + shape_str(gain.shape()) + "/" + shape_str(shift.shape()) +
                             " for input " + shape_str(x.shape()));
    }
    Tensor out = Tensor::zeros({t, c});
    auto o = out.mutable_data();
    const auto xv = x.data();
    auto xhat = std::make_shared<std::vector<double>>(t * c);
    auto inv_std = std::make_shared<std::vector<double>>(t);
    for (std::size_t r = 0; r < t; ++r) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xv[r * c + j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xv[r * c + j] - mu) * (xv[r * c + j] - mu);
        var /= static_cast<double>(c);
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        (*inv_std)[r] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const double h = (xv[r * c + j] - mu) * is;
            (*xhat)[r * c + j] = h;
            o[r * c + j] = h * gain[j] + shift[j];
        }
    }
    if (tape.wants_grad({&x, &gain, &shift})) {
        tape.record("layer_norm", {x, gain, shift}, out,
                    [x, gain, shift, out, xhat, inv_std, t, c]() mutable {
                        const auto g = out.grad();
                        std::span<double> gx, gg, gs;
                        if (x.requires_grad()) gx = x.grad_mut();
                        if (gain.requires_grad()) gg = gain.grad_mut();
                        if (shift.requires_grad()) gs = shift.grad_mut();
                        const auto& h = *xhat;
                        for (std::size_t r = 0; r < t; ++r) {
                            double m1 = 0.0, m2 = 0.0;
                            for (std::size_t j = 0; j < c; ++j) {
                                const double gh = g[r * c + j] * gain[j];
                                m1 += gh;
                                m2 += gh * h[r * c + j];
                                if (!gg.empty()) gg[j] += g[r * c + j] * h[r * c + j];
                                if (!gs.empty()) gs[j] += g[r * c + j];
                            }
                            if (gx.empty()) continue;
                            m1 /= static_cast<double>(c);
                            m2 /= static_cast<double>(c);
                            for (std::size_t j = 0; j < c; ++j) {
                                const double gh = g[r * c + j] * gain[j];
                                gx[r * c + j] += (*inv_std)[r] * (gh - m1 - h[r * c + j] * m2);
                            }
                        }
                    });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sampling

namespace detail {

struct Tap {
    std::size_t i0, i1;  // neighbouring pixel indices along one axis
    double frac;         // weight of i1
    double dpos;         // d(pixel position)/d(normalized coordinate); 0 where clamped
};

// Align-corners mapping: -1 -> centre of pixel 0, +1 -> centre of pixel n-1.
// Out-of-range coordinates clamp to the border.
inline Tap sample_tap(double coord, std::size_t n) {
    double dpos = (static_cast<double>(n) - 1.0) / 2.0;
    if (coord < -1.0) {
        coord = -1.0;
        dpos = 0.0;
    } else if (coord > 1.0) {
        coord = 1.0;
        dpos = 0.0;
    }
    if (n == 1) return {0, 0, 0.0, 0.0};
    const double pos = (coord + 1.0) * 0.5 * (static_cast<double>(n) - 1.0);
    auto i0 = static_cast<std::size_t>(std::floor(pos));
    i0 = std::min(i0, n - 2);
    return {i0, i0 + 1, pos - static_cast<double>(i0), dpos};
}

}  // namespace detail

/// Bilinear lookup of a C x H x W map at T normalized (u, v) coordinates in
/// [-1, 1]; u runs along W, v along H. Returns T x C.
inline Tensor grid_sample_bilinear(Tape& tape, const Tensor& fmap, const Tensor& coords) {
    detail::require_rank(fmap, 3, "grid_sample_bilinear", "feature map");
    detail::require_rank(coords, 2, "grid_sample_bilinear", "coords");
    if (coords.dim(1) != 2) throw DimensionError("grid_sample_bilinear: coords must be T x 2, got " + shape_str(coords.shape()));
    const std::size_t c = fmap.dim(0), h = fmap.dim(1), w = fmap.dim(2), t = coords.dim(0);
    for (double v : coords.data()) {
        if (!std::isfinite(v)) throw ContractError("grid_sample_bilinear: non-finite coordinate");
    }
    Tensor out = Tensor::zeros({t, c});
    auto o = out.mutable_data();
    const auto f = fmap.data();
    const auto cv = coords.data();
    const std::size_t plane = h * w;
    for (std::size_t i = 0; i < t; ++i) {
        const auto tx = detail::sample_tap(cv[2 * i], w);
        const auto ty = detail::sample_tap(cv[2 * i + 1], h);
        const double w00 = (1 - ty.frac) * (1 - tx.frac), w01 = (1 - ty.frac) * tx.frac;
        const double w10 = ty.frac * (1 - tx.frac), w11 = ty.frac * tx.frac;
        for (std::size_t ch = 0; ch < c; ++ch) {
            const double* p = f.data() + ch * plane;
            o[i * c + ch] = w00 * p[ty.i0 * w + tx.i0] + w01 * p[ty.i0 * w + tx.i1] + w10 * p[ty.i1 * w + tx.i0] +
                            w11 * p[ty.i1 * w + tx.i1];
        }
    }
    if (tape.wants_grad({&fmap, &coords})) {
        tape.record("grid_sample_bilinear", {fmap, coords}, out, [=, fmap = fmap, coords = coords, out = out]() mutable {
            const auto g = out.grad();
            const auto f = fmap.data();
            const auto cv = coords.data();
            std::span<double> gf, gc;
            if (fmap.requires_grad()) gf = fmap.grad_mut();
            if (coords.requires_grad()) gc = coords.grad_mut();
            for (std::size_t i = 0; i < t; ++i) {
                const auto tx = detail::sample_tap(cv[2 * i], w);
                const auto ty = detail::sample_tap(cv[2 * i + 1], h);
                const double w00 = (1 - ty.frac) * (1 - tx.frac), w01 = (1 - ty.frac) * tx.frac;
                const double w10 = ty.frac * (1 - tx.frac), w11 = ty.frac * tx.frac;
                double du = 0.0, dv = 0.0;
                for (std::size_t ch = 0; ch < c; ++ch) {
                    const double gi = g[i * c + ch];
                    const std::size_t base = ch * plane;
                    const double p00 = f[base + ty.i0 * w + tx.i0], p01 = f[base + ty.i0 * w + tx.i1];
                    const double p10 = f[base + ty.i1 * w + tx.i0], p11 = f[base + ty.i1 * w + tx.i1];
                    if (!gf.empty()) {
                        gf[base + ty.i0 * w + tx.i0] += gi * w00;
                        gf[base + ty.i0 * w + tx.i1] += gi * w01;
                        gf[base + ty.i1 * w + tx.i0] += gi * w10;
                        gf[base + ty.i1 * w + tx.i1] += gi * w11;
                    }
                    du += gi * ((1 - ty.frac) * (p01 - p00) + ty.frac * (p11 - p10));
                    dv += gi * ((1 - tx.frac) * (p10 - p00) + tx.frac * (p11 - p01));
                }
                if (!gc.empty()) {
                    gc[2 * i] += du * tx.dpos;
                    gc[2 * i + 1] += dv * ty.dpos;
                }
            }
        });
    }
    return out;
}

}  // namespace rejshand
