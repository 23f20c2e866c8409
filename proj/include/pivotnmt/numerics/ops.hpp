#pragma once

#include <Eigen/Core>
#include <cmath>
#include <limits>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "pivotnmt/numerics/rng.hpp"
#include "pivotnmt/numerics/tensor.hpp"

// Differentiable primitives. Matrix-shaped ops view their inputs as
// [rows, cols] with every leading axis flattened into rows.

namespace pivotnmt::nn {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// Logit assigned to tokens a model may never emit. exp() of it underflows to
// exactly 0 in double precision, while staying finite for arithmetic.
inline constexpr double kBlockedLogit = -1.0e4;

namespace detail {

inline bool tracked(const Node& n, std::size_t i) { return n.parents[i]->requires_grad; }
inline Buffer& pgrad(Node& n, std::size_t i) { return n.parents[i]->grad; }
inline const Buffer& pvalue(const Node& n, std::size_t i) { return n.parents[i]->value; }

inline void require_rank2(const char* op, const Tensor& t) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(t.shape()));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                             shape_str(b.shape()));
    }
}

inline void require_finite(const char* op, std::span<const double> v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": non-finite input");
    }
}

}  // namespace detail

// ---------------------------------------------------------------- linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
    detail::require_rank2("matmul", a);
    detail::require_rank2("matmul", b);
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    }
    Buffer out(m * n);
    MatrixMap(out.data(), m, n).noalias() =
        ConstMatrixMap(a.data().data(), m, k) * ConstMatrixMap(b.data().data(), k, n);
    return detail::make_result({m, n}, std::move(out), {a, b}, [m, k, n](Node& self) {
        ConstMatrixMap gy(self.grad.data(), m, n);
        if (detail::tracked(self, 0)) {
            MatrixMap(detail::pgrad(self, 0).data(), m, k).noalias() +=
                gy * ConstMatrixMap(detail::pvalue(self, 1).data(), k, n).transpose();
        }
        if (detail::tracked(self, 1)) {
            MatrixMap(detail::pgrad(self, 1).data(), k, n).noalias() +=
                ConstMatrixMap(detail::pvalue(self, 0).data(), m, k).transpose() * gy;
        }
    });
}

// x [m,k] times weight [k,n] plus bias [n].
inline Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
    detail::require_rank2("linear", weight);
    const std::size_t k = weight.dim(0), n = weight.dim(1);
    if (x.cols() != k) {
        throw DimensionError("linear: input " + shape_str(x.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    if (bias.size() != n) {
        throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                             shape_str(weight.shape()));
    }
    const std::size_t m = x.rows();
    Buffer out(m * n);
    MatrixMap y(out.data(), m, n);
    y.noalias() = ConstMatrixMap(x.data().data(), m, k) * ConstMatrixMap(weight.data().data(), k, n);
    y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), n);
    Shape shape = x.shape();
    shape.back() = n;
    return detail::make_result(std::move(shape), std::move(out), {x, weight, bias}, [m, k, n](Node& self) {
        ConstMatrixMap gy(self.grad.data(), m, n);
        if (detail::tracked(self, 0)) {
            MatrixMap(detail::pgrad(self, 0).data(), m, k).noalias() +=
                gy * ConstMatrixMap(detail::pvalue(self, 1).data(), k, n).transpose();
        }
        if (detail::tracked(self, 1)) {
            MatrixMap(detail::pgrad(self, 1).data(), k, n).noalias() +=
                ConstMatrixMap(detail::pvalue(self, 0).data(), m, k).transpose() * gy;
        }
        if (detail::tracked(self, 2)) {
            Eigen::Map<Eigen::RowVectorXd>(detail::pgrad(self, 2).data(), n) += gy.colwise().sum();
        }
    });
}

// ---------------------------------------------------------------- elementwise

// Same-shape sum, or a [n] vector broadcast over the rows of an [m,n] matrix.
inline Tensor add(const Tensor& a, const Tensor& b) {
    const bool broadcast = a.shape() != b.shape() && b.rank() == 1 && b.size() == a.cols();
    if (!broadcast) detail::require_same_shape("add", a, b);
    Buffer out(a.data());
    const std::size_t n = b.size();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.data()[broadcast ? i % n : i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [broadcast, n](Node& self) {
        if (detail::tracked(self, 0)) {
            auto& ga = detail::pgrad(self, 0);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
        }
        if (detail::tracked(self, 1)) {
            auto& gb = detail::pgrad(self, 1);
            for (std::size_t i = 0; i < self.grad.size(); ++i) gb[broadcast ? i % n : i] += self.grad[i];
        }
    });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
    detail::require_same_shape("multiply", a, b);
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return detail::make_result(a.shape(), std::move(out), {a, b}, [](Node& self) {
        const auto& av = detail::pvalue(self, 0);
        const auto& bv = detail::pvalue(self, 1);
        if (detail::tracked(self, 0)) {
            auto& ga = detail::pgrad(self, 0);
            for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bv[i];
        }
        if (detail::tracked(self, 1)) {
            auto& gb = detail::pgrad(self, 1);
            for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * av[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double s) {
    Buffer out(a.data());
    for (double& x : out) x *= s;
    return detail::make_result(a.shape(), std::move(out), {a}, [s](Node& self) {
        auto& ga = detail::pgrad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += s * self.grad[i];
    });
}

inline Tensor relu(const Tensor& a) {
    Buffer out(a.data());
    for (double& x : out) x = x > 0.0 ? x : 0.0;
    return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        const auto& av = detail::pvalue(self, 0);
        auto& ga = detail::pgrad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) {
            if (av[i] > 0.0) ga[i] += self.grad[i];
        }
    });
}

// Exact (erf-based) GELU.
inline Tensor gelu(const Tensor& a) {
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = a.data()[i];
        out[i] = 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2));
    }
    return detail::make_result(a.shape(), std::move(out), {a}, [](Node& self) {
        const auto& av = detail::pvalue(self, 0);
        auto& ga = detail::pgrad(self, 0);
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < ga.size(); ++i) {
            const double x = av[i];
            const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
            ga[i] += self.grad[i] * (cdf + x * inv_sqrt_2pi * std::exp(-0.5 * x * x));
        }
    });
}

// Inverted dropout. Identity (the same tensor) when not training or rate is 0.
inline Tensor dropout(const Tensor& a, double rate, Rng& rng, bool training) {
    if (!training || rate <= 0.0) return a;
    if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
    const double keep_scale = 1.0 / (1.0 - rate);
    Buffer mask(a.size());
    Buffer out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        mask[i] = rng.uniform() < rate ? 0.0 : keep_scale;
        out[i] = a.data()[i] * mask[i];
    }
    return detail::make_result(a.shape(), std::move(out), {a}, [mask = std::move(mask)](Node& self) {
        auto& ga = detail::pgrad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * mask[i];
    });
}

// ---------------------------------------------------------------- reductions

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double x : a.data()) s += x;
    return detail::make_result({1}, {s}, {a}, [](Node& self) {
        auto& ga = detail::pgrad(self, 0);
        for (double& g : ga) g += self.grad[0];
    });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

// Scalar sum_i weights[i] * a[i] with constant weights.
inline Tensor weighted_sum(const Tensor& a, std::span<const double> weights) {
    if (weights.size() != a.size()) {
        throw DimensionError("weighted_sum: " + std::to_string(weights.size()) + " weights for tensor " +
                             shape_str(a.shape()));
    }
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += weights[i] * a.data()[i];
    return detail::make_result({1}, {s}, {a}, [w = Buffer(weights.begin(), weights.end())](Node& self) {
        auto& ga = detail::pgrad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[0] * w[i];
    });
}

// Mean over the first lengths[b] rows of each length-`stride` segment of x [batch*stride, d].
inline Tensor segment_mean(const Tensor& x, std::size_t batch, std::size_t stride,
                           std::span<const std::size_t> lengths) {
    const std::size_t d = x.cols();
    if (x.rows() != batch * stride || lengths.size() != batch) {
        throw DimensionError("segment_mean: input " + shape_str(x.shape()) + " is not " + std::to_string(batch) +
                             " segments of " + std::to_string(stride) + " rows");
    }
    Buffer out(batch * d, 0.0);
    for (std::size_t b = 0; b < batch; ++b) {
        if (lengths[b] == 0 || lengths[b] > stride) throw DimensionError("segment_mean: bad segment length");
        const double inv = 1.0 / static_cast<double>(lengths[b]);
        for (std::size_t t = 0; t < lengths[b]; ++t) {
            const double* row = x.data().data() + (b * stride + t) * d;
            for (std::size_t j = 0; j < d; ++j) out[b * d + j] += row[j] * inv;
        }
    }
    return detail::make_result({batch, d}, std::move(out), {x},
                               [batch, stride, d, lens = std::vector<std::size_t>(lengths.begin(), lengths.end())](
                                   Node& self) {
                                   auto& gx = detail::pgrad(self, 0);
                                   for (std::size_t b = 0; b < batch; ++b) {
                                       const double inv = 1.0 / static_cast<double>(lens[b]);
                                       for (std::size_t t = 0; t < lens[b]; ++t) {
                                           double* row = gx.data() + (b * stride + t) * d;
                                           for (std::size_t j = 0; j < d; ++j) row[j] += self.grad[b * d + j] * inv;
                                       }
                                   }
                               });
}

// ---------------------------------------------------------------- normalisation

inline Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps = 1e-5) {
    const std::size_t n = x.cols(), m = x.rows();
    if (gain.size() != n || bias.size() != n) {
        throw DimensionError("layer-norm: input " + shape_str(x.shape()) + " vs gain " + shape_str(gain.shape()) +
                             " / bias " + shape_str(bias.shape()));
    }
    Buffer out(m * n), xhat(m * n), rstd(m);
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = x.data().data() + r * n;
        double mu = 0.0;
        for (std::size_t j = 0; j < n; ++j) mu += xr[j];
        mu /= static_cast<double>(n);
        double var = 0.0;
        for (std::size_t j = 0; j < n; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<double>(n);
        rstd[r] = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < n; ++j) {
            const double h = (xr[j] - mu) * rstd[r];
            xhat[r * n + j] = h;
            out[r * n + j] = h * gain.data()[j] + bias.data()[j];
        }
    }
    return detail::make_result(
        x.shape(), std::move(out), {x, gain, bias},
        [m, n, xhat = std::move(xhat), rstd = std::move(rstd)](Node& self) {
            const auto& g = detail::pvalue(self, 1);
            const bool tx = detail::tracked(self, 0), tg = detail::tracked(self, 1), tb = detail::tracked(self, 2);
            Buffer dxhat(n);
            for (std::size_t r = 0; r < m; ++r) {
                const double* gy = self.grad.data() + r * n;
                const double* h = xhat.data() + r * n;
                if (tg) {
                    auto& gg = detail::pgrad(self, 1);
                    for (std::size_t j = 0; j < n; ++j) gg[j] += gy[j] * h[j];
                }
                if (tb) {
                    auto& gb = detail::pgrad(self, 2);
                    for (std::size_t j = 0; j < n; ++j) gb[j] += gy[j];
                }
                if (tx) {
                    double mean_d = 0.0, mean_dh = 0.0;
                    for (std::size_t j = 0; j < n; ++j) {
                        dxhat[j] = gy[j] * g[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * h[j];
                    }
                    mean_d /= static_cast<double>(n);
                    mean_dh /= static_cast<double>(n);
                    double* gx = detail::pgrad(self, 0).data() + r * n;
                    for (std::size_t j = 0; j < n; ++j) gx[j] += rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                }
            }
        });
}

// ---------------------------------------------------------------- indexing and layout

// Rows of table [V,d] selected by ids; result [ids.size(), d].
inline Tensor embedding(const Tensor& table, std::span<const int> ids) {
    detail::require_rank2("embedding-lookup", table);
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    Buffer out(ids.size() * d);
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
            throw IndexError("embedding-lookup: id " + std::to_string(ids[i]) + " outside table " +
                             shape_str(table.shape()));
        }
        std::copy_n(table.data().data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
    }
    return detail::make_result({ids.size(), d}, std::move(out), {table},
                               [d, idx = std::vector<int>(ids.begin(), ids.end())](Node& self) {
                                   auto& gt = detail::pgrad(self, 0);
                                   for (std::size_t i = 0; i < idx.size(); ++i) {
                                       double* row = gt.data() + static_cast<std::size_t>(idx[i]) * d;
                                       const double* g = self.grad.data() + i * d;
                                       for (std::size_t j = 0; j < d; ++j) row[j] += g[j];
                                   }
                               });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (shape_numel(shape) != a.size()) {
        throw DimensionError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
    }
    return detail::make_result(std::move(shape), a.data(), {a}, [](Node& self) {
        auto& ga = detail::pgrad(self, 0);
        for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i];
    });
}

// Concatenation along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw DimensionError("concat: no inputs");
    const Shape& ref = parts[0].shape();
    if (axis >= ref.size()) throw DimensionError("concat: axis out of range for " + shape_str(ref));
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= ref[i];
    for (std::size_t i = axis + 1; i < ref.size(); ++i) inner *= ref[i];
    std::size_t total_axis = 0;
    std::vector<std::size_t> extents;
    for (const Tensor& p : parts) {
        const Shape& s = p.shape();
        bool ok = s.size() == ref.size();
        for (std::size_t i = 0; ok && i < s.size(); ++i) ok = i == axis || s[i] == ref[i];
        if (!ok) throw DimensionError("concat: shape mismatch " + shape_str(ref) + " vs " + shape_str(s));
        extents.push_back(s[axis]);
        total_axis += s[axis];
    }
    Shape out_shape = ref;
    out_shape[axis] = total_axis;
    Buffer out(outer * total_axis * inner);
    std::size_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const std::size_t chunk = extents[p] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
            std::copy_n(parts[p].data().data() + o * chunk, chunk, out.data() + o * total_axis * inner + offset);
        }
        offset += chunk;
    }
    return detail::make_result(std::move(out_shape), std::move(out), parts,
                               [outer, inner, total_axis, extents](Node& self) {
                                   std::size_t off = 0;
                                   for (std::size_t p = 0; p < extents.size(); ++p) {
                                       const std::size_t chunk = extents[p] * inner;
                                       if (detail::tracked(self, p)) {
                                           auto& gp = detail::pgrad(self, p);
                                           for (std::size_t o = 0; o < outer; ++o) {
                                               const double* src = self.grad.data() + o * total_axis * inner + off;
                                               double* dst = gp.data() + o * chunk;
                                               for (std::size_t j = 0; j < chunk; ++j) dst[j] += src[j];
                                           }
                                       }
                                       off += chunk;
                                   }
                               });
}

// Overwrites the listed columns of x [m,V] with `value`; no gradient flows there.
inline Tensor block_columns(const Tensor& x, std::span<const int> columns, double value = kBlockedLogit) {
    const std::size_t n = x.cols(), m = x.rows();
    Buffer out(x.data());
    std::vector<char> blocked(n, 0);
    for (int c : columns) {
        if (c < 0 || static_cast<std::size_t>(c) >= n) throw IndexError("block_columns: column out of range");
        blocked[static_cast<std::size_t>(c)] = 1;
    }
    for (std::size_t r = 0; r < m; ++r) {
        for (std::size_t j = 0; j < n; ++j) {
            if (blocked[j]) out[r * n + j] = value;
        }
    }
    return detail::make_result(x.shape(), std::move(out), {x}, [m, n, blocked = std::move(blocked)](Node& self) {
        auto& gx = detail::pgrad(self, 0);
        for (std::size_t r = 0; r < m; ++r) {
            for (std::size_t j = 0; j < n; ++j) {
                if (!blocked[j]) gx[r * n + j] += self.grad[r * n + j];
            }
        }
    });
}

// ---------------------------------------------------------------- softmax family

// Numerically stable softmax along `axis` (max-subtracted).
inline Tensor softmax(const Tensor& x, std::size_t axis) {
    const Shape& s = x.shape();
    if (axis >= s.size()) throw DimensionError("softmax: axis " + std::to_string(axis) + " invalid for " + shape_str(s));
    detail::require_finite("softmax", x.data());
    std::size_t outer = 1, inner = 1;
    for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
    for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
    const std::size_t len = s[axis];
    Buffer out(x.size());
    const double* xv = x.data().data();
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            double mx = -std::numeric_limits<double>::infinity();
            for (std::size_t j = 0; j < len; ++j) mx = std::max(mx, xv[base + j * inner]);
            double z = 0.0;
            for (std::size_t j = 0; j < len; ++j) z += (out[base + j * inner] = std::exp(xv[base + j * inner] - mx));
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] /= z;
        }
    }
    return detail::make_result(s, out, {x}, [outer, inner, len, y = out](Node& self) {
        auto& gx = detail::pgrad(self, 0);
        const double* gy = self.grad.data();
        for (std::size_t o = 0; o < outer; ++o) {
            for (std::size_t in = 0; in < inner; ++in) {
                const std::size_t base = o * len * inner + in;
                double dot = 0.0;
                for (std::size_t j = 0; j < len; ++j) dot += gy[base + j * inner] * y[base + j * inner];
                for (std::size_t j = 0; j < len; ++j) {
                    gx[base + j * inner] += y[base + j * inner] * (gy[base + j * inner] - dot);
                }
            }
        }
    });
}

namespace detail {

// Row-wise log-softmax of a [m,n] buffer into `out`.
inline void log_softmax_rows(const double* x, double* out, std::size_t m, std::size_t n) {
    for (std::size_t r = 0; r < m; ++r) {
        const double* xr = x + r * n;
        double mx = xr[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, xr[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) z += std::exp(xr[j] - mx);
        const double lz = mx + std::log(z);
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] = xr[j] - lz;
    }
}

}  // namespace detail

// Log-softmax over the last axis.
inline Tensor log_softmax(const Tensor& x) {
    detail::require_finite("log-softmax", x.data());
    const std::size_t m = x.rows(), n = x.cols();
    Buffer out(x.size());
    detail::log_softmax_rows(x.data().data(), out.data(), m, n);
    return detail::make_result(x.shape(), out, {x}, [m, n, lp = out](Node& self) {
        auto& gx = detail::pgrad(self, 0);
        for (std::size_t r = 0; r < m; ++r) {
            const double* gy = self.grad.data() + r * n;
            double total = 0.0;
            for (std::size_t j = 0; j < n; ++j) total += gy[j];
            for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += gy[j] - std::exp(lp[r * n + j]) * total;
        }
    });
}

// Per-row log p(target) from logits [m,V]; rows whose target equals ignore_id give 0.
inline Tensor token_log_likelihood(const Tensor& logits, std::span<const int> targets, int ignore_id) {
    const std::size_t m = logits.rows(), n = logits.cols();
    if (targets.size() != m) {
        throw DimensionError("cross-entropy: " + std::to_string(targets.size()) + " targets for logits " +
                             shape_str(logits.shape()));
    }
    detail::require_finite("cross-entropy", logits.data());
    Buffer lp(logits.size());
    detail::log_softmax_rows(logits.data().data(), lp.data(), m, n);
    Buffer out(m, 0.0);
    for (std::size_t r = 0; r < m; ++r) {
        const int t = targets[r];
        if (t == ignore_id) continue;
        if (t < 0 || static_cast<std::size_t>(t) >= n) {
            throw IndexError("cross-entropy: target id " + std::to_string(t) + " outside vocabulary of " +
                             std::to_string(n));
        }
        out[r] = lp[r * n + static_cast<std::size_t>(t)];
    }
    return detail::make_result(
        {m}, std::move(out), {logits},
        [m, n, ignore_id, lp = std::move(lp), tg = std::vector<int>(targets.begin(), targets.end())](Node& self) {
            auto& gx = detail::pgrad(self, 0);
            for (std::size_t r = 0; r < m; ++r) {
                if (tg[r] == ignore_id) continue;
                const double g = self.grad[r];
                if (g == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j) gx[r * n + j] -= g * std::exp(lp[r * n + j]);
                gx[r * n + static_cast<std::size_t>(tg[r])] += g;
            }
        });
}

// Sum over non-ignored rows of -log p(target), from logits [m,V]. Always >= 0.
inline Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_id) {
    return scale(sum(token_log_likelihood(logits, targets, ignore_id)), -1.0);
}

// ---------------------------------------------------------------- attention

// Layout of a batched multi-head attention call. Queries are [batch*query_len, d],
// keys and values [batch*key_len, d]; key_valid has batch*key_len entries.
struct AttentionLayout {
    std::size_t batch = 1;
    std::size_t query_len = 1;
    std::size_t key_len = 1;
    std::size_t heads = 1;
    std::vector<std::uint8_t> key_valid;
    bool causal = false;
};

// Fused scaled dot-product attention. Masked keys receive exactly zero weight;
// with `causal`, query i sees keys 0..i only.
inline Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, const AttentionLayout& layout) {
    const std::size_t d = q.cols();
    const std::size_t B = layout.batch, Tq = layout.query_len, Tk = layout.key_len, H = layout.heads;
    if (H == 0 || d % H != 0) throw DimensionError("attention: model dim " + std::to_string(d) + " not divisible by heads");
    if (q.rows() != B * Tq || k.rows() != B * Tk || v.rows() != B * Tk || k.cols() != d || v.cols() != d) {
        throw DimensionError("attention: q " + shape_str(q.shape()) + ", k " + shape_str(k.shape()) + ", v " +
                             shape_str(v.shape()) + " do not fit the layout");
    }
    if (!layout.key_valid.empty() && layout.key_valid.size() != B * Tk) {
        throw DimensionError("attention: key mask has wrong length");
    }
    const std::size_t dh = d / H;
    const double scale_factor = 1.0 / std::sqrt(static_cast<double>(dh));
    // Probabilities are kept for the backward pass only; inference reuses one scratch block.
    const bool keep = grad_enabled() && (q.requires_grad() || k.requires_grad() || v.requires_grad());
    Buffer probs(keep ? B * H * Tq * Tk : 0);
    RowMatrix scratch(keep ? 0 : Tq, keep ? 0 : Tk);
    Buffer out(B * Tq * d);
    RowMatrix scores(Tq, Tk);
    for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t h = 0; h < H; ++h) {
            ConstStridedMap qb(q.data().data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
            ConstStridedMap kb(k.data().data() + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
            ConstStridedMap vb(v.data().data() + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
            scores.noalias() = qb * kb.transpose();
            MatrixMap p(keep ? probs.data() + (b * H + h) * Tq * Tk : scratch.data(), Tq, Tk);
            for (std::size_t i = 0; i < Tq; ++i) {
                double mx = -std::numeric_limits<double>::infinity();
                auto allowed = [&](std::size_t j) {
                    return (layout.key_valid.empty() || layout.key_valid[b * Tk + j]) && (!layout.causal || j <= i);
                };
                for (std::size_t j = 0; j < Tk; ++j) {
                    if (allowed(j)) mx = std::max(mx, scores(i, j) * scale_factor);
                }
                if (!std::isfinite(mx)) {
                    p.row(i).setZero();
                    continue;
                }
                double z = 0.0;
                for (std::size_t j = 0; j < Tk; ++j) {
                    p(i, j) = allowed(j) ? std::exp(scores(i, j) * scale_factor - mx) : 0.0;
                    z += p(i, j);
                }
                for (std::size_t j = 0; j < Tk; ++j) p(i, j) /= z;
            }
            StridedMap ob(out.data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
            ob.noalias() = p * vb;
        }
    }
    return detail::make_result(
        q.shape(), std::move(out), {q, k, v}, [B, Tq, Tk, H, d, dh, scale_factor, probs = std::move(probs)](Node& self) {
            const bool tq = detail::tracked(self, 0), tk = detail::tracked(self, 1), tv = detail::tracked(self, 2);
            const auto& qv = detail::pvalue(self, 0);
            const auto& kv = detail::pvalue(self, 1);
            const auto& vv = detail::pvalue(self, 2);
            RowMatrix dp(Tq, Tk), ds(Tq, Tk);
            for (std::size_t b = 0; b < B; ++b) {
                for (std::size_t h = 0; h < H; ++h) {
                    ConstMatrixMap p(probs.data() + (b * H + h) * Tq * Tk, Tq, Tk);
                    ConstStridedMap go(self.grad.data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
                    ConstStridedMap vb(vv.data() + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
                    if (tv) {
                        StridedMap gv(detail::pgrad(self, 2).data() + b * Tk * d + h * dh, Tk, dh,
                                      Eigen::OuterStride<>(d));
                        gv.noalias() += p.transpose() * go;
                    }
                    if (!tq && !tk) continue;
                    dp.noalias() = go * vb.transpose();
                    for (std::size_t i = 0; i < Tq; ++i) {
                        double dot = 0.0;
                        for (std::size_t j = 0; j < Tk; ++j) dot += dp(i, j) * p(i, j);
                        for (std::size_t j = 0; j < Tk; ++j) ds(i, j) = p(i, j) * (dp(i, j) - dot) * scale_factor;
                    }
                    if (tq) {
                        ConstStridedMap kb(kv.data() + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
                        StridedMap gq(detail::pgrad(self, 0).data() + b * Tq * d + h * dh, Tq, dh,
                                      Eigen::OuterStride<>(d));
                        gq.noalias() += ds * kb;
                    }
                    if (tk) {
                        ConstStridedMap qb(qv.data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
                        StridedMap gk(detail::pgrad(self, 1).data() + b * Tk * d + h * dh, Tk, dh,
                                      Eigen::OuterStride<>(d));
                        gk.noalias() += ds.transpose() * qb;
                    }
                }
            }
        });
}

}  // namespace pivotnmt::nn
