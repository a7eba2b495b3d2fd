#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "tssan/error.hpp"
#include "tssan/tensor.hpp"

// Differentiable operations over Tensor. Each op computes its forward value
// eagerly and, when a tape is active and some input requires a gradient,
// records the matching backward rule.

namespace tssan {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// C[m×n] (+)= op(A)[m×k] · op(B)[k×n] on row-major buffers.
inline void gemm(const double* a, bool trans_a, const double* b, bool trans_b,
                 double* c, std::size_t m, std::size_t n, std::size_t k,
                 bool accumulate) {
  using Index = Eigen::Index;
  Eigen::Map<const RowMat> A(a, static_cast<Index>(trans_a ? k : m),
                             static_cast<Index>(trans_a ? m : k));
  Eigen::Map<const RowMat> B(b, static_cast<Index>(trans_b ? n : k),
                             static_cast<Index>(trans_b ? k : n));
  Eigen::Map<RowMat> C(c, static_cast<Index>(m), static_cast<Index>(n));
  auto run = [&](const auto& lhs, const auto& rhs) {
    if (accumulate) {
      C.noalias() += lhs * rhs;
    } else {
      C.noalias() = lhs * rhs;
    }
  };
  if (!trans_a && !trans_b) {
    run(A, B);
  } else if (trans_a && !trans_b) {
    run(A.transpose(), B);
  } else if (!trans_a && trans_b) {
    run(A, B.transpose());
  } else {
    run(A.transpose(), B.transpose());
  }
}

inline constexpr double kProbFloor = std::numeric_limits<double>::min();

struct AxisSplit {
  std::size_t outer;
  std::size_t extent;
  std::size_t inner;
};

inline AxisSplit split_at(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw IndexError("axis " + std::to_string(axis) + " out of range for " +
                     to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != axis) out.push_back(shape[i]);
  }
  if (out.empty()) out.push_back(1);
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " +
                         to_string(a.shape()) + " vs " + to_string(b.shape()));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw DimensionError("matmul: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out(Shape{m, n});
  detail::gemm(a.data(), false, b.data(), false, out.data(), m, n, k, false);
  detail::record(out, {&a, &b}, [a, b, m, n, k](std::span<const double> g) mutable {
    if (auto ga = detail::grad_sink(a); !ga.empty()) {
      detail::gemm(g.data(), false, b.data(), true, ga.data(), m, k, n, true);
    }
    if (auto gb = detail::grad_sink(b); !gb.empty()) {
      detail::gemm(a.data(), true, g.data(), false, gb.data(), k, n, m, true);
    }
  });
  return out;
}

/// Batched product over the leading axis: [B,m,k]·[B,k,n] -> [B,m,n]. The
/// transpose flags apply to the trailing two axes of each operand.
inline Tensor bmm(const Tensor& a, const Tensor& b, bool trans_a = false,
                  bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0)) {
    throw DimensionError("bmm: incompatible shapes " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  const std::size_t batch = a.dim(0);
  const std::size_t m = trans_a ? a.dim(2) : a.dim(1);
  const std::size_t k = trans_a ? a.dim(1) : a.dim(2);
  const std::size_t kb = trans_b ? b.dim(2) : b.dim(1);
  const std::size_t n = trans_b ? b.dim(1) : b.dim(2);
  if (k != kb) {
    throw DimensionError("bmm: inner extents differ for " + to_string(a.shape()) +
                         " and " + to_string(b.shape()));
  }
  Tensor out(Shape{batch, m, n});
  const std::size_t sa = m * k, sb = k * n, sc = m * n;
  for (std::size_t i = 0; i < batch; ++i) {
    detail::gemm(a.data() + i * sa, trans_a, b.data() + i * sb, trans_b,
                 out.data() + i * sc, m, n, k, false);
  }
  detail::record(out, {&a, &b},
                 [a, b, batch, m, n, k, sa, sb, sc, trans_a,
                  trans_b](std::span<const double> g) mutable {
    auto ga = detail::grad_sink(a);
    auto gb = detail::grad_sink(b);
    for (std::size_t i = 0; i < batch; ++i) {
      const double* gi = g.data() + i * sc;
      if (!ga.empty()) {
        // d op(A) = G · op(B)^T
        if (!trans_a) {
          detail::gemm(gi, false, b.data() + i * sb, !trans_b, ga.data() + i * sa, m, k, n, true);
        } else {
          detail::gemm(b.data() + i * sb, trans_b, gi, true, ga.data() + i * sa, k, m, n, true);
        }
      }
      if (!gb.empty()) {
        // d op(B) = op(A)^T · G
        if (!trans_b) {
          detail::gemm(a.data() + i * sa, !trans_a, gi, false, gb.data() + i * sb, k, n, m, true);
        } else {
          detail::gemm(gi, true, a.data() + i * sa, trans_a, gb.data() + i * sb, n, k, m, true);
        }
      }
    }
  });
  return out;
}

/// Affine map over the last axis: x[..., in] · w[in, out] + bias[out].
inline Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (w.rank() != 2 || x.shape().back() != w.dim(0)) {
    throw DimensionError("linear: input " + to_string(x.shape()) +
                         " incompatible with weight " + to_string(w.shape()));
  }
  const std::size_t in = w.dim(0), outw = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outw)) {
    throw DimensionError("linear: bias " + to_string(bias.shape()) +
                         " does not match weight " + to_string(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outw;
  Tensor out(out_shape);
  detail::gemm(x.data(), false, w.data(), false, out.data(), rows, outw, in, false);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) {
      double* row = out.data() + r * outw;
      for (std::size_t j = 0; j < outw; ++j) row[j] += bias[j];
    }
  }
  detail::record(out, {&x, &w, &bias},
                 [x, w, bias, rows, in, outw](std::span<const double> g) mutable {
    if (auto gx = detail::grad_sink(x); !gx.empty()) {
      detail::gemm(g.data(), false, w.data(), true, gx.data(), rows, in, outw, true);
    }
    if (auto gw = detail::grad_sink(w); !gw.empty()) {
      detail::gemm(x.data(), true, g.data(), false, gw.data(), in, outw, rows, true);
    }
    if (auto gb = detail::grad_sink(bias); !gb.empty()) {
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t j = 0; j < outw; ++j) gb[j] += g[r * outw + j];
      }
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

/// a + b where b's shape equals a trailing suffix of a's shape (b is repeated
/// over the leading axes).
inline Tensor add(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  bool ok = sb.size() <= sa.size() &&
            std::equal(sb.rbegin(), sb.rend(), sa.rbegin());
  if (!ok) {
    throw DimensionError("add: " + to_string(sb) + " is not a suffix of " +
                         to_string(sa));
  }
  const std::size_t inner = b.numel();
  const std::size_t outer = a.numel() / inner;
  Tensor out(sa);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      out[o * inner + i] = a[o * inner + i] + b[i];
    }
  }
  detail::record(out, {&a, &b}, [a, b, outer, inner](std::span<const double> g) mutable {
    if (auto ga = detail::grad_sink(a); !ga.empty()) {
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (auto gb = detail::grad_sink(b); !gb.empty()) {
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) gb[i] += g[o * inner + i];
      }
    }
  });
  return out;
}

inline Tensor scale(const Tensor& x, double s) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * s;
  detail::record(out, {&x}, [x, s](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
  return out;
}

inline Tensor relu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
  detail::record(out, {&x}, [x](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > 0.0) gx[i] += g[i];
    }
  });
  return out;
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) in training mode;
/// evaluation mode returns the input unchanged.
inline Tensor dropout(const Tensor& x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw ContractError("dropout: rate must lie in [0,1), got " + std::to_string(rate));
  }
  if (!training || rate == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - rate);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<double> mask(x.numel());
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.numel(); ++i) {
    mask[i] = unit(rng) < rate ? 0.0 : keep_scale;
    out[i] = x[i] * mask[i];
  }
  detail::record(out, {&x}, [x, mask = std::move(mask)](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * mask[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) acc += v;
  Tensor out = Tensor::scalar(acc);
  detail::record(out, {&x}, [x](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (auto& v : gx) v += g[0];
  });
  return out;
}

/// Mean over one axis; the axis is removed from the result shape.
inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  Tensor out(detail::drop_axis(x.shape(), axis));
  const double inv = 1.0 / static_cast<double>(s.extent);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      double acc = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) acc += x[(o * s.extent + e) * s.inner + i];
      out[o * s.inner + i] = acc * inv;
    }
  }
  detail::record(out, {&x}, [x, s, inv](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t e = 0; e < s.extent; ++e) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          gx[(o * s.extent + e) * s.inner + i] += g[o * s.inner + i] * inv;
        }
      }
    }
  });
  return out;
}

/// Maximum over one axis; ties resolve to the first index, which also
/// receives the whole gradient.
inline Tensor max_axis(const Tensor& x, std::size_t axis) {
  const auto s = detail::split_at(x.shape(), axis);
  Tensor out(detail::drop_axis(x.shape(), axis));
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.extent) * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        std::size_t idx = (o * s.extent + e) * s.inner + i;
        if (x[idx] > x[best]) best = idx;
      }
      out[o * s.inner + i] = x[best];
      arg[o * s.inner + i] = best;
    }
  }
  detail::record(out, {&x}, [x, arg = std::move(arg)](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t j = 0; j < g.size(); ++j) gx[arg[j]] += g[j];
  });
  return out;
}

/// Divides every last-axis row by its sum.
inline Tensor normalize_last(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  std::vector<double> totals(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    double t = 0.0;
    for (std::size_t j = 0; j < n; ++j) t += x[r * n + j];
    if (t == 0.0) throw ContractError("normalize_last: zero row sum");
    totals[r] = t;
    for (std::size_t j = 0; j < n; ++j) out[r * n + j] = x[r * n + j] / t;
  }
  detail::record(out, {&x}, [x, out, n, rows, totals = std::move(totals)](
                                std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += g[r * n + j] * out[r * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += (g[r * n + j] - dot) / totals[r];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: cannot view " + to_string(x.shape()) + " as " +
                         to_string(shape));
  }
  Tensor out(std::move(shape), std::vector<double>(x.values().begin(), x.values().end()));
  detail::record(out, {&x}, [x](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

/// Reorders axes: output axis i is input axis perm[i].
inline Tensor permute(const Tensor& x, const std::vector<std::size_t>& perm) {
  const Shape& in = x.shape();
  const std::size_t r = in.size();
  if (perm.size() != r) {
    throw DimensionError("permute: permutation rank mismatch for " + to_string(in));
  }
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw DimensionError("permute: invalid permutation");
    seen[p] = true;
  }
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out_shape(r);
  std::vector<std::size_t> stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[perm[i]];
    stride[i] = in_stride[perm[i]];
  }
  // src[j] is the input offset of output element j.
  const std::size_t total = x.numel();
  std::vector<std::size_t> src(total);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  for (std::size_t j = 0; j < total; ++j) {
    src[j] = offset;
    for (std::size_t a = r; a-- > 0;) {
      if (++idx[a] < out_shape[a]) {
        offset += stride[a];
        break;
      }
      offset -= stride[a] * (out_shape[a] - 1);
      idx[a] = 0;
    }
  }
  Tensor out(out_shape);
  for (std::size_t j = 0; j < total; ++j) out[j] = x[src[j]];
  detail::record(out, {&x}, [x, src = std::move(src)](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t j = 0; j < g.size(); ++j) gx[src[j]] += g[j];
  });
  return out;
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  Shape shape = parts.front().shape();
  if (axis >= shape.size()) throw IndexError("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) throw DimensionError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != shape[i]) {
        throw DimensionError("concat: shapes " + to_string(shape) + " and " +
                             to_string(s) + " disagree off the concat axis");
      }
    }
    total += s[axis];
  }
  shape[axis] = total;
  const auto split = detail::split_at(shape, axis);
  Tensor out(shape);
  std::size_t at = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t ext = p.dim(axis);
    offsets.push_back(at);
    for (std::size_t o = 0; o < split.outer; ++o) {
      std::copy_n(p.data() + o * ext * split.inner, ext * split.inner,
                  out.data() + (o * total + at) * split.inner);
    }
    at += ext;
  }
  bool any = false;
  for (const auto& p : parts) any = any || p.requires_grad();
  if (any && Tape::active()) {
    out.set_requires_grad(true);
    Tape::active()->record(out, [parts, offsets, split, total, axis](
                                    std::span<const double> g) mutable {
      for (std::size_t n = 0; n < parts.size(); ++n) {
        auto gp = detail::grad_sink(parts[n]);
        if (gp.empty()) continue;
        const std::size_t ext = parts[n].dim(axis);
        for (std::size_t o = 0; o < split.outer; ++o) {
          const double* src = g.data() + (o * total + offsets[n]) * split.inner;
          double* dst = gp.data() + o * ext * split.inner;
          for (std::size_t i = 0; i < ext * split.inner; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return out;
}

/// Half-open range [begin, end) along one axis.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const auto s = detail::split_at(x.shape(), axis);
  if (begin >= end || end > s.extent) {
    throw IndexError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for extent " + std::to_string(s.extent));
  }
  Shape shape = x.shape();
  shape[axis] = end - begin;
  const std::size_t ext = end - begin;
  Tensor out(shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data() + (o * s.extent + begin) * s.inner, ext * s.inner,
                out.data() + o * ext * s.inner);
  }
  detail::record(out, {&x}, [x, s, begin, ext](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const double* src = g.data() + o * ext * s.inner;
      double* dst = gx.data() + (o * s.extent + begin) * s.inner;
      for (std::size_t i = 0; i < ext * s.inner; ++i) dst[i] += src[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and losses

/// Row-wise softmax over the last axis with max subtraction.
inline Tensor softmax(const Tensor& x) {
  const std::size_t n = x.shape().back();
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double* o = out.data() + r * n;
    double mx = in[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = std::exp(in[j] - mx);
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  detail::record(out, {&x}, [x, out, n, rows](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = out.data() + r * n;
      const double* gy = g.data() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < n; ++j) gx[r * n + j] += y[j] * (gy[j] - dot);
    }
  });
  return out;
}

/// Normalizes each last-axis row to zero mean and unit (biased) variance,
/// then applies gamma/beta.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-5) {
  const std::size_t n = x.shape().back();
  if (n < 2) throw DimensionError("layer_norm: feature width must be at least 2");
  if (gamma.numel() != n || beta.numel() != n) {
    throw DimensionError("layer_norm: affine parameters " + to_string(gamma.shape()) +
                         " do not match width " + std::to_string(n));
  }
  const std::size_t rows = x.numel() / n;
  Tensor out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = x.data() + r * n;
    double mean = 0.0;
    for (std::size_t j = 0; j < n; ++j) mean += in[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= static_cast<double>(n);
    inv_std[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < n; ++j) {
      xhat[r * n + j] = (in[j] - mean) * inv_std[r];
      out[r * n + j] = xhat[r * n + j] * gamma[j] + beta[j];
    }
  }
  detail::record(out, {&x, &gamma, &beta},
                 [x, gamma, beta, n, rows, xhat = std::move(xhat),
                  inv_std = std::move(inv_std)](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    auto gg = detail::grad_sink(gamma);
    auto gb = detail::grad_sink(beta);
    std::vector<double> dxhat(n);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gy = g.data() + r * n;
      const double* xh = xhat.data() + r * n;
      if (!gg.empty()) {
        for (std::size_t j = 0; j < n; ++j) gg[j] += gy[j] * xh[j];
      }
      if (!gb.empty()) {
        for (std::size_t j = 0; j < n; ++j) gb[j] += gy[j];
      }
      if (gx.empty()) continue;
      double mean_d = 0.0, mean_dx = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        dxhat[j] = gy[j] * gamma[j];
        mean_d += dxhat[j];
        mean_dx += dxhat[j] * xh[j];
      }
      mean_d /= static_cast<double>(n);
      mean_dx /= static_cast<double>(n);
      for (std::size_t j = 0; j < n; ++j) {
        gx[r * n + j] += inv_std[r] * (dxhat[j] - mean_d - xh[j] * mean_dx);
      }
    }
  });
  return out;
}

inline void check_labels(const char* op, std::span<const std::size_t> labels,
                         std::size_t batch, std::size_t classes) {
  if (labels.size() != batch) {
    throw DimensionError(std::string(op) + ": " + std::to_string(labels.size()) +
                         " labels for batch of " + std::to_string(batch));
  }
  for (auto l : labels) {
    if (l >= classes) {
      throw IndexError(std::string(op) + ": label " + std::to_string(l) +
                       " outside [0," + std::to_string(classes) + ")");
    }
  }
}

/// Mean over the batch of -log softmax(logits)[label].
inline Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  if (logits.rank() != 2) throw DimensionError("cross_entropy: logits must be [B x L]");
  const std::size_t batch = logits.dim(0), classes = logits.dim(1);
  check_labels("cross_entropy", labels, batch, classes);
  std::vector<double> probs(logits.numel());
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* z = logits.data() + b * classes;
    double mx = z[0];
    for (std::size_t j = 1; j < classes; ++j) mx = std::max(mx, z[j]);
    double total = 0.0;
    for (std::size_t j = 0; j < classes; ++j) total += std::exp(z[j] - mx);
    const double lse = mx + std::log(total);
    loss += lse - z[labels[b]];
    for (std::size_t j = 0; j < classes; ++j) probs[b * classes + j] = std::exp(z[j] - lse);
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(batch));
  std::vector<std::size_t> y(labels.begin(), labels.end());
  detail::record(out, {&logits}, [logits, probs = std::move(probs), y = std::move(y), batch,
                                  classes](std::span<const double> g) mutable {
    auto gz = detail::grad_sink(logits);
    const double s = g[0] / static_cast<double>(batch);
    for (std::size_t b = 0; b < batch; ++b) {
      for (std::size_t j = 0; j < classes; ++j) {
        double onehot = (j == y[b]) ? 1.0 : 0.0;
        gz[b * classes + j] += s * (probs[b * classes + j] - onehot);
      }
    }
  });
  return out;
}

/// Mean over the batch of -log probs[label] for already-normalized rows.
inline Tensor nll_of_probs(const Tensor& probs, std::span<const std::size_t> labels) {
  if (probs.rank() != 2) throw DimensionError("nll_of_probs: probs must be [B x L]");
  const std::size_t batch = probs.dim(0), classes = probs.dim(1);
  check_labels("nll_of_probs", labels, batch, classes);
  const double kFloor = detail::kProbFloor;
  double loss = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    loss -= std::log(std::max(probs[b * classes + labels[b]], kFloor));
  }
  Tensor out = Tensor::scalar(loss / static_cast<double>(batch));
  std::vector<std::size_t> y(labels.begin(), labels.end());
  detail::record(out, {&probs}, [probs, y = std::move(y), batch, classes](
                                    std::span<const double> g) mutable {
    auto gp = detail::grad_sink(probs);
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t at = b * classes + y[b];
      gp[at] -= g[0] / (static_cast<double>(batch) * std::max(probs[at], detail::kProbFloor));
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace detail {

struct ConvGeometry {
  std::size_t batch, cin, height, width, cout, kh, kw;
  std::size_t patch() const { return cin * kh * kw; }
  std::size_t pixels() const { return height * width; }
};

/// Column matrix [cin*kh*kw, H*W] for one image with zero same-padding.
inline void im2col(const double* img, const ConvGeometry& g, double* col) {
  const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v, ++row) {
        double* dst = col + row * g.pixels();
        for (long y = 0; y < H; ++y) {
          const long sy = y + static_cast<long>(u) - ph;
          for (long x = 0; x < W; ++x) {
            const long sx = x + static_cast<long>(v) - pw;
            dst[y * W + x] = (sy >= 0 && sy < H && sx >= 0 && sx < W)
                                 ? img[(c * g.height + sy) * g.width + sx]
                                 : 0.0;
          }
        }
      }
    }
  }
}

inline void col2im_add(const double* col, const ConvGeometry& g, double* img) {
  const long ph = static_cast<long>(g.kh / 2), pw = static_cast<long>(g.kw / 2);
  const long H = static_cast<long>(g.height), W = static_cast<long>(g.width);
  std::size_t row = 0;
  for (std::size_t c = 0; c < g.cin; ++c) {
    for (std::size_t u = 0; u < g.kh; ++u) {
      for (std::size_t v = 0; v < g.kw; ++v, ++row) {
        const double* src = col + row * g.pixels();
        for (long y = 0; y < H; ++y) {
          const long sy = y + static_cast<long>(u) - ph;
          if (sy < 0 || sy >= H) continue;
          for (long x = 0; x < W; ++x) {
            const long sx = x + static_cast<long>(v) - pw;
            if (sx < 0 || sx >= W) continue;
            img[(c * g.height + sy) * g.width + sx] += src[y * W + x];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Stride-1 cross-correlation with zero same-padding.
/// x: [Cin,H,W] or [N,Cin,H,W]; w: [Cout,Cin,kh,kw]; bias: [Cout] or undefined.
inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias = {}) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("conv2d: input must be [C,H,W] or [N,C,H,W], got " +
                         to_string(x.shape()));
  }
  if (w.rank() != 4) throw DimensionError("conv2d: weight must be [Cout,Cin,kh,kw]");
  const bool batched = x.rank() == 4;
  detail::ConvGeometry geo{batched ? x.dim(0) : 1,
                           x.dim(batched ? 1 : 0),
                           x.dim(batched ? 2 : 1),
                           x.dim(batched ? 3 : 2),
                           w.dim(0),
                           w.dim(2),
                           w.dim(3)};
  if (w.dim(1) != geo.cin) {
    throw DimensionError("conv2d: input channels " + std::to_string(geo.cin) +
                         " do not match weight " + to_string(w.shape()));
  }
  if (geo.kh % 2 == 0 || geo.kw % 2 == 0) {
    throw DimensionError("conv2d: kernel extents must be odd, got " + to_string(w.shape()));
  }
  if (bias.defined() && bias.numel() != geo.cout) {
    throw DimensionError("conv2d: bias does not match output channels");
  }
  Shape out_shape = batched ? Shape{geo.batch, geo.cout, geo.height, geo.width}
                            : Shape{geo.cout, geo.height, geo.width};
  Tensor out(out_shape);
  const std::size_t in_stride = geo.cin * geo.pixels();
  const std::size_t out_stride = geo.cout * geo.pixels();
  std::vector<double> col(geo.patch() * geo.pixels());
  for (std::size_t n = 0; n < geo.batch; ++n) {
    detail::im2col(x.data() + n * in_stride, geo, col.data());
    double* dst = out.data() + n * out_stride;
    detail::gemm(w.data(), false, col.data(), false, dst, geo.cout, geo.pixels(),
                 geo.patch(), false);
    if (bias.defined()) {
      for (std::size_t c = 0; c < geo.cout; ++c) {
        for (std::size_t p = 0; p < geo.pixels(); ++p) dst[c * geo.pixels() + p] += bias[c];
      }
    }
  }
  detail::record(out, {&x, &w, &bias}, [x, w, bias, geo, in_stride, out_stride](
                                          std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    auto gw = detail::grad_sink(w);
    auto gb = detail::grad_sink(bias);
    std::vector<double> col(geo.patch() * geo.pixels());
    std::vector<double> dcol(gx.empty() ? 0 : col.size());
    for (std::size_t n = 0; n < geo.batch; ++n) {
      const double* gn = g.data() + n * out_stride;
      if (!gw.empty()) {
        detail::im2col(x.data() + n * in_stride, geo, col.data());
        detail::gemm(gn, false, col.data(), true, gw.data(), geo.cout, geo.patch(),
                     geo.pixels(), true);
      }
      if (!gb.empty()) {
        for (std::size_t c = 0; c < geo.cout; ++c) {
          for (std::size_t p = 0; p < geo.pixels(); ++p) gb[c] += gn[c * geo.pixels() + p];
        }
      }
      if (!gx.empty()) {
        detail::gemm(w.data(), true, gn, false, dcol.data(), geo.patch(), geo.pixels(),
                     geo.cout, false);
        detail::col2im_add(dcol.data(), geo, gx.data() + n * in_stride);
      }
    }
  });
  return out;
}

/// Max pooling with a 1x2 window (stride 2) along the last axis.
/// x: [C,H,W] or [N,C,H,W] with W even.
inline Tensor maxpool2d(const Tensor& x) {
  if (x.rank() != 3 && x.rank() != 4) {
    throw DimensionError("maxpool2d: input must be [C,H,W] or [N,C,H,W], got " +
                         to_string(x.shape()));
  }
  const std::size_t width = x.shape().back();
  if (width % 2 != 0) {
    throw DimensionError("maxpool2d: width " + std::to_string(width) +
                         " is not divisible by the 1x2 window");
  }
  Shape out_shape = x.shape();
  out_shape.back() = width / 2;
  Tensor out(out_shape);
  std::vector<std::size_t> arg(out.numel());
  for (std::size_t j = 0; j < out.numel(); ++j) {
    const std::size_t a = 2 * j, b = 2 * j + 1;
    const std::size_t best = x[b] > x[a] ? b : a;
    out[j] = x[best];
    arg[j] = best;
  }
  detail::record(out, {&x}, [x, arg = std::move(arg)](std::span<const double> g) mutable {
    auto gx = detail::grad_sink(x);
    for (std::size_t j = 0; j < g.size(); ++j) gx[arg[j]] += g[j];
  });
  return out;
}

}  // namespace tssan
