#pragma once

// Differentiable tensor kernels. Every op is a free function over Tensor<Scalar>
// that computes its result eagerly and, when a tape is active and an input
// requires a gradient, records the matching backward rule.

#include <cmath>
#include <limits>
#include <optional>

#include <Eigen/Dense>

#include "bitr/tensor.hpp"

namespace bitr {

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using MatrixMap = Eigen::Map<RowMatrix<Scalar>>;
template <class Scalar>
using ConstMatrixMap = Eigen::Map<const RowMatrix<Scalar>>;

namespace detail {

inline Index normalize_axis(Index axis, Index rank) {
  Index a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank)
    throw ShapeError("invalid axis " + std::to_string(axis) + " for rank " + std::to_string(rank));
  return a;
}

struct Broadcast {
  Shape out;
  Shape stride_a;
  Shape stride_b;
};

inline Broadcast plan_broadcast(const Shape& a, const Shape& b) {
  if (a.size() != b.size())
    throw ShapeError("broadcast needs equal ranks, got " + to_string(a) + " and " + to_string(b));
  Broadcast p{Shape(a.size()), strides_of(a), strides_of(b)};
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i] == b[i]) {
      p.out[i] = a[i];
    } else if (a[i] == 1) {
      p.out[i] = b[i];
      p.stride_a[i] = 0;
    } else if (b[i] == 1) {
      p.out[i] = a[i];
      p.stride_b[i] = 0;
    } else {
      throw ShapeError("cannot broadcast axis " + std::to_string(i) + ": " + to_string(a) + " vs " +
                       to_string(b));
    }
  }
  return p;
}

/// Calls f(out_index, a_index, b_index) for every output element in row-major order.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const Index rank = static_cast<Index>(p.out.size());
  if (rank == 0) {
    f(Index{0}, Index{0}, Index{0});
    return;
  }
  if (numel(p.out) == 0) return;
  const Index inner = p.out[rank - 1];
  const Index sa = p.stride_a[rank - 1], sb = p.stride_b[rank - 1];
  Shape idx(rank, 0);
  Index o = 0, ia = 0, ib = 0;
  while (true) {
    for (Index i = 0; i < inner; ++i) f(o + i, ia + i * sa, ib + i * sb);
    o += inner;
    Index ax = rank - 2;
    for (; ax >= 0; --ax) {
      ia += p.stride_a[ax];
      ib += p.stride_b[ax];
      if (++idx[ax] < p.out[ax]) break;
      ia -= p.stride_a[ax] * p.out[ax];
      ib -= p.stride_b[ax] * p.out[ax];
      idx[ax] = 0;
    }
    if (ax < 0) return;
  }
}

/// Splits a shape around `axis` into (outer, axis, inner) extents.
struct AxisSplit {
  Index outer, extent, inner;
};

inline AxisSplit split_at(const Shape& s, Index axis) {
  AxisSplit r{1, s[axis], 1};
  for (Index i = 0; i < axis; ++i) r.outer *= s[i];
  for (Index i = axis + 1; i < static_cast<Index>(s.size()); ++i) r.inner *= s[i];
  return r;
}

template <class Scalar, class Forward, class Derivative>
Tensor<Scalar> unary(const Tensor<Scalar>& x, Forward fwd, Derivative deriv) {
  Tensor<Scalar> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (Index i = 0; i < x.numel(); ++i) ys[i] = fwd(xs[i]);
  record<Scalar>({&x}, out, [x, out, deriv](std::span<const Scalar> gy) mutable {
    if (!x.requires_grad()) return;
    auto gx = x.grad_buffer();
    auto xs = x.data();
    auto ys = std::as_const(out).data();
    for (Index i = 0; i < x.numel(); ++i) gx[i] += gy[i] * deriv(xs[i], ys[i]);
  });
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

template <class Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape());
  Tensor<Scalar> out(plan.out);
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { os[o] = as[i] + bs[j]; });
  detail::record<Scalar>({&a, &b}, out, [a, b, plan](std::span<const Scalar> g) mutable {
    std::span<Scalar> ga, gb;
    if (a.requires_grad()) ga = a.grad_buffer();
    if (b.requires_grad()) gb = b.grad_buffer();
    detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) {
      if (!ga.empty()) ga[i] += g[o];
      if (!gb.empty()) gb[j] += g[o];
    });
  });
  return out;
}

template <class Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape());
  Tensor<Scalar> out(plan.out);
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { os[o] = as[i] - bs[j]; });
  detail::record<Scalar>({&a, &b}, out, [a, b, plan](std::span<const Scalar> g) mutable {
    std::span<Scalar> ga, gb;
    if (a.requires_grad()) ga = a.grad_buffer();
    if (b.requires_grad()) gb = b.grad_buffer();
    detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) {
      if (!ga.empty()) ga[i] += g[o];
      if (!gb.empty()) gb[j] -= g[o];
    });
  });
  return out;
}

/// Elementwise product with same-rank broadcasting over size-1 axes
/// (bias maps, attention maps).
template <class Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  auto plan = detail::plan_broadcast(a.shape(), b.shape());
  Tensor<Scalar> out(plan.out);
  auto as = a.data(), bs = b.data();
  auto os = out.data();
  detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) { os[o] = as[i] * bs[j]; });
  detail::record<Scalar>({&a, &b}, out, [a, b, plan](std::span<const Scalar> g) mutable {
    std::span<Scalar> ga, gb;
    if (a.requires_grad()) ga = a.grad_buffer();
    if (b.requires_grad()) gb = b.grad_buffer();
    auto as = std::as_const(a).data();
    auto bs = std::as_const(b).data();
    detail::for_each_broadcast(plan, [&](Index o, Index i, Index j) {
      if (!ga.empty()) ga[i] += g[o] * bs[j];
      if (!gb.empty()) gb[j] += g[o] * as[i];
    });
  });
  return out;
}

template <class Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar c) {
  return detail::unary(x, [c](Scalar v) { return c * v; }, [c](Scalar, Scalar) { return c; });
}

template <class Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v, Scalar) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <class Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

/// Exact (erf-based) GELU.
template <class Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  constexpr Scalar inv_sqrt2 = Scalar(0.70710678118654752440);
  constexpr Scalar inv_sqrt2pi = Scalar(0.39894228040143267794);
  return detail::unary(
      x, [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); },
      [](Scalar v, Scalar) {
        return Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(Scalar(-0.5) * v * v);
      });
}

// ---------------------------------------------------------------------------
// Reductions

template <class Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Scalar acc = 0;
  for (Scalar v : x.data()) acc += v;
  auto out = Tensor<Scalar>::scalar(acc);
  detail::record<Scalar>({&x}, out, [x](std::span<const Scalar> g) mutable {
    for (auto& gx : x.grad_buffer()) gx += g[0];
  });
  return out;
}

template <class Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.numel()));
}

/// Sum over one axis, keeping it with size 1.
template <class Scalar>
Tensor<Scalar> sum_axis(const Tensor<Scalar>& x, Index axis) {
  axis = detail::normalize_axis(axis, x.rank());
  auto sp = detail::split_at(x.shape(), axis);
  Shape shape = x.shape();
  shape[axis] = 1;
  Tensor<Scalar> out(shape);
  auto xs = x.data();
  auto os = out.data();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index a = 0; a < sp.extent; ++a)
      for (Index i = 0; i < sp.inner; ++i) os[o * sp.inner + i] += xs[(o * sp.extent + a) * sp.inner + i];
  detail::record<Scalar>({&x}, out, [x, sp](std::span<const Scalar> g) mutable {
    auto gx = x.grad_buffer();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index a = 0; a < sp.extent; ++a)
        for (Index i = 0; i < sp.inner; ++i) gx[(o * sp.extent + a) * sp.inner + i] += g[o * sp.inner + i];
  });
  return out;
}

template <class Scalar>
Tensor<Scalar> mean_axis(const Tensor<Scalar>& x, Index axis) {
  axis = detail::normalize_axis(axis, x.rank());
  return scale(sum_axis(x, axis), Scalar(1) / static_cast<Scalar>(x.dim(axis)));
}

/// Max over one axis, keeping it with size 1. Ties route the gradient to the
/// first maximal element.
template <class Scalar>
Tensor<Scalar> max_axis(const Tensor<Scalar>& x, Index axis) {
  axis = detail::normalize_axis(axis, x.rank());
  auto sp = detail::split_at(x.shape(), axis);
  if (sp.extent == 0) throw ShapeError("max over empty axis " + std::to_string(axis));
  Shape shape = x.shape();
  shape[axis] = 1;
  Tensor<Scalar> out(shape);
  std::vector<Index> argmax(static_cast<std::size_t>(out.numel()));
  auto xs = x.data();
  auto os = out.data();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      Index best = o * sp.extent * sp.inner + i;
      for (Index a = 1; a < sp.extent; ++a) {
        Index k = (o * sp.extent + a) * sp.inner + i;
        if (xs[k] > xs[best]) best = k;
      }
      os[o * sp.inner + i] = xs[best];
      argmax[static_cast<std::size_t>(o * sp.inner + i)] = best;
    }
  detail::record<Scalar>({&x}, out, [x, argmax = std::move(argmax)](std::span<const Scalar> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t k = 0; k < argmax.size(); ++k) gx[argmax[k]] += g[k];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <class Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  if (numel(shape) != x.numel())
    throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
  Tensor<Scalar> out(std::move(shape), x.buffer());
  detail::record<Scalar>({&x}, out, [x](std::span<const Scalar> g) mutable {
    auto gx = x.grad_buffer();
    for (Index i = 0; i < x.numel(); ++i) gx[i] += g[i];
  });
  return out;
}

template <class Scalar>
Tensor<Scalar> concat(const std::vector<Tensor<Scalar>>& xs, Index axis) {
  if (xs.empty()) throw ShapeError("concat of zero tensors");
  const Index rank = xs.front().rank();
  axis = detail::normalize_axis(axis, rank);
  Shape shape = xs.front().shape();
  shape[axis] = 0;
  for (const auto& t : xs) {
    if (t.rank() != rank) throw ShapeError("concat rank mismatch");
    for (Index i = 0; i < rank; ++i)
      if (i != axis && t.dim(i) != xs.front().dim(i))
        throw ShapeError("concat size mismatch on axis " + std::to_string(i));
    shape[axis] += t.dim(axis);
  }
  Tensor<Scalar> out(shape);
  auto sp = detail::split_at(shape, axis);
  auto os = out.data();
  Index offset = 0;
  std::vector<Index> offsets;
  for (const auto& t : xs) {
    offsets.push_back(offset);
    const Index block = t.dim(axis) * sp.inner;
    auto ts = t.data();
    for (Index o = 0; o < sp.outer; ++o)
      std::copy_n(ts.begin() + o * block, block, os.begin() + o * sp.extent * sp.inner + offset * sp.inner);
    offset += t.dim(axis);
  }
  bool need = false;
  for (const auto& t : xs) need = need || t.requires_grad();
  if (need && Tape<Scalar>::active()) {
    out.set_requires_grad(true);
    Tape<Scalar>::active()->record([xs, out, offsets, sp, axis]() {
      if (!out.has_grad()) return;
      auto g = out.grad();
      for (std::size_t k = 0; k < xs.size(); ++k) {
        const auto& t = xs[k];
        if (!t.requires_grad()) continue;
        auto gt = t.grad_buffer();
        const Index block = t.dim(axis) * sp.inner;
        for (Index o = 0; o < sp.outer; ++o)
          for (Index i = 0; i < block; ++i)
            gt[o * block + i] += g[o * sp.extent * sp.inner + offsets[k] * sp.inner + i];
      }
    });
  }
  return out;
}

/// Reverses the order along each listed axis. Only the three trailing
/// (spatial) axes of a rank >= 3 tensor may be flipped.
template <class Scalar>
Tensor<Scalar> flip(const Tensor<Scalar>& x, const std::vector<Index>& axes) {
  const Index rank = x.rank();
  std::vector<bool> flipped(static_cast<std::size_t>(rank), false);
  for (Index a : axes) {
    Index ax = detail::normalize_axis(a, rank);
    if (rank < 3 || ax < rank - 3) throw ShapeError("flip axis " + std::to_string(a) + " is not spatial");
    flipped[ax] = true;
  }
  const Shape& shape = x.shape();
  const Shape st = strides_of(shape);
  // Source index for each destination index.
  std::vector<Index> src(static_cast<std::size_t>(x.numel()));
  Shape idx(rank, 0);
  for (Index o = 0; o < x.numel(); ++o) {
    Index s = 0;
    for (Index a = 0; a < rank; ++a) s += (flipped[a] ? shape[a] - 1 - idx[a] : idx[a]) * st[a];
    src[o] = s;
    for (Index a = rank - 1; a >= 0; --a) {
      if (++idx[a] < shape[a]) break;
      idx[a] = 0;
    }
  }
  Tensor<Scalar> out(shape);
  auto xs = x.data();
  auto os = out.data();
  for (Index o = 0; o < x.numel(); ++o) os[o] = xs[src[o]];
  detail::record<Scalar>({&x}, out, [x, src = std::move(src)](std::span<const Scalar> g) mutable {
    auto gx = x.grad_buffer();
    for (std::size_t o = 0; o < src.size(); ++o) gx[src[o]] += g[o];
  });
  return out;
}

/// Swaps the two trailing axes of a rank-3 tensor: (B, P, Q) -> (B, Q, P).
template <class Scalar>
Tensor<Scalar> batch_transpose(const Tensor<Scalar>& x) {
  if (x.rank() != 3) throw ShapeError("batch_transpose needs rank 3, got " + to_string(x.shape()));
  const Index b = x.dim(0), p = x.dim(1), q = x.dim(2);
  Tensor<Scalar> out(Shape{b, q, p});
  auto xs = x.data();
  auto os = out.data();
  for (Index n = 0; n < b; ++n)
    for (Index i = 0; i < p; ++i)
      for (Index j = 0; j < q; ++j) os[(n * q + j) * p + i] = xs[(n * p + i) * q + j];
  detail::record<Scalar>({&x}, out, [x, b, p, q](std::span<const Scalar> g) mutable {
    auto gx = x.grad_buffer();
    for (Index n = 0; n < b; ++n)
      for (Index i = 0; i < p; ++i)
        for (Index j = 0; j < q; ++j) gx[(n * p + i) * q + j] += g[(n * q + j) * p + i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra

template <class Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.rank() != 2 || b.rank() != 2) throw ShapeError("matmul needs rank-2 operands");
  if (a.dim(1) != b.dim(0))
    throw ShapeError("matmul inner dimension mismatch: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<Scalar> out(Shape{m, n});
  MatrixMap<Scalar>(out.data().data(), m, n).noalias() =
      ConstMatrixMap<Scalar>(a.data().data(), m, k) * ConstMatrixMap<Scalar>(b.data().data(), k, n);
  detail::record<Scalar>({&a, &b}, out, [a, b, m, k, n](std::span<const Scalar> g) mutable {
    ConstMatrixMap<Scalar> G(g.data(), m, n);
    if (a.requires_grad())
      MatrixMap<Scalar>(a.grad_buffer().data(), m, k).noalias() +=
          G * ConstMatrixMap<Scalar>(std::as_const(b).data().data(), k, n).transpose();
    if (b.requires_grad())
      MatrixMap<Scalar>(b.grad_buffer().data(), k, n).noalias() +=
          ConstMatrixMap<Scalar>(std::as_const(a).data().data(), m, k).transpose() * G;
  });
  return out;
}

/// Affine map over the last axis: y = x W + b, with W stored (in, out).
template <class Scalar>
Tensor<Scalar> linear(const Tensor<Scalar>& x, const Tensor<Scalar>& weight, const Tensor<Scalar>& bias) {
  if (weight.rank() != 2) throw ShapeError("linear weight must be rank 2");
  const Index in = weight.dim(0), out_features = weight.dim(1);
  if (x.rank() < 1 || x.dim(-1) != in)
    throw ShapeError("linear expects last axis " + std::to_string(in) + ", got " + to_string(x.shape()));
  if (bias.numel() != out_features) throw ShapeError("linear bias length mismatch on axis 0");
  const Index rows = x.numel() / in;
  Shape shape = x.shape();
  shape.back() = out_features;
  Tensor<Scalar> out(shape);
  MatrixMap<Scalar> Y(out.data().data(), rows, out_features);
  Y.noalias() = ConstMatrixMap<Scalar>(x.data().data(), rows, in) *
                ConstMatrixMap<Scalar>(weight.data().data(), in, out_features);
  Y.rowwise() += Eigen::Map<const Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.data().data(), out_features);
  detail::record<Scalar>({&x, &weight, &bias}, out,
                         [x, weight, bias, rows, in, out_features](std::span<const Scalar> g) mutable {
                           ConstMatrixMap<Scalar> G(g.data(), rows, out_features);
                           if (x.requires_grad())
                             MatrixMap<Scalar>(x.grad_buffer().data(), rows, in).noalias() +=
                                 G * ConstMatrixMap<Scalar>(std::as_const(weight).data().data(), in, out_features)
                                         .transpose();
                           if (weight.requires_grad())
                             MatrixMap<Scalar>(weight.grad_buffer().data(), in, out_features).noalias() +=
                                 ConstMatrixMap<Scalar>(std::as_const(x).data().data(), rows, in).transpose() * G;
                           if (bias.requires_grad())
                             Eigen::Map<Eigen::Matrix<Scalar, 1, Eigen::Dynamic>>(bias.grad_buffer().data(),
                                                                                  out_features) +=
                                 G.colwise().sum();
                         });
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and softmax

namespace detail {

/// Normalizes `groups` contiguous slabs per outer index; the affine
/// parameters are indexed by channel, where each slab covers
/// `channels_per_group` channels of `spatial` elements each.
template <class Scalar>
Tensor<Scalar> grouped_normalize(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                                 Index outer, Index groups, Index channels_per_group, Index spatial, Scalar eps) {
  const Index slab = channels_per_group * spatial;
  const Index channels = groups * channels_per_group;
  Tensor<Scalar> out(x.shape());
  std::vector<Scalar> xhat(static_cast<std::size_t>(x.numel()));
  std::vector<Scalar> inv_std(static_cast<std::size_t>(outer * groups));
  auto xs = x.data();
  auto ys = out.data();
  auto gs = gamma.data();
  auto bs = beta.data();
  for (Index o = 0; o < outer; ++o)
    for (Index g = 0; g < groups; ++g) {
      const Index base = (o * groups + g) * slab;
      Scalar mu = 0;
      for (Index i = 0; i < slab; ++i) mu += xs[base + i];
      mu /= static_cast<Scalar>(slab);
      Scalar var = 0;
      for (Index i = 0; i < slab; ++i) var += (xs[base + i] - mu) * (xs[base + i] - mu);
      var /= static_cast<Scalar>(slab);
      const Scalar is = Scalar(1) / std::sqrt(var + eps);
      inv_std[o * groups + g] = is;
      for (Index c = 0; c < channels_per_group; ++c) {
        const Index ch = g * channels_per_group + c;
        for (Index s = 0; s < spatial; ++s) {
          const Index k = base + c * spatial + s;
          xhat[k] = (xs[k] - mu) * is;
          ys[k] = gs[ch] * xhat[k] + bs[ch];
        }
      }
    }
  record<Scalar>({&x, &gamma, &beta}, out,
                 [=, xhat = std::move(xhat), inv_std = std::move(inv_std)](std::span<const Scalar> gy) mutable {
                   std::span<Scalar> gx, gg, gb;
                   if (x.requires_grad()) gx = x.grad_buffer();
                   if (gamma.requires_grad()) gg = gamma.grad_buffer();
                   if (beta.requires_grad()) gb = beta.grad_buffer();
                   auto gs = std::as_const(gamma).data();
                   for (Index o = 0; o < outer; ++o)
                     for (Index g = 0; g < groups; ++g) {
                       const Index base = (o * groups + g) * slab;
                       Scalar mean_d = 0, mean_dx = 0;
                       for (Index c = 0; c < channels_per_group; ++c) {
                         const Index ch = g * channels_per_group + c;
                         for (Index s = 0; s < spatial; ++s) {
                           const Index k = base + c * spatial + s;
                           const Scalar d = gy[k] * gs[ch];
                           mean_d += d;
                           mean_dx += d * xhat[k];
                           if (!gg.empty()) gg[ch] += gy[k] * xhat[k];
                           if (!gb.empty()) gb[ch] += gy[k];
                         }
                       }
                       if (gx.empty()) continue;
                       mean_d /= static_cast<Scalar>(slab);
                       mean_dx /= static_cast<Scalar>(slab);
                       const Scalar is = inv_std[o * groups + g];
                       for (Index c = 0; c < channels_per_group; ++c) {
                         const Index ch = g * channels_per_group + c;
                         for (Index s = 0; s < spatial; ++s) {
                           const Index k = base + c * spatial + s;
                           gx[k] += is * (gy[k] * gs[ch] - mean_d - xhat[k] * mean_dx);
                         }
                       }
                     }
                   (void)channels;
                 });
  return out;
}

}  // namespace detail

/// Normalizes each row along the last axis, then applies gamma and beta.
template <class Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma, const Tensor<Scalar>& beta,
                          Scalar eps = Scalar(1e-5)) {
  if (x.rank() < 1) throw ShapeError("layer_norm of a scalar");
  const Index width = x.dim(-1);
  if (gamma.numel() != width || beta.numel() != width)
    throw ShapeError("layer_norm affine length mismatch on axis " + std::to_string(x.rank() - 1));
  // One group per row, one "channel" of `width` elements per group, but the
  // affine terms vary along the row: express it as `width` channels of 1.
  const Index rows = x.numel() / std::max<Index>(width, 1);
  return detail::grouped_normalize(x, gamma, beta, rows, Index{1}, width, Index{1}, eps);
}

/// Group normalization over (B, C, spatial...) with per-channel affine terms.
template <class Scalar>
Tensor<Scalar> group_norm(const Tensor<Scalar>& x, Index groups, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, Scalar eps = Scalar(1e-5)) {
  if (x.rank() < 2) throw ShapeError("group_norm needs (B, C, ...)");
  const Index channels = x.dim(1);
  if (groups <= 0 || channels % groups != 0)
    throw ShapeError("group count " + std::to_string(groups) + " does not divide channel axis 1 of size " +
                     std::to_string(channels));
  if (gamma.numel() != channels || beta.numel() != channels)
    throw ShapeError("group_norm affine length mismatch on axis 1");
  const Index spatial = x.numel() / std::max<Index>(x.dim(0) * channels, 1);
  return detail::grouped_normalize(x, gamma, beta, x.dim(0), groups, channels / groups, spatial, eps);
}

template <class Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis = -1) {
  axis = detail::normalize_axis(axis, x.rank());
  auto sp = detail::split_at(x.shape(), axis);
  Tensor<Scalar> out(x.shape());
  auto xs = x.data();
  auto ys = out.data();
  for (Index o = 0; o < sp.outer; ++o)
    for (Index i = 0; i < sp.inner; ++i) {
      const Index base = o * sp.extent * sp.inner + i;
      Scalar m = -std::numeric_limits<Scalar>::infinity();
      for (Index a = 0; a < sp.extent; ++a) m = std::max(m, xs[base + a * sp.inner]);
      Scalar z = 0;
      for (Index a = 0; a < sp.extent; ++a) {
        const Scalar e = std::exp(xs[base + a * sp.inner] - m);
        ys[base + a * sp.inner] = e;
        z += e;
      }
      for (Index a = 0; a < sp.extent; ++a) ys[base + a * sp.inner] /= z;
    }
  detail::record<Scalar>({&x}, out, [x, out, sp](std::span<const Scalar> g) mutable {
    auto gx = x.grad_buffer();
    auto ys = std::as_const(out).data();
    for (Index o = 0; o < sp.outer; ++o)
      for (Index i = 0; i < sp.inner; ++i) {
        const Index base = o * sp.extent * sp.inner + i;
        Scalar dot = 0;
        for (Index a = 0; a < sp.extent; ++a) dot += g[base + a * sp.inner] * ys[base + a * sp.inner];
        for (Index a = 0; a < sp.extent; ++a) {
          const Index k = base + a * sp.inner;
          gx[k] += ys[k] * (g[k] - dot);
        }
      }
  });
  return out;
}

// ---------------------------------------------------------------------------
// Pooling over the spatial axes of (B, C, X, Y, Z)

template <class Scalar>
Tensor<Scalar> global_avg_pool(const Tensor<Scalar>& x) {
  if (x.rank() != 5) throw ShapeError("global_avg_pool expects (B, C, X, Y, Z)");
  const Index b = x.dim(0), c = x.dim(1);
  auto flat = reshape(x, Shape{b, c, x.numel() / std::max<Index>(b * c, 1)});
  return reshape(mean_axis(flat, 2), Shape{b, c, 1, 1, 1});
}

template <class Scalar>
Tensor<Scalar> global_max_pool(const Tensor<Scalar>& x) {
  if (x.rank() != 5) throw ShapeError("global_max_pool expects (B, C, X, Y, Z)");
  const Index b = x.dim(0), c = x.dim(1);
  auto flat = reshape(x, Shape{b, c, x.numel() / std::max<Index>(b * c, 1)});
  return reshape(max_axis(flat, 2), Shape{b, c, 1, 1, 1});
}

// ---------------------------------------------------------------------------
// Attention

/// Multi-head scaled dot-product attention over token-major (B, N, d)
/// queries, keys and values. Head h reads feature columns [h*d/heads,
/// (h+1)*d/heads). When `weights` is given it receives the attention
/// probabilities laid out (B, heads, N, N).
template <class Scalar>
Tensor<Scalar> multi_head_attention(const Tensor<Scalar>& q, const Tensor<Scalar>& k, const Tensor<Scalar>& v,
                                    Index heads, std::vector<Scalar>* weights = nullptr) {
  if (q.rank() != 3 || q.shape() != k.shape() || q.shape() != v.shape())
    throw ShapeError("attention expects matching (B, N, d) operands");
  const Index batch = q.dim(0), n = q.dim(1), d = q.dim(2);
  if (heads <= 0 || d % heads != 0)
    throw ShapeError("embedding axis 2 of size " + std::to_string(d) + " is not divisible by " +
                     std::to_string(heads) + " heads");
  const Index dh = d / heads;
  const Scalar scale_factor = Scalar(1) / std::sqrt(static_cast<Scalar>(dh));
  using Strided = Eigen::Map<const RowMatrix<Scalar>, 0, Eigen::OuterStride<>>;
  using StridedMut = Eigen::Map<RowMatrix<Scalar>, 0, Eigen::OuterStride<>>;

  Tensor<Scalar> out(q.shape());
  std::vector<Scalar> probs(static_cast<std::size_t>(batch * heads * n * n));
  for (Index b = 0; b < batch; ++b)
    for (Index h = 0; h < heads; ++h) {
      const Index off = b * n * d + h * dh;
      Strided Q(q.data().data() + off, n, dh, Eigen::OuterStride<>(d));
      Strided K(k.data().data() + off, n, dh, Eigen::OuterStride<>(d));
      Strided V(v.data().data() + off, n, dh, Eigen::OuterStride<>(d));
      MatrixMap<Scalar> A(probs.data() + (b * heads + h) * n * n, n, n);
      A.noalias() = (Q * K.transpose()) * scale_factor;
      for (Index r = 0; r < n; ++r) {
        auto row = A.row(r);
        row.array() = (row.array() - row.maxCoeff()).exp();
        row /= row.sum();
      }
      StridedMut O(out.data().data() + off, n, dh, Eigen::OuterStride<>(d));
      O.noalias() = A * V;
    }
  if (weights) *weights = probs;
  detail::record<Scalar>(
      {&q, &k, &v}, out,
      [q, k, v, probs = std::move(probs), batch, n, d, dh, heads, scale_factor](std::span<const Scalar> g) mutable {
        std::span<Scalar> gq, gk, gv;
        if (q.requires_grad()) gq = q.grad_buffer();
        if (k.requires_grad()) gk = k.grad_buffer();
        if (v.requires_grad()) gv = v.grad_buffer();
        RowMatrix<Scalar> dA(n, n), dS(n, n);
        for (Index b = 0; b < batch; ++b)
          for (Index h = 0; h < heads; ++h) {
            const Index off = b * n * d + h * dh;
            Strided Q(std::as_const(q).data().data() + off, n, dh, Eigen::OuterStride<>(d));
            Strided K(std::as_const(k).data().data() + off, n, dh, Eigen::OuterStride<>(d));
            Strided V(std::as_const(v).data().data() + off, n, dh, Eigen::OuterStride<>(d));
            Strided G(g.data() + off, n, dh, Eigen::OuterStride<>(d));
            ConstMatrixMap<Scalar> A(probs.data() + (b * heads + h) * n * n, n, n);
            if (!gv.empty()) StridedMut(gv.data() + off, n, dh, Eigen::OuterStride<>(d)).noalias() += A.transpose() * G;
            if (gq.empty() && gk.empty()) continue;
            dA.noalias() = G * V.transpose();
            for (Index r = 0; r < n; ++r) {
              const Scalar dot = dA.row(r).dot(A.row(r));
              dS.row(r).array() = A.row(r).array() * (dA.row(r).array() - dot);
            }
            dS *= scale_factor;
            if (!gq.empty()) StridedMut(gq.data() + off, n, dh, Eigen::OuterStride<>(d)).noalias() += dS * K;
            if (!gk.empty())
              StridedMut(gk.data() + off, n, dh, Eigen::OuterStride<>(d)).noalias() += dS.transpose() * Q;
          }
      });
  return out;
}

}  // namespace bitr
