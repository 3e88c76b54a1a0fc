#pragma once

// 3x3x3 convolution and its transpose over (B, C, X, Y, Z) volumes.
//
// Both kernels share one tap decomposition: for each of the 27 kernel taps a
// "gather" map sends every voxel of the coarse grid to the voxel of the fine
// grid it reads (or -1 for zero padding). A forward convolution is a sum of
// per-tap GEMMs over gathered slabs; the transposed convolution is the exact
// adjoint, scattering through the same maps.

#include <array>

#include "bitr/ops.hpp"

namespace bitr {

/// Geometry of a 3x3x3 convolution. Weights are laid out (A, B, 3, 3, 3)
/// where for a forward convolution A = out_channels, B = in_channels, and for
/// a transposed convolution A = in_channels, B = out_channels.
struct ConvSpec {
  static constexpr Index kernel = 3;
  Index in_channels = 1;
  Index out_channels = 1;
  Index stride = 1;
  Index padding = 1;
  bool transposed = false;

  /// Extra trailing voxels of a transposed convolution so a stride-2
  /// upsample exactly doubles each axis.
  Index output_padding() const { return transposed ? stride - 1 : 0; }

  Index forward_extent(Index n) const { return (n + 2 * padding - kernel) / stride + 1; }
  Index transposed_extent(Index n) const { return (n - 1) * stride - 2 * padding + kernel + output_padding(); }
  Index output_extent(Index n) const { return transposed ? transposed_extent(n) : forward_extent(n); }

  Shape weight_shape() const {
    return transposed ? Shape{in_channels, out_channels, kernel, kernel, kernel}
                      : Shape{out_channels, in_channels, kernel, kernel, kernel};
  }
};

namespace detail {

struct TapMaps {
  std::array<Index, 3> fine{};
  std::array<Index, 3> coarse{};
  Index fine_voxels = 0;
  Index coarse_voxels = 0;
  std::vector<std::vector<std::int32_t>> gather;  // [tap][coarse voxel] -> fine voxel or -1
};

inline TapMaps build_tap_maps(const std::array<Index, 3>& fine, const std::array<Index, 3>& coarse, Index stride,
                              Index padding) {
  TapMaps m;
  m.fine = fine;
  m.coarse = coarse;
  m.fine_voxels = fine[0] * fine[1] * fine[2];
  m.coarse_voxels = coarse[0] * coarse[1] * coarse[2];
  m.gather.assign(27, std::vector<std::int32_t>(static_cast<std::size_t>(m.coarse_voxels), -1));
  for (Index kx = 0; kx < 3; ++kx)
    for (Index ky = 0; ky < 3; ++ky)
      for (Index kz = 0; kz < 3; ++kz) {
        auto& map = m.gather[static_cast<std::size_t>((kx * 3 + ky) * 3 + kz)];
        for (Index x = 0; x < coarse[0]; ++x) {
          const Index fx = x * stride - padding + kx;
          if (fx < 0 || fx >= fine[0]) continue;
          for (Index y = 0; y < coarse[1]; ++y) {
            const Index fy = y * stride - padding + ky;
            if (fy < 0 || fy >= fine[1]) continue;
            for (Index z = 0; z < coarse[2]; ++z) {
              const Index fz = z * stride - padding + kz;
              if (fz < 0 || fz >= fine[2]) continue;
              map[static_cast<std::size_t>((x * coarse[1] + y) * coarse[2] + z)] =
                  static_cast<std::int32_t>((fx * fine[1] + fy) * fine[2] + fz);
            }
          }
        }
      }
  return m;
}

/// slab(c, o) = fine(c, map[o]) or 0.
template <class Scalar>
void gather(const Scalar* fine, Index channels, Index fine_voxels, const std::vector<std::int32_t>& map,
            RowMatrix<Scalar>& slab) {
  const Index n = static_cast<Index>(map.size());
  slab.resize(channels, n);
  for (Index c = 0; c < channels; ++c) {
    const Scalar* src = fine + c * fine_voxels;
    Scalar* dst = slab.data() + c * n;
    for (Index o = 0; o < n; ++o) {
      const auto f = map[static_cast<std::size_t>(o)];
      dst[o] = f >= 0 ? src[f] : Scalar(0);
    }
  }
}

/// fine(c, map[o]) += slab(c, o).
template <class Scalar>
void scatter_add(const RowMatrix<Scalar>& slab, const std::vector<std::int32_t>& map, Scalar* fine,
                 Index fine_voxels) {
  const Index n = static_cast<Index>(map.size());
  for (Index c = 0; c < slab.rows(); ++c) {
    Scalar* dst = fine + c * fine_voxels;
    const Scalar* src = slab.data() + c * n;
    for (Index o = 0; o < n; ++o) {
      const auto f = map[static_cast<std::size_t>(o)];
      if (f >= 0) dst[f] += src[o];
    }
  }
}

/// Per-tap (A x B) weight matrices.
template <class Scalar>
std::vector<RowMatrix<Scalar>> tap_matrices(std::span<const Scalar> w, Index a, Index b) {
  std::vector<RowMatrix<Scalar>> taps(27, RowMatrix<Scalar>(a, b));
  for (Index i = 0; i < a; ++i)
    for (Index j = 0; j < b; ++j)
      for (Index t = 0; t < 27; ++t) taps[static_cast<std::size_t>(t)](i, j) = w[(i * b + j) * 27 + t];
  return taps;
}

template <class Scalar>
void accumulate_tap_gradient(const RowMatrix<Scalar>& grad_tap, std::span<Scalar> gw, Index t) {
  const Index a = grad_tap.rows(), b = grad_tap.cols();
  for (Index i = 0; i < a; ++i)
    for (Index j = 0; j < b; ++j) gw[(i * b + j) * 27 + t] += grad_tap(i, j);
}

inline void check_conv_operands(const Shape& x, const ConvSpec& spec, const Shape& w, Index bias_numel,
                                bool has_bias) {
  if (x.size() != 5) throw ShapeError("convolution input must be (B, C, X, Y, Z), got " + to_string(x));
  if (x[1] != spec.in_channels)
    throw ShapeError("convolution channel mismatch on axis 1: expected " + std::to_string(spec.in_channels) +
                     ", got " + std::to_string(x[1]));
  for (std::size_t ax = 2; ax < 5; ++ax)
    if (x[ax] <= 0) throw ShapeError("convolution rejects zero-size spatial axis " + std::to_string(ax));
  const Shape expected = spec.weight_shape();
  if (w != expected)
    for (std::size_t ax = 0; ax < 5; ++ax)
      if (ax >= w.size() || w[ax] != expected[ax])
        throw ShapeError("convolution weight mismatch on axis " + std::to_string(ax) + ": expected " +
                         to_string(expected) + ", got " + to_string(w));
  if (has_bias && bias_numel != spec.out_channels) throw ShapeError("convolution bias mismatch on axis 0");
  if (spec.stride < 1) throw ShapeError("convolution stride must be positive");
}

}  // namespace detail

/// Forward 3x3x3 convolution. An empty `bias` (numel 0) means no bias term.
template <class Scalar>
Tensor<Scalar> conv3d(const Tensor<Scalar>& input, const ConvSpec& spec, const Tensor<Scalar>& weight,
                      const Tensor<Scalar>& bias = Tensor<Scalar>()) {
  if (spec.transposed) throw ShapeError("conv3d called with a transposed spec");
  const bool has_bias = bias.numel() > 0;
  detail::check_conv_operands(input.shape(), spec, weight.shape(), bias.numel(), has_bias);
  const Index batch = input.dim(0);
  const std::array<Index, 3> fine{input.dim(2), input.dim(3), input.dim(4)};
  std::array<Index, 3> coarse{};
  for (int a = 0; a < 3; ++a) {
    coarse[a] = spec.forward_extent(fine[a]);
    if (coarse[a] <= 0) throw ShapeError("convolution output is empty on axis " + std::to_string(a + 2));
  }
  auto maps = std::make_shared<detail::TapMaps>(detail::build_tap_maps(fine, coarse, spec.stride, spec.padding));
  const Index cin = spec.in_channels, cout = spec.out_channels;
  Tensor<Scalar> out(Shape{batch, cout, coarse[0], coarse[1], coarse[2]});
  auto taps = detail::tap_matrices<Scalar>(weight.data(), cout, cin);
  RowMatrix<Scalar> slab;
  for (Index n = 0; n < batch; ++n) {
    MatrixMap<Scalar> Y(out.data().data() + n * cout * maps->coarse_voxels, cout, maps->coarse_voxels);
    for (Index t = 0; t < 27; ++t) {
      detail::gather(input.data().data() + n * cin * maps->fine_voxels, cin, maps->fine_voxels,
                     maps->gather[static_cast<std::size_t>(t)], slab);
      Y.noalias() += taps[static_cast<std::size_t>(t)] * slab;
    }
    if (has_bias) Y.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.data().data(), cout);
  }
  detail::record<Scalar>({&input, &weight, &bias}, out,
                         [input, weight, bias, maps, batch, cin, cout, has_bias](std::span<const Scalar> g) {
                           const Index nf = maps->fine_voxels, nc = maps->coarse_voxels;
                           auto taps = detail::tap_matrices<Scalar>(weight.data(), cout, cin);
                           std::span<Scalar> gx, gw;
                           if (input.requires_grad()) gx = input.grad_buffer();
                           if (weight.requires_grad()) gw = weight.grad_buffer();
                           RowMatrix<Scalar> slab, grad_tap, dslab;
                           for (Index n = 0; n < batch; ++n) {
                             ConstMatrixMap<Scalar> G(g.data() + n * cout * nc, cout, nc);
                             for (Index t = 0; t < 27; ++t) {
                               const auto& map = maps->gather[static_cast<std::size_t>(t)];
                               if (!gw.empty()) {
                                 detail::gather(input.data().data() + n * cin * nf, cin, nf, map, slab);
                                 grad_tap.noalias() = G * slab.transpose();
                                 detail::accumulate_tap_gradient<Scalar>(grad_tap, gw, t);
                               }
                               if (!gx.empty()) {
                                 dslab.noalias() = taps[static_cast<std::size_t>(t)].transpose() * G;
                                 detail::scatter_add<Scalar>(dslab, map, gx.data() + n * cin * nf, nf);
                               }
                             }
                             if (has_bias && bias.requires_grad()) {
                               auto gb = bias.grad_buffer();
                               for (Index c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                             }
                           }
                         });
  return out;
}

/// Transposed 3x3x3 convolution, the adjoint of conv3d with the same weight.
/// With stride 2 and padding 1 each spatial axis exactly doubles.
template <class Scalar>
Tensor<Scalar> conv_transpose3d(const Tensor<Scalar>& input, const ConvSpec& spec, const Tensor<Scalar>& weight,
                                const Tensor<Scalar>& bias = Tensor<Scalar>()) {
  if (!spec.transposed) throw ShapeError("conv_transpose3d needs a transposed spec");
  const bool has_bias = bias.numel() > 0;
  detail::check_conv_operands(input.shape(), spec, weight.shape(), bias.numel(), has_bias);
  const Index batch = input.dim(0);
  const std::array<Index, 3> coarse{input.dim(2), input.dim(3), input.dim(4)};
  std::array<Index, 3> fine{};
  for (int a = 0; a < 3; ++a) {
    fine[a] = spec.transposed_extent(coarse[a]);
    if (fine[a] <= 0) throw ShapeError("transposed convolution output is empty on axis " + std::to_string(a + 2));
  }
  auto maps = std::make_shared<detail::TapMaps>(detail::build_tap_maps(fine, coarse, spec.stride, spec.padding));
  const Index cin = spec.in_channels, cout = spec.out_channels;
  Tensor<Scalar> out(Shape{batch, cout, fine[0], fine[1], fine[2]});
  auto taps = detail::tap_matrices<Scalar>(weight.data(), cin, cout);
  RowMatrix<Scalar> slab;
  for (Index n = 0; n < batch; ++n) {
    ConstMatrixMap<Scalar> X(input.data().data() + n * cin * maps->coarse_voxels, cin, maps->coarse_voxels);
    Scalar* y = out.data().data() + n * cout * maps->fine_voxels;
    for (Index t = 0; t < 27; ++t) {
      slab.noalias() = taps[static_cast<std::size_t>(t)].transpose() * X;
      detail::scatter_add<Scalar>(slab, maps->gather[static_cast<std::size_t>(t)], y, maps->fine_voxels);
    }
    if (has_bias)
      MatrixMap<Scalar>(y, cout, maps->fine_voxels).colwise() +=
          Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias.data().data(), cout);
  }
  detail::record<Scalar>({&input, &weight, &bias}, out,
                         [input, weight, bias, maps, batch, cin, cout, has_bias](std::span<const Scalar> g) {
                           const Index nf = maps->fine_voxels, nc = maps->coarse_voxels;
                           auto taps = detail::tap_matrices<Scalar>(weight.data(), cin, cout);
                           std::span<Scalar> gx, gw;
                           if (input.requires_grad()) gx = input.grad_buffer();
                           if (weight.requires_grad()) gw = weight.grad_buffer();
                           RowMatrix<Scalar> slab, grad_tap;
                           for (Index n = 0; n < batch; ++n) {
                             ConstMatrixMap<Scalar> X(input.data().data() + n * cin * nc, cin, nc);
                             for (Index t = 0; t < 27; ++t) {
                               detail::gather(g.data() + n * cout * nf, cout, nf,
                                              maps->gather[static_cast<std::size_t>(t)], slab);
                               if (!gx.empty())
                                 MatrixMap<Scalar>(gx.data() + n * cin * nc, cin, nc).noalias() +=
                                     taps[static_cast<std::size_t>(t)] * slab;
                               if (!gw.empty()) {
                                 grad_tap.noalias() = X * slab.transpose();
                                 detail::accumulate_tap_gradient<Scalar>(grad_tap, gw, t);
                               }
                             }
                             if (has_bias && bias.requires_grad()) {
                               auto gb = bias.grad_buffer();
                               ConstMatrixMap<Scalar> G(g.data() + n * cout * nf, cout, nf);
                               for (Index c = 0; c < cout; ++c) gb[c] += G.row(c).sum();
                             }
                           }
                         });
  return out;
}

}  // namespace bitr
