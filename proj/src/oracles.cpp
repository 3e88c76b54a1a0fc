#include "bitr/oracles.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>

namespace bitr::oracle {

Tensor<double> naive_conv3d(const Tensor<double>& input, const ConvSpec& spec, const Tensor<double>& weight,
                            const Tensor<double>& bias) {
  const Index batch = input.dim(0), cin = spec.in_channels, cout = spec.out_channels;
  const Index ix = input.dim(2), iy = input.dim(3), iz = input.dim(4);
  const Index s = spec.stride, p = spec.padding;
  const Index ox = spec.output_extent(ix), oy = spec.output_extent(iy), oz = spec.output_extent(iz);
  Tensor<double> out(Shape{batch, cout, ox, oy, oz});
  auto at_in = [&](Index n, Index c, Index x, Index y, Index z) {
    return input[(((n * cin + c) * ix + x) * iy + y) * iz + z];
  };
  auto out_ref = [&](Index n, Index c, Index x, Index y, Index z) -> double& {
    return out[(((n * cout + c) * ox + x) * oy + y) * oz + z];
  };
  if (!spec.transposed) {
    // weight (cout, cin, 3, 3, 3)
    for (Index n = 0; n < batch; ++n)
      for (Index co = 0; co < cout; ++co)
        for (Index x = 0; x < ox; ++x)
          for (Index y = 0; y < oy; ++y)
            for (Index z = 0; z < oz; ++z) {
              double acc = bias.numel() ? bias[co] : 0.0;
              for (Index ci = 0; ci < cin; ++ci)
                for (Index kx = 0; kx < 3; ++kx)
                  for (Index ky = 0; ky < 3; ++ky)
                    for (Index kz = 0; kz < 3; ++kz) {
                      const Index xx = x * s - p + kx, yy = y * s - p + ky, zz = z * s - p + kz;
                      if (xx < 0 || yy < 0 || zz < 0 || xx >= ix || yy >= iy || zz >= iz) continue;
                      acc += weight[(((co * cin + ci) * 3 + kx) * 3 + ky) * 3 + kz] * at_in(n, ci, xx, yy, zz);
                    }
              out_ref(n, co, x, y, z) = acc;
            }
  } else {
    // weight (cin, cout, 3, 3, 3); every input voxel scatters through every tap.
    for (Index n = 0; n < batch; ++n) {
      for (Index co = 0; co < cout; ++co)
        for (Index x = 0; x < ox; ++x)
          for (Index y = 0; y < oy; ++y)
            for (Index z = 0; z < oz; ++z) out_ref(n, co, x, y, z) = bias.numel() ? bias[co] : 0.0;
      for (Index ci = 0; ci < cin; ++ci)
        for (Index x = 0; x < ix; ++x)
          for (Index y = 0; y < iy; ++y)
            for (Index z = 0; z < iz; ++z)
              for (Index co = 0; co < cout; ++co)
                for (Index kx = 0; kx < 3; ++kx)
                  for (Index ky = 0; ky < 3; ++ky)
                    for (Index kz = 0; kz < 3; ++kz) {
                      const Index xx = x * s - p + kx, yy = y * s - p + ky, zz = z * s - p + kz;
                      if (xx < 0 || yy < 0 || zz < 0 || xx >= ox || yy >= oy || zz >= oz) continue;
                      out_ref(n, co, xx, yy, zz) +=
                          weight[(((ci * cout + co) * 3 + kx) * 3 + ky) * 3 + kz] * at_in(n, ci, x, y, z);
                    }
    }
  }
  return out;
}

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b) {
  const Index m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<double> out(Shape{m, n});
  for (Index i = 0; i < m; ++i)
    for (Index j = 0; j < n; ++j) {
      double acc = 0;
      for (Index t = 0; t < k; ++t) acc += a[i * k + t] * b[t * n + j];
      out[i * n + j] = acc;
    }
  return out;
}

SegmentationMask brute_force_vote(const std::vector<SegmentationMask>& masks,
                                  const std::vector<ProbabilityMap>& probs) {
  const Grid grid = masks.at(0).grid;
  const int classes = probs.at(0).classes;
  const auto n = static_cast<double>(masks.size());
  SegmentationMask out(grid);
  for (Index v = 0; v < grid.voxels(); ++v) {
    std::vector<int> tally(static_cast<std::size_t>(classes), 0);
    for (int k = 0; k < classes; ++k)
      for (const auto& m : masks)
        if (m.labels[static_cast<std::size_t>(v)] == k) ++tally[static_cast<std::size_t>(k)];
    const int top = *std::max_element(tally.begin(), tally.end());
    std::vector<int> tied;
    for (int k = 0; k < classes; ++k)
      if (tally[static_cast<std::size_t>(k)] == top) tied.push_back(k);
    int chosen = tied.front();
    if (tied.size() > 1) {
      double best = -std::numeric_limits<double>::infinity();
      for (int k : tied) {
        double total = 0;
        for (const auto& p : probs) total += p.at(k, v);
        const double avg = total / n;
        if (avg > best) {
          best = avg;
          chosen = k;
        }
      }
    }
    out.labels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(chosen);
  }
  return out;
}

std::vector<std::vector<Index>> flood_fill_components(const SegmentationMask& mask, std::uint8_t label) {
  const Grid g = mask.grid;
  std::vector<bool> seen(static_cast<std::size_t>(g.voxels()), false);
  std::vector<std::vector<Index>> components;
  for (Index x = 0; x < g.x; ++x)
    for (Index y = 0; y < g.y; ++y)
      for (Index z = 0; z < g.z; ++z) {
        const Index start = g.offset(x, y, z);
        if (seen[static_cast<std::size_t>(start)] || mask.labels[static_cast<std::size_t>(start)] != label) continue;
        std::vector<Index> comp;
        std::deque<std::array<Index, 3>> queue{{x, y, z}};
        seen[static_cast<std::size_t>(start)] = true;
        while (!queue.empty()) {
          auto [cx, cy, cz] = queue.front();
          queue.pop_front();
          comp.push_back(g.offset(cx, cy, cz));
          for (Index dx = -1; dx <= 1; ++dx)
            for (Index dy = -1; dy <= 1; ++dy)
              for (Index dz = -1; dz <= 1; ++dz) {
                const Index nx = cx + dx, ny = cy + dy, nz = cz + dz;
                if (!g.contains(nx, ny, nz)) continue;
                const Index o = g.offset(nx, ny, nz);
                if (seen[static_cast<std::size_t>(o)] || mask.labels[static_cast<std::size_t>(o)] != label) continue;
                seen[static_cast<std::size_t>(o)] = true;
                queue.push_back({nx, ny, nz});
              }
        }
        components.push_back(std::move(comp));
      }
  return components;
}

SegmentationMask flood_fill_threshold(const SegmentationMask& mask, const std::vector<Index>& min_voxels) {
  SegmentationMask out = mask;
  for (std::size_t k = 1; k < min_voxels.size(); ++k)
    for (const auto& comp : flood_fill_components(mask, static_cast<std::uint8_t>(k)))
      if (static_cast<Index>(comp.size()) < min_voxels[k])
        for (Index v : comp) out.labels[static_cast<std::size_t>(v)] = 0;
  return out;
}

std::vector<std::array<Index, 3>> surface_voxels(const BinaryVolume& v) {
  const Grid g = v.grid;
  std::vector<std::array<Index, 3>> out;
  auto on = [&](Index x, Index y, Index z) { return g.contains(x, y, z) && v.on[static_cast<std::size_t>(g.offset(x, y, z))]; };
  for (Index x = 0; x < g.x; ++x)
    for (Index y = 0; y < g.y; ++y)
      for (Index z = 0; z < g.z; ++z) {
        if (!on(x, y, z)) continue;
        const bool interior = on(x - 1, y, z) && on(x + 1, y, z) && on(x, y - 1, z) && on(x, y + 1, z) &&
                              on(x, y, z - 1) && on(x, y, z + 1);
        if (!interior) out.push_back({x, y, z});
      }
  return out;
}

double all_pairs_hd95(const BinaryVolume& a, const BinaryVolume& b, const std::array<double, 3>& spacing,
                      double empty_sentinel) {
  const auto sa = surface_voxels(a), sb = surface_voxels(b);
  if (sa.empty() && sb.empty()) return 0.0;
  if (sa.empty() || sb.empty()) return empty_sentinel;
  std::vector<double> pooled;
  auto directed = [&](const auto& from, const auto& to) {
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) {
        double d2 = 0;
        for (int i = 0; i < 3; ++i) {
          const double d = static_cast<double>(p[i] - q[i]) * spacing[static_cast<std::size_t>(i)];
          d2 += d * d;
        }
        best = std::min(best, d2);
      }
      pooled.push_back(std::sqrt(best));
    }
  };
  directed(sa, sb);
  directed(sb, sa);
  std::sort(pooled.begin(), pooled.end());
  const double pos = 0.95 * static_cast<double>(pooled.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, pooled.size() - 1);
  return pooled[lo] + (pos - static_cast<double>(lo)) * (pooled[hi] - pooled[lo]);
}

double counting_dice(const BinaryVolume& a, const BinaryVolume& b) {
  Index na = 0, nb = 0, both = 0;
  for (std::size_t i = 0; i < a.on.size(); ++i) {
    na += a.on[i] != 0;
    nb += b.on[i] != 0;
    both += a.on[i] != 0 && b.on[i] != 0;
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

}  // namespace bitr::oracle
