#include "bitr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <ostream>

namespace bitr {

const std::array<RegionSpec, 3>& standard_regions() {
  static const std::array<RegionSpec, 3> regions{
      RegionSpec{"WT", {1, 2, 4}}, RegionSpec{"TC", {1, 4}}, RegionSpec{"ET", {4}}};
  return regions;
}

BinaryVolume region_mask(const SegmentationMask& mask, const RegionSpec& region) {
  std::array<bool, kNumClasses> in{};
  for (int c = 0; c < kNumClasses; ++c)
    in[static_cast<std::size_t>(c)] =
        std::find(region.labels.begin(), region.labels.end(), external_label(c)) != region.labels.end();
  BinaryVolume out(mask.grid);
  for (std::size_t i = 0; i < mask.labels.size(); ++i) out.on[i] = in.at(mask.labels[i]) ? 1 : 0;
  return out;
}

namespace {

void check_same(const BinaryVolume& a, const BinaryVolume& b) {
  if (!(a.grid == b.grid) || a.on.size() != b.on.size()) throw ShapeError("prediction and truth grids differ");
}

}  // namespace

Confusion confusion(const BinaryVolume& pred, const BinaryVolume& truth) {
  check_same(pred, truth);
  Confusion c;
  for (std::size_t i = 0; i < pred.on.size(); ++i) {
    const bool p = pred.on[i] != 0, t = truth.on[i] != 0;
    if (p && t) ++c.tp;
    else if (p) ++c.fp;
    else if (t) ++c.fn;
    else ++c.tn;
  }
  return c;
}

double dice(const BinaryVolume& pred, const BinaryVolume& truth) {
  const auto c = confusion(pred, truth);
  const Index denom = 2 * c.tp + c.fp + c.fn;
  return denom == 0 ? 1.0 : 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

double sensitivity(const BinaryVolume& pred, const BinaryVolume& truth) {
  const auto c = confusion(pred, truth);
  return c.tp + c.fn == 0 ? 1.0 : static_cast<double>(c.tp) / static_cast<double>(c.tp + c.fn);
}

double specificity(const BinaryVolume& pred, const BinaryVolume& truth) {
  const auto c = confusion(pred, truth);
  return c.tn + c.fp == 0 ? 1.0 : static_cast<double>(c.tn) / static_cast<double>(c.tn + c.fp);
}

BinaryVolume surface(const BinaryVolume& v) {
  const Grid g = v.grid;
  BinaryVolume out(g);
  static constexpr Index steps[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
  for (Index x = 0; x < g.x; ++x)
    for (Index y = 0; y < g.y; ++y)
      for (Index z = 0; z < g.z; ++z) {
        const Index i = g.offset(x, y, z);
        if (!v.on[static_cast<std::size_t>(i)]) continue;
        for (const auto& s : steps) {
          const Index nx = x + s[0], ny = y + s[1], nz = z + s[2];
          if (!g.contains(nx, ny, nz) || !v.on[static_cast<std::size_t>(g.offset(nx, ny, nz))]) {
            out.on[static_cast<std::size_t>(i)] = 1;
            break;
          }
        }
      }
  return out;
}

namespace {

/// Lower envelope of parabolas (q * h - p * h)^2 + f[p] along one line;
/// Felzenszwalb and Huttenlocher's squared-distance transform.
void envelope_1d(std::vector<double>& f, double h, std::vector<Index>& v, std::vector<double>& z,
                 std::vector<double>& out) {
  const auto n = static_cast<Index>(f.size());
  const double inf = std::numeric_limits<double>::infinity();
  Index k = -1;
  for (Index q = 0; q < n; ++q) {
    if (f[static_cast<std::size_t>(q)] == inf) continue;
    const double fq = f[static_cast<std::size_t>(q)], xq = static_cast<double>(q) * h;
    while (k >= 0) {
      const Index p = v[static_cast<std::size_t>(k)];
      const double xp = static_cast<double>(p) * h;
      const double s = ((fq + xq * xq) - (f[static_cast<std::size_t>(p)] + xp * xp)) / (2.0 * (xq - xp));
      if (s <= z[static_cast<std::size_t>(k)]) {
        --k;
      } else {
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k + 1)] = inf;
        break;
      }
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -inf;
      z[1] = inf;
    }
  }
  if (k < 0) {
    std::fill(out.begin(), out.end(), inf);
  } else {
    Index j = 0;
    for (Index q = 0; q < n; ++q) {
      const double xq = static_cast<double>(q) * h;
      while (z[static_cast<std::size_t>(j + 1)] < xq) ++j;
      const Index p = v[static_cast<std::size_t>(j)];
      const double d = xq - static_cast<double>(p) * h;
      out[static_cast<std::size_t>(q)] = d * d + f[static_cast<std::size_t>(p)];
    }
  }
  f.swap(out);
}

}  // namespace

std::vector<double> distance_transform(const BinaryVolume& targets, const std::array<double, 3>& spacing) {
  const Grid g = targets.grid;
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> d(static_cast<std::size_t>(g.voxels()));
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = targets.on[i] ? 0.0 : inf;
  const std::array<Index, 3> dims{g.x, g.y, g.z};
  const std::array<Index, 3> stride{g.y * g.z, g.z, 1};
  for (int axis = 0; axis < 3; ++axis) {
    const Index n = dims[static_cast<std::size_t>(axis)], st = stride[static_cast<std::size_t>(axis)];
    std::vector<double> line(static_cast<std::size_t>(n)), scratch(static_cast<std::size_t>(n)),
        z(static_cast<std::size_t>(n + 1));
    std::vector<Index> v(static_cast<std::size_t>(n));
    for (Index base = 0; base < g.voxels(); ++base) {
      if ((base / st) % n != 0) continue;  // start of a line along `axis`
      for (Index i = 0; i < n; ++i) line[static_cast<std::size_t>(i)] = d[static_cast<std::size_t>(base + i * st)];
      envelope_1d(line, spacing[static_cast<std::size_t>(axis)], v, z, scratch);
      for (Index i = 0; i < n; ++i) d[static_cast<std::size_t>(base + i * st)] = line[static_cast<std::size_t>(i)];
    }
  }
  for (auto& x : d) x = std::sqrt(x);
  return d;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("percentile of an empty set");
  if (q < 0 || q > 1) throw std::invalid_argument("percentile rank outside [0, 1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double hd95(const BinaryVolume& pred, const BinaryVolume& truth, const std::array<double, 3>& spacing,
            const HdConfig& cfg) {
  check_same(pred, truth);
  const auto sp = surface(pred), st = surface(truth);
  const bool ep = sp.count() == 0, et = st.count() == 0;
  if (ep && et) return 0.0;
  if (ep || et) return cfg.empty_sentinel;
  const auto to_truth = distance_transform(st, spacing), to_pred = distance_transform(sp, spacing);
  std::vector<double> a, b;
  for (std::size_t i = 0; i < sp.on.size(); ++i) {
    if (sp.on[i]) a.push_back(to_truth[i]);
    if (st.on[i]) b.push_back(to_pred[i]);
  }
  if (cfg.pooling == HdPooling::max_directed) return std::max(percentile(a, 0.95), percentile(b, 0.95));
  a.insert(a.end(), b.begin(), b.end());
  return percentile(std::move(a), 0.95);
}

CaseMetrics evaluate_case(const std::string& id, const SegmentationMask& pred, const SegmentationMask& truth,
                          const std::array<double, 3>& spacing, const HdConfig& cfg) {
  if (!(pred.grid == truth.grid)) throw ShapeError("case '" + id + "': prediction and truth grids differ");
  CaseMetrics out;
  out.id = id;
  for (std::size_t r = 0; r < 3; ++r) {
    const auto p = region_mask(pred, standard_regions()[r]), t = region_mask(truth, standard_regions()[r]);
    out.regions[r] = {dice(p, t), hd95(p, t, spacing, cfg), sensitivity(p, t), specificity(p, t)};
  }
  return out;
}

Summary summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("cannot summarize an empty set of cases");
  Summary s;
  for (double v : values) s.mean += v;
  s.mean /= static_cast<double>(values.size());
  for (double v : values) s.sd += (v - s.mean) * (v - s.mean);
  s.sd = std::sqrt(s.sd / static_cast<double>(values.size()));
  s.median = percentile(values, 0.5);
  s.p25 = percentile(values, 0.25);
  s.p75 = percentile(values, 0.75);
  return s;
}

void write_report(std::ostream& os, const std::vector<CaseMetrics>& cases) {
  os << std::setprecision(10);
  os << "case\tregion\tdice\thd95\tsensitivity\tspecificity\n";
  for (const auto& c : cases)
    for (std::size_t r = 0; r < 3; ++r) {
      const auto& m = c.regions[r];
      os << c.id << '\t' << standard_regions()[r].name << '\t' << m.dice << '\t' << m.hd95 << '\t' << m.sensitivity
         << '\t' << m.specificity << '\n';
    }
  if (cases.empty()) return;
  os << "\nstatistic\tregion\tdice\thd95\tsensitivity\tspecificity\n";
  const std::array<const char*, 5> names{"Mean", "StdDev", "Median", "25quantile", "75quantile"};
  for (std::size_t stat = 0; stat < names.size(); ++stat)
    for (std::size_t r = 0; r < 3; ++r) {
      std::array<std::vector<double>, 4> cols;
      for (const auto& c : cases) {
        const auto& m = c.regions[r];
        cols[0].push_back(m.dice);
        cols[1].push_back(m.hd95);
        cols[2].push_back(m.sensitivity);
        cols[3].push_back(m.specificity);
      }
      os << names[stat] << '\t' << standard_regions()[r].name;
      for (const auto& col : cols) {
        const auto s = summarize(col);
        const std::array<double, 5> v{s.mean, s.sd, s.median, s.p25, s.p75};
        os << '\t' << v[stat];
      }
      os << '\n';
    }
}

}  // namespace bitr
