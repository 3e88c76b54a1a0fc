#include "bitr/inference.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>

#include "bitr/binary_io.hpp"

namespace bitr {

std::array<FlipCombo, 8> all_flips() {
  std::array<FlipCombo, 8> out;
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = {(i & 4) != 0, (i & 2) != 0, (i & 1) != 0};
  return out;
}

namespace {

/// Source offset of every destination voxel under a flip.
std::vector<Index> flip_index(const Grid& g, FlipCombo f) {
  std::vector<Index> idx(static_cast<std::size_t>(g.voxels()));
  for (Index x = 0; x < g.x; ++x)
    for (Index y = 0; y < g.y; ++y)
      for (Index z = 0; z < g.z; ++z)
        idx[static_cast<std::size_t>(g.offset(x, y, z))] =
            g.offset(f.x ? g.x - 1 - x : x, f.y ? g.y - 1 - y : y, f.z ? g.z - 1 - z : z);
  return idx;
}

template <class T>
void flip_planes(const std::vector<T>& src, std::vector<T>& dst, const Grid& g, Index planes, FlipCombo f) {
  const auto idx = flip_index(g, f);
  const Index n = g.voxels();
  for (Index p = 0; p < planes; ++p)
    for (Index v = 0; v < n; ++v)
      dst[static_cast<std::size_t>(p * n + v)] = src[static_cast<std::size_t>(p * n + idx[static_cast<std::size_t>(v)])];
}

}  // namespace

Volume4D flip(const Volume4D& v, FlipCombo f) {
  Volume4D out = v;
  flip_planes(v.data, out.data, v.grid, v.channels, f);
  return out;
}

ProbabilityMap flip(const ProbabilityMap& p, FlipCombo f) {
  ProbabilityMap out = p;
  flip_planes(p.values, out.values, p.grid, p.classes, f);
  return out;
}

SegmentationMask flip(const SegmentationMask& m, FlipCombo f) {
  SegmentationMask out = m;
  flip_planes(m.labels, out.labels, m.grid, 1, f);
  return out;
}

template <class Scalar>
ProbabilityMap model_probabilities(const BiTrUnet<Scalar>& model, const Volume4D& x) {
  Tensor<Scalar> input(Shape{1, x.channels, x.grid.x, x.grid.y, x.grid.z});
  std::copy(x.data.begin(), x.data.end(), input.data().begin());
  const auto scores = forward(model, input);
  const int k = static_cast<int>(scores.dim(1));
  ProbabilityMap p(x.grid, k);
  auto s = scores.data();
  const Index n = x.grid.voxels();
  for (Index v = 0; v < n; ++v) {
    double m = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) m = std::max(m, static_cast<double>(s[c * n + v]));
    double z = 0;
    for (int c = 0; c < k; ++c) z += p.at(c, v) = std::exp(static_cast<double>(s[c * n + v]) - m);
    for (int c = 0; c < k; ++c) p.at(c, v) /= z;
  }
  return p;
}

template ProbabilityMap model_probabilities(const BiTrUnet<float>&, const Volume4D&);
template ProbabilityMap model_probabilities(const BiTrUnet<double>&, const Volume4D&);

ProbabilityMap tta_predict(const ProbabilityFn& model, const Volume4D& x) {
  ProbabilityMap sum;
  for (const auto& f : all_flips()) {
    auto p = flip(model(flip(x, f)), f);
    if (!(p.grid == x.grid)) throw ShapeError("model returned probabilities on a different grid");
    if (sum.values.empty()) {
      sum = std::move(p);
    } else {
      if (p.classes != sum.classes) throw ShapeError("model returned a varying class count");
      for (std::size_t i = 0; i < sum.values.size(); ++i) sum.values[i] += p.values[i];
    }
  }
  for (auto& v : sum.values) v /= 8.0;
  return sum;
}

SegmentationMask majority_vote(const std::vector<SegmentationMask>& masks, const std::vector<ProbabilityMap>& probs) {
  if (masks.empty()) throw std::invalid_argument("majority vote needs at least one model");
  if (probs.size() != masks.size())
    throw std::invalid_argument(std::to_string(masks.size()) + " masks but " + std::to_string(probs.size()) +
                                " probability maps");
  const Grid g = masks[0].grid;
  const int k = probs[0].classes;
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (!(masks[i].grid == g) || !(probs[i].grid == g))
      throw ShapeError("model " + std::to_string(i) + " predicted on a different grid");
    if (probs[i].classes != k) throw ShapeError("model " + std::to_string(i) + " has a different class count");
  }
  SegmentationMask out(g);
  std::vector<int> votes(static_cast<std::size_t>(k));
  for (Index v = 0; v < g.voxels(); ++v) {
    std::fill(votes.begin(), votes.end(), 0);
    for (const auto& m : masks) {
      const int label = m.labels[static_cast<std::size_t>(v)];
      if (label >= k) throw std::out_of_range("label " + std::to_string(label) + " outside the class count");
      ++votes[static_cast<std::size_t>(label)];
    }
    const int top = *std::max_element(votes.begin(), votes.end());
    int best = -1;
    double best_p = -1.0;
    for (int c = 0; c < k; ++c) {
      if (votes[static_cast<std::size_t>(c)] != top) continue;
      double mean = 0;
      for (const auto& p : probs) mean += p.at(c, v);
      mean /= static_cast<double>(probs.size());
      if (mean > best_p) {
        best_p = mean;
        best = c;
      }
    }
    out.labels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return out;
}

PostprocStrategy parse_strategy(const std::string& name) {
  if (name == "remove-component") return PostprocStrategy::remove_component;
  if (name == "relabel-class") return PostprocStrategy::relabel_class;
  throw std::invalid_argument("unknown postprocessing strategy '" + name +
                              "' (expected remove-component or relabel-class)");
}

std::string to_string(PostprocStrategy s) {
  return s == PostprocStrategy::remove_component ? "remove-component" : "relabel-class";
}

ThresholdScope parse_scope(const std::string& name) {
  if (name == "component") return ThresholdScope::component;
  if (name == "class") return ThresholdScope::whole_class;
  throw std::invalid_argument("unknown threshold scope '" + name + "' (expected component or class)");
}

std::string to_string(ThresholdScope s) { return s == ThresholdScope::component ? "component" : "class"; }

void PostprocConfig::validate() const {
  for (std::size_t c = 0; c < thresholds.size(); ++c)
    if (thresholds[c] < 0) throw std::invalid_argument("threshold of class " + std::to_string(c) + " is negative");
  if (fallback < 0 || fallback >= kNumClasses)
    throw std::invalid_argument("fallback class " + std::to_string(fallback) + " outside [0, 4)");
}

namespace {

struct DisjointSets {
  std::vector<Index> parent;
  explicit DisjointSets(Index n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  Index find(Index a) {
    while (parent[static_cast<std::size_t>(a)] != a) {
      auto& p = parent[static_cast<std::size_t>(a)];
      p = parent[static_cast<std::size_t>(p)];
      a = p;
    }
    return a;
  }
  void unite(Index a, Index b) {
    a = find(a);
    b = find(b);
    if (a != b) parent[static_cast<std::size_t>(std::max(a, b))] = std::min(a, b);
  }
};

}  // namespace

std::vector<Index> label_components(const SegmentationMask& mask) {
  const Grid g = mask.grid;
  DisjointSets sets(g.voxels());
  auto label = [&](Index v) { return mask.labels[static_cast<std::size_t>(v)]; };
  // Half of the 26 neighbours: those earlier in scan order.
  for (Index x = 0; x < g.x; ++x)
    for (Index y = 0; y < g.y; ++y)
      for (Index z = 0; z < g.z; ++z) {
        const Index v = g.offset(x, y, z);
        if (label(v) == 0) continue;
        for (Index dx = -1; dx <= 0; ++dx)
          for (Index dy = -1; dy <= 1; ++dy)
            for (Index dz = -1; dz <= 1; ++dz) {
              if (dx == 0 && (dy > 0 || (dy == 0 && dz >= 0))) continue;
              const Index nx = x + dx, ny = y + dy, nz = z + dz;
              if (!g.contains(nx, ny, nz)) continue;
              const Index u = g.offset(nx, ny, nz);
              if (label(u) == label(v)) sets.unite(u, v);
            }
      }
  std::vector<Index> ids(static_cast<std::size_t>(g.voxels()), -1);
  std::vector<Index> root_id(static_cast<std::size_t>(g.voxels()), -1);
  Index next = 0;
  for (Index v = 0; v < g.voxels(); ++v) {
    if (label(v) == 0) continue;
    auto& r = root_id[static_cast<std::size_t>(sets.find(v))];
    if (r < 0) r = next++;
    ids[static_cast<std::size_t>(v)] = r;
  }
  return ids;
}

SegmentationMask volume_threshold_postprocess(const SegmentationMask& mask, const PostprocConfig& cfg) {
  cfg.validate();
  for (std::size_t i = 0; i < mask.labels.size(); ++i)
    if (mask.labels[i] >= kNumClasses)
      throw std::out_of_range("label " + std::to_string(mask.labels[i]) + " at voxel " + std::to_string(i));
  const bool relabel = cfg.strategy == PostprocStrategy::relabel_class;
  const std::uint8_t replacement = relabel ? static_cast<std::uint8_t>(cfg.fallback) : 0;
  auto thresholded = [&](int cls) {
    return cls != 0 && !(relabel && cls == cfg.fallback) && cfg.thresholds[static_cast<std::size_t>(cls)] > 0;
  };

  SegmentationMask out = mask;
  if (cfg.scope == ThresholdScope::whole_class) {
    std::array<Index, kNumClasses> counts{};
    for (auto l : mask.labels) ++counts[l];
    for (auto& l : out.labels)
      if (thresholded(l) && counts[l] < cfg.thresholds[l]) l = replacement;
    return out;
  }

  const auto ids = label_components(mask);
  std::vector<Index> sizes;
  for (auto id : ids)
    if (id >= 0) {
      if (id >= static_cast<Index>(sizes.size())) sizes.resize(static_cast<std::size_t>(id + 1), 0);
      ++sizes[static_cast<std::size_t>(id)];
    }
  for (std::size_t v = 0; v < out.labels.size(); ++v) {
    const auto l = out.labels[v];
    if (thresholded(l) && sizes[static_cast<std::size_t>(ids[v])] < cfg.thresholds[l]) out.labels[v] = replacement;
  }
  return out;
}

namespace {

ProbabilityMap crop_map(const ProbabilityMap& p, const std::array<Index, 3>& origin, const Grid& extent) {
  ProbabilityMap out(extent, p.classes);
  for (int k = 0; k < p.classes; ++k)
    for (Index x = 0; x < extent.x; ++x)
      for (Index y = 0; y < extent.y; ++y)
        for (Index z = 0; z < extent.z; ++z)
          out.at(k, extent.offset(x, y, z)) = p.at(k, p.grid.offset(origin[0] + x, origin[1] + y, origin[2] + z));
  return out;
}

}  // namespace

Prediction predict_case(const std::vector<ProbabilityFn>& models, const Volume4D& x, const PredictConfig& cfg) {
  if (models.empty()) throw std::invalid_argument("prediction needs at least one model");
  std::array<Index, 3> origin{};
  const auto padded = pad_to_multiple(x, ModelConfig::divisor, origin);
  Prediction out;
  std::vector<SegmentationMask> masks;
  for (const auto& model : models) {
    auto p = cfg.tta ? tta_predict(model, padded) : model(padded);
    if (!(p.grid == padded.grid)) throw ShapeError("model returned probabilities on a different grid");
    out.probabilities.push_back(crop_map(p, origin, x.grid));
    masks.push_back(argmax(out.probabilities.back()));
  }
  out.mask = majority_vote(masks, out.probabilities);
  if (cfg.postprocess) out.mask = volume_threshold_postprocess(out.mask, cfg.postproc);
  return out;
}

void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& p) {
  ByteWriter w;
  for (double v : p.values) w.put(static_cast<float>(v));
  write_file_bytes(path, w.bytes());
  auto sidecar = path;
  sidecar += ".txt";
  std::ofstream txt(sidecar, std::ios::trunc);
  if (!txt) throw IoError("cannot open '" + sidecar.string() + "' for writing");
  txt << "dtype float32\nendian little\n";
  txt << "dims " << p.classes << ' ' << p.grid.x << ' ' << p.grid.y << ' ' << p.grid.z << '\n';
  txt << "order class x y z\n";
  txt << "classes";
  for (int k = 0; k < p.classes; ++k) txt << ' ' << (k < kNumClasses ? external_label(k) : k);
  txt << '\n';
  if (!txt) throw IoError("write to '" + sidecar.string() + "' failed");
}

ProbabilityMap read_probability_map(const std::filesystem::path& path) {
  auto sidecar = path;
  sidecar += ".txt";
  std::ifstream txt(sidecar);
  if (!txt) throw IoError("file not found: " + sidecar.string());
  std::string line;
  int k = -1;
  Grid g;
  while (std::getline(txt, line)) {
    std::istringstream is(line);
    std::string key;
    is >> key;
    if (key == "dims" && !(is >> k >> g.x >> g.y >> g.z))
      throw FormatError(FormatError::Kind::invalid_field, 0, "malformed dims line in " + sidecar.string());
  }
  if (k <= 0 || g.voxels() <= 0)
    throw FormatError(FormatError::Kind::invalid_field, 0, "missing dims in " + sidecar.string());
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes.data(), bytes.size());
  ProbabilityMap p(g, k);
  for (auto& v : p.values) v = r.get<float>("probability payload");
  if (r.remaining() != 0)
    throw FormatError(FormatError::Kind::invalid_field, r.offset(),
                      "trailing bytes in " + path.string());
  return p;
}

}  // namespace bitr
