#pragma once

// Voxel-grid value types shared by inference, postprocessing and evaluation.

#include <array>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "bitr/tensor.hpp"

namespace bitr {

/// Spatial extent (x, y, z) of a row-major volume; z varies fastest.
struct Grid {
  Index x = 0, y = 0, z = 0;

  Index voxels() const { return x * y * z; }
  Index offset(Index i, Index j, Index k) const { return (i * y + j) * z + k; }
  bool contains(Index i, Index j, Index k) const { return i >= 0 && j >= 0 && k >= 0 && i < x && j < y && k < z; }
  friend bool operator==(const Grid&, const Grid&) = default;
};

/// Number of segmentation classes: background, necrotic core, edema, enhancing.
inline constexpr int kNumClasses = 4;

/// Internal class index -> label value written to and read from files.
inline constexpr std::array<std::uint8_t, kNumClasses> kExternalLabels{0, 1, 2, 4};

/// Maps a file label {0, 1, 2, 4} to its contiguous internal index {0, 1, 2, 3}.
inline std::uint8_t internal_label(int external) {
  switch (external) {
    case 0: return 0;
    case 1: return 1;
    case 2: return 2;
    case 4: return 3;
    default: throw std::invalid_argument("label " + std::to_string(external) + " is outside {0, 1, 2, 4}");
  }
}

inline std::uint8_t external_label(int internal) {
  if (internal < 0 || internal >= kNumClasses)
    throw std::invalid_argument("internal class " + std::to_string(internal) + " is outside [0, 4)");
  return kExternalLabels[static_cast<std::size_t>(internal)];
}

/// Integer class labels over a grid, stored with internal indices.
struct SegmentationMask {
  Grid grid;
  std::vector<std::uint8_t> labels;

  SegmentationMask() = default;
  explicit SegmentationMask(Grid g, std::uint8_t fill = 0)
      : grid(g), labels(static_cast<std::size_t>(g.voxels()), fill) {}

  static SegmentationMask from_external(Grid g, const std::vector<std::uint8_t>& values);
  std::vector<std::uint8_t> to_external() const;

  friend bool operator==(const SegmentationMask&, const SegmentationMask&) = default;
};

/// Per-class probabilities laid out (K, x, y, z).
struct ProbabilityMap {
  Grid grid;
  int classes = 0;
  std::vector<double> values;

  ProbabilityMap() = default;
  ProbabilityMap(Grid g, int k) : grid(g), classes(k), values(static_cast<std::size_t>(g.voxels() * k), 0.0) {}

  double at(int k, Index voxel) const { return values[static_cast<std::size_t>(k * grid.voxels() + voxel)]; }
  double& at(int k, Index voxel) { return values[static_cast<std::size_t>(k * grid.voxels() + voxel)]; }
};

/// Per-voxel argmax; ties go to the lowest class index.
SegmentationMask argmax(const ProbabilityMap& probs);

struct BinaryVolume {
  Grid grid;
  std::vector<std::uint8_t> on;

  BinaryVolume() = default;
  explicit BinaryVolume(Grid g) : grid(g), on(static_cast<std::size_t>(g.voxels()), 0) {}
  Index count() const {
    Index n = 0;
    for (auto v : on) n += v != 0;
    return n;
  }
};

inline SegmentationMask SegmentationMask::from_external(Grid g, const std::vector<std::uint8_t>& values) {
  if (static_cast<Index>(values.size()) != g.voxels()) throw ShapeError("label buffer does not match grid");
  SegmentationMask m(g);
  for (std::size_t i = 0; i < values.size(); ++i) m.labels[i] = internal_label(values[i]);
  return m;
}

inline std::vector<std::uint8_t> SegmentationMask::to_external() const {
  std::vector<std::uint8_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = external_label(labels[i]);
  return out;
}

inline SegmentationMask argmax(const ProbabilityMap& probs) {
  SegmentationMask m(probs.grid);
  for (Index v = 0; v < probs.grid.voxels(); ++v) {
    int best = 0;
    for (int k = 1; k < probs.classes; ++k)
      if (probs.at(k, v) > probs.at(best, v)) best = k;
    m.labels[static_cast<std::size_t>(v)] = static_cast<std::uint8_t>(best);
  }
  return m;
}

}  // namespace bitr
