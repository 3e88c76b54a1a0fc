#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "bitr/segmentation.hpp"

namespace bitr {

/// Modality order of every stacked scan.
inline constexpr std::array<const char*, 4> kModalities{"t1", "t1ce", "t2", "flair"};

/// Stacked multi-modal scan, laid out (C, x, y, z) with z fastest.
struct Volume4D {
  struct Normalization {
    double mean = 0.0;
    double stddev = 1.0;
    bool applied = false;
  };

  Grid grid;
  int channels = 4;
  std::vector<float> data;
  std::array<double, 3> spacing{1.0, 1.0, 1.0};
  std::vector<Normalization> normalization;  // one entry per channel

  Volume4D() = default;
  Volume4D(Grid g, int c)
      : grid(g), channels(c), data(static_cast<std::size_t>(g.voxels() * c), 0.0f),
        normalization(static_cast<std::size_t>(c)) {}

  float at(int c, Index voxel) const { return data[static_cast<std::size_t>(c * grid.voxels() + voxel)]; }
  float& at(int c, Index voxel) { return data[static_cast<std::size_t>(c * grid.voxels() + voxel)]; }
};

struct CaseRecord {
  std::string id;
  Volume4D image;
  std::optional<SegmentationMask> label;
  std::vector<std::string> sources;
};

/// Copies the box [origin, origin + extent) out of a volume or a mask.
Volume4D crop(const Volume4D& v, const std::array<Index, 3>& origin, const Grid& extent);
SegmentationMask crop(const SegmentationMask& m, const std::array<Index, 3>& origin, const Grid& extent);

/// Zero-pads each axis symmetrically up to the next multiple of `multiple`.
/// `origin` receives where the original volume starts inside the padded one.
Volume4D pad_to_multiple(const Volume4D& v, Index multiple, std::array<Index, 3>& origin);

}  // namespace bitr
