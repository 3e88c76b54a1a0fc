#pragma once

#include <array>
#include <iosfwd>
#include <string>
#include <vector>

#include "bitr/segmentation.hpp"

namespace bitr {

/// Evaluation region as a set of file labels.
struct RegionSpec {
  std::string name;
  std::vector<std::uint8_t> labels;
};

/// Whole tumor {1, 2, 4}, tumor core {1, 4}, enhancing tumor {4}.
const std::array<RegionSpec, 3>& standard_regions();

BinaryVolume region_mask(const SegmentationMask& mask, const RegionSpec& region);

struct Confusion {
  Index tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion(const BinaryVolume& pred, const BinaryVolume& truth);

/// 2|P & T| / (|P| + |T|); 1 when both are empty.
double dice(const BinaryVolume& pred, const BinaryVolume& truth);
/// TP / (TP + FN); 1 when the truth is empty.
double sensitivity(const BinaryVolume& pred, const BinaryVolume& truth);
/// TN / (TN + FP); 1 when the truth covers the whole volume.
double specificity(const BinaryVolume& pred, const BinaryVolume& truth);

enum class HdPooling { pooled, max_directed };

struct HdConfig {
  double empty_sentinel = 373.1287;  // exactly one side empty
  HdPooling pooling = HdPooling::pooled;
};

/// Foreground voxels with a background or out-of-volume 6-neighbour.
BinaryVolume surface(const BinaryVolume& v);

/// Exact Euclidean distance from every voxel to the nearest "on" voxel of
/// `targets`, in physical units. Infinite everywhere when `targets` is empty.
std::vector<double> distance_transform(const BinaryVolume& targets, const std::array<double, 3>& spacing);

/// 95th percentile of surface-to-surface nearest distances.
double hd95(const BinaryVolume& pred, const BinaryVolume& truth, const std::array<double, 3>& spacing,
            const HdConfig& cfg = {});

struct RegionMetrics {
  double dice = 0, hd95 = 0, sensitivity = 0, specificity = 0;
};

struct CaseMetrics {
  std::string id;
  std::array<RegionMetrics, 3> regions;  // WT, TC, ET
};

CaseMetrics evaluate_case(const std::string& id, const SegmentationMask& pred, const SegmentationMask& truth,
                          const std::array<double, 3>& spacing, const HdConfig& cfg = {});

/// Linear-interpolated percentile, q in [0, 1].
double percentile(std::vector<double> values, double q);

struct Summary {
  double mean = 0, sd = 0, median = 0, p25 = 0, p75 = 0;
};

/// Population standard deviation.
Summary summarize(const std::vector<double>& values);

/// Per-case rows followed by a summary block of mean / sd / median / quartiles.
void write_report(std::ostream& os, const std::vector<CaseMetrics>& cases);

}  // namespace bitr
