#pragma once

// Independent reference implementations used to check the production
// kernels: direct nested loops, exhaustive enumeration, flood fill, all-pairs
// distances. None of these share code paths with what they verify.

#include <array>
#include <cstdint>
#include <vector>

#include "bitr/conv.hpp"
#include "bitr/segmentation.hpp"

namespace bitr::oracle {

/// Seven-nested-loop convolution (or transposed convolution, computed by
/// direct scatter from each input voxel).
Tensor<double> naive_conv3d(const Tensor<double>& input, const ConvSpec& spec, const Tensor<double>& weight,
                            const Tensor<double>& bias);

Tensor<double> naive_matmul(const Tensor<double>& a, const Tensor<double>& b);

/// Per-voxel mode of the votes; ties resolved by the largest mean
/// probability among tied classes, then by lowest class index. Evaluated by
/// tallying every class at every voxel independently.
SegmentationMask brute_force_vote(const std::vector<SegmentationMask>& masks,
                                  const std::vector<ProbabilityMap>& probs);

/// Components of `label` found by breadth-first flood fill with 26-connectivity.
std::vector<std::vector<Index>> flood_fill_components(const SegmentationMask& mask, std::uint8_t label);

/// Removes (sets to 0) every 26-connected component of a foreground class
/// smaller than that class's threshold, using flood fill.
SegmentationMask flood_fill_threshold(const SegmentationMask& mask, const std::vector<Index>& min_voxels);

/// Surface voxels (foreground with a background or out-of-volume 6-neighbor).
std::vector<std::array<Index, 3>> surface_voxels(const BinaryVolume& v);

/// 95th percentile of pooled surface-to-surface nearest distances computed by
/// comparing every pair of surface voxels.
double all_pairs_hd95(const BinaryVolume& a, const BinaryVolume& b, const std::array<double, 3>& spacing,
                      double empty_sentinel);

/// Dice by direct counting.
double counting_dice(const BinaryVolume& a, const BinaryVolume& b);

}  // namespace bitr::oracle
