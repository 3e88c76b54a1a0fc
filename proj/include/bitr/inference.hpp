#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "bitr/model.hpp"
#include "bitr/volume.hpp"

namespace bitr {

/// Mirror flags for the three spatial axes.
struct FlipCombo {
  bool x = false, y = false, z = false;
  friend bool operator==(const FlipCombo&, const FlipCombo&) = default;
};

/// The 8 combinations, identity first.
std::array<FlipCombo, 8> all_flips();

Volume4D flip(const Volume4D& v, FlipCombo f);
ProbabilityMap flip(const ProbabilityMap& p, FlipCombo f);
SegmentationMask flip(const SegmentationMask& m, FlipCombo f);

/// Maps a scan to per-class probabilities on the same grid.
using ProbabilityFn = std::function<ProbabilityMap(const Volume4D&)>;

/// Softmax of the model's scores for a single scan.
template <class Scalar>
ProbabilityMap model_probabilities(const BiTrUnet<Scalar>& model, const Volume4D& x);

template <class Scalar>
ProbabilityFn probability_fn(const BiTrUnet<Scalar>& model) {
  return [&model](const Volume4D& x) { return model_probabilities(model, x); };
}

/// Mean over the 8 flips of unflip(model(flip(x))).
ProbabilityMap tta_predict(const ProbabilityFn& model, const Volume4D& x);

/// Per-voxel mode of the votes; ties go to the tied class with the largest
/// mean probability, then to the lowest class index.
SegmentationMask majority_vote(const std::vector<SegmentationMask>& masks, const std::vector<ProbabilityMap>& probs);

enum class PostprocStrategy { remove_component, relabel_class };
enum class ThresholdScope { component, whole_class };

PostprocStrategy parse_strategy(const std::string& name);
std::string to_string(PostprocStrategy s);
ThresholdScope parse_scope(const std::string& name);
std::string to_string(ThresholdScope s);

struct PostprocConfig {
  /// Minimum voxel count per internal class; class 0 is never thresholded.
  std::array<Index, kNumClasses> thresholds{0, 0, 0, 50};
  PostprocStrategy strategy = PostprocStrategy::remove_component;
  ThresholdScope scope = ThresholdScope::component;
  /// Target class of relabel-class; it is itself exempt from thresholding.
  int fallback = 1;
  void validate() const;
};

/// Connected components (26-neighbourhood) of each foreground class below
/// their class threshold are set to background or to the fallback class.
SegmentationMask volume_threshold_postprocess(const SegmentationMask& mask, const PostprocConfig& cfg);

/// 26-connected component id of every voxel with a nonzero label (same label
/// within a component); -1 on background. Ids are dense, in scan order.
std::vector<Index> label_components(const SegmentationMask& mask);

struct PredictConfig {
  bool tta = true;
  bool postprocess = true;
  PostprocConfig postproc;
};

struct Prediction {
  SegmentationMask mask;  // internal labels
  std::vector<ProbabilityMap> probabilities;  // one per model, on the input grid
};

/// Pads to a multiple of 16, runs every model (with TTA when enabled), crops
/// back, votes and postprocesses.
Prediction predict_case(const std::vector<ProbabilityFn>& models, const Volume4D& x, const PredictConfig& cfg);

/// Raw little-endian float32 (K, x, y, z) payload at `path` plus a text
/// sidecar `path.txt` giving dims and class order.
void write_probability_map(const std::filesystem::path& path, const ProbabilityMap& p);
ProbabilityMap read_probability_map(const std::filesystem::path& path);

}  // namespace bitr
