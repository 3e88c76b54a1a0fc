#pragma once

#include <filesystem>
#include <random>
#include <vector>

#include "bitr/model.hpp"
#include "bitr/volume.hpp"

namespace bitr {

struct LrSchedule {
  double base_lr = 2e-4;
  Index total_iters = 1;
  double power = 0.9;
};

/// Polynomial decay base_lr * (1 - iter / total_iters)^power, for
/// 0 <= iter <= total_iters.
double poly_lr(Index iter, const LrSchedule& schedule);

template <class Scalar>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  Index step = 0;
  std::vector<std::vector<Scalar>> m, v;
};

/// One bias-corrected Adam update over every parameter. Moments are
/// allocated lazily to match the parameter shapes.
template <class Scalar>
void adam_step(const std::vector<NamedTensor<Scalar>>& params, AdamState<Scalar>& state, double lr);

struct AugmentConfig {
  Grid crop{32, 32, 32};
  double shift = 0.1;  // intensity offset drawn from U[-shift, shift]
  double scale = 0.1;  // intensity factor drawn from U[1 - scale, 1 + scale]
  bool intensity = true;
};

struct AugmentedSample {
  Volume4D image;
  SegmentationMask label;
};

/// Random crop (same box for image and label, offsets uniform over valid
/// positions) followed by per-channel v <- v * s + d.
AugmentedSample augment(const Volume4D& image, const SegmentationMask& label, const AugmentConfig& cfg,
                        std::mt19937_64& rng);

struct LossConfig {
  double ce_weight = 1.0;
  double dice_weight = 1.0;
  double smooth = 1e-5;
  /// Average the Dice term only over foreground classes that occur in the
  /// batch target instead of over all of them.
  bool present_classes_only = false;
  void validate() const;
};

template <class Scalar>
struct LossTerms {
  Tensor<Scalar> total;
  double ce = 0.0;
  double dice = 0.0;  // 1 - mean soft Dice over the averaged foreground classes
};

/// ce_weight * CE(softmax(scores), target) + dice_weight * (1 - mean soft
/// Dice over classes 1..K-1). `target` holds internal labels, batch-major,
/// one per voxel of `scores`' spatial grid.
template <class Scalar>
LossTerms<Scalar> segmentation_loss(const Tensor<Scalar>& scores, const std::vector<std::uint8_t>& target,
                                    const LossConfig& cfg);

/// Soft Dice 2 sum(p t) / (sum p + sum t) of one class for a (1, K, ...) score tensor.
template <class Scalar>
double soft_dice(const Tensor<Scalar>& scores, const std::vector<std::uint8_t>& target, int cls);

/// (1, C, x, y, z) tensor view of a scan.
template <class Scalar>
Tensor<Scalar> to_tensor(const Volume4D& v);

struct TrainConfig {
  Index epochs = 1;
  Index batch_size = 1;
  Index accumulation = 1;
  Index checkpoint_every = 0;  // 0: only the initial and final checkpoints
  double base_lr = 2e-4;
  double lr_power = 0.9;
  bool augment = true;
  AugmentConfig augmentation;
  LossConfig loss;
  std::uint64_t seed = 1;
  std::filesystem::path out_dir;  // empty: no files written
};

struct TrainRecord {
  Index iter = 0;
  double lr = 0.0;
  double total = 0.0;
  double ce = 0.0;
  double dice = 0.0;
};

/// Adam + poly-decay training over labelled cases. Writes `loss.tsv` and
/// `checkpoint_<iter>.btru` files to cfg.out_dir when set.
template <class Scalar>
std::vector<TrainRecord> train_loop(BiTrUnet<Scalar>& model, const std::vector<CaseRecord>& cases,
                                    const TrainConfig& cfg);

}  // namespace bitr
