#pragma once

// Analytic-versus-finite-difference checks of every differentiable kernel and
// of the full network, in double precision.

#include <cstdint>
#include <string>
#include <vector>

namespace bitr {

struct GradcheckResult {
  std::string name;
  int instances = 0;     // random instances (ops) or sampled elements (model)
  double max_error = 0;  // worst relative error seen
  double tolerance = 0;
  std::string detail;  // where the worst error occurred (model check only)
  bool passed() const { return max_error < tolerance; }
};

struct GradcheckOptions {
  std::uint64_t seed = 2024;
  int instances = 20;
  double step = 1e-4;
  double tolerance = 1e-4;
  /// Relative error denominator floor.
  double floor = 1e-6;
};

std::vector<GradcheckResult> run_op_gradchecks(const GradcheckOptions& opts = {});

struct ModelGradcheckOptions {
  std::uint64_t seed = 7;
  int samples = 200;
  double step = 1e-5;
  double tolerance = 1e-3;
  /// Above the central-difference roundoff (machine eps * |objective| / step),
  /// which matters for parameters with an identically zero gradient such as
  /// the attention key bias.
  double floor = 1e-5;
  /// Samples whose forward and backward one-sided slopes differ by more than
  /// this (relative, over kink_floor) straddle a kink. They are checked for
  /// the analytic slope lying between the two and do not count as instances.
  double kink_threshold = 1e-3;
  double kink_floor = 1e-3;
};

/// Tiny network (2 input channels, base width 4, embedding 16, one layer,
/// two heads) on a 1x2x16x16x16 input. Samples elements across every
/// parameter tensor and the input; `instances` counts smooth samples. Fails
/// if more than `samples` draws are non-smooth.
GradcheckResult run_model_gradcheck(const ModelGradcheckOptions& opts = {});

}  // namespace bitr
