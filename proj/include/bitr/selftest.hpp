#pragma once

// Randomised comparisons of the production kernels against the independent
// oracles, shared by the CLI selftest and the acceptance suite.

#include <cstdint>
#include <string>
#include <vector>

namespace bitr {

struct OracleCheck {
  std::string name;
  int instances = 0;
  int mismatches = 0;
  double worst = 0;  // largest numeric deviation, where applicable
  std::string detail;
  bool passed() const { return instances > 0 && mismatches == 0; }
};

/// conv3d / conv_transpose3d against nested loops, max |diff| < 1e-10.
OracleCheck check_convolution(std::uint64_t seed, int instances = 20);
/// majority_vote against exhaustive tallying: n <= 5 models, grid <= 4^3, K = 4.
OracleCheck check_voting(std::uint64_t seed, int instances = 100);
/// dice exactly and hd95 within 1e-9 against all-pairs distances on 8^3
/// pairs, plus the empty-set conventions.
OracleCheck check_metrics(std::uint64_t seed, int instances = 100);
/// Component thresholding against flood fill on 8^3 masks, and idempotence.
OracleCheck check_postprocessing(std::uint64_t seed, int instances = 100);

std::vector<OracleCheck> run_oracle_checks(std::uint64_t seed);

}  // namespace bitr
