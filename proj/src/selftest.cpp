#include "bitr/selftest.hpp"

#include <cmath>
#include <random>

#include "bitr/inference.hpp"
#include "bitr/metrics.hpp"
#include "bitr/oracles.hpp"

namespace bitr {

namespace {

using Rng = std::mt19937_64;

Tensor<double> randn(Shape s, Rng& rng) {
  Tensor<double> t(std::move(s));
  std::normal_distribution<double> nd;
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

Index uniform(Rng& rng, Index lo, Index hi) { return std::uniform_int_distribution<Index>(lo, hi)(rng); }

BinaryVolume random_binary(Grid g, Rng& rng, double p) {
  BinaryVolume v(g);
  std::bernoulli_distribution b(p);
  for (auto& x : v.on) x = b(rng);
  return v;
}

}  // namespace

OracleCheck check_convolution(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleCheck r{"convolution vs nested loops"};
  for (int i = 0; i < instances; ++i) {
    const bool transposed = i % 2 == 1;
    const ConvSpec spec{uniform(rng, 1, 3), uniform(rng, 1, 3), uniform(rng, 1, 2), 1, transposed};
    const Shape in{uniform(rng, 1, 2), spec.in_channels, uniform(rng, 1, 4), uniform(rng, 1, 4), uniform(rng, 1, 4)};
    auto x = randn(in, rng), w = randn(spec.weight_shape(), rng), b = randn({spec.out_channels}, rng);
    auto fast = transposed ? conv_transpose3d(x, spec, w, b) : conv3d(x, spec, w, b);
    auto slow = oracle::naive_conv3d(x, spec, w, b);
    ++r.instances;
    if (fast.shape() != slow.shape()) {
      ++r.mismatches;
      continue;
    }
    double worst = 0;
    for (Index k = 0; k < fast.numel(); ++k) worst = std::max(worst, std::abs(fast[k] - slow[k]));
    r.worst = std::max(r.worst, worst);
    if (worst >= 1e-10) ++r.mismatches;
  }
  return r;
}

OracleCheck check_voting(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleCheck r{"majority vote vs exhaustive tally"};
  for (int i = 0; i < instances; ++i) {
    const Grid g{uniform(rng, 1, 4), uniform(rng, 1, 4), uniform(rng, 1, 4)};
    const auto n = static_cast<int>(uniform(rng, 1, 5));
    std::vector<SegmentationMask> masks;
    std::vector<ProbabilityMap> probs;
    for (int m = 0; m < n; ++m) {
      SegmentationMask mask(g);
      for (auto& l : mask.labels) l = static_cast<std::uint8_t>(uniform(rng, 0, kNumClasses - 1));
      masks.push_back(std::move(mask));
      // Coarse probabilities make equal averages, and so the secondary
      // tie-break, common.
      ProbabilityMap p(g, kNumClasses);
      for (Index v = 0; v < g.voxels(); ++v) {
        std::array<int, kNumClasses> w{};
        int total = 0;
        for (auto& x : w) total += x = static_cast<int>(uniform(rng, 0, 2));
        if (total == 0) w[0] = total = 1;
        for (int k = 0; k < kNumClasses; ++k) p.at(k, v) = static_cast<double>(w[static_cast<std::size_t>(k)]) / total;
      }
      probs.push_back(std::move(p));
    }
    ++r.instances;
    if (!(majority_vote(masks, probs) == oracle::brute_force_vote(masks, probs))) ++r.mismatches;
  }
  return r;
}

OracleCheck check_metrics(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleCheck r{"dice and hd95 vs all-pairs distances"};
  const Grid g{8, 8, 8};
  const double sentinel = HdConfig{}.empty_sentinel;
  for (int i = 0; i < instances; ++i) {
    // Every tenth pair has an empty side to exercise the conventions.
    const double pa = i % 10 == 0 ? 0.0 : 0.02 + 0.5 * std::uniform_real_distribution<double>()(rng);
    const double pb = i % 20 == 0 ? 0.0 : 0.02 + 0.5 * std::uniform_real_distribution<double>()(rng);
    const auto a = random_binary(g, rng, pa), b = random_binary(g, rng, pb);
    const std::array<double, 3> spacing{1.0, i % 3 == 0 ? 1.0 : 1.25, i % 4 == 0 ? 1.0 : 0.8};
    const double hd = hd95(a, b, spacing), ref = oracle::all_pairs_hd95(a, b, spacing, sentinel);
    r.worst = std::max(r.worst, std::abs(hd - ref));
    ++r.instances;
    if (dice(a, b) != oracle::counting_dice(a, b) || !(std::abs(hd - ref) < 1e-9)) ++r.mismatches;
  }
  const BinaryVolume empty(g);
  auto full = random_binary(g, rng, 0.3);
  const bool conventions = dice(empty, empty) == 1.0 && dice(full, empty) == 0.0 && hd95(empty, empty, {1, 1, 1}) == 0.0 &&
                           hd95(full, empty, {1, 1, 1}) == sentinel && hd95(empty, full, {1, 1, 1}) == sentinel;
  ++r.instances;
  if (!conventions) {
    ++r.mismatches;
    r.detail = "empty-set conventions violated";
  }
  return r;
}

OracleCheck check_postprocessing(std::uint64_t seed, int instances) {
  Rng rng(seed);
  OracleCheck r{"component thresholding vs flood fill"};
  const Grid g{8, 8, 8};
  for (int i = 0; i < instances; ++i) {
    SegmentationMask m(g);
    const double fg = 0.05 + 0.4 * std::uniform_real_distribution<double>()(rng);
    std::bernoulli_distribution on(fg);
    for (auto& l : m.labels) l = on(rng) ? static_cast<std::uint8_t>(uniform(rng, 1, 3)) : 0;
    PostprocConfig cfg;
    for (std::size_t c = 1; c < 4; ++c) cfg.thresholds[c] = uniform(rng, 0, 8);
    const auto out = volume_threshold_postprocess(m, cfg);
    const auto ref =
        oracle::flood_fill_threshold(m, {0, cfg.thresholds[1], cfg.thresholds[2], cfg.thresholds[3]});
    cfg.strategy = PostprocStrategy::relabel_class;
    const auto relabeled = volume_threshold_postprocess(m, cfg);
    const bool idempotent = volume_threshold_postprocess(relabeled, cfg) == relabeled;
    cfg.strategy = PostprocStrategy::remove_component;
    ++r.instances;
    if (!(out == ref) || !(volume_threshold_postprocess(out, cfg) == out) || !idempotent) ++r.mismatches;
  }
  return r;
}

std::vector<OracleCheck> run_oracle_checks(std::uint64_t seed) {
  return {check_convolution(seed), check_voting(seed + 1), check_metrics(seed + 2), check_postprocessing(seed + 3)};
}

}  // namespace bitr
