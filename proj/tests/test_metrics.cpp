#include <doctest.h>

#include <random>
#include <sstream>

#include "bitr/metrics.hpp"
#include "bitr/oracles.hpp"

using namespace bitr;

namespace {

BinaryVolume random_binary(Grid g, std::mt19937_64& rng, double p) {
  BinaryVolume v(g);
  std::bernoulli_distribution b(p);
  for (auto& x : v.on) x = b(rng);
  return v;
}

BinaryVolume with_voxels(Grid g, std::initializer_list<std::array<Index, 3>> pts) {
  BinaryVolume v(g);
  for (const auto& p : pts) v.on[static_cast<std::size_t>(g.offset(p[0], p[1], p[2]))] = 1;
  return v;
}

}  // namespace

TEST_CASE("region masks") {
  const Grid g{2, 2, 2};
  SegmentationMask empty(g);
  for (const auto& r : standard_regions()) CHECK(region_mask(empty, r).count() == 0);
  SegmentationMask et(g, 3);
  for (const auto& r : standard_regions()) CHECK(region_mask(et, r).count() == 8);
  auto mixed = SegmentationMask::from_external(g, {1, 2, 4, 0, 0, 4, 2, 1});
  CHECK(region_mask(mixed, standard_regions()[0]).on == std::vector<std::uint8_t>{1, 1, 1, 0, 0, 1, 1, 1});
  CHECK(region_mask(mixed, standard_regions()[1]).on == std::vector<std::uint8_t>{1, 0, 1, 0, 0, 1, 0, 1});
  CHECK(region_mask(mixed, standard_regions()[2]).on == std::vector<std::uint8_t>{0, 0, 1, 0, 0, 1, 0, 0});
}

TEST_CASE("dice") {
  const Grid g{4, 4, 4};
  std::mt19937_64 rng(1);
  auto a = random_binary(g, rng, 0.4);
  CHECK(dice(a, a) == 1.0);
  CHECK(dice(BinaryVolume(g), BinaryVolume(g)) == 1.0);
  CHECK(dice(a, BinaryVolume(g)) == 0.0);
  auto p = with_voxels(g, {{0, 0, 0}, {0, 0, 1}, {0, 0, 2}, {0, 0, 3}});
  auto t = with_voxels(g, {{0, 0, 0}, {0, 0, 1}, {0, 0, 2}, {1, 0, 0}, {1, 0, 1}, {1, 0, 2}});
  CHECK(dice(p, t) == doctest::Approx(0.6).epsilon(1e-15));
  auto disjoint = with_voxels(g, {{3, 3, 3}});
  CHECK(dice(p, disjoint) == 0.0);
  for (int i = 0; i < 20; ++i) {
    auto x = random_binary(g, rng, 0.3), y = random_binary(g, rng, 0.3);
    CHECK(dice(x, y) == dice(y, x));
    CHECK(dice(x, y) == oracle::counting_dice(x, y));
  }
  CHECK_THROWS_AS(dice(a, BinaryVolume(Grid{4, 4, 3})), ShapeError);
}

TEST_CASE("sensitivity and specificity") {
  const Grid g{4, 4, 4};
  std::mt19937_64 rng(2);
  auto t = random_binary(g, rng, 0.5);
  CHECK(sensitivity(t, t) == 1.0);
  CHECK(specificity(t, t) == 1.0);
  BinaryVolume half(g), all(g);
  for (std::size_t i = 0; i < half.on.size(); ++i) {
    half.on[i] = i % 2;
    all.on[i] = 1;
  }
  CHECK(sensitivity(all, half) == 1.0);
  CHECK(specificity(all, half) == 0.0);
  CHECK(sensitivity(half, BinaryVolume(g)) == 1.0);
  CHECK(specificity(half, all) == 1.0);
  // hand-tallied: truth = first 16 voxels, prediction = voxels 8..31
  BinaryVolume truth(g), pred(g);
  for (std::size_t i = 0; i < 16; ++i) truth.on[i] = 1;
  for (std::size_t i = 8; i < 32; ++i) pred.on[i] = 1;
  auto c = confusion(pred, truth);
  CHECK(c.tp == 8);
  CHECK(c.fn == 8);
  CHECK(c.fp == 16);
  CHECK(c.tn == 32);
  CHECK(sensitivity(pred, truth) == 0.5);
  CHECK(specificity(pred, truth) == doctest::Approx(32.0 / 48.0));
}

TEST_CASE("distance transform matches brute force") {
  const Grid g{5, 6, 7};
  std::mt19937_64 rng(3);
  const std::array<double, 3> spacing{1.0, 1.5, 0.7};
  for (int trial = 0; trial < 5; ++trial) {
    auto t = random_binary(g, rng, 0.05);
    auto d = distance_transform(t, spacing);
    for (Index x = 0; x < g.x; ++x)
      for (Index y = 0; y < g.y; ++y)
        for (Index z = 0; z < g.z; ++z) {
          double best = std::numeric_limits<double>::infinity();
          for (Index a = 0; a < g.x; ++a)
            for (Index b = 0; b < g.y; ++b)
              for (Index c = 0; c < g.z; ++c)
                if (t.on[static_cast<std::size_t>(g.offset(a, b, c))])
                  best = std::min(best, std::hypot((x - a) * spacing[0], (y - b) * spacing[1], (z - c) * spacing[2]));
          CHECK(d[static_cast<std::size_t>(g.offset(x, y, z))] == doctest::Approx(best).epsilon(1e-12));
        }
  }
  auto none = distance_transform(BinaryVolume(g), spacing);
  CHECK(std::isinf(none[0]));
}

TEST_CASE("hd95") {
  const Grid g{8, 8, 8};
  const std::array<double, 3> unit{1, 1, 1};
  std::mt19937_64 rng(4);
  auto a = random_binary(g, rng, 0.3);
  CHECK(hd95(a, a, unit) == 0.0);
  CHECK(hd95(with_voxels(g, {{1, 2, 2}}), with_voxels(g, {{4, 2, 2}}), unit) == doctest::Approx(3.0));
  CHECK(hd95(BinaryVolume(g), BinaryVolume(g), unit) == 0.0);
  CHECK(hd95(a, BinaryVolume(g), unit) == 373.1287);
  HdConfig custom;
  custom.empty_sentinel = -1;
  CHECK(hd95(BinaryVolume(g), a, unit, custom) == -1);
  for (int i = 0; i < 30; ++i) {
    auto x = random_binary(g, rng, 0.05 + 0.02 * i), y = random_binary(g, rng, 0.1);
    const std::array<double, 3> sp{1.0, 1.0 + 0.1 * (i % 3), 0.9};
    CHECK(std::abs(hd95(x, y, sp) - oracle::all_pairs_hd95(x, y, sp, 373.1287)) < 1e-9);
    CHECK(hd95(x, y, sp) == hd95(y, x, sp));
  }
  // a single voxel against a 2-voxel bar: pooled {0, 0, 1}, directed {0} and {0, 1}
  auto bar = with_voxels(g, {{2, 2, 2}, {2, 2, 3}});
  auto dot = with_voxels(g, {{2, 2, 2}});
  CHECK(hd95(dot, bar, unit) == doctest::Approx(0.9));
  custom.pooling = HdPooling::max_directed;
  CHECK(hd95(dot, bar, unit, custom) == doctest::Approx(0.95));
}

TEST_CASE("summary statistics") {
  auto one = summarize({0.7});
  CHECK(one.mean == 0.7);
  CHECK(one.sd == 0.0);
  CHECK(one.median == 0.7);
  CHECK(one.p25 == 0.7);
  CHECK(one.p75 == 0.7);
  auto two = summarize({0.0, 1.0});
  CHECK(two.median == 0.5);
  CHECK(two.mean == 0.5);
  CHECK(two.sd == 0.5);
  // sorted {1, 2, 4, 8, 10}: ranks 1, 2, 3 of 0..4
  auto five = summarize({8, 1, 4, 10, 2});
  CHECK(five.p25 == 2.0);
  CHECK(five.median == 4.0);
  CHECK(five.p75 == 8.0);
  CHECK(five.mean == 5.0);
  CHECK(percentile({1, 2, 4, 8, 10}, 0.1) == doctest::Approx(1.4));
  CHECK_THROWS_AS(summarize({}), std::invalid_argument);
}

TEST_CASE("evaluation report") {
  const Grid g{4, 4, 4};
  std::mt19937_64 rng(5);
  SegmentationMask m(g);
  for (auto& l : m.labels) l = static_cast<std::uint8_t>(rng() % 4);
  auto c = evaluate_case("case1", m, m, {1, 1, 1});
  for (const auto& r : c.regions) {
    CHECK(r.dice == 1.0);
    CHECK(r.hd95 == 0.0);
  }
  std::ostringstream os;
  write_report(os, {c, c});
  const auto text = os.str();
  CHECK(text.find("case1\tWT\t1\t0\t1\t1") != std::string::npos);
  CHECK(text.find("Median\tET\t1\t0\t1\t1") != std::string::npos);
  CHECK(text.find("StdDev\tTC\t0\t0\t0\t0") != std::string::npos);
}
