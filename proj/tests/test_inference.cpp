#include <doctest.h>

#include <filesystem>
#include <random>
#include <set>

#include "bitr/gradcheck.hpp"
#include "bitr/inference.hpp"
#include "bitr/oracles.hpp"

using namespace bitr;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.base_width = 4;
  c.embed_dim = 16;
  c.vit_layers = 1;
  c.heads = 2;
  c.input_size = {16, 16, 16};
  return c;
}

Volume4D random_volume(Grid g, std::mt19937_64& rng) {
  Volume4D v(g, 4);
  std::normal_distribution<float> nd(0.0f, 1.0f);
  for (auto& x : v.data) x = nd(rng);
  return v;
}

ProbabilityMap constant_map(Grid g, std::array<double, 4> p) {
  ProbabilityMap m(g, 4);
  for (int k = 0; k < 4; ++k)
    for (Index v = 0; v < g.voxels(); ++v) m.at(k, v) = p[static_cast<std::size_t>(k)];
  return m;
}

SegmentationMask random_mask(Grid g, std::mt19937_64& rng, double fg) {
  SegmentationMask m(g);
  std::uniform_real_distribution<double> u(0, 1);
  for (auto& l : m.labels) l = u(rng) < fg ? static_cast<std::uint8_t>(1 + rng() % 3) : 0;
  return m;
}

}  // namespace

TEST_CASE("flip combinations") {
  auto flips = all_flips();
  std::set<std::tuple<bool, bool, bool>> distinct;
  for (auto f : flips) distinct.insert({f.x, f.y, f.z});
  CHECK(distinct.size() == 8);
  CHECK(flips[0] == FlipCombo{});
  std::mt19937_64 rng(1);
  auto v = random_volume(Grid{3, 4, 5}, rng);
  for (auto f : flips) CHECK(flip(flip(v, f), f).data == v.data);
  auto fx = flip(v, FlipCombo{true, false, false});
  CHECK(fx.at(2, fx.grid.offset(0, 1, 2)) == v.at(2, v.grid.offset(2, 1, 2)));
}

TEST_CASE("tta with a constant stub returns the constant") {
  const Grid g{16, 16, 16};
  ProbabilityFn stub = [](const Volume4D& x) { return constant_map(x.grid, {0.1, 0.2, 0.3, 0.4}); };
  std::mt19937_64 rng(2);
  auto p = tta_predict(stub, random_volume(g, rng));
  for (Index v = 0; v < g.voxels(); v += 97) {
    CHECK(p.at(0, v) == doctest::Approx(0.1).epsilon(1e-15));
    CHECK(p.at(3, v) == doctest::Approx(0.4).epsilon(1e-15));
  }
}

TEST_CASE("tta is flip equivariant on a real model") {
  BiTrUnet<double> model(tiny_config(), 3);
  std::mt19937_64 rng(4);
  auto x = random_volume(Grid{16, 16, 16}, rng);
  auto fn = probability_fn(model);
  auto base = tta_predict(fn, x);
  for (Index v = 0; v < base.grid.voxels(); ++v) {
    double s = 0;
    for (int k = 0; k < 4; ++k) s += base.at(k, v);
    CHECK(std::abs(s - 1.0) < 1e-5);
  }
  for (auto f : {FlipCombo{true, false, false}, FlipCombo{false, true, true}}) {
    auto a = tta_predict(fn, flip(x, f));
    auto b = flip(base, f);
    double worst = 0;
    for (std::size_t i = 0; i < a.values.size(); ++i) worst = std::max(worst, std::abs(a.values[i] - b.values[i]));
    CHECK(worst < 1e-6);
  }
}

TEST_CASE("majority vote") {
  const Grid g{3, 3, 3};
  std::mt19937_64 rng(5);
  SUBCASE("unanimity and single model") {
    auto m = random_mask(g, rng, 0.5);
    auto p = constant_map(g, {0.25, 0.25, 0.25, 0.25});
    CHECK(majority_vote({m, m, m}, {p, p, p}) == m);
    CHECK(majority_vote({m}, {p}) == m);
  }
  SUBCASE("probability tie-break") {
    SegmentationMask a(g, 1), b(g, 2);
    auto pa = constant_map(g, {0.1, 0.5, 0.3, 0.1});
    auto pb = constant_map(g, {0.1, 0.2, 0.6, 0.1});
    CHECK(majority_vote({a, b}, {pa, pb}).labels[0] == 2);  // mean 0.35 vs 0.45
    CHECK(majority_vote({a, b}, {pa, pa}).labels[0] == 1);
    CHECK(majority_vote({b, a}, {pb, pb}).labels[0] == 2);
    auto flat = constant_map(g, {0.25, 0.25, 0.25, 0.25});
    CHECK(majority_vote({b, a}, {flat, flat}).labels[0] == 1);  // lowest index
  }
  SUBCASE("matches brute force") {
    for (int trial = 0; trial < 50; ++trial) {
      const int n = 1 + static_cast<int>(rng() % 5);
      std::vector<SegmentationMask> masks;
      std::vector<ProbabilityMap> probs;
      for (int i = 0; i < n; ++i) {
        masks.push_back(random_mask(g, rng, 0.7));
        ProbabilityMap p(g, 4);
        for (auto& v : p.values) v = static_cast<double>(rng() % 3) / 4.0;
        probs.push_back(p);
      }
      CHECK(majority_vote(masks, probs) == oracle::brute_force_vote(masks, probs));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(majority_vote({}, {}), std::invalid_argument);
    SegmentationMask a(g), b(Grid{2, 3, 3});
    auto p = constant_map(g, {1, 0, 0, 0});
    CHECK_THROWS_AS(majority_vote({a, b}, {p, p}), ShapeError);
  }
}

TEST_CASE("postprocessing") {
  const Grid g{8, 8, 8};
  SUBCASE("threshold zero is the identity") {
    std::mt19937_64 rng(6);
    auto m = random_mask(g, rng, 0.4);
    PostprocConfig cfg;
    cfg.thresholds = {0, 0, 0, 0};
    CHECK(volume_threshold_postprocess(m, cfg) == m);
  }
  SUBCASE("small enhancing component removed") {
    SegmentationMask m(g);
    for (Index i = 0; i < 5; ++i) m.labels[static_cast<std::size_t>(g.offset(1 + i, 2, 2))] = 3;
    for (Index i = 0; i < 20; ++i) m.labels[static_cast<std::size_t>(g.offset(i % 8, 6, i / 8))] = 2;
    PostprocConfig cfg;
    cfg.thresholds = {0, 0, 0, 10};
    auto out = volume_threshold_postprocess(m, cfg);
    for (Index i = 0; i < 5; ++i) CHECK(out.labels[static_cast<std::size_t>(g.offset(1 + i, 2, 2))] == 0);
    CHECK(std::count(out.labels.begin(), out.labels.end(), 2) == 20);
    cfg.strategy = PostprocStrategy::relabel_class;
    out = volume_threshold_postprocess(m, cfg);
    CHECK(out.labels[static_cast<std::size_t>(g.offset(3, 2, 2))] == 1);
  }
  SUBCASE("diagonal neighbours connect") {
    SegmentationMask m(g);
    m.labels[static_cast<std::size_t>(g.offset(0, 0, 0))] = 3;
    m.labels[static_cast<std::size_t>(g.offset(1, 1, 1))] = 3;
    PostprocConfig cfg;
    cfg.thresholds = {0, 0, 0, 2};
    CHECK(volume_threshold_postprocess(m, cfg) == m);
  }
  SUBCASE("whole-class scope") {
    SegmentationMask m(g);
    m.labels[0] = 3;
    m.labels[100] = 3;
    m.labels[200] = 3;
    PostprocConfig cfg;
    cfg.thresholds = {0, 0, 0, 3};
    cfg.scope = ThresholdScope::whole_class;
    CHECK(volume_threshold_postprocess(m, cfg) == m);
    cfg.thresholds[3] = 4;
    CHECK(volume_threshold_postprocess(m, cfg) == SegmentationMask(g));
  }
  SUBCASE("matches flood fill and is idempotent") {
    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 40; ++trial) {
      auto m = random_mask(g, rng, 0.15 + 0.01 * trial);
      PostprocConfig cfg;
      cfg.thresholds = {0, static_cast<Index>(rng() % 6), static_cast<Index>(rng() % 6), static_cast<Index>(rng() % 6)};
      auto out = volume_threshold_postprocess(m, cfg);
      CHECK(out == oracle::flood_fill_threshold(m, {0, cfg.thresholds[1], cfg.thresholds[2], cfg.thresholds[3]}));
      CHECK(volume_threshold_postprocess(out, cfg) == out);
      cfg.strategy = PostprocStrategy::relabel_class;
      auto rel = volume_threshold_postprocess(m, cfg);
      CHECK(volume_threshold_postprocess(rel, cfg) == rel);
    }
  }
  SUBCASE("component ids") {
    std::mt19937_64 rng(8);
    auto m = random_mask(g, rng, 0.3);
    auto ids = label_components(m);
    Index expected = 0;
    for (int c = 1; c < 4; ++c) expected += static_cast<Index>(oracle::flood_fill_components(m, static_cast<std::uint8_t>(c)).size());
    CHECK(*std::max_element(ids.begin(), ids.end()) + 1 == expected);
  }
  SUBCASE("names") {
    CHECK(parse_strategy("relabel-class") == PostprocStrategy::relabel_class);
    CHECK(to_string(parse_strategy("remove-component")) == "remove-component");
    CHECK_THROWS_AS(parse_strategy("erode"), std::invalid_argument);
    CHECK(parse_scope("class") == ThresholdScope::whole_class);
    PostprocConfig bad;
    bad.thresholds[2] = -1;
    CHECK_THROWS(bad.validate());
  }
}

TEST_CASE("predict_case pipeline") {
  SUBCASE("background stub on an unpadded grid") {
    const Grid g{10, 12, 17};
    ProbabilityFn stub = [](const Volume4D& x) {
      CHECK(x.grid.x % 16 == 0);
      CHECK(x.grid.z == 32);
      return constant_map(x.grid, {0.7, 0.1, 0.1, 0.1});
    };
    std::mt19937_64 rng(9);
    auto pred = predict_case({stub}, random_volume(g, rng), PredictConfig{});
    CHECK(pred.mask.grid == g);
    CHECK(pred.mask == SegmentationMask(g));
  }
  SUBCASE("internal 3 is written as 4") {
    const Grid g{16, 16, 16};
    ProbabilityFn stub = [](const Volume4D& x) { return constant_map(x.grid, {0.1, 0.1, 0.1, 0.7}); };
    std::mt19937_64 rng(10);
    auto pred = predict_case({stub}, random_volume(g, rng), PredictConfig{});
    for (auto v : pred.mask.to_external()) CHECK(v == 4);
  }
  SUBCASE("single model equals argmax of tta plus postprocessing") {
    BiTrUnet<double> model(tiny_config(), 11);
    std::mt19937_64 rng(12);
    auto x = random_volume(Grid{16, 16, 16}, rng);
    PredictConfig cfg;
    cfg.postproc.thresholds = {0, 3, 3, 3};
    auto pred = predict_case({probability_fn(model)}, x, cfg);
    auto reference = volume_threshold_postprocess(argmax(tta_predict(probability_fn(model), x)), cfg.postproc);
    CHECK(pred.mask == reference);
  }
}

TEST_CASE("positional embedding resize") {
  std::mt19937_64 rng(13);
  std::normal_distribution<double> nd;
  Tensor<double> pe(Shape{1, 8, 3});
  for (auto& v : pe.data()) v = nd(rng);
  CHECK(resize_positional_embedding(pe, {2, 2, 2}, {2, 2, 2}).same_storage(pe));
  auto up = resize_positional_embedding(pe, {2, 2, 2}, {3, 3, 3});
  // corners keep their values, the centre is the mean of all 8
  for (Index e = 0; e < 3; ++e) {
    CHECK(up.data()[e] == doctest::Approx(pe.data()[e]));
    CHECK(up.data()[26 * 3 + e] == doctest::Approx(pe.data()[7 * 3 + e]));
    double mean = 0;
    for (Index t = 0; t < 8; ++t) mean += pe.data()[t * 3 + e] / 8.0;
    CHECK(up.data()[13 * 3 + e] == doctest::Approx(mean));
  }
  Tensor<double> r(Shape{1, 12, 3});
  for (auto& v : r.data()) v = nd(rng);
  pe.set_requires_grad(true);
  {
    Tape<double> tape;
    tape.backward(sum(mul(resize_positional_embedding(pe, {2, 2, 2}, {3, 4, 1}), r)));
  }
  auto numeric = finite_difference_grad(
      [&](const Tensor<double>& p) { return sum(mul(resize_positional_embedding(p, {2, 2, 2}, {3, 4, 1}), r)).item(); },
      pe, 1e-6);
  CHECK(max_relative_error<double>(pe.grad(), std::as_const(numeric).data(), 1e-8) < 1e-6);
}

TEST_CASE("probability map dump roundtrip") {
  const auto path = std::filesystem::temp_directory_path() / "bitr_probs.raw";
  ProbabilityMap p(Grid{2, 3, 4}, 4);
  for (std::size_t i = 0; i < p.values.size(); ++i) p.values[i] = static_cast<double>(i) / 128.0;
  write_probability_map(path, p);
  auto q = read_probability_map(path);
  CHECK(q.grid == p.grid);
  CHECK(q.values == p.values);
  CHECK(std::filesystem::file_size(path) == 4 * 24 * 4);
  std::filesystem::remove(path);
  std::filesystem::remove(std::filesystem::path(path.string() + ".txt"));
}
