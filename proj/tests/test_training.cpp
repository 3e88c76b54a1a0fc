#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <utility>

#include "bitr/gradcheck.hpp"
#include "bitr/training.hpp"

using namespace bitr;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 4;
  c.base_width = 4;
  c.embed_dim = 16;
  c.vit_layers = 1;
  c.heads = 2;
  c.input_size = {16, 16, 16};
  return c;
}

CaseRecord sphere_case(Index n, const std::string& id) {
  CaseRecord c;
  c.id = id;
  c.image = Volume4D(Grid{n, n, n}, 4);
  SegmentationMask m(c.image.grid);
  const double r = n / 4.0, ctr = (n - 1) / 2.0;
  for (Index x = 0; x < n; ++x)
    for (Index y = 0; y < n; ++y)
      for (Index z = 0; z < n; ++z) {
        const bool inside = std::hypot(x - ctr, y - ctr, z - ctr) <= r;
        const Index v = c.image.grid.offset(x, y, z);
        m.labels[static_cast<std::size_t>(v)] = inside ? 1 : 0;
        for (int ch = 0; ch < 4; ++ch) c.image.at(ch, v) = inside ? 1.0f : -1.0f;
      }
  c.label = m;
  return c;
}

}  // namespace

TEST_CASE("poly schedule endpoints and midpoint") {
  LrSchedule s{2e-4, 100, 0.9};
  CHECK(poly_lr(0, s) == 2e-4);
  CHECK(poly_lr(100, s) == 0.0);
  CHECK(std::abs(poly_lr(50, s) - 2e-4 * std::pow(0.5, 0.9)) < 1e-12);
  CHECK(std::abs(poly_lr(50, s) - 1.0718e-4) < 1e-8);
  for (Index t = 1; t <= 100; ++t) CHECK(poly_lr(t, s) < poly_lr(t - 1, s));
  CHECK_THROWS_AS(poly_lr(101, s), std::out_of_range);
  CHECK_THROWS_AS(poly_lr(-1, s), std::out_of_range);
}

TEST_CASE("adam update rules") {
  SUBCASE("zero gradient leaves parameters unchanged") {
    Tensor<double> p(Shape{3});
    p.data()[0] = 1.5;
    p.set_requires_grad(true);
    p.grad_buffer();
    AdamState<double> st;
    adam_step<double>({{"p", p}}, st, 0.1);
    CHECK(p.data()[0] == 1.5);
    CHECK(p.data()[1] == 0.0);
  }
  SUBCASE("first step moves by lr for a unit gradient") {
    Tensor<double> p(Shape{1});
    p.data()[0] = 1.0;
    p.set_requires_grad(true);
    p.zero_grad();
    p.grad_buffer()[0] = 1.0;
    AdamState<double> st;
    adam_step<double>({{"p", p}}, st, 0.1);
    CHECK(p.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
  }
  SUBCASE("minimises a quadratic") {
    Tensor<double> p(Shape{1});
    p.data()[0] = 1.0;
    p.set_requires_grad(true);
    AdamState<double> st;
    for (int i = 0; i < 500; ++i) {
      p.zero_grad();
      p.grad_buffer()[0] = 2.0 * p.data()[0];
      adam_step<double>({{"p", p}}, st, 0.05);
    }
    CHECK(std::abs(p.data()[0]) < 1e-2);
  }
  SUBCASE("missing gradient names the parameter") {
    Tensor<double> p(Shape{1});
    AdamState<double> st;
    try {
      adam_step<double>({{"layer.weight", p}}, st, 0.1);
      FAIL("expected throw");
    } catch (const std::invalid_argument& e) {
      CHECK(std::string(e.what()).find("layer.weight") != std::string::npos);
    }
  }
}

TEST_CASE("augmentation") {
  auto c = sphere_case(8, "a");
  std::mt19937_64 rng(3);
  SUBCASE("full-size crop without intensity is the identity") {
    AugmentConfig cfg;
    cfg.crop = c.image.grid;
    cfg.intensity = false;
    auto s = augment(c.image, *c.label, cfg, rng);
    CHECK(s.image.data == c.image.data);
    CHECK(s.label == *c.label);
  }
  SUBCASE("same seed, same sample") {
    AugmentConfig cfg;
    cfg.crop = Grid{4, 4, 4};
    std::mt19937_64 a(11), b(11);
    auto s1 = augment(c.image, *c.label, cfg, a);
    auto s2 = augment(c.image, *c.label, cfg, b);
    CHECK(s1.image.data == s2.image.data);
    CHECK(s1.label == s2.label);
  }
  SUBCASE("full crop keeps the label histogram and bounds intensities") {
    AugmentConfig cfg;
    cfg.crop = c.image.grid;
    auto s = augment(c.image, *c.label, cfg, rng);
    CHECK(s.label == *c.label);
    for (int ch = 0; ch < 4; ++ch)
      for (Index v = 0; v < c.image.grid.voxels(); ++v) {
        const double in = c.image.at(ch, v), out = s.image.at(ch, v);
        CHECK(std::abs(out) <= std::abs(in) * 1.1 + 0.1 + 1e-6);
      }
  }
  SUBCASE("crop larger than volume") {
    AugmentConfig cfg;
    cfg.crop = Grid{9, 8, 8};
    CHECK_THROWS_AS(augment(c.image, *c.label, cfg, rng), ShapeError);
  }
  SUBCASE("crop offsets cover every position") {
    AugmentConfig cfg;
    cfg.crop = Grid{7, 8, 8};
    cfg.intensity = false;
    std::set<float> firsts;
    // channel 0 of a ramp along x reveals the offset
    Volume4D ramp(c.image.grid, 4);
    for (Index x = 0; x < 8; ++x) ramp.at(0, ramp.grid.offset(x, 0, 0)) = static_cast<float>(x);
    for (int i = 0; i < 200; ++i) firsts.insert(augment(ramp, *c.label, cfg, rng).image.at(0, 0));
    CHECK(firsts == std::set<float>{0.0f, 1.0f});
  }
}

TEST_CASE("segmentation loss values") {
  const Index v = 8;
  std::vector<std::uint8_t> target{0, 1, 2, 3, 0, 1, 2, 3};
  SUBCASE("uniform scores give ln K cross-entropy") {
    Tensor<double> s(Shape{1, 4, 2, 2, 2});
    auto t = segmentation_loss(s, target, LossConfig{});
    CHECK(t.ce == doctest::Approx(std::log(4.0)).epsilon(1e-12));
    // each foreground class: 2 * 0.5 / (2 + 2) = 0.25
    CHECK(t.dice == doctest::Approx(0.75).epsilon(1e-5));
  }
  SUBCASE("confident correct scores give near zero loss") {
    Tensor<double> s(Shape{1, 4, 2, 2, 2});
    for (Index i = 0; i < v; ++i) s.data()[target[static_cast<std::size_t>(i)] * v + i] = 20.0;
    auto t = segmentation_loss(s, target, LossConfig{});
    CHECK(t.total.item() < 0.01);
  }
  SUBCASE("labels out of range are rejected") {
    Tensor<double> s(Shape{1, 4, 2, 2, 2});
    auto bad = target;
    bad[5] = 4;
    CHECK_THROWS_AS(segmentation_loss(s, bad, LossConfig{}), std::out_of_range);
  }
  SUBCASE("weights validated") {
    LossConfig c;
    c.ce_weight = -1;
    CHECK_THROWS(c.validate());
  }
}

TEST_CASE("segmentation loss gradient matches finite differences") {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (int trial = 0; trial < 5; ++trial) {
    Tensor<double> s(Shape{2, 4, 2, 2, 2});
    for (auto& x : s.data()) x = nd(rng);
    std::vector<std::uint8_t> target(16);
    for (auto& t : target) t = static_cast<std::uint8_t>(rng() % 4);
    LossConfig cfg{0.7, 1.3, 1e-5};
    s.set_requires_grad(true);
    {
      Tape<double> tape;
      tape.backward(segmentation_loss(s, target, cfg).total);
    }
    auto numeric = finite_difference_grad(
        [&](const Tensor<double>& x) { return segmentation_loss(x, target, cfg).total.item(); }, s, 1e-5);
    CHECK(max_relative_error<double>(s.grad(), std::as_const(numeric).data(), 1e-6) < 1e-6);
  }
}

TEST_CASE("soft dice oracle") {
  Tensor<double> s(Shape{1, 2, 1, 1, 2});
  s.data()[2] = 50.0;  // class 1 wins at voxel 0
  std::vector<std::uint8_t> target{1, 0};
  CHECK(soft_dice(s, target, 1) == doctest::Approx(2.0 * 1.0 / (1.5 + 1.0)).epsilon(1e-9));
}

TEST_CASE("training loop writes logs and checkpoints") {
  BiTrUnet<float> model(tiny_config(), 7);
  std::vector<CaseRecord> cases{sphere_case(16, "a"), sphere_case(16, "b")};
  const auto dir = std::filesystem::temp_directory_path() / "bitr_train_test";
  std::filesystem::remove_all(dir);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.out_dir = dir;
  cfg.checkpoint_every = 2;
  auto before = model.parameters()[0].value.detach();
  auto recs = train_loop(model, cases, cfg);
  REQUIRE(recs.size() == 4);
  CHECK(recs[0].lr == 2e-4);
  for (const auto& r : recs) CHECK(std::isfinite(r.total));
  for (auto name : {"checkpoint_000000.btru", "checkpoint_000002.btru", "checkpoint_000004.btru", "loss.tsv"})
    CHECK(std::filesystem::exists(dir / name));
  std::ifstream log(dir / "loss.tsv");
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 5);
  auto reloaded = load_checkpoint<float>(dir / "checkpoint_000004.btru");
  CHECK(reloaded.parameters()[0].value.data()[0] == model.parameters()[0].value.data()[0]);
  CHECK(model.parameters()[0].value.data()[0] != before.data()[0]);
  std::filesystem::remove_all(dir);

  TrainConfig bad = cfg;
  bad.out_dir.clear();
  auto unlabeled = cases;
  unlabeled[1].label.reset();
  CHECK_THROWS_AS(train_loop(model, unlabeled, bad), std::invalid_argument);
}
