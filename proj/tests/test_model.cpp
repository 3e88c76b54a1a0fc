#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <random>

#include "bitr/binary_io.hpp"
#include "bitr/model.hpp"

using namespace bitr;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.in_channels = 2;
  c.base_width = 4;
  c.embed_dim = 16;
  c.vit_layers = 1;
  c.heads = 2;
  c.input_size = {16, 16, 16};
  return c;
}

Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::normal_distribution<double> nd;
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

}  // namespace

TEST_CASE("norm group choice") {
  CHECK(norm_groups(4, 8) == 4);
  CHECK(norm_groups(16, 8) == 8);
  CHECK(norm_groups(12, 8) == 6);
  CHECK(norm_groups(7, 8) == 7);
  CHECK(norm_groups(11, 8) == 1);
}

TEST_CASE("config validation") {
  auto c = tiny_config();
  c.input_size = {16, 24, 16};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("axis 1"), std::invalid_argument);
  c = tiny_config();
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.base_width = 0;
  CHECK_THROWS_AS(BiTrUnet<double>(c, 1), std::invalid_argument);
}

TEST_CASE("tiny model parameter count") {
  const BiTrUnet<double> m(tiny_config(), 1);
  auto conv = [](Index in, Index out) { return in * out * 27 + 2 * out; };
  auto cbam = [](Index c, Index hidden) { return c * hidden + hidden + hidden * c + c + 2 * 27 + 1; };
  const Index layer = 2 * 16 + 4 * (16 * 16 + 16) + 2 * 16 + (16 * 64 + 64) + (64 * 16 + 16);
  auto vit = [&](Index channels, Index tokens) {
    return (channels * 16 * 27 + 16) + tokens * 16 + layer + (16 * channels * 27 + channels);
  };
  const Index expected = conv(2, 4)                                                      // init
                         + conv(4, 8) + cbam(8, 1) + conv(8, 16) + cbam(16, 2)           // enc1, enc2
                         + conv(16, 32) + cbam(32, 4) + conv(32, 64) + cbam(64, 8)       // enc3, enc4
                         + vit(32, 8) + vit(64, 1)                                       // transformers
                         + conv(64, 32) + conv(64, 32)                                 // dec4 up, fuse
                         + conv(32, 16) + conv(32, 16) + conv(16, 8) + conv(16, 8)       // dec3, dec2
                         + conv(8, 4) + conv(8, 4)                                       // dec1
                         + (4 * 4 * 27 + 4);                                             // head
  CHECK(m.parameter_count() == expected);
  CHECK(m.parameter_count() == 312951);
}

TEST_CASE("attention on two tokens matches a hand computation") {
  Tensor<double> q(Shape{1, 2, 2}, std::vector<double>{1, 0, 0, 1});
  Tensor<double> v(Shape{1, 2, 2}, std::vector<double>{1, 2, 3, 4});
  std::vector<double> weights;
  auto out = multi_head_attention(q, q, v, 1, &weights);
  const double e = std::exp(1.0 / std::sqrt(2.0)), a = e / (e + 1.0);
  CHECK(weights[0] == doctest::Approx(a).epsilon(1e-14));
  CHECK(weights[1] == doctest::Approx(1 - a).epsilon(1e-14));
  const std::vector<double> expected{a * 1 + (1 - a) * 3, a * 2 + (1 - a) * 4, (1 - a) * 1 + a * 3,
                                     (1 - a) * 2 + a * 4};
  for (int i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(expected[static_cast<std::size_t>(i)]).epsilon(1e-14));

  // Two heads of width 1 each see only their own column.
  auto split = multi_head_attention(q, q, v, 2, &weights);
  CHECK(weights.size() == 8);
  CHECK(weights[0] == doctest::Approx(std::exp(1.0) / (std::exp(1.0) + 1.0)));
  CHECK(weights[4] == doctest::Approx(0.5));  // head 1, query 0: both keys score 0
  CHECK(split[1] == doctest::Approx(3.0));
  CHECK_THROWS_AS(multi_head_attention(q, q, v, 3), ShapeError);
}

TEST_CASE("cbam with neutral weights scales features exactly") {
  BiTrUnet<double> m(tiny_config(), 3);
  auto block = m.encoder[0].cbam;  // shares storage with the model
  for (auto* t : {&block.fc1_weight, &block.fc1_bias, &block.fc2_weight, &block.fc2_bias, &block.spatial_weight,
                  &block.spatial_bias})
    for (auto& v : t->data()) v = 0.0;
  std::mt19937_64 rng(5);
  auto f = random_tensor(Shape{1, 8, 4, 4, 4}, rng);
  CbamMaps<double> maps;
  auto quarter = cbam_apply(f, block, &maps);
  for (Index i = 0; i < f.numel(); ++i) CHECK(quarter[i] == 0.25 * f[i]);
  CHECK(maps.channel.shape() == Shape{1, 8, 1, 1, 1});
  CHECK(maps.spatial.shape() == Shape{1, 1, 4, 4, 4});

  block.spatial_bias.data()[0] = 50.0;  // sigmoid saturates to exactly 1
  auto half = cbam_apply(f, block);
  for (Index i = 0; i < f.numel(); ++i) CHECK(half[i] == 0.5 * f[i]);
  CHECK_THROWS_AS(cbam_apply(random_tensor(Shape{1, 4, 4, 4, 4}, rng), block), ShapeError);
}

TEST_CASE("transformer layer with zeroed attention and feed-forward weights is the identity") {
  BiTrUnet<double> m(tiny_config(), 9);
  auto layer = m.vit_skip.layers[0];
  for (auto* t : {&layer.q_weight, &layer.q_bias, &layer.k_weight, &layer.k_bias, &layer.v_weight, &layer.v_bias,
                  &layer.out_weight, &layer.out_bias, &layer.ffn1_weight, &layer.ffn1_bias, &layer.ffn2_weight,
                  &layer.ffn2_bias})
    for (auto& v : t->data()) v = 0.0;
  std::mt19937_64 rng(2);
  auto z = random_tensor(Shape{2, 8, 16}, rng);
  auto y = transformer_layer(z, layer);
  CHECK(y.buffer() == z.buffer());
}

TEST_CASE("forward shapes across grids") {
  const BiTrUnet<double> m(tiny_config(), 4);
  std::mt19937_64 rng(8);
  for (const Shape& grid : {Shape{16, 16, 16}, Shape{32, 16, 48}}) {
    auto x = random_tensor(Shape{1, 2, grid[0], grid[1], grid[2]}, rng);
    ForwardTrace trace;
    auto y = forward(m, x, &trace);
    CHECK(y.shape() == Shape{1, 4, grid[0], grid[1], grid[2]});
    REQUIRE(trace.encoder.size() == 5);
    for (Index s = 0; s < 5; ++s) {
      const Index f = Index{1} << s;
      CHECK(trace.encoder[static_cast<std::size_t>(s)] ==
            Shape{1, 4 * f, grid[0] / f, grid[1] / f, grid[2] / f});
    }
    const Index n16 = grid[0] * grid[1] * grid[2] / 4096;
    CHECK(trace.bottleneck_tokens == Shape{1, n16, 16});
    CHECK(trace.skip_tokens == Shape{1, 8 * n16, 16});
    CHECK(trace.decoder.back() == Shape{1, 4, grid[0], grid[1], grid[2]});
  }
  CHECK_THROWS_WITH_AS(forward(m, Tensor<double>(Shape{1, 2, 16, 16, 20})), doctest::Contains("axis 4"), ShapeError);
  CHECK_THROWS_AS(forward(m, Tensor<double>(Shape{1, 3, 16, 16, 16})), ShapeError);
}

TEST_CASE("checkpoint roundtrip is bit exact") {
  const auto path = std::filesystem::temp_directory_path() / "bitr_model_ckpt.btru";
  BiTrUnet<float> m(tiny_config(), 12);
  save_checkpoint(m, path);
  const auto back = load_checkpoint<float>(path);
  CHECK(encode_config(back.config()) == encode_config(m.config()));
  REQUIRE(back.parameters().size() == m.parameters().size());
  for (std::size_t i = 0; i < m.parameters().size(); ++i) {
    CHECK(back.parameters()[i].name == m.parameters()[i].name);
    CHECK(back.parameters()[i].value.buffer() == m.parameters()[i].value.buffer());
  }
  const auto path2 = std::filesystem::temp_directory_path() / "bitr_model_ckpt2.btru";
  save_checkpoint(back, path2);
  CHECK(read_file_bytes(path) == read_file_bytes(path2));

  auto bytes = read_file_bytes(path);
  auto expect_kind = [&](std::vector<std::uint8_t> b, FormatError::Kind kind) {
    write_file_bytes(path2, b);
    try {
      load_checkpoint<float>(path2);
      FAIL("corrupt checkpoint accepted");
    } catch (const FormatError& e) {
      CHECK(e.kind() == kind);
    }
  };
  auto bad = bytes;
  bad[0] = 'X';
  expect_kind(bad, FormatError::Kind::bad_magic);
  bad = bytes;
  bad[4] = 9;
  expect_kind(bad, FormatError::Kind::unsupported_version);
  expect_kind({bytes.begin(), bytes.end() - 3}, FormatError::Kind::truncated);
  bad = bytes;
  bad.push_back(0);
  expect_kind(bad, FormatError::Kind::invalid_field);
  std::filesystem::remove(path);
  std::filesystem::remove(path2);
}
