#pragma once

// CNN-transformer U-Net for multi-modal volumetric segmentation.
//
//   init (stride 1) -> enc1..enc4 (stride 2, each followed by CBAM)
//   enc3 output --ViT--> skip into dec4
//   enc4 output --ViT--> decoder root
//   dec4..dec1: transposed stride-2 upsample, concat skip, fuse conv
//   head: stride-1 conv to class scores
//
// Skips: init -> dec1, enc1 -> dec2, enc2 -> dec3 directly; enc3 -> dec4 via
// its own transformer block.

#include <array>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "bitr/conv.hpp"
#include "bitr/ops.hpp"

namespace bitr {

struct ModelConfig {
  Index in_channels = 4;
  /// Channels after the initial convolution; stage i has base_width * 2^i.
  Index base_width = 16;
  Index num_classes = 4;
  Index embed_dim = 384;
  Index vit_layers = 4;
  Index heads = 8;
  /// Hidden width of the transformer feed-forward network; 0 means 4 * embed_dim.
  Index ffn_hidden = 0;
  Index cbam_reduction = 8;
  /// Group normalization uses the largest divisor of the channel count not
  /// above this value.
  Index max_norm_groups = 8;
  std::array<Index, 3> input_size{128, 128, 128};

  static constexpr Index stages = 4;
  static constexpr Index divisor = 16;

  Index ffn_width() const { return ffn_hidden > 0 ? ffn_hidden : 4 * embed_dim; }
  /// Channel ladder [w, 2w, 4w, 8w, 16w] of init and the four encoder stages.
  std::array<Index, 5> widths() const {
    return {base_width, 2 * base_width, 4 * base_width, 8 * base_width, 16 * base_width};
  }
  std::array<Index, 3> grid_at(Index factor) const {
    return {input_size[0] / factor, input_size[1] / factor, input_size[2] / factor};
  }
  Index tokens_at(Index factor) const {
    auto g = grid_at(factor);
    return g[0] * g[1] * g[2];
  }

  /// Throws std::invalid_argument naming the first violated constraint.
  void validate() const;
};

Index norm_groups(Index channels, Index max_groups);

template <class Scalar>
struct NamedTensor {
  std::string name;
  Tensor<Scalar> value;
};

template <class Scalar>
struct ConvBlock {
  ConvSpec spec;
  Tensor<Scalar> weight;
  Tensor<Scalar> gamma, beta;
  Index groups = 1;
};

template <class Scalar>
struct CbamBlock {
  Index channels = 0;
  Tensor<Scalar> fc1_weight, fc1_bias;  // (C, hidden), (hidden)
  Tensor<Scalar> fc2_weight, fc2_bias;  // (hidden, C), (C)
  ConvSpec spatial_spec;
  Tensor<Scalar> spatial_weight, spatial_bias;  // (1, 2, 3, 3, 3), (1)
};

template <class Scalar>
struct CbamMaps {
  Tensor<Scalar> channel;  // (B, C, 1, 1, 1)
  Tensor<Scalar> spatial;  // (B, 1, X, Y, Z)
};

template <class Scalar>
struct TransformerLayer {
  Index heads = 1;
  Scalar eps = Scalar(1e-5);
  Tensor<Scalar> ln1_gamma, ln1_beta;
  Tensor<Scalar> q_weight, q_bias, k_weight, k_bias, v_weight, v_bias, out_weight, out_bias;
  Tensor<Scalar> ln2_gamma, ln2_beta;
  Tensor<Scalar> ffn1_weight, ffn1_bias, ffn2_weight, ffn2_bias;
};

template <class Scalar>
struct VitBlock {
  Index channels = 0;  // K, the feature-map channel count
  Index embed_dim = 0;
  std::array<Index, 3> grid{};
  ConvSpec project_spec, map_spec;
  Tensor<Scalar> project_weight, project_bias;
  Tensor<Scalar> pos_embed;  // (1, N, d)
  std::vector<TransformerLayer<Scalar>> layers;
  Tensor<Scalar> map_weight, map_bias;

  Index tokens() const { return grid[0] * grid[1] * grid[2]; }
};

template <class Scalar>
struct EncoderStage {
  ConvBlock<Scalar> conv;
  CbamBlock<Scalar> cbam;
};

template <class Scalar>
struct DecoderStage {
  ConvBlock<Scalar> up;
  ConvBlock<Scalar> fuse;
};

/// Shapes observed during a forward pass.
struct ForwardTrace {
  std::vector<Shape> encoder;  // init, enc1..enc4
  Shape skip_tokens, bottleneck_tokens;
  std::vector<Shape> decoder;  // dec4..dec1
};

template <class Scalar>
class BiTrUnet {
 public:
  BiTrUnet(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  const std::vector<NamedTensor<Scalar>>& parameters() const { return params_; }
  Index parameter_count() const;
  void zero_grad();

  ConvBlock<Scalar> init;
  std::array<EncoderStage<Scalar>, 4> encoder;
  VitBlock<Scalar> vit_skip;
  VitBlock<Scalar> vit_bottleneck;
  std::array<DecoderStage<Scalar>, 4> decoder;  // dec4 (deepest) first
  ConvSpec head_spec;
  Tensor<Scalar> head_weight, head_bias;

 private:
  ModelConfig config_;
  std::vector<NamedTensor<Scalar>> params_;
};

// ---------------------------------------------------------------------------
// Building blocks

template <class Scalar>
Tensor<Scalar> conv_block(const Tensor<Scalar>& x, const ConvBlock<Scalar>& block) {
  auto y = block.spec.transposed ? conv_transpose3d(x, block.spec, block.weight)
                                 : conv3d(x, block.spec, block.weight);
  return relu(group_norm(y, block.groups, block.gamma, block.beta));
}

/// Channel attention followed by spatial attention:
/// F' = Mc(F) * F, F'' = Ms(F') * F'.
template <class Scalar>
Tensor<Scalar> cbam_apply(const Tensor<Scalar>& features, const CbamBlock<Scalar>& block,
                          CbamMaps<Scalar>* maps = nullptr) {
  if (features.rank() != 5) throw ShapeError("cbam expects (B, C, X, Y, Z)");
  if (features.dim(1) != block.channels)
    throw ShapeError("cbam channel mismatch on axis 1: expected " + std::to_string(block.channels) + ", got " +
                     std::to_string(features.dim(1)));
  const Index batch = features.dim(0), c = block.channels;
  auto mlp = [&](const Tensor<Scalar>& pooled) {
    auto h = relu(linear(reshape(pooled, Shape{batch, c}), block.fc1_weight, block.fc1_bias));
    return linear(h, block.fc2_weight, block.fc2_bias);
  };
  auto channel_map =
      reshape(sigmoid(add(mlp(global_avg_pool(features)), mlp(global_max_pool(features)))), Shape{batch, c, 1, 1, 1});
  auto refined = mul(channel_map, features);
  auto descriptor = concat<Scalar>({mean_axis(refined, 1), max_axis(refined, 1)}, 1);
  auto spatial_map = sigmoid(conv3d(descriptor, block.spatial_spec, block.spatial_weight, block.spatial_bias));
  if (maps) *maps = {channel_map, spatial_map};
  return mul(spatial_map, refined);
}

/// Trilinear resize of a (1, N, d) positional embedding laid out over grid
/// `from` onto grid `to` (corner-aligned). Returns `pe` itself when the grids
/// match.
template <class Scalar>
Tensor<Scalar> resize_positional_embedding(const Tensor<Scalar>& pe, const std::array<Index, 3>& from,
                                           const std::array<Index, 3>& to) {
  if (from == to) return pe;
  const Index d = pe.dim(2), n_out = to[0] * to[1] * to[2];
  if (pe.dim(1) != from[0] * from[1] * from[2]) throw ShapeError("positional embedding does not match its grid");
  struct Tap {
    Index lo, hi;
    Scalar w;  // weight of hi
  };
  auto taps = [](Index src, Index dst) {
    std::vector<Tap> t(static_cast<std::size_t>(dst));
    for (Index i = 0; i < dst; ++i) {
      const double pos = dst > 1 ? static_cast<double>(i) * static_cast<double>(src - 1) / static_cast<double>(dst - 1)
                                 : static_cast<double>(src - 1) / 2.0;
      const Index lo = std::min(static_cast<Index>(pos), src - 1);
      t[static_cast<std::size_t>(i)] = {lo, std::min(lo + 1, src - 1), static_cast<Scalar>(pos - static_cast<double>(lo))};
    }
    return t;
  };
  const auto tx = taps(from[0], to[0]), ty = taps(from[1], to[1]), tz = taps(from[2], to[2]);
  // Each output token is a weighted sum of 8 input tokens.
  std::vector<std::pair<Index, Scalar>> corners(static_cast<std::size_t>(n_out * 8));
  for (Index i = 0; i < to[0]; ++i)
    for (Index j = 0; j < to[1]; ++j)
      for (Index k = 0; k < to[2]; ++k) {
        const auto& a = tx[static_cast<std::size_t>(i)];
        const auto& b = ty[static_cast<std::size_t>(j)];
        const auto& c = tz[static_cast<std::size_t>(k)];
        const Index o = (i * to[1] + j) * to[2] + k;
        for (int m = 0; m < 8; ++m) {
          const Index xi = (m & 4) ? a.hi : a.lo, yi = (m & 2) ? b.hi : b.lo, zi = (m & 1) ? c.hi : c.lo;
          const Scalar w = ((m & 4) ? a.w : Scalar(1) - a.w) * ((m & 2) ? b.w : Scalar(1) - b.w) *
                           ((m & 1) ? c.w : Scalar(1) - c.w);
          corners[static_cast<std::size_t>(o * 8 + m)] = {(xi * from[1] + yi) * from[2] + zi, w};
        }
      }
  Tensor<Scalar> out(Shape{1, n_out, d});
  auto src = pe.data();
  auto dst = out.data();
  for (Index o = 0; o < n_out; ++o)
    for (int m = 0; m < 8; ++m) {
      const auto [t, w] = corners[static_cast<std::size_t>(o * 8 + m)];
      for (Index e = 0; e < d; ++e) dst[o * d + e] += w * src[t * d + e];
    }
  detail::record<Scalar>({&pe}, out, [pe, corners = std::move(corners), n_out, d](std::span<const Scalar> g) {
    auto gp = pe.grad_buffer();
    for (Index o = 0; o < n_out; ++o)
      for (int m = 0; m < 8; ++m) {
        const auto [t, w] = corners[static_cast<std::size_t>(o * 8 + m)];
        for (Index e = 0; e < d; ++e) gp[t * d + e] += w * g[o * d + e];
      }
  });
  return out;
}

/// Projection conv (K -> d), flatten to token-major (B, N, d), add the
/// learned positional embedding, resized when the grid differs from the
/// one the model was configured for.
template <class Scalar>
Tensor<Scalar> feature_embed(const Tensor<Scalar>& features, const VitBlock<Scalar>& vit) {
  auto projected = conv3d(features, vit.project_spec, vit.project_weight, vit.project_bias);
  const Index batch = projected.dim(0), d = projected.dim(1);
  const std::array<Index, 3> grid{projected.dim(2), projected.dim(3), projected.dim(4)};
  const Index n = grid[0] * grid[1] * grid[2];
  auto tokens = batch_transpose(reshape(projected, Shape{batch, d, n}));
  return add(tokens, resize_positional_embedding(vit.pos_embed, vit.grid, grid));
}

/// Pre-norm transformer layer: z' = MHA(LN(z)) + z, z'' = FFN(LN(z')) + z'.
template <class Scalar>
Tensor<Scalar> transformer_layer(const Tensor<Scalar>& z, const TransformerLayer<Scalar>& layer,
                                 std::vector<Scalar>* attention_weights = nullptr) {
  auto h = layer_norm(z, layer.ln1_gamma, layer.ln1_beta, layer.eps);
  auto q = linear(h, layer.q_weight, layer.q_bias);
  auto k = linear(h, layer.k_weight, layer.k_bias);
  auto v = linear(h, layer.v_weight, layer.v_bias);
  auto attended = multi_head_attention(q, k, v, layer.heads, attention_weights);
  auto z1 = add(z, linear(attended, layer.out_weight, layer.out_bias));
  auto h2 = layer_norm(z1, layer.ln2_gamma, layer.ln2_beta, layer.eps);
  auto ffn = linear(gelu(linear(h2, layer.ffn1_weight, layer.ffn1_bias)), layer.ffn2_weight, layer.ffn2_bias);
  return add(z1, ffn);
}

/// Token sequence (B, N, d) back to a (B, K, X, Y, Z) feature map.
template <class Scalar>
Tensor<Scalar> feature_map_back(const Tensor<Scalar>& z, const VitBlock<Scalar>& vit,
                                const std::array<Index, 3>& grid) {
  if (z.rank() != 3) throw ShapeError("token sequence must be (B, N, d)");
  const Index batch = z.dim(0), n = z.dim(1), d = z.dim(2);
  if (n != grid[0] * grid[1] * grid[2])
    throw ShapeError("token count " + std::to_string(n) + " does not match target grid (" +
                     std::to_string(grid[0]) + "," + std::to_string(grid[1]) + "," + std::to_string(grid[2]) + ")");
  auto volume = reshape(batch_transpose(z), Shape{batch, d, grid[0], grid[1], grid[2]});
  return conv3d(volume, vit.map_spec, vit.map_weight, vit.map_bias);
}

template <class Scalar>
Tensor<Scalar> vit_apply(const Tensor<Scalar>& features, const VitBlock<Scalar>& vit, Shape* token_shape = nullptr) {
  auto z = feature_embed(features, vit);
  if (token_shape) *token_shape = z.shape();
  for (const auto& layer : vit.layers) z = transformer_layer(z, layer);
  return feature_map_back(z, vit, {features.dim(2), features.dim(3), features.dim(4)});
}

/// Raw class scores (B, num_classes, X, Y, Z); no softmax.
template <class Scalar>
Tensor<Scalar> forward(const BiTrUnet<Scalar>& model, const Tensor<Scalar>& x, ForwardTrace* trace = nullptr) {
  const auto& cfg = model.config();
  if (x.rank() != 5) throw ShapeError("model input must be (B, C, X, Y, Z), got " + to_string(x.shape()));
  if (x.dim(1) != cfg.in_channels)
    throw ShapeError("model input channel mismatch on axis 1: expected " + std::to_string(cfg.in_channels) +
                     ", got " + std::to_string(x.dim(1)));
  for (Index ax = 2; ax < 5; ++ax)
    if (x.dim(ax) % ModelConfig::divisor != 0 || x.dim(ax) == 0)
      throw ShapeError("input axis " + std::to_string(ax) + " of size " + std::to_string(x.dim(ax)) +
                       " is not a positive multiple of 16");

  std::array<Tensor<Scalar>, 5> skips;
  skips[0] = conv_block(x, model.init);
  for (std::size_t i = 0; i < 4; ++i)
    skips[i + 1] = cbam_apply(conv_block(skips[i], model.encoder[i].conv), model.encoder[i].cbam);
  if (trace) {
    trace->encoder.clear();
    for (const auto& s : skips) trace->encoder.push_back(s.shape());
  }

  auto skip3 = vit_apply(skips[3], model.vit_skip, trace ? &trace->skip_tokens : nullptr);
  auto u = vit_apply(skips[4], model.vit_bottleneck, trace ? &trace->bottleneck_tokens : nullptr);

  const std::array<Tensor<Scalar>, 4> lateral{skip3, skips[2], skips[1], skips[0]};
  if (trace) trace->decoder.clear();
  for (std::size_t i = 0; i < 4; ++i) {
    u = conv_block(u, model.decoder[i].up);
    u = conv_block(concat<Scalar>({u, lateral[i]}, 1), model.decoder[i].fuse);
    if (trace) trace->decoder.push_back(u.shape());
  }
  return conv3d(u, model.head_spec, model.head_weight, model.head_bias);
}

// ---------------------------------------------------------------------------
// Checkpoints: little-endian "BTRU" files holding the config and every
// parameter as float32.

template <class Scalar>
void save_checkpoint(const BiTrUnet<Scalar>& model, const std::filesystem::path& path);

template <class Scalar>
BiTrUnet<Scalar> load_checkpoint(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_config(const ModelConfig& config);

extern template class BiTrUnet<float>;
extern template class BiTrUnet<double>;

}  // namespace bitr
