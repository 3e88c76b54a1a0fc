#include "bitr/model.hpp"

#include <cmath>

#include "bitr/binary_io.hpp"

namespace bitr {

namespace {

constexpr char kCheckpointMagic[4] = {'B', 'T', 'R', 'U'};
constexpr std::uint32_t kCheckpointVersion = 1;
constexpr std::uint32_t kConfigFields = 12;

template <class Scalar>
class ParameterFactory {
 public:
  ParameterFactory(std::vector<NamedTensor<Scalar>>& registry, std::uint64_t seed) : registry_(registry), rng_(seed) {}

  Tensor<Scalar> normal(const std::string& name, Shape shape, double stddev) {
    Tensor<Scalar> t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& v : t.data()) v = static_cast<Scalar>(dist(rng_));
    return add(name, t);
  }
  Tensor<Scalar> constant(const std::string& name, Shape shape, Scalar value) {
    return add(name, Tensor<Scalar>(std::move(shape), value));
  }

 private:
  Tensor<Scalar> add(const std::string& name, Tensor<Scalar> t) {
    t.set_requires_grad(true);
    registry_.push_back({name, t});
    return t;
  }

  std::vector<NamedTensor<Scalar>>& registry_;
  std::mt19937_64 rng_;
};

template <class Scalar>
ConvBlock<Scalar> make_conv_block(ParameterFactory<Scalar>& f, const std::string& name, Index in, Index out,
                                  Index stride, bool transposed, Index max_groups) {
  ConvBlock<Scalar> b;
  b.spec = ConvSpec{in, out, stride, 1, transposed};
  b.weight = f.normal(name + ".conv.weight", b.spec.weight_shape(), std::sqrt(2.0 / static_cast<double>(in * 27)));
  b.gamma = f.constant(name + ".norm.gamma", Shape{out}, Scalar(1));
  b.beta = f.constant(name + ".norm.beta", Shape{out}, Scalar(0));
  b.groups = norm_groups(out, max_groups);
  return b;
}

template <class Scalar>
CbamBlock<Scalar> make_cbam(ParameterFactory<Scalar>& f, const std::string& name, Index channels, Index reduction) {
  CbamBlock<Scalar> b;
  b.channels = channels;
  const Index hidden = std::max<Index>(1, channels / reduction);
  b.fc1_weight = f.normal(name + ".fc1.weight", Shape{channels, hidden}, std::sqrt(2.0 / static_cast<double>(channels)));
  b.fc1_bias = f.constant(name + ".fc1.bias", Shape{hidden}, Scalar(0));
  b.fc2_weight = f.normal(name + ".fc2.weight", Shape{hidden, channels}, std::sqrt(1.0 / static_cast<double>(hidden)));
  b.fc2_bias = f.constant(name + ".fc2.bias", Shape{channels}, Scalar(0));
  b.spatial_spec = ConvSpec{2, 1, 1, 1, false};
  b.spatial_weight = f.normal(name + ".spatial.weight", b.spatial_spec.weight_shape(), std::sqrt(2.0 / 54.0));
  b.spatial_bias = f.constant(name + ".spatial.bias", Shape{1}, Scalar(0));
  return b;
}

template <class Scalar>
VitBlock<Scalar> make_vit(ParameterFactory<Scalar>& f, const std::string& name, const ModelConfig& cfg,
                          Index channels, std::array<Index, 3> grid) {
  VitBlock<Scalar> v;
  const Index d = cfg.embed_dim, hidden = cfg.ffn_width();
  v.channels = channels;
  v.embed_dim = d;
  v.grid = grid;
  v.project_spec = ConvSpec{channels, d, 1, 1, false};
  v.project_weight = f.normal(name + ".project.weight", v.project_spec.weight_shape(),
                              std::sqrt(2.0 / static_cast<double>(channels * 27)));
  v.project_bias = f.constant(name + ".project.bias", Shape{d}, Scalar(0));
  v.pos_embed = f.normal(name + ".pos_embed", Shape{1, v.tokens(), d}, 0.02);
  const double s = std::sqrt(1.0 / static_cast<double>(d));
  for (Index l = 0; l < cfg.vit_layers; ++l) {
    const std::string p = name + ".layers." + std::to_string(l);
    TransformerLayer<Scalar> t;
    t.heads = cfg.heads;
    t.ln1_gamma = f.constant(p + ".ln1.gamma", Shape{d}, Scalar(1));
    t.ln1_beta = f.constant(p + ".ln1.beta", Shape{d}, Scalar(0));
    t.q_weight = f.normal(p + ".attn.q.weight", Shape{d, d}, s);
    t.q_bias = f.constant(p + ".attn.q.bias", Shape{d}, Scalar(0));
    t.k_weight = f.normal(p + ".attn.k.weight", Shape{d, d}, s);
    t.k_bias = f.constant(p + ".attn.k.bias", Shape{d}, Scalar(0));
    t.v_weight = f.normal(p + ".attn.v.weight", Shape{d, d}, s);
    t.v_bias = f.constant(p + ".attn.v.bias", Shape{d}, Scalar(0));
    t.out_weight = f.normal(p + ".attn.out.weight", Shape{d, d}, s);
    t.out_bias = f.constant(p + ".attn.out.bias", Shape{d}, Scalar(0));
    t.ln2_gamma = f.constant(p + ".ln2.gamma", Shape{d}, Scalar(1));
    t.ln2_beta = f.constant(p + ".ln2.beta", Shape{d}, Scalar(0));
    t.ffn1_weight = f.normal(p + ".ffn.fc1.weight", Shape{d, hidden}, std::sqrt(2.0 / static_cast<double>(d)));
    t.ffn1_bias = f.constant(p + ".ffn.fc1.bias", Shape{hidden}, Scalar(0));
    t.ffn2_weight = f.normal(p + ".ffn.fc2.weight", Shape{hidden, d}, std::sqrt(1.0 / static_cast<double>(hidden)));
    t.ffn2_bias = f.constant(p + ".ffn.fc2.bias", Shape{d}, Scalar(0));
    v.layers.push_back(std::move(t));
  }
  v.map_spec = ConvSpec{d, channels, 1, 1, false};
  v.map_weight =
      f.normal(name + ".map.weight", v.map_spec.weight_shape(), std::sqrt(2.0 / static_cast<double>(d * 27)));
  v.map_bias = f.constant(name + ".map.bias", Shape{channels}, Scalar(0));
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  auto positive = [](Index v, const char* what) {
    if (v <= 0) throw std::invalid_argument(std::string(what) + " must be positive");
  };
  positive(in_channels, "in_channels");
  positive(base_width, "base_width");
  positive(num_classes, "num_classes");
  positive(embed_dim, "embed_dim");
  positive(heads, "heads");
  positive(cbam_reduction, "cbam_reduction");
  positive(max_norm_groups, "max_norm_groups");
  if (vit_layers < 0) throw std::invalid_argument("vit_layers must be nonnegative");
  if (ffn_hidden < 0) throw std::invalid_argument("ffn_hidden must be nonnegative");
  if (embed_dim % heads != 0) throw std::invalid_argument("embed_dim must be divisible by heads");
  for (int a = 0; a < 3; ++a)
    if (input_size[a] <= 0 || input_size[a] % divisor != 0)
      throw std::invalid_argument("input axis " + std::to_string(a) + " of size " + std::to_string(input_size[a]) +
                                  " is not a positive multiple of 16");
}

Index norm_groups(Index channels, Index max_groups) {
  for (Index g = std::min(channels, max_groups); g > 1; --g)
    if (channels % g == 0) return g;
  return 1;
}

template <class Scalar>
BiTrUnet<Scalar>::BiTrUnet(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  ParameterFactory<Scalar> f(params_, seed);
  const auto w = config_.widths();
  const Index groups = config_.max_norm_groups;

  init = make_conv_block(f, "init", config_.in_channels, w[0], 1, false, groups);
  for (std::size_t i = 0; i < 4; ++i) {
    const std::string name = "enc" + std::to_string(i + 1);
    encoder[i].conv = make_conv_block(f, name, w[i], w[i + 1], 2, false, groups);
    encoder[i].cbam = make_cbam(f, name + ".cbam", w[i + 1], config_.cbam_reduction);
  }
  vit_skip = make_vit(f, "vit_skip", config_, w[3], config_.grid_at(8));
  vit_bottleneck = make_vit(f, "vit_bottleneck", config_, w[4], config_.grid_at(16));
  for (std::size_t i = 0; i < 4; ++i) {
    const std::size_t level = 4 - i;  // dec4 .. dec1
    const std::string name = "dec" + std::to_string(level);
    decoder[i].up = make_conv_block(f, name + ".up", w[level], w[level - 1], 2, true, groups);
    decoder[i].fuse = make_conv_block(f, name + ".fuse", 2 * w[level - 1], w[level - 1], 1, false, groups);
  }
  head_spec = ConvSpec{w[0], config_.num_classes, 1, 1, false};
  // Small head so the initial class scores are close to uniform.
  head_weight = f.normal("head.weight", head_spec.weight_shape(), 0.1 * std::sqrt(1.0 / static_cast<double>(w[0] * 27)));
  head_bias = f.constant("head.bias", Shape{config_.num_classes}, Scalar(0));
}

template <class Scalar>
Index BiTrUnet<Scalar>::parameter_count() const {
  Index total = 0;
  for (const auto& p : params_) total += p.value.numel();
  return total;
}

template <class Scalar>
void BiTrUnet<Scalar>::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

std::vector<std::uint8_t> encode_config(const ModelConfig& c) {
  ByteWriter w;
  w.put<std::uint32_t>(kConfigFields);
  for (Index v : {c.in_channels, c.base_width, c.num_classes, c.embed_dim, c.vit_layers, c.heads, c.ffn_hidden,
                  c.cbam_reduction, c.max_norm_groups, c.input_size[0], c.input_size[1], c.input_size[2]})
    w.put<std::uint32_t>(static_cast<std::uint32_t>(v));
  return std::move(w.bytes());
}

template <class Scalar>
void save_checkpoint(const BiTrUnet<Scalar>& model, const std::filesystem::path& path) {
  ByteWriter w;
  w.put_bytes(std::string_view(kCheckpointMagic, 4));
  w.put<std::uint32_t>(kCheckpointVersion);
  auto config = encode_config(model.config());
  w.bytes().insert(w.bytes().end(), config.begin(), config.end());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.parameters().size()));
  std::vector<float> buffer;
  for (const auto& p : model.parameters()) {
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.name.size()));
    w.put_bytes(p.name);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(p.value.rank()));
    for (Index d : p.value.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(d));
    buffer.assign(p.value.data().begin(), p.value.data().end());
    w.put_array(buffer.data(), buffer.size());
  }
  write_file_bytes(path, w.bytes());
}

template <class Scalar>
BiTrUnet<Scalar> load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  ByteReader r(bytes.data(), bytes.size());
  if (r.get_bytes(4, "magic") != std::string_view(kCheckpointMagic, 4))
    throw FormatError(FormatError::Kind::bad_magic, 0, "not a checkpoint: bad magic");
  const auto version_at = r.offset();
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion)
    throw FormatError(FormatError::Kind::unsupported_version, version_at,
                      "unsupported checkpoint version " + std::to_string(version));
  const auto fields_at = r.offset();
  if (r.get<std::uint32_t>("config field count") != kConfigFields)
    throw FormatError(FormatError::Kind::invalid_field, fields_at, "unexpected config field count");
  std::array<Index, kConfigFields> f{};
  for (auto& v : f) v = static_cast<Index>(r.get<std::uint32_t>("config"));
  ModelConfig cfg;
  cfg.in_channels = f[0];
  cfg.base_width = f[1];
  cfg.num_classes = f[2];
  cfg.embed_dim = f[3];
  cfg.vit_layers = f[4];
  cfg.heads = f[5];
  cfg.ffn_hidden = f[6];
  cfg.cbam_reduction = f[7];
  cfg.max_norm_groups = f[8];
  cfg.input_size = {f[9], f[10], f[11]};
  try {
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatError::Kind::invalid_field, fields_at, std::string("invalid config: ") + e.what());
  }

  BiTrUnet<Scalar> model(cfg, 0);
  const auto count_at = r.offset();
  const auto count = r.get<std::uint32_t>("parameter count");
  if (count != model.parameters().size())
    throw FormatError(FormatError::Kind::invalid_field, count_at,
                      "checkpoint holds " + std::to_string(count) + " parameters, model expects " +
                          std::to_string(model.parameters().size()));
  std::vector<float> buffer;
  for (const auto& p : model.parameters()) {
    const auto entry_at = r.offset();
    const auto name_len = r.get<std::uint32_t>("name length");
    const auto name = r.get_bytes(name_len, "parameter name");
    if (name != p.name)
      throw FormatError(FormatError::Kind::invalid_field, entry_at,
                        "expected parameter '" + p.name + "', found '" + name + "'");
    const auto rank = r.get<std::uint32_t>("rank");
    Shape shape(rank);
    for (auto& d : shape) d = static_cast<Index>(r.get<std::uint32_t>("dimension"));
    if (shape != p.value.shape())
      throw FormatError(FormatError::Kind::invalid_field, entry_at,
                        "parameter '" + name + "' has shape " + to_string(shape) + ", expected " +
                            to_string(p.value.shape()));
    buffer.resize(static_cast<std::size_t>(p.value.numel()));
    r.get_array(buffer.data(), buffer.size(), "parameter data");
    auto dst = p.value;
    std::copy(buffer.begin(), buffer.end(), dst.data().begin());
  }
  if (r.remaining() != 0)
    throw FormatError(FormatError::Kind::invalid_field, r.offset(), "trailing bytes after last parameter");
  return model;
}

template class BiTrUnet<float>;
template class BiTrUnet<double>;
template void save_checkpoint(const BiTrUnet<float>&, const std::filesystem::path&);
template void save_checkpoint(const BiTrUnet<double>&, const std::filesystem::path&);
template BiTrUnet<float> load_checkpoint<float>(const std::filesystem::path&);
template BiTrUnet<double> load_checkpoint<double>(const std::filesystem::path&);

}  // namespace bitr
