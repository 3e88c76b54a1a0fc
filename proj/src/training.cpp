#include "bitr/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "bitr/binary_io.hpp"

namespace bitr {

double poly_lr(Index iter, const LrSchedule& s) {
  if (s.total_iters <= 0) throw std::invalid_argument("schedule needs a positive iteration count");
  if (iter < 0 || iter > s.total_iters)
    throw std::out_of_range("iteration " + std::to_string(iter) + " outside [0, " + std::to_string(s.total_iters) +
                            "]");
  if (iter == 0) return s.base_lr;
  const double remaining = 1.0 - static_cast<double>(iter) / static_cast<double>(s.total_iters);
  return s.base_lr * std::pow(remaining, s.power);
}

template <class Scalar>
void adam_step(const std::vector<NamedTensor<Scalar>>& params, AdamState<Scalar>& state, double lr) {
  for (const auto& p : params)
    if (!p.value.has_grad()) throw std::invalid_argument("parameter '" + p.name + "' has no gradient");
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.value.numel()), Scalar(0));
      state.v.emplace_back(static_cast<std::size_t>(p.value.numel()), Scalar(0));
    }
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
  const auto b1 = static_cast<Scalar>(state.beta1), b2 = static_cast<Scalar>(state.beta2);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto value = params[i].value;
    if (static_cast<Index>(state.m[i].size()) != value.numel())
      throw ShapeError("optimizer state does not match parameter '" + params[i].name + "'");
    auto w = value.data();
    auto g = value.grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < m.size(); ++k) {
      m[k] = b1 * m[k] + (Scalar(1) - b1) * g[k];
      v[k] = b2 * v[k] + (Scalar(1) - b2) * g[k] * g[k];
      const double m_hat = static_cast<double>(m[k]) / c1;
      const double v_hat = static_cast<double>(v[k]) / c2;
      w[k] = static_cast<Scalar>(static_cast<double>(w[k]) - lr * m_hat / (std::sqrt(v_hat) + state.eps));
    }
  }
}

AugmentedSample augment(const Volume4D& image, const SegmentationMask& label, const AugmentConfig& cfg,
                        std::mt19937_64& rng) {
  if (!(label.grid == image.grid)) throw ShapeError("label grid does not match the image grid");
  const std::array<Index, 3> dims{image.grid.x, image.grid.y, image.grid.z};
  const std::array<Index, 3> ext{cfg.crop.x, cfg.crop.y, cfg.crop.z};
  std::array<Index, 3> origin{};
  for (int a = 0; a < 3; ++a) {
    if (ext[a] > dims[a])
      throw ShapeError("crop of " + std::to_string(ext[a]) + " exceeds volume size " + std::to_string(dims[a]) +
                       " on spatial axis " + std::to_string(a));
    origin[a] = std::uniform_int_distribution<Index>(0, dims[a] - ext[a])(rng);
  }
  AugmentedSample out{crop(image, origin, cfg.crop), crop(label, origin, cfg.crop)};
  if (cfg.intensity) {
    std::uniform_real_distribution<double> scale(1.0 - cfg.scale, 1.0 + cfg.scale);
    std::uniform_real_distribution<double> shift(-cfg.shift, cfg.shift);
    for (int c = 0; c < out.image.channels; ++c) {
      const double s = scale(rng), d = shift(rng);
      for (Index v = 0; v < out.image.grid.voxels(); ++v)
        out.image.at(c, v) = static_cast<float>(out.image.at(c, v) * s + d);
    }
  }
  return out;
}

void LossConfig::validate() const {
  if (ce_weight < 0 || dice_weight < 0) throw std::invalid_argument("loss weights must be nonnegative");
  if (ce_weight == 0 && dice_weight == 0) throw std::invalid_argument("loss weights cannot both be zero");
  if (!(smooth >= 0)) throw std::invalid_argument("dice smoothing must be nonnegative");
}

template <class Scalar>
LossTerms<Scalar> segmentation_loss(const Tensor<Scalar>& scores, const std::vector<std::uint8_t>& target,
                                    const LossConfig& cfg) {
  cfg.validate();
  if (scores.rank() < 2) throw ShapeError("scores must be (B, K, ...)");
  const Index batch = scores.dim(0), classes = scores.dim(1);
  const Index voxels = scores.numel() / std::max<Index>(batch * classes, 1);
  if (static_cast<Index>(target.size()) != batch * voxels)
    throw ShapeError("target holds " + std::to_string(target.size()) + " labels, scores have " +
                     std::to_string(batch * voxels) + " voxels");
  for (std::size_t i = 0; i < target.size(); ++i)
    if (target[i] >= classes)
      throw std::out_of_range("label " + std::to_string(target[i]) + " at voxel " + std::to_string(i) +
                              " outside [0, " + std::to_string(classes) + ")");

  auto s = scores.data();
  std::vector<double> p(static_cast<std::size_t>(scores.numel()));
  auto at = [&](Index n, Index k, Index v) { return static_cast<std::size_t>((n * classes + k) * voxels + v); };
  double ce = 0;
  for (Index n = 0; n < batch; ++n)
    for (Index v = 0; v < voxels; ++v) {
      double m = -std::numeric_limits<double>::infinity();
      for (Index k = 0; k < classes; ++k) m = std::max(m, static_cast<double>(s[at(n, k, v)]));
      double z = 0;
      for (Index k = 0; k < classes; ++k) z += std::exp(static_cast<double>(s[at(n, k, v)]) - m);
      for (Index k = 0; k < classes; ++k) p[at(n, k, v)] = std::exp(static_cast<double>(s[at(n, k, v)]) - m) / z;
      const Index t = target[static_cast<std::size_t>(n * voxels + v)];
      ce -= static_cast<double>(s[at(n, t, v)]) - m - std::log(z);
    }
  const double count = static_cast<double>(batch * voxels);
  ce /= count;

  std::vector<double> inter(static_cast<std::size_t>(classes), 0.0), psum(inter), tsum(inter), dice(inter);
  for (Index n = 0; n < batch; ++n)
    for (Index v = 0; v < voxels; ++v) {
      const Index t = target[static_cast<std::size_t>(n * voxels + v)];
      tsum[static_cast<std::size_t>(t)] += 1.0;
      for (Index k = 1; k < classes; ++k) {
        psum[static_cast<std::size_t>(k)] += p[at(n, k, v)];
        if (k == t) inter[static_cast<std::size_t>(k)] += p[at(n, k, v)];
      }
    }
  // Classes entering the Dice average; their count is the divisor.
  std::vector<char> averaged(static_cast<std::size_t>(classes), 0);
  double mean_dice = 0;
  Index fg = 0;
  for (Index k = 1; k < classes; ++k) {
    const auto kk = static_cast<std::size_t>(k);
    dice[kk] = (2.0 * inter[kk] + cfg.smooth) / (psum[kk] + tsum[kk] + cfg.smooth);
    if (cfg.present_classes_only && tsum[kk] == 0) continue;
    averaged[kk] = 1;
    mean_dice += dice[kk];
    ++fg;
  }
  const double dice_term = fg > 0 ? 1.0 - mean_dice / static_cast<double>(fg) : 0.0;

  LossTerms<Scalar> terms;
  terms.ce = ce;
  terms.dice = dice_term;
  terms.total = Tensor<Scalar>::scalar(static_cast<Scalar>(cfg.ce_weight * ce + cfg.dice_weight * dice_term));
  detail::record<Scalar>(
      {&scores}, terms.total,
      [=, p = std::move(p), target = target, dice = std::move(dice), averaged = std::move(averaged)](std::span<const Scalar> g) {
        auto gs = scores.grad_buffer();
        const double upstream = static_cast<double>(g[0]);
        std::vector<double> a(static_cast<std::size_t>(classes));
        for (Index n = 0; n < batch; ++n)
          for (Index v = 0; v < voxels; ++v) {
            const Index t = target[static_cast<std::size_t>(n * voxels + v)];
            double dot = 0;
            a[0] = 0;
            for (Index k = 1; k < classes; ++k) {
              const auto kk = static_cast<std::size_t>(k);
              const double tk = k == t ? 1.0 : 0.0;
              if (!averaged[kk]) {
                a[kk] = 0;
                continue;
              }
              a[kk] = -cfg.dice_weight / static_cast<double>(fg) * (2.0 * tk - dice[kk]) /
                      (psum[kk] + tsum[kk] + cfg.smooth);
              dot += a[kk] * p[at(n, k, v)];
            }
            for (Index k = 0; k < classes; ++k) {
              const double pk = p[at(n, k, v)];
              const double tk = k == t ? 1.0 : 0.0;
              const double d = pk * (a[static_cast<std::size_t>(k)] - dot) + cfg.ce_weight * (pk - tk) / count;
              gs[at(n, k, v)] += static_cast<Scalar>(upstream * d);
            }
          }
      });
  return terms;
}

template <class Scalar>
double soft_dice(const Tensor<Scalar>& scores, const std::vector<std::uint8_t>& target, int cls) {
  const Index classes = scores.dim(1);
  const Index voxels = scores.numel() / classes;
  if (scores.dim(0) != 1 || static_cast<Index>(target.size()) != voxels) throw ShapeError("soft_dice expects batch 1");
  double inter = 0, psum = 0, tsum = 0;
  auto s = scores.data();
  for (Index v = 0; v < voxels; ++v) {
    double m = -std::numeric_limits<double>::infinity();
    for (Index k = 0; k < classes; ++k) m = std::max(m, static_cast<double>(s[k * voxels + v]));
    double z = 0;
    for (Index k = 0; k < classes; ++k) z += std::exp(static_cast<double>(s[k * voxels + v]) - m);
    const double p = std::exp(static_cast<double>(s[cls * voxels + v]) - m) / z;
    const double t = target[static_cast<std::size_t>(v)] == cls ? 1.0 : 0.0;
    inter += p * t;
    psum += p;
    tsum += t;
  }
  if (psum + tsum == 0) return 1.0;
  return 2.0 * inter / (psum + tsum);
}

template <class Scalar>
Tensor<Scalar> to_tensor(const Volume4D& v) {
  Tensor<Scalar> t(Shape{1, v.channels, v.grid.x, v.grid.y, v.grid.z});
  std::copy(v.data.begin(), v.data.end(), t.data().begin());
  return t;
}

namespace {

std::string checkpoint_name(Index iter) {
  std::ostringstream os;
  os << "checkpoint_" << std::setw(6) << std::setfill('0') << iter << ".btru";
  return os.str();
}

}  // namespace

template <class Scalar>
std::vector<TrainRecord> train_loop(BiTrUnet<Scalar>& model, const std::vector<CaseRecord>& cases,
                                    const TrainConfig& cfg) {
  if (cases.empty()) throw std::invalid_argument("training needs at least one case");
  if (cfg.epochs < 0 || cfg.batch_size < 1 || cfg.accumulation < 1)
    throw std::invalid_argument("epochs must be >= 0, batch_size and accumulation >= 1");
  for (const auto& c : cases) {
    if (!c.label) throw std::invalid_argument("case '" + c.id + "' has no label");
    if (c.image.channels != model.config().in_channels)
      throw ShapeError("case '" + c.id + "' has " + std::to_string(c.image.channels) + " channels, model expects " +
                       std::to_string(model.config().in_channels));
  }
  cfg.loss.validate();

  const auto& size = model.config().input_size;
  AugmentConfig aug = cfg.augmentation;
  aug.crop = Grid{size[0], size[1], size[2]};
  std::mt19937_64 rng(cfg.seed);

  std::ofstream log;
  if (!cfg.out_dir.empty()) {
    std::filesystem::create_directories(cfg.out_dir);
    const auto log_path = cfg.out_dir / "loss.tsv";
    log.open(log_path, std::ios::trunc);
    if (!log) throw IoError("cannot open '" + log_path.string() + "' for writing");
    log << std::setprecision(9) << "iter\tlr\ttotal\tce\tdice\n";
    save_checkpoint(model, cfg.out_dir / checkpoint_name(0));
  }

  const auto per_step = cfg.batch_size * cfg.accumulation;
  const Index n_cases = static_cast<Index>(cases.size());
  const Index steps_per_epoch = (n_cases + per_step - 1) / per_step;
  const Index total = cfg.epochs * steps_per_epoch;
  std::vector<TrainRecord> records;
  if (total == 0) return records;

  std::vector<Index> order;
  std::size_t cursor = 0;
  auto next_case = [&]() -> const CaseRecord& {
    if (cursor == order.size()) {
      order.resize(static_cast<std::size_t>(n_cases));
      std::iota(order.begin(), order.end(), Index{0});
      std::shuffle(order.begin(), order.end(), rng);
      cursor = 0;
    }
    return cases[static_cast<std::size_t>(order[cursor++])];
  };

  const LrSchedule schedule{cfg.base_lr, total, cfg.lr_power};
  AdamState<Scalar> adam;
  const Index voxels = size[0] * size[1] * size[2];
  for (Index step = 0; step < total; ++step) {
    model.zero_grad();
    TrainRecord rec;
    rec.iter = step;
    rec.lr = poly_lr(step, schedule);
    for (Index micro = 0; micro < cfg.accumulation; ++micro) {
      Tensor<Scalar> batch(Shape{cfg.batch_size, model.config().in_channels, size[0], size[1], size[2]});
      std::vector<std::uint8_t> target;
      target.reserve(static_cast<std::size_t>(cfg.batch_size * voxels));
      for (Index b = 0; b < cfg.batch_size; ++b) {
        const auto& c = next_case();
        AugmentedSample sample;
        if (cfg.augment) {
          sample = augment(c.image, *c.label, aug, rng);
        } else {
          const std::array<Index, 3> centre{(c.image.grid.x - aug.crop.x) / 2, (c.image.grid.y - aug.crop.y) / 2,
                                            (c.image.grid.z - aug.crop.z) / 2};
          sample = {crop(c.image, centre, aug.crop), crop(*c.label, centre, aug.crop)};
        }
        std::copy(sample.image.data.begin(), sample.image.data.end(),
                  batch.data().begin() + b * static_cast<Index>(sample.image.data.size()));
        target.insert(target.end(), sample.label.labels.begin(), sample.label.labels.end());
      }
      Tape<Scalar> tape;
      auto terms = segmentation_loss(forward(model, batch), target, cfg.loss);
      const auto inv = Scalar(1) / static_cast<Scalar>(cfg.accumulation);
      tape.backward(scale(terms.total, inv));
      rec.total += static_cast<double>(terms.total.item()) / static_cast<double>(cfg.accumulation);
      rec.ce += terms.ce / static_cast<double>(cfg.accumulation);
      rec.dice += terms.dice / static_cast<double>(cfg.accumulation);
    }
    adam_step(model.parameters(), adam, rec.lr);
    records.push_back(rec);
    if (log.is_open()) {
      log << rec.iter << '\t' << rec.lr << '\t' << rec.total << '\t' << rec.ce << '\t' << rec.dice << '\n';
      if (!log) throw IoError("write to '" + (cfg.out_dir / "loss.tsv").string() + "' failed");
      const bool last = step + 1 == total;
      if (last || (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0))
        save_checkpoint(model, cfg.out_dir / checkpoint_name(step + 1));
    }
  }
  return records;
}

template void adam_step(const std::vector<NamedTensor<float>>&, AdamState<float>&, double);
template void adam_step(const std::vector<NamedTensor<double>>&, AdamState<double>&, double);
template LossTerms<float> segmentation_loss(const Tensor<float>&, const std::vector<std::uint8_t>&, const LossConfig&);
template LossTerms<double> segmentation_loss(const Tensor<double>&, const std::vector<std::uint8_t>&,
                                             const LossConfig&);
template double soft_dice(const Tensor<float>&, const std::vector<std::uint8_t>&, int);
template double soft_dice(const Tensor<double>&, const std::vector<std::uint8_t>&, int);
template Tensor<float> to_tensor<float>(const Volume4D&);
template Tensor<double> to_tensor<double>(const Volume4D&);
template std::vector<TrainRecord> train_loop(BiTrUnet<float>&, const std::vector<CaseRecord>&, const TrainConfig&);
template std::vector<TrainRecord> train_loop(BiTrUnet<double>&, const std::vector<CaseRecord>&, const TrainConfig&);

}  // namespace bitr
