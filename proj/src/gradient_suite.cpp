#include "bitr/gradient_suite.hpp"

#include <algorithm>
#include <functional>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "bitr/gradcheck.hpp"
#include "bitr/model.hpp"
#include "bitr/training.hpp"

namespace bitr {

namespace {

using T = Tensor<double>;
using Inputs = std::vector<T>;
using Rng = std::mt19937_64;

T randn(Shape s, Rng& rng, double sd = 1.0) {
  T t(std::move(s));
  std::normal_distribution<double> nd(0.0, sd);
  for (auto& v : t.data()) v = nd(rng);
  return t;
}

/// Values at least 0.05 away from zero, so ReLU kinks stay outside the stencil.
T away_from_zero(Shape s, Rng& rng) {
  T t(std::move(s));
  std::uniform_real_distribution<double> mag(0.05, 2.0);
  for (auto& v : t.data()) v = (rng() & 1 ? 1.0 : -1.0) * mag(rng);
  return t;
}

/// Distinct values spaced at least 0.05 apart, so maxima are unique.
T distinct(Shape s, Rng& rng) {
  T t(std::move(s));
  std::vector<double> v(static_cast<std::size_t>(t.numel()));
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i) - 0.05 * static_cast<double>(v.size());
  std::shuffle(v.begin(), v.end(), rng);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

struct OpCase {
  std::string name;
  std::function<Inputs(Rng&)> make;
  std::function<T(const Inputs&)> op;
};

std::vector<OpCase> op_cases() {
  const ConvSpec s1{2, 3, 1, 1, false}, s2{2, 3, 2, 1, false}, t2{3, 2, 2, 1, true}, t1{3, 2, 1, 1, true};
  std::vector<OpCase> c;
  c.push_back({"add", [](Rng& r) { return Inputs{randn({2, 3, 4}, r), randn({1, 3, 1}, r)}; },
               [](const Inputs& x) { return add(x[0], x[1]); }});
  c.push_back({"sub", [](Rng& r) { return Inputs{randn({2, 1, 4}, r), randn({2, 3, 4}, r)}; },
               [](const Inputs& x) { return sub(x[0], x[1]); }});
  c.push_back({"mul", [](Rng& r) { return Inputs{randn({2, 3, 4}, r), randn({2, 3, 1}, r)}; },
               [](const Inputs& x) { return mul(x[0], x[1]); }});
  c.push_back({"scale", [](Rng& r) { return Inputs{randn({5, 3}, r)}; },
               [](const Inputs& x) { return scale(x[0], -1.7); }});
  c.push_back({"relu", [](Rng& r) { return Inputs{away_from_zero({4, 5}, r)}; },
               [](const Inputs& x) { return relu(x[0]); }});
  c.push_back({"sigmoid", [](Rng& r) { return Inputs{randn({4, 5}, r, 2.0)}; },
               [](const Inputs& x) { return sigmoid(x[0]); }});
  c.push_back({"gelu", [](Rng& r) { return Inputs{randn({4, 5}, r, 2.0)}; },
               [](const Inputs& x) { return gelu(x[0]); }});
  c.push_back({"sum", [](Rng& r) { return Inputs{randn({3, 4}, r)}; }, [](const Inputs& x) { return sum(x[0]); }});
  c.push_back({"mean", [](Rng& r) { return Inputs{randn({3, 4}, r)}; }, [](const Inputs& x) { return mean(x[0]); }});
  c.push_back({"sum_axis", [](Rng& r) { return Inputs{randn({2, 3, 4}, r)}; },
               [](const Inputs& x) { return sum_axis(x[0], 1); }});
  c.push_back({"mean_axis", [](Rng& r) { return Inputs{randn({2, 3, 4}, r)}; },
               [](const Inputs& x) { return mean_axis(x[0], 2); }});
  c.push_back({"max_axis", [](Rng& r) { return Inputs{distinct({2, 3, 4}, r)}; },
               [](const Inputs& x) { return max_axis(x[0], 1); }});
  c.push_back({"reshape", [](Rng& r) { return Inputs{randn({2, 6}, r)}; },
               [](const Inputs& x) { return reshape(x[0], Shape{3, 4}); }});
  c.push_back({"concat", [](Rng& r) { return Inputs{randn({2, 1, 3}, r), randn({2, 2, 3}, r)}; },
               [](const Inputs& x) { return concat<double>({x[0], x[1]}, 1); }});
  c.push_back({"flip", [](Rng& r) { return Inputs{randn({1, 2, 3, 2, 4}, r)}; },
               [](const Inputs& x) { return flip(x[0], {2, 4}); }});
  c.push_back({"batch_transpose", [](Rng& r) { return Inputs{randn({2, 3, 4}, r)}; },
               [](const Inputs& x) { return batch_transpose(x[0]); }});
  c.push_back({"matmul", [](Rng& r) { return Inputs{randn({3, 4}, r), randn({4, 2}, r)}; },
               [](const Inputs& x) { return matmul(x[0], x[1]); }});
  c.push_back({"linear", [](Rng& r) { return Inputs{randn({2, 3, 4}, r), randn({4, 5}, r), randn({5}, r)}; },
               [](const Inputs& x) { return linear(x[0], x[1], x[2]); }});
  c.push_back({"layer_norm", [](Rng& r) { return Inputs{randn({2, 3, 5}, r), randn({5}, r), randn({5}, r)}; },
               [](const Inputs& x) { return layer_norm(x[0], x[1], x[2]); }});
  c.push_back({"group_norm",
               [](Rng& r) { return Inputs{randn({2, 4, 2, 2, 3}, r), randn({4}, r), randn({4}, r)}; },
               [](const Inputs& x) { return group_norm(x[0], 2, x[1], x[2]); }});
  c.push_back({"softmax", [](Rng& r) { return Inputs{randn({3, 5}, r, 2.0)}; },
               [](const Inputs& x) { return softmax(x[0], 1); }});
  c.push_back({"global_avg_pool", [](Rng& r) { return Inputs{randn({2, 3, 2, 3, 2}, r)}; },
               [](const Inputs& x) { return global_avg_pool(x[0]); }});
  c.push_back({"global_max_pool", [](Rng& r) { return Inputs{distinct({2, 3, 2, 3, 2}, r)}; },
               [](const Inputs& x) { return global_max_pool(x[0]); }});
  c.push_back({"multi_head_attention",
               [](Rng& r) { return Inputs{randn({2, 4, 6}, r), randn({2, 4, 6}, r), randn({2, 4, 6}, r)}; },
               [](const Inputs& x) { return multi_head_attention(x[0], x[1], x[2], 2); }});
  c.push_back({"conv3d_stride1",
               [s1](Rng& r) { return Inputs{randn({1, 2, 4, 3, 4}, r), randn(s1.weight_shape(), r), randn({3}, r)}; },
               [s1](const Inputs& x) { return conv3d(x[0], s1, x[1], x[2]); }});
  c.push_back({"conv3d_stride2",
               [s2](Rng& r) { return Inputs{randn({2, 2, 4, 4, 2}, r), randn(s2.weight_shape(), r), randn({3}, r)}; },
               [s2](const Inputs& x) { return conv3d(x[0], s2, x[1], x[2]); }});
  c.push_back({"conv_transpose3d_stride2",
               [t2](Rng& r) { return Inputs{randn({1, 3, 2, 3, 2}, r), randn(t2.weight_shape(), r), randn({2}, r)}; },
               [t2](const Inputs& x) { return conv_transpose3d(x[0], t2, x[1], x[2]); }});
  c.push_back({"conv_transpose3d_stride1",
               [t1](Rng& r) { return Inputs{randn({1, 3, 3, 2, 3}, r), randn(t1.weight_shape(), r), randn({2}, r)}; },
               [t1](const Inputs& x) { return conv_transpose3d(x[0], t1, x[1], x[2]); }});
  c.push_back({"positional_embedding_resize", [](Rng& r) { return Inputs{randn({1, 8, 3}, r)}; },
               [](const Inputs& x) { return resize_positional_embedding(x[0], {2, 2, 2}, {3, 4, 2}); }});
  c.push_back({"segmentation_loss", [](Rng& r) { return Inputs{randn({2, 4, 2, 2, 2}, r, 2.0)}; },
               [](const Inputs& x) {
                 static const std::vector<std::uint8_t> target{0, 1, 2, 3, 3, 1, 0, 2, 1, 1, 3, 0, 2, 2, 0, 3};
                 return segmentation_loss(x[0], target, LossConfig{1.0, 1.0, 1e-5}).total;
               }});
  return c;
}

double check_instance(const OpCase& c, Inputs xs, Rng& rng, double h, double floor) {
  const auto out_shape = c.op(xs).shape();
  const auto weights = randn(out_shape, rng);
  auto objective = [&](const Inputs& in) { return sum(mul(c.op(in), weights)); };
  for (auto& x : xs) x.set_requires_grad(true);
  {
    Tape<double> tape;
    tape.backward(objective(xs));
  }
  double worst = 0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const auto numeric = finite_difference_grad(
        [&](const T& probe) {
          Inputs in = xs;
          in[i] = probe;
          return objective(in).item();
        },
        xs[i], h);
    const T& n = numeric;
    worst = std::max(worst, max_relative_error<double>(xs[i].grad(), n.data(), floor));
  }
  return worst;
}

}  // namespace

std::vector<GradcheckResult> run_op_gradchecks(const GradcheckOptions& opts) {
  Rng rng(opts.seed);
  std::vector<GradcheckResult> results;
  for (const auto& c : op_cases()) {
    GradcheckResult r{c.name, opts.instances, 0.0, opts.tolerance};
    for (int i = 0; i < opts.instances; ++i)
      r.max_error = std::max(r.max_error, check_instance(c, c.make(rng), rng, opts.step, opts.floor));
    results.push_back(r);
  }
  return results;
}

GradcheckResult run_model_gradcheck(const ModelGradcheckOptions& opts) {
  ModelConfig cfg;
  cfg.in_channels = 2;
  cfg.base_width = 4;
  cfg.embed_dim = 16;
  cfg.vit_layers = 1;
  cfg.heads = 2;
  cfg.input_size = {16, 16, 16};
  BiTrUnet<double> model(cfg, opts.seed);
  Rng rng(opts.seed + 1);
  // Non-zero biases and affine norm terms so every parameter shapes the output.
  for (const auto& p : model.parameters()) {
    const auto& name = p.name;
    if (name.ends_with("bias") || name.ends_with("beta")) {
      auto v = p.value;
      for (auto& x : v.data()) x = std::normal_distribution<double>(0.0, 0.1)(rng);
    } else if (name.ends_with("gamma")) {
      auto v = p.value;
      for (auto& x : v.data()) x = std::normal_distribution<double>(1.0, 0.1)(rng);
    }
  }
  auto input = randn({1, 2, 16, 16, 16}, rng);
  const auto weights = randn({1, cfg.num_classes, 16, 16, 16}, rng);
  auto objective = [&](const T& x) { return sum(mul(forward(model, x), weights)); };

  model.zero_grad();
  for (const auto& p : model.parameters()) {
    auto v = p.value;
    v.set_requires_grad(true);
  }
  input.set_requires_grad(true);
  {
    Tape<double> tape;
    tape.backward(objective(input));
  }

  std::vector<std::pair<std::string, T>> tensors;
  for (const auto& p : model.parameters()) tensors.emplace_back(p.name, p.value);
  tensors.emplace_back("input", input);
  // One element from a cycling selection of tensors, so all of them are visited.
  std::vector<std::size_t> order(tensors.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::shuffle(order.begin(), order.end(), rng);

  GradcheckResult result{"full_model", 0, 0.0, opts.tolerance};
  const double centre = objective(input.detach()).item();
  const int samples = std::max<int>(opts.samples, 1);
  int kinks = 0;
  auto record = [&](double err, const std::string& name, Index element, double analytic, double numeric) {
    if (err <= result.max_error) return;
    result.max_error = err;
    std::ostringstream where;
    where << name << '[' << element << "]: analytic " << analytic << ", numeric " << numeric;
    result.detail = where.str();
  };
  for (int s = 0; result.instances < samples; ++s) {
    if (s >= 2 * samples) {
      result.max_error = std::numeric_limits<double>::infinity();
      result.detail = "too many non-smooth samples (" + std::to_string(kinks) + ")";
      return result;
    }
    const auto& [name, tensor_ref] = tensors[order[static_cast<std::size_t>(s) % order.size()]];
    auto tensor = tensor_ref;
    const auto element = static_cast<Index>(rng() % static_cast<std::uint64_t>(tensor.numel()));
    const double analytic = tensor.grad()[static_cast<std::size_t>(element)];
    const double saved = tensor[element];
    tensor[element] = saved + opts.step;
    const double up = objective(input.detach()).item();
    tensor[element] = saved - opts.step;
    const double down = objective(input.detach()).item();
    tensor[element] = saved;
    // A ReLU or max switching inside the stencil shows up as disagreeing
    // one-sided slopes. There the analytic slope must lie between them.
    const double right = (up - centre) / opts.step, left = (centre - down) / opts.step;
    if (relative_error(right, left, opts.kink_floor) > opts.kink_threshold) {
      ++kinks;
      const double lo = std::min(left, right), hi = std::max(left, right);
      const double slack = opts.tolerance * std::max({std::abs(lo), std::abs(hi), opts.floor});
      if (analytic < lo - slack || analytic > hi + slack)
        record(std::min(relative_error(analytic, lo, opts.floor), relative_error(analytic, hi, opts.floor)), name,
               element, analytic, analytic < lo ? lo : hi);
      continue;
    }
    record(relative_error(analytic, (up - down) / (2 * opts.step), opts.floor), name, element, analytic,
           (up - down) / (2 * opts.step));
    ++result.instances;
  }
  if (kinks > 0)
    result.detail += (result.detail.empty() ? "" : "; ") + std::to_string(kinks) + " non-smooth samples bracketed";
  return result;
}

}  // namespace bitr
