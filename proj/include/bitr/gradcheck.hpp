#pragma once

#include <cmath>

#include "bitr/tensor.hpp"

namespace bitr {

/// Central-difference gradient of a scalar function:
/// (f(x + h e_i) - f(x - h e_i)) / 2h for every element i.
template <class Scalar, class Fn>
Tensor<Scalar> finite_difference_grad(Fn&& f, const Tensor<Scalar>& x, Scalar h) {
  if (!(h > Scalar(0))) throw std::invalid_argument("finite difference step must be positive");
  Tensor<Scalar> probe = x.detach();
  Tensor<Scalar> grad(x.shape());
  for (Index i = 0; i < probe.numel(); ++i) {
    const Scalar saved = probe[i];
    probe[i] = saved + h;
    const Scalar up = f(std::as_const(probe));
    probe[i] = saved - h;
    const Scalar down = f(std::as_const(probe));
    probe[i] = saved;
    grad[i] = (up - down) / (Scalar(2) * h);
  }
  return grad;
}

/// |a - b| / max(|a|, |b|, floor): relative error that degrades to an
/// absolute one for values near zero.
template <class Scalar>
Scalar relative_error(Scalar a, Scalar b, Scalar floor = Scalar(1e-8)) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

template <class Scalar>
Scalar max_relative_error(std::span<const Scalar> a, std::span<const Scalar> b, Scalar floor = Scalar(1e-8)) {
  if (a.size() != b.size()) throw ShapeError("relative error of buffers with different lengths");
  Scalar worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, relative_error(a[i], b[i], floor));
  return worst;
}

}  // namespace bitr
