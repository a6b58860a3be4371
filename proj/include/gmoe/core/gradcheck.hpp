#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "gmoe/core/ops.hpp"
#include "gmoe/core/tensor.hpp"

namespace gmoe {

struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_autodiff = 0.0;
  double worst_fd = 0.0;
};

// Compares reverse-mode gradients against central differences. `build_loss`
// must construct the scalar loss on the given tape (watching the parameters it
// reads) and be deterministic between calls; parameters are perturbed in place
// and restored.
template <typename T>
GradCheckResult gradient_check(
    const std::function<Tensor<T>(Tape<T>&)>& build_loss,
    const std::vector<Tensor<T>*>& params, T h = T(1e-6)) {
  GradCheckResult result;

  Tape<T> tape;
  // Watch everything up front: a parameter the loss never touches (say an
  // expert no token selected) still has a well-defined zero gradient.
  for (const Tensor<T>* p : params) tape.watch(*p);
  Tensor<T> loss = build_loss(tape);
  if (!std::isfinite(static_cast<double>(loss.item())))
    throw NumericError("gradient_check: loss is non-finite at theta");
  auto grads = tape.backward(loss);

  std::vector<Tensor<T>> autodiff;
  autodiff.reserve(params.size());
  for (const Tensor<T>* p : params) autodiff.push_back(grads.of(*p));

  auto eval = [&]() -> double {
    Tape<T> scratch;
    return static_cast<double>(build_loss(scratch).item());
  };

  for (std::size_t pi = 0; pi < params.size(); ++pi) {
    Tensor<T>& p = *params[pi];
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T saved = p.at(i);
      p.at(i) = saved + h;
      const double f_plus = eval();
      p.at(i) = saved - h;
      const double f_minus = eval();
      p.at(i) = saved;

      const double fd = (f_plus - f_minus) / (2.0 * static_cast<double>(h));
      const double ad = static_cast<double>(autodiff[pi].at(i));
      const double denom = std::max({std::abs(ad), std::abs(fd), 1e-8});
      const double rel = std::abs(ad - fd) / denom;
      ++result.checked;
      if (rel > result.max_rel_err) {
        result.max_rel_err = rel;
        result.worst_param = pi;
        result.worst_index = i;
        result.worst_autodiff = ad;
        result.worst_fd = fd;
      }
    }
  }
  return result;
}

}  // namespace gmoe
