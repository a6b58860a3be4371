#pragma once

#include <cmath>
#include <vector>

#include "gmoe/core/tensor.hpp"

namespace gmoe {

template <typename T>
struct AdamState {
  std::vector<Tensor<T>> m, v;  // first/second moments, shaped like params
  std::size_t t = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;

  void ensure(const std::vector<Tensor<T>*>& params) {
    if (!m.empty()) {
      if (m.size() != params.size())
        throw ShapeError("adam state does not match parameter list");
      return;
    }
    for (const Tensor<T>* p : params) {
      m.emplace_back(p->shape());
      v.emplace_back(p->shape());
    }
  }
};

// Standard Adam with bias correction. Decoupled weight decay shrinks the
// parameter before the moment update: theta <- theta - lr*wd*theta.
template <typename T>
void adam_step(const std::vector<Tensor<T>*>& params,
               const std::vector<Tensor<T>>& grads, AdamState<T>& state,
               double lr, double weight_decay) {
  if (params.size() != grads.size())
    throw ShapeError("adam_step: gradient count does not match parameters");
  state.ensure(params);
  ++state.t;
  const T bc1 = static_cast<T>(1.0 - std::pow(state.beta1,
                                              static_cast<double>(state.t)));
  const T bc2 = static_cast<T>(1.0 - std::pow(state.beta2,
                                              static_cast<double>(state.t)));
  const auto& K = simd::kernels<T>();
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& p = *params[i];
    if (p.shape() != grads[i].shape())
      throw ShapeError("adam_step: gradient shape " +
                       shape_str(grads[i].shape()) + " does not match " +
                       shape_str(p.shape()));
    if (weight_decay > 0.0)
      K.scale(p.data(), static_cast<T>(1.0 - lr * weight_decay), p.data(),
              p.size());
    K.adam_update(p.data(), grads[i].data(), state.m[i].data(),
                  state.v[i].data(), p.size(), static_cast<T>(lr),
                  static_cast<T>(state.beta1), static_cast<T>(state.beta2),
                  static_cast<T>(state.eps), bc1, bc2);
  }
}

}  // namespace gmoe
