#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "gmoe/core/ops.hpp"
#include "gmoe/core/tensor.hpp"

// Classification loss plus the expert-balancing losses and their weighted
// combination: total = classification + (lambda/2) * (importance + load).

namespace gmoe {

struct LossBreakdown {
  double classification = 0.0;
  double importance = 0.0;
  double load = 0.0;
  double lambda = 0.0;
  double total = 0.0;
};

// Mean negative log softmax-probability of the true class.
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits,
                        std::span<const std::int32_t> labels) {
  detail::require_2d(logits, "cross_entropy");
  const std::size_t b = logits.rows(), k = logits.cols();
  if (labels.size() != b)
    throw ShapeError("cross_entropy: " + std::to_string(labels.size()) +
                     " labels for " + std::to_string(b) + " rows");
  for (auto y : labels)
    if (y < 0 || static_cast<std::size_t>(y) >= k)
      throw ShapeError("cross_entropy: label " + std::to_string(y) +
                       " outside [0," + std::to_string(k) + ")");

  // Stable log-sum-exp; per-row softmax saved for the backward rule.
  Tensor<T> probs({b, k});
  double acc = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const T* row = logits.data() + i * k;
    const T mx = simd::kernels<T>().max(row, k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double e = std::exp(static_cast<double>(row[j] - mx));
      probs.at(i, j) = static_cast<T>(e);
      z += e;
    }
    for (std::size_t j = 0; j < k; ++j)
      probs.at(i, j) = static_cast<T>(static_cast<double>(probs.at(i, j)) / z);
    acc += std::log(z) + static_cast<double>(mx) -
           static_cast<double>(row[static_cast<std::size_t>(labels[i])]);
  }
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(acc / static_cast<double>(b)));
  detail::check_finite(out, "cross_entropy");

  if (Tape<T>* tape = detail::common_tape<T>({&logits})) {
    const int px = tape->node_of(logits);
    std::vector<std::int32_t> ys(labels.begin(), labels.end());
    tape->mark(out, tape->record({px}, [px, probs, ys](const Tensor<T>& g,
                                                       auto& sink) {
      const std::size_t b = probs.rows(), k = probs.cols();
      const T gb = g.item() / static_cast<T>(b);
      Tensor<T> dx({b, k});
      for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = 0; j < k; ++j) dx.at(i, j) = probs.at(i, j) * gb;
        dx.at(i, static_cast<std::size_t>(ys[i])) -= gb;
      }
      sink.add(px, dx);
    }));
  }
  return out;
}

// (population std / mean)^2. Errors out on a zero mean: all-zero usage is
// pathological and must surface rather than silently divide.
template <typename T>
Tensor<T> squared_cv(const Tensor<T>& values) {
  if (values.size() == 0) throw ShapeError("squared_cv: empty input");
  const std::size_t n = values.size();
  const double invn = 1.0 / static_cast<double>(n);
  double m = 0.0, s2 = 0.0;
  for (std::size_t i = 0; i < n; ++i) m += static_cast<double>(values.at(i));
  m *= invn;
  if (m == 0.0) throw NumericError("squared_cv: mean is zero");
  for (std::size_t i = 0; i < n; ++i)
    s2 += static_cast<double>(values.at(i)) * static_cast<double>(values.at(i));
  s2 *= invn;  // E[v^2]
  const double cv2 = s2 / (m * m) - 1.0;
  Tensor<T> out = Tensor<T>::scalar(static_cast<T>(cv2));
  detail::check_finite(out, "squared_cv");

  if (Tape<T>* tape = detail::common_tape<T>({&values})) {
    const int pv = tape->node_of(values);
    tape->mark(out, tape->record({pv}, [pv, values, m, s2, invn](
                                           const Tensor<T>& g, auto& sink) {
      // d cv2 / dv_i = (2/(n m^2)) * (v_i - E[v^2]/m)
      Tensor<T> dv(values.shape());
      const double go = static_cast<double>(g.item());
      const double c = 2.0 * invn / (m * m);
      for (std::size_t i = 0; i < dv.size(); ++i)
        dv.at(i) = static_cast<T>(
            go * c * (static_cast<double>(values.at(i)) - s2 / m));
      sink.add(pv, dv);
    }));
  }
  return out;
}

// Importance of expert e: sum of its gate weights over the batch of tokens.
template <typename T>
Tensor<T> importance_loss(const Tensor<T>& gate_weights) {
  detail::require_2d(gate_weights, "importance_loss");
  return squared_cv(col_sum(gate_weights));
}

// Load of expert e: sum of its selection probabilities under noise resampling.
template <typename T>
Tensor<T> load_loss(const Tensor<T>& load_prob) {
  detail::require_2d(load_prob, "load_loss");
  return squared_cv(col_sum(load_prob));
}

template <typename T>
Tensor<T> total_loss(const Tensor<T>& classification,
                     const Tensor<T>& importance, const Tensor<T>& load,
                     T lambda) {
  if (lambda < T(0)) throw ShapeError("total_loss: lambda must be >= 0");
  return add(classification,
             scale(add(importance, load), lambda / T(2)));
}

inline double total_loss_value(double cls, double imp, double load,
                               double lambda) {
  return cls + 0.5 * lambda * (imp + load);
}

}  // namespace gmoe
