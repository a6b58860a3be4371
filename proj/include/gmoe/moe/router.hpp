#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "gmoe/core/ops.hpp"
#include "gmoe/core/tensor.hpp"
#include "gmoe/nn/layers.hpp"
#include "gmoe/rng.hpp"

// Token routing: linear and cosine gates, noisy top-k selection, and the
// closed-form load probability used by the balancing loss.

namespace gmoe {

enum class RouterKind { linear, cosine };

inline const char* router_kind_name(RouterKind k) {
  return k == RouterKind::linear ? "linear" : "cosine";
}

struct RouterConfig {
  RouterKind kind = RouterKind::cosine;
  std::size_t top_k = 1;        // k
  std::size_t num_experts = 1;  // N
  double temperature = 0.07;    // tau, cosine only
  std::size_t embed_dim = 0;    // d_e, cosine only; 0 = model width
  bool noise_enabled = true;
  double noise_std = 0.0;  // 0 = default 1/N

  double resolved_noise_std() const {
    return noise_std > 0.0 ? noise_std
                           : 1.0 / static_cast<double>(num_experts);
  }

  std::size_t resolved_embed_dim(std::size_t d) const {
    return embed_dim > 0 ? embed_dim : d;
  }

  void validate() const {
    if (num_experts < 1) throw ShapeError("router: num_experts must be >= 1");
    if (top_k < 1 || top_k > num_experts)
      throw ShapeError("router: top_k " + std::to_string(top_k) +
                       " out of range for " + std::to_string(num_experts) +
                       " experts");
    if (!(temperature > 0.0))
      throw ShapeError("router: temperature must be positive");
    if (noise_std < 0.0) throw ShapeError("router: noise std must be >= 0");
  }
};

// Per-token routing result. Tensors stay on the caller's tape during
// training so gradients flow through the kept softmax values.
template <typename T>
struct GateDecision {
  Tensor<T> raw_logits;    // [t, n]
  Tensor<T> noisy_logits;  // [t, n]
  Tensor<T> gate_weights;  // [t, n], exactly k nonzeros per row
  std::vector<std::vector<int>> selected;  // ascending expert ids per token
  Tensor<T> load_prob;  // [t, n]
};

template <typename T>
struct TopKMask {
  Tensor<T> mask;  // 0/1
  Tensor<T> kept;  // values with non-top-k zeroed
  std::vector<std::vector<int>> selected;
};

// Keeps the k largest entries per row (ties broken toward the lowest index),
// zeroes the rest. No renormalization of the kept values.
template <typename T>
TopKMask<T> top_k_mask(const Tensor<T>& scores, std::size_t k) {
  detail::require_2d(scores, "top_k_mask");
  const std::size_t t = scores.rows(), n = scores.cols();
  if (k < 1 || k > n)
    throw ShapeError("top_k_mask: k=" + std::to_string(k) +
                     " out of range for " + std::to_string(n) + " columns");
  TopKMask<T> out;
  out.mask = Tensor<T>({t, n});
  out.kept = Tensor<T>({t, n});
  out.selected.resize(t);
  std::vector<int> order(n);
  for (std::size_t i = 0; i < t; ++i) {
    const T* row = scores.data() + i * n;
    std::iota(order.begin(), order.end(), 0);
    std::partial_sort(order.begin(), order.begin() + static_cast<long>(k),
                      order.end(), [row](int a, int b) {
                        if (row[a] != row[b]) return row[a] > row[b];
                        return a < b;
                      });
    auto& sel = out.selected[i];
    sel.assign(order.begin(), order.begin() + static_cast<long>(k));
    std::sort(sel.begin(), sel.end());
    for (int e : sel) {
      out.mask.at(i, static_cast<std::size_t>(e)) = T(1);
      out.kept.at(i, static_cast<std::size_t>(e)) =
          row[static_cast<std::size_t>(e)];
    }
  }
  return out;
}

// logits + iid Gaussian(0, std^2) drawn from the given stream.
template <typename T>
Tensor<T> add_routing_noise(const Tensor<T>& logits, T std_dev,
                            RngStream& rng) {
  if (std_dev < T(0))
    throw ShapeError("add_routing_noise: negative standard deviation");
  Tensor<T> noise(logits.shape());
  for (std::size_t i = 0; i < noise.size(); ++i)
    noise.at(i) = static_cast<T>(rng.gaussian()) * std_dev;
  return add(logits, noise);
}

namespace detail {

inline double normal_cdf(double z) { return 0.5 * std::erfc(-z * M_SQRT1_2); }
inline double normal_pdf(double z) {
  return 0.3989422804014326779 * std::exp(-0.5 * z * z);
}

// k-th largest of row values excluding column `skip`, ties toward the lower
// index. Returns {value, column index}.
template <typename T>
std::pair<T, int> kth_largest_excluding(const T* row, std::size_t n,
                                        std::size_t skip, std::size_t k) {
  thread_local std::vector<int> order;
  order.clear();
  for (std::size_t j = 0; j < n; ++j)
    if (j != skip) order.push_back(static_cast<int>(j));
  std::nth_element(order.begin(), order.begin() + static_cast<long>(k - 1),
                   order.end(), [row](int a, int b) {
                     if (row[a] != row[b]) return row[a] > row[b];
                     return a < b;
                   });
  const int j = order[k - 1];
  return {row[static_cast<std::size_t>(j)], j};
}

}  // namespace detail

// p_e = P(expert e stays in the top-k when only its own noise is resampled):
// 1 - Phi((eta_k - raw_e)/std), with eta_k the k-th largest noisy logit among
// the other experts. std == 0 degenerates to the hard indicator.
template <typename T>
Tensor<T> load_probability(const Tensor<T>& raw, const Tensor<T>& noisy,
                           std::size_t k, T std_dev) {
  detail::require_same_shape(raw, noisy, "load_probability");
  detail::require_2d(raw, "load_probability");
  if (std_dev < T(0))
    throw ShapeError("load_probability: negative standard deviation");
  const std::size_t t = raw.rows(), n = raw.cols();
  if (k < 1) throw ShapeError("load_probability: k must be >= 1");

  Tensor<T> out({t, n});
  // Threshold provider column and pdf weight per entry, kept for backward.
  std::vector<int> thr_col(t * n, -1);
  Tensor<T> pdf_over_std({t, n});
  const bool all_selected = k >= n;

  for (std::size_t i = 0; i < t; ++i) {
    const T* raw_row = raw.data() + i * n;
    const T* noisy_row = noisy.data() + i * n;
    for (std::size_t e = 0; e < n; ++e) {
      if (all_selected) {
        out.at(i, e) = T(1);
        continue;
      }
      const auto [eta, j] =
          detail::kth_largest_excluding(noisy_row, n, e, k);
      if (std_dev == T(0)) {
        const T le = raw_row[e];
        out.at(i, e) = le > eta ? T(1) : (le < eta ? T(0) : T(0.5));
        continue;
      }
      const double z =
          (static_cast<double>(raw_row[e]) - static_cast<double>(eta)) /
          static_cast<double>(std_dev);
      out.at(i, e) = static_cast<T>(detail::normal_cdf(z));
      thr_col[i * n + e] = j;
      pdf_over_std.at(i, e) = static_cast<T>(detail::normal_pdf(z) /
                                             static_cast<double>(std_dev));
    }
  }
  detail::check_finite(out, "load_probability");

  Tape<T>* tape = detail::common_tape<T>({&raw, &noisy});
  if (tape && std_dev > T(0) && !all_selected) {
    const int pr = tape->node_of(raw), pn = tape->node_of(noisy);
    tape->mark(out, tape->record(
                        {pr, pn},
                        [pr, pn, thr_col, pdf_over_std, t, n](
                            const Tensor<T>& g, auto& sink) {
                          Tensor<T> draw({t, n});
                          Tensor<T> dnoisy({t, n});
                          for (std::size_t i = 0; i < t; ++i)
                            for (std::size_t e = 0; e < n; ++e) {
                              const T w = g.at(i, e) * pdf_over_std.at(i, e);
                              draw.at(i, e) += w;
                              const int j = thr_col[i * n + e];
                              if (j >= 0)
                                dnoisy.at(i, static_cast<std::size_t>(j)) -= w;
                            }
                          if (pr >= 0) sink.add(pr, draw);
                          if (pn >= 0) sink.add(pn, dnoisy);
                        }));
  }
  return out;
}

template <typename T>
Tensor<T> load_probability(const Tensor<T>& raw, std::size_t k, T std_dev) {
  return load_probability(raw, raw, k, std_dev);
}

// Cosine-similarity logits: <E_e, u_t> / (tau * ||u_t|| * ||E_e||), with the
// cosine clamped to [-1, 1] and token norms guarded below by 1e-12.
template <typename T>
Tensor<T> cosine_logits(const Tensor<T>& u, const Tensor<T>& embed, T tau,
                        std::atomic<long>* clamp_events = nullptr) {
  detail::require_2d(u, "cosine_logits");
  detail::require_2d(embed, "cosine_logits");
  if (u.cols() != embed.rows())
    throw ShapeError("cosine_logits: projection width " +
                     shape_str(u.shape()) + " does not match embedding " +
                     shape_str(embed.shape()));
  if (!(tau > T(0))) throw ShapeError("cosine_logits: tau must be positive");
  const std::size_t t = u.rows(), de = u.cols(), n = embed.cols();
  constexpr double kNormFloor = 1e-12;

  Tensor<T> num = detail::mm_nn(u, embed);
  Tensor<T> unorm({t});
  std::vector<bool> uclamped(t, false);
  for (std::size_t i = 0; i < t; ++i) {
    const double nn = std::sqrt(static_cast<double>(
        simd::kernels<T>().dot(u.data() + i * de, u.data() + i * de, de)));
    if (nn < kNormFloor) {
      uclamped[i] = true;
      if (clamp_events) clamp_events->fetch_add(1, std::memory_order_relaxed);
    }
    unorm.at(i) = static_cast<T>(std::max(nn, kNormFloor));
  }
  Tensor<T> enorm({n});
  std::vector<bool> eclamped(n, false);
  for (std::size_t e = 0; e < n; ++e) {
    double acc = 0;
    for (std::size_t r = 0; r < de; ++r) {
      const double v = static_cast<double>(embed.at(r, e));
      acc += v * v;
    }
    const double nn = std::sqrt(acc);
    if (nn < kNormFloor) eclamped[e] = true;
    enorm.at(e) = static_cast<T>(std::max(nn, kNormFloor));
  }

  Tensor<T> cosv({t, n});  // clamped cosine, saved for backward
  Tensor<T> out({t, n});
  const T inv_tau = T(1) / tau;
  for (std::size_t i = 0; i < t; ++i)
    for (std::size_t e = 0; e < n; ++e) {
      T c = num.at(i, e) / (unorm.at(i) * enorm.at(e));
      c = std::clamp(c, T(-1), T(1));
      cosv.at(i, e) = c;
      out.at(i, e) = c * inv_tau;
    }
  detail::check_finite(out, "cosine_logits");

  if (Tape<T>* tape = detail::common_tape<T>({&u, &embed})) {
    const int pu = tape->node_of(u), pe = tape->node_of(embed);
    tape->mark(
        out,
        tape->record(
            {pu, pe},
            [u, embed, num, unorm, enorm, cosv, uclamped, eclamped, pu, pe,
             inv_tau](const Tensor<T>& g, auto& sink) {
              const std::size_t t = u.rows(), de = u.cols(), n = embed.cols();
              // gc = dL/d(cosine), zero where the clamp saturated.
              Tensor<T> gc({t, n});
              for (std::size_t i = 0; i < t; ++i)
                for (std::size_t e = 0; e < n; ++e) {
                  const T c = cosv.at(i, e);
                  gc.at(i, e) =
                      (c > T(-1) && c < T(1)) ? g.at(i, e) * inv_tau : T(0);
                }
              if (pu >= 0) {
                Tensor<T> du({t, de});
                for (std::size_t i = 0; i < t; ++i) {
                  const T a = unorm.at(i);
                  T dot_gc_cos = T(0);
                  for (std::size_t e = 0; e < n; ++e) {
                    const T w = gc.at(i, e) / (a * enorm.at(e));
                    // dnum term: w * E_col_e
                    for (std::size_t r = 0; r < de; ++r)
                      du.at(i, r) += w * embed.at(r, e);
                    dot_gc_cos += gc.at(i, e) * cosv.at(i, e);
                  }
                  if (!uclamped[i])
                    simd::kernels<T>().axpy(-dot_gc_cos / (a * a),
                                            u.data() + i * de,
                                            du.data() + i * de, de);
                }
                sink.add(pu, du);
              }
              if (pe >= 0) {
                Tensor<T> dE({de, n});
                for (std::size_t e = 0; e < n; ++e) {
                  const T b = enorm.at(e);
                  T dot_gc_cos = T(0);
                  for (std::size_t i = 0; i < t; ++i) {
                    const T w = gc.at(i, e) / (unorm.at(i) * b);
                    for (std::size_t r = 0; r < de; ++r)
                      dE.at(r, e) += w * u.at(i, r);
                    dot_gc_cos += gc.at(i, e) * cosv.at(i, e);
                  }
                  if (!eclamped[e]) {
                    const T f = -dot_gc_cos / (b * b);
                    for (std::size_t r = 0; r < de; ++r)
                      dE.at(r, e) += f * embed.at(r, e);
                  }
                }
                sink.add(pe, dE);
              }
            }));
  }
  return out;
}

// The gate. Linear: logits = proj @ x. Cosine: project, normalize, match
// against learned expert embeddings with temperature tau.
template <typename T>
struct Router {
  RouterConfig cfg;
  Tensor<T> proj;   // linear: [n, d]; cosine: [d_e, d]
  Tensor<T> embed;  // cosine only: [d_e, n]
  mutable std::atomic<long> clamp_events{0};

  Router() = default;

  Router(RouterConfig config, std::size_t d) : cfg(config) {
    cfg.validate();
    if (cfg.kind == RouterKind::linear) {
      proj = Tensor<T>({cfg.num_experts, d});
    } else {
      const std::size_t de = cfg.resolved_embed_dim(d);
      proj = Tensor<T>({de, d});
      embed = Tensor<T>({de, cfg.num_experts});
    }
  }

  Router(const Router& o) : cfg(o.cfg), proj(o.proj), embed(o.embed) {}
  Router& operator=(const Router& o) {
    cfg = o.cfg;
    proj = o.proj;
    embed = o.embed;
    return *this;
  }

  // proj ~ truncated normal; embedding columns drawn Gaussian then normalized
  // onto the unit sphere so experts start evenly matched.
  void init(RngStream& rng) {
    init_trunc_normal(proj, rng);
    if (cfg.kind == RouterKind::cosine) {
      const std::size_t de = embed.rows(), n = embed.cols();
      for (std::size_t e = 0; e < n; ++e) {
        double norm = 0;
        std::vector<double> col(de);
        do {
          norm = 0;
          for (std::size_t r = 0; r < de; ++r) {
            col[r] = rng.gaussian();
            norm += col[r] * col[r];
          }
          norm = std::sqrt(norm);
        } while (norm < 1e-6);
        for (std::size_t r = 0; r < de; ++r)
          embed.at(r, e) = static_cast<T>(col[r] / norm);
      }
    }
  }

  Tensor<T> logits(Tape<T>* tape, const Tensor<T>& x) const {
    Tensor<T> w = use_param(tape, proj);
    Tensor<T> u = matmul(x, transpose(w));
    if (cfg.kind == RouterKind::linear) return u;
    return cosine_logits(u, use_param(tape, embed),
                         static_cast<T>(cfg.temperature), &clamp_events);
  }

  GateDecision<T> route(Tape<T>* tape, const Tensor<T>& x, bool train_mode,
                        RngStream* noise_rng) const {
    GateDecision<T> gd;
    gd.raw_logits = logits(tape, x);
    const T std_dev = static_cast<T>(cfg.resolved_noise_std());
    if (train_mode && cfg.noise_enabled && noise_rng)
      gd.noisy_logits = add_routing_noise(gd.raw_logits, std_dev, *noise_rng);
    else
      gd.noisy_logits = gd.raw_logits;

    TopKMask<T> tk = top_k_mask(gd.noisy_logits.detached(), cfg.top_k);
    gd.selected = std::move(tk.selected);
    gd.gate_weights = mask_mul(softmax(gd.noisy_logits, 1), tk.mask);
    gd.load_prob =
        load_probability(gd.raw_logits, gd.noisy_logits, cfg.top_k, std_dev);
    return gd;
  }

  ParamList<T> parameters() {
    ParamList<T> out{{"proj", &proj}};
    if (cfg.kind == RouterKind::cosine) out.push_back({"embed", &embed});
    return out;
  }
};

template <typename T>
GateDecision<T> linear_route(const Tensor<T>& x, const Router<T>& router,
                             bool train_mode, RngStream* rng = nullptr) {
  if (router.cfg.kind != RouterKind::linear)
    throw ShapeError("linear_route: router is not linear");
  return router.route(nullptr, x, train_mode, rng);
}

template <typename T>
GateDecision<T> cosine_route(const Tensor<T>& x, const Router<T>& router,
                             bool train_mode, RngStream* rng = nullptr) {
  if (router.cfg.kind != RouterKind::cosine)
    throw ShapeError("cosine_route: router is not cosine");
  return router.route(nullptr, x, train_mode, rng);
}

}  // namespace gmoe
