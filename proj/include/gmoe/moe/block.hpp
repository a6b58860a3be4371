#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "gmoe/moe/router.hpp"
#include "gmoe/nn/layers.hpp"

namespace gmoe {

// FFN replaced by a mixture of expert FFNs with sparse dispatch: experts that
// no token selected are never evaluated.
template <typename T>
struct MoELayer {
  Router<T> router;
  std::vector<FeedForward<T>> experts;

  MoELayer() = default;

  MoELayer(std::size_t d, std::size_t hidden, Activation act,
           const RouterConfig& cfg)
      : router(cfg, d) {
    experts.reserve(cfg.num_experts);
    for (std::size_t e = 0; e < cfg.num_experts; ++e)
      experts.emplace_back(d, hidden, act);
  }

  void init(RngStream& rng) {
    router.init(rng);
    for (auto& e : experts) e.init(rng);
  }

  std::pair<Tensor<T>, GateDecision<T>> forward(Tape<T>* tape,
                                                const Tensor<T>& x,
                                                bool train_mode,
                                                RngStream* noise_rng) const {
    GateDecision<T> gd = router.route(tape, x, train_mode, noise_rng);
    const std::size_t tokens = x.rows();
    const std::size_t n = router.cfg.num_experts;

    std::vector<std::vector<int>> per_expert(n);
    for (std::size_t t = 0; t < tokens; ++t)
      for (int e : gd.selected[t]) per_expert[static_cast<std::size_t>(e)].push_back(
          static_cast<int>(t));

    Tensor<T> out;
    for (std::size_t e = 0; e < n; ++e) {
      const auto& idx = per_expert[e];
      if (idx.empty()) continue;
      Tensor<T> xe = gather_rows(x, idx);
      Tensor<T> ye = experts[e].forward(tape, xe);
      std::vector<int> cols(idx.size(), static_cast<int>(e));
      Tensor<T> we = gather_elems(gd.gate_weights, idx, cols);
      Tensor<T> contrib = scatter_rows(row_scale(ye, we), idx, tokens);
      out = out.empty() ? contrib : add(out, contrib);
    }
    if (out.empty()) out = Tensor<T>({tokens, x.cols()});
    return {std::move(out), std::move(gd)};
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    append_params(out, "router", router.parameters());
    for (std::size_t e = 0; e < experts.size(); ++e)
      append_params(out, "expert" + std::to_string(e),
                    experts[e].parameters());
    return out;
  }
};

// One transformer block:
//   x     = mha(ln1(x_in)) + x_in
//   x_out = ffn_or_moe(ln2(x)) + x
template <typename T>
struct TransformerBlock {
  LayerNormLayer<T> ln1, ln2;
  MultiHeadAttention<T> mha;
  bool is_moe = false;
  FeedForward<T> ffn;
  MoELayer<T> moe;

  TransformerBlock() = default;

  TransformerBlock(std::size_t d, std::size_t heads, std::size_t hidden,
                   Activation act)
      : ln1(d), ln2(d), mha(d, heads), ffn(d, hidden, act) {}

  TransformerBlock(std::size_t d, std::size_t heads, std::size_t hidden,
                   Activation act, const RouterConfig& cfg)
      : ln1(d), ln2(d), mha(d, heads), is_moe(true), moe(d, hidden, act, cfg) {}

  void init(RngStream& rng) {
    mha.init(rng);
    if (is_moe)
      moe.init(rng);
    else
      ffn.init(rng);
  }

  std::pair<Tensor<T>, std::optional<GateDecision<T>>> forward(
      Tape<T>* tape, const Tensor<T>& x_in, bool train_mode,
      RngStream* noise_rng) const {
    Tensor<T> x = add(mha.forward(tape, ln1.forward(tape, x_in)), x_in);
    Tensor<T> h = ln2.forward(tape, x);
    if (!is_moe) return {add(ffn.forward(tape, h), x), std::nullopt};
    auto [y, gd] = moe.forward(tape, h, train_mode, noise_rng);
    return {add(y, x), std::move(gd)};
  }

  ParamList<T> parameters() {
    ParamList<T> out;
    append_params(out, "ln1", ln1.parameters());
    append_params(out, "mha", mha.parameters());
    append_params(out, "ln2", ln2.parameters());
    if (is_moe)
      append_params(out, "moe", moe.parameters());
    else
      append_params(out, "ffn", ffn.parameters());
    return out;
  }
};

}  // namespace gmoe
