#pragma once

#include <cstdint>
#include <memory>
#include <ostream>

#include "gmoe/data/synthetic.hpp"
#include "gmoe/model/models.hpp"
#include "gmoe/train/trainer.hpp"

// Desk-scale reproductions: the MLP/FCN architecture-alignment runs on the
// synthetic distribution-shift data, and the token-cluster balancing toy.
// Both the CLI and the acceptance suite run these exact recipes.

namespace gmoe {

inline SyntheticSpec alignment_spec(bool noisy, std::uint64_t seed) {
  SyntheticSpec spec;
  spec.patches = 10;
  spec.classes = 4;
  spec.n_train = 100000;
  spec.n_eval = 2000;
  spec.p1 = noisy ? 0.9 : 1.0;
  spec.p2 = noisy ? 0.9 : 1.0;
  spec.seed = seed;
  return spec;
}

inline TrainConfig alignment_train_config(ModelKind kind, bool noisy,
                                          std::uint64_t seed) {
  TrainConfig cfg;
  cfg.lr = 1e-3;
  cfg.weight_decay = 0.0;
  cfg.batch_size = 128;
  cfg.iterations = kind == ModelKind::fcn ? 6000 : 4000;
  cfg.lambda = 0.0;
  cfg.eval_every = 500;
  cfg.seed = seed;
  (void)noisy;
  return cfg;
}

inline std::unique_ptr<ModelBase<double>> alignment_model(
    ModelKind kind, const SyntheticDataset& data) {
  InputSpec in = data.input_spec();
  if (kind == ModelKind::mlp)
    return build_mlp<double>({in.flat_size(), 100, 100, data.num_classes()}, in,
                             Activation::relu);
  if (kind == ModelKind::fcn)
    return build_fcn<double>(20, in, data.num_classes(), Activation::relu);
  throw ShapeError("alignment experiment expects mlp or fcn");
}

struct AlignmentOutcome {
  std::size_t selected_iteration = 0;
  double val = 0.0;
  double test1 = 0.0;  // patch feature replaced; pixel correlation invariant
  double test2 = 0.0;  // pixel feature replaced; patch correlation invariant
  Metrics metrics;
};

inline AlignmentOutcome run_alignment_experiment(ModelKind kind, bool noisy,
                                                 std::uint64_t seed,
                                                 const SyntheticDataset* data,
                                                 std::ostream* log = nullptr) {
  SyntheticDataset generated;
  if (!data) {
    generated = generate(alignment_spec(noisy, seed));
    data = &generated;
  }
  auto model = alignment_model(kind, *data);
  TrainConfig cfg = alignment_train_config(kind, noisy, seed);
  TrainResult<double> result = train(*model, *data, cfg);

  const auto& chosen = result.checkpoints[result.selected];
  AlignmentOutcome out;
  out.selected_iteration = chosen.iteration;
  out.val = chosen.evals.at("val").accuracy;
  out.test1 = chosen.evals.at("test1").accuracy;
  out.test2 = chosen.evals.at("test2").accuracy;
  out.metrics = std::move(result.metrics);
  if (log)
    *log << model_kind_name(kind) << (noisy ? " noisy" : " noiseless")
         << " seed=" << seed << ": selected it=" << out.selected_iteration
         << " val=" << out.val << " test1=" << out.test1
         << " test2=" << out.test2 << "\n";
  return out;
}

// ------------------------------------------------------- balancing toy ---

inline TokenClusterSpec cluster_toy_spec(std::uint64_t seed) {
  TokenClusterSpec spec;
  spec.clusters = 4;
  spec.tokens = 8;
  spec.dim = 16;
  spec.n_train = 4096;
  spec.n_eval = 1024;
  spec.seed = seed;
  return spec;
}

inline ModelConfig cluster_toy_model(const SyntheticDataset& data) {
  ModelConfig cfg;
  cfg.kind = ModelKind::gmoe;
  cfg.num_classes = data.num_classes();
  cfg.input = data.input_spec();
  cfg.depth = 2;
  cfg.width = 32;
  cfg.heads = 4;
  cfg.mlp_ratio = 2;
  cfg.placement = PlacementPolicy::explicit_list;
  cfg.placement_list = {0};
  cfg.moe.kind = RouterKind::cosine;
  cfg.moe.num_experts = 4;
  cfg.moe.top_k = 1;
  cfg.moe.noise_enabled = true;
  return cfg;
}

inline TrainConfig cluster_toy_train_config(double lambda, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.weight_decay = 0.0;
  cfg.batch_size = 64;
  cfg.iterations = 600;
  cfg.lambda = lambda;
  cfg.eval_every = 0;  // final checkpoint only
  cfg.seed = seed;
  return cfg;
}

}  // namespace gmoe
