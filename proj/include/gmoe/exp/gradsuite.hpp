#pragma once

#include <string>
#include <vector>

#include "gmoe/core/gradcheck.hpp"
#include "gmoe/losses/losses.hpp"
#include "gmoe/model/models.hpp"
#include "gmoe/rng.hpp"

// The canonical finite-difference suite: every differentiable operation plus
// a composed tiny-GMoE loss (L=2, d=8, N=3, k=2, cosine router, lambda=0.01).
// Shared by the `gradcheck` CLI command and the acceptance tests.

namespace gmoe {

struct GradSuiteEntry {
  std::string name;
  double max_rel_err = 0.0;
  bool pass = false;
};

inline std::vector<GradSuiteEntry> run_gradcheck_suite(double tol = 1e-4) {
  std::vector<GradSuiteEntry> entries;
  RngStream rng(2024);

  auto rand_t = [&](std::vector<std::size_t> shape, double scl = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = scl * rng.gaussian();
    return t;
  };
  auto run = [&](const std::string& name, auto build,
                 std::vector<Tensor<double>*> params, double h = 1e-6) {
    auto r = gradient_check<double>(build, params, h);
    entries.push_back({name, r.max_rel_err, r.max_rel_err < tol});
  };

  {
    Tensor<double> a = rand_t({3, 4}), b = rand_t({4, 2});
    run("matmul",
        [&](Tape<double>& t) { return sum(matmul(t.watch(a), t.watch(b))); },
        {&a, &b});
  }
  {
    Tensor<double> a = rand_t({3, 4}), b = rand_t({3, 4});
    run("add/mul/sub",
        [&](Tape<double>& t) {
          Tensor<double> x = t.watch(a), y = t.watch(b);
          return sum(mul(add(x, y), sub(x, y)));
        },
        {&a, &b});
  }
  {
    Tensor<double> x = rand_t({2, 6}), w = rand_t({2, 6});
    run("softmax",
        [&](Tape<double>& t) {
          return sum(mul(softmax(t.watch(x)), t.watch(w)));
        },
        {&x, &w});
  }
  {
    Tensor<double> x = rand_t({3, 5}), g = rand_t({5}), b = rand_t({5}),
                   w = rand_t({3, 5});
    run("layer_norm",
        [&](Tape<double>& t) {
          return sum(mul(layer_norm(t.watch(x), t.watch(g), t.watch(b)),
                         t.watch(w)));
        },
        {&x, &g, &b, &w});
  }
  {
    Tensor<double> x = rand_t({4, 4});
    for (std::size_t i = 0; i < x.size(); ++i)
      if (std::abs(x.at(i)) < 1e-3) x.at(i) += 0.02;
    run("relu+gelu+scale",
        [&](Tape<double>& t) {
          Tensor<double> xt = t.watch(x);
          return sum(add(relu(xt), scale(gelu(xt), 0.7)));
        },
        {&x});
  }
  {
    Tensor<double> x = rand_t({2, 5});
    run("l2_norm", [&](Tape<double>& t) { return l2_norm(t.watch(x)); }, {&x});
  }
  {
    Tensor<double> x = rand_t({4, 6}), v = rand_t({6}), w = rand_t({4});
    run("structure ops",
        [&](Tape<double>& t) {
          Tensor<double> y = row_scale(add_row(t.watch(x), t.watch(v)),
                                       t.watch(w));
          Tensor<double> l = slice_cols(y, 0, 3), r = slice_cols(y, 3, 6);
          Tensor<double> back = concat_cols<double>({r, l});
          Tensor<double> g = gather_rows(back, {1, 3, 1});
          Tensor<double> s = scatter_rows(g, {0, 2, 3}, 4);
          return mean(mean_pool_rows(transpose(s), 3));
        },
        {&x, &v, &w});
  }
  {
    Tensor<double> logits = rand_t({4, 5});
    std::vector<std::int32_t> ys = {0, 3, 2, 4};
    run("cross_entropy",
        [&](Tape<double>& t) { return cross_entropy(t.watch(logits), ys); },
        {&logits});
  }
  {
    Tensor<double> v = rand_t({6});
    for (std::size_t i = 0; i < v.size(); ++i) v.at(i) = std::abs(v.at(i)) + 0.2;
    run("squared_cv", [&](Tape<double>& t) { return squared_cv(t.watch(v)); },
        {&v});
  }
  {
    Tensor<double> u = rand_t({3, 4}), e = rand_t({4, 5}), w = rand_t({3, 5});
    run("cosine_logits",
        [&](Tape<double>& t) {
          return sum(mul(cosine_logits(t.watch(u), t.watch(e), 0.07),
                         t.watch(w)));
        },
        {&u, &e, &w});
  }
  {
    Tensor<double> raw = rand_t({4, 5}, 0.5), noise = rand_t({4, 5}, 0.3);
    Tensor<double> w = rand_t({4, 5});
    for (std::size_t i = 0; i < w.size(); ++i)
      w.at(i) += w.at(i) >= 0 ? 0.1 : -0.1;
    run("load_probability",
        [&](Tape<double>& t) {
          Tensor<double> r = t.watch(raw);
          return sum(mul(load_probability(r, add(r, noise), 2, 1.0),
                         t.watch(w)));
        },
        {&raw, &w});
  }
  {
    MultiHeadAttention<double> mha(8, 2);
    mha.init(rng);
    Tensor<double> x = rand_t({4, 8});
    std::vector<Tensor<double>*> ps{&x};
    for (auto& p : mha.parameters()) ps.push_back(p.tensor);
    run("mha_forward",
        [&](Tape<double>& t) { return l2_norm(mha.forward(&t, t.watch(x))); },
        ps);
  }
  {
    FeedForward<double> f(5, 10, Activation::gelu);
    f.init(rng);
    Tensor<double> x = rand_t({3, 5});
    std::vector<Tensor<double>*> ps{&x};
    for (auto& p : f.parameters()) ps.push_back(p.tensor);
    run("ffn_forward",
        [&](Tape<double>& t) { return l2_norm(f.forward(&t, t.watch(x))); },
        ps);
  }
  {
    PatchEmbed<double> pe(1, 4, 4, 2, 6);
    pe.init(rng);
    Tensor<double> img = rand_t({16});
    std::vector<Tensor<double>*> ps{&img};
    for (auto& p : pe.parameters()) ps.push_back(p.tensor);
    run("patch_embed",
        [&](Tape<double>& t) { return l2_norm(pe.forward(&t, t.watch(img))); },
        ps);
  }
  {
    RouterConfig cfg;
    cfg.kind = RouterKind::cosine;
    cfg.num_experts = 3;
    cfg.top_k = 2;
    cfg.noise_enabled = false;
    MoELayer<double> layer(4, 6, Activation::gelu, cfg);
    layer.init(rng);
    Tensor<double> x = rand_t({5, 4});
    std::vector<Tensor<double>*> ps{&x};
    for (auto& p : layer.parameters()) ps.push_back(p.tensor);
    run("moe_forward",
        [&](Tape<double>& t) {
          auto [out, gd] = layer.forward(&t, t.watch(x), false, nullptr);
          return l2_norm(out);
        },
        ps);
  }
  {
    // Composed tiny-GMoE loss: classification + (lambda/2)(imp + load).
    RngStream model_rng(9);
    ModelConfig cfg;
    cfg.kind = ModelKind::gmoe;
    cfg.num_classes = 3;
    cfg.input = {InputSpec::Kind::tokens, 0, 0, 0, 4, 5};
    cfg.depth = 2;
    cfg.width = 8;
    cfg.heads = 2;
    cfg.mlp_ratio = 2;
    cfg.placement = PlacementPolicy::every_two;
    cfg.moe.kind = RouterKind::cosine;
    cfg.moe.num_experts = 3;
    cfg.moe.top_k = 2;
    cfg.moe.noise_enabled = false;
    GmoeModel<double> model(cfg);
    model.init(model_rng);
    // A well-scaled random theta: near the cold-start init many true
    // gradients fall below what central differences can certify.
    for (auto& p : model.parameters()) {
      if (p.name.find("gamma") != std::string::npos) continue;
      init_trunc_normal(*p.tensor, model_rng, 0.2);
    }
    Tensor<double> batch({2, cfg.input.flat_size()});
    for (std::size_t i = 0; i < batch.size(); ++i)
      batch.at(i) = model_rng.gaussian();
    std::vector<std::int32_t> labels = {0, 2};
    std::vector<Tensor<double>*> ps;
    for (auto& p : model.parameters()) ps.push_back(p.tensor);
    run("gmoe_block_loss (L=2,d=8,N=3,k=2,cosine,lambda=0.01)",
        [&](Tape<double>& t) {
          std::vector<MoEBatch<double>> aux;
          Tensor<double> logits =
              model.forward(&t, batch, false, nullptr, &aux, nullptr);
          Tensor<double> cls = cross_entropy(logits, labels);
          Tensor<double> imp = importance_loss(aux[0].gate_weights);
          Tensor<double> load = load_loss(aux[0].load_prob);
          return total_loss(cls, imp, load, 0.01);
        },
        ps, 1e-5);
  }
  return entries;
}

}  // namespace gmoe
