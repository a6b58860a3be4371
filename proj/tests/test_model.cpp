// Model assembly: placement, parameter counts, collapse identity, MLP/FCN.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstring>
#include <map>
#include <vector>

#include "gmoe/core/gradcheck.hpp"
#include "gmoe/losses/losses.hpp"
#include "gmoe/model/models.hpp"
#include "gmoe/rng.hpp"

using namespace gmoe;

namespace {

Tensor<double> random_tensor(RngStream& rng, std::vector<std::size_t> shape,
                             double scl = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i) t.at(i) = scl * rng.gaussian();
  return t;
}

ModelConfig tiny_token_gmoe(std::size_t depth, std::size_t width,
                            std::size_t experts, std::size_t k,
                            RouterKind router) {
  ModelConfig cfg;
  cfg.kind = ModelKind::gmoe;
  cfg.num_classes = 3;
  cfg.input = {InputSpec::Kind::tokens, 0, 0, 0, 4, 5};
  cfg.depth = depth;
  cfg.width = width;
  cfg.heads = 2;
  cfg.mlp_ratio = 2;
  cfg.placement = PlacementPolicy::every_two;
  cfg.moe.kind = router;
  cfg.moe.num_experts = experts;
  cfg.moe.top_k = k;
  cfg.moe.noise_enabled = false;
  return cfg;
}

// Shape-sum oracle: closed-form parameter count from the configuration.
std::size_t param_count_oracle(const ModelConfig& c) {
  const std::size_t d = c.width;
  const std::size_t hidden = c.mlp_ratio * d;
  const std::size_t ffn = hidden * d + hidden + d * hidden + d;
  std::size_t total = 0;
  std::size_t tokens;
  if (c.input.kind == InputSpec::Kind::image) {
    const std::size_t cpp =
        c.input.channels * c.patch_size * c.patch_size;
    tokens = (c.input.height / c.patch_size) * (c.input.width / c.patch_size);
    total += 2 * cpp;            // patch-pixel layer norm
    total += d * cpp + d;        // projection
    total += tokens * d;         // positions
  } else {
    tokens = c.input.tokens;
    total += d * c.input.token_dim + d;
    total += tokens * d;
  }
  total += d;  // class token
  const auto moe_at = resolve_placement(c.placement, c.depth, c.placement_list);
  for (std::size_t b = 0; b < c.depth; ++b) {
    total += 2 * d;                // ln1
    total += 4 * d * d + 3 * d;    // q,k,v,o weights; no key bias
    total += 2 * d;                // ln2
    const bool is_moe =
        std::find(moe_at.begin(), moe_at.end(), b) != moe_at.end();
    if (!is_moe) {
      total += ffn;
    } else {
      if (c.moe.kind == RouterKind::linear) {
        total += c.moe.num_experts * d;
      } else {
        const std::size_t de = c.moe.embed_dim ? c.moe.embed_dim : d;
        total += de * d + de * c.moe.num_experts;
      }
      total += c.moe.num_experts * ffn;
    }
  }
  total += 2 * d;                        // final layer norm
  total += c.num_classes * d + c.num_classes;  // head
  return total;
}

}  // namespace

TEST_CASE("resolve_placement policies") {
  CHECK(resolve_placement(PlacementPolicy::last_two, 12) ==
        std::vector<std::size_t>{8, 10});
  CHECK(resolve_placement(PlacementPolicy::every_two, 12) ==
        std::vector<std::size_t>{0, 2, 4, 6, 8, 10});
  CHECK(resolve_placement(PlacementPolicy::none, 12).empty());
  CHECK(resolve_placement(PlacementPolicy::last_two, 13) ==
        std::vector<std::size_t>{8, 10});
  CHECK(resolve_placement(PlacementPolicy::last_two, 4) ==
        std::vector<std::size_t>{0, 2});
  CHECK(resolve_placement(PlacementPolicy::last_two, 2) ==
        std::vector<std::size_t>{0});
  CHECK_THROWS_AS(resolve_placement(PlacementPolicy::last_two, 1), ShapeError);
  CHECK_THROWS_AS(
      resolve_placement(PlacementPolicy::explicit_list, 4, {1, 7}), ShapeError);
}

TEST_CASE("parameter count matches the shape-sum oracle") {
  RngStream rng(1);
  {
    auto cfg = tiny_token_gmoe(4, 8, 3, 2, RouterKind::cosine);
    GmoeModel<double> model(cfg);
    CHECK(param_count(model) == param_count_oracle(cfg));
  }
  {
    auto cfg = tiny_token_gmoe(3, 6, 2, 1, RouterKind::linear);
    cfg.placement = PlacementPolicy::last_two;
    GmoeModel<double> model(cfg);
    CHECK(param_count(model) == param_count_oracle(cfg));
  }
  {
    // Image-input reference configuration at reduced resolution.
    ModelConfig cfg = ModelConfig::gmoe_s16(10);
    cfg.input.height = 32;
    cfg.input.width = 32;
    cfg.depth = 4;
    cfg.width = 24;
    cfg.heads = 6;
    GmoeModel<double> model(cfg);
    CHECK(param_count(model) == param_count_oracle(cfg));
  }
}

TEST_CASE("model_forward shapes, trace layers, eval determinism") {
  RngStream rng(2);
  auto cfg = tiny_token_gmoe(4, 8, 3, 1, RouterKind::cosine);
  GmoeModel<double> model(cfg);
  model.init(rng);
  CHECK(model.moe_blocks() == std::vector<std::size_t>{0, 2});

  Tensor<double> batch = random_tensor(rng, {6, cfg.input.flat_size()});
  auto [logits, trace] = model_forward(model, batch, false);
  CHECK(logits.rows() == 6);
  CHECK(logits.cols() == 3);
  CHECK(trace.layers.size() == 2);
  CHECK(trace.data_token_offset == 1);
  // every token (incl. class token) of every sample recorded per moe layer
  CHECK(trace.layers[0].top1.size() == 6 * (4 + 1));

  auto [logits2, trace2] = model_forward(model, batch, false);
  CHECK(std::memcmp(logits.data(), logits2.data(),
                    sizeof(double) * logits.size()) == 0);
}

TEST_CASE("N=1 collapse: GMoE forward equals the plain ViT bitwise") {
  RngStream rng(3);
  auto cfg = tiny_token_gmoe(4, 8, 1, 1, RouterKind::cosine);
  cfg.placement = PlacementPolicy::every_two;
  GmoeModel<double> moe_model(cfg);
  moe_model.init(rng);

  ModelConfig vit_cfg = cfg;
  vit_cfg.placement = PlacementPolicy::none;
  GmoeModel<double> vit(vit_cfg);

  // Same weights: copy by name, mapping expert 0 onto the plain FFN.
  std::map<std::string, Tensor<double>*> src;
  for (auto& p : moe_model.parameters()) src[p.name] = p.tensor;
  for (auto& p : vit.parameters()) {
    std::string key = p.name;
    if (!src.count(key)) {
      const auto pos = key.find(".ffn.");
      REQUIRE(pos != std::string::npos);
      key.replace(pos, 5, ".moe.expert0.");
    }
    REQUIRE(src.count(key) == 1);
    *p.tensor = src[key]->clone();
  }

  Tensor<double> batch = random_tensor(rng, {4, cfg.input.flat_size()});
  auto [a, ta] = model_forward(moe_model, batch, false);
  auto [b, tb] = model_forward(vit, batch, false);
  CHECK(std::memcmp(a.data(), b.data(), sizeof(double) * a.size()) == 0);
}

TEST_CASE("mlp/fcn reference configurations produce K=4 logits") {
  InputSpec in{InputSpec::Kind::tokens, 0, 0, 0, 10, 4};
  auto mlp = build_mlp<double>({40, 100, 100, 4}, in, Activation::relu);
  auto fcn = build_fcn<double>(20, in, 4, Activation::relu);
  RngStream rng(4);
  mlp->init(rng);
  fcn->init(rng);

  Tensor<double> batch = random_tensor(rng, {5, 40});
  Tensor<double> lm = mlp->forward(nullptr, batch, false, nullptr, nullptr,
                                   nullptr);
  Tensor<double> lf = fcn->forward(nullptr, batch, false, nullptr, nullptr,
                                   nullptr);
  CHECK(lm.rows() == 5);
  CHECK(lm.cols() == 4);
  CHECK(lf.rows() == 5);
  CHECK(lf.cols() == 4);
  CHECK_FALSE(mlp->has_moe());

  // 40 -> 100 -> 100 -> 4 chain with biases
  CHECK(param_count(*mlp) == 40 * 100 + 100 + 100 * 100 + 100 + 100 * 4 + 4);
  // conv1 (20 filters over 4 channels) + conv2 (4 outputs over 20)
  CHECK(param_count(*fcn) == 20 * 4 + 20 + 4 * 20 + 4);
}

TEST_CASE("FCN is invariant to patch order; MLP is not pixel-permutation-blind") {
  RngStream rng(5);
  InputSpec in{InputSpec::Kind::tokens, 0, 0, 0, 10, 4};
  auto fcn = build_fcn<double>(20, in, 4, Activation::relu);
  fcn->init(rng);
  auto mlp = build_mlp<double>({40, 100, 100, 4}, in, Activation::relu);
  mlp->init(rng);

  Tensor<double> x = random_tensor(rng, {3, 40});
  // Permute whole patches (rows of the 10x4 view).
  std::vector<std::size_t> perm = {7, 2, 9, 0, 4, 1, 8, 3, 6, 5};
  Tensor<double> xp({3, 40});
  for (std::size_t s = 0; s < 3; ++s)
    for (std::size_t p = 0; p < 10; ++p)
      for (std::size_t c = 0; c < 4; ++c)
        xp.at(s, p * 4 + c) = x.at(s, perm[p] * 4 + c);

  Tensor<double> f1 = fcn->forward(nullptr, x, false, nullptr, nullptr, nullptr);
  Tensor<double> f2 = fcn->forward(nullptr, xp, false, nullptr, nullptr, nullptr);
  for (std::size_t i = 0; i < f1.size(); ++i)
    CHECK(std::abs(f1.at(i) - f2.at(i)) <= 1e-9);

  // Permuting pixels inside a patch changes MLP logits.
  Tensor<double> xq = x.clone();
  for (std::size_t s = 0; s < 3; ++s) {
    std::swap(xq.at(s, 0), xq.at(s, 3));
    std::swap(xq.at(s, 1), xq.at(s, 2));
  }
  Tensor<double> m1 = mlp->forward(nullptr, x, false, nullptr, nullptr, nullptr);
  Tensor<double> m2 = mlp->forward(nullptr, xq, false, nullptr, nullptr, nullptr);
  double diff = 0;
  for (std::size_t i = 0; i < m1.size(); ++i)
    diff = std::max(diff, std::abs(m1.at(i) - m2.at(i)));
  CHECK(diff > 1e-6);
}

TEST_CASE("full tiny model gradient check (L=2, d=8)") {
  RngStream rng(9);
  auto cfg = tiny_token_gmoe(2, 8, 3, 2, RouterKind::cosine);
  cfg.placement = PlacementPolicy::every_two;
  GmoeModel<double> model(cfg);
  model.init(rng);
  // Check at a well-scaled random theta: near the 0.02 init many gradients
  // sit below what central differences can resolve against an O(1) loss.
  for (auto& p : model.parameters()) {
    if (p.name.find("gamma") != std::string::npos) continue;
    init_trunc_normal(*p.tensor, rng, 0.2);
  }
  Tensor<double> batch = random_tensor(rng, {2, cfg.input.flat_size()});
  std::vector<std::int32_t> labels = {0, 2};

  std::vector<Tensor<double>*> ps;
  for (auto& p : model.parameters()) ps.push_back(p.tensor);
  auto r = gradient_check<double>(
      [&](Tape<double>& tape) {
        std::vector<MoEBatch<double>> aux;
        Tensor<double> logits =
            model.forward(&tape, batch, false, nullptr, &aux, nullptr);
        Tensor<double> cls = cross_entropy(logits, labels);
        Tensor<double> imp = importance_loss(aux[0].gate_weights);
        Tensor<double> load = load_loss(aux[0].load_prob);
        for (std::size_t m = 1; m < aux.size(); ++m) {
          imp = add(imp, importance_loss(aux[m].gate_weights));
          load = add(load, load_loss(aux[m].load_prob));
        }
        imp = scale(imp, 1.0 / static_cast<double>(aux.size()));
        load = scale(load, 1.0 / static_cast<double>(aux.size()));
        return total_loss(cls, imp, load, 0.01);
      },
      ps, 1e-5);
  CHECK(r.max_rel_err < 1e-4);
}
