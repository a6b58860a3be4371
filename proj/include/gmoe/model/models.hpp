#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "gmoe/model/config.hpp"
#include "gmoe/moe/block.hpp"
#include "gmoe/nn/layers.hpp"

namespace gmoe {

// Top-1/top-k routing decisions recorded during a forward pass, for telemetry.
struct RoutingTrace {
  struct LayerTrace {
    std::size_t block_index = 0;
    std::vector<std::int32_t> sample;  // batch row of each recorded token
    std::vector<std::int32_t> token;   // sequence position (0 = class token)
    std::vector<std::int32_t> top1;
    std::vector<std::vector<int>> topk;
    std::vector<std::vector<double>> topk_weights;
  };
  std::vector<LayerTrace> layers;
  // Sequence position of the first data token (1 when a class token leads).
  std::size_t data_token_offset = 0;
};

// Per-MoE-layer gating tensors concatenated over the batch, feeding the
// balancing losses.
template <typename T>
struct MoEBatch {
  std::size_t block_index = 0;
  Tensor<T> gate_weights;  // [batch*tokens, n]
  Tensor<T> load_prob;     // [batch*tokens, n]
};

template <typename T>
class ModelBase {
 public:
  virtual ~ModelBase() = default;
  virtual const ModelConfig& config() const = 0;
  virtual ParamList<T> parameters() = 0;
  virtual bool has_moe() const = 0;
  virtual void init(RngStream& rng) = 0;
  // inputs: one sample per row, flattened per config().input.
  virtual Tensor<T> forward(Tape<T>* tape, const Tensor<T>& inputs,
                            bool train_mode, RngStream* noise_rng,
                            std::vector<MoEBatch<T>>* aux,
                            RoutingTrace* trace) = 0;
};

template <typename T>
std::size_t param_count(ModelBase<T>& model) {
  std::size_t n = 0;
  for (const auto& p : model.parameters()) n += p.tensor->size();
  return n;
}

// ------------------------------------------------------------------- GMoE ---

// Vision/token transformer with MoE layers at the configured placement.
// placement none gives the plain ViT.
template <typename T>
class GmoeModel : public ModelBase<T> {
 public:
  explicit GmoeModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.kind != ModelKind::gmoe)
      throw ShapeError("GmoeModel: config kind is not gmoe");
    if (cfg_.width == 0 || cfg_.depth == 0)
      throw ShapeError("GmoeModel: zero depth or width");
    if (cfg_.heads == 0 || cfg_.width % cfg_.heads != 0)
      throw ShapeError("GmoeModel: width " + std::to_string(cfg_.width) +
                       " not divisible by heads " + std::to_string(cfg_.heads));

    if (cfg_.input.kind == InputSpec::Kind::image) {
      patch_embed_ = PatchEmbed<T>(cfg_.input.channels, cfg_.input.height,
                                   cfg_.input.width, cfg_.patch_size,
                                   cfg_.width);
      seq_tokens_ = patch_embed_.tokens();
    } else {
      if (cfg_.input.tokens == 0 || cfg_.input.token_dim == 0)
        throw ShapeError("GmoeModel: token input needs tokens and token_dim");
      token_embed_ =
          TokenEmbed<T>(cfg_.input.tokens, cfg_.input.token_dim, cfg_.width);
      seq_tokens_ = cfg_.input.tokens;
    }
    cls_ = Tensor<T>({1, cfg_.width});

    moe_blocks_ = resolve_placement(cfg_.placement, cfg_.depth,
                                    cfg_.placement_list);
    const std::size_t hidden = cfg_.mlp_ratio * cfg_.width;
    std::size_t mi = 0;
    for (std::size_t b = 0; b < cfg_.depth; ++b) {
      const bool is_moe = mi < moe_blocks_.size() && moe_blocks_[mi] == b;
      if (is_moe) {
        ++mi;
        blocks_.emplace_back(cfg_.width, cfg_.heads, hidden, cfg_.activation,
                             cfg_.moe);
      } else {
        blocks_.emplace_back(cfg_.width, cfg_.heads, hidden, cfg_.activation);
      }
    }
    ln_f_ = LayerNormLayer<T>(cfg_.width);
    head_ = LinearLayer<T>(cfg_.num_classes, cfg_.width);
  }

  const ModelConfig& config() const override { return cfg_; }
  bool has_moe() const override { return !moe_blocks_.empty(); }
  const std::vector<std::size_t>& moe_blocks() const { return moe_blocks_; }
  std::size_t sequence_length() const { return seq_tokens_ + 1; }

  void init(RngStream& rng) override {
    if (cfg_.input.kind == InputSpec::Kind::image)
      patch_embed_.init(rng);
    else
      token_embed_.init(rng);
    init_trunc_normal(cls_, rng);
    for (auto& b : blocks_) b.init(rng);
    head_.init(rng);
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& inputs, bool train_mode,
                    RngStream* noise_rng, std::vector<MoEBatch<T>>* aux,
                    RoutingTrace* trace) override {
    detail::require_2d(inputs, "model_forward");
    if (inputs.cols() != cfg_.input.flat_size())
      throw ShapeError("model_forward: sample width " +
                       std::to_string(inputs.cols()) + " does not match input " +
                       std::to_string(cfg_.input.flat_size()));
    const std::size_t batch = inputs.rows();

    std::vector<std::vector<Tensor<T>>> gates(moe_blocks_.size());
    std::vector<std::vector<Tensor<T>>> loads(moe_blocks_.size());
    if (trace) {
      trace->layers.resize(moe_blocks_.size());
      for (std::size_t m = 0; m < moe_blocks_.size(); ++m)
        trace->layers[m].block_index = moe_blocks_[m];
      trace->data_token_offset = 1;
    }

    std::vector<Tensor<T>> logit_rows;
    logit_rows.reserve(batch);
    for (std::size_t s = 0; s < batch; ++s) {
      Tensor<T> row = gather_rows(inputs, {static_cast<int>(s)});
      Tensor<T> x = cfg_.input.kind == InputSpec::Kind::image
                        ? patch_embed_.forward(tape, row)
                        : token_embed_.forward(tape, row);
      x = concat_rows<T>({use_param(tape, cls_), x});

      std::size_t mi = 0;
      for (std::size_t b = 0; b < cfg_.depth; ++b) {
        auto [y, gd] = blocks_[b].forward(tape, x, train_mode, noise_rng);
        x = std::move(y);
        if (!gd.has_value()) continue;
        if (aux) {
          gates[mi].push_back(gd->gate_weights);
          loads[mi].push_back(gd->load_prob);
        }
        if (trace) {
          auto& lt = trace->layers[mi];
          for (std::size_t t = 0; t < gd->selected.size(); ++t) {
            lt.sample.push_back(static_cast<std::int32_t>(s));
            lt.token.push_back(static_cast<std::int32_t>(t));
            lt.top1.push_back(top1_of(*gd, t));
            lt.topk.push_back(gd->selected[t]);
            std::vector<double> w;
            for (int e : gd->selected[t])
              w.push_back(static_cast<double>(
                  gd->gate_weights.at(t, static_cast<std::size_t>(e))));
            lt.topk_weights.push_back(std::move(w));
          }
        }
        ++mi;
      }
      Tensor<T> pooled = ln_f_.forward(tape, gather_rows(x, {0}));
      logit_rows.push_back(head_.forward(tape, pooled));
    }

    if (aux) {
      aux->clear();
      for (std::size_t m = 0; m < moe_blocks_.size(); ++m) {
        MoEBatch<T> mb;
        mb.block_index = moe_blocks_[m];
        mb.gate_weights = concat_rows(gates[m]);
        mb.load_prob = concat_rows(loads[m]);
        aux->push_back(std::move(mb));
      }
    }
    return concat_rows(logit_rows);
  }

  ParamList<T> parameters() override {
    ParamList<T> out;
    if (cfg_.input.kind == InputSpec::Kind::image)
      append_params(out, "patch_embed", patch_embed_.parameters());
    else
      append_params(out, "token_embed", token_embed_.parameters());
    out.push_back({"cls", &cls_});
    for (std::size_t b = 0; b < blocks_.size(); ++b)
      append_params(out, "block" + std::to_string(b), blocks_[b].parameters());
    append_params(out, "ln_f", ln_f_.parameters());
    append_params(out, "head", head_.parameters());
    return out;
  }

  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }

 private:
  // Top-1 = the selected expert with the largest noisy logit.
  static int top1_of(const GateDecision<T>& gd, std::size_t t) {
    int best = gd.selected[t].front();
    for (int e : gd.selected[t])
      if (gd.noisy_logits.at(t, static_cast<std::size_t>(e)) >
          gd.noisy_logits.at(t, static_cast<std::size_t>(best)))
        best = e;
    return best;
  }

  ModelConfig cfg_;
  PatchEmbed<T> patch_embed_;
  TokenEmbed<T> token_embed_;
  Tensor<T> cls_;
  std::vector<TransformerBlock<T>> blocks_;
  LayerNormLayer<T> ln_f_;
  LinearLayer<T> head_;
  std::vector<std::size_t> moe_blocks_;
  std::size_t seq_tokens_ = 0;
};

// -------------------------------------------------------------------- MLP ---

template <typename T>
class MlpModel : public ModelBase<T> {
 public:
  explicit MlpModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.mlp_sizes.size() < 2)
      throw ShapeError("MlpModel: size chain needs at least input and output");
    if (cfg_.mlp_sizes.front() != cfg_.input.flat_size())
      throw ShapeError("MlpModel: first size " +
                       std::to_string(cfg_.mlp_sizes.front()) +
                       " must equal flattened input " +
                       std::to_string(cfg_.input.flat_size()));
    if (cfg_.mlp_sizes.back() != cfg_.num_classes)
      throw ShapeError("MlpModel: last size must equal num_classes");
    for (std::size_t i = 0; i + 1 < cfg_.mlp_sizes.size(); ++i)
      layers_.emplace_back(cfg_.mlp_sizes[i + 1], cfg_.mlp_sizes[i]);
  }

  const ModelConfig& config() const override { return cfg_; }
  bool has_moe() const override { return false; }

  void init(RngStream& rng) override {
    for (auto& l : layers_) l.init(rng);
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& inputs, bool, RngStream*,
                    std::vector<MoEBatch<T>>* aux, RoutingTrace*) override {
    if (aux) aux->clear();
    Tensor<T> x = inputs;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      x = layers_[i].forward(tape, x);
      if (i + 1 < layers_.size()) x = activate(cfg_.activation, x);
    }
    return x;
  }

  ParamList<T> parameters() override {
    ParamList<T> out;
    for (std::size_t i = 0; i < layers_.size(); ++i)
      append_params(out, "fc" + std::to_string(i), layers_[i].parameters());
    return out;
  }

 private:
  ModelConfig cfg_;
  std::vector<LinearLayer<T>> layers_;
};

// -------------------------------------------------------------------- FCN ---

// Two width-one convolutions over the patch axis (shared per-patch affine
// maps) followed by global average pooling into the class logits.
template <typename T>
class FcnModel : public ModelBase<T> {
 public:
  explicit FcnModel(ModelConfig cfg) : cfg_(std::move(cfg)) {
    if (cfg_.input.kind != InputSpec::Kind::tokens)
      throw ShapeError("FcnModel: expects token (patch) input");
    if (cfg_.fcn_filters == 0) throw ShapeError("FcnModel: zero filters");
    conv1_ = LinearLayer<T>(cfg_.fcn_filters, cfg_.input.token_dim);
    conv2_ = LinearLayer<T>(cfg_.num_classes, cfg_.fcn_filters);
  }

  const ModelConfig& config() const override { return cfg_; }
  bool has_moe() const override { return false; }

  void init(RngStream& rng) override {
    conv1_.init(rng);
    conv2_.init(rng);
  }

  Tensor<T> forward(Tape<T>* tape, const Tensor<T>& inputs, bool, RngStream*,
                    std::vector<MoEBatch<T>>* aux, RoutingTrace*) override {
    if (aux) aux->clear();
    const std::size_t batch = inputs.rows();
    const std::size_t patches = cfg_.input.tokens;
    Tensor<T> rows =
        reshape(inputs, {batch * patches, cfg_.input.token_dim});
    Tensor<T> h = activate(cfg_.activation, conv1_.forward(tape, rows));
    Tensor<T> scores = conv2_.forward(tape, h);
    return mean_pool_rows(scores, patches);
  }

  ParamList<T> parameters() override {
    ParamList<T> out;
    append_params(out, "conv1", conv1_.parameters());
    append_params(out, "conv2", conv2_.parameters());
    return out;
  }

 private:
  ModelConfig cfg_;
  LinearLayer<T> conv1_;
  LinearLayer<T> conv2_;
};

// ---------------------------------------------------------------- builders ---

template <typename T>
std::unique_ptr<ModelBase<T>> build_model(const ModelConfig& cfg) {
  switch (cfg.kind) {
    case ModelKind::gmoe:
      return std::make_unique<GmoeModel<T>>(cfg);
    case ModelKind::mlp:
      return std::make_unique<MlpModel<T>>(cfg);
    case ModelKind::fcn:
      return std::make_unique<FcnModel<T>>(cfg);
  }
  throw ShapeError("build_model: unknown kind");
}

template <typename T>
std::unique_ptr<ModelBase<T>> build_gmoe(const ModelConfig& cfg) {
  ModelConfig c = cfg;
  c.kind = ModelKind::gmoe;
  return build_model<T>(c);
}

template <typename T>
std::unique_ptr<ModelBase<T>> build_mlp(std::vector<std::size_t> sizes,
                                        InputSpec input, Activation act) {
  ModelConfig c;
  c.kind = ModelKind::mlp;
  c.input = input;
  c.mlp_sizes = std::move(sizes);
  c.num_classes = c.mlp_sizes.back();
  c.activation = act;
  return build_model<T>(c);
}

template <typename T>
std::unique_ptr<ModelBase<T>> build_fcn(std::size_t filters, InputSpec input,
                                        std::size_t num_classes,
                                        Activation act) {
  ModelConfig c;
  c.kind = ModelKind::fcn;
  c.input = input;
  c.fcn_filters = filters;
  c.num_classes = num_classes;
  c.activation = act;
  return build_model<T>(c);
}

// model_forward with trace collection, eval-style entry point.
template <typename T>
std::pair<Tensor<T>, RoutingTrace> model_forward(ModelBase<T>& model,
                                                 const Tensor<T>& inputs,
                                                 bool train_mode,
                                                 RngStream* noise_rng = nullptr) {
  RoutingTrace trace;
  Tensor<T> logits =
      model.forward(nullptr, inputs, train_mode, noise_rng, nullptr, &trace);
  return {std::move(logits), std::move(trace)};
}

}  // namespace gmoe
