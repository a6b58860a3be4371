#pragma once

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <map>
#include <numeric>
#include <ostream>
#include <string>
#include <vector>

#include "gmoe/data/synthetic.hpp"
#include "gmoe/losses/losses.hpp"
#include "gmoe/model/models.hpp"
#include "gmoe/train/adam.hpp"
#include "gmoe/train/checkpoint.hpp"

namespace gmoe {

struct TrainConfig {
  double lr = 1e-3;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t iterations = 1000;
  double lambda = 0.01;       // balancing-loss weight
  std::size_t eval_every = 200;  // 0 = only the final checkpoint
  std::uint64_t seed = 0;
  std::string precision = "f64";  // f32 | f64

  void validate() const {
    if (!(lr > 0.0)) throw ShapeError("train config: lr must be positive");
    if (weight_decay < 0.0) throw ShapeError("train config: negative weight decay");
    if (batch_size == 0) throw ShapeError("train config: zero batch size");
    if (lambda < 0.0) throw ShapeError("train config: lambda must be >= 0");
    if (precision != "f32" && precision != "f64")
      throw ShapeError("train config: precision must be f32 or f64");
  }

  // Finetuning profiles from the reference hyperparameter table.
  static TrainConfig profile(const std::string& name) {
    TrainConfig cfg;
    cfg.batch_size = 32;
    if (name == "pacs") {
      cfg.lr = 3e-5;
      cfg.weight_decay = 0.0;
    } else if (name == "vlcs") {
      cfg.lr = 3e-5;
      cfg.weight_decay = 1e-6;
    } else if (name == "officehome") {
      cfg.lr = 1e-5;
      cfg.weight_decay = 1e-6;
    } else if (name == "terraincognita") {
      cfg.lr = 5e-5;
      cfg.weight_decay = 1e-4;
    } else if (name == "domainnet") {
      cfg.lr = 5e-5;
      cfg.weight_decay = 0.0;
    } else {
      throw ShapeError("unknown train profile '" + name + "'");
    }
    return cfg;
  }
};

struct EvalResult {
  double accuracy = 0.0;
  double mean_loss = 0.0;
  // Per-MoE-layer balance over the evaluated split (empty without MoE).
  std::vector<double> importance_cv2;
  std::vector<double> load_cv2;
};

struct MetricRow {
  std::size_t iteration = 0;
  std::string split;
  double accuracy = 0.0;
  double mean_loss = 0.0;
  LossBreakdown train_loss;  // breakdown of the training step at checkpoint
};

struct Metrics {
  std::vector<MetricRow> rows;

  void write_csv(std::ostream& os) const {
    os << "iteration,split,accuracy,mean_loss,cls,importance,load,total,lambda\n";
    char buf[512];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf),
                    "%zu,%s,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                    r.iteration, r.split.c_str(), r.accuracy, r.mean_loss,
                    r.train_loss.classification, r.train_loss.importance,
                    r.train_loss.load, r.train_loss.total, r.train_loss.lambda);
      os << buf;
    }
  }
};

template <typename T>
struct CheckpointRecord {
  std::size_t iteration = 0;
  std::map<std::string, EvalResult> evals;
  std::vector<Tensor<T>> params;  // deep snapshot in parameters() order
  std::filesystem::path file;     // set when written to disk

  double val_accuracy() const {
    auto it = evals.find("val");
    return it == evals.end() ? 0.0 : it->second.accuracy;
  }
};

template <typename T>
struct TrainResult {
  Metrics metrics;
  std::vector<CheckpointRecord<T>> checkpoints;
  std::size_t selected = 0;
  LossBreakdown final_loss;
};

namespace detail {

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& x) {
  if constexpr (std::is_same_v<T, double>) return x;
  Tensor<T> out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    out.at(i) = static_cast<T>(x.at(i));
  return out;
}

inline double cv2_of_sums(const std::vector<double>& sums) {
  const double n = static_cast<double>(sums.size());
  double mean = std::accumulate(sums.begin(), sums.end(), 0.0) / n;
  if (mean == 0.0) return 0.0;
  double var = 0.0;
  for (double v : sums) var += (v - mean) * (v - mean);
  var /= n;
  return var / (mean * mean);
}

}  // namespace detail

// Argmax-logit accuracy (ties toward the lower class) and mean
// classification loss, eval mode: no routing noise. Balance statistics are
// accumulated over the whole split when the model has MoE layers.
template <typename T>
EvalResult evaluate(ModelBase<T>& model, const Tensor<T>& x,
                    std::span<const std::int32_t> labels,
                    std::size_t batch_size = 256) {
  if (labels.empty()) throw ShapeError("evaluate: empty split");
  const std::size_t n = labels.size();
  EvalResult res;
  std::size_t correct = 0;
  double loss_sum = 0.0;

  std::vector<std::vector<double>> imp_sums, load_sums;
  const bool moe = model.has_moe();

  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    std::vector<int> idx(stop - start);
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    Tensor<T> xb = gather_rows(x, idx);
    std::vector<MoEBatch<T>> aux;
    Tensor<T> logits = model.forward(nullptr, xb, false, nullptr,
                                     moe ? &aux : nullptr, nullptr);
    const std::size_t k = logits.cols();
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j)
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      if (static_cast<std::int32_t>(best) == labels[start + i]) ++correct;
    }
    std::vector<std::int32_t> yb(labels.begin() + static_cast<long>(start),
                                 labels.begin() + static_cast<long>(stop));
    loss_sum += static_cast<double>(cross_entropy(logits, yb).item()) *
                static_cast<double>(idx.size());
    if (moe) {
      if (imp_sums.empty()) {
        imp_sums.resize(aux.size());
        load_sums.resize(aux.size());
        for (std::size_t m = 0; m < aux.size(); ++m) {
          imp_sums[m].assign(aux[m].gate_weights.cols(), 0.0);
          load_sums[m].assign(aux[m].load_prob.cols(), 0.0);
        }
      }
      for (std::size_t m = 0; m < aux.size(); ++m) {
        const auto& g = aux[m].gate_weights;
        const auto& l = aux[m].load_prob;
        for (std::size_t r = 0; r < g.rows(); ++r)
          for (std::size_t e = 0; e < g.cols(); ++e) {
            imp_sums[m][e] += static_cast<double>(g.at(r, e));
            load_sums[m][e] += static_cast<double>(l.at(r, e));
          }
      }
    }
  }
  res.accuracy = static_cast<double>(correct) / static_cast<double>(n);
  res.mean_loss = loss_sum / static_cast<double>(n);
  for (auto& s : imp_sums) res.importance_cv2.push_back(detail::cv2_of_sums(s));
  for (auto& s : load_sums) res.load_cv2.push_back(detail::cv2_of_sums(s));
  return res;
}

template <typename T>
EvalResult evaluate(ModelBase<T>& model, const Split& split,
                    std::size_t batch_size = 256) {
  Tensor<T> x = detail::cast_tensor<T>(split.x);
  return evaluate(model, x, split.labels, batch_size);
}

// Checkpoint maximizing pooled validation accuracy; ties toward the earliest.
template <typename T>
std::size_t train_validation_select(
    const std::vector<CheckpointRecord<T>>& checkpoints) {
  if (checkpoints.empty())
    throw ShapeError("train_validation_select: no checkpoints");
  std::size_t best = 0;
  for (std::size_t i = 1; i < checkpoints.size(); ++i)
    if (checkpoints[i].val_accuracy() > checkpoints[best].val_accuracy())
      best = i;
  return best;
}

template <typename T>
void apply_checkpoint(ModelBase<T>& model, const CheckpointRecord<T>& record) {
  auto params = model.parameters();
  if (params.size() != record.params.size())
    throw ShapeError("apply_checkpoint: parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i)
    *params[i].tensor = record.params[i].clone();
}

// Deterministic mini-batch training: named rng streams, epoch-wise shuffle,
// Adam with decoupled weight decay, evaluation + checkpoint every eval_every
// iterations and at the end. The model is (re)initialized from the seed's
// init stream, so a run is a pure function of (model config, data, config).
template <typename T>
TrainResult<T> train(ModelBase<T>& model, const SyntheticDataset& data,
                     const TrainConfig& cfg,
                     const std::filesystem::path& out_dir = {}) {
  cfg.validate();
  RngPool pool(cfg.seed);
  RngStream init_rng = pool.stream("init");
  RngStream shuffle_rng = pool.stream("data-shuffle");
  RngStream noise_rng = pool.stream("routing-noise");
  model.init(init_rng);

  const Split& tr = data.train;
  Tensor<T> train_x = detail::cast_tensor<T>(tr.x);
  Tensor<T> val_x = detail::cast_tensor<T>(data.val.x);
  Tensor<T> test1_x = detail::cast_tensor<T>(data.test1.x);
  Tensor<T> test2_x = detail::cast_tensor<T>(data.test2.x);

  auto params = model.parameters();
  std::vector<Tensor<T>*> param_ptrs;
  for (auto& p : params) param_ptrs.push_back(p.tensor);
  AdamState<T> opt;

  const std::size_t n = tr.size();
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = n;  // triggers a shuffle on first use

  TrainResult<T> result;
  const bool use_moe_loss = model.has_moe();

  auto record_checkpoint = [&](std::size_t iteration,
                               const LossBreakdown& bk) {
    CheckpointRecord<T> rec;
    rec.iteration = iteration;
    rec.evals["train"] = evaluate(model, train_x,
                                  std::span<const std::int32_t>(
                                      tr.labels.data(),
                                      std::min<std::size_t>(n, 2000)));
    rec.evals["val"] = evaluate(model, val_x, data.val.labels);
    rec.evals["test1"] = evaluate(model, test1_x, data.test1.labels);
    rec.evals["test2"] = evaluate(model, test2_x, data.test2.labels);
    for (auto& p : params) rec.params.push_back(p.tensor->clone());
    if (!out_dir.empty()) {
      std::filesystem::create_directories(out_dir);
      char name[64];
      std::snprintf(name, sizeof(name), "ckpt_%08zu.gmck", iteration);
      rec.file = out_dir / name;
      nlohmann::json extra = {{"iteration", iteration},
                              {"val_accuracy", rec.evals["val"].accuracy}};
      save_checkpoint(rec.file, model, &opt, extra);
    }
    for (const auto& split : {"train", "val", "test1", "test2"}) {
      MetricRow row;
      row.iteration = iteration;
      row.split = split;
      row.accuracy = rec.evals[split].accuracy;
      row.mean_loss = rec.evals[split].mean_loss;
      row.train_loss = bk;
      result.metrics.rows.push_back(std::move(row));
    }
    result.checkpoints.push_back(std::move(rec));
  };

  LossBreakdown bk;
  bk.lambda = cfg.lambda;
  for (std::size_t it = 1; it <= cfg.iterations; ++it) {
    // Assemble the next deterministic batch.
    std::vector<int> batch_idx;
    batch_idx.reserve(cfg.batch_size);
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      if (cursor >= n) {
        for (std::size_t i = n; i > 1; --i)
          std::swap(order[i - 1], order[shuffle_rng.uniform_int(i)]);
        cursor = 0;
      }
      batch_idx.push_back(order[cursor++]);
    }
    Tensor<T> xb = gather_rows(train_x, batch_idx);
    std::vector<std::int32_t> yb;
    yb.reserve(cfg.batch_size);
    for (int i : batch_idx) yb.push_back(tr.labels[static_cast<std::size_t>(i)]);

    try {
      Tape<T> tape;
      std::vector<MoEBatch<T>> aux;
      Tensor<T> logits = model.forward(&tape, xb, true, &noise_rng,
                                       use_moe_loss ? &aux : nullptr, nullptr);
      Tensor<T> cls = cross_entropy(logits, yb);
      Tensor<T> total = cls;
      bk.classification = static_cast<double>(cls.item());
      bk.importance = 0.0;
      bk.load = 0.0;
      if (use_moe_loss && !aux.empty()) {
        Tensor<T> imp = importance_loss(aux[0].gate_weights);
        Tensor<T> load = load_loss(aux[0].load_prob);
        for (std::size_t m = 1; m < aux.size(); ++m) {
          imp = add(imp, importance_loss(aux[m].gate_weights));
          load = add(load, load_loss(aux[m].load_prob));
        }
        const T invm = T(1) / static_cast<T>(aux.size());
        imp = scale(imp, invm);
        load = scale(load, invm);
        bk.importance = static_cast<double>(imp.item());
        bk.load = static_cast<double>(load.item());
        total = total_loss(cls, imp, load, static_cast<T>(cfg.lambda));
      }
      bk.total = static_cast<double>(total.item());
      auto grads = tape.backward(total);
      std::vector<Tensor<T>> glist;
      glist.reserve(param_ptrs.size());
      for (auto* p : param_ptrs) glist.push_back(grads.of(*p));
      adam_step(param_ptrs, glist, opt, cfg.lr, cfg.weight_decay);
    } catch (const NumericError& e) {
      throw NumericError("iteration " + std::to_string(it) + ": " + e.what());
    }

    if ((cfg.eval_every && it % cfg.eval_every == 0) || it == cfg.iterations)
      record_checkpoint(it, bk);
  }
  if (cfg.iterations == 0) record_checkpoint(0, bk);

  result.final_loss = bk;
  result.selected = train_validation_select(result.checkpoints);
  return result;
}

}  // namespace gmoe
