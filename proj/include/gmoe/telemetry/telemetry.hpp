#pragma once

#include <cstdint>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmoe/losses/losses.hpp"
#include "gmoe/model/models.hpp"

// Routing telemetry: expert/attribute histograms from top-1 selections,
// specialization purity, and balance diagnostics.

namespace gmoe {

struct ExpertHistogram {
  std::size_t layer_index = 0;
  std::vector<std::string> attribute_names;       // rows
  std::vector<std::vector<std::int64_t>> counts;  // [attribute][expert]

  std::size_t num_experts() const {
    return counts.empty() ? 0 : counts[0].size();
  }
  std::int64_t total() const;
  // Commutative merge of two accumulators over the same axes.
  void merge(const ExpertHistogram& other);
};

// Accumulates counts[attr][expert] from the trace's top-1 selections. The
// attribute of data token t of sample s is token_attr[s * tokens_per_sample
// + t]; positions before the trace's data offset (the class token) are
// skipped.
void record_routing(const RoutingTrace& trace,
                    std::span<const std::int32_t> token_attr,
                    std::size_t tokens_per_sample,
                    std::size_t num_attributes, std::size_t num_experts,
                    std::vector<ExpertHistogram>& accum);

// Fraction of tokens whose attribute's dominant expert handled them:
// sum_a max_e h[a][e] / sum_{a,e} h[a][e], in [1/N, 1].
double specialization_purity(const ExpertHistogram& hist);

struct LayerBalance {
  std::size_t layer_index = 0;
  double importance_cv2 = 0.0;
  double load_cv2 = 0.0;
  std::vector<double> token_share;  // top-1 share per expert, sums to 1
};

// Runs an eval pass (noise off) over the inputs and reports per-layer
// balance; CV^2 values are computed by the same squared-cv path the losses
// use.
template <typename T>
std::vector<LayerBalance> balance_report(ModelBase<T>& model,
                                         const Tensor<T>& inputs,
                                         std::size_t batch_size = 256);

nlohmann::json histogram_json(const ExpertHistogram& hist);
void histogram_csv(const ExpertHistogram& hist, std::ostream& os);
nlohmann::json balance_json(const std::vector<LayerBalance>& layers);
void balance_csv(const std::vector<LayerBalance>& layers, std::ostream& os);

template <typename T>
std::vector<LayerBalance> balance_report(ModelBase<T>& model,
                                         const Tensor<T>& inputs,
                                         std::size_t batch_size) {
  std::vector<LayerBalance> layers;
  std::vector<std::vector<double>> imp_sums, load_sums;
  std::vector<std::vector<std::int64_t>> top1_counts;

  const std::size_t n = inputs.rows();
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t stop = std::min(n, start + batch_size);
    std::vector<int> idx(stop - start);
    std::iota(idx.begin(), idx.end(), static_cast<int>(start));
    Tensor<T> xb = gather_rows(inputs, idx);
    std::vector<MoEBatch<T>> aux;
    RoutingTrace trace;
    model.forward(nullptr, xb, false, nullptr, &aux, &trace);
    if (layers.empty()) {
      layers.resize(aux.size());
      imp_sums.resize(aux.size());
      load_sums.resize(aux.size());
      top1_counts.resize(aux.size());
      for (std::size_t m = 0; m < aux.size(); ++m) {
        layers[m].layer_index = aux[m].block_index;
        imp_sums[m].assign(aux[m].gate_weights.cols(), 0.0);
        load_sums[m].assign(aux[m].load_prob.cols(), 0.0);
        top1_counts[m].assign(aux[m].gate_weights.cols(), 0);
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
      for (std::int32_t e : trace.layers[m].top1)
        ++top1_counts[m][static_cast<std::size_t>(e)];
    }
  }

  for (std::size_t m = 0; m < layers.size(); ++m) {
    Tensor<double> imp =
        Tensor<double>::from({imp_sums[m].size()}, imp_sums[m]);
    Tensor<double> load =
        Tensor<double>::from({load_sums[m].size()}, load_sums[m]);
    layers[m].importance_cv2 = squared_cv(imp).item();
    layers[m].load_cv2 = squared_cv(load).item();
    std::int64_t total = 0;
    for (auto c : top1_counts[m]) total += c;
    for (auto c : top1_counts[m])
      layers[m].token_share.push_back(static_cast<double>(c) /
                                      static_cast<double>(total));
  }
  return layers;
}

}  // namespace gmoe
