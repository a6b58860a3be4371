#include "gmoe/telemetry/telemetry.hpp"

#include "gmoe/error.hpp"

namespace gmoe {

std::int64_t ExpertHistogram::total() const {
  std::int64_t t = 0;
  for (const auto& row : counts)
    for (auto c : row) t += c;
  return t;
}

void ExpertHistogram::merge(const ExpertHistogram& other) {
  if (counts.empty()) {
    *this = other;
    return;
  }
  if (other.counts.size() != counts.size() ||
      other.num_experts() != num_experts())
    throw ShapeError("histogram merge: incompatible axes");
  for (std::size_t a = 0; a < counts.size(); ++a)
    for (std::size_t e = 0; e < counts[a].size(); ++e)
      counts[a][e] += other.counts[a][e];
}

void record_routing(const RoutingTrace& trace,
                    std::span<const std::int32_t> token_attr,
                    std::size_t tokens_per_sample,
                    std::size_t num_attributes, std::size_t num_experts,
                    std::vector<ExpertHistogram>& accum) {
  if (accum.empty()) {
    accum.resize(trace.layers.size());
    for (std::size_t m = 0; m < trace.layers.size(); ++m) {
      accum[m].layer_index = trace.layers[m].block_index;
      accum[m].counts.assign(num_attributes,
                             std::vector<std::int64_t>(num_experts, 0));
      for (std::size_t a = 0; a < num_attributes; ++a)
        accum[m].attribute_names.push_back("attr" + std::to_string(a));
    }
  }
  if (accum.size() != trace.layers.size())
    throw ShapeError("record_routing: accumulator layer count mismatch");

  const std::size_t offset = trace.data_token_offset;
  for (std::size_t m = 0; m < trace.layers.size(); ++m) {
    const auto& lt = trace.layers[m];
    for (std::size_t i = 0; i < lt.top1.size(); ++i) {
      const std::size_t pos = static_cast<std::size_t>(lt.token[i]);
      if (pos < offset) continue;  // class token has no data attribute
      const std::size_t data_tok = pos - offset;
      if (data_tok >= tokens_per_sample)
        throw ShapeError("record_routing: token index exceeds tokens per sample");
      const std::size_t flat =
          static_cast<std::size_t>(lt.sample[i]) * tokens_per_sample + data_tok;
      if (flat >= token_attr.size())
        throw ShapeError("record_routing: attribute labels shorter than trace");
      const auto attr = static_cast<std::size_t>(token_attr[flat]);
      const auto expert = static_cast<std::size_t>(lt.top1[i]);
      if (attr >= num_attributes || expert >= num_experts)
        throw ShapeError("record_routing: attribute or expert out of range");
      ++accum[m].counts[attr][expert];
    }
  }
}

double specialization_purity(const ExpertHistogram& hist) {
  if (hist.counts.empty()) throw ShapeError("specialization_purity: empty histogram");
  std::int64_t best_sum = 0, total = 0;
  for (const auto& row : hist.counts) {
    std::int64_t best = 0;
    for (auto c : row) {
      best = std::max(best, c);
      total += c;
    }
    best_sum += best;
  }
  if (total == 0) throw ShapeError("specialization_purity: no observations");
  return static_cast<double>(best_sum) / static_cast<double>(total);
}

nlohmann::json histogram_json(const ExpertHistogram& hist) {
  return {{"layer", hist.layer_index},
          {"attributes", hist.attribute_names},
          {"counts", hist.counts},
          {"purity", specialization_purity(hist)}};
}

void histogram_csv(const ExpertHistogram& hist, std::ostream& os) {
  os << "attribute";
  for (std::size_t e = 0; e < hist.num_experts(); ++e) os << ",expert" << e;
  os << "\n";
  for (std::size_t a = 0; a < hist.counts.size(); ++a) {
    os << hist.attribute_names[a];
    for (auto c : hist.counts[a]) os << "," << c;
    os << "\n";
  }
}

nlohmann::json balance_json(const std::vector<LayerBalance>& layers) {
  auto arr = nlohmann::json::array();
  for (const auto& l : layers)
    arr.push_back({{"layer", l.layer_index},
                   {"importance_cv2", l.importance_cv2},
                   {"load_cv2", l.load_cv2},
                   {"token_share", l.token_share}});
  return arr;
}

void balance_csv(const std::vector<LayerBalance>& layers, std::ostream& os) {
  os << "layer,importance_cv2,load_cv2";
  if (!layers.empty())
    for (std::size_t e = 0; e < layers[0].token_share.size(); ++e)
      os << ",share_expert" << e;
  os << "\n";
  char buf[64];
  for (const auto& l : layers) {
    os << l.layer_index;
    std::snprintf(buf, sizeof(buf), ",%.17g", l.importance_cv2);
    os << buf;
    std::snprintf(buf, sizeof(buf), ",%.17g", l.load_cv2);
    os << buf;
    for (double s : l.token_share) {
      std::snprintf(buf, sizeof(buf), ",%.17g", s);
      os << buf;
    }
    os << "\n";
  }
}

}  // namespace gmoe
