#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmoe/core/ops.hpp"
#include "gmoe/error.hpp"
#include "gmoe/moe/router.hpp"

namespace gmoe {

using MoEConfig = RouterConfig;  // N, k, router kind, tau, d_e, noise

enum class ModelKind { gmoe, mlp, fcn };
enum class PlacementPolicy { none, every_two, last_two, explicit_list };

inline const char* model_kind_name(ModelKind k) {
  switch (k) {
    case ModelKind::gmoe:
      return "gmoe";
    case ModelKind::mlp:
      return "mlp";
    case ModelKind::fcn:
      return "fcn";
  }
  return "?";
}

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "gmoe") return ModelKind::gmoe;
  if (s == "mlp") return ModelKind::mlp;
  if (s == "fcn") return ModelKind::fcn;
  throw ShapeError("unknown model kind '" + s + "'");
}

inline const char* placement_name(PlacementPolicy p) {
  switch (p) {
    case PlacementPolicy::none:
      return "none";
    case PlacementPolicy::every_two:
      return "every_two";
    case PlacementPolicy::last_two:
      return "last_two";
    case PlacementPolicy::explicit_list:
      return "explicit";
  }
  return "?";
}

inline PlacementPolicy placement_from(const std::string& s) {
  if (s == "none") return PlacementPolicy::none;
  if (s == "every_two") return PlacementPolicy::every_two;
  if (s == "last_two") return PlacementPolicy::last_two;
  if (s == "explicit") return PlacementPolicy::explicit_list;
  throw ShapeError("unknown placement policy '" + s + "'");
}

struct InputSpec {
  enum class Kind { image, tokens };
  Kind kind = Kind::tokens;
  // image mode
  std::size_t channels = 3, height = 224, width = 224;
  // token mode
  std::size_t tokens = 0, token_dim = 0;

  std::size_t flat_size() const {
    return kind == Kind::image ? channels * height * width
                               : tokens * token_dim;
  }
};

struct ModelConfig {
  ModelKind kind = ModelKind::gmoe;
  std::size_t num_classes = 2;
  InputSpec input;

  // transformer fields
  std::size_t depth = 12;
  std::size_t width = 384;
  std::size_t heads = 6;
  std::size_t patch_size = 16;
  std::size_t mlp_ratio = 4;
  Activation activation = Activation::gelu;
  PlacementPolicy placement = PlacementPolicy::last_two;
  std::vector<std::size_t> placement_list;
  MoEConfig moe;

  // mlp: full size chain, input width through logits
  std::vector<std::size_t> mlp_sizes = {40, 100, 100, 4};

  // fcn: two conv layers, this many filters, global average pool
  std::size_t fcn_filters = 20;

  // The GMoE-S/16 reference configuration.
  static ModelConfig gmoe_s16(std::size_t num_classes) {
    ModelConfig cfg;
    cfg.kind = ModelKind::gmoe;
    cfg.num_classes = num_classes;
    cfg.input = {InputSpec::Kind::image, 3, 224, 224, 0, 0};
    cfg.depth = 12;
    cfg.width = 384;
    cfg.heads = 6;
    cfg.patch_size = 16;
    cfg.placement = PlacementPolicy::last_two;
    cfg.moe.kind = RouterKind::cosine;
    cfg.moe.num_experts = 6;
    cfg.moe.top_k = 2;
    return cfg;
  }
};

// Block indices carrying an MoE layer under the given policy for L blocks.
inline std::vector<std::size_t> resolve_placement(PlacementPolicy policy,
                                                  std::size_t depth,
                                                  const std::vector<std::size_t>&
                                                      explicit_list = {}) {
  switch (policy) {
    case PlacementPolicy::none:
      return {};
    case PlacementPolicy::every_two: {
      std::vector<std::size_t> out;
      for (std::size_t i = 0; i < depth; i += 2) out.push_back(i);
      return out;
    }
    case PlacementPolicy::last_two: {
      if (depth < 2)
        throw ShapeError("last_two placement needs depth >= 2, got " +
                         std::to_string(depth));
      // The two largest even indices <= depth-2.
      std::vector<std::size_t> evens;
      for (std::size_t i = 0; i + 2 <= depth; i += 2) evens.push_back(i);
      if (evens.size() > 2) evens.erase(evens.begin(), evens.end() - 2);
      return evens;
    }
    case PlacementPolicy::explicit_list: {
      for (std::size_t i : explicit_list)
        if (i >= depth)
          throw ShapeError("placement index " + std::to_string(i) +
                           " out of range for depth " + std::to_string(depth));
      return explicit_list;
    }
  }
  return {};
}

// --------------------------------------------------------------- json i/o ---

inline nlohmann::json to_json(const ModelConfig& c) {
  nlohmann::json j;
  j["kind"] = model_kind_name(c.kind);
  j["num_classes"] = c.num_classes;
  j["input"] = {
      {"kind", c.input.kind == InputSpec::Kind::image ? "image" : "tokens"},
      {"channels", c.input.channels},
      {"height", c.input.height},
      {"width", c.input.width},
      {"tokens", c.input.tokens},
      {"token_dim", c.input.token_dim}};
  j["depth"] = c.depth;
  j["width"] = c.width;
  j["heads"] = c.heads;
  j["patch_size"] = c.patch_size;
  j["mlp_ratio"] = c.mlp_ratio;
  j["activation"] = activation_name(c.activation);
  j["placement"] = placement_name(c.placement);
  j["placement_list"] = c.placement_list;
  j["moe"] = {{"router", router_kind_name(c.moe.kind)},
              {"num_experts", c.moe.num_experts},
              {"top_k", c.moe.top_k},
              {"temperature", c.moe.temperature},
              {"embed_dim", c.moe.embed_dim},
              {"noise_enabled", c.moe.noise_enabled},
              {"noise_std", c.moe.noise_std}};
  j["mlp_sizes"] = c.mlp_sizes;
  j["fcn_filters"] = c.fcn_filters;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.kind = model_kind_from(j.at("kind").get<std::string>());
  c.num_classes = j.at("num_classes").get<std::size_t>();
  const auto& in = j.at("input");
  c.input.kind = in.at("kind").get<std::string>() == "image"
                     ? InputSpec::Kind::image
                     : InputSpec::Kind::tokens;
  c.input.channels = in.at("channels").get<std::size_t>();
  c.input.height = in.at("height").get<std::size_t>();
  c.input.width = in.at("width").get<std::size_t>();
  c.input.tokens = in.at("tokens").get<std::size_t>();
  c.input.token_dim = in.at("token_dim").get<std::size_t>();
  c.depth = j.at("depth").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.patch_size = j.at("patch_size").get<std::size_t>();
  c.mlp_ratio = j.at("mlp_ratio").get<std::size_t>();
  c.activation = j.at("activation").get<std::string>() == "relu"
                     ? Activation::relu
                     : Activation::gelu;
  c.placement = placement_from(j.at("placement").get<std::string>());
  c.placement_list = j.at("placement_list").get<std::vector<std::size_t>>();
  const auto& m = j.at("moe");
  c.moe.kind = m.at("router").get<std::string>() == "linear"
                   ? RouterKind::linear
                   : RouterKind::cosine;
  c.moe.num_experts = m.at("num_experts").get<std::size_t>();
  c.moe.top_k = m.at("top_k").get<std::size_t>();
  c.moe.temperature = m.at("temperature").get<double>();
  c.moe.embed_dim = m.at("embed_dim").get<std::size_t>();
  c.moe.noise_enabled = m.at("noise_enabled").get<bool>();
  c.moe.noise_std = m.at("noise_std").get<double>();
  c.mlp_sizes = j.at("mlp_sizes").get<std::vector<std::size_t>>();
  c.fcn_filters = j.at("fcn_filters").get<std::size_t>();
  return c;
}

}  // namespace gmoe
