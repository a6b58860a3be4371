#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <type_traits>

#include "gmoe/data/container.hpp"
#include "gmoe/model/models.hpp"
#include "gmoe/train/adam.hpp"

namespace gmoe {

template <typename T>
constexpr const char* dtype_name() {
  if constexpr (std::is_same_v<T, float>)
    return "f32";
  else
    return "f64";
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path,
                     ModelBase<T>& model,
                     const AdamState<T>* opt = nullptr,
                     nlohmann::json extra = {}) {
  ContainerWriter w(kCheckpointMagic);
  auto& meta = w.meta();
  meta["model"] = to_json(model.config());
  meta["precision"] = dtype_name<T>();
  if (!extra.is_null()) meta["extra"] = std::move(extra);

  auto add = [&](const std::string& name, const Tensor<T>& t) {
    if constexpr (std::is_same_v<T, float>)
      w.add_f32(name, t.shape(), t.data());
    else
      w.add_f64(name, t.shape(), t.data());
  };

  auto params = model.parameters();
  for (auto& p : params) add("param." + p.name, *p.tensor);
  if (opt && !opt->m.empty()) {
    meta["adam"] = {{"t", opt->t},
                    {"beta1", opt->beta1},
                    {"beta2", opt->beta2},
                    {"eps", opt->eps}};
    for (std::size_t i = 0; i < params.size(); ++i) {
      add("adam.m." + params[i].name, opt->m[i]);
      add("adam.v." + params[i].name, opt->v[i]);
    }
  }
  w.write(path);
}

inline nlohmann::json checkpoint_meta(const std::filesystem::path& path) {
  return Container::read_meta(path, kCheckpointMagic);
}

template <typename T>
struct LoadedCheckpoint {
  ModelConfig config;
  std::unique_ptr<ModelBase<T>> model;
  AdamState<T> opt;
  bool has_opt = false;
  nlohmann::json extra;
};

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  Container c = Container::read(path, kCheckpointMagic);
  const std::string prec = c.meta.at("precision").get<std::string>();
  if (prec != dtype_name<T>())
    throw IoError("checkpoint " + path.string() + " stores " + prec +
                  " parameters, not " + dtype_name<T>());

  LoadedCheckpoint<T> out;
  out.config = model_config_from_json(c.meta.at("model"));
  out.model = build_model<T>(out.config);
  if (c.meta.contains("extra")) out.extra = c.meta.at("extra");

  auto fetch = [&](const std::string& name, Tensor<T>& dst) {
    const auto& arr = c.at(name);
    if (arr.shape != dst.shape())
      throw IoError("checkpoint array '" + name + "' has shape " +
                    shape_str(arr.shape) + ", expected " +
                    shape_str(dst.shape()));
    if constexpr (std::is_same_v<T, float>) {
      auto v = arr.as_f32();
      std::copy(v.begin(), v.end(), dst.data());
    } else {
      auto v = arr.as_f64();
      std::copy(v.begin(), v.end(), dst.data());
    }
  };

  auto params = out.model->parameters();
  for (auto& p : params) fetch("param." + p.name, *p.tensor);
  if (c.meta.contains("adam")) {
    out.has_opt = true;
    out.opt.t = c.meta["adam"].at("t").get<std::size_t>();
    out.opt.beta1 = c.meta["adam"].at("beta1").get<double>();
    out.opt.beta2 = c.meta["adam"].at("beta2").get<double>();
    out.opt.eps = c.meta["adam"].at("eps").get<double>();
    std::vector<Tensor<T>*> ptrs;
    for (auto& p : params) ptrs.push_back(p.tensor);
    out.opt.ensure(ptrs);
    for (std::size_t i = 0; i < params.size(); ++i) {
      fetch("adam.m." + params[i].name, out.opt.m[i]);
      fetch("adam.v." + params[i].name, out.opt.v[i]);
    }
  }
  return out;
}

}  // namespace gmoe
