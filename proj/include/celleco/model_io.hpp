#pragma once

// JSON snapshots of trained model parameters, used by the CLI to hand a
// fold's best checkpoint to export-attention.

#include <fstream>
#include <string>

#include <json.hpp>

#include "celleco/cohort.hpp"
#include "celleco/mil.hpp"

namespace celleco {

inline nlohmann::json model_config_to_json(const ModelConfig& cfg) {
  return {{"d_patch", cfg.d_patch},
          {"d_cell", cfg.d_cell},
          {"d_model", cfg.d_model},
          {"L", cfg.L},
          {"r", cfg.r},
          {"use_patch_embeddings", cfg.use_patch_embeddings},
          {"spatial_scale", cfg.spatial_scale},
          {"allow_large_model", cfg.allow_large_model}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig cfg;
  cfg.d_patch = j.at("d_patch").get<std::uint32_t>();
  cfg.d_cell = j.at("d_cell").get<std::uint32_t>();
  cfg.d_model = j.at("d_model").get<std::uint32_t>();
  cfg.L = j.at("L").get<std::uint32_t>();
  cfg.r = j.at("r").get<int>();
  cfg.use_patch_embeddings = j.at("use_patch_embeddings").get<bool>();
  cfg.spatial_scale = j.at("spatial_scale").get<double>();
  cfg.allow_large_model = j.value("allow_large_model", false);
  return cfg;
}

namespace detail {

inline const std::vector<std::string>& model_tensor_names() {
  static const std::vector<std::string> names = {
      "e_cls",     "W_Q",      "W_K",       "W_V",      "ln_pre_g",
      "ln_pre_b",  "ln_post_g", "ln_post_b", "W_p",      "W_fusion",
      "Vg",        "Ug",       "W_att",     "w_clf",    "b_clf"};
  return names;
}

}  // namespace detail

inline void save_model(const ModelParams& params, const ModelConfig& cfg,
                       const std::string& path) {
  nlohmann::json j;
  j["config"] = model_config_to_json(cfg);
  j["spatial_scale"] = params.att.spatial_scale;
  ModelParams& p = const_cast<ModelParams&>(params);  // tensors() is non-const
  auto tensors = p.tensors();
  const auto& names = detail::model_tensor_names();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    j["tensors"][names[i]] = {{"shape", tensors[i]->shape()},
                              {"data", tensors[i]->vec()}};
  }
  std::ofstream os(path);
  if (!os) throw DataError("save_model: cannot write " + path);
  os << j.dump() << "\n";
}

inline ModelParams load_model(const std::string& path, ModelConfig* cfg_out) {
  std::ifstream is(path);
  if (!is) throw DataError("load_model: cannot read " + path);
  nlohmann::json j = nlohmann::json::parse(is, nullptr, true);
  ModelConfig cfg = model_config_from_json(j.at("config"));
  Rng rng(0);
  ModelParams params = init_params(cfg, rng);  // shapes only; overwritten below
  auto tensors = params.tensors();
  const auto& names = detail::model_tensor_names();
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    const auto& tj = j.at("tensors").at(names[i]);
    auto shape = tj.at("shape").get<std::vector<std::size_t>>();
    auto data = tj.at("data").get<std::vector<double>>();
    Tensor t(shape);
    if (t.size() != data.size())
      throw DataError("load_model: shape/data mismatch for " + names[i]);
    for (std::size_t k = 0; k < data.size(); ++k) t[k] = data[k];
    *tensors[i] = std::move(t);
  }
  params.att.spatial_scale = j.value("spatial_scale", cfg.spatial_scale);
  if (cfg_out) *cfg_out = cfg;
  return params;
}

}  // namespace celleco
