#pragma once

// Versioned JSON checkpoints. A full checkpoint keeps every parameter, the
// momentum generators and the memory banks; an inference checkpoint keeps
// only what target-domain forecasting needs.

#include "sedan/dataio.hpp"
#include "sedan/network.hpp"
#include "sedan/train.hpp"

#include <json.hpp>

#include <fstream>
#include <memory>
#include <stdexcept>
#include <string>

namespace sedan {

inline constexpr int kCheckpointVersion = 1;

enum class CheckpointScope { full, inference };

struct CheckpointMeta {
  ScalerParams scaler;  // target-domain scaler
  WindowSpec window;
  SplitRatios split;
  Frequency freq = Frequency::hourly;
  Decomposition decomposition = Decomposition::contrastive;
  std::string config_hash;
  double best_val_mse = 0.0;
};

struct CheckpointBundle {
  std::unique_ptr<SedanModel> model;
  CheckpointMeta meta;
  CheckpointScope scope = CheckpointScope::full;
  std::vector<MemoryBank> banks;  // full scope only
};

inline const char* to_string(Decomposition d) {
  switch (d) {
    case Decomposition::contrastive: return "contrastive";
    case Decomposition::explicit_sum: return "explicit_sum";
    case Decomposition::none: return "none";
  }
  return "?";
}

inline Decomposition parse_decomposition(const std::string& s) {
  if (s == "contrastive") return Decomposition::contrastive;
  if (s == "explicit_sum") return Decomposition::explicit_sum;
  if (s == "none") return Decomposition::none;
  throw std::invalid_argument("unknown decomposition: " + s);
}

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model},         {"n_heads", c.n_heads},           {"enc_layers", c.enc_layers},
          {"dec_layers", c.dec_layers},   {"d_ff", c.d_ff},                 {"dropout", c.dropout},
          {"d_in_source", c.d_in_source}, {"d_in_target", c.d_in_target},   {"d_out_source", c.d_out_source},
          {"d_out_target", c.d_out_target}, {"d_time_source", c.d_time_source}, {"d_time_target", c.d_time_target},
          {"tdg_kernel", c.tdg_kernel},   {"tdg_pool", c.tdg_pool},         {"sdg_hidden", c.sdg_hidden},
          {"momentum", c.momentum},       {"init_seed", c.init_seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model");
  c.n_heads = j.at("n_heads");
  c.enc_layers = j.at("enc_layers");
  c.dec_layers = j.at("dec_layers");
  c.d_ff = j.at("d_ff");
  c.dropout = j.at("dropout");
  c.d_in_source = j.at("d_in_source");
  c.d_in_target = j.at("d_in_target");
  c.d_out_source = j.at("d_out_source");
  c.d_out_target = j.at("d_out_target");
  c.d_time_source = j.at("d_time_source");
  c.d_time_target = j.at("d_time_target");
  c.tdg_kernel = j.at("tdg_kernel");
  c.tdg_pool = j.at("tdg_pool");
  c.sdg_hidden = j.at("sdg_hidden");
  c.momentum = j.at("momentum");
  c.init_seed = j.at("init_seed");
  c.validate();
  return c;
}

namespace detail {

inline nlohmann::json vector_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline nlohmann::json params_json(const ParameterSet& params, const std::string& skip_prefix) {
  nlohmann::json out = nlohmann::json::object();
  for (const auto& [name, t] : params.entries()) {
    if (!skip_prefix.empty() && name.rfind(skip_prefix, 0) == 0) continue;
    out[name] = {{"shape", t.shape()}, {"values", t.values()}};
  }
  return out;
}

inline void load_params(ParameterSet& params, const nlohmann::json& j, bool require_all) {
  for (const auto& [name, t] : params.entries()) {
    if (!j.contains(name)) {
      if (require_all) throw std::runtime_error("checkpoint is missing parameter " + name);
      continue;
    }
    const auto& entry = j.at(name);
    if (entry.at("shape").get<Shape>() != t.shape()) throw std::runtime_error("checkpoint shape mismatch at " + name);
    auto dst = t;
    dst.mutable_values() = entry.at("values").get<std::vector<double>>();
  }
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const SedanModel& model, const CheckpointMeta& meta,
                            CheckpointScope scope = CheckpointScope::full, const TrainState* state = nullptr) {
  nlohmann::json j;
  j["format"] = "sedan-checkpoint";
  j["version"] = kCheckpointVersion;
  j["scope"] = scope == CheckpointScope::full ? "full" : "inference";
  j["model_config"] = to_json(model.config());
  j["scaler"] = {{"mean", detail::vector_json(meta.scaler.mean)}, {"std", detail::vector_json(meta.scaler.std)}};
  j["window"] = {{"input_len", meta.window.input_len},
                 {"label_len", meta.window.label_len},
                 {"pred_len", meta.window.pred_len},
                 {"stride", meta.window.stride}};
  j["split"] = {meta.split.train, meta.split.val, meta.split.test};
  j["freq"] = to_string(meta.freq);
  j["decomposition"] = to_string(meta.decomposition);
  j["config_hash"] = meta.config_hash;
  j["best_val_mse"] = meta.best_val_mse;
  if (scope == CheckpointScope::full) {
    j["parameters"] = detail::params_json(model.parameters(), "");
    j["momentum_parameters"] = detail::params_json(model.momentum_parameters(), "");
    if (state) {
      auto banks = nlohmann::json::array();
      for (const auto& b : state->banks) {
        const Eigen::MatrixXd& k = b.keys();
        std::vector<double> flat(static_cast<std::size_t>(k.size()));
        for (Eigen::Index r = 0; r < k.rows(); ++r)
          for (Eigen::Index c = 0; c < k.cols(); ++c) flat[static_cast<std::size_t>(r * k.cols() + c)] = k(r, c);
        banks.push_back({{"capacity", b.capacity()}, {"dim", b.dim()}, {"filled", b.filled()}, {"cursor", b.cursor()}, {"keys", flat}});
      }
      j["banks"] = banks;
    }
  } else {
    j["parameters"] = detail::params_json(model.parameters(), "source.");
  }
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
  out << j.dump();
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

inline CheckpointBundle load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("checkpoint not found: " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("malformed checkpoint " + path + ": " + e.what());
  }
  if (j.value("format", "") != "sedan-checkpoint") throw std::runtime_error("not a checkpoint file: " + path);
  const int version = j.value("version", -1);
  if (version != kCheckpointVersion) {
    throw std::runtime_error("checkpoint version " + std::to_string(version) + " unsupported (expected " +
                             std::to_string(kCheckpointVersion) + ")");
  }
  CheckpointBundle bundle;
  bundle.scope = j.at("scope") == "full" ? CheckpointScope::full : CheckpointScope::inference;
  bundle.model = std::make_unique<SedanModel>(model_config_from_json(j.at("model_config")));
  bundle.meta.scaler = {detail::vector_from_json(j.at("scaler").at("mean")),
                        detail::vector_from_json(j.at("scaler").at("std"))};
  const auto& w = j.at("window");
  bundle.meta.window = {w.at("input_len"), w.at("label_len"), w.at("pred_len"), w.at("stride")};
  const auto split = j.at("split").get<std::vector<double>>();
  if (split.size() != 3) throw std::runtime_error("checkpoint split must hold three ratios");
  bundle.meta.split = {split[0], split[1], split[2]};
  bundle.meta.freq = parse_frequency(j.at("freq"));
  bundle.meta.decomposition = parse_decomposition(j.at("decomposition"));
  bundle.meta.config_hash = j.at("config_hash");
  bundle.meta.best_val_mse = j.at("best_val_mse");
  const bool full = bundle.scope == CheckpointScope::full;
  if (full) {
    detail::load_params(bundle.model->parameters(), j.at("parameters"), true);
    detail::load_params(bundle.model->momentum_parameters(), j.at("momentum_parameters"), true);
  } else {
    ParameterSet kept;
    for (const auto& [name, t] : bundle.model->parameters().entries())
      if (name.rfind("source.", 0) != 0) kept.add(name, t);
    detail::load_params(kept, j.at("parameters"), true);
  }
  if (full && j.contains("banks")) {
    for (const auto& b : j.at("banks")) {
      MemoryBank bank(b.at("capacity"), b.at("dim"));
      const auto flat = b.at("keys").get<std::vector<double>>();
      Eigen::MatrixXd keys(static_cast<Eigen::Index>(bank.capacity()), static_cast<Eigen::Index>(bank.dim()));
      if (flat.size() != static_cast<std::size_t>(keys.size())) throw std::runtime_error("checkpoint bank size mismatch");
      for (Eigen::Index r = 0; r < keys.rows(); ++r)
        for (Eigen::Index c = 0; c < keys.cols(); ++c)
          keys(r, c) = flat[static_cast<std::size_t>(r * keys.cols() + c)];
      bank.restore(keys, b.at("filled"), b.at("cursor"));
      bundle.banks.push_back(std::move(bank));
    }
  }
  return bundle;
}

}  // namespace sedan
