#pragma once

// Run configuration and the command implementations behind tools/sedan_cli.
// Configs are YAML documents merged over built-in defaults; every key the
// user supplies must exist in the defaults and keep its type.

#include "sedan/checkpoint.hpp"
#include "sedan/dataio.hpp"
#include "sedan/eval.hpp"
#include "sedan/train.hpp"

#include <json.hpp>
#include <yaml-cpp/yaml.h>

#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedan::cli {

namespace fs = std::filesystem;
using nlohmann::json;

enum ExitCode : int { kOk = 0, kConfigError = 1, kRuntimeError = 2 };

/// Invalid configuration; the message names the offending field.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct RunConfig {
  std::string source_path;  // empty when no source domain is used
  std::string target_path;
  SplitRatios split;
  WindowSpec window;
  ModelConfig model;
  TrainConfig train;
  std::string variant = "sedan";
  std::string output_dir;
  json canonical;
  std::string hash;
};

inline std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::ostringstream out;
  out << std::hex << std::setw(16) << std::setfill('0') << h;
  return out.str();
}

inline json default_config() {
  const ModelConfig m;
  const TrainConfig t;
  const SplitRatios s;
  const WindowSpec w;
  return {
      {"data", {{"source", ""}, {"target", ""}, {"split", {s.train, s.val, s.test}}}},
      {"task", {{"input_len", w.input_len}, {"label_len", w.label_len}, {"pred_len", w.pred_len}, {"stride", w.stride}}},
      {"model",
       {{"d_model", m.d_model},
        {"n_heads", m.n_heads},
        {"enc_layers", m.enc_layers},
        {"dec_layers", m.dec_layers},
        {"d_ff", m.d_ff},
        {"dropout", m.dropout},
        {"tdg_kernel", m.tdg_kernel},
        {"tdg_pool", m.tdg_pool},
        {"sdg_hidden", m.sdg_hidden},
        {"momentum", m.momentum},
        {"init_seed", m.init_seed}}},
      {"train",
       {{"lambda", t.lambda},
        {"gamma", t.gamma},
        {"lr", t.lr},
        {"lr_decay", t.lr_decay},
        {"decay_after", t.decay_after},
        {"epochs", t.epochs},
        {"patience", t.patience},
        {"batch_size", t.batch_size},
        {"steps_per_epoch", t.steps_per_epoch},
        {"seed", t.seed}}},
      {"contrast",
       {{"tau", t.contrast.tau},
        {"k_negatives", t.contrast.k_negatives},
        {"bank_capacity", t.contrast.bank_capacity},
        {"beta", t.contrast.beta}}},
      {"adapt",
       {{"n_subsequences", t.adapt.n_subsequences},
        {"epsilon", t.adapt.epsilon},
        {"bandwidth", "median"},
        {"sigma", t.adapt.kernel.sigma},
        {"mk_sigmas", t.adapt.kernel.mk_sigmas},
        {"seasonal_metric", to_string(t.adapt.seasonal_metric)},
        {"trend_metric", to_string(t.adapt.trend_metric)},
        {"ipm_max_iterations", t.adapt.ipm.max_iterations},
        {"ipm_residual_tolerance", t.adapt.ipm.residual_tolerance},
        {"ipm_gap_tolerance", t.adapt.ipm.gap_tolerance_per_cell}}},
      {"augment",
       {{"roll_max", nullptr},
        {"allow_flip", t.augment.allow_flip},
        {"scale_low", t.augment.scale_low},
        {"scale_high", t.augment.scale_high},
        {"jitter_sigma", t.augment.jitter_sigma},
        {"crop_ratio_min", t.augment.crop_ratio_min},
        {"warp_factor_low", t.augment.warp_factor_low},
        {"warp_factor_high", t.augment.warp_factor_high},
        {"warp_range_fraction", t.augment.warp_range_fraction},
        {"seed", t.augment.seed}}},
      {"variant", "sedan"},
      {"output", {{"dir", ""}}},
  };
}

namespace detail {

inline json yaml_to_json(const YAML::Node& node, const std::string& path) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Sequence: {
      json out = json::array();
      for (std::size_t i = 0; i < node.size(); ++i) out.push_back(yaml_to_json(node[i], path + "[" + std::to_string(i) + "]"));
      return out;
    }
    case YAML::NodeType::Map: {
      json out = json::object();
      for (const auto& kv : node) {
        const auto key = kv.first.as<std::string>();
        out[key] = yaml_to_json(kv.second, path.empty() ? key : path + "." + key);
      }
      return out;
    }
    case YAML::NodeType::Scalar:
      break;
  }
  const std::string text = node.Scalar();
  if (node.Tag() == "!") return text;  // quoted
  if (text == "true" || text == "false") return text == "true";
  if (text == "null" || text == "~") return nullptr;
  char* end = nullptr;
  if (!text.empty() && text.find_first_of(".eE") == std::string::npos) {
    errno = 0;
    const long long v = std::strtoll(text.c_str(), &end, 10);
    if (*end == '\0' && errno == 0) return v;
  }
  end = nullptr;
  const double d = std::strtod(text.c_str(), &end);
  if (!text.empty() && *end == '\0') return d;
  return text;
}

/// `value` merged over `base`, each leaf checked against the type of the
/// matching default in `reference`; integers widen to floats.
inline json coerce(const json& reference, const json& base, const json& value, const std::string& path) {
  auto fail = [&](const char* expected) {
    return ConfigError(path + ": expected " + expected + ", got " + value.dump());
  };
  if (reference.is_object()) {
    if (!value.is_object()) throw fail("a section");
    json out = base;
    for (const auto& [key, v] : value.items()) {
      if (!reference.contains(key)) throw ConfigError(path + "." + key + ": unknown key");
      out[key] = coerce(reference.at(key), base.at(key), v, path + "." + key);
    }
    return out;
  }
  if (reference.is_array()) {
    if (!value.is_array()) throw fail("a list");
    json out = json::array();
    for (const auto& v : value) {
      if (!v.is_number()) throw fail("a list of numbers");
      out.push_back(v.get<double>());
    }
    return out;
  }
  if (reference.is_null()) {  // optional non-negative integer
    if (value.is_null()) return value;
    if (!value.is_number_integer() || value.get<long long>() < 0) throw fail("a non-negative integer or null");
    return value;
  }
  if (reference.is_boolean()) {
    if (!value.is_boolean()) throw fail("true or false");
    return value;
  }
  if (reference.is_string()) {
    if (value.is_null()) return "";  // `key=` clears a path
    if (!value.is_string()) throw fail("a string");
    return value;
  }
  if (reference.is_number_float()) {
    if (!value.is_number()) throw fail("a number");
    return value.get<double>();
  }
  if (!value.is_number_integer()) throw fail("an integer");
  if (reference.is_number_unsigned() && value.get<long long>() < 0) throw fail("a non-negative integer");
  return value;
}

inline void apply_override(json& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form key=value");
  const std::string path = assignment.substr(0, eq);
  json patch;
  try {
    patch = yaml_to_json(YAML::Load(assignment.substr(eq + 1)), path);
  } catch (const YAML::Exception& e) {
    throw ConfigError(path + ": cannot parse value: " + e.what());
  }
  // Wrap the value in nested objects along the dotted path.
  std::size_t end = path.size();
  while (true) {
    const auto dot = path.rfind('.', end - 1);
    const std::string key = path.substr(dot == std::string::npos ? 0 : dot + 1, end - (dot == std::string::npos ? 0 : dot + 1));
    if (key.empty()) throw ConfigError("override '" + assignment + "' has an empty key");
    patch = json{{key, patch}};
    if (dot == std::string::npos) break;
    end = dot;
  }
  config = coerce(default_config(), config, patch, "config");
}

inline std::string strip_root(const std::string& path) {
  return path.rfind("config.", 0) == 0 ? path.substr(7) : path;
}

template <class Fn>
void field(const std::string& name, Fn&& fn) {
  try {
    fn();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(name + ": " + e.what());
  }
}

}  // namespace detail

/// Merges `document` (parsed YAML) and then `overrides` over the defaults and
/// builds the typed configuration.
inline RunConfig build_config(const YAML::Node& document, const std::vector<std::string>& overrides,
                              const std::string& variant_override = "") {
  json cfg = default_config();
  try {
    if (document && !document.IsNull()) cfg = detail::coerce(cfg, cfg, detail::yaml_to_json(document, ""), "config");
    for (const auto& o : overrides) detail::apply_override(cfg, o);
  } catch (const ConfigError& e) {
    throw ConfigError(detail::strip_root(e.what()));
  }
  if (!variant_override.empty()) cfg["variant"] = variant_override;

  RunConfig rc;
  const auto& d = cfg["data"];
  rc.source_path = d["source"];
  rc.target_path = d["target"];
  if (d["split"].size() != 3) throw ConfigError("data.split: expected three ratios");
  rc.split = {d["split"][0], d["split"][1], d["split"][2]};
  const auto& t = cfg["task"];
  rc.window = {t["input_len"], t["label_len"], t["pred_len"], t["stride"]};
  const auto& m = cfg["model"];
  rc.model.d_model = m["d_model"];
  rc.model.n_heads = m["n_heads"];
  rc.model.enc_layers = m["enc_layers"];
  rc.model.dec_layers = m["dec_layers"];
  rc.model.d_ff = m["d_ff"];
  rc.model.dropout = m["dropout"];
  rc.model.tdg_kernel = m["tdg_kernel"];
  rc.model.tdg_pool = m["tdg_pool"];
  rc.model.sdg_hidden = m["sdg_hidden"];
  rc.model.momentum = m["momentum"];
  rc.model.init_seed = m["init_seed"];
  const auto& tr = cfg["train"];
  auto& T = rc.train;
  T.lambda = tr["lambda"];
  T.gamma = tr["gamma"];
  T.lr = tr["lr"];
  T.lr_decay = tr["lr_decay"];
  T.decay_after = tr["decay_after"];
  T.epochs = tr["epochs"];
  T.patience = tr["patience"];
  T.batch_size = tr["batch_size"];
  T.steps_per_epoch = tr["steps_per_epoch"];
  T.seed = tr["seed"];
  const auto& c = cfg["contrast"];
  T.contrast.tau = c["tau"];
  T.contrast.k_negatives = c["k_negatives"];
  T.contrast.bank_capacity = c["bank_capacity"];
  T.contrast.beta = c["beta"];
  const auto& a = cfg["adapt"];
  T.adapt.n_subsequences = a["n_subsequences"];
  T.adapt.epsilon = a["epsilon"];
  const std::string bw = a["bandwidth"];
  if (bw != "median" && bw != "fixed") throw ConfigError("adapt.bandwidth: expected median or fixed, got " + bw);
  T.adapt.kernel.policy = bw == "median" ? BandwidthPolicy::median : BandwidthPolicy::fixed;
  T.adapt.kernel.sigma = a["sigma"];
  T.adapt.kernel.mk_sigmas = a["mk_sigmas"].get<std::vector<double>>();
  detail::field("adapt.seasonal_metric", [&] { T.adapt.seasonal_metric = parse_metric(a["seasonal_metric"]); });
  detail::field("adapt.trend_metric", [&] { T.adapt.trend_metric = parse_metric(a["trend_metric"]); });
  T.adapt.ipm.max_iterations = a["ipm_max_iterations"];
  T.adapt.ipm.residual_tolerance = a["ipm_residual_tolerance"];
  T.adapt.ipm.gap_tolerance_per_cell = a["ipm_gap_tolerance"];
  const auto& g = cfg["augment"];
  if (!g["roll_max"].is_null()) T.augment.roll_max = g["roll_max"].get<std::size_t>();
  T.augment.allow_flip = g["allow_flip"];
  T.augment.scale_low = g["scale_low"];
  T.augment.scale_high = g["scale_high"];
  T.augment.jitter_sigma = g["jitter_sigma"];
  T.augment.crop_ratio_min = g["crop_ratio_min"];
  T.augment.warp_factor_low = g["warp_factor_low"];
  T.augment.warp_factor_high = g["warp_factor_high"];
  T.augment.warp_range_fraction = g["warp_range_fraction"];
  T.augment.seed = g["seed"];
  rc.variant = cfg["variant"];
  rc.output_dir = cfg["output"]["dir"];

  detail::field("variant", [&] { parse_variant(rc.variant); });
  detail::field("model", [&] { rc.model.validate(); });
  detail::field("train", [&] { T.validate(); });
  detail::field("task", [&] { window_count(rc.window.input_len + rc.window.pred_len, rc.window); });
  if (T.adapt.ipm.max_iterations < 1) throw ConfigError("adapt.ipm_max_iterations: must be >= 1");

  rc.canonical = cfg;
  // Where results go is not part of the experiment's identity.
  json identity = cfg;
  identity.erase("output");
  rc.hash = fnv1a_hex(identity.dump());
  return rc;
}

inline RunConfig load_config(const std::string& path, const std::vector<std::string>& overrides,
                             const std::string& variant_override = "") {
  YAML::Node doc;
  if (!path.empty()) {
    if (!fs::exists(path)) throw ConfigError("config file not found: " + path);
    try {
      doc = YAML::LoadFile(path);
    } catch (const YAML::Exception& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }
  return build_config(doc, overrides, variant_override);
}

/// Output directory: the configured one (or runs/<hash>), under
/// $SEDAN_OUTPUT_ROOT when that is set and the path is relative.
inline fs::path output_dir(const RunConfig& rc, const std::string& fallback_name) {
  fs::path dir = rc.output_dir.empty() ? fs::path("runs") / fallback_name : fs::path(rc.output_dir);
  if (const char* root = std::getenv("SEDAN_OUTPUT_ROOT"); root && *root && dir.is_relative()) dir = fs::path(root) / dir;
  fs::create_directories(dir);
  return dir;
}

inline fs::path output_path(const std::string& path) {
  fs::path p(path);
  if (const char* root = std::getenv("SEDAN_OUTPUT_ROOT"); root && *root && p.is_relative()) p = fs::path(root) / p;
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  return p;
}

struct LoadedData {
  DomainData source;
  DomainData target;
  bool has_source = false;
};

inline LoadedData load_data(const RunConfig& rc, bool needs_source) {
  if (rc.target_path.empty()) throw ConfigError("data.target: path is required");
  if (!fs::exists(rc.target_path)) throw ConfigError("data.target: file not found: " + rc.target_path);
  if (needs_source) {
    if (rc.source_path.empty()) throw ConfigError("data.source: path is required by variant " + rc.variant);
    if (!fs::exists(rc.source_path)) throw ConfigError("data.source: file not found: " + rc.source_path);
  }
  LoadedData out;
  out.target = prepare_domain(load_csv(rc.target_path), rc.split, rc.window);
  if (!rc.source_path.empty()) {
    if (!fs::exists(rc.source_path)) throw ConfigError("data.source: file not found: " + rc.source_path);
    out.source = prepare_domain(load_csv(rc.source_path), rc.split, rc.window);
    out.has_source = true;
  } else {
    out.source = out.target;  // only its widths are read
  }
  return out;
}

inline bool needs_source(const RunConfig& rc) {
  const auto spec = parse_variant(rc.variant);
  return spec.two_stage || variant_config(spec, rc.train).use_source;
}

inline void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << j.dump(2) << '\n';
}

/// Runs one variant end to end and writes checkpoint, history and report.
inline int cmd_train(const RunConfig& rc, std::ostream& out) {
  const auto data = load_data(rc, needs_source(rc));
  const auto dir = output_dir(rc, rc.hash);
  const auto spec = parse_variant(rc.variant);
  SedanModel model(model_config_for(data.source, data.target, rc.model));
  std::ofstream log(dir / "history.jsonl");
  const auto run = run_variant(spec, data.source, data.target, rc.model, rc.train, rc.hash, &log, &model);

  CheckpointMeta meta;
  meta.scaler = data.target.scaler;
  meta.window = rc.window;
  meta.split = rc.split;
  meta.freq = data.target.freq;
  meta.decomposition = variant_config(spec, rc.train).decomposition;
  meta.config_hash = rc.hash;
  meta.best_val_mse = run.best_val_mse;
  save_checkpoint((dir / "checkpoint.json").string(), model, meta, CheckpointScope::inference);
  write_json(dir / "config.json", rc.canonical);
  write_json(dir / "metrics.json", to_json(run.report));
  out << "variant=" << rc.variant << " best_val_mse=" << run.best_val_mse << " test_mse=" << run.report.mse
      << " test_mae=" << run.report.mae << " out=" << dir.string() << '\n';
  return kOk;
}

inline const std::vector<WindowSample>& split_windows(const DomainData& d, const std::string& split) {
  if (split == "train") return d.train;
  if (split == "val") return d.val;
  if (split == "test") return d.test;
  throw ConfigError("split: expected train, val or test, got " + split);
}

inline DomainData data_for_checkpoint(const CheckpointBundle& bundle, const std::string& data_path) {
  if (!fs::exists(data_path)) throw ConfigError("data: file not found: " + data_path);
  auto d = prepare_domain(load_csv(data_path), bundle.meta.split, bundle.meta.window, &bundle.meta.scaler);
  if (d.dims() != bundle.model->config().d_in_target) {
    throw std::runtime_error("data has " + std::to_string(d.dims()) + " columns, checkpoint expects " +
                             std::to_string(bundle.model->config().d_in_target));
  }
  return d;
}

inline int cmd_eval(const std::string& checkpoint, const std::string& data_path, const std::string& split,
                    const std::string& report_path, std::ostream& out) {
  auto bundle = load_checkpoint(checkpoint);
  const auto data = data_for_checkpoint(bundle, data_path);
  auto report = report_metrics(*bundle.model, split_windows(data, split), Domain::target, bundle.meta.decomposition);
  report.variant = "checkpoint";
  report.config_hash = bundle.meta.config_hash;
  const fs::path path = report_path.empty() ? fs::path(checkpoint).parent_path() / ("eval_" + split + ".json")
                                            : output_path(report_path);
  write_json(path, to_json(report));
  out << std::setprecision(10) << "split=" << split << " mse=" << report.mse << " mae=" << report.mae << '\n';
  return kOk;
}

inline std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!(item = sedan::detail::trim(item)).empty()) out.push_back(item);
  return out;
}

/// Trains each variant in turn on the same data and writes a comparison table.
inline int cmd_ablate(const RunConfig& rc, const std::vector<std::string>& variants, std::ostream& out) {
  if (variants.empty()) throw ConfigError("variants: at least one variant is required");
  bool source = false;
  for (const auto& v : variants) {
    RunConfig probe = rc;
    probe.variant = v;
    try {
      source = needs_source(probe) || source;
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("variants: ") + e.what());
    }
  }
  const auto data = load_data(rc, source);
  const auto dir = output_dir(rc, "ablate_" + rc.hash);
  json reports = json::array();
  std::ofstream table(dir / "ablation.csv");
  table << "variant,mse,mae\n";
  out << std::left << std::setw(14) << "variant" << std::setw(14) << "mse" << "mae\n";
  for (const auto& v : variants) {
    const auto run = run_variant(parse_variant(v), data.source, data.target, rc.model, rc.train, rc.hash);
    reports.push_back(to_json(run.report));
    table << v << ',' << std::setprecision(10) << run.report.mse << ',' << run.report.mae << '\n';
    out << std::left << std::setw(14) << v << std::setw(14) << std::setprecision(6) << run.report.mse
        << run.report.mae << '\n';
  }
  write_json(dir / "ablation.json", reports);
  write_json(dir / "config.json", rc.canonical);
  return kOk;
}

inline int cmd_export(const std::string& checkpoint, const std::string& data_path, const std::string& split,
                      const std::string& out_path, std::ostream& out) {
  auto bundle = load_checkpoint(checkpoint);
  const auto data = data_for_checkpoint(bundle, data_path);
  const auto path = output_path(out_path);
  std::ofstream file(path);
  if (!file) throw std::runtime_error("cannot write " + path.string());
  const auto rows = export_features(*bundle.model, split_windows(data, split), Domain::target,
                                    bundle.meta.decomposition, file);
  out << "rows=" << rows << " out=" << path.string() << '\n';
  return kOk;
}

inline int cmd_synth(std::uint64_t seed, const std::string& out_dir, std::size_t length, std::ostream& out) {
  SyntheticSpec spec;
  if (length > 0) spec.source_len = spec.target_len = length;
  auto [source, target] = make_synthetic_transfer(seed, spec);
  fs::path dir = out_dir;
  if (const char* root = std::getenv("SEDAN_OUTPUT_ROOT"); root && *root && dir.is_relative()) dir = fs::path(root) / dir;
  fs::create_directories(dir);
  write_csv(source, dir / "source.csv");
  write_csv(target, dir / "target.csv");
  out << "wrote " << (dir / "source.csv").string() << ' ' << (dir / "target.csv").string() << '\n';
  return kOk;
}

/// Maps exceptions to exit codes; config problems are 1, everything else 2.
template <class Fn>
int guarded(Fn&& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
}

}  // namespace sedan::cli
