#pragma once

// Variant grid, explicit decomposition baseline, evaluation reports,
// synthetic transfer data and feature export.

#include "sedan/adapt.hpp"
#include "sedan/dataio.hpp"
#include "sedan/network.hpp"
#include "sedan/train.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <random>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sedan {

inline const std::array<const char*, 9> kVariantNames = {"sedan",    "vanilla", "finetune",    "dan",       "jan",
                                                         "all_jmmd", "all_ola", "contra2ours", "conv_minus"};

struct VariantSpec {
  std::string name;
  bool two_stage = false;  // source pretraining, then target training
};

inline VariantSpec parse_variant(const std::string& name) {
  for (const char* v : kVariantNames)
    if (name == v) return {name, name == "finetune"};
  throw std::invalid_argument("unknown variant: " + name);
}

/// The training configuration a variant runs with, derived from `base`.
inline TrainConfig variant_config(const VariantSpec& spec, TrainConfig base) {
  const std::string& n = spec.name;
  if (n == "sedan") return base;
  if (n == "vanilla" || n == "finetune") {
    base.lambda = 0.0;
    base.gamma = 0.0;
    base.use_source = false;
  } else if (n == "dan" || n == "jan") {
    base.lambda = 0.0;
    base.decomposition = Decomposition::none;
    base.adapt_features = AdaptFeatures::encoded;
    base.adapt.seasonal_metric = n == "dan" ? MetricKind::mk_mmd : MetricKind::jmmd;
  } else if (n == "all_jmmd") {
    base.adapt.seasonal_metric = MetricKind::jmmd;
    base.adapt.trend_metric = MetricKind::jmmd;
  } else if (n == "all_ola") {
    base.adapt.seasonal_metric = MetricKind::ola;
    base.adapt.trend_metric = MetricKind::ola;
  } else if (n == "contra2ours") {
    base.adapt.seasonal_metric = MetricKind::ola;
    base.adapt.trend_metric = MetricKind::jmmd;
  } else if (n == "conv_minus") {
    base.decomposition = Decomposition::explicit_sum;
    base.contrastive_terms = false;
  } else {
    throw std::invalid_argument("unknown variant: " + n);
  }
  return base;
}

struct MetricsReport {
  std::string variant;
  std::uint64_t seed = 0;
  std::string config_hash;
  double mse = 0.0;
  double mae = 0.0;
  std::vector<double> horizon_mse;
  std::vector<double> horizon_mae;
};

inline nlohmann::json to_json(const MetricsReport& r) {
  return {{"variant", r.variant},         {"seed", r.seed},
          {"config_hash", r.config_hash}, {"mse", r.mse},
          {"mae", r.mae},                 {"horizon_mse", r.horizon_mse},
          {"horizon_mae", r.horizon_mae}};
}

/// Overall and per-horizon-step errors of the model on `windows`.
inline MetricsReport report_metrics(SedanModel& model, const std::vector<WindowSample>& windows, Domain domain,
                                    Decomposition mode) {
  const auto forecasts = predict(model, windows, domain, mode);
  const auto L = static_cast<std::size_t>(windows.front().target.rows());
  const auto d = static_cast<std::size_t>(windows.front().target.cols());
  MetricsReport r;
  r.horizon_mse.assign(L, 0.0);
  r.horizon_mae.assign(L, 0.0);
  std::size_t w = 0;
  for (const auto& f : forecasts) {
    for (std::size_t b = 0; b < f.dim(0); ++b, ++w) {
      for (std::size_t t = 0; t < L; ++t)
        for (std::size_t c = 0; c < d; ++c) {
          const double e = f.at((b * L + t) * d + c) -
                           windows[w].target(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c));
          r.horizon_mse[t] += e * e;
          r.horizon_mae[t] += std::abs(e);
        }
    }
  }
  const double per_step = static_cast<double>(windows.size() * d);
  for (std::size_t t = 0; t < L; ++t) {
    r.horizon_mse[t] /= per_step;
    r.horizon_mae[t] /= per_step;
    r.mse += r.horizon_mse[t] / static_cast<double>(L);
    r.mae += r.horizon_mae[t] / static_cast<double>(L);
  }
  return r;
}

/// Sets the per-domain widths of `base` from the prepared data.
inline ModelConfig model_config_for(const DomainData& source, const DomainData& target, ModelConfig base) {
  base.d_in_source = base.d_out_source = source.dims();
  base.d_time_source = source.time_dims();
  base.d_in_target = base.d_out_target = target.dims();
  base.d_time_target = target.time_dims();
  return base;
}

struct VariantRun {
  MetricsReport report;
  std::vector<EpochRecord> history;
  std::vector<LossBreakdown> steps;
  double best_val_mse = 0.0;
};

/// Trains the named variant and evaluates it on the target test split.
inline VariantRun run_variant(const VariantSpec& spec, const DomainData& source, const DomainData& target,
                              const ModelConfig& model_cfg, const TrainConfig& base, const std::string& config_hash = "",
                              std::ostream* log = nullptr, SedanModel* trained = nullptr) {
  const TrainConfig cfg = variant_config(spec, base);
  std::unique_ptr<SedanModel> owned;
  if (!trained) {
    owned = std::make_unique<SedanModel>(model_config_for(source, target, model_cfg));
    trained = owned.get();
  }
  SedanModel& model = *trained;
  VariantRun run;
  if (spec.two_stage) {
    auto pre = fit(model, nullptr, source, cfg, log, Domain::source);
    run.steps = pre.steps;
    model.reinitialize_domain(Domain::target, model.config().init_seed + 1);
  }
  auto result = fit(model, cfg.use_source ? &source : nullptr, target, cfg, log);
  run.history = result.history;
  run.steps.insert(run.steps.end(), result.steps.begin(), result.steps.end());
  run.best_val_mse = result.best_val_mse;
  run.report = report_metrics(model, target.test, Domain::target, cfg.decomposition);
  run.report.variant = spec.name;
  run.report.seed = cfg.seed;
  run.report.config_hash = config_hash;
  return run;
}

/// Fixed moving-average trend and its residual; seasonal + trend == H.
inline std::pair<Tensor, Tensor> conv_minus_decompose(const Tensor& h, std::size_t kernel, std::size_t pool) {
  auto trend = moving_average_trend(h, kernel, pool);
  return {sub(h, trend), trend};
}

struct SyntheticSpec {
  std::size_t source_len = 2000;
  std::size_t target_len = 2000;
  std::size_t source_dims = 3;
  std::size_t target_dims = 2;
  double period = 24.0;
  double source_slope = 1e-3;
  double target_slope = -4e-4;
  double noise = 0.1;
};

/// Shared-period sinusoids with domain-specific slopes, phase and width.
inline std::pair<RawSeries, RawSeries> make_synthetic_transfer(std::uint64_t seed, const SyntheticSpec& spec = {}) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> phase_dist(0.0, 2.0 * M_PI);
  std::normal_distribution<double> noise(0.0, spec.noise);
  const double target_phase = phase_dist(rng);
  const Timestamp start = std::chrono::sys_days{std::chrono::year{2020} / 1 / 1};

  auto build = [&](const std::string& name, std::size_t len, std::size_t dims, double slope, double phase) {
    RawSeries s;
    s.name = name;
    s.freq = Frequency::hourly;
    s.values.resize(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(dims));
    for (std::size_t c = 0; c < dims; ++c) s.columns.push_back(name + "_" + std::to_string(c));
    for (std::size_t t = 0; t < len; ++t) {
      s.timestamps.push_back(start + std::chrono::hours(t));
      for (std::size_t c = 0; c < dims; ++c) {
        const double x = static_cast<double>(t);
        s.values(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(c)) =
            std::sin(2.0 * M_PI * x / spec.period + phase + 0.5 * static_cast<double>(c)) + slope * x + noise(rng);
      }
    }
    return s;
  };
  auto source = build("source", spec.source_len, spec.source_dims, spec.source_slope, 0.0);
  auto target = build("target", spec.target_len, spec.target_dims, spec.target_slope, target_phase);
  return {std::move(source), std::move(target)};
}

/// Writes one row per window: domain label, then summarized seasonal, trend
/// and reconstructed features (3 * d_model columns).
inline std::size_t export_features(SedanModel& model, const std::vector<WindowSample>& windows, Domain domain,
                                   Decomposition mode, std::ostream& out, bool header = true) {
  const std::size_t D = model.config().d_model;
  if (header) {
    out << "domain";
    for (const char* part : {"sea", "tre", "rec"})
      for (std::size_t i = 0; i < D; ++i) out << ',' << part << '_' << i;
    out << '\n';
  }
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  char buf[32];
  for (std::size_t w = 0; w < windows.size(); ++w) {
    auto batch = make_batch(windows, {w});
    auto pass = model.forward(batch, domain, mode);
    const Tensor& sea = pass.seasonal.defined() ? pass.seasonal : pass.encoded;
    const Tensor& tre = pass.trend.defined() ? pass.trend : pass.encoded;
    out << to_string(domain);
    for (const Tensor* part : std::array<const Tensor*, 3>{&sea, &tre, &pass.reconstructed}) {
      const auto v = summarize(reshape(*part, {part->dim(1), D}).to_matrix());
      for (Eigen::Index i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%.10g", v(i));
        out << ',' << buf;
      }
    }
    out << '\n';
  }
  model.set_training(was_training);
  return windows.size();
}

}  // namespace sedan
