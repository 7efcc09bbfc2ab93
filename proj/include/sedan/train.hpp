#pragma once

// Joint source/target optimization of
//   L = L_mse + lambda * L_dec + gamma * L_adapt
// with momentum generators, memory banks, lr decay and early stopping.

#include "sedan/adapt.hpp"
#include "sedan/augment.hpp"
#include "sedan/contrast.hpp"
#include "sedan/dataio.hpp"
#include "sedan/network.hpp"
#include "sedan/nn.hpp"

#include <json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedan {

/// Which features the adaptation metrics compare.
enum class AdaptFeatures {
  decomposed,  // seasonal metric on (Hs_sea, Ht_sea) + trend metric on (Hs_tre, Ht_tre)
  encoded,     // seasonal metric alone on (Hs, Ht)
};

struct TrainConfig {
  double lambda = 0.1;
  double gamma = 0.1;
  double lr = 1e-4;
  double lr_decay = 0.5;
  std::size_t decay_after = 2;
  std::size_t epochs = 20;
  std::size_t patience = 3;
  std::size_t batch_size = 32;
  std::size_t steps_per_epoch = 0;  // 0 = one pass over the larger domain; else exactly this many
  std::uint64_t seed = 2024;
  bool use_source = true;
  Decomposition decomposition = Decomposition::contrastive;
  bool contrastive_terms = true;  // false keeps only the KL part of L_dec
  AdaptFeatures adapt_features = AdaptFeatures::decomposed;
  bool force_adapt_graph = false;  // build the adaptation graph even when gamma == 0
  AdaptConfig adapt;
  ContrastConfig contrast;
  AugmentParams augment;

  void validate() const {
    if (!(lambda >= 0.0)) throw std::invalid_argument("train.lambda must be >= 0");
    if (!(gamma >= 0.0)) throw std::invalid_argument("train.gamma must be >= 0");
    if (!(lr > 0.0)) throw std::invalid_argument("train.lr must be > 0");
    if (!(lr_decay > 0.0 && lr_decay <= 1.0)) throw std::invalid_argument("train.lr_decay must lie in (0, 1]");
    if (epochs < 1) throw std::invalid_argument("train.epochs must be >= 1");
    if (patience < 1) throw std::invalid_argument("train.patience must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("train.batch_size must be >= 1");
    adapt.validate();
    contrast.validate();
    augment.validate();
  }

  bool uses_contrast() const {
    return lambda > 0.0 && contrastive_terms && decomposition == Decomposition::contrastive;
  }
  bool uses_adaptation() const { return use_source && (gamma > 0.0 || force_adapt_graph); }
};

enum class Component { seasonal = 0, trend = 1 };

inline std::size_t bank_index(Domain d, Component c) {
  return 2 * static_cast<std::size_t>(d) + static_cast<std::size_t>(c);
}

struct LossBreakdown {
  double mse_source = 0.0;
  double mse_target = 0.0;
  double dec = 0.0;
  double adapt = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  bool warm = false;

  double mse() const { return mse_source + mse_target; }
};

struct TrainState {
  Rng rng;
  std::vector<MemoryBank> banks;  // indexed by bank_index
  std::size_t steps = 0;

  TrainState(const ModelConfig& model, const TrainConfig& cfg) : rng(cfg.seed) {
    for (int i = 0; i < 4; ++i) banks.emplace_back(cfg.contrast.bank_capacity, model.d_model);
  }
};

/// Scalar form: NaN components are reported by name.
inline double total_loss(double mse, double dec, double adapt, double lambda, double gamma) {
  if (!std::isfinite(mse)) throw std::domain_error("non-finite loss component: L_mse");
  if (!std::isfinite(dec)) throw std::domain_error("non-finite loss component: L_dec");
  if (!std::isfinite(adapt)) throw std::domain_error("non-finite loss component: L_adapt");
  return mse + lambda * dec + gamma * adapt;
}

using KeySet = std::array<std::optional<Eigen::MatrixXd>, 4>;  // indexed by bank_index

struct StepLosses {
  Tensor total;
  LossBreakdown parts;
  KeySet pending_keys;
};

namespace detail {

inline void require_finite(const Tensor& t, const char* name) {
  if (!std::isfinite(t.item())) throw std::domain_error(std::string("non-finite loss component: ") + name);
}

inline Tensor accumulate(const Tensor& sum, const Tensor& term) { return sum.defined() ? add(sum, term) : term; }

inline bool banks_warm(const TrainState& state, const TrainConfig& cfg, Domain target_role) {
  if (!cfg.uses_contrast()) return true;
  std::vector<Domain> domains{target_role};
  if (cfg.use_source) domains.push_back(Domain::source);
  for (Domain d : domains)
    for (Component c : {Component::seasonal, Component::trend})
      if (!state.banks[bank_index(d, c)].full()) return false;
  return true;
}

}  // namespace detail

/// Builds the loss graph for one step. `source` may be null when the source
/// domain is unused; `target_role` selects the embedding/head of the target batch.
/// `frozen_keys` replays the momentum keys of an earlier evaluation, which
/// makes the loss a plain function of the online parameters.
inline StepLosses compute_losses(const SedanModel& model, const TrainState& state, const Batch* source,
                                 const Batch& target, const TrainConfig& cfg, Rng& rng,
                                 Domain target_role = Domain::target, const KeySet* frozen_keys = nullptr) {
  if (cfg.use_source && !source) throw std::invalid_argument("compute_losses: source batch required");
  if (cfg.use_source && target_role == Domain::source) {
    throw std::invalid_argument("compute_losses: source data cannot play both roles");
  }
  StepLosses out;
  out.parts.warm = detail::banks_warm(state, cfg, target_role);
  Rng* drop_rng = model.training() ? &rng : nullptr;

  struct Side {
    Domain domain;
    ForwardPass pass;
  };
  std::vector<Side> sides;
  if (cfg.use_source) sides.push_back({Domain::source, model.forward(*source, Domain::source, cfg.decomposition, drop_rng)});
  sides.push_back({target_role, model.forward(target, target_role, cfg.decomposition, drop_rng)});

  Tensor mse;
  for (const auto& side : sides) {
    const Batch& b = side.domain == target_role ? target : *source;
    auto term = mse_loss(side.pass.forecast, b.target);
    (side.domain == target_role ? out.parts.mse_target : out.parts.mse_source) = term.item();
    mse = detail::accumulate(mse, term);
  }
  detail::require_finite(mse, "L_mse");

  Tensor dec;
  if (cfg.lambda > 0.0 && cfg.decomposition != Decomposition::none) {
    for (const auto& side : sides) {
      const auto& h = side.pass.encoded;
      dec = detail::accumulate(dec, kl_reconstruction(h, side.pass.reconstructed));
      if (!cfg.uses_contrast()) continue;
      const auto si = bank_index(side.domain, Component::seasonal);
      const auto ti = bank_index(side.domain, Component::trend);
      if (out.parts.warm) {
        auto frozen = [&](std::size_t i) -> const Eigen::MatrixXd* {
          return frozen_keys && (*frozen_keys)[i] ? &*(*frozen_keys)[i] : nullptr;
        };
        auto sea = seasonal_contrast_loss(h, model.seasonal_generator(), model.seasonal_generator_momentum(),
                                          state.banks[si], cfg.augment, cfg.contrast, rng, frozen(si));
        auto tre = trend_contrast_loss(h, model.trend_generator(), model.trend_generator_momentum(), state.banks[ti],
                                       cfg.augment, cfg.contrast, rng, frozen(ti));
        dec = add(dec, add(sea.loss, tre.loss));
        out.pending_keys[si] = std::move(sea.keys);
        out.pending_keys[ti] = std::move(tre.keys);
      } else {
        out.pending_keys[si] =
            momentum_keys(h, model.seasonal_generator_momentum(), &seasonal_plan, cfg.augment, rng);
        out.pending_keys[ti] = momentum_keys(h, model.trend_generator_momentum(), &trend_plan, cfg.augment, rng);
      }
    }
    detail::require_finite(dec, "L_dec");
    out.parts.dec = dec.item();
  }

  Tensor adapt;
  if (cfg.uses_adaptation() && out.parts.warm) {
    const auto& s = sides.front().pass;
    const auto& t = sides.back().pass;
    const std::size_t pairs = std::min(source->size(), target.size());
    for (std::size_t b = 0; b < pairs; ++b) {
      Tensor term;
      if (cfg.adapt_features == AdaptFeatures::encoded || cfg.decomposition == Decomposition::none) {
        term = apply_metric(cfg.adapt.seasonal_metric, select(s.encoded, b), select(t.encoded, b), cfg.adapt);
      } else {
        term = adaptation_loss(select(s.seasonal, b), select(t.seasonal, b), select(s.trend, b), select(t.trend, b),
                               cfg.adapt);
      }
      adapt = detail::accumulate(adapt, term);
    }
    adapt = scale(adapt, 1.0 / static_cast<double>(pairs));
    detail::require_finite(adapt, "L_adapt");
    out.parts.adapt = adapt.item();
  }

  // Zero-weighted terms stay out of the graph entirely.
  out.total = mse;
  if (dec.defined()) out.total = add(out.total, scale(dec, cfg.lambda));
  if (adapt.defined()) out.total = add(out.total, scale(adapt, cfg.gamma));
  out.parts.total = out.total.item();
  return out;
}

/// One optimizer step followed by the momentum update and bank enqueue.
inline LossBreakdown train_step(SedanModel& model, Adam& optimizer, TrainState& state, const Batch* source,
                                const Batch& target, const TrainConfig& cfg, double lr,
                                Domain target_role = Domain::target) {
  model.parameters().zero_grad();
  auto losses = compute_losses(model, state, source, target, cfg, state.rng, target_role);
  losses.total.backward();
  double g2 = 0.0;
  for (const auto& [name, p] : model.parameters().entries())
    for (double g : p.grad()) g2 += g * g;
  losses.parts.grad_norm = std::sqrt(g2);
  optimizer.step(lr);
  model.momentum_update();
  for (std::size_t i = 0; i < losses.pending_keys.size(); ++i) {
    if (losses.pending_keys[i]) state.banks[i].enqueue(*losses.pending_keys[i], cfg.contrast.beta);
  }
  ++state.steps;
  return losses.parts;
}

struct PointMetrics {
  double mse = 0.0;
  double mae = 0.0;
};

inline PointMetrics point_metrics(const Eigen::MatrixXd& prediction, const Eigen::MatrixXd& truth) {
  if (prediction.rows() != truth.rows() || prediction.cols() != truth.cols()) {
    throw std::invalid_argument("point_metrics: shape mismatch");
  }
  if (prediction.size() == 0) throw std::invalid_argument("point_metrics: empty input");
  const auto diff = (prediction - truth).array();
  return {diff.square().mean(), diff.abs().mean()};
}

inline PointMetrics point_metrics(const Tensor& prediction, const Tensor& truth) {
  if (prediction.shape() != truth.shape()) throw std::invalid_argument("point_metrics: shape mismatch");
  const Eigen::Map<const Eigen::VectorXd> p(prediction.values().data(), static_cast<Eigen::Index>(prediction.size()));
  const Eigen::Map<const Eigen::VectorXd> t(truth.values().data(), static_cast<Eigen::Index>(truth.size()));
  return point_metrics(Eigen::MatrixXd(p), Eigen::MatrixXd(t));
}

/// Forecasts for every window, in order, in eval mode.
inline std::vector<Tensor> predict(SedanModel& model, const std::vector<WindowSample>& windows, Domain domain,
                                   Decomposition mode, std::size_t batch_size = 64) {
  if (windows.empty()) throw std::invalid_argument("predict: no windows");
  const bool was_training = model.training();
  model.set_training(false);
  NoGradGuard no_grad;
  std::vector<Tensor> out;
  for (std::size_t start = 0; start < windows.size(); start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, windows.size() - start));
    std::iota(idx.begin(), idx.end(), start);
    out.push_back(model.forward(make_batch(windows, idx), domain, mode).forecast);
  }
  model.set_training(was_training);
  return out;
}

/// MSE/MAE over all windows, in standardized units.
inline PointMetrics evaluate(SedanModel& model, const std::vector<WindowSample>& windows, Domain domain,
                             Decomposition mode, std::size_t batch_size = 64) {
  const auto forecasts = predict(model, windows, domain, mode, batch_size);
  double se = 0.0, ae = 0.0;
  std::size_t count = 0, w = 0;
  for (const auto& f : forecasts) {
    const std::size_t per = f.size() / f.dim(0);
    for (std::size_t b = 0; b < f.dim(0); ++b, ++w) {
      const auto& truth = windows[w].target;
      for (std::size_t i = 0; i < per; ++i) {
        const double d = f.values()[b * per + i] - truth(static_cast<Eigen::Index>(i / truth.cols()),
                                                         static_cast<Eigen::Index>(i % truth.cols()));
        se += d * d;
        ae += std::abs(d);
      }
      count += per;
    }
  }
  return {se / static_cast<double>(count), ae / static_cast<double>(count)};
}

struct EpochRecord {
  std::size_t epoch = 0;
  double l_mse = 0.0;
  double l_dec = 0.0;
  double l_adapt = 0.0;
  double val_mse = 0.0;
  double val_mae = 0.0;
  double lr = 0.0;
};

inline nlohmann::json to_json(const EpochRecord& r) {
  return {{"epoch", r.epoch}, {"l_mse", r.l_mse},     {"l_dec", r.l_dec}, {"l_adapt", r.l_adapt},
          {"val_mse", r.val_mse}, {"val_mae", r.val_mae}, {"lr", r.lr}};
}

struct FitResult {
  std::vector<EpochRecord> history;
  std::vector<LossBreakdown> steps;
  double best_val_mse = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;
  TrainState state;
};

inline double epoch_learning_rate(const TrainConfig& cfg, std::size_t epoch) {
  const std::size_t decays = epoch > cfg.decay_after ? epoch - cfg.decay_after : 0;
  return cfg.lr * std::pow(cfg.lr_decay, static_cast<double>(decays));
}

namespace detail {

/// Endless reshuffled stream of window indices.
class IndexCycle {
 public:
  explicit IndexCycle(std::size_t n) : order_(n) { std::iota(order_.begin(), order_.end(), std::size_t{0}); }

  std::vector<std::size_t> next(std::size_t count, Rng& rng) {
    std::vector<std::size_t> out;
    out.reserve(count);
    while (out.size() < count) {
      if (pos_ == 0) std::shuffle(order_.begin(), order_.end(), rng);
      out.push_back(order_[pos_]);
      pos_ = (pos_ + 1) % order_.size();
    }
    return out;
  }

 private:
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

}  // namespace detail

/// Trains on interleaved source/target batches, validates on the target
/// validation split after every epoch and restores the best parameters.
inline FitResult fit(SedanModel& model, const DomainData* source, const DomainData& target, const TrainConfig& cfg,
                     std::ostream* log = nullptr, Domain target_role = Domain::target) {
  cfg.validate();
  if (target.train.empty() || target.val.empty()) throw std::invalid_argument("fit: target data has no train/val windows");
  if (cfg.use_source && (!source || source->train.empty())) throw std::invalid_argument("fit: source data is empty");

  FitResult result{{}, {}, std::numeric_limits<double>::infinity(), 0, TrainState(model.config(), cfg)};
  TrainState& state = result.state;
  Adam optimizer(model.parameters());
  model.set_training(true);

  const std::size_t bt = std::min(cfg.batch_size, target.train.size());
  const std::size_t bs = cfg.use_source ? std::min(cfg.batch_size, source->train.size()) : 0;
  std::size_t steps = (target.train.size() + bt - 1) / bt;
  if (cfg.use_source) steps = std::max(steps, (source->train.size() + bs - 1) / bs);
  if (cfg.steps_per_epoch > 0) steps = cfg.steps_per_epoch;

  detail::IndexCycle target_cycle(target.train.size());
  std::optional<detail::IndexCycle> source_cycle;
  if (cfg.use_source) source_cycle.emplace(source->train.size());

  auto best_params = model.parameters().snapshot();
  auto best_momentum = model.momentum_parameters().snapshot();
  std::size_t since_best = 0;

  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const double lr = epoch_learning_rate(cfg, epoch);
    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = lr;
    for (std::size_t s = 0; s < steps; ++s) {
      std::optional<Batch> sb;
      if (cfg.use_source) sb = make_batch(source->train, source_cycle->next(bs, state.rng));
      const Batch tb = make_batch(target.train, target_cycle.next(bt, state.rng));
      const auto parts = train_step(model, optimizer, state, sb ? &*sb : nullptr, tb, cfg, lr, target_role);
      rec.l_mse += parts.mse() / static_cast<double>(steps);
      rec.l_dec += parts.dec / static_cast<double>(steps);
      rec.l_adapt += parts.adapt / static_cast<double>(steps);
      result.steps.push_back(parts);
    }
    const auto val = evaluate(model, target.val, target_role, cfg.decomposition);
    model.set_training(true);
    rec.val_mse = val.mse;
    rec.val_mae = val.mae;
    result.history.push_back(rec);
    if (log) *log << to_json(rec).dump() << '\n';

    if (val.mse < result.best_val_mse) {
      result.best_val_mse = val.mse;
      result.best_epoch = epoch;
      best_params = model.parameters().snapshot();
      best_momentum = model.momentum_parameters().snapshot();
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  model.parameters().restore(best_params);
  model.momentum_parameters().restore(best_momentum);
  model.set_training(false);
  return result;
}

}  // namespace sedan
