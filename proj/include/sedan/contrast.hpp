#pragma once

// Contrastive supervision for the decomposition generators: sequence
// summarization, infoNCE, memory banks with online prototype update, and the
// KL reconstruction term.

#include "sedan/augment.hpp"
#include "sedan/network.hpp"
#include "sedan/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>
#include <vector>

namespace sedan {

struct ContrastConfig {
  double tau = 0.07;
  std::size_t k_negatives = 64;
  std::size_t bank_capacity = 256;
  double beta = 0.5;

  void validate() const {
    if (!(tau > 0.0)) throw std::invalid_argument("contrast.tau must be > 0");
    if (k_negatives == 0 || k_negatives > bank_capacity) {
      throw std::invalid_argument("contrast.k_negatives must be in [1, bank_capacity]");
    }
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("contrast.beta must lie in [0, 1]");
  }
};

inline constexpr double kUnitNormTolerance = 1e-6;

/// Mean over time, then L2-normalized.
inline Eigen::VectorXd summarize(const Eigen::MatrixXd& features) {
  if (features.rows() == 0) throw std::invalid_argument("summarize: empty sequence");
  Eigen::VectorXd v = features.colwise().mean().transpose();
  const double n = v.norm();
  if (!(n > 0.0)) throw std::domain_error("summarize: zero summary has no direction");
  return v / n;
}

/// [B, T, D] -> [B, D] unit rows.
inline Tensor summarize(const Tensor& features) { return l2_normalize(mean_axis(features, 1)); }

inline double info_nce(const Eigen::VectorXd& query, const Eigen::VectorXd& positive, const Eigen::MatrixXd& negatives,
                       double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: tau must be > 0");
  const double pos = query.dot(positive) / tau;
  Eigen::VectorXd neg = negatives * query / tau;
  if (neg.size() == 0) return 0.0;
  const double mx = neg.maxCoeff();
  // log1p keeps tiny losses of well-separated positives representable.
  if (pos >= mx) return std::log1p((neg.array() - pos).exp().sum());
  return mx - pos + std::log(std::exp(pos - mx) + (neg.array() - mx).exp().sum());
}

/// Batch-mean infoNCE: queries[B, d] (differentiable), positives[B, d],
/// negatives[k, d] shared across the batch.
inline Tensor info_nce(const Tensor& queries, const Tensor& positives, const Tensor& negatives, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("info_nce: tau must be > 0");
  detail::require_same_shape(queries, positives, "info_nce");
  const std::size_t B = queries.dim(0), d = queries.dim(1);
  auto pos = reshape(bmm(reshape(queries, {B, 1, d}), reshape(positives, {B, d, 1})), {B, 1});
  auto neg = matmul_nt(queries, negatives);
  auto logits = scale(concat({pos, neg}, 1), 1.0 / tau);
  return scale(mean(slice(log_softmax(logits), 1, 0, 1)), -1.0);
}

/// Fixed-capacity queue of unit-norm keys. Plain FIFO until full; after that
/// every displaced key is fused into its most similar surviving prototype.
class MemoryBank {
 public:
  MemoryBank(std::size_t capacity, std::size_t dim)
      : keys_(Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(capacity), static_cast<Eigen::Index>(dim))) {
    if (capacity == 0 || dim == 0) throw std::invalid_argument("memory bank needs positive capacity and width");
  }

  std::size_t capacity() const { return static_cast<std::size_t>(keys_.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(keys_.cols()); }
  std::size_t filled() const { return filled_; }
  std::size_t cursor() const { return cursor_; }
  bool full() const { return filled_ == capacity(); }
  const Eigen::MatrixXd& keys() const { return keys_; }

  /// Enqueues each row of `new_keys` (unit norm) with prototype fusion ratio `beta`.
  void enqueue(const Eigen::MatrixXd& new_keys, double beta) {
    if (static_cast<std::size_t>(new_keys.cols()) != dim()) throw std::invalid_argument("key width mismatch");
    if (beta < 0.0 || beta > 1.0) throw std::invalid_argument("beta must lie in [0, 1]");
    for (Eigen::Index r = 0; r < new_keys.rows(); ++r) {
      if (std::abs(new_keys.row(r).norm() - 1.0) > kUnitNormTolerance) {
        throw std::invalid_argument("memory bank keys must have unit norm");
      }
    }
    for (Eigen::Index r = 0; r < new_keys.rows(); ++r) {
      const auto slot = static_cast<Eigen::Index>(cursor_);
      if (full() && capacity() > 1) fuse_displaced(slot, beta);
      keys_.row(slot) = new_keys.row(r);
      filled_ = std::min(filled_ + 1, capacity());
      cursor_ = (cursor_ + 1) % capacity();
    }
  }

  /// Reinstates a saved queue state verbatim.
  void restore(const Eigen::MatrixXd& keys, std::size_t filled, std::size_t cursor) {
    if (keys.rows() != keys_.rows() || keys.cols() != keys_.cols() || filled > capacity() || cursor >= capacity()) {
      throw std::invalid_argument("memory bank restore: inconsistent state");
    }
    keys_ = keys;
    filled_ = filled;
    cursor_ = cursor;
  }

  /// k distinct valid keys, uniformly without replacement.
  Eigen::MatrixXd sample_negatives(std::size_t k, std::mt19937_64& rng) const {
    if (k > filled_) {
      throw std::runtime_error("memory bank holds " + std::to_string(filled_) + " keys, cannot sample " +
                               std::to_string(k) + " negatives");
    }
    std::vector<std::size_t> idx(filled_);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Eigen::MatrixXd out(static_cast<Eigen::Index>(k), keys_.cols());
    for (std::size_t i = 0; i < k; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, filled_ - 1);
      std::swap(idx[i], idx[pick(rng)]);
      out.row(static_cast<Eigen::Index>(i)) = keys_.row(static_cast<Eigen::Index>(idx[i]));
    }
    return out;
  }

 private:
  void fuse_displaced(Eigen::Index slot, double beta) {
    const Eigen::VectorXd displaced = keys_.row(slot).transpose();
    Eigen::VectorXd similarity = keys_ * displaced;
    similarity(slot) = -std::numeric_limits<double>::infinity();
    Eigen::Index proto = 0;
    similarity.maxCoeff(&proto);
    Eigen::VectorXd fused = (1.0 - beta) * keys_.row(proto).transpose() + beta * displaced;
    const double n = fused.norm();
    if (n > 0.0) keys_.row(proto) = (fused / n).transpose();
  }

  Eigen::MatrixXd keys_;
  std::size_t filled_ = 0;
  std::size_t cursor_ = 0;
};

struct ContrastTerm {
  Tensor loss;
  Eigen::MatrixXd keys;  // momentum keys [B, d] to enqueue after the step
};

using PlanFactory = AugmentPlan (*)(std::size_t, std::size_t, const AugmentParams&, std::mt19937_64&,
                                    std::optional<unsigned>);

namespace detail {
inline Tensor augment_batch(const Tensor& h, PlanFactory make_plan, const AugmentParams& params,
                            std::mt19937_64& rng) {
  const std::size_t B = h.dim(0), T = h.dim(1), D = h.dim(2);
  std::vector<Tensor> views;
  views.reserve(B);
  for (std::size_t b = 0; b < B; ++b) views.push_back(make_plan(T, D, params, rng, std::nullopt).apply(select(h, b)));
  return stack(views);
}
}  // namespace detail

/// Keys from the momentum generator on an independent augmentation draw.
template <class Generator>
Eigen::MatrixXd momentum_keys(const Tensor& h, const Generator& momentum, PlanFactory make_plan,
                              const AugmentParams& params, std::mt19937_64& rng) {
  NoGradGuard no_grad;
  return summarize(momentum(detail::augment_batch(h.detach(), make_plan, params, rng))).to_matrix();
}

/// infoNCE between online-generator queries and momentum-generator keys of
/// independently augmented copies of h[B, T, D], with negatives from `bank`.
/// Keys carry no gradient; `frozen_keys` substitutes previously drawn keys
/// (the random stream is consumed identically either way).
template <class Generator>
ContrastTerm contrast_loss(const Tensor& h, const Generator& online, const Generator& momentum, const MemoryBank& bank,
                           PlanFactory make_plan, const AugmentParams& params, const ContrastConfig& cfg,
                           std::mt19937_64& rng, const Eigen::MatrixXd* frozen_keys = nullptr) {
  cfg.validate();
  if (bank.filled() < cfg.k_negatives) throw std::runtime_error("memory bank is not warm yet");
  auto queries = summarize(online(detail::augment_batch(h, make_plan, params, rng)));
  Eigen::MatrixXd keys = momentum_keys(h, momentum, make_plan, params, rng);
  if (frozen_keys) {
    if (frozen_keys->rows() != keys.rows() || frozen_keys->cols() != keys.cols()) {
      throw std::invalid_argument("contrast_loss: frozen keys have the wrong shape");
    }
    keys = *frozen_keys;
  }
  Eigen::MatrixXd negatives = bank.sample_negatives(cfg.k_negatives, rng);
  return {info_nce(queries, Tensor::from_matrix(keys), Tensor::from_matrix(negatives), cfg.tau), std::move(keys)};
}

inline ContrastTerm seasonal_contrast_loss(const Tensor& h, const SeasonalGenerator& sdg,
                                           const SeasonalGenerator& momentum_sdg, const MemoryBank& bank,
                                           const AugmentParams& params, const ContrastConfig& cfg,
                                           std::mt19937_64& rng, const Eigen::MatrixXd* frozen_keys = nullptr) {
  return contrast_loss(h, sdg, momentum_sdg, bank, &seasonal_plan, params, cfg, rng, frozen_keys);
}

inline ContrastTerm trend_contrast_loss(const Tensor& h, const TrendGenerator& tdg, const TrendGenerator& momentum_tdg,
                                        const MemoryBank& bank, const AugmentParams& params, const ContrastConfig& cfg,
                                        std::mt19937_64& rng, const Eigen::MatrixXd* frozen_keys = nullptr) {
  return contrast_loss(h, tdg, momentum_tdg, bank, &trend_plan, params, cfg, rng, frozen_keys);
}

/// Mean over batch and time of KL(softmax(H) || softmax(H~)), softmax over
/// the feature axis.
inline Tensor kl_reconstruction(const Tensor& h, const Tensor& reconstructed) {
  detail::require_same_shape(h, reconstructed, "kl_reconstruction");
  auto log_p = log_softmax(h);
  auto log_q = log_softmax(reconstructed);
  auto p = exp(log_p);
  const double rows = static_cast<double>(h.size() / h.shape().back());
  return scale(sum(mul(p, sub(log_p, log_q))), 1.0 / rows);
}

/// Seasonal contrast + trend contrast + reconstruction KL for one domain.
inline Tensor decomposition_loss(const Tensor& seasonal_term, const Tensor& trend_term, const Tensor& kl_term) {
  return add(add(seasonal_term, trend_term), kl_term);
}

}  // namespace sedan
