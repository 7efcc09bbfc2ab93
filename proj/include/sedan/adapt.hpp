#pragma once

// Domain adaptation metrics over subsequence sets: Gaussian-kernel MMD,
// joint MMD over consecutive subsequence pairs, MK-MMD, and the trend metric
// built on the differentiable matching layer.

#include "sedan/matching.hpp"
#include "sedan/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedan {

enum class BandwidthPolicy { median, fixed };

struct KernelConfig {
  BandwidthPolicy policy = BandwidthPolicy::median;
  double sigma = 1.0;
  // MK-MMD bandwidths, as multiples of the base bandwidth.
  std::vector<double> mk_sigmas = {0.25, 0.5, 1.0, 2.0, 4.0};

  void validate() const {
    if (!(sigma > 0.0)) throw std::invalid_argument("kernel.sigma must be > 0");
    if (mk_sigmas.empty()) throw std::invalid_argument("kernel.mk_sigmas must not be empty");
    for (double s : mk_sigmas)
      if (!(s > 0.0)) throw std::invalid_argument("kernel.mk_sigmas entries must be > 0");
  }
};

enum class MetricKind { jmmd, ola, mk_mmd };

inline const char* to_string(MetricKind k) {
  switch (k) {
    case MetricKind::jmmd: return "jmmd";
    case MetricKind::ola: return "ola";
    case MetricKind::mk_mmd: return "mk_mmd";
  }
  return "?";
}

inline MetricKind parse_metric(const std::string& s) {
  if (s == "jmmd") return MetricKind::jmmd;
  if (s == "ola") return MetricKind::ola;
  if (s == "mk_mmd") return MetricKind::mk_mmd;
  throw std::invalid_argument("unknown adaptation metric: " + s);
}

struct AdaptConfig {
  std::size_t n_subsequences = 4;
  double epsilon = 1e-2;
  KernelConfig kernel;
  IpmSettings ipm;
  MetricKind seasonal_metric = MetricKind::jmmd;
  MetricKind trend_metric = MetricKind::ola;

  void validate() const {
    if (n_subsequences < 2) throw std::invalid_argument("adapt.n_subsequences must be >= 2");
    if (!(epsilon > 0.0)) throw std::invalid_argument("adapt.epsilon must be > 0");
    kernel.validate();
  }
};

/// [m, D] -> [n, (m / n) * D], time-major within each block.
inline Tensor split_subsequences(const Tensor& h, std::size_t n) {
  if (h.rank() != 2) throw ShapeError("split_subsequences expects [m, D], got " + shape_string(h.shape()));
  const std::size_t m = h.dim(0);
  if (n < 2) throw std::invalid_argument("split_subsequences: n must be >= 2");
  if (m % n != 0) {
    throw std::invalid_argument("split_subsequences: " + std::to_string(n) + " does not divide length " +
                                std::to_string(m));
  }
  return reshape(h, {n, (m / n) * h.dim(1)});
}

inline double gaussian_kernel(const Eigen::VectorXd& u, const Eigen::VectorXd& v, double sigma) {
  if (!(sigma > 0.0)) throw std::invalid_argument("gaussian_kernel: sigma must be > 0");
  return std::exp(-(u - v).squaredNorm() / (2.0 * sigma * sigma));
}

/// sqrt(median nonzero squared pairwise distance / 2) over the rows of `points`.
inline double median_bandwidth(const Eigen::MatrixXd& points) {
  if (points.rows() < 2) throw std::invalid_argument("median_bandwidth needs at least two points");
  std::vector<double> d2;
  for (Eigen::Index i = 0; i < points.rows(); ++i)
    for (Eigen::Index j = i + 1; j < points.rows(); ++j) {
      const double v = (points.row(i) - points.row(j)).squaredNorm();
      if (v > 0.0) d2.push_back(v);
    }
  if (d2.empty()) return 1.0;
  const auto mid = d2.begin() + static_cast<std::ptrdiff_t>(d2.size() / 2);
  std::nth_element(d2.begin(), mid, d2.end());
  double med = *mid;
  if (d2.size() % 2 == 0) med = 0.5 * (med + *std::max_element(d2.begin(), mid));
  return std::sqrt(med / 2.0);
}

namespace detail {

inline Tensor kernel_matrix(const Tensor& a, const Tensor& b, double sigma) {
  return exp(scale(pairwise_sqdist(a, b), -1.0 / (2.0 * sigma * sigma)));
}

inline Tensor mmd_from_kernels(const Tensor& kaa, const Tensor& kbb, const Tensor& kab) {
  return sub(add(mean(kaa), mean(kbb)), scale(mean(kab), 2.0));
}

inline Eigen::MatrixXd pooled_rows(const std::vector<Tensor>& sets) {
  Eigen::Index rows = 0;
  for (const auto& s : sets) rows += static_cast<Eigen::Index>(s.dim(0));
  Eigen::MatrixXd out(rows, static_cast<Eigen::Index>(sets.front().dim(1)));
  Eigen::Index r = 0;
  for (const auto& s : sets) {
    const auto m = s.to_matrix();
    out.middleRows(r, m.rows()) = m;
    r += m.rows();
  }
  return out;
}

inline double base_bandwidth(const std::vector<Tensor>& sets, const KernelConfig& cfg) {
  return cfg.policy == BandwidthPolicy::fixed ? cfg.sigma : median_bandwidth(pooled_rows(sets));
}

}  // namespace detail

/// Biased MMD^2 between row sets a[n_a, p] and b[n_b, p] under a Gaussian kernel.
inline Tensor mmd_biased(const Tensor& a, const Tensor& b, double sigma) {
  if (a.dim(0) == 0 || b.dim(0) == 0) throw std::invalid_argument("mmd_biased: empty sample");
  if (!(sigma > 0.0)) throw std::invalid_argument("mmd_biased: sigma must be > 0");
  return detail::mmd_from_kernels(detail::kernel_matrix(a, a, sigma), detail::kernel_matrix(b, b, sigma),
                                  detail::kernel_matrix(a, b, sigma));
}

inline Tensor mmd_biased(const Tensor& a, const Tensor& b, const KernelConfig& cfg) {
  return mmd_biased(a, b, detail::base_bandwidth({a, b}, cfg));
}

/// Mean of mmd_biased over the configured bandwidth multiples.
inline Tensor mk_mmd(const Tensor& a, const Tensor& b, const KernelConfig& cfg) {
  cfg.validate();
  const double base = detail::base_bandwidth({a, b}, cfg);
  Tensor total;
  for (double mult : cfg.mk_sigmas) {
    auto term = mmd_biased(a, b, base * mult);
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(cfg.mk_sigmas.size()));
}

/// Joint MMD between consecutive-subsequence pairs of two feature sequences
/// [m, D], with the product kernel k(first) * k(second).
inline Tensor seasonal_metric(const Tensor& hs, const Tensor& ht, std::size_t n, const KernelConfig& cfg) {
  cfg.validate();
  const auto vs = split_subsequences(hs, n);
  const auto vt = split_subsequences(ht, n);
  if (vs.dim(1) != vt.dim(1)) throw ShapeError("seasonal_metric: subsequence widths differ");
  const double sigma = detail::base_bandwidth({vs, vt}, cfg);
  const auto s1 = slice(vs, 0, 0, n - 1), s2 = slice(vs, 0, 1, n - 1);
  const auto t1 = slice(vt, 0, 0, n - 1), t2 = slice(vt, 0, 1, n - 1);
  auto joint = [sigma](const Tensor& a1, const Tensor& a2, const Tensor& b1, const Tensor& b2) {
    return mul(detail::kernel_matrix(a1, b1, sigma), detail::kernel_matrix(a2, b2, sigma));
  };
  return detail::mmd_from_kernels(joint(s1, s2, s1, s2), joint(t1, t2, t1, t2), joint(s1, s2, t1, t2));
}

/// Row-wise cosine similarities [n_a, n_b].
inline Tensor cosine_similarity_matrix(const Tensor& a, const Tensor& b) {
  return matmul_nt(l2_normalize(a), l2_normalize(b));
}

/// sum_ij (1 - s_ij) m_ij with M the regularized matching of S. Gradient
/// flows through S directly and through M via implicit differentiation.
inline Tensor matching_cost(const Tensor& similarity, double epsilon, const IpmSettings& ipm = {}) {
  if (similarity.rank() != 2) throw ShapeError("matching_cost expects a square matrix");
  MatchingProblem problem{similarity.to_matrix(), epsilon};
  auto solution = solve_matching(problem, ipm);
  const Eigen::MatrixXd cost = problem.cost();
  const double value = (cost.array() * solution.matching.array()).sum();
  return custom_op({}, {value}, {similarity},
                   [sn = similarity.node(), problem = std::move(problem), solution = std::move(solution),
                    cost](Node& self) {
                     if (!sn->requires_grad) return;
                     const Eigen::MatrixXd grad =
                         self.grad[0] * (matching_gradient(problem, solution, cost, 0.0) - solution.matching);
                     sn->ensure_grad();
                     const auto n = grad.rows();
                     for (Eigen::Index i = 0; i < n; ++i)
                       for (Eigen::Index j = 0; j < n; ++j)
                         sn->grad[static_cast<std::size_t>(i * n + j)] += grad(i, j);
                   });
}

inline Tensor trend_metric(const Tensor& hs, const Tensor& ht, std::size_t n, double epsilon,
                           const IpmSettings& ipm = {}) {
  const auto vs = split_subsequences(hs, n);
  const auto vt = split_subsequences(ht, n);
  if (vs.dim(0) != vt.dim(0)) throw std::invalid_argument("trend_metric: subsequence counts differ");
  return matching_cost(cosine_similarity_matrix(vs, vt), epsilon, ipm);
}

/// One metric between two feature sequences [m, D].
inline Tensor apply_metric(MetricKind kind, const Tensor& hs, const Tensor& ht, const AdaptConfig& cfg) {
  switch (kind) {
    case MetricKind::jmmd: return seasonal_metric(hs, ht, cfg.n_subsequences, cfg.kernel);
    case MetricKind::ola: return trend_metric(hs, ht, cfg.n_subsequences, cfg.epsilon, cfg.ipm);
    case MetricKind::mk_mmd:
      return mk_mmd(split_subsequences(hs, cfg.n_subsequences), split_subsequences(ht, cfg.n_subsequences),
                    cfg.kernel);
  }
  throw std::logic_error("unreachable metric kind");
}

/// Seasonal-pair metric plus trend-pair metric.
inline Tensor adaptation_loss(const Tensor& hs_sea, const Tensor& ht_sea, const Tensor& hs_tre, const Tensor& ht_tre,
                              const AdaptConfig& cfg) {
  cfg.validate();
  return add(apply_metric(cfg.seasonal_metric, hs_sea, ht_sea, cfg),
             apply_metric(cfg.trend_metric, hs_tre, ht_tre, cfg));
}

}  // namespace sedan
