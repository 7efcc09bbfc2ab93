#pragma once

// Quadratically regularized doubly-stochastic matching
//
//   min <C, M> + eps/2 ||M||_F^2   s.t.  M 1 = 1,  M^T 1 = 1,  M >= 0
//
// solved with a Mehrotra predictor-corrector interior-point method, plus
// implicit differentiation of its KKT system and assignment rounding.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace sedan {

struct MatchingProblem {
  Eigen::MatrixXd similarity;  // S, n x n
  double epsilon = 1e-2;

  Eigen::MatrixXd cost() const { return Eigen::MatrixXd::Ones(similarity.rows(), similarity.cols()) - similarity; }
};

struct MatchingSolution {
  Eigen::MatrixXd matching;  // M
  Eigen::VectorXd nu;        // equality duals: n row constraints then n column constraints
  Eigen::MatrixXd eta;       // multipliers of M >= 0
  double objective = 0.0;
  double kkt_residual = 0.0;
  int iterations = 0;
};

struct IpmSettings {
  int max_iterations = 50;
  double residual_tolerance = 1e-10;
  double gap_tolerance_per_cell = 1e-9;  // duality gap tolerance is this times n^2
  double step_fraction = 0.99;
};

class MatchingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace detail {

// Row sums for every row, column sums for all but the last column. The full
// set of 2n constraints has rank 2n - 1.
inline Eigen::MatrixXd matching_constraints(Eigen::Index n) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(2 * n - 1, n * n);
  for (Eigen::Index i = 0; i < n; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      A(i, i * n + j) = 1.0;
      if (j < n - 1) A(n + j, i * n + j) = 1.0;
    }
  }
  return A;
}

inline Eigen::VectorXd flatten(const Eigen::MatrixXd& m) {
  Eigen::VectorXd v(m.size());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) v(i * m.cols() + j) = m(i, j);
  return v;
}

inline Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, Eigen::Index n) {
  Eigen::MatrixXd m(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) m(i, j) = v(i * n + j);
  return m;
}

inline double max_step(const Eigen::VectorXd& v, const Eigen::VectorXd& dv) {
  double alpha = 1.0;
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (dv(i) < 0.0) alpha = std::min(alpha, -v(i) / dv(i));
  }
  return alpha;
}

}  // namespace detail

inline void validate(const MatchingProblem& p) {
  if (p.similarity.rows() != p.similarity.cols()) {
    throw std::invalid_argument("matching needs a square similarity matrix, got " +
                                std::to_string(p.similarity.rows()) + "x" + std::to_string(p.similarity.cols()));
  }
  if (p.similarity.rows() < 1) throw std::invalid_argument("matching needs n >= 1");
  if (!(p.epsilon > 0.0)) throw std::invalid_argument("matching epsilon must be > 0");
  if (!p.similarity.allFinite()) throw std::invalid_argument("matching similarity has non-finite entries");
}

inline MatchingSolution solve_matching(const MatchingProblem& problem, const IpmSettings& settings = {}) {
  validate(problem);
  const Eigen::Index n = problem.similarity.rows();
  const Eigen::Index N = n * n;
  const double eps = problem.epsilon;
  const Eigen::MatrixXd A = detail::matching_constraints(n);
  const Eigen::VectorXd b = Eigen::VectorXd::Ones(2 * n - 1);
  const Eigen::VectorXd c = detail::flatten(problem.cost());

  // Stationarity: c + eps x + A^T y - z = 0.
  Eigen::VectorXd x = Eigen::VectorXd::Constant(N, 1.0 / static_cast<double>(n));
  Eigen::VectorXd z = Eigen::VectorXd::Ones(N);
  Eigen::VectorXd y = Eigen::VectorXd::Zero(2 * n - 1);

  const double gap_tol = settings.gap_tolerance_per_cell * static_cast<double>(N);
  auto residuals = [&](Eigen::VectorXd& rd, Eigen::VectorXd& rp) {
    rd = c + eps * x + A.transpose() * y - z;
    rp = A * x - b;
  };

  Eigen::VectorXd rd, rp;
  double kkt = std::numeric_limits<double>::infinity();
  int it = 0;
  for (;; ++it) {
    residuals(rd, rp);
    const double gap = x.dot(z);
    kkt = std::max({rd.lpNorm<Eigen::Infinity>(), rp.lpNorm<Eigen::Infinity>(), (x.array() * z.array()).maxCoeff()});
    if (rd.lpNorm<Eigen::Infinity>() <= settings.residual_tolerance &&
        rp.lpNorm<Eigen::Infinity>() <= settings.residual_tolerance && gap <= gap_tol) {
      break;
    }
    if (it >= settings.max_iterations) {
      std::ostringstream msg;
      msg << "matching IPM did not converge in " << settings.max_iterations << " iterations (primal "
          << rp.lpNorm<Eigen::Infinity>() << ", dual " << rd.lpNorm<Eigen::Infinity>() << ", gap " << gap << ")";
      throw MatchingError(msg.str());
    }

    const Eigen::VectorXd h_inv = (eps + z.array() / x.array()).inverse().matrix();
    const Eigen::MatrixXd schur = A * h_inv.asDiagonal() * A.transpose();
    // Near convergence the weights of inactive cells underflow; a
    // rank-revealing factorization takes over when LDLT breaks down.
    const Eigen::LDLT<Eigen::MatrixXd> ldlt(schur);
    const bool use_ldlt = ldlt.info() == Eigen::Success && ldlt.vectorD().minCoeff() > 0.0;
    Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> cod;
    if (!use_ldlt) cod.compute(schur);
    auto schur_solve = [&](const Eigen::VectorXd& rhs) -> Eigen::VectorXd {
      return use_ldlt ? Eigen::VectorXd(ldlt.solve(rhs)) : Eigen::VectorXd(cod.solve(rhs));
    };

    // Solves the linearized KKT system for a complementarity target rc.
    auto newton = [&](const Eigen::VectorXd& rc, Eigen::VectorXd& dx, Eigen::VectorXd& dy, Eigen::VectorXd& dz) {
      const Eigen::VectorXd r1 = -rd - (rc.array() / x.array()).matrix();
      dy = schur_solve(A * h_inv.asDiagonal() * r1 + rp);
      if (!dy.allFinite()) throw MatchingError("matching IPM: singular Newton system");
      dx = h_inv.asDiagonal() * (r1 - A.transpose() * dy);
      dz = -((rc.array() + z.array() * dx.array()) / x.array()).matrix();
    };

    const double mu = gap / static_cast<double>(N);
    Eigen::VectorXd dx, dy, dz;
    newton((x.array() * z.array()).matrix(), dx, dy, dz);
    const double a_aff = std::min(detail::max_step(x, dx), detail::max_step(z, dz));
    const double mu_aff = (x + a_aff * dx).dot(z + a_aff * dz) / static_cast<double>(N);
    const double sigma = std::pow(mu_aff / mu, 3.0);

    const Eigen::VectorXd rc = (x.array() * z.array() + dx.array() * dz.array() - sigma * mu).matrix();
    newton(rc, dx, dy, dz);
    const double alpha =
        std::min(1.0, settings.step_fraction * std::min(detail::max_step(x, dx), detail::max_step(z, dz)));
    x += alpha * dx;
    y += alpha * dy;
    z += alpha * dz;
  }

  MatchingSolution sol;
  sol.matching = detail::unflatten(x, n);
  sol.eta = detail::unflatten(z, n);
  sol.nu = Eigen::VectorXd::Zero(2 * n);
  sol.nu.head(2 * n - 1) = y;
  sol.objective = c.dot(x) + 0.5 * eps * x.squaredNorm();
  sol.kkt_residual = kkt;
  sol.iterations = it;
  return sol;
}

/// dL/dS for a loss L(M, objective) given dL/dM and dL/d(objective).
inline Eigen::MatrixXd matching_gradient(const MatchingProblem& problem, const MatchingSolution& solution,
                                         const Eigen::MatrixXd& upstream_matching, double upstream_objective) {
  validate(problem);
  const Eigen::Index n = problem.similarity.rows();
  if (upstream_matching.rows() != n || upstream_matching.cols() != n) {
    throw std::invalid_argument("matching_gradient: upstream shape mismatch");
  }
  const Eigen::MatrixXd A = detail::matching_constraints(n);
  const Eigen::VectorXd x = detail::flatten(solution.matching).cwiseMax(std::numeric_limits<double>::min());
  const Eigen::VectorXd z = detail::flatten(solution.eta);
  const Eigen::VectorXd g = detail::flatten(upstream_matching);

  // Adjoint of the KKT system at the solution:
  //   (eps + z/x) u + A^T w = -g,  A u = 0   gives dL/dC = u.
  // When M is nearly a permutation the reduced system is rank deficient; w
  // is then not unique but H^-1 A^T w is, so a minimum-norm solve suffices.
  const Eigen::VectorXd h_inv = (problem.epsilon + z.array() / x.array()).inverse().matrix();
  const Eigen::CompleteOrthogonalDecomposition<Eigen::MatrixXd> factor(A * h_inv.asDiagonal() * A.transpose());
  const Eigen::VectorXd hg = h_inv.asDiagonal() * g;
  const Eigen::VectorXd w = factor.solve(-(A * hg));
  const Eigen::VectorXd u = -hg - h_inv.asDiagonal() * (A.transpose() * w);
  if (!u.allFinite()) throw MatchingError("matching_gradient: singular KKT system, raise epsilon");

  // The objective's envelope derivative with respect to C is M itself.
  const Eigen::VectorXd grad_cost = u + upstream_objective * detail::flatten(solution.matching);
  return -detail::unflatten(grad_cost, n);  // C = 1 - S
}

/// Minimum-cost assignment; returns perm with row i matched to column perm[i].
inline std::vector<int> solve_assignment(const Eigen::MatrixXd& cost) {
  const int n = static_cast<int>(cost.rows());
  if (cost.cols() != cost.rows()) throw std::invalid_argument("assignment needs a square cost matrix");
  const double inf = std::numeric_limits<double>::infinity();
  // Potentials method, 1-indexed with a virtual column 0.
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<int> owner(n + 1, 0), way(n + 1, 0);
  for (int i = 1; i <= n; ++i) {
    owner[0] = i;
    int j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<bool> used(n + 1, false);
    do {
      used[j0] = true;
      const int i0 = owner[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (int j = 0; j <= n; ++j) {
        if (used[j]) {
          u[owner[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (owner[j0] != 0);
    do {
      const int j1 = way[j0];
      owner[j0] = owner[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> perm(n);
  for (int j = 1; j <= n; ++j) perm[owner[j] - 1] = j - 1;
  return perm;
}

/// Nearest permutation matrix to M in Frobenius norm (max-weight assignment).
inline Eigen::MatrixXd round_to_permutation(const Eigen::MatrixXd& matching) {
  const auto perm = solve_assignment(-matching);
  Eigen::MatrixXd p = Eigen::MatrixXd::Zero(matching.rows(), matching.cols());
  for (std::size_t i = 0; i < perm.size(); ++i) p(static_cast<Eigen::Index>(i), perm[i]) = 1.0;
  return p;
}

}  // namespace sedan
