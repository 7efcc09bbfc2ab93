#include "sedan/matching.hpp"

#include <gtest/gtest.h>

#include <numeric>
#include <random>

using namespace sedan;

namespace {

Eigen::MatrixXd random_similarity(Eigen::Index n, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  Eigen::MatrixXd s(n, n);
  for (Eigen::Index i = 0; i < s.size(); ++i) s.data()[i] = u(rng);
  return s;
}

// Exhaustive minimum of sum_i C(i, pi(i)) over all permutations.
double brute_force_assignment(const Eigen::MatrixXd& cost) {
  std::vector<int> perm(static_cast<std::size_t>(cost.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do {
    double total = 0.0;
    for (std::size_t i = 0; i < perm.size(); ++i) total += cost(static_cast<Eigen::Index>(i), perm[i]);
    best = std::min(best, total);
  } while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

IpmSettings tight() {
  IpmSettings s;
  s.residual_tolerance = 1e-13;
  s.gap_tolerance_per_cell = 1e-14;
  s.max_iterations = 80;
  return s;
}

double regularized_objective(const Eigen::MatrixXd& S, double eps, const IpmSettings& settings = tight()) {
  return solve_matching({S, eps}, settings).objective;
}

}  // namespace

TEST(SolveMatching, IdentitySimilarity) {
  auto sol = solve_matching({Eigen::MatrixXd::Identity(3, 3), 1e-4});
  EXPECT_LT((sol.matching - Eigen::MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_NEAR(sol.objective, 0.0, 1e-3);
  EXPECT_LE(sol.kkt_residual, 1e-8);
}

TEST(SolveMatching, PermutationSimilarity) {
  Eigen::MatrixXd P = Eigen::MatrixXd::Zero(4, 4);
  const int perm[] = {2, 0, 3, 1};
  for (int i = 0; i < 4; ++i) P(i, perm[i]) = 1.0;
  auto sol = solve_matching({P, 1e-4});
  EXPECT_LT((sol.matching - P).cwiseAbs().maxCoeff(), 1e-4);
  EXPECT_EQ(round_to_permutation(sol.matching), P);
}

TEST(SolveMatching, RoundingMatchesEnumerationOnFourByFour) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    MatchingProblem p{random_similarity(4, rng), 1e-4};
    auto sol = solve_matching(p);
    const double rounded = (p.cost().array() * round_to_permutation(sol.matching).array()).sum();
    EXPECT_NEAR(rounded, brute_force_assignment(p.cost()), 1e-6);
  }
}

TEST(SolveMatching, OracleEquivalenceUpToSix) {
  std::mt19937_64 rng(2);
  for (Eigen::Index n = 1; n <= 6; ++n) {
    for (int trial = 0; trial < 100; ++trial) {
      MatchingProblem p{random_similarity(n, rng), 1e-4};
      auto sol = solve_matching(p);
      const double rounded = (p.cost().array() * round_to_permutation(sol.matching).array()).sum();
      EXPECT_NEAR(rounded, brute_force_assignment(p.cost()), 1e-6) << "n=" << n << " trial " << trial;
    }
  }
}

TEST(SolveMatching, DoublyStochasticAndKkt) {
  std::mt19937_64 rng(3);
  for (double eps : {1e-4, 1e-2, 1.0}) {
    for (Eigen::Index n : {2, 3, 5, 8}) {
      MatchingProblem p{random_similarity(n, rng), eps};
      auto sol = solve_matching(p);
      const auto& M = sol.matching;
      EXPECT_LT((M.rowwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
      EXPECT_LT((M.colwise().sum().array() - 1.0).abs().maxCoeff(), 1e-6);
      EXPECT_GE(M.minCoeff(), -1e-8);
      EXPECT_LE(sol.kkt_residual, 1e-8);
      ASSERT_EQ(sol.nu.size(), 2 * n);
      EXPECT_EQ(sol.nu(2 * n - 1), 0.0);
      // Stationarity checked directly from the reported duals.
      Eigen::MatrixXd stat = p.cost() + eps * M - sol.eta;
      for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index j = 0; j < n; ++j) stat(i, j) += sol.nu(i) + sol.nu(n + j);
      EXPECT_LT(stat.cwiseAbs().maxCoeff(), 1e-8);
      EXPECT_GE(sol.eta.minCoeff(), 0.0);
      EXPECT_LT((M.array() * sol.eta.array()).abs().maxCoeff(), 1e-8);
      EXPECT_NEAR(sol.objective, (p.cost().array() * M.array()).sum() + 0.5 * eps * M.squaredNorm(), 1e-12);
    }
  }
}

TEST(SolveMatching, Errors) {
  EXPECT_THROW(solve_matching({Eigen::MatrixXd::Zero(2, 3), 1e-2}), std::invalid_argument);
  EXPECT_THROW(solve_matching({Eigen::MatrixXd::Zero(2, 2), 0.0}), std::invalid_argument);
  Eigen::MatrixXd bad = Eigen::MatrixXd::Zero(2, 2);
  bad(0, 1) = std::nan("");
  EXPECT_THROW(solve_matching({bad, 1e-2}), std::invalid_argument);
  IpmSettings one;
  one.max_iterations = 1;
  std::mt19937_64 rng(4);
  try {
    solve_matching({random_similarity(5, rng), 1e-4}, one);
    FAIL() << "expected non-convergence";
  } catch (const MatchingError& e) {
    EXPECT_NE(std::string(e.what()).find("did not converge"), std::string::npos);
  }
}

TEST(MatchingGradient, DanskinAgainstSolverObjective) {
  std::mt19937_64 rng(5);
  const double eps = 1e-3, h = 1e-6;
  for (int trial = 0; trial < 20; ++trial) {
    MatchingProblem p{random_similarity(4, rng), eps};
    auto sol = solve_matching(p, tight());
    double worst = 0.0;
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) {
        Eigen::MatrixXd up = p.similarity, down = p.similarity;
        up(i, j) += h;
        down(i, j) -= h;
        const double fd = (regularized_objective(up, eps) - regularized_objective(down, eps)) / (2.0 * h);
        worst = std::max(worst, std::abs(fd + sol.matching(i, j)));
      }
    EXPECT_LE(worst, 10.0 * eps) << "trial " << trial;
    const auto g = matching_gradient(p, sol, Eigen::MatrixXd::Zero(4, 4), 1.0);
    EXPECT_LT((g + sol.matching).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(MatchingGradient, ImplicitSensitivityMatchesFiniteDifferences) {
  std::mt19937_64 rng(6);
  const double eps = 1e-2, h = 1e-6;
  std::normal_distribution<double> g(0.0, 1.0);
  for (int trial = 0; trial < 10; ++trial) {
    MatchingProblem p{random_similarity(4, rng), eps};
    Eigen::MatrixXd upstream(4, 4);
    for (Eigen::Index i = 0; i < 16; ++i) upstream.data()[i] = g(rng);
    auto sol = solve_matching(p, tight());
    const auto analytic = matching_gradient(p, sol, upstream, 0.0);
    auto loss = [&](const Eigen::MatrixXd& S) {
      return (upstream.array() * solve_matching({S, eps}, tight()).matching.array()).sum();
    };
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) {
        Eigen::MatrixXd up = p.similarity, down = p.similarity;
        up(i, j) += h;
        down(i, j) -= h;
        const double fd = (loss(up) - loss(down)) / (2.0 * h);
        EXPECT_NEAR(analytic(i, j), fd, 1e-3 * std::max(1.0, std::abs(fd))) << "trial " << trial;
      }
  }
}

TEST(MatchingGradient, FullCostPipeline) {
  // D(S) = sum (1 - S) .* M(S), differentiated through both routes.
  std::mt19937_64 rng(7);
  const double eps = 1e-2, h = 1e-6;
  auto D = [&](const Eigen::MatrixXd& S) {
    auto sol = solve_matching({S, eps}, tight());
    return ((1.0 - S.array()) * sol.matching.array()).sum();
  };
  for (int trial = 0; trial < 10; ++trial) {
    MatchingProblem p{random_similarity(4, rng), eps};
    auto sol = solve_matching(p, tight());
    const Eigen::MatrixXd analytic = -sol.matching + matching_gradient(p, sol, p.cost(), 0.0);
    for (Eigen::Index i = 0; i < 4; ++i)
      for (Eigen::Index j = 0; j < 4; ++j) {
        Eigen::MatrixXd up = p.similarity, down = p.similarity;
        up(i, j) += h;
        down(i, j) -= h;
        const double fd = (D(up) - D(down)) / (2.0 * h);
        EXPECT_LT(std::abs(analytic(i, j) - fd) / std::max({std::abs(fd), std::abs(analytic(i, j)), 1e-3}), 1e-3)
            << "trial " << trial << " (" << i << "," << j << ")";
      }
  }
}

TEST(MatchingGradient, ZeroUpstreamAndShape) {
  std::mt19937_64 rng(8);
  MatchingProblem p{random_similarity(3, rng), 1e-2};
  auto sol = solve_matching(p);
  EXPECT_EQ(matching_gradient(p, sol, Eigen::MatrixXd::Zero(3, 3), 0.0).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_THROW(matching_gradient(p, sol, Eigen::MatrixXd::Zero(2, 3), 0.0), std::invalid_argument);
}

TEST(Assignment, MatchesEnumeration) {
  std::mt19937_64 rng(9);
  for (Eigen::Index n = 1; n <= 7; ++n)
    for (int trial = 0; trial < 30; ++trial) {
      auto cost = random_similarity(n, rng);
      const auto perm = solve_assignment(cost);
      std::vector<int> sorted = perm;
      std::sort(sorted.begin(), sorted.end());
      for (int i = 0; i < n; ++i) ASSERT_EQ(sorted[static_cast<std::size_t>(i)], i);
      double total = 0.0;
      for (Eigen::Index i = 0; i < n; ++i) total += cost(i, perm[static_cast<std::size_t>(i)]);
      EXPECT_NEAR(total, brute_force_assignment(cost), 1e-12);
    }
  EXPECT_THROW(solve_assignment(Eigen::MatrixXd::Zero(2, 3)), std::invalid_argument);
}
