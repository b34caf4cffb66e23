#include <gtest/gtest.h>

#include <algorithm>
#include <numeric>
#include <random>

#include "certdg/transport.hpp"
#include "helpers.hpp"

using namespace certdg;
using namespace testutil;

namespace {

struct Instance {
  Mat cost;
  std::string tag;
};

// Seeded corpus of square uniform instances, n = 1..6: generic points in
// [-2, 2]^2, duplicated points (ties) and collinear points.
std::vector<Instance> corpus() {
  std::vector<Instance> out;
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  for (int n = 1; n <= 6; ++n) {
    for (int rep = 0; rep < 8; ++rep) {
      std::vector<Vec> A, B;
      for (int i = 0; i < n; ++i) {
        Vec a(2), b(2);
        a << u(rng), u(rng);
        b << u(rng), u(rng);
        if (rep == 6) b = (i % 2 == 0) ? A.empty() ? a : A.front() : b;  // duplicates
        if (rep == 7) {
          a << u(rng), 0.0;
          b << u(rng), 0.0;
        }
        A.push_back(a);
        B.push_back(b);
      }
      Mat C(n, n);
      for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) C(i, j) = (A[i] - B[j]).squaredNorm();
      out.push_back({C, "n" + std::to_string(n) + "r" + std::to_string(rep)});
    }
  }
  return out;
}

// cost of a permutation, summed in row order
double perm_cost(const Mat& C, const std::vector<int>& perm) {
  double s = 0.0;
  for (std::size_t i = 0; i < perm.size(); ++i) s += C(static_cast<Eigen::Index>(i), perm[i]);
  return s / static_cast<double>(perm.size());
}

double brute_force(const Mat& C) {
  std::vector<int> perm(static_cast<std::size_t>(C.rows()));
  std::iota(perm.begin(), perm.end(), 0);
  double best = std::numeric_limits<double>::infinity();
  do best = std::min(best, perm_cost(C, perm));
  while (std::next_permutation(perm.begin(), perm.end()));
  return best;
}

// Reads the assignment back from a square uniform plan.
std::vector<int> plan_perm(const Mat& P) {
  std::vector<int> perm;
  for (Eigen::Index i = 0; i < P.rows(); ++i) {
    Eigen::Index j;
    P.row(i).maxCoeff(&j);
    perm.push_back(static_cast<int>(j));
  }
  return perm;
}

std::vector<double> uniform(std::size_t n) { return std::vector<double>(n, 1.0 / static_cast<double>(n)); }

void expect_marginals(const Mat& P, std::span<const double> a, std::span<const double> b, double tol) {
  for (Eigen::Index i = 0; i < P.rows(); ++i) EXPECT_NEAR(P.row(i).sum(), a[static_cast<std::size_t>(i)], tol);
  for (Eigen::Index j = 0; j < P.cols(); ++j) EXPECT_NEAR(P.col(j).sum(), b[static_cast<std::size_t>(j)], tol);
  EXPECT_GE(P.minCoeff(), 0.0);
}

EmpiricalDistribution balanced(std::mt19937_64& rng, std::size_t per_class, int classes, double shift = 0.0) {
  std::vector<RepPoint> pts;
  for (std::size_t i = 0; i < per_class * static_cast<std::size_t>(classes); ++i) {
    Vec z = randn(rng, 2);
    z[0] += shift;
    pts.push_back({z, static_cast<int>(i % static_cast<std::size_t>(classes))});
  }
  return EmpiricalDistribution::uniform(pts);
}

}  // namespace

TEST(ExactOt, MatchesPermutationEnumeration) {
  for (const auto& inst : corpus()) {
    const auto n = static_cast<std::size_t>(inst.cost.rows());
    const auto a = uniform(n);
    const auto plan = exact_ot(inst.cost, a, a);
    expect_marginals(plan.plan, a, a, 1e-12);
    const auto perm = plan_perm(plan.plan);
    EXPECT_EQ(perm_cost(inst.cost, perm), brute_force(inst.cost)) << inst.tag;
  }
}

TEST(ExactOt, SimplexMatchesReplicatedEnumeration) {
  // Marginals in sixths: replicating each point by its count gives a 6x6
  // uniform problem that enumeration solves exactly.
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-2.0, 2.0);
  const std::vector<std::vector<int>> counts{{1, 2, 3}, {3, 3}, {1, 1, 4}, {2, 2, 1, 1}, {6}, {5, 1}};
  for (int rep = 0; rep < 30; ++rep) {
    const auto& ca = counts[static_cast<std::size_t>(rep) % counts.size()];
    const auto& cb = counts[static_cast<std::size_t>(rep + 2) % counts.size()];
    Mat C(static_cast<Eigen::Index>(ca.size()), static_cast<Eigen::Index>(cb.size()));
    for (Eigen::Index i = 0; i < C.rows(); ++i)
      for (Eigen::Index j = 0; j < C.cols(); ++j) C(i, j) = u(rng) * u(rng) + 4.0;
    std::vector<double> a, b;
    std::vector<int> ra, rb;
    for (std::size_t i = 0; i < ca.size(); ++i) {
      a.push_back(ca[i] / 6.0);
      for (int r = 0; r < ca[i]; ++r) ra.push_back(static_cast<int>(i));
    }
    for (std::size_t j = 0; j < cb.size(); ++j) {
      b.push_back(cb[j] / 6.0);
      for (int r = 0; r < cb[j]; ++r) rb.push_back(static_cast<int>(j));
    }
    Mat big(6, 6);
    for (int p = 0; p < 6; ++p)
      for (int q = 0; q < 6; ++q) big(p, q) = C(ra[p], rb[q]);
    const auto plan = detail::transport_simplex(C, a, b);
    expect_marginals(plan.plan, a, b, 1e-12);
    EXPECT_NEAR(plan_cost(plan.plan, C), brute_force(big), 1e-12) << "rep " << rep;
    // and the public entry point agrees
    EXPECT_NEAR(exact_ot(C, a, b).cost, brute_force(big), 1e-12);
  }
}

TEST(ExactOt, RectangularUniformAgreesWithSimplex) {
  std::mt19937_64 rng(8);
  for (int rep = 0; rep < 20; ++rep) {
    const Eigen::Index n = 2 + rep % 5, k = 3 + rep % 4;
    const Mat C = randn(rng, n, k).cwiseAbs();
    const auto a = uniform(static_cast<std::size_t>(n)), b = uniform(static_cast<std::size_t>(k));
    const auto hung = exact_ot(C, a, b);
    const auto simp = detail::transport_simplex(C, a, b);
    expect_marginals(hung.plan, a, b, 1e-12);
    EXPECT_NEAR(hung.cost, plan_cost(simp.plan, C), 1e-12);
  }
}

TEST(ExactOt, InfeasibleAndInvalidInputs) {
  Mat C(2, 2);
  C << 1.0, kInfCost, kInfCost, kInfCost;
  const auto a = uniform(2);
  try {
    exact_ot(C, a, a);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::infeasible_transport);
  }
  // row 0 needs 0.2 of column 0, which only holds 0.1
  Mat D(2, 2);
  D << 1.0, kInfCost, 1.0, 1.0;
  std::vector<double> b{0.1, 0.9};
  try {
    exact_ot(D, std::vector<double>{0.2, 0.8}, b);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::infeasible_transport);
  }
  EXPECT_THROW(exact_ot(Mat::Zero(2, 3), a, a), Error);
  EXPECT_THROW(exact_ot(Mat::Zero(2, 2), a, std::vector<double>{0.7, 0.7}), Error);
  EXPECT_THROW(exact_ot(Mat::Zero(2, 2), std::vector<double>{-0.5, 1.5}, a), Error);
}

TEST(ExactOt, ForbiddenPairsAvoidedWhenPossible) {
  Mat C(3, 3);
  C << 0.0, kInfCost, 5.0, kInfCost, 0.0, kInfCost, 5.0, kInfCost, 0.0;
  const auto a = uniform(3);
  const auto p = exact_ot(C, a, a);
  EXPECT_DOUBLE_EQ(p.cost, 0.0);
  EXPECT_EQ(p.plan(0, 1), 0.0);
}

TEST(Sinkhorn, WithinFivePercentOfExact) {
  for (const auto& inst : corpus()) {
    const auto n = static_cast<std::size_t>(inst.cost.rows());
    const auto a = uniform(n);
    const double ex = exact_ot(inst.cost, a, a).cost;
    const auto sk = sinkhorn(inst.cost, a, a, {1e-2, 20000, 1e-10, 1e12});
    expect_marginals(sk.plan, a, a, 1e-6);
    EXPECT_LE(std::abs(sk.cost - ex), 0.05 * ex + 1e-9) << inst.tag << " exact " << ex << " sinkhorn " << sk.cost;
  }
}

TEST(Sinkhorn, HandlesInfiniteCostsAndRejectsBadEpsilon) {
  Mat C(2, 2);
  C << 0.5, kInfCost, kInfCost, 0.25;
  const auto a = uniform(2);
  const auto sk = sinkhorn(C, a, a);
  EXPECT_NEAR(sk.cost, 0.375, 1e-9);
  EXPECT_THROW(sinkhorn(C, a, a, {0.0}), Error);
}

TEST(W2, ClassConditionalMetricProperties) {
  std::mt19937_64 rng(77);
  for (int t = 0; t < 50; ++t) {
    const std::size_t m = 3 + static_cast<std::size_t>(t % 6);
    const auto A = balanced(rng, m, 2), B = balanced(rng, m + t % 3, 2, 0.5), C = balanced(rng, 2 * m, 2, -0.5);
    const double ab = w2_class_conditional(A, B), ba = w2_class_conditional(B, A);
    const double bc = w2_class_conditional(B, C), ac = w2_class_conditional(A, C);
    EXPECT_NEAR(ab, ba, 1e-6);
    EXPECT_LE(ac, ab + bc + 1e-6);
    EXPECT_NEAR(w2_class_conditional(A, A), 0.0, 1e-9);
  }
}

TEST(W2, TranslationGivesShiftNorm) {
  std::mt19937_64 rng(3);
  const auto A = balanced(rng, 20, 3);
  auto B = A;
  Vec v(2);
  v << 0.3, -0.4;
  for (auto& p : B.points) p.z += v;
  EXPECT_NEAR(w2_class_conditional(A, B), 0.5, 1e-9);
}

TEST(W2, LabelsAreNeverMixed) {
  // Swapping labels between two far clusters must not make them close.
  std::vector<RepPoint> a{{Vec::Constant(2, 0.0), 0}, {Vec::Constant(2, 10.0), 1}};
  std::vector<RepPoint> b{{Vec::Constant(2, 10.0), 0}, {Vec::Constant(2, 0.0), 1}};
  EXPECT_NEAR(w2_class_conditional(EmpiricalDistribution::uniform(a), EmpiricalDistribution::uniform(b)),
              std::sqrt(200.0), 1e-9);
}

TEST(W2, ClassMassMismatchIsInfeasible) {
  std::vector<RepPoint> a{{Vec::Zero(2), 0}, {Vec::Zero(2), 1}};
  std::vector<RepPoint> b{{Vec::Zero(2), 0}, {Vec::Zero(2), 0}};
  try {
    w2_class_conditional(EmpiricalDistribution::uniform(a), EmpiricalDistribution::uniform(b));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::infeasible_transport);
  }
}

TEST(W2, SinkhornFallbackCloseToExact) {
  std::mt19937_64 rng(4);
  const auto A = balanced(rng, 25, 2), B = balanced(rng, 25, 2, 1.0);
  W2Options small;
  small.exact.max_assignment = 10;
  small.exact.max_entries = 10;
  const auto approx = w2_class_conditional_detail(A, B, small);
  EXPECT_FALSE(approx.all_exact);
  const auto exact = w2_class_conditional_detail(A, B);
  EXPECT_TRUE(exact.all_exact);
  EXPECT_NEAR(approx.w2(), exact.w2(), 0.02 * exact.w2());
}

TEST(JointCost, LabelPenalty) {
  std::vector<RepPoint> a{{Vec::Zero(2), 0}}, b{{Vec::Ones(2), 1}};
  const Mat C = cost_matrix_joint(EmpiricalDistribution::uniform(a), EmpiricalDistribution::uniform(b), 1.5);
  EXPECT_DOUBLE_EQ(C(0, 0), 2.0 + 3.0);
  EXPECT_THROW(cost_matrix_joint(EmpiricalDistribution::uniform(a), EmpiricalDistribution::uniform(b), -1.0), Error);
}

TEST(PlanCsv, Format) {
  TransportPlan p{Mat::Identity(2, 2) * 0.5, 0.0, true};
  EXPECT_EQ(plan_to_csv(p), "row,col,mass\n0,0,0.5\n1,1,0.5\n");
}
