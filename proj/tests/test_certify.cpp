#include <gtest/gtest.h>

#include <random>

#include "certdg/certify.hpp"
#include "helpers.hpp"

using namespace certdg;
using namespace testutil;

namespace {

double mean_loss_of(const LinearHead& h, const std::vector<RepPoint>& pts, const LossFamily& fam) {
  double s = 0.0;
  for (const auto& p : pts) s += loss(h, p.z, p.y, fam);
  return s / static_cast<double>(pts.size());
}

// Per-point squared budgets e_i >= 0 with mean exactly rho^2.
std::vector<double> random_budgets(std::mt19937_64& rng, std::size_t n, double rho) {
  std::exponential_distribution<double> ex(1.0);
  std::vector<double> e(n);
  double s = 0.0;
  for (auto& v : e) s += (v = ex(rng));
  for (auto& v : e) v *= rho * rho * static_cast<double>(n) / s;
  return e;
}

// Class-preserving moves with mean squared length rho^2; the identity coupling
// then certifies W2 <= rho. Half the draws push along the loss gradient.
std::vector<RepPoint> feasible_perturbation(std::mt19937_64& rng, const LinearHead& h, const std::vector<RepPoint>& src,
                                            double rho, bool adversarial, const LossFamily& fam) {
  const auto e = random_budgets(rng, src.size(), rho);
  std::vector<RepPoint> out = src;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const double r = std::sqrt(e[i]);
    if (adversarial && fam.differentiable()) {
      out[i].z = pgd_rep(h, src[i].z, src[i].y, {r, 20, r / 4.0}, fam);
    } else if (adversarial) {
      const auto a = closest_misclassified(h, src[i].z, src[i].y);
      if (a.distortion <= r) out[i].z = a.z_adv;
    } else {
      Vec u = randn(rng, src[i].z.size());
      out[i].z += r * u / u.norm();
    }
  }
  return out;
}

CertConfig test_config() {
  CertConfig c;
  c.T1 = 3;
  c.batch = 32;
  return c;
}

// Primal value for one point and a binary head under the modified hinge:
// the worst case moves mass along -a, so with u = ||delta||^2 the value is the
// concave envelope of g(u) = max_s s (base + ||a|| sqrt(u)) at u = rho^2.
double hinge_single_point_primal(double base, double anorm, double alpha, double rho) {
  auto g = [&](double u) {
    const double v = base + anorm * std::sqrt(u);
    return std::max(v, alpha * v);
  };
  const double r2 = rho * rho;
  const int N = 2000;
  double best = g(r2);
  for (int i = 0; i <= N; ++i) {
    const double u1 = r2 * i / N;
    for (int j = 1; j <= N; ++j) {
      const double u2 = r2 * (1.0 + 400.0 * std::pow(static_cast<double>(j) / N, 2));
      const double w = (r2 - u1) / (u2 - u1);
      best = std::max(best, (1.0 - w) * g(u1) + w * g(u2));
    }
  }
  return best;
}

// Fractional knapsack: the worst 0/1 loss over the ball, solved in the primal.
double knapsack_01(std::vector<double> d, double rho) {
  std::sort(d.begin(), d.end());
  const double n = static_cast<double>(d.size());
  double budget = n * rho * rho, mass = 0.0;
  for (double v : d) {
    const double c = v * v;
    if (c <= budget) {
      budget -= c;
      mass += 1.0;
    } else {
      mass += budget / c;
      break;
    }
  }
  return mass / n;
}

}  // namespace

TEST(Surrogate, ValueExamples) {
  LinearHead h{Mat::Zero(2, 1), Vec::Zero(2)};
  h.bias << 1.0, 0.0;  // margin exactly 1: hinge loss 0 for class 0
  const RepPoint z0{Vec::Zero(1), 0};
  const auto fam = LossFamily::cross_entropy();
  EXPECT_DOUBLE_EQ(surrogate_value(h, z0, z0.z, 5.0, fam), loss(h, z0.z, 0, fam));
  Vec z(1);
  z << 1.0;
  EXPECT_DOUBLE_EQ(surrogate_value(h, z0, z, 0.0, fam), loss(h, z, 0, fam));
  EXPECT_DOUBLE_EQ(surrogate_value(h, z0, z, 2.0, LossFamily::modified_hinge(0.1)), -2.0);
  EXPECT_THROW(surrogate_value(h, z0, z, -1.0, fam), Error);
}

TEST(Surrogate, LargeGammaStaysPut) {
  std::mt19937_64 rng(1);
  const auto head = random_head(rng, 3, 2);
  const RepPoint z0{randn(rng, 2), 1};
  const auto r = maximize_surrogate_rep(head, z0, 1e6, 200, 0.1, LossFamily::cross_entropy());
  EXPECT_LT((r.z - z0.z).norm(), 1e-5);
  EXPECT_NEAR(r.phi, loss(head, z0.z, 1, LossFamily::cross_entropy()), 1e-6);
}

TEST(Surrogate, HingeClosedFormMatchesAscentAndSampling) {
  std::mt19937_64 rng(2);
  for (int probe = 0; probe < 40; ++probe) {
    const int C = 2 + probe % 3;
    const auto head = random_head(rng, C, 2);
    const RepPoint z0{randn(rng, 2), probe % C};
    const double gamma = 0.2 + 0.3 * (probe % 7);
    const auto fam = LossFamily::modified_hinge(probe % 2 ? 0.1 : 0.5);
    const auto cf = maximize_hinge_closed_form(head, z0, gamma, fam);
    EXPECT_NEAR(cf.phi, surrogate_value(head, z0, cf.z, gamma, fam), 1e-12);
    // dense grid over a box holding every piece maximizer, then ascent from the
    // best cell; the objective has several local maxima, so no single start
    double R = 0.0;
    for (int k = 0; k < C; ++k) R = std::max(R, (head.weight.row(z0.y) - head.weight.row(k)).norm() / (2.0 * gamma));
    R += 0.1;
    const int N = 400;
    Vec z = z0.z;
    double best = surrogate_value(head, z0, z, gamma, fam);
    for (int i = 0; i <= N; ++i)
      for (int j = 0; j <= N; ++j) {
        Vec c = z0.z;
        c[0] += R * (2.0 * i / N - 1.0);
        c[1] += R * (2.0 * j / N - 1.0);
        const double v = surrogate_value(head, z0, c, gamma, fam);
        if (v > best) {
          best = v;
          z = c;
        }
      }
    for (int s = 0; s < 20000; ++s) {
      const Vec g = grad_loss_z(head, z, z0.y, fam) - 2.0 * gamma * (z - z0.z);
      z += (0.01 * R / (1.0 + 0.01 * s)) * g;
      best = std::max(best, surrogate_value(head, z0, z, gamma, fam));
    }
    EXPECT_GE(cf.phi, best - 1e-9);
    EXPECT_NEAR(cf.phi, best, 1e-4);
    for (int s = 0; s < 2000; ++s) {
      const Vec cand = z0.z + randn(rng, 2, 2.0 / gamma);
      EXPECT_GE(cf.phi, surrogate_value(head, z0, cand, gamma, fam) - 1e-12);
    }
  }
  const RepPoint z0{Vec::Zero(2), 0};
  std::mt19937_64 r2(3);
  try {
    maximize_hinge_closed_form(random_head(r2, 2, 2), z0, 0.0, LossFamily::modified_hinge(0.1));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unbounded_surrogate);
  }
}

TEST(Surrogate, PhiNonIncreasingInGamma) {
  std::mt19937_64 rng(4);
  for (int probe = 0; probe < 20; ++probe) {
    const auto head = random_head(rng, 3, 2);
    const RepPoint z0{randn(rng, 2), probe % 3};
    for (auto fam : {LossFamily::cross_entropy(), LossFamily::modified_hinge(0.1)}) {
      const double g0 = std::max(1e-3, concavity_threshold(head, fam));
      double prev = std::numeric_limits<double>::infinity();
      for (int k = 0; k < 30; ++k) {
        const double gamma = g0 * std::pow(1.3, k);
        const double phi = maximize_surrogate_rep(head, z0, gamma, 3000, 0.1, fam).phi;
        EXPECT_LE(phi, prev + 1e-9);
        EXPECT_GE(phi, loss(head, z0.z, z0.y, fam) - 1e-12);
        prev = phi;
      }
    }
  }
}

TEST(Surrogate, DivergenceGuard) {
  LinearHead h{Mat::Zero(2, 1), Vec::Zero(2)};
  h.weight << 1.0, -1.0;
  const RepPoint z0{Vec::Zero(1), 0};
  // gamma = 0 and a tiny cap: the cross-entropy pull never stops
  try {
    maximize_surrogate_rep(h, z0, 0.0, 100000, 1.0, LossFamily::cross_entropy(), std::nullopt, 1.0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unbounded_surrogate);
  }
  EXPECT_THROW(maximize_surrogate_rep(h, z0, 1.0, 10, 0.1, LossFamily::zero_one()), Error);
}

TEST(CertDg, ZeroRadiusIsEmpiricalLoss) {
  std::mt19937_64 rng(5);
  const auto head = random_head(rng, 3, 2);
  const auto reps = random_reps(rng, 100, 2, 3);
  for (auto fam : {LossFamily::cross_entropy(), LossFamily::modified_hinge(0.1)})
    EXPECT_NEAR(cert_dg(head, reps, 0.0, test_config(), fam).worst_case_loss, mean_loss_of(head, reps, fam), 1e-12);
  std::size_t wrong = 0;
  for (const auto& p : reps) wrong += predict(logits(head, p.z)) != p.y;
  EXPECT_DOUBLE_EQ(cert_01(head, reps, 0.0).worst_case_loss, static_cast<double>(wrong) / 100.0);
}

TEST(CertDg, WeakDualitySoundness) {
  std::mt19937_64 rng(6);
  for (int inst = 0; inst < 4; ++inst) {
    const auto head = random_head(rng, 2 + inst % 2, 2);
    const auto reps = random_reps(rng, 60, 2, 2 + inst % 2);
    for (double rho : {0.1, 0.5, 1.5}) {
      for (auto fam : {LossFamily::cross_entropy(), LossFamily::modified_hinge(0.1), LossFamily::zero_one()}) {
        const double cert = fam.kind == LossKind::zero_one ? cert_01(head, reps, rho).worst_case_loss
                                                           : cert_dg(head, reps, rho, test_config(), fam).worst_case_loss;
        EXPECT_GE(cert, mean_loss_of(head, reps, fam) - 1e-6);
        const double tol = fam.kind == LossKind::zero_one ? 0.0 : 1e-3;
        for (int draw = 0; draw < 25; ++draw) {
          const auto moved = feasible_perturbation(rng, head, reps, rho, draw % 2 == 0, fam);
          EXPECT_LE(mean_loss_of(head, moved, fam), cert + tol);
        }
      }
    }
  }
}

TEST(CertDg, HingeSinglePointMatchesPrimal) {
  for (double base : {-1.5, -0.2, 0.4}) {
    for (double rho : {0.3, 1.0, 2.0}) {
      LinearHead h{Mat::Zero(2, 2), Vec::Zero(2)};
      h.weight << 0.8, 0.6, 0.0, 0.0;  // ||a|| = 1
      h.bias << 1.0 - base, 0.0;       // 1 - margin at z = 0 equals base
      const std::vector<RepPoint> one{{Vec::Zero(2), 0}};
      const auto fam = LossFamily::modified_hinge(0.1);
      const double cert = cert_dg(h, one, rho, test_config(), fam).worst_case_loss;
      EXPECT_NEAR(cert, hinge_single_point_primal(base, 1.0, 0.1, rho), 1e-3) << base << " " << rho;
    }
  }
}

TEST(CertDg, BinaryCrossEntropyTightAgainstPrimal) {
  // Moving every point a distance rho straight across its boundary is feasible,
  // and for a binary linear head it is close to the worst case.
  std::mt19937_64 rng(7);
  const auto head = random_head(rng, 2, 2);
  const auto reps = random_reps(rng, 80, 2, 2);
  const auto fam = LossFamily::cross_entropy();
  for (double rho : {0.25, 0.5, 1.0}) {
    const auto c = cert_dg(head, reps, rho, test_config(), fam);
    std::vector<RepPoint> moved = reps;
    for (auto& p : moved) {
      const Vec a = head.weight.row(p.y) - head.weight.row(1 - p.y);
      p.z -= rho * a / a.norm();
    }
    const double primal = mean_loss_of(head, moved, fam);
    EXPECT_LE(primal, c.worst_case_loss + 1e-9);
    EXPECT_LE(c.worst_case_loss, primal * 1.25);
    EXPECT_TRUE(c.converged);
    EXPECT_GE(c.mean_sq_distortion, 0.0);
  }
}

TEST(CertDg, DeterministicAcrossThreads) {
  std::mt19937_64 rng(8);
  const auto head = random_head(rng, 3, 2);
  const auto reps = random_reps(rng, 90, 2, 3);
  auto a = test_config(), b = test_config();
  b.threads = 4;
  const auto fam = LossFamily::cross_entropy();
  const auto ca = cert_dg(head, reps, 0.7, a, fam), cb = cert_dg(head, reps, 0.7, b, fam);
  EXPECT_EQ(ca.worst_case_loss, cb.worst_case_loss);
  EXPECT_EQ(ca.gamma_opt, cb.gamma_opt);
  EXPECT_EQ(ca.worst_case_loss, cert_dg(head, reps, 0.7, a, fam).worst_case_loss);
}

TEST(CertDg, ErrorsAndValidation) {
  std::mt19937_64 rng(9);
  const auto head = random_head(rng, 2, 2);
  const auto reps = random_reps(rng, 10, 2, 2);
  const auto fam = LossFamily::cross_entropy();
  try {
    cert_dg(head, reps, 1.0, test_config(), LossFamily::zero_one());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::unsupported_loss);
  }
  EXPECT_THROW(cert_dg(head, reps, -1.0, test_config(), fam), Error);
  EXPECT_THROW(cert_dg(head, std::vector<RepPoint>{}, 1.0, test_config(), fam), Error);
  auto bad = test_config();
  bad.gamma_min = 2.0;
  EXPECT_THROW(cert_dg(head, reps, 1.0, bad, fam), Error);
  const std::vector<double> unsorted{1.0, 0.5};
  EXPECT_THROW(cert_sweep(head, reps, unsorted, test_config(), fam), Error);
}

TEST(Cert01, ClosedFormMatchesGridAndKnapsack) {
  std::mt19937_64 rng(10);
  std::uniform_real_distribution<double> unif(0.1, 3.0);
  const int G = 100000;
  for (int inst = 0; inst < 20; ++inst) {
    std::vector<double> d(30);
    for (auto& v : d) v = unif(rng);
    for (int k = 0; k < inst % 4; ++k) d[static_cast<std::size_t>(k)] = 0.0;
    for (double rho : {0.05, 0.3, 1.0, 2.0}) {
      const auto c = cert_01_from_margins(d, rho);
      double grid = std::numeric_limits<double>::infinity();
      for (int i = 0; i < G; ++i) {
        const double gamma = std::exp(std::log(1e-20) + (std::log(100.0) - std::log(1e-20)) * i / (G - 1));
        double s = 0.0;
        for (double v : d) s += std::max(0.0, 1.0 - gamma * v * v);
        grid = std::min(grid, gamma * rho * rho + s / static_cast<double>(d.size()));
      }
      EXPECT_LE(c.worst_case_loss, grid + 1e-12);
      EXPECT_NEAR(c.worst_case_loss, grid, 1e-4);
      EXPECT_NEAR(c.worst_case_loss, knapsack_01(d, rho), 1e-12);
    }
  }
}

TEST(Cert01, Examples) {
  const std::vector<double> twos(10, 2.0);
  EXPECT_NEAR(cert_01_from_margins(twos, 1.0).worst_case_loss, 0.25, 1e-15);
  EXPECT_NEAR(cert_01_from_margins(twos, 1.0).gamma_opt, 0.25, 1e-15);
  EXPECT_EQ(cert_01_from_margins(twos, 2.0).worst_case_loss, 1.0);
  EXPECT_EQ(cert_01_from_margins(twos, 3.0).worst_case_loss, 1.0);
  const std::vector<double> mixed{0.0, 1.0, 1.0, 1.0};
  EXPECT_EQ(cert_01_from_margins(mixed, 0.0).worst_case_loss, 0.25);
}

TEST(Cert01, DualIsConvexInGamma) {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> unif(0.0, 2.0);
  std::vector<double> d(40);
  for (auto& v : d) v = unif(rng);
  std::vector<double> f;
  for (int i = 0; i <= 2000; ++i) f.push_back(dual_objective_01(0.01 * i, 0.7, d));
  for (std::size_t i = 1; i + 1 < f.size(); ++i) EXPECT_GE(f[i - 1] + f[i + 1] - 2.0 * f[i], -1e-9);
}

TEST(Cert01, AtAdversarialRadius) {
  std::mt19937_64 rng(12);
  for (int inst = 0; inst < 10; ++inst) {
    const auto head = random_head(rng, 2 + inst % 3, 2);
    const auto reps = random_reps(rng, 50, 2, 2 + inst % 3);
    const auto adv = gen_adv_distribution(head, reps);
    const double ra = rho_adv(reps, adv);
    const auto d = misclassification_margins(head, reps);
    double msq = 0.0;
    for (double v : d) msq += v * v / static_cast<double>(d.size());
    const double c = cert_01(head, reps, ra, ra).worst_case_loss;
    EXPECT_LE(c, 1.0);
    if (ra * ra >= msq) {
      EXPECT_EQ(c, 1.0);
    }
  }
}

TEST(Sweep, MonotoneAndDuplicates) {
  std::mt19937_64 rng(13);
  const auto head = random_head(rng, 3, 2);
  const auto reps = random_reps(rng, 60, 2, 3);
  std::vector<double> radii;
  for (int i = 0; i < 30; ++i) radii.push_back(0.1 * i);
  const auto z1 = cert_sweep(head, reps, radii, test_config(), LossFamily::zero_one());
  ASSERT_EQ(z1.size(), 30u);
  for (std::size_t i = 1; i < z1.size(); ++i) EXPECT_GE(z1[i].worst_case_loss, z1[i - 1].worst_case_loss);

  auto cfg = test_config();
  cfg.track_perturbations = true;
  const std::vector<double> few{0.0, 0.2, 0.4, 0.4, 0.8, 1.6};
  const auto ce = cert_sweep(head, reps, few, cfg, LossFamily::cross_entropy());
  EXPECT_NEAR(ce[0].worst_case_loss, mean_loss_of(head, reps, LossFamily::cross_entropy()), 1e-12);
  for (std::size_t i = 1; i < ce.size(); ++i) {
    EXPECT_TRUE(ce[i].error.empty());
    EXPECT_GE(ce[i].worst_case_loss, ce[i - 1].worst_case_loss - 1e-3);
  }
  EXPECT_NEAR(ce[2].worst_case_loss, ce[3].worst_case_loss, 1e-3);
  const std::vector<double> zero{0.0};
  EXPECT_EQ(cert_sweep(head, reps, zero, cfg, LossFamily::cross_entropy()).size(), 1u);
}

TEST(InputSurrogate, NeverExceedsRepresentationSurrogate) {
  const auto fam = LossFamily::cross_entropy();
  int probes = 0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto p = random_model(s);
    std::mt19937_64 rng(s + 50);
    const double g0 = std::max(0.05, concavity_threshold(p.head, fam));
    for (int k = 0; k < 10; ++k, ++probes) {
      const LabeledPoint x0{randn(rng, 2), k % 2};
      const double gamma = g0 * (1.0 + k);
      const RepPoint z0{forward_rep(p, x0.x), x0.y};
      const double rep = maximize_surrogate_rep(p.head, z0, gamma, 3000, 0.1, fam).phi;
      const double in = maximize_surrogate_input(p, x0, gamma, 300, 0.1, fam).phi;
      EXPECT_LE(in, rep + 1e-4);
    }
  }
  EXPECT_EQ(probes, 200);
}

TEST(InputSurrogate, IdentityNetworkAgreesWithRepresentation) {
  std::mt19937_64 rng(14);
  const auto fam = LossFamily::cross_entropy();
  for (int k = 0; k < 10; ++k) {
    ModelParams p;
    p.layers.push_back({Mat::Identity(2, 2), Vec::Zero(2), Activation::identity});
    p.head = random_head(rng, 3, 2);
    const LabeledPoint x0{randn(rng, 2), k % 3};
    const double gamma = std::max(0.05, concavity_threshold(p.head, fam)) * 1.5;
    const double rep = maximize_surrogate_rep(p.head, {x0.x, x0.y}, gamma, 5000, 0.1, fam).phi;
    EXPECT_NEAR(maximize_surrogate_input(p, x0, gamma, 5000, 0.1, fam).phi, rep, 1e-6);
    EXPECT_LT((maximize_surrogate_input(p, x0, 1e6, 100, 0.1, fam).x - x0.x).norm(), 1e-5);
  }
}
