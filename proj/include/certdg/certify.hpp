#pragma once

// Worst-case loss over a W2 ball in representation space, computed through
// the one-dimensional dual
//
//   sup_{P : W2(P, Q) <= rho} E_P[loss] = inf_{gamma >= 0} gamma rho^2 + E_Q[phi_gamma(z0, y0)],
//   phi_gamma(z0, y0) = sup_z loss(W z + b, y0) - gamma ||z - z0||^2.
//
// cert_dg alternates ascent on the buffered points z^i with a clipped
// gradient step on gamma. cert_01 solves the 0/1 case exactly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "certdg/adversarial.hpp"
#include "certdg/errors.hpp"
#include "certdg/netcore.hpp"
#include "certdg/parallel.hpp"

namespace certdg {

struct CertConfig {
  int T1 = 5;  // outer epochs
  int T2 = 1;  // ascent steps per batch
  double alpha_step = 0.1;
  double beta_step = 0.05;
  double gamma_init = 1.0;
  double gamma_min = 1e-6;
  double gamma_max = 1e4;
  int batch = 128;
  std::uint64_t seed = 0;
  bool track_perturbations = false;
  // Ascent steps at the final gamma before the certificate is read off.
  int polish_steps = 500;
  // Golden-section iterations over log gamma after the alternating loop.
  int refine_steps = 40;
  // Relative tolerance on |rho^2 - mean distortion| for the converged flag.
  double dual_tol = 0.05;
  double divergence_cap = 1e6;  // times m, on ||z - z0||^2
  int threads = 1;

  void validate() const {
    require(gamma_min > 0.0 && gamma_min <= gamma_init && gamma_init <= gamma_max,
            "need 0 < gamma_min <= gamma_init <= gamma_max");
    require(alpha_step > 0.0 && beta_step > 0.0, "step sizes must be positive");
    require(T1 >= 1 && T2 >= 1 && batch >= 1, "T1, T2 and batch must be >= 1");
    require(polish_steps >= 0 && refine_steps >= 0, "polish_steps and refine_steps must be >= 0");
    require(dual_tol >= 0.0 && divergence_cap > 0.0, "invalid tolerances");
  }
};

struct DualState {
  double gamma = 1.0;
  std::vector<Vec> z;
  std::vector<double> sq_distortion;
};

struct Certificate {
  NormalizedRadius radius;
  LossKind family = LossKind::cross_entropy;
  double worst_case_loss = 0.0;
  double gamma_opt = 0.0;
  double mean_sq_distortion = 0.0;
  double dual_gap_diag = 0.0;
  int iterations_used = 0;
  bool converged = true;
  std::string error;  // set when this radius failed inside a sweep
};

inline double surrogate_value(const LinearHead& head, const RepPoint& z0, const Vec& z, double gamma,
                              const LossFamily& fam) {
  require(gamma >= 0.0, "gamma must be non-negative");
  return loss(head, z, z0.y, fam) - gamma * (z - z0.z).squaredNorm();
}

// Upper bound on the largest eigenvalue of the loss Hessian in z.
// Cross-entropy: W^T (diag p - p p^T) W <= 1/2 (1 - 1/C) max_jk ||W_j - W_k||^2.
// The modified hinge is piecewise linear.
inline double loss_curvature_bound(const LinearHead& head, const LossFamily& fam) {
  if (fam.kind != LossKind::cross_entropy) return 0.0;
  double mx = 0.0;
  const Eigen::Index C = head.classes();
  for (Eigen::Index j = 0; j < C; ++j)
    for (Eigen::Index k = j + 1; k < C; ++k) mx = std::max(mx, (head.weight.row(j) - head.weight.row(k)).squaredNorm());
  return 0.5 * (1.0 - 1.0 / static_cast<double>(C)) * mx;
}

// Smallest gamma for which phi_gamma is strongly concave in z.
inline double concavity_threshold(const LinearHead& head, const LossFamily& fam) {
  return 0.5 * loss_curvature_bound(head, fam);
}

inline double ascent_step(double alpha, double gamma, double curvature) {
  return std::min(alpha, 1.0 / (2.0 * gamma + curvature));
}

struct SurrogateMax {
  Vec z;
  double phi = 0.0;
};

// For alpha <= 1 the modified hinge is a maximum of affine functions of z,
//   l(z) = max_{s in {1, alpha}, k != y} s (1 - (w_y - w_k) z - (b_y - b_k)),
// and each piece minus gamma ||z - z0||^2 has an exact maximizer.
inline bool hinge_closed_form(const LossFamily& fam) {
  return fam.kind == LossKind::modified_hinge && fam.hinge_alpha > 0.0 && fam.hinge_alpha <= 1.0;
}

inline SurrogateMax maximize_hinge_closed_form(const LinearHead& head, const RepPoint& z0, double gamma,
                                               const LossFamily& fam) {
  if (!(gamma > 0.0)) fail(ErrorKind::unbounded_surrogate, "hinge surrogate is unbounded at gamma = 0");
  const Vec lg = logits(head, z0.z);
  SurrogateMax best{z0.z, -std::numeric_limits<double>::infinity()};
  for (Eigen::Index k = 0; k < head.classes(); ++k) {
    if (k == z0.y) continue;
    const Vec a = head.weight.row(z0.y) - head.weight.row(k);
    const double base = 1.0 - (lg[z0.y] - lg[k]);
    for (double s : {1.0, fam.hinge_alpha}) {
      const double v = s * base + s * s * a.squaredNorm() / (4.0 * gamma);
      if (v > best.phi) best = {Vec(z0.z - (s / (2.0 * gamma)) * a), v};
    }
  }
  // report the value the loss actually attains at the maximizer
  best.phi = surrogate_value(head, z0, best.z, gamma, fam);
  const double at_z0 = surrogate_value(head, z0, z0.z, gamma, fam);
  if (at_z0 > best.phi) best = {z0.z, at_z0};
  return best;
}

inline SurrogateMax maximize_surrogate_rep(const LinearHead& head, const RepPoint& z0, double gamma, int steps,
                                           double alpha_step, const LossFamily& fam,
                                           const std::optional<Vec>& warm_start = std::nullopt,
                                           double divergence_cap = 1e6) {
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "surrogate ascent needs a differentiable loss");
  require(gamma >= 0.0, "gamma must be non-negative");
  require(alpha_step > 0.0 && steps >= 0, "invalid ascent parameters");
  if (hinge_closed_form(fam)) return maximize_hinge_closed_form(head, z0, gamma, fam);
  const double step = ascent_step(alpha_step, gamma, loss_curvature_bound(head, fam));
  const double cap = divergence_cap * static_cast<double>(z0.z.size());

  SurrogateMax best{z0.z, surrogate_value(head, z0, z0.z, gamma, fam)};
  Vec z = warm_start ? *warm_start : z0.z;
  if (warm_start) {
    const double v = surrogate_value(head, z0, z, gamma, fam);
    if (v > best.phi) best = {z, v};
  }
  for (int s = 0; s < steps; ++s) {
    const Vec g = grad_loss_z(head, z, z0.y, fam) - 2.0 * gamma * (z - z0.z);
    if (step * g.norm() <= 1e-13 * (1.0 + z.norm())) break;
    z += step * g;
    const double dist = (z - z0.z).squaredNorm();
    if (!(dist <= cap)) fail(ErrorKind::unbounded_surrogate, "surrogate ascent diverged; gamma below concavity threshold?");
    const double v = surrogate_value(head, z0, z, gamma, fam);
    if (v > best.phi) best = {z, v};
  }
  return best;
}

// Penalized ascent over inputs with the distance measured between
// representations, g(x) vs g(x0). Step length adapts by halving on decrease.
struct InputSurrogateMax {
  Vec x;
  double phi = 0.0;
};

inline InputSurrogateMax maximize_surrogate_input(const ModelParams& params, const LabeledPoint& x0, double gamma,
                                                  int steps, double alpha_step, const LossFamily& fam,
                                                  double divergence_cap = 1e6) {
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "surrogate ascent needs a differentiable loss");
  require(gamma >= 0.0 && alpha_step > 0.0 && steps >= 0, "invalid ascent parameters");
  const Vec z0 = forward_rep(params, x0.x);
  auto value = [&](const Vec& x) {
    const Vec z = forward_rep(params, x);
    return loss(params.head, z, x0.y, fam) - gamma * (z - z0).squaredNorm();
  };
  auto gradient = [&](const Vec& x) {
    ForwardTrace tr = forward_trace(params.layers, x);
    const Vec dz = grad_loss_z(params.head, tr.out, x0.y, fam) - 2.0 * gamma * (tr.out - z0);
    return backprop_layers(params.layers, tr, dz, {});
  };
  const double cap = divergence_cap * static_cast<double>(z0.size());
  Vec x = x0.x;
  double cur = value(x);
  double step = alpha_step;
  for (int s = 0; s < steps; ++s) {
    const Vec g = gradient(x);
    if (!(g.squaredNorm() > 0.0)) break;
    bool moved = false;
    for (int h = 0; h < 40; ++h) {
      const Vec cand = x + step * g;
      const double v = value(cand);
      if (v > cur) {
        x = cand;
        cur = v;
        moved = true;
        step = std::min(alpha_step, step * 1.5);
        break;
      }
      step *= 0.5;
    }
    if (!moved) break;
    if (!((forward_rep(params, x) - z0).squaredNorm() <= cap))
      fail(ErrorKind::unbounded_surrogate, "input-space surrogate ascent diverged");
  }
  return {x, cur};
}

inline double mean_loss(const LinearHead& head, std::span<const RepPoint> reps, const LossFamily& fam) {
  double s = 0.0;
  for (const auto& p : reps) s += loss(head, p.z, p.y, fam);
  return s / static_cast<double>(reps.size());
}

struct CertResult {
  Certificate certificate;
  DualState state;
};

namespace detail {

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(epoch), 0x0ce27u};
  std::mt19937_64 rng(ss);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

inline double clip(double v, double lo, double hi) { return std::min(hi, std::max(lo, v)); }

}  // namespace detail

// Alternating saddle-point solver. The value returned is the dual objective
// gamma rho^2 + mean phi_gamma, each phi_gamma re-maximized for polish_steps
// from the buffered point, at the best gamma seen.
inline CertResult cert_dg_with_state(const LinearHead& head, std::span<const RepPoint> source, double rho,
                                     const CertConfig& cfg, const LossFamily& fam, double unit = 1.0,
                                     const DualState* warm = nullptr) {
  cfg.validate();
  require(!source.empty(), "cert_dg: empty source");
  require(rho >= 0.0 && std::isfinite(rho), "cert_dg: radius must be finite and non-negative");
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "cert_dg needs a differentiable loss; use cert_01");
  const std::size_t n = source.size();

  CertResult out;
  Certificate& c = out.certificate;
  c.radius = NormalizedRadius::from_raw(rho, unit);
  c.family = fam.kind;
  DualState& st = out.state;

  if (rho == 0.0) {
    c.worst_case_loss = mean_loss(head, source, fam);
    c.gamma_opt = cfg.gamma_max;
    st.gamma = cfg.gamma_max;
    for (const auto& p : source) st.z.push_back(p.z);
    st.sq_distortion.assign(n, 0.0);
    return out;
  }

  const double curvature = loss_curvature_bound(head, fam);
  const double gamma_lo = std::min(cfg.gamma_max, std::max(cfg.gamma_min, 0.5 * curvature));
  const double rho2 = rho * rho;
  const double cap = cfg.divergence_cap * static_cast<double>(source.front().z.size());

  st.gamma = detail::clip(warm ? warm->gamma : cfg.gamma_init, gamma_lo, cfg.gamma_max);
  if (warm && warm->z.size() == n) st.z = warm->z;
  else for (const auto& p : source) st.z.push_back(p.z);
  st.sq_distortion.assign(n, 0.0);

  int iterations = 0;
  for (int epoch = 0; epoch < cfg.T1; ++epoch) {
    const auto order = detail::epoch_order(n, cfg.seed, epoch);
    for (std::size_t lo = 0; lo < n; lo += static_cast<std::size_t>(cfg.batch)) {
      const std::size_t hi = std::min(n, lo + static_cast<std::size_t>(cfg.batch));
      for (int t = 0; t < cfg.T2; ++t) {
        const double step = ascent_step(cfg.alpha_step, st.gamma, curvature);
        const double gamma = st.gamma;
        parallel_for(hi - lo, cfg.threads, [&](std::size_t q) {
          const std::size_t i = order[lo + q];
          Vec& z = st.z[i];
          z += step * (grad_loss_z(head, z, source[i].y, fam) - 2.0 * gamma * (z - source[i].z));
          st.sq_distortion[i] = (z - source[i].z).squaredNorm();
        });
        double msd = 0.0;
        for (std::size_t q = lo; q < hi; ++q) {
          const double d = st.sq_distortion[order[q]];
          if (!(d <= cap)) fail(ErrorKind::unbounded_surrogate, "cert_dg ascent diverged");
          msd += d;
        }
        msd /= static_cast<double>(hi - lo);
        st.gamma = detail::clip(st.gamma - cfg.beta_step * (rho2 - msd), gamma_lo, cfg.gamma_max);
        ++iterations;
      }
    }
  }

  // Every gamma >= gamma_lo gives a valid bound once phi is maximized, and
  // the dual is convex in gamma, so a golden-section pass over log gamma
  // tightens whatever the alternating loop reached.
  struct Eval {
    double gamma, value, msd;
    std::vector<Vec> z;
  };
  auto evaluate = [&](double gamma) {
    Eval e{gamma, 0.0, 0.0, std::vector<Vec>(n)};
    std::vector<double> phi(n);
    parallel_for(n, cfg.threads, [&](std::size_t i) {
      auto r = maximize_surrogate_rep(head, source[i], gamma, cfg.polish_steps, cfg.alpha_step, fam, st.z[i],
                                      cfg.divergence_cap);
      e.z[i] = std::move(r.z);
      phi[i] = r.phi;
    });
    double phi_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      phi_sum += phi[i];
      e.msd += (e.z[i] - source[i].z).squaredNorm();
    }
    e.msd /= static_cast<double>(n);
    e.value = gamma * rho2 + phi_sum / static_cast<double>(n);
    return e;
  };
  Eval best = evaluate(st.gamma);
  auto consider = [&](Eval&& e) {
    if (e.value < best.value) best = std::move(e);
  };
  if (cfg.refine_steps > 0 && gamma_lo < cfg.gamma_max) {
    const double phi_g = (std::sqrt(5.0) - 1.0) / 2.0;
    double a = std::log(gamma_lo), b = std::log(cfg.gamma_max);
    double x1 = b - phi_g * (b - a), x2 = a + phi_g * (b - a);
    Eval e1 = evaluate(std::exp(x1)), e2 = evaluate(std::exp(x2));
    for (int it = 0; it < cfg.refine_steps; ++it) {
      if (e1.value <= e2.value) {
        b = x2;
        x2 = x1;
        consider(std::move(e2));
        e2 = std::move(e1);
        x1 = b - phi_g * (b - a);
        e1 = evaluate(std::exp(x1));
      } else {
        a = x1;
        x1 = x2;
        consider(std::move(e1));
        e1 = std::move(e2);
        x2 = a + phi_g * (b - a);
        e2 = evaluate(std::exp(x2));
      }
    }
    consider(std::move(e1));
    consider(std::move(e2));
    consider(evaluate(gamma_lo));
    consider(evaluate(cfg.gamma_max));
  }
  st.gamma = best.gamma;
  st.z = std::move(best.z);
  for (std::size_t i = 0; i < n; ++i) st.sq_distortion[i] = (st.z[i] - source[i].z).squaredNorm();
  const double msd = best.msd;

  c.worst_case_loss = best.value;
  c.gamma_opt = st.gamma;
  c.mean_sq_distortion = msd;
  c.dual_gap_diag = std::abs(rho2 - msd);
  c.iterations_used = iterations;
  const bool at_lo = st.gamma <= gamma_lo && msd <= rho2;
  const bool at_hi = st.gamma >= cfg.gamma_max && msd >= rho2;
  c.converged = c.dual_gap_diag <= cfg.dual_tol * rho2 || at_lo || at_hi;
  return out;
}

inline Certificate cert_dg(const LinearHead& head, std::span<const RepPoint> source, double rho,
                           const CertConfig& cfg, const LossFamily& fam, double unit = 1.0) {
  return cert_dg_with_state(head, source, rho, cfg, fam, unit).certificate;
}

inline constexpr double kGamma01Min = 1e-20;
inline constexpr double kGamma01Max = 100.0;

// Dual objective for the 0/1 loss: gamma rho^2 + mean max(0, 1 - gamma d_i^2).
inline double dual_objective_01(double gamma, double rho, std::span<const double> margins) {
  double s = 0.0;
  for (double d : margins) s += std::max(0.0, 1.0 - gamma * d * d);
  return gamma * rho * rho + s / static_cast<double>(margins.size());
}

// The objective is convex and piecewise linear in gamma, so its minimum on
// [1e-20, 100] sits at a breakpoint 1/d_i^2 or at a bound.
inline Certificate cert_01_from_margins(std::span<const double> margins, double rho, double unit = 1.0) {
  require(!margins.empty(), "cert_01: empty source");
  require(rho >= 0.0 && std::isfinite(rho), "cert_01: radius must be finite and non-negative");
  Certificate c;
  c.radius = NormalizedRadius::from_raw(rho, unit);
  c.family = LossKind::zero_one;
  const double n = static_cast<double>(margins.size());
  if (rho == 0.0) {
    std::size_t errors = 0;
    for (double d : margins) errors += d == 0.0 ? 1 : 0;
    c.worst_case_loss = static_cast<double>(errors) / n;
    c.gamma_opt = kGamma01Max;
    return c;
  }
  std::vector<double> candidates{kGamma01Min, kGamma01Max};
  for (double d : margins) {
    if (d <= 0.0) continue;
    const double g = 1.0 / (d * d);
    if (g > kGamma01Min && g < kGamma01Max) candidates.push_back(g);
  }
  std::sort(candidates.begin(), candidates.end());
  double best = std::numeric_limits<double>::infinity(), best_gamma = kGamma01Max;
  for (double g : candidates) {
    const double v = dual_objective_01(g, rho, margins);
    if (v < best) {
      best = v;
      best_gamma = g;
    }
  }
  double moved = 0.0;
  for (double d : margins)
    if (best_gamma * d * d < 1.0) moved += d * d;
  c.worst_case_loss = best;
  c.gamma_opt = best_gamma;
  c.mean_sq_distortion = moved / n;
  c.dual_gap_diag = std::abs(rho * rho - c.mean_sq_distortion);
  return c;
}

inline std::vector<double> misclassification_margins(const LinearHead& head, std::span<const RepPoint> source) {
  std::vector<double> d;
  d.reserve(source.size());
  for (const auto& p : source) d.push_back(closest_misclassified(head, p.z, p.y).margin);
  return d;
}

inline Certificate cert_01(const LinearHead& head, std::span<const RepPoint> source, double rho, double unit = 1.0) {
  require(!source.empty(), "cert_01: empty source");
  const auto margins = misclassification_margins(head, source);
  return cert_01_from_margins(margins, rho, unit);
}

// One certificate per radius (raw units, ascending). Failures are recorded
// on the certificate and the sweep moves on.
inline std::vector<Certificate> cert_sweep(const LinearHead& head, std::span<const RepPoint> source,
                                           std::span<const double> radii, const CertConfig& cfg,
                                           const LossFamily& fam, double unit = 1.0) {
  require(std::is_sorted(radii.begin(), radii.end()), "cert_sweep: radii must be sorted ascending");
  std::vector<Certificate> out;
  std::vector<double> margins;
  if (fam.kind == LossKind::zero_one) margins = misclassification_margins(head, source);
  std::optional<DualState> warm;
  for (double rho : radii) {
    try {
      if (fam.kind == LossKind::zero_one) {
        out.push_back(cert_01_from_margins(margins, rho, unit));
      } else {
        auto r = cert_dg_with_state(head, source, rho, cfg, fam, unit,
                                    cfg.track_perturbations && warm ? &*warm : nullptr);
        out.push_back(r.certificate);
        if (rho > 0.0) warm = std::move(r.state);
      }
    } catch (const Error& e) {
      Certificate c;
      c.radius = NormalizedRadius{rho, unit, unit > 0.0 ? rho / unit : 0.0};
      c.family = fam.kind;
      c.worst_case_loss = std::numeric_limits<double>::quiet_NaN();
      c.converged = false;
      c.error = e.what();
      out.push_back(c);
    }
  }
  return out;
}

}  // namespace certdg
