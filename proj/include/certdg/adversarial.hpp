#pragma once

// Adversarial reference distribution (closest misclassified representation
// points), the distance unit rho_adv, and l2 PGD attacks.

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "certdg/errors.hpp"
#include "certdg/netcore.hpp"
#include "certdg/parallel.hpp"
#include "certdg/transport.hpp"

namespace certdg {

struct AdvPoint {
  Vec z_adv;
  double distortion = 0.0;  // ||z_adv - z||, includes the overshoot
  double margin = 0.0;      // exact distance from z to the misclassified region
};

struct AdvDistribution {
  std::vector<RepPoint> points;
  std::vector<double> per_point_distortion;
  std::vector<double> per_point_margin;
  double attack_success = 0.0;

  double mean_sq_margin() const {
    double s = 0.0;
    for (double d : per_point_margin) s += d * d;
    return per_point_margin.empty() ? 0.0 : s / static_cast<double>(per_point_margin.size());
  }
};

struct NormalizedRadius {
  double raw = 0.0;
  double unit = 1.0;
  double normalized = 0.0;

  static NormalizedRadius from_raw(double raw, double unit) {
    require(raw >= 0.0, "radius must be non-negative");
    require(unit > 0.0, "normalization unit must be positive");
    return {raw, unit, raw / unit};
  }
  static NormalizedRadius from_normalized(double normalized, double unit) {
    require(normalized >= 0.0, "radius must be non-negative");
    require(unit > 0.0, "normalization unit must be positive");
    return {normalized * unit, unit, normalized};
  }
};

inline bool misclassified(const LinearHead& head, const Vec& z, int y) { return predict(logits(head, z)) != y; }

// Exact closest misclassified point for a linear head: the misclassified
// region is the union of half-spaces {logit_k >= logit_y}, so its distance
// is the smallest signed margin to a y-vs-k hyperplane.
inline AdvPoint closest_misclassified(const LinearHead& head, const Vec& z, int y, double overshoot = 1e-4) {
  require(overshoot > 0.0, "overshoot must be positive");
  require(y >= 0 && y < head.classes(), "label out of range");
  if (misclassified(head, z, y)) return {z, 0.0, 0.0};

  double best = std::numeric_limits<double>::infinity();
  Vec normal;
  for (Eigen::Index k = 0; k < head.classes(); ++k) {
    if (k == y) continue;
    const Vec dw = head.weight.row(y).transpose() - head.weight.row(k).transpose();
    const double nrm = dw.norm();
    if (!(nrm > 0.0)) continue;  // parallel logits: class k never overtakes y
    const double d = (dw.dot(z) + head.bias[y] - head.bias[k]) / nrm;
    if (d < best) {
      best = d;
      normal = dw / nrm;
    }
  }
  if (!std::isfinite(best)) fail(ErrorKind::degenerate_head, "every class pair has identical weights");
  best = std::max(0.0, best);

  double extra = best * overshoot + 1e-12;
  Vec z_adv = z - (best + extra) * normal;
  for (int tries = 0; tries < 64 && !misclassified(head, z_adv, y); ++tries) {
    extra *= 2.0;
    z_adv = z - (best + extra) * normal;
  }
  return {z_adv, (z_adv - z).norm(), best};
}

inline AdvDistribution gen_adv_distribution(const LinearHead& head, std::span<const RepPoint> source,
                                            double overshoot = 1e-4, int threads = 1) {
  require(!source.empty(), "gen_adv_distribution: empty source");
  std::vector<AdvPoint> res(source.size());
  parallel_for(source.size(), threads,
               [&](std::size_t i) { res[i] = closest_misclassified(head, source[i].z, source[i].y, overshoot); });
  AdvDistribution out;
  std::size_t success = 0;
  for (std::size_t i = 0; i < source.size(); ++i) {
    out.points.push_back({res[i].z_adv, source[i].y});
    out.per_point_distortion.push_back(res[i].distortion);
    out.per_point_margin.push_back(res[i].margin);
    if (misclassified(head, res[i].z_adv, source[i].y)) ++success;
  }
  out.attack_success = static_cast<double>(success) / static_cast<double>(source.size());
  return out;
}

inline double rho_adv(std::span<const RepPoint> source, const AdvDistribution& adv) {
  require(source.size() == adv.points.size(), "rho_adv: source and adversarial sizes differ");
  for (std::size_t i = 0; i < source.size(); ++i)
    require(source[i].y == adv.points[i].y, "rho_adv: label mismatch at " + std::to_string(i));
  return w2_class_conditional(EmpiricalDistribution::uniform({source.begin(), source.end()}),
                              EmpiricalDistribution::uniform(adv.points));
}

struct PgdOptions {
  double epsilon = 0.0;
  int steps = 20;
  double step_size = 0.1;
};

inline Vec project_l2_ball(const Vec& center, const Vec& p, double radius) {
  const Vec d = p - center;
  const double n = d.norm();
  return n <= radius ? p : Vec(center + d * (radius / n));
}

namespace detail {

// Normalized-gradient ascent with projection, keeping the best iterate so the
// result never scores below the starting point.
template <typename LossFn, typename GradFn>
Vec pgd_l2(const Vec& start, const PgdOptions& opt, LossFn&& lossf, GradFn&& gradf) {
  require(opt.epsilon >= 0.0, "pgd epsilon must be non-negative");
  require(opt.steps >= 0 && opt.step_size > 0.0, "pgd needs steps >= 0 and step_size > 0");
  if (opt.epsilon == 0.0) return start;
  Vec cur = start, best = start;
  double best_loss = lossf(start);
  for (int s = 0; s < opt.steps; ++s) {
    const Vec g = gradf(cur);
    const double gn = g.norm();
    if (!(gn > 0.0)) break;
    cur = project_l2_ball(start, cur + (opt.step_size / gn) * g, opt.epsilon);
    const double l = lossf(cur);
    if (l > best_loss) {
      best_loss = l;
      best = cur;
    }
  }
  return best;
}

}  // namespace detail

inline Vec pgd_rep(const LinearHead& head, const Vec& z, int y, const PgdOptions& opt, const LossFamily& fam) {
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "pgd needs a differentiable loss");
  return detail::pgd_l2(
      z, opt, [&](const Vec& p) { return loss(head, p, y, fam); },
      [&](const Vec& p) { return grad_loss_z(head, p, y, fam); });
}

inline Vec pgd_input(const ModelParams& params, const Vec& x, int y, const PgdOptions& opt, const LossFamily& fam) {
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "pgd needs a differentiable loss");
  require(x.size() == params.input_dim(), "pgd_input: input dimension mismatch");
  return detail::pgd_l2(
      x, opt, [&](const Vec& p) { return loss(params.head, forward_rep(params, p), y, fam); },
      [&](const Vec& p) { return grad_loss_x(params, p, y, fam); });
}

inline std::string adv_to_csv(const AdvDistribution& adv) {
  std::string s = "index,y,distortion";
  const Eigen::Index m = adv.points.empty() ? 0 : adv.points.front().z.size();
  for (Eigen::Index c = 0; c < m; ++c) s += ",z" + std::to_string(c);
  s += "\n";
  for (std::size_t i = 0; i < adv.points.size(); ++i) {
    s += std::to_string(i) + "," + std::to_string(adv.points[i].y) + "," + fmt_exact(adv.per_point_distortion[i]);
    for (Eigen::Index c = 0; c < m; ++c) s += "," + fmt_exact(adv.points[i].z[c]);
    s += "\n";
  }
  return s;
}

}  // namespace certdg
