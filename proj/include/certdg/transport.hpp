#pragma once

// Discrete optimal transport: cost matrices, an exact solver (assignment for
// uniform marginals, transportation simplex otherwise), log-domain Sinkhorn,
// and the label-preserving W2 distance between empirical distributions.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "certdg/errors.hpp"
#include "certdg/io.hpp"
#include "certdg/netcore.hpp"

namespace certdg {

inline constexpr double kInfCost = std::numeric_limits<double>::infinity();

struct EmpiricalDistribution {
  std::vector<RepPoint> points;
  std::vector<double> weights;

  static EmpiricalDistribution uniform(std::vector<RepPoint> pts) {
    require(!pts.empty(), "empirical distribution needs at least one point");
    const double w = 1.0 / static_cast<double>(pts.size());
    std::vector<double> ws(pts.size(), w);
    return {std::move(pts), std::move(ws)};
  }

  std::size_t size() const { return points.size(); }

  void validate() const {
    require(!points.empty(), "empirical distribution needs at least one point");
    require(weights.size() == points.size(), "weights/points size mismatch");
    double s = 0.0;
    for (double w : weights) {
      require(w >= 0.0 && std::isfinite(w), "weights must be finite and non-negative");
      s += w;
    }
    require(std::abs(s - 1.0) <= 1e-9, "weights must sum to 1");
  }
};

struct TransportPlan {
  Mat plan;
  double cost = 0.0;
  bool converged = true;
};

inline Mat cost_matrix_class_constrained(const EmpiricalDistribution& A, const EmpiricalDistribution& B) {
  Mat C(static_cast<Eigen::Index>(A.size()), static_cast<Eigen::Index>(B.size()));
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = 0; j < B.size(); ++j)
      C(i, j) = A.points[i].y == B.points[j].y ? (A.points[i].z - B.points[j].z).squaredNorm() : kInfCost;
  return C;
}

// Feature distance plus lambda * ||onehot(y) - onehot(y')||^2.
inline Mat cost_matrix_joint(const EmpiricalDistribution& A, const EmpiricalDistribution& B, double lambda) {
  require(lambda >= 0.0, "lambda must be non-negative");
  Mat C(static_cast<Eigen::Index>(A.size()), static_cast<Eigen::Index>(B.size()));
  for (std::size_t i = 0; i < A.size(); ++i)
    for (std::size_t j = 0; j < B.size(); ++j)
      C(i, j) = (A.points[i].z - B.points[j].z).squaredNorm() + (A.points[i].y == B.points[j].y ? 0.0 : 2.0 * lambda);
  return C;
}

inline double plan_cost(const Mat& plan, const Mat& cost) {
  double s = 0.0;
  for (Eigen::Index i = 0; i < plan.rows(); ++i)
    for (Eigen::Index j = 0; j < plan.cols(); ++j)
      if (plan(i, j) > 0.0) s += plan(i, j) * cost(i, j);
  return s;
}

namespace detail {

inline void check_marginals(const Mat& cost, std::span<const double> a, std::span<const double> b) {
  require(cost.rows() == static_cast<Eigen::Index>(a.size()) && cost.cols() == static_cast<Eigen::Index>(b.size()),
          "cost matrix shape does not match marginals");
  require(!a.empty() && !b.empty(), "empty marginal");
  double sa = 0.0, sb = 0.0;
  for (double v : a) {
    require(v >= 0.0 && std::isfinite(v), "marginal entries must be finite and non-negative");
    sa += v;
  }
  for (double v : b) {
    require(v >= 0.0 && std::isfinite(v), "marginal entries must be finite and non-negative");
    sb += v;
  }
  require(std::abs(sa - sb) <= 1e-9 * std::max(1.0, sa), "marginals have different total mass");
}

inline void check_supported(const Mat& cost, std::span<const double> a, std::span<const double> b) {
  for (Eigen::Index i = 0; i < cost.rows(); ++i) {
    if (a[static_cast<std::size_t>(i)] <= 0.0) continue;
    bool any = false;
    for (Eigen::Index j = 0; j < cost.cols() && !any; ++j) any = std::isfinite(cost(i, j));
    if (!any) fail(ErrorKind::infeasible_transport, "row " + std::to_string(i) + " has no finite cost");
  }
  for (Eigen::Index j = 0; j < cost.cols(); ++j) {
    if (b[static_cast<std::size_t>(j)] <= 0.0) continue;
    bool any = false;
    for (Eigen::Index i = 0; i < cost.rows() && !any; ++i) any = std::isfinite(cost(i, j));
    if (!any) fail(ErrorKind::infeasible_transport, "column " + std::to_string(j) + " has no finite cost");
  }
}

// Replaces +inf by a penalty large enough that no optimal plan uses it when
// a finite-cost plan exists.
inline Mat big_m_costs(const Mat& cost) {
  double max_finite = 0.0;
  for (Eigen::Index i = 0; i < cost.size(); ++i)
    if (std::isfinite(cost.data()[i])) max_finite = std::max(max_finite, std::abs(cost.data()[i]));
  const double big = 4.0 * static_cast<double>(cost.rows() + cost.cols()) * (max_finite + 1.0);
  Mat c = cost;
  for (Eigen::Index i = 0; i < c.size(); ++i)
    if (!std::isfinite(c.data()[i])) c.data()[i] = big;
  return c;
}

inline bool is_uniform(std::span<const double> w) {
  const double u = 1.0 / static_cast<double>(w.size());
  return std::all_of(w.begin(), w.end(), [u](double v) { return std::abs(v - u) <= 1e-12; });
}

// Minimum-cost perfect matching on a square matrix (shortest augmenting
// paths with potentials). Returns row -> column.
inline std::vector<int> hungarian(const Mat& c) {
  const int n = static_cast<int>(c.rows());
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0), minv(n + 1);
  std::vector<int> p(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const int i0 = p[j0];
      double delta = inf;
      int j1 = 0;
      for (int j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = c(i0 - 1, j - 1) - u[i0] - v[j];
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
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const int j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<int> row_to_col(n, -1);
  for (int j = 1; j <= n; ++j)
    if (p[j] > 0) row_to_col[p[j] - 1] = j - 1;
  return row_to_col;
}

// Transportation simplex (MODI). Starts from the north-west corner basis,
// which is a spanning tree of n + k - 1 cells; degenerate zero-flow cells
// stay basic so the tree is preserved. Switches to Bland's rule after a run
// of degenerate pivots.
inline TransportPlan transport_simplex(const Mat& c, std::span<const double> a, std::span<const double> b) {
  const int n = static_cast<int>(c.rows());
  const int k = static_cast<int>(c.cols());
  Mat x = Mat::Zero(n, k);
  std::vector<std::vector<char>> basic(n, std::vector<char>(k, 0));
  {
    std::vector<double> ra(a.begin(), a.end()), rb(b.begin(), b.end());
    int i = 0, j = 0;
    while (true) {
      const double f = std::max(0.0, std::min(ra[i], rb[j]));
      x(i, j) = f;
      basic[i][j] = 1;
      ra[i] -= f;
      rb[j] -= f;
      if (i == n - 1 && j == k - 1) break;
      if (i == n - 1) ++j;
      else if (j == k - 1) ++i;
      else if (ra[i] <= rb[j]) ++i;
      else ++j;
    }
  }

  double scale = 1.0;
  for (Eigen::Index q = 0; q < c.size(); ++q) scale = std::max(scale, std::abs(c.data()[q]));
  const double tol = 1e-12 * scale;

  std::vector<double> u(n), v(k);
  std::vector<std::vector<int>> adj(n + k);
  std::vector<int> parent(n + k);
  std::vector<char> seen(n + k);
  int degenerate_run = 0;
  const long max_pivots = 50L * n * k + 1000;
  TransportPlan out;
  out.converged = false;

  for (long pivot = 0; pivot < max_pivots; ++pivot) {
    for (auto& l : adj) l.clear();
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < k; ++j)
        if (basic[i][j]) {
          adj[i].push_back(n + j);
          adj[n + j].push_back(i);
        }
    // potentials: u_i + v_j = c_ij on basic cells
    std::fill(seen.begin(), seen.end(), 0);
    std::vector<int> stack{0};
    u[0] = 0.0;
    seen[0] = 1;
    while (!stack.empty()) {
      const int node = stack.back();
      stack.pop_back();
      for (int nb : adj[node]) {
        if (seen[nb]) continue;
        seen[nb] = 1;
        if (node < n) v[nb - n] = c(node, nb - n) - u[node];
        else u[nb] = c(nb, node - n) - v[node - n];
        stack.push_back(nb);
      }
    }

    const bool bland = degenerate_run > 20;
    int ei = -1, ej = -1;
    double best = -tol;
    for (int i = 0; i < n && !(bland && ei >= 0); ++i)
      for (int j = 0; j < k; ++j) {
        if (basic[i][j]) continue;
        const double r = c(i, j) - u[i] - v[j];
        if (r < best) {
          best = r;
          ei = i;
          ej = j;
          if (bland) break;
        }
      }
    if (ei < 0) {
      out.converged = true;
      break;
    }

    // tree path from column node ej to row node ei
    std::fill(seen.begin(), seen.end(), 0);
    std::fill(parent.begin(), parent.end(), -1);
    std::vector<int> queue{n + ej};
    seen[n + ej] = 1;
    for (std::size_t q = 0; q < queue.size(); ++q) {
      const int node = queue[q];
      if (node == ei) break;
      for (int nb : adj[node]) {
        if (seen[nb]) continue;
        seen[nb] = 1;
        parent[nb] = node;
        queue.push_back(nb);
      }
    }
    std::vector<int> path;  // ei ... n+ej
    for (int node = ei; node != -1; node = parent[node]) path.push_back(node);

    // edges along path alternate sign starting with '-' at the row end
    struct Edge {
      int i, j;
      bool minus;
    };
    std::vector<Edge> cycle;
    for (std::size_t q = 0; q + 1 < path.size(); ++q) {
      const int p0 = path[q], p1 = path[q + 1];
      const int i = p0 < n ? p0 : p1;
      const int j = (p0 < n ? p1 : p0) - n;
      cycle.push_back({i, j, q % 2 == 0});
    }
    double theta = std::numeric_limits<double>::infinity();
    int li = -1, lj = -1;
    for (const auto& e : cycle) {
      if (!e.minus) continue;
      const double f = x(e.i, e.j);
      const bool better = f < theta || (f == theta && bland && (e.i < li || (e.i == li && e.j < lj)));
      if (better) {
        theta = f;
        li = e.i;
        lj = e.j;
      }
    }
    theta = std::max(theta, 0.0);
    for (const auto& e : cycle) x(e.i, e.j) += e.minus ? -theta : theta;
    x(ei, ej) = theta;
    x(li, lj) = 0.0;
    basic[ei][ej] = 1;
    basic[li][lj] = 0;
    degenerate_run = theta > 0.0 ? 0 : degenerate_run + 1;
  }
  out.plan = x.cwiseMax(0.0);
  return out;
}

}  // namespace detail

struct ExactOtOptions {
  std::size_t max_entries = 4096;     // cap for the general LP path
  std::size_t max_assignment = 1024;  // cap on lcm(n, k) for the uniform path
};

inline bool exact_ot_fits(std::size_t n, std::size_t k, bool uniform, const ExactOtOptions& opts = {}) {
  if (uniform && std::lcm(n, k) <= opts.max_assignment) return true;
  return n * k <= opts.max_entries;
}

// Optimal plan of the discrete transport LP. With uniform marginals the
// problem is an assignment on lcm(n, k) replicated points, whose optimal
// vertex is an optimal plan of the original LP.
inline TransportPlan exact_ot(const Mat& cost, std::span<const double> a, std::span<const double> b,
                              const ExactOtOptions& opts = {}) {
  detail::check_marginals(cost, a, b);
  detail::check_supported(cost, a, b);
  const std::size_t n = a.size(), k = b.size();
  const bool uniform = detail::is_uniform(a) && detail::is_uniform(b);
  if (!exact_ot_fits(n, k, uniform, opts))
    fail(ErrorKind::invalid_argument, "exact_ot: instance " + std::to_string(n) + "x" + std::to_string(k) +
                                          " exceeds the configured size cap");
  const Mat c = detail::big_m_costs(cost);
  TransportPlan out;
  if (uniform && std::lcm(n, k) <= opts.max_assignment) {
    const std::size_t L = std::lcm(n, k);
    const std::size_t rn = L / n, rk = L / k;
    Mat big(static_cast<Eigen::Index>(L), static_cast<Eigen::Index>(L));
    for (std::size_t p = 0; p < L; ++p)
      for (std::size_t q = 0; q < L; ++q)
        big(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(q)) =
            c(static_cast<Eigen::Index>(p / rn), static_cast<Eigen::Index>(q / rk));
    const auto match = detail::hungarian(big);
    out.plan = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(k));
    const double mass = 1.0 / static_cast<double>(L);
    for (std::size_t p = 0; p < L; ++p)
      out.plan(static_cast<Eigen::Index>(p / rn), static_cast<Eigen::Index>(match[p] / rk)) += mass;
  } else {
    out = detail::transport_simplex(c, a, b);
  }
  for (Eigen::Index i = 0; i < cost.rows(); ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j)
      if (!std::isfinite(cost(i, j)) && out.plan(i, j) > 1e-12)
        fail(ErrorKind::infeasible_transport, "no plan avoids the forbidden (infinite-cost) pairs");
  for (Eigen::Index i = 0; i < cost.rows(); ++i)
    for (Eigen::Index j = 0; j < cost.cols(); ++j)
      if (!std::isfinite(cost(i, j))) out.plan(i, j) = 0.0;
  out.cost = plan_cost(out.plan, cost);
  return out;
}

struct SinkhornOptions {
  double epsilon = 1e-2;
  int max_iters = 10000;
  double tol = 1e-9;
  double inf_cap = 1e12;
};

// Log-domain Sinkhorn. The reported cost is <plan, cost> without the
// entropy term. `converged` is set when the row-marginal L1 violation drops
// below tol (columns are exact after each sweep).
inline TransportPlan sinkhorn(const Mat& cost, std::span<const double> a, std::span<const double> b,
                              const SinkhornOptions& opt = {}) {
  detail::check_marginals(cost, a, b);
  require(opt.epsilon > 0.0, "sinkhorn epsilon must be positive");
  require(opt.max_iters > 0, "sinkhorn max_iters must be positive");
  const Eigen::Index n = cost.rows(), k = cost.cols();
  Mat c = cost.cwiseMin(opt.inf_cap);
  const double eps = opt.epsilon;
  Vec loga(n), logb(k);
  for (Eigen::Index i = 0; i < n; ++i) loga[i] = a[i] > 0.0 ? std::log(a[i]) : -std::numeric_limits<double>::infinity();
  for (Eigen::Index j = 0; j < k; ++j) logb[j] = b[j] > 0.0 ? std::log(b[j]) : -std::numeric_limits<double>::infinity();
  Vec f = Vec::Zero(n), g = Vec::Zero(k);

  auto lse = [](const double* vals, Eigen::Index len, Eigen::Index stride) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index q = 0; q < len; ++q) mx = std::max(mx, vals[q * stride]);
    if (!std::isfinite(mx)) return mx;
    double s = 0.0;
    for (Eigen::Index q = 0; q < len; ++q) s += std::exp(vals[q * stride] - mx);
    return mx + std::log(s);
  };

  Vec buf(std::max(n, k));
  Mat P(n, k);
  // one f/g sweep at regularization e; returns the row-marginal L1 error
  auto sweep = [&](double e) {
    for (Eigen::Index i = 0; i < n; ++i) {
      if (a[i] <= 0.0) {
        f[i] = -std::numeric_limits<double>::infinity();
        continue;
      }
      for (Eigen::Index j = 0; j < k; ++j) buf[j] = (g[j] - c(i, j)) / e;
      f[i] = e * (loga[i] - lse(buf.data(), k, 1));
    }
    for (Eigen::Index j = 0; j < k; ++j) {
      if (b[j] <= 0.0) {
        g[j] = -std::numeric_limits<double>::infinity();
        continue;
      }
      for (Eigen::Index i = 0; i < n; ++i) buf[i] = (f[i] - c(i, j)) / e;
      g[j] = e * (logb[j] - lse(buf.data(), n, 1));
    }
    double err = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      double row = 0.0;
      for (Eigen::Index j = 0; j < k; ++j) {
        const double v = f[i] + g[j] - c(i, j);
        P(i, j) = std::isfinite(v) ? std::exp(v / e) : 0.0;
        row += P(i, j);
      }
      err += std::abs(row - a[i]);
    }
    return err;
  };

  // epsilon scaling: anneal from the cost scale down to the target,
  // carrying the potentials, then iterate at the target.
  double cmax = 0.0;
  for (Eigen::Index q = 0; q < c.size(); ++q)
    if (c.data()[q] < opt.inf_cap) cmax = std::max(cmax, std::abs(c.data()[q]));
  int used = 0;
  for (double e = cmax; e > eps && used < opt.max_iters / 2; e *= 0.5) {
    for (int it = 0; it < 50 && used < opt.max_iters / 2; ++it, ++used)
      if (sweep(e) < std::sqrt(opt.tol)) break;
  }
  TransportPlan out;
  out.converged = false;
  for (int it = used; it < opt.max_iters; ++it) {
    if (sweep(eps) < opt.tol) {
      out.converged = true;
      break;
    }
  }
  out.plan = P;
  out.cost = plan_cost(P, c);
  return out;
}

enum class OtMethod { exact, sinkhorn };

struct W2Options {
  OtMethod method = OtMethod::exact;
  ExactOtOptions exact;
  SinkhornOptions sinkhorn{1e-3, 20000, 1e-9, 1e12};
  // Sinkhorn epsilon is scaled by the mean sub-problem cost when the exact
  // solver does not fit.
  double fallback_relative_epsilon = 1e-3;
};

struct W2Result {
  double w2_squared = 0.0;
  bool all_exact = true;
  bool converged = true;

  double w2() const { return std::sqrt(std::max(0.0, w2_squared)); }
};

// Label-preserving W2 between two empirical distributions, solved class by
// class so the infinite cross-class cost never enters the arithmetic.
inline W2Result w2_class_conditional_detail(const EmpiricalDistribution& A, const EmpiricalDistribution& B,
                                            const W2Options& opts = {}) {
  A.validate();
  B.validate();
  std::map<int, std::pair<std::vector<std::size_t>, std::vector<std::size_t>>> by_class;
  for (std::size_t i = 0; i < A.size(); ++i) by_class[A.points[i].y].first.push_back(i);
  for (std::size_t j = 0; j < B.size(); ++j) by_class[B.points[j].y].second.push_back(j);

  W2Result res;
  for (const auto& [cls, idx] : by_class) {
    double wa = 0.0, wb = 0.0;
    for (auto i : idx.first) wa += A.weights[i];
    for (auto j : idx.second) wb += B.weights[j];
    if (std::abs(wa - wb) > 1e-6)
      fail(ErrorKind::infeasible_transport, "class " + std::to_string(cls) + " has mass " + fmt_exact(wa) +
                                                " vs " + fmt_exact(wb));
    if (wa <= 0.0 || wb <= 0.0) continue;
    std::vector<double> a, b;
    for (auto i : idx.first) a.push_back(A.weights[i] / wa);
    for (auto j : idx.second) b.push_back(B.weights[j] / wb);
    Mat C(static_cast<Eigen::Index>(a.size()), static_cast<Eigen::Index>(b.size()));
    for (std::size_t p = 0; p < a.size(); ++p)
      for (std::size_t q = 0; q < b.size(); ++q)
        C(p, q) = (A.points[idx.first[p]].z - B.points[idx.second[q]].z).squaredNorm();

    const bool uniform = detail::is_uniform(a) && detail::is_uniform(b);
    double value = 0.0;
    if (opts.method == OtMethod::exact && exact_ot_fits(a.size(), b.size(), uniform, opts.exact)) {
      value = exact_ot(C, a, b, opts.exact).cost;
    } else {
      SinkhornOptions so = opts.sinkhorn;
      if (opts.method == OtMethod::exact) {
        res.all_exact = false;
        so.epsilon = std::max(1e-12, opts.fallback_relative_epsilon * C.mean());
      }
      const auto plan = sinkhorn(C, a, b, so);
      res.converged = res.converged && plan.converged;
      value = plan.cost;
      if (opts.method == OtMethod::sinkhorn) res.all_exact = false;
    }
    res.w2_squared += wa * value;
  }
  return res;
}

inline double w2_class_conditional(const EmpiricalDistribution& A, const EmpiricalDistribution& B,
                                   OtMethod method = OtMethod::exact) {
  W2Options o;
  o.method = method;
  return w2_class_conditional_detail(A, B, o).w2();
}

inline std::string plan_to_csv(const TransportPlan& p) {
  std::string s = "row,col,mass\n";
  for (Eigen::Index i = 0; i < p.plan.rows(); ++i)
    for (Eigen::Index j = 0; j < p.plan.cols(); ++j)
      if (p.plan(i, j) > 0.0) s += std::to_string(i) + "," + std::to_string(j) + "," + fmt_exact(p.plan(i, j)) + "\n";
  return s;
}

}  // namespace certdg
