#pragma once

// Domain-generalization objectives (Wasserstein matching, one-vs-all
// discriminators, risk variance) and the training loop that optionally adds
// worst-case-distribution training at radius F * rho_adv.
//
// Objective per batch:
//   classification part of the method, evaluated at z + delta   (= l_dro)
// + the method's regularizer, evaluated at the clean z          (= l_dg)
// With F = 0 every delta is zero and the loop is vanilla training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "certdg/adversarial.hpp"
#include "certdg/certify.hpp"
#include "certdg/checkpoint.hpp"
#include "certdg/domains.hpp"
#include "certdg/errors.hpp"
#include "certdg/netcore.hpp"
#include "certdg/transport.hpp"

namespace certdg {

enum class DGKind { erm, wm, g2dm, vrex };

inline const char* to_string(DGKind k) {
  switch (k) {
    case DGKind::erm: return "erm";
    case DGKind::wm: return "wm";
    case DGKind::g2dm: return "g2dm";
    case DGKind::vrex: return "vrex";
  }
  return "unknown";
}

inline DGKind dg_kind_from_string(const std::string& s) {
  for (auto k : {DGKind::erm, DGKind::wm, DGKind::g2dm, DGKind::vrex})
    if (s == to_string(k)) return k;
  fail(ErrorKind::invalid_argument, "unknown DG method '" + s + "'");
}

struct DGMethod {
  DGKind kind = DGKind::erm;
  double lambda = 1.0;     // WM label-cost weight
  double beta_vrex = 1.0;  // VREX variance weight
  int disc_hidden = 16;    // G2DM discriminator width

  void validate() const { require(lambda >= 0.0 && beta_vrex >= 0.0 && disc_hidden > 0, "DG weights must be >= 0"); }
};

// ---------------------------------------------------------------------------
// Wasserstein matching

struct WmResult {
  double value = 0.0;
  std::vector<std::vector<Vec>> dz;  // d value / d z, per domain per point
  std::vector<std::string> warnings;
};

// Sum over domains k of W2^2(D^k, all other domains) under the joint
// feature + label cost. Couplings are solved on the frozen cost matrix and
// held fixed; gradients flow through the feature distances.
inline WmResult wm_loss(const std::vector<std::vector<RepPoint>>& per_domain, double lambda) {
  require(lambda >= 0.0, "lambda must be non-negative");
  WmResult r;
  r.dz.resize(per_domain.size());
  std::size_t present = 0;
  for (std::size_t k = 0; k < per_domain.size(); ++k) {
    r.dz[k].assign(per_domain[k].size(), Vec());
    for (auto& g : r.dz[k]) g = Vec::Zero(per_domain[k].empty() ? 0 : per_domain[k].front().z.size());
    if (!per_domain[k].empty()) ++present;
  }
  if (present < 2) {
    r.warnings.push_back("fewer than two domains in batch; alignment term is 0");
    return r;
  }
  for (std::size_t k = 0; k < per_domain.size(); ++k) {
    if (per_domain[k].empty()) {
      r.warnings.push_back("domain " + std::to_string(k) + " absent from batch; skipped");
      continue;
    }
    std::vector<RepPoint> rest;
    std::vector<std::pair<std::size_t, std::size_t>> owner;
    for (std::size_t j = 0; j < per_domain.size(); ++j) {
      if (j == k) continue;
      for (std::size_t q = 0; q < per_domain[j].size(); ++q) {
        rest.push_back(per_domain[j][q]);
        owner.emplace_back(j, q);
      }
    }
    if (rest.empty()) continue;
    const auto A = EmpiricalDistribution::uniform(per_domain[k]);
    const auto B = EmpiricalDistribution::uniform(rest);
    const Mat C = cost_matrix_joint(A, B, lambda);
    const TransportPlan plan = exact_ot(C, A.weights, B.weights);
    r.value += plan.cost;
    for (Eigen::Index i = 0; i < plan.plan.rows(); ++i)
      for (Eigen::Index j = 0; j < plan.plan.cols(); ++j) {
        const double m = plan.plan(i, j);
        if (m <= 0.0) continue;
        const Vec g = 2.0 * m * (A.points[static_cast<std::size_t>(i)].z - B.points[static_cast<std::size_t>(j)].z);
        r.dz[k][static_cast<std::size_t>(i)] += g;
        const auto [dj, dq] = owner[static_cast<std::size_t>(j)];
        r.dz[dj][dq] -= g;
      }
  }
  return r;
}

// ---------------------------------------------------------------------------
// one-vs-all discriminators

// Discriminator: m -> hidden (relu) -> 1 logit, stored as a ModelParams whose
// head has a single row.
inline ModelParams make_discriminator(int rep_dim, int hidden, std::uint64_t seed) {
  NetShape s{rep_dim, {}, hidden, 2};
  ModelParams p = init_params(s, seed);
  p.layers.back().activation = Activation::relu;
  p.head.weight.conservativeResize(1, Eigen::NoChange);
  p.head.bias = Vec::Zero(1);
  return p;
}

inline double disc_logit(const ModelParams& d, const Vec& z) { return logits(d.head, forward_rep(d, z))[0]; }

inline double softplus(double s) { return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s)); }

inline double sigmoid(double s) { return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s)); }

// Binary cross-entropy on a logit with target t in {0, 1}.
inline double bce_logit(double s, double t) { return softplus(s) - t * s; }

struct G2dmResult {
  double adversarial = 0.0;                // -sum_k L_k, the representation-side term
  std::vector<double> disc_losses;         // L_k
  std::vector<ModelParams> disc_grads;     // d L_k / d tau_k
  std::vector<std::vector<Vec>> dz;        // d adversarial / d z
};

// Domain k's discriminator labels its own points 0 and every other domain 1.
// Each L_k is the mean BCE over all points in the batch.
inline G2dmResult g2dm_losses(const std::vector<std::vector<RepPoint>>& per_domain,
                              std::span<const ModelParams> discriminators) {
  require(discriminators.size() == per_domain.size(), "g2dm needs one discriminator per source domain");
  G2dmResult r;
  std::size_t total = 0, present = 0;
  for (const auto& d : per_domain) {
    total += d.size();
    present += d.empty() ? 0 : 1;
  }
  r.dz.resize(per_domain.size());
  for (std::size_t k = 0; k < per_domain.size(); ++k)
    for (const auto& p : per_domain[k]) r.dz[k].push_back(Vec::Zero(p.z.size()));
  r.disc_losses.assign(per_domain.size(), 0.0);
  for (const auto& d : discriminators) r.disc_grads.push_back(zeros_like(d));
  if (present < 2 || total == 0) return r;

  const double w = 1.0 / static_cast<double>(total);
  for (std::size_t k = 0; k < discriminators.size(); ++k) {
    const ModelParams& D = discriminators[k];
    double Lk = 0.0;
    for (std::size_t j = 0; j < per_domain.size(); ++j) {
      const double target = j == k ? 0.0 : 1.0;
      for (std::size_t q = 0; q < per_domain[j].size(); ++q) {
        ForwardTrace tr = forward_trace(D.layers, per_domain[j][q].z);
        const double s = (D.head.weight * tr.out + D.head.bias)[0];
        Lk += bce_logit(s, target);
        const double ds = w * (sigmoid(s) - target);
        r.disc_grads[k].head.weight += ds * tr.out.transpose();
        r.disc_grads[k].head.bias[0] += ds;
        const Vec dh = D.head.weight.row(0).transpose() * ds;
        const Vec dzq = backprop_layers(D.layers, tr, dh, r.disc_grads[k].layers);
        r.dz[j][q] -= dzq;  // adversarial term is -L_k
      }
    }
    r.disc_losses[k] = Lk * w;
    r.adversarial -= r.disc_losses[k];
  }
  return r;
}

// ---------------------------------------------------------------------------
// risk variance

inline double vrex_loss(std::span<const double> risks, double beta) {
  require(!risks.empty(), "vrex needs at least one domain risk");
  const double n = static_cast<double>(risks.size());
  double mean = 0.0;
  for (double r : risks) mean += r;
  mean /= n;
  double var = 0.0;
  for (double r : risks) var += (r - mean) * (r - mean);
  return mean + beta * var / n;
}

// d vrex / d risk_k
inline std::vector<double> vrex_risk_weights(std::span<const double> risks, double beta) {
  const double n = static_cast<double>(risks.size());
  double mean = 0.0;
  for (double r : risks) mean += r;
  mean /= n;
  std::vector<double> w;
  for (double r : risks) w.push_back(1.0 / n + 2.0 * beta * (r - mean) / n);
  return w;
}

// ---------------------------------------------------------------------------
// training

enum class OptimizerKind { sgd, momentum };

struct TrainConfig {
  NetShape shape;
  DGMethod dg;
  double eta = 0.05;
  int epochs = 100;
  int batch_per_domain = 32;
  std::uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::sgd;
  double momentum = 0.9;
  double disc_eta = 0.05;
  std::size_t rho_sample = 1000;  // points used to measure rho_adv each epoch

  void validate() const {
    dg.validate();
    require(eta > 0.0 && disc_eta > 0.0, "learning rates must be positive");
    require(epochs >= 0 && batch_per_domain >= 1, "epochs >= 0 and batch >= 1 required");
    require(momentum >= 0.0 && momentum < 1.0, "momentum must be in [0, 1)");
    require(rho_sample >= 1, "rho_sample must be >= 1");
  }
};

struct DRDGConfig {
  double F = 0.5;
  CertConfig inner;
  TrainConfig train;

  void validate() const {
    require(F >= 0.0 && std::isfinite(F), "F must be finite and >= 0");
    train.validate();
    inner.validate();
  }
};

struct EpochLog {
  int epoch = 0;
  double source_loss = 0.0;
  double dg_loss = 0.0;
  double dro_loss = 0.0;
  double rho_adv = 0.0;
  double gamma = 0.0;
};

struct TrainState {
  ModelParams model;
  ModelParams velocity;
  std::vector<ModelParams> discriminators;
  double gamma = 1.0;
  std::map<std::string, std::vector<Vec>> deltas;  // tracked perturbation per training point
  int epochs_done = 0;
  std::vector<EpochLog> log;
};

inline std::string log_to_csv(std::span<const EpochLog> log) {
  std::string s = "epoch,source_loss,dg_loss,dro_loss,rho_adv,gamma\n";
  for (const auto& e : log)
    s += std::to_string(e.epoch) + "," + fmt_exact(e.source_loss) + "," + fmt_exact(e.dg_loss) + "," +
         fmt_exact(e.dro_loss) + "," + fmt_exact(e.rho_adv) + "," + fmt_exact(e.gamma) + "\n";
  return s;
}

inline json train_state_to_json(const TrainState& st) {
  json discs = json::array();
  for (const auto& d : st.discriminators) discs.push_back(model_to_json(d));
  json deltas = json::object();
  for (const auto& [name, ds] : st.deltas) {
    json arr = json::array();
    for (const auto& d : ds) arr.push_back(vector_to_json(d));
    deltas[name] = arr;
  }
  json log = json::array();
  for (const auto& e : st.log)
    log.push_back({e.epoch, e.source_loss, e.dg_loss, e.dro_loss, e.rho_adv, e.gamma});
  return {{"format", "certdg-train-state"}, {"version", 1},        {"model", model_to_json(st.model)},
          {"velocity", model_to_json(st.velocity)}, {"discriminators", discs}, {"gamma", st.gamma},
          {"deltas", deltas},                       {"epochs_done", st.epochs_done}, {"log", log}};
}

inline TrainState train_state_from_json(const json& j) {
  try {
    if (j.value("format", "") != "certdg-train-state") fail(ErrorKind::parse_error, "not a certdg-train-state record");
    TrainState st;
    st.model = model_from_json(j.at("model"));
    st.velocity = model_from_json(j.at("velocity"));
    for (const auto& d : j.at("discriminators")) st.discriminators.push_back(model_from_json(d));
    st.gamma = j.at("gamma").get<double>();
    for (const auto& [name, arr] : j.at("deltas").items())
      for (const auto& d : arr) st.deltas[name].push_back(vector_from_json(d, static_cast<Eigen::Index>(d.size()), "delta"));
    st.epochs_done = j.at("epochs_done").get<int>();
    for (const auto& e : j.at("log"))
      st.log.push_back({e.at(0).get<int>(), e.at(1).get<double>(), e.at(2).get<double>(), e.at(3).get<double>(),
                        e.at(4).get<double>(), e.at(5).get<double>()});
    return st;
  } catch (const json::exception& e) {
    fail(ErrorKind::parse_error, std::string("train state: ") + e.what());
  }
}

inline std::vector<LabeledPoint> strided_sample(std::span<const LabeledPoint> pts, std::size_t cap) {
  if (pts.size() <= cap) return {pts.begin(), pts.end()};
  std::vector<LabeledPoint> out;
  out.reserve(cap);
  for (std::size_t q = 0; q < cap; ++q) out.push_back(pts[q * pts.size() / cap]);
  return out;
}

// rho_adv of the current model on a deterministic sample; 0 when the head is
// degenerate.
inline double measure_rho_adv(const ModelParams& model, std::span<const LabeledPoint> pts, std::size_t cap,
                              std::string* warning = nullptr) {
  const auto sample = strided_sample(pts, cap);
  const auto reps = to_reps(model, sample);
  try {
    const auto adv = gen_adv_distribution(model.head, reps);
    return rho_adv(reps, adv);
  } catch (const Error& e) {
    if (e.kind() != ErrorKind::degenerate_head) throw;
    if (warning) *warning = e.what();
    return 0.0;
  }
}

inline TrainState init_train_state(const TrainConfig& cfg, std::span<const std::string> domains, double gamma_init) {
  TrainState st;
  st.model = init_params(cfg.shape, cfg.seed);
  st.velocity = zeros_like(st.model);
  st.gamma = gamma_init;
  if (cfg.dg.kind == DGKind::g2dm)
    for (std::size_t k = 0; k < domains.size(); ++k)
      st.discriminators.push_back(make_discriminator(cfg.shape.rep_dim, cfg.dg.disc_hidden, cfg.seed + 1000 + k));
  return st;
}

using LogSink = std::function<void(const std::string&)>;

namespace detail {

inline std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed, int epoch, std::size_t domain) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                   static_cast<std::uint32_t>(epoch), static_cast<std::uint32_t>(domain), 0x7a11u};
  std::mt19937_64 rng(ss);
  std::shuffle(idx.begin(), idx.end(), rng);
  return idx;
}

}  // namespace detail

// Runs epochs [state.epochs_done, cfg.train.epochs). F = 0 gives vanilla training.
inline void train_epochs(const DomainDataset& data, const DRDGConfig& cfg, TrainState& st, const LogSink& warn = {}) {
  cfg.validate();
  const TrainConfig& tc = cfg.train;
  std::vector<std::string> names;
  for (const auto& [n, pts] : data.domains)
    if (!pts.empty()) names.push_back(n);
  require(!names.empty(), "training needs at least one non-empty source domain");
  require(tc.dg.kind != DGKind::wm || names.size() >= 2, "wm needs at least two source domains");
  if (tc.dg.kind == DGKind::g2dm) require(st.discriminators.size() == names.size(), "g2dm discriminator count mismatch");
  const auto fam = LossFamily::cross_entropy();
  const std::vector<LabeledPoint> all = concat_domains(data, names);
  const bool robust = cfg.F > 0.0;
  for (const auto& n : names) {
    auto& d = st.deltas[n];
    const auto sz = data.domains.at(n).size();
    if (d.size() != sz) d.assign(sz, Vec::Zero(tc.shape.rep_dim));
  }

  for (int epoch = st.epochs_done; epoch < tc.epochs; ++epoch) {
    std::string wmsg;
    const double rho_a = measure_rho_adv(st.model, all, tc.rho_sample, &wmsg);
    if (!wmsg.empty() && warn) warn("epoch " + std::to_string(epoch) + ": " + wmsg + "; robust step skipped");
    const double rho = cfg.F * rho_a;
    const bool use_robust = robust && rho > 0.0;
    const double rho2 = rho * rho;

    std::vector<std::vector<std::size_t>> order;
    std::size_t max_n = 0;
    for (std::size_t k = 0; k < names.size(); ++k) {
      const auto n = data.domains.at(names[k]).size();
      order.push_back(detail::shuffled(n, tc.seed, epoch, k));
      max_n = std::max(max_n, n);
    }
    const std::size_t b = static_cast<std::size_t>(tc.batch_per_domain);
    const std::size_t steps = (max_n + b - 1) / b;
    double ep_src = 0.0, ep_dg = 0.0, ep_dro = 0.0;

    for (std::size_t s = 0; s < steps; ++s) {
      // gather batch
      std::vector<std::vector<std::size_t>> bidx(names.size());
      std::vector<std::vector<RepPoint>> clean(names.size());
      std::size_t total = 0;
      for (std::size_t k = 0; k < names.size(); ++k) {
        const auto& pts = data.domains.at(names[k]);
        for (std::size_t q = s * b; q < std::min(pts.size(), (s + 1) * b); ++q) {
          const std::size_t i = order[k][q];
          bidx[k].push_back(i);
          clean[k].push_back({forward_rep(st.model, pts[i].x), pts[i].y});
        }
        total += bidx[k].size();
      }
      if (total == 0) continue;

      // worst-case perturbations of the clean representations
      std::vector<std::vector<Vec>> delta(names.size());
      for (std::size_t k = 0; k < names.size(); ++k)
        for (std::size_t q = 0; q < bidx[k].size(); ++q)
          delta[k].push_back(use_robust && cfg.inner.track_perturbations ? st.deltas[names[k]][bidx[k][q]]
                                                                         : Vec::Zero(tc.shape.rep_dim));
      if (use_robust) {
        const double curvature = loss_curvature_bound(st.model.head, fam);
        const double gamma_lo = std::min(cfg.inner.gamma_max, std::max(cfg.inner.gamma_min, 0.5 * curvature));
        st.gamma = std::clamp(st.gamma, gamma_lo, cfg.inner.gamma_max);
        for (int t = 0; t < cfg.inner.T2; ++t) {
          const double step = ascent_step(cfg.inner.alpha_step, st.gamma, curvature);
          double msd = 0.0;
          for (std::size_t k = 0; k < names.size(); ++k)
            for (std::size_t q = 0; q < bidx[k].size(); ++q) {
              Vec& d = delta[k][q];
              const Vec z = clean[k][q].z + d;
              d += step * (grad_loss_z(st.model.head, z, clean[k][q].y, fam) - 2.0 * st.gamma * d);
              msd += d.squaredNorm();
            }
          msd /= static_cast<double>(total);
          st.gamma = std::clamp(st.gamma - cfg.inner.beta_step * (rho2 - msd), gamma_lo, cfg.inner.gamma_max);
        }
        if (cfg.inner.track_perturbations)
          for (std::size_t k = 0; k < names.size(); ++k)
            for (std::size_t q = 0; q < bidx[k].size(); ++q) st.deltas[names[k]][bidx[k][q]] = delta[k][q];
      }

      // classification part at z + delta, per-domain risks
      std::vector<double> risks(names.size(), 0.0);
      double src = 0.0, dro = 0.0;
      for (std::size_t k = 0; k < names.size(); ++k) {
        for (std::size_t q = 0; q < bidx[k].size(); ++q) {
          src += loss(st.model.head, clean[k][q].z, clean[k][q].y, fam);
          const double l = loss(st.model.head, Vec(clean[k][q].z + delta[k][q]), clean[k][q].y, fam);
          risks[k] += l;
          dro += l;
        }
        if (!bidx[k].empty()) risks[k] /= static_cast<double>(bidx[k].size());
      }
      src /= static_cast<double>(total);
      dro /= static_cast<double>(total);

      std::vector<double> point_weight(names.size(), 1.0 / static_cast<double>(total));
      double dg_value = 0.0;
      std::vector<std::vector<Vec>> dz_dg;
      if (tc.dg.kind == DGKind::vrex) {
        std::vector<double> present_risks;
        std::vector<std::size_t> present;
        for (std::size_t k = 0; k < names.size(); ++k)
          if (!bidx[k].empty()) {
            present_risks.push_back(risks[k]);
            present.push_back(k);
          }
        const auto rw = vrex_risk_weights(present_risks, tc.dg.beta_vrex);
        for (std::size_t p = 0; p < present.size(); ++p)
          point_weight[present[p]] = rw[p] / static_cast<double>(bidx[present[p]].size());
        dg_value = vrex_loss(present_risks, tc.dg.beta_vrex) - vrex_loss(present_risks, 0.0);
      } else if (tc.dg.kind == DGKind::wm) {
        auto r = wm_loss(clean, tc.dg.lambda);
        if (warn)
          for (const auto& m : r.warnings) warn(m);
        dg_value = r.value;
        dz_dg = std::move(r.dz);
      } else if (tc.dg.kind == DGKind::g2dm) {
        // discriminators step first on the detached representations
        auto pre = g2dm_losses(clean, st.discriminators);
        for (std::size_t k = 0; k < st.discriminators.size(); ++k) axpy(st.discriminators[k], -tc.disc_eta, pre.disc_grads[k]);
        auto r = g2dm_losses(clean, st.discriminators);
        dg_value = r.adversarial;
        dz_dg = std::move(r.dz);
      }

      ModelParams grads = zeros_like(st.model);
      for (std::size_t k = 0; k < names.size(); ++k) {
        const auto& pts = data.domains.at(names[k]);
        for (std::size_t q = 0; q < bidx[k].size(); ++q) {
          const Vec extra = dz_dg.empty() ? Vec() : dz_dg[k][q];
          accumulate_point(st.model, pts[bidx[k][q]], fam, point_weight[k], grads, delta[k][q], extra);
        }
      }
      if (!std::isfinite(src) || !std::isfinite(dro) || !std::isfinite(dg_value))
        fail(ErrorKind::nan_loss, "non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(s) +
                                      " (source " + fmt_exact(src) + ", dro " + fmt_exact(dro) + ", dg " +
                                      fmt_exact(dg_value) + ", gamma " + fmt_exact(st.gamma) + ")");
      if (tc.optimizer == OptimizerKind::momentum) {
        scale_in_place(st.velocity, tc.momentum);
        axpy(st.velocity, 1.0, grads);
        st.model = sgd_update(st.model, st.velocity, tc.eta);
      } else {
        st.model = sgd_update(st.model, grads, tc.eta);
      }
      ep_src += src;
      ep_dg += dg_value;
      ep_dro += dro;
    }
    const double ns = static_cast<double>(std::max<std::size_t>(steps, 1));
    st.log.push_back({epoch, ep_src / ns, ep_dg / ns, ep_dro / ns, rho_a, st.gamma});
    st.epochs_done = epoch + 1;
  }
}

struct TrainResult {
  ModelParams params;
  TrainState state;
};

inline TrainResult dr_dg_train(const DomainDataset& data, const DRDGConfig& cfg, const LogSink& warn = {}) {
  cfg.validate();
  std::vector<std::string> names;
  for (const auto& [n, pts] : data.domains)
    if (!pts.empty()) names.push_back(n);
  TrainState st = init_train_state(cfg.train, names, cfg.inner.gamma_init);
  train_epochs(data, cfg, st, warn);
  return {st.model, std::move(st)};
}

inline TrainResult vanilla_train(const DomainDataset& data, const TrainConfig& cfg, const LogSink& warn = {}) {
  DRDGConfig d;
  d.F = 0.0;
  d.train = cfg;
  return dr_dg_train(data, d, warn);
}

inline double accuracy(const ModelParams& model, std::span<const LabeledPoint> pts) {
  if (pts.empty()) return 0.0;
  std::size_t ok = 0;
  for (const auto& p : pts) ok += predict(logits(model.head, forward_rep(model, p.x))) == p.y ? 1 : 0;
  return static_cast<double>(ok) / static_cast<double>(pts.size());
}

}  // namespace certdg
