#pragma once

// Subcommand implementations shared by the CLI binary and the tests. Every
// artifact is written through atomic_write, so a failed command leaves no
// partial file behind.
//
// Layout under <out>:
//   data/<domain>.csv, data/manifest.json      gen-data
//   model.json, train_log.csv, train_state.json train
//   certify_sweep.csv, certificates.json        certify
//   attack.csv                                  attack
//   evaluate.csv                                evaluate
//   report.svg, report.md                       report

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "certdg/adversarial.hpp"
#include "certdg/certify.hpp"
#include "certdg/checkpoint.hpp"
#include "certdg/config.hpp"
#include "certdg/dgtrain.hpp"
#include "certdg/domains.hpp"
#include "certdg/io.hpp"
#include "certdg/report.hpp"
#include "certdg/transport.hpp"

namespace certdg {

namespace fs = std::filesystem;

struct RunPaths {
  fs::path out;
  fs::path data() const { return out / "data"; }
  fs::path manifest() const { return data() / "manifest.json"; }
  fs::path model() const { return out / "model.json"; }
  fs::path train_log() const { return out / "train_log.csv"; }
  fs::path train_state() const { return out / "train_state.json"; }
  fs::path sweep() const { return out / "certify_sweep.csv"; }
  fs::path certificates() const { return out / "certificates.json"; }
  fs::path attack() const { return out / "attack.csv"; }
  fs::path evaluate() const { return out / "evaluate.csv"; }
  fs::path svg() const { return out / "report.svg"; }
  fs::path md() const { return out / "report.md"; }
};

// Source domains hold the training data; targets are unseen rotations drawn
// from an independent base sample.
struct TaskData {
  DomainDataset sources;
  DomainDataset targets;
  std::vector<std::string> source_names;
  std::vector<std::string> target_names;
};

inline TaskData make_task_data(const RunConfig& rc) {
  TaskData td;
  RotatedTaskSpec s = rc.task.spec;
  s.angles_deg = rc.task.source_angles;
  td.sources = make_rotated_task(s);
  if (!rc.task.target_angles.empty()) {
    RotatedTaskSpec t = rc.task.spec;
    t.angles_deg = rc.task.target_angles;
    t.seed = rc.seed + 1;
    td.targets = make_rotated_task(t);
  }
  for (double a : rc.task.source_angles) td.source_names.push_back(rotation_domain_name(a));
  for (double a : rc.task.target_angles) td.target_names.push_back(rotation_domain_name(a));
  return td;
}

inline void cmd_gen_data(const RunConfig& rc) {
  const RunPaths P{rc.out};
  const auto td = make_task_data(rc);
  json man = {{"format", "certdg-data"}, {"version", 1}, {"seed", rc.seed}, {"domains", json::array()}};
  auto emit = [&](const DomainDataset& ds, const std::vector<std::string>& names, const char* role) {
    for (const auto& n : names) {
      DomainDataset one;
      one.domains[n] = ds.domains.at(n);
      save_csv(one, P.data() / (n + ".csv"));
      const auto& m = ds.meta.at(n);
      man["domains"].push_back(
          {{"name", n}, {"role", role}, {"file", n + ".csv"}, {"base", m.base}, {"angle_deg", m.angle_deg},
           {"points", one.domains[n].size()}});
    }
  };
  emit(td.sources, td.source_names, "source");
  emit(td.targets, td.target_names, "target");
  atomic_write(P.manifest(), man.dump(2) + "\n");
}

inline TaskData load_task_data(const RunConfig& rc) {
  const RunPaths P{rc.out};
  json man;
  try {
    man = json::parse(read_file(P.manifest()));
  } catch (const json::exception& e) {
    fail(ErrorKind::parse_error, P.manifest().string() + ": " + e.what());
  }
  TaskData td;
  try {
    for (const auto& d : man.at("domains")) {
      const auto name = d.at("name").get<std::string>();
      const auto role = d.at("role").get<std::string>();
      auto ds = load_csv(P.data() / d.at("file").get<std::string>());
      auto it = ds.domains.find(name);
      if (it == ds.domains.end() || ds.domains.size() != 1)
        fail(ErrorKind::parse_error, (P.data() / d.at("file").get<std::string>()).string() + ": expected only domain " + name);
      auto& dst = role == "source" ? td.sources : td.targets;
      dst.domains[name] = std::move(it->second);
      (role == "source" ? td.source_names : td.target_names).push_back(name);
    }
  } catch (const json::exception& e) {
    fail(ErrorKind::parse_error, P.manifest().string() + ": " + e.what());
  }
  if (td.source_names.empty()) fail(ErrorKind::parse_error, P.manifest().string() + ": no source domains");
  return td;
}

inline DRDGConfig effective_train_config(const RunConfig& rc) {
  DRDGConfig c = rc.train;
  if (!rc.dr_dg) c.F = 0.0;
  return c;
}

// Trains on the source training splits. With `resume` the saved state is
// continued up to the configured epoch count.
inline TrainState cmd_train(const RunConfig& rc, const std::optional<fs::path>& resume = std::nullopt,
                            const LogSink& warn = {}) {
  const RunPaths P{rc.out};
  const auto td = load_task_data(rc);
  const auto sp = split(td.sources, rc.task.train_fraction, rc.seed);
  const DRDGConfig cfg = effective_train_config(rc);
  TrainState st;
  if (resume) {
    json j;
    try {
      j = json::parse(read_file(*resume));
    } catch (const json::exception& e) {
      fail(ErrorKind::parse_error, resume->string() + ": " + e.what());
    }
    st = train_state_from_json(j);
    if (st.epochs_done > cfg.train.epochs)
      fail(ErrorKind::invalid_argument, "resume state has " + std::to_string(st.epochs_done) +
                                            " epochs, more than the configured " + std::to_string(cfg.train.epochs));
    train_epochs(sp.train, cfg, st, warn);
  } else {
    st = dr_dg_train(sp.train, cfg, warn).state;
  }
  save_model(st.model, P.model());
  atomic_write(P.train_log(), log_to_csv(st.log));
  atomic_write(P.train_state(), train_state_to_json(st).dump() + "\n");
  return st;
}

// The nominal source distribution for certification and evaluation: the
// held-out source points, capped by a strided sample.
struct SourceView {
  std::vector<LabeledPoint> points;
  std::vector<RepPoint> reps;
  AdvDistribution adv;
  double rho_adv = 0.0;
};

inline SourceView source_view(const RunConfig& rc, const TaskData& td, const ModelParams& model) {
  const auto sp = split(td.sources, rc.task.train_fraction, rc.seed);
  SourceView v;
  v.points = strided_sample(concat_domains(sp.test, td.source_names), rc.certify.max_points);
  v.reps = to_reps(model, v.points);
  v.adv = gen_adv_distribution(model.head, v.reps, 1e-4, rc.threads);
  v.rho_adv = rho_adv(v.reps, v.adv);
  if (!(v.rho_adv > 0.0)) fail(ErrorKind::degenerate_head, "rho_adv is zero; every source point is misclassified");
  return v;
}

struct CertifyOutput {
  double rho_adv = 0.0;
  double mean_sq_margin = 0.0;
  std::vector<Certificate> certificates;
};

inline CertifyOutput cmd_certify(const RunConfig& rc, const fs::path& checkpoint) {
  const RunPaths P{rc.out};
  const auto model = load_model(checkpoint);
  const auto td = load_task_data(rc);
  const auto v = source_view(rc, td, model);
  CertifyOutput out{v.rho_adv, v.adv.mean_sq_margin(), {}};
  std::vector<double> radii;
  for (double r : rc.certify.radii) radii.push_back(r * v.rho_adv);
  std::vector<SweepRow> rows;
  json certs = json::array();
  for (const auto& fname : rc.certify.families) {
    LossFamily fam{loss_kind_from_string(fname), rc.certify.hinge_alpha};
    auto cs = cert_sweep(model.head, v.reps, radii, rc.certify.cert, fam, v.rho_adv);
    for (std::size_t i = 0; i < cs.size(); ++i) {
      const auto& c = cs[i];
      rows.push_back({c.radius.raw, rc.certify.radii[i], fname, c.worst_case_loss, c.gamma_opt, c.mean_sq_distortion,
                      c.converged});
      certs.push_back({{"family", fname},
                       {"rho_raw", c.radius.raw},
                       {"rho_normalized", rc.certify.radii[i]},
                       {"worst_case_loss", c.worst_case_loss},
                       {"gamma_opt", c.gamma_opt},
                       {"mean_sq_distortion", c.mean_sq_distortion},
                       {"dual_gap_diag", c.dual_gap_diag},
                       {"iterations_used", c.iterations_used},
                       {"converged", c.converged},
                       {"error", c.error}});
      out.certificates.push_back(c);
    }
  }
  json doc = {{"format", "certdg-certificates"},
              {"version", 1},
              {"points", v.reps.size()},
              {"rho_adv", v.rho_adv},
              {"mean_sq_margin", out.mean_sq_margin},
              {"adv_accuracy", 1.0 - v.adv.attack_success},
              {"cert01_unit_condition", v.rho_adv * v.rho_adv >= out.mean_sq_margin},
              {"certificates", certs}};
  atomic_write(P.sweep(), sweep_to_csv(rows));
  atomic_write(P.certificates(), doc.dump(2) + "\n");
  return out;
}

inline void cmd_attack(const RunConfig& rc, const fs::path& checkpoint) {
  const RunPaths P{rc.out};
  const auto model = load_model(checkpoint);
  const auto td = load_task_data(rc);
  const auto v = source_view(rc, td, model);
  const auto fam = LossFamily::cross_entropy();
  const double n = static_cast<double>(v.points.size());
  double clean_loss = 0.0, clean_acc = 0.0;
  for (const auto& p : v.reps) {
    clean_loss += loss(model.head, p.z, p.y, fam);
    clean_acc += predict(logits(model.head, p.z)) == p.y ? 1.0 : 0.0;
  }
  std::string s = "space,eps_raw,eps_normalized,clean_loss,adv_loss,clean_accuracy,adv_accuracy\n";
  auto row = [&](const char* space, double eps, const std::string& norm, double al, double aa) {
    s += std::string(space) + "," + fmt_exact(eps) + "," + norm + "," + fmt_exact(clean_loss / n) + "," +
         fmt_exact(al / n) + "," + fmt_exact(clean_acc / n) + "," + fmt_exact(aa / n) + "\n";
  };
  for (double e : rc.attack.rep_eps) {
    PgdOptions o{e * v.rho_adv, rc.attack.steps, std::max(1e-12, rc.attack.step_fraction * e * v.rho_adv)};
    double al = 0.0, aa = 0.0;
    for (const auto& p : v.reps) {
      const Vec z = pgd_rep(model.head, p.z, p.y, o, fam);
      al += loss(model.head, z, p.y, fam);
      aa += predict(logits(model.head, z)) == p.y ? 1.0 : 0.0;
    }
    row("representation", o.epsilon, fmt_exact(e), al, aa);
  }
  for (double e : rc.attack.input_eps) {
    PgdOptions o{e, rc.attack.steps, std::max(1e-12, rc.attack.step_fraction * e)};
    double al = 0.0, aa = 0.0;
    for (const auto& p : v.points) {
      const Vec z = forward_rep(model, pgd_input(model, p.x, p.y, o, fam));
      al += loss(model.head, z, p.y, fam);
      aa += predict(logits(model.head, z)) == p.y ? 1.0 : 0.0;
    }
    row("input", e, "", al, aa);
  }
  atomic_write(P.attack(), s);
}

namespace detail {

inline EvalRow eval_row(const ModelParams& model, const SourceView& v, const std::string& domain, const std::string& kind,
                        int severity, std::span<const RepPoint> reps) {
  const auto ce = LossFamily::cross_entropy();
  EvalRow r{domain, kind, severity, 0.0, 0.0, 0.0, 0.0, 0.0};
  double l = 0.0, ok = 0.0;
  for (const auto& p : reps) {
    l += loss(model.head, p.z, p.y, ce);
    ok += predict(logits(model.head, p.z)) == p.y ? 1.0 : 0.0;
  }
  const double n = static_cast<double>(reps.size());
  r.ce_loss = l / n;
  r.accuracy = ok / n;
  r.error_rate = (n - ok) / n;  // same arithmetic as the 0/1 certificate at radius 0
  r.w2_raw = w2_class_conditional(EmpiricalDistribution::uniform(v.reps),
                                  EmpiricalDistribution::uniform({reps.begin(), reps.end()}));
  r.normalized_distance = r.w2_raw / v.rho_adv;
  return r;
}

}  // namespace detail

inline std::vector<EvalRow> cmd_evaluate(const RunConfig& rc, const fs::path& checkpoint) {
  const RunPaths P{rc.out};
  const auto model = load_model(checkpoint);
  const auto td = load_task_data(rc);
  const auto v = source_view(rc, td, model);
  std::vector<EvalRow> rows;

  auto src = detail::eval_row(model, v, "source", "source", 0, v.reps);
  src.w2_raw = 0.0;
  src.normalized_distance = 0.0;
  rows.push_back(src);
  const auto sp = split(td.sources, rc.task.train_fraction, rc.seed);
  for (const auto& n : td.source_names)
    rows.push_back(detail::eval_row(model, v, n, "source_domain", 0, to_reps(model, sp.test.domains.at(n))));
  for (const auto& n : td.target_names)
    rows.push_back(detail::eval_row(model, v, n, "target", 0, to_reps(model, td.targets.domains.at(n))));
  std::uint64_t tag = 0;
  for (const auto& kname : rc.task.corruptions) {
    const auto kind = corruption_from_string(kname);
    for (int sev : rc.task.severities) {
      const auto pts = apply_corruption(v.points, kind, sev, rc.seed + 101 + tag);
      rows.push_back(detail::eval_row(model, v, kname, "corruption", sev, to_reps(model, pts)));
    }
    ++tag;
  }
  // the adversarial distribution sits at distance rho_adv by definition
  auto adv = detail::eval_row(model, v, "P_S_adv", "adversarial", 0, v.adv.points);
  adv.w2_raw = v.rho_adv;
  adv.normalized_distance = 1.0;
  rows.push_back(adv);
  atomic_write(P.evaluate(), eval_to_csv(rows));
  return rows;
}

inline void cmd_report(const RunConfig& rc, const fs::path& sweep_path, const std::optional<fs::path>& eval_path) {
  const RunPaths P{rc.out};
  const auto sweep = sweep_from_csv(read_file(sweep_path), sweep_path.string());
  std::vector<EvalRow> eval;
  if (eval_path) eval = eval_from_csv(read_file(*eval_path), eval_path->string());
  atomic_write(P.svg(), render_svg(sweep, eval));
  atomic_write(P.md(), render_markdown(sweep, eval));
}

}  // namespace certdg
