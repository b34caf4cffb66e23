#pragma once

// Run configuration: one JSON document binding every module's settings.
// Every key is optional (defaults below) but unknown keys and wrong types
// are rejected before any work starts.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "certdg/certify.hpp"
#include "certdg/dgtrain.hpp"
#include "certdg/domains.hpp"
#include "certdg/io.hpp"
#include "json.hpp"

namespace certdg {

// Bad configuration or command line; maps to exit code 2.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TaskConfig {
  RotatedTaskSpec spec;
  std::vector<double> source_angles{0.0, 15.0};
  std::vector<double> target_angles{30.0, 45.0, 60.0, 75.0};
  double train_fraction = 0.8;
  std::vector<std::string> corruptions{"gauss_noise", "shift", "scale", "shear", "blend_constant"};
  std::vector<int> severities{1, 2, 3, 4, 5};
};

struct CertifyRunConfig {
  CertConfig cert;
  std::vector<std::string> families{"cross_entropy", "modified_hinge", "zero_one"};
  double hinge_alpha = 0.1;
  std::vector<double> radii{0.0, 0.25, 0.5, 0.75, 1.0, 1.25, 1.5};  // in units of rho_adv
  std::size_t max_points = 1000;
};

struct AttackRunConfig {
  std::vector<double> rep_eps{0.25, 0.5, 1.0};  // in units of rho_adv
  std::vector<double> input_eps{0.25, 0.5, 1.0};
  int steps = 20;
  double step_fraction = 0.25;  // step size as a fraction of eps
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  int threads = 1;
  TaskConfig task;
  NetShape shape;
  DRDGConfig train;
  bool dr_dg = false;
  CertifyRunConfig certify;
  AttackRunConfig attack;
};

namespace detail {

using json = nlohmann::json;

class Schema {
 public:
  Schema(const json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw UsageError("config: '" + path_ + "' must be an object");
  }

  void allow(std::initializer_list<const char*> keys) const {
    for (const auto& [k, _] : obj_.items()) {
      bool ok = false;
      for (const char* a : keys) ok = ok || k == a;
      if (!ok) throw UsageError("config: unknown key '" + where(k) + "'");
    }
  }

  template <typename T>
  void get(const char* key, T& dst) const {
    if (!obj_.contains(key)) return;
    const json& v = obj_.at(key);
    try {
      check_type<T>(v, key);
      dst = v.get<T>();
    } catch (const json::exception&) {
      throw UsageError("config: key '" + where(key) + "' has the wrong type");
    }
  }

  bool has(const char* key) const { return obj_.contains(key); }
  Schema child(const char* key) const { return Schema(obj_.at(key), where(key)); }

 private:
  template <typename T>
  void check_type(const json& v, const char* key) const {
    bool ok = true;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_integral_v<T>) ok = v.is_number_integer() && (std::is_signed_v<T> || v.is_number_unsigned() || v.get<long long>() >= 0);
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    else if constexpr (std::is_same_v<T, std::vector<double>>) {
      ok = v.is_array();
      for (const auto& e : v) ok = ok && e.is_number();
    } else if constexpr (std::is_same_v<T, std::vector<int>>) {
      ok = v.is_array();
      for (const auto& e : v) ok = ok && e.is_number_integer();
    } else if constexpr (std::is_same_v<T, std::vector<std::string>>) {
      ok = v.is_array();
      for (const auto& e : v) ok = ok && e.is_string();
    }
    if (!ok) throw UsageError("config: key '" + where(key) + "' has the wrong type");
  }

  std::string where(const std::string& k) const { return path_.empty() ? k : path_ + "." + k; }

  const json& obj_;
  std::string path_;
};

inline void parse_cert(const Schema& s, CertConfig& c) {
  s.allow({"T1", "T2", "alpha", "beta", "gamma_init", "gamma_min", "gamma_max", "batch", "track_perturbations",
           "polish_steps", "refine_steps", "dual_tol"});
  s.get("T1", c.T1);
  s.get("T2", c.T2);
  s.get("alpha", c.alpha_step);
  s.get("beta", c.beta_step);
  s.get("gamma_init", c.gamma_init);
  s.get("gamma_min", c.gamma_min);
  s.get("gamma_max", c.gamma_max);
  s.get("batch", c.batch);
  s.get("track_perturbations", c.track_perturbations);
  s.get("polish_steps", c.polish_steps);
  s.get("refine_steps", c.refine_steps);
  s.get("dual_tol", c.dual_tol);
}

template <typename Fn>
void checked(const std::string& what, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    throw UsageError("config: " + what + ": " + e.what());
  }
}

}  // namespace detail

// Pushes the global seed, thread count and shape into the per-module configs.
// Call again after overriding any of them.
inline void propagate(RunConfig& rc) {
  rc.task.spec.seed = rc.seed;
  rc.task.spec.angles_deg = rc.task.source_angles;
  auto& tc = rc.train.train;
  tc.seed = rc.seed;
  tc.shape = rc.shape;
  tc.shape.input_dim = 2;
  rc.train.inner.seed = rc.seed;
  rc.train.inner.threads = rc.threads;
  rc.certify.cert.seed = rc.seed;
  rc.certify.cert.threads = rc.threads;
}

inline RunConfig parse_run_config(const nlohmann::json& j) {
  using detail::Schema;
  RunConfig rc;
  Schema root(j, "");
  root.allow({"seed", "out", "threads", "task", "model", "train", "certify", "attack"});
  root.get("seed", rc.seed);
  root.get("out", rc.out);
  root.get("threads", rc.threads);

  if (root.has("task")) {
    auto t = root.child("task");
    t.allow({"base", "n_per_domain", "noise_sigma", "separation", "source_angles", "target_angles", "train_fraction",
             "corruptions", "severities"});
    std::string base = "blobs";
    t.get("base", base);
    if (base != "blobs" && base != "arcs") throw UsageError("config: key 'task.base' must be blobs or arcs");
    rc.task.spec.base = base == "blobs" ? BaseTask::blobs : BaseTask::arcs;
    t.get("n_per_domain", rc.task.spec.n_per_domain);
    t.get("noise_sigma", rc.task.spec.noise_sigma);
    t.get("separation", rc.task.spec.separation);
    t.get("source_angles", rc.task.source_angles);
    t.get("target_angles", rc.task.target_angles);
    t.get("train_fraction", rc.task.train_fraction);
    t.get("corruptions", rc.task.corruptions);
    t.get("severities", rc.task.severities);
  }
  if (root.has("model")) {
    auto m = root.child("model");
    m.allow({"hidden", "rep_dim"});
    m.get("hidden", rc.shape.hidden);
    m.get("rep_dim", rc.shape.rep_dim);
  }
  auto& tc = rc.train.train;
  if (root.has("train")) {
    auto t = root.child("train");
    t.allow({"method", "dr_dg", "F", "eta", "epochs", "batch_per_domain", "lambda", "beta_vrex", "optimizer", "momentum",
             "disc_eta", "disc_hidden", "rho_sample", "inner"});
    std::string method = "erm", opt = "sgd";
    t.get("method", method);
    t.get("optimizer", opt);
    detail::checked("train.method", [&] { tc.dg.kind = dg_kind_from_string(method); });
    if (opt != "sgd" && opt != "momentum") throw UsageError("config: key 'train.optimizer' must be sgd or momentum");
    tc.optimizer = opt == "sgd" ? OptimizerKind::sgd : OptimizerKind::momentum;
    t.get("dr_dg", rc.dr_dg);
    t.get("F", rc.train.F);
    t.get("eta", tc.eta);
    t.get("epochs", tc.epochs);
    t.get("batch_per_domain", tc.batch_per_domain);
    t.get("lambda", tc.dg.lambda);
    t.get("beta_vrex", tc.dg.beta_vrex);
    t.get("momentum", tc.momentum);
    t.get("disc_eta", tc.disc_eta);
    t.get("disc_hidden", tc.dg.disc_hidden);
    t.get("rho_sample", tc.rho_sample);
    if (t.has("inner")) detail::parse_cert(t.child("inner"), rc.train.inner);
  }
  if (root.has("certify")) {
    auto c = root.child("certify");
    c.allow({"T1", "T2", "alpha", "beta", "gamma_init", "gamma_min", "gamma_max", "batch", "track_perturbations",
             "polish_steps", "refine_steps", "dual_tol", "families", "hinge_alpha", "radii", "max_points"});
    nlohmann::json sub = nlohmann::json::object();
    for (const auto& [k, v] : j.at("certify").items())
      if (k != "families" && k != "hinge_alpha" && k != "radii" && k != "max_points") sub[k] = v;
    detail::parse_cert(Schema(sub, "certify"), rc.certify.cert);
    c.get("families", rc.certify.families);
    c.get("hinge_alpha", rc.certify.hinge_alpha);
    c.get("radii", rc.certify.radii);
    c.get("max_points", rc.certify.max_points);
  }
  if (root.has("attack")) {
    auto a = root.child("attack");
    a.allow({"rep_eps", "input_eps", "steps", "step_fraction"});
    a.get("rep_eps", rc.attack.rep_eps);
    a.get("input_eps", rc.attack.input_eps);
    a.get("steps", rc.attack.steps);
    a.get("step_fraction", rc.attack.step_fraction);
  }

  propagate(rc);
  if (rc.threads < 1) throw UsageError("config: key 'threads' must be >= 1");
  if (rc.task.source_angles.empty()) throw UsageError("config: key 'task.source_angles' must not be empty");
  if (!(rc.task.train_fraction > 0.0 && rc.task.train_fraction < 1.0))
    throw UsageError("config: key 'task.train_fraction' must be in (0, 1)");
  if (rc.task.spec.n_per_domain < 2) throw UsageError("config: key 'task.n_per_domain' must be >= 2");
  for (const auto& k : rc.task.corruptions) detail::checked("task.corruptions", [&] { corruption_from_string(k); });
  for (int s : rc.task.severities)
    if (s < 1 || s > 5) throw UsageError("config: key 'task.severities' entries must be in 1..5");
  for (const auto& f : rc.certify.families) detail::checked("certify.families", [&] { loss_kind_from_string(f); });
  if (!std::is_sorted(rc.certify.radii.begin(), rc.certify.radii.end()))
    throw UsageError("config: key 'certify.radii' must be sorted ascending");
  for (double r : rc.certify.radii)
    if (!(r >= 0.0)) throw UsageError("config: key 'certify.radii' entries must be >= 0");
  if (!(rc.certify.hinge_alpha > 0.0)) throw UsageError("config: key 'certify.hinge_alpha' must be > 0");
  if (rc.certify.max_points < 1) throw UsageError("config: key 'certify.max_points' must be >= 1");
  if (rc.attack.steps < 0 || !(rc.attack.step_fraction > 0.0))
    throw UsageError("config: key 'attack' needs steps >= 0 and step_fraction > 0");
  detail::checked("train", [&] { rc.train.validate(); });
  detail::checked("certify", [&] { rc.certify.cert.validate(); });
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = read_file(path);
  } catch (const Error& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config: " + path.string() + ": " + e.what());
  }
  return parse_run_config(j);
}

}  // namespace certdg
