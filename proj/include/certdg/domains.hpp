#pragma once

// Synthetic multi-domain data: a 2-d base task rotated per domain, vector-space
// corruption families with five severities, stratified splits and CSV files.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "certdg/errors.hpp"
#include "certdg/io.hpp"
#include "certdg/netcore.hpp"

namespace certdg {

struct Provenance {
  std::string base = "blobs";
  double angle_deg = 0.0;
  std::string corruption = "none";
  int severity = 0;
};

struct DomainDataset {
  std::map<std::string, std::vector<LabeledPoint>> domains;
  std::map<std::string, Provenance> meta;

  Eigen::Index dim() const {
    for (const auto& [_, pts] : domains)
      if (!pts.empty()) return pts.front().x.size();
    return 0;
  }

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [_, pts] : domains) n += pts.size();
    return n;
  }
};

enum class BaseTask { blobs, arcs };

struct RotatedTaskSpec {
  BaseTask base = BaseTask::blobs;
  int n_per_domain = 500;
  std::vector<double> angles_deg{0.0, 15.0};
  double noise_sigma = 0.5;
  double separation = 2.0;  // blob centres at (+-separation, 0)
  int classes = 2;
  std::uint64_t seed = 0;
};

inline std::string rotation_domain_name(double angle_deg) {
  std::string s = strprintf("%g", angle_deg);
  return "rot" + s;
}

inline Vec rotate2d(const Vec& x, double angle_deg) {
  const double t = angle_deg * std::numbers::pi / 180.0;
  const double c = std::cos(t), s = std::sin(t);
  Vec out(2);
  out << c * x[0] - s * x[1], s * x[0] + c * x[1];
  return out;
}

// Balanced base sample: class sizes differ by at most one.
inline std::vector<LabeledPoint> make_base_task(const RotatedTaskSpec& spec) {
  require(spec.classes == 2, "rotated tasks are binary");
  require(spec.n_per_domain >= spec.classes, "n_per_domain must be >= number of classes");
  require(spec.noise_sigma >= 0.0, "noise must be non-negative");
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unif(0.0, std::numbers::pi);
  std::vector<LabeledPoint> pts;
  pts.reserve(static_cast<std::size_t>(spec.n_per_domain));
  for (int i = 0; i < spec.n_per_domain; ++i) {
    const int y = i % 2;
    Vec x(2);
    if (spec.base == BaseTask::blobs) {
      x << (y == 0 ? spec.separation : -spec.separation), 0.0;
    } else {
      const double t = unif(rng);
      if (y == 0) x << std::cos(t) - 0.5, std::sin(t) - 0.25;
      else x << 0.5 - std::cos(t), 0.25 - std::sin(t);
      x *= spec.separation;
    }
    x[0] += spec.noise_sigma * gauss(rng);
    x[1] += spec.noise_sigma * gauss(rng);
    pts.push_back({x, y});
  }
  return pts;
}

inline DomainDataset make_rotated_task(const RotatedTaskSpec& spec) {
  for (double a : spec.angles_deg) require(std::isfinite(a), "angles must be finite");
  const auto base = make_base_task(spec);
  DomainDataset ds;
  for (double a : spec.angles_deg) {
    const std::string name = rotation_domain_name(a);
    std::vector<LabeledPoint> pts;
    pts.reserve(base.size());
    for (const auto& p : base) pts.push_back({a == 0.0 ? p.x : rotate2d(p.x, a), p.y});
    ds.domains[name] = std::move(pts);
    ds.meta[name] = {spec.base == BaseTask::blobs ? "blobs" : "arcs", a, "none", 0};
  }
  return ds;
}

enum class Corruption { gauss_noise, shift, scale, shear, blend_constant };

inline const char* to_string(Corruption c) {
  switch (c) {
    case Corruption::gauss_noise: return "gauss_noise";
    case Corruption::shift: return "shift";
    case Corruption::scale: return "scale";
    case Corruption::shear: return "shear";
    case Corruption::blend_constant: return "blend_constant";
  }
  return "unknown";
}

inline Corruption corruption_from_string(const std::string& s) {
  for (auto c : {Corruption::gauss_noise, Corruption::shift, Corruption::scale, Corruption::shear,
                 Corruption::blend_constant})
    if (s == to_string(c)) return c;
  fail(ErrorKind::invalid_argument, "unknown corruption kind '" + s + "'");
}

// Magnitude is severity times a per-family base step. Gaussian noise reuses
// the same draws at every severity, so severities differ only in scale.
inline std::vector<LabeledPoint> apply_corruption(std::span<const LabeledPoint> points, Corruption kind,
                                                  int severity, std::uint64_t seed) {
  require(severity >= 1 && severity <= 5, "severity must be in 1..5");
  const double s = static_cast<double>(severity);
  std::vector<LabeledPoint> out(points.begin(), points.end());
  if (out.empty()) return out;
  const Eigen::Index d = out.front().x.size();
  switch (kind) {
    case Corruption::gauss_noise: {
      std::mt19937_64 rng(seed);
      std::normal_distribution<double> gauss(0.0, 1.0);
      for (auto& p : out)
        for (Eigen::Index c = 0; c < d; ++c) p.x[c] += 0.05 * s * gauss(rng);
      break;
    }
    case Corruption::shift: {
      const Vec dir = Vec::Ones(d) / std::sqrt(static_cast<double>(d));
      for (auto& p : out) p.x += 0.1 * s * dir;
      break;
    }
    case Corruption::scale:
      for (auto& p : out) p.x *= 1.0 + 0.1 * s;
      break;
    case Corruption::shear:
      require(d >= 2, "shear needs at least two features");
      for (auto& p : out) p.x[0] += 0.1 * s * p.x[1];
      break;
    case Corruption::blend_constant: {
      const double w = 0.1 * s;
      for (auto& p : out) p.x = (1.0 - w) * p.x + w * Vec::Ones(d);
      break;
    }
  }
  return out;
}

struct Split {
  DomainDataset train;
  DomainDataset test;
};

// Stratified per (domain, class); each class keeps round(fraction * n_c)
// points for training, at least one on each side. Original order is kept.
inline Split split(const DomainDataset& ds, double train_fraction, std::uint64_t seed) {
  require(train_fraction > 0.0 && train_fraction < 1.0, "train_fraction must be in (0, 1)");
  Split out;
  std::uint64_t domain_tag = 0;
  for (const auto& [name, pts] : ds.domains) {
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < pts.size(); ++i) by_class[pts[i].y].push_back(i);
    std::vector<char> in_train(pts.size(), 0);
    for (auto& [cls, idx] : by_class) {
      if (idx.size() < 2)
        fail(ErrorKind::invalid_argument, "domain " + name + " class " + std::to_string(cls) + " has < 2 points");
      std::seed_seq ss{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                       static_cast<std::uint32_t>(domain_tag), static_cast<std::uint32_t>(cls)};
      std::mt19937_64 rng(ss);
      std::shuffle(idx.begin(), idx.end(), rng);
      auto k = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(idx.size())));
      k = std::clamp<std::size_t>(k, 1, idx.size() - 1);
      for (std::size_t q = 0; q < k; ++q) in_train[idx[q]] = 1;
    }
    auto& tr = out.train.domains[name];
    auto& te = out.test.domains[name];
    for (std::size_t i = 0; i < pts.size(); ++i) (in_train[i] ? tr : te).push_back(pts[i]);
    if (auto it = ds.meta.find(name); it != ds.meta.end()) {
      out.train.meta[name] = it->second;
      out.test.meta[name] = it->second;
    }
    ++domain_tag;
  }
  return out;
}

inline std::string dataset_to_csv(const DomainDataset& ds) {
  const Eigen::Index d = ds.dim();
  std::string s = "domain,label";
  for (Eigen::Index c = 0; c < d; ++c) s += ",x" + std::to_string(c);
  s += "\n";
  for (const auto& [name, pts] : ds.domains)
    for (const auto& p : pts) {
      s += name + "," + std::to_string(p.y);
      for (Eigen::Index c = 0; c < p.x.size(); ++c) s += "," + fmt_exact(p.x[c]);
      s += "\n";
    }
  return s;
}

inline void save_csv(const DomainDataset& ds, const std::filesystem::path& path) { atomic_write(path, dataset_to_csv(ds)); }

inline DomainDataset dataset_from_csv(const std::string& text, const std::string& source = "<csv>") {
  auto perr = [&](std::size_t line, const std::string& msg) {
    fail(ErrorKind::parse_error, source + ":" + std::to_string(line) + ": " + msg);
  };
  std::vector<std::string> lines;
  {
    std::string cur;
    for (char ch : text) {
      if (ch == '\n') {
        lines.push_back(cur);
        cur.clear();
      } else {
        cur.push_back(ch);
      }
    }
    if (!cur.empty()) lines.push_back(cur);
  }
  if (lines.empty()) perr(1, "empty file");
  const auto header = split_fields(lines[0]);
  if (header.size() < 3 || header[0] != "domain" || header[1] != "label") perr(1, "header must be domain,label,x0,...");
  const std::size_t d = header.size() - 2;
  for (std::size_t c = 0; c < d; ++c)
    if (header[c + 2] != "x" + std::to_string(c)) perr(1, "expected column x" + std::to_string(c));

  DomainDataset ds;
  for (std::size_t ln = 1; ln < lines.size(); ++ln) {
    if (lines[ln].empty() || lines[ln] == "\r") continue;
    const auto f = split_fields(lines[ln]);
    if (f.size() != d + 2) perr(ln + 1, "expected " + std::to_string(d + 2) + " fields, got " + std::to_string(f.size()));
    if (f[0].empty()) perr(ln + 1, "empty domain id");
    char* end = nullptr;
    const long y = std::strtol(f[1].c_str(), &end, 10);
    if (f[1].empty() || *end != '\0' || y < 0) perr(ln + 1, "bad label '" + f[1] + "'");
    Vec x(static_cast<Eigen::Index>(d));
    for (std::size_t c = 0; c < d; ++c) {
      const double v = std::strtod(f[c + 2].c_str(), &end);
      if (f[c + 2].empty() || *end != '\0' || !std::isfinite(v)) perr(ln + 1, "bad value '" + f[c + 2] + "'");
      x[static_cast<Eigen::Index>(c)] = v;
    }
    ds.domains[f[0]].push_back({x, static_cast<int>(y)});
  }
  if (ds.domains.empty()) perr(2, "no data rows");
  return ds;
}

inline DomainDataset load_csv(const std::filesystem::path& path) {
  return dataset_from_csv(read_file(path), path.string());
}

// Flattening helpers used by training and evaluation.
inline std::vector<LabeledPoint> concat_domains(const DomainDataset& ds, const std::vector<std::string>& names) {
  std::vector<LabeledPoint> out;
  for (const auto& n : names) {
    auto it = ds.domains.find(n);
    require(it != ds.domains.end(), "unknown domain '" + n + "'");
    out.insert(out.end(), it->second.begin(), it->second.end());
  }
  return out;
}

inline std::vector<RepPoint> to_reps(const ModelParams& params, std::span<const LabeledPoint> pts) {
  std::vector<RepPoint> out;
  out.reserve(pts.size());
  for (const auto& p : pts) out.push_back({forward_rep(params, p.x), p.y});
  return out;
}

}  // namespace certdg
