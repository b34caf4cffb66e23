#pragma once

// Static report: certified-loss curves from a sweep table overlaid with the
// empirical (distance, loss) points of an evaluation table. Output is plain
// SVG and Markdown with fixed-precision numbers so bytes are reproducible.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "certdg/errors.hpp"
#include "certdg/io.hpp"

namespace certdg {

struct SweepRow {
  double rho_raw = 0.0;
  double rho_normalized = 0.0;
  std::string family;
  double worst_case_loss = 0.0;
  double gamma_opt = 0.0;
  double mean_sq_distortion = 0.0;
  bool converged = true;
};

struct EvalRow {
  std::string domain;
  std::string kind;  // source, source_domain, target, corruption, adversarial
  int severity = 0;
  double w2_raw = 0.0;
  double normalized_distance = 0.0;
  double ce_loss = 0.0;
  double error_rate = 0.0;
  double accuracy = 0.0;
};

inline const char* kSweepHeader = "rho_raw,rho_normalized,family,worst_case_loss,gamma_opt,mean_sq_distortion,converged";
inline const char* kEvalHeader = "domain,kind,severity,w2_raw,normalized_distance,ce_loss,error_rate,accuracy";

namespace detail {

inline std::vector<std::vector<std::string>> read_table(const std::string& text, const std::string& header,
                                                        const std::string& source) {
  std::vector<std::vector<std::string>> rows;
  std::size_t ln = 0, pos = 0;
  const std::size_t want = split_fields(header).size();
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string::npos) end = text.size();
    std::string line = text.substr(pos, end - pos);
    pos = end + 1;
    ++ln;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (ln == 1) {
      if (line != header) fail(ErrorKind::parse_error, source + ":1: unexpected header");
      continue;
    }
    if (line.empty()) continue;
    auto f = split_fields(line);
    if (f.size() != want)
      fail(ErrorKind::parse_error, source + ":" + std::to_string(ln) + ": expected " + std::to_string(want) + " fields");
    rows.push_back(std::move(f));
  }
  if (ln == 0) fail(ErrorKind::parse_error, source + ": empty file");
  return rows;
}

inline double num(const std::string& s, const std::string& where) {
  if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (s.empty() || *end != '\0') fail(ErrorKind::parse_error, where + ": bad number '" + s + "'");
  return v;
}

}  // namespace detail

inline std::vector<SweepRow> sweep_from_csv(const std::string& text, const std::string& source = "<sweep>") {
  std::vector<SweepRow> out;
  for (const auto& f : detail::read_table(text, kSweepHeader, source))
    out.push_back({detail::num(f[0], source), detail::num(f[1], source), f[2], detail::num(f[3], source),
                   detail::num(f[4], source), detail::num(f[5], source), f[6] == "1"});
  return out;
}

inline std::vector<EvalRow> eval_from_csv(const std::string& text, const std::string& source = "<eval>") {
  std::vector<EvalRow> out;
  for (const auto& f : detail::read_table(text, kEvalHeader, source))
    out.push_back({f[0], f[1], static_cast<int>(detail::num(f[2], source)), detail::num(f[3], source),
                   detail::num(f[4], source), detail::num(f[5], source), detail::num(f[6], source),
                   detail::num(f[7], source)});
  return out;
}

inline std::string sweep_to_csv(const std::vector<SweepRow>& rows) {
  std::string s = std::string(kSweepHeader) + "\n";
  for (const auto& r : rows)
    s += fmt_exact(r.rho_raw) + "," + fmt_exact(r.rho_normalized) + "," + r.family + "," + fmt_exact(r.worst_case_loss) +
         "," + fmt_exact(r.gamma_opt) + "," + fmt_exact(r.mean_sq_distortion) + "," + (r.converged ? "1" : "0") + "\n";
  return s;
}

inline std::string eval_to_csv(const std::vector<EvalRow>& rows) {
  std::string s = std::string(kEvalHeader) + "\n";
  for (const auto& r : rows)
    s += r.domain + "," + r.kind + "," + std::to_string(r.severity) + "," + fmt_exact(r.w2_raw) + "," +
         fmt_exact(r.normalized_distance) + "," + fmt_exact(r.ce_loss) + "," + fmt_exact(r.error_rate) + "," +
         fmt_exact(r.accuracy) + "\n";
  return s;
}

// Certified value usable at a given normalized distance: the certificate is
// non-decreasing in the radius, so the smallest swept radius at or beyond the
// distance gives a valid bound. Empty when the distance is past the sweep.
inline std::optional<double> certified_at(const std::vector<SweepRow>& sweep, const std::string& family, double dist) {
  std::optional<double> best;
  double best_r = std::numeric_limits<double>::infinity();
  for (const auto& r : sweep) {
    if (r.family != family || !std::isfinite(r.worst_case_loss)) continue;
    if (r.rho_normalized + 1e-12 >= dist && r.rho_normalized < best_r) {
      best_r = r.rho_normalized;
      best = r.worst_case_loss;
    }
  }
  return best;
}

struct ReportCheck {
  int compared = 0;
  int below = 0;
};

// Pairs each empirical row with the matching family: CE loss against the
// cross-entropy curve and error rate against the 0/1 curve.
inline ReportCheck check_below_curve(const std::vector<SweepRow>& sweep, const std::vector<EvalRow>& eval,
                                     double tol = 1e-3) {
  ReportCheck c;
  for (const auto& e : eval) {
    if (auto v = certified_at(sweep, "cross_entropy", e.normalized_distance)) {
      ++c.compared;
      c.below += e.ce_loss <= *v + tol ? 1 : 0;
    }
    if (auto v = certified_at(sweep, "zero_one", e.normalized_distance)) {
      ++c.compared;
      c.below += e.error_rate <= *v ? 1 : 0;
    }
  }
  return c;
}

inline std::string render_svg(const std::vector<SweepRow>& sweep, const std::vector<EvalRow>& eval) {
  const double W = 640, H = 420, L = 60, R = 150, T = 30, B = 50;
  double xmax = 0.0, ymax = 0.0;
  for (const auto& r : sweep)
    if (std::isfinite(r.worst_case_loss)) {
      xmax = std::max(xmax, r.rho_normalized);
      ymax = std::max(ymax, r.worst_case_loss);
    }
  for (const auto& e : eval) {
    if (std::isfinite(e.normalized_distance)) xmax = std::max(xmax, e.normalized_distance);
    if (std::isfinite(e.ce_loss)) ymax = std::max(ymax, e.ce_loss);
  }
  xmax = xmax > 0.0 ? xmax * 1.05 : 1.0;
  ymax = ymax > 0.0 ? ymax * 1.05 : 1.0;
  auto px = [&](double x) { return L + (W - L - R) * x / xmax; };
  auto py = [&](double y) { return H - B - (H - T - B) * y / ymax; };

  std::string s = strprintf(
      "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"%.0f\" height=\"%.0f\" viewBox=\"0 0 %.0f %.0f\">\n", W, H, W, H);
  s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s += strprintf("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L, H - B, W - R, H - B);
  s += strprintf("<line x1=\"%.2f\" y1=\"%.2f\" x2=\"%.2f\" y2=\"%.2f\" stroke=\"black\"/>\n", L, T, L, H - B);
  for (int t = 0; t <= 4; ++t) {
    const double xv = xmax * t / 4.0, yv = ymax * t / 4.0;
    s += strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"10\" text-anchor=\"middle\">%.2f</text>\n", px(xv), H - B + 14,
                   xv);
    s += strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"10\" text-anchor=\"end\">%.2f</text>\n", L - 4, py(yv) + 3, yv);
  }
  s += strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"12\" text-anchor=\"middle\">normalized distance</text>\n",
                 (L + W - R) / 2, H - 12);
  s += strprintf("<text x=\"14\" y=\"%.2f\" font-size=\"12\" transform=\"rotate(-90 14 %.2f)\" text-anchor=\"middle\">loss</text>\n",
                 (T + H - B) / 2, (T + H - B) / 2);

  const std::map<std::string, std::string> colors{
      {"cross_entropy", "#1f77b4"}, {"modified_hinge", "#2ca02c"}, {"zero_one", "#d62728"}};
  double ly = T + 10;
  for (const auto& [fam, col] : colors) {
    std::string pts;
    for (const auto& r : sweep)
      if (r.family == fam && std::isfinite(r.worst_case_loss))
        pts += strprintf("%.2f,%.2f ", px(r.rho_normalized), py(r.worst_case_loss));
    if (pts.empty()) continue;
    pts.pop_back();
    s += "<polyline fill=\"none\" stroke=\"" + col + "\" stroke-width=\"2\" stroke-dasharray=\"2,4\" points=\"" + pts +
         "\"/>\n";
    s += strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\" fill=\"%s\">certified %s</text>\n", W - R + 8, ly,
                   col.c_str(), fam.c_str());
    ly += 16;
  }
  bool any = false;
  for (const auto& e : eval) {
    if (!std::isfinite(e.normalized_distance) || !std::isfinite(e.ce_loss)) continue;
    any = true;
    s += strprintf("<circle cx=\"%.2f\" cy=\"%.2f\" r=\"3\" fill=\"#1f77b4\" fill-opacity=\"0.6\"/>\n",
                   px(e.normalized_distance), py(e.ce_loss));
    s += strprintf("<rect x=\"%.2f\" y=\"%.2f\" width=\"5\" height=\"5\" fill=\"#d62728\" fill-opacity=\"0.6\"/>\n",
                   px(e.normalized_distance) - 2.5, py(e.error_rate) - 2.5);
  }
  if (any) {
    s += strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\">o empirical CE</text>\n", W - R + 8, ly);
    s += strprintf("<text x=\"%.2f\" y=\"%.2f\" font-size=\"11\">&#9632; empirical error</text>\n", W - R + 8, ly + 16);
  }
  s += "</svg>\n";
  return s;
}

inline std::string render_markdown(const std::vector<SweepRow>& sweep, const std::vector<EvalRow>& eval) {
  std::string s = "# Certified vs empirical loss\n\n## Certified sweep\n\n";
  s += "| family | rho (normalized) | rho (raw) | worst-case loss | converged |\n|---|---|---|---|---|\n";
  for (const auto& r : sweep)
    s += strprintf("| %s | %.4f | %.6g | %.6g | %s |\n", r.family.c_str(), r.rho_normalized, r.rho_raw,
                   r.worst_case_loss, r.converged ? "yes" : "no");
  s += "\n## Evaluated domains\n\n";
  if (eval.empty()) return s + "(no evaluation rows)\n";
  s += "| domain | kind | severity | distance | CE loss | certified CE | CE gap | error | certified 0/1 |\n";
  s += "|---|---|---|---|---|---|---|---|---|\n";
  auto cell = [](std::optional<double> v) { return v ? strprintf("%.6g", *v) : std::string("n/a"); };
  for (const auto& e : eval) {
    const auto ce = certified_at(sweep, "cross_entropy", e.normalized_distance);
    const auto zo = certified_at(sweep, "zero_one", e.normalized_distance);
    s += strprintf("| %s | %s | %d | %.4f | %.6g | %s | %s | %.4f | %s |\n", e.domain.c_str(), e.kind.c_str(), e.severity,
                   e.normalized_distance, e.ce_loss, cell(ce).c_str(),
                   cell(ce ? std::optional<double>(*ce - e.ce_loss) : std::nullopt).c_str(), e.error_rate,
                   cell(zo).c_str());
  }
  const auto chk = check_below_curve(sweep, eval);
  s += strprintf("\n%d of %d comparable points lie at or below the certified curve.\n", chk.below, chk.compared);
  return s;
}

}  // namespace certdg
