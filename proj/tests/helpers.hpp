#pragma once

// Shared fixtures for the unit suites: seeded random models and points, a
// flat view of parameters for finite differences, and error measures.

#include <cmath>
#include <cstdint>
#include <functional>
#include <random>
#include <vector>

#include "certdg/netcore.hpp"

namespace testutil {

using certdg::LabeledPoint;
using certdg::LinearHead;
using certdg::Mat;
using certdg::ModelParams;
using certdg::RepPoint;
using certdg::Vec;

inline Vec randn(std::mt19937_64& rng, Eigen::Index n, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Vec v(n);
  for (Eigen::Index i = 0; i < n; ++i) v[i] = g(rng);
  return v;
}

inline Mat randn(std::mt19937_64& rng, Eigen::Index r, Eigen::Index c, double sd = 1.0) {
  std::normal_distribution<double> g(0.0, sd);
  Mat m(r, c);
  for (Eigen::Index i = 0; i < r; ++i)
    for (Eigen::Index j = 0; j < c; ++j) m(i, j) = g(rng);
  return m;
}

inline LinearHead random_head(std::mt19937_64& rng, Eigen::Index classes, Eigen::Index dim, double sd = 1.0) {
  return {randn(rng, classes, dim, sd), randn(rng, classes, 0.5)};
}

// Small network with random biases so ReLU kinks are rarely near a probe.
inline ModelParams random_model(std::uint64_t seed, int in = 2, std::vector<int> hidden = {16, 16}, int rep = 2,
                                int classes = 2) {
  certdg::NetShape s{in, hidden, rep, classes};
  ModelParams p = certdg::init_params(s, seed);
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  for (auto& L : p.layers) L.bias = randn(rng, L.bias.size(), 0.3);
  p.head.bias = randn(rng, p.head.bias.size(), 0.3);
  return p;
}

inline std::vector<RepPoint> random_reps(std::mt19937_64& rng, std::size_t n, Eigen::Index dim, int classes,
                                         double sd = 1.0) {
  std::vector<RepPoint> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back({randn(rng, dim, sd), static_cast<int>(i % classes)});
  return out;
}

// Visits every scalar parameter by reference.
inline void for_each_param(ModelParams& p, const std::function<void(double&)>& fn) {
  for (auto& L : p.layers) {
    for (Eigen::Index i = 0; i < L.weight.size(); ++i) fn(L.weight.data()[i]);
    for (Eigen::Index i = 0; i < L.bias.size(); ++i) fn(L.bias.data()[i]);
  }
  for (Eigen::Index i = 0; i < p.head.weight.size(); ++i) fn(p.head.weight.data()[i]);
  for (Eigen::Index i = 0; i < p.head.bias.size(); ++i) fn(p.head.bias.data()[i]);
}

inline std::vector<double> flatten(const ModelParams& p) {
  std::vector<double> v;
  ModelParams q = p;
  for_each_param(q, [&](double& x) { v.push_back(x); });
  return v;
}

// Central differences of a scalar function of a vector.
inline Vec fd_grad(const std::function<double(const Vec&)>& f, const Vec& x, double h = 1e-6) {
  Vec g(x.size());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    Vec a = x, b = x;
    a[i] += h;
    b[i] -= h;
    g[i] = (f(a) - f(b)) / (2.0 * h);
  }
  return g;
}

// Central differences with respect to every model parameter.
inline std::vector<double> fd_param_grad(const std::function<double(const ModelParams&)>& f, const ModelParams& p,
                                         double h = 1e-6) {
  std::vector<double> g;
  ModelParams q = p;
  for_each_param(q, [&](double& x) {
    const double keep = x;
    x = keep + h;
    const double up = f(q);
    x = keep - h;
    const double dn = f(q);
    x = keep;
    g.push_back((up - dn) / (2.0 * h));
  });
  return g;
}

inline double rel_err(const Vec& a, const Vec& b, double floor = 1e-8) {
  return (a - b).norm() / std::max({a.norm(), b.norm(), floor});
}

inline double rel_err(const std::vector<double>& a, const std::vector<double>& b, double floor = 1e-8) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  return std::sqrt(d) / std::max({std::sqrt(na), std::sqrt(nb), floor});
}

}  // namespace testutil
