#pragma once

// Dense feedforward representation network g and linear head h, with
// hand-written forward/backward passes and the three loss families.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "certdg/errors.hpp"

namespace certdg {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class Activation { relu, identity };

inline const char* to_string(Activation a) { return a == Activation::relu ? "relu" : "identity"; }

struct Layer {
  Mat weight;  // out x in
  Vec bias;    // out
  Activation activation = Activation::relu;

  Eigen::Index in_dim() const { return weight.cols(); }
  Eigen::Index out_dim() const { return weight.rows(); }
};

struct LinearHead {
  Mat weight;  // C x m
  Vec bias;    // C

  Eigen::Index classes() const { return weight.rows(); }
  Eigen::Index rep_dim() const { return weight.cols(); }
};

struct ModelParams {
  std::vector<Layer> layers;
  LinearHead head;

  Eigen::Index input_dim() const { return layers.empty() ? head.rep_dim() : layers.front().in_dim(); }
  Eigen::Index rep_dim() const { return layers.empty() ? head.rep_dim() : layers.back().out_dim(); }
  Eigen::Index classes() const { return head.classes(); }

  // Throws invalid-argument when shapes do not chain or an entry is non-finite.
  void validate() const {
    Eigen::Index prev = -1;
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& L = layers[l];
      require(L.bias.size() == L.out_dim(), "layer " + std::to_string(l) + ": bias size != rows");
      require(prev < 0 || L.in_dim() == prev, "layer " + std::to_string(l) + ": input dim does not chain");
      require(L.weight.allFinite() && L.bias.allFinite(), "layer " + std::to_string(l) + ": non-finite entry");
      prev = L.out_dim();
    }
    require(head.classes() >= 1, "head has no classes");
    require(head.bias.size() == head.classes(), "head bias size != classes");
    require(prev < 0 || head.rep_dim() == prev, "head input dim != representation dim");
    require(head.weight.allFinite() && head.bias.allFinite(), "head: non-finite entry");
  }
};

struct LabeledPoint {
  Vec x;
  int y = 0;
};

struct RepPoint {
  Vec z;
  int y = 0;
};

enum class LossKind { cross_entropy, modified_hinge, zero_one };

struct LossFamily {
  LossKind kind = LossKind::cross_entropy;
  double hinge_alpha = 0.1;

  static LossFamily cross_entropy() { return {LossKind::cross_entropy, 0.1}; }
  static LossFamily modified_hinge(double alpha = 0.1) {
    require(alpha > 0.0, "modified_hinge requires alpha > 0");
    return {LossKind::modified_hinge, alpha};
  }
  static LossFamily zero_one() { return {LossKind::zero_one, 0.1}; }

  bool differentiable() const { return kind != LossKind::zero_one; }
};

inline const char* to_string(LossKind k) {
  switch (k) {
    case LossKind::cross_entropy: return "cross_entropy";
    case LossKind::modified_hinge: return "modified_hinge";
    case LossKind::zero_one: return "zero_one";
  }
  return "unknown";
}

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "cross_entropy") return LossKind::cross_entropy;
  if (s == "modified_hinge") return LossKind::modified_hinge;
  if (s == "zero_one") return LossKind::zero_one;
  fail(ErrorKind::invalid_argument, "unknown loss family '" + s + "'");
}

// ---------------------------------------------------------------------------
// forward

inline double activate(Activation a, double v) { return a == Activation::relu ? (v > 0.0 ? v : 0.0) : v; }

inline Vec apply_layer(const Layer& L, const Vec& in) {
  Vec out = L.weight * in + L.bias;
  if (L.activation == Activation::relu) out = out.cwiseMax(0.0);
  return out;
}

inline Vec forward_rep(const ModelParams& params, const Vec& x) {
  require(x.size() == params.input_dim(), "input dimension " + std::to_string(x.size()) + " != " +
                                              std::to_string(params.input_dim()));
  Vec h = x;
  for (const auto& L : params.layers) h = apply_layer(L, h);
  return h;
}

inline Vec logits(const LinearHead& head, const Vec& z) {
  require(z.size() == head.rep_dim(), "representation dimension mismatch");
  return head.weight * z + head.bias;
}

// Largest logit among classes other than y; ties go to the lowest index.
inline Eigen::Index runner_up(const Vec& lg, int y) {
  Eigen::Index best = -1;
  for (Eigen::Index k = 0; k < lg.size(); ++k) {
    if (k == y) continue;
    if (best < 0 || lg[k] > lg[best]) best = k;
  }
  return best;
}

inline Eigen::Index predict(const Vec& lg) {
  Eigen::Index best = 0;
  for (Eigen::Index k = 1; k < lg.size(); ++k)
    if (lg[k] > lg[best]) best = k;
  return best;
}

inline double log_sum_exp(const Vec& v) {
  const double c = v.maxCoeff();
  return c + std::log((v.array() - c).exp().sum());
}

inline Vec softmax(const Vec& v) {
  Vec e = (v.array() - v.maxCoeff()).exp();
  return e / e.sum();
}

inline double hinge_margin(const Vec& lg, int y) {
  const Eigen::Index k = runner_up(lg, y);
  return k < 0 ? std::numeric_limits<double>::infinity() : lg[y] - lg[k];
}

inline double modified_hinge_value(double t, double alpha) {
  return std::max(0.0, 1.0 - t) - alpha * std::max(0.0, t - 1.0);
}

inline double loss_from_logits(const Vec& lg, int y, const LossFamily& fam) {
  require(y >= 0 && y < lg.size(), "label out of range");
  switch (fam.kind) {
    case LossKind::cross_entropy: return log_sum_exp(lg) - lg[y];
    case LossKind::modified_hinge: return modified_hinge_value(hinge_margin(lg, y), fam.hinge_alpha);
    case LossKind::zero_one: return predict(lg) == y ? 0.0 : 1.0;
  }
  return 0.0;
}

// d loss / d logits. At the hinge kink t = 1 the right-derivative is used.
inline Vec grad_loss_logits(const Vec& lg, int y, const LossFamily& fam) {
  require(y >= 0 && y < lg.size(), "label out of range");
  switch (fam.kind) {
    case LossKind::cross_entropy: {
      Vec g = softmax(lg);
      g[y] -= 1.0;
      return g;
    }
    case LossKind::modified_hinge: {
      Vec g = Vec::Zero(lg.size());
      const Eigen::Index k = runner_up(lg, y);
      if (k < 0) return g;
      const double t = lg[y] - lg[k];
      const double dl_dt = t < 1.0 ? -1.0 : -fam.hinge_alpha;
      g[y] += dl_dt;
      g[k] -= dl_dt;
      return g;
    }
    case LossKind::zero_one: fail(ErrorKind::unsupported_loss, "zero_one has no gradient");
  }
  return {};
}

inline double loss(const LinearHead& head, const Vec& z, int y, const LossFamily& fam) {
  return loss_from_logits(logits(head, z), y, fam);
}

inline Vec grad_loss_z(const LinearHead& head, const Vec& z, int y, const LossFamily& fam) {
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "zero_one has no gradient");
  return head.weight.transpose() * grad_loss_logits(logits(head, z), y, fam);
}

// ---------------------------------------------------------------------------
// backward

struct ForwardTrace {
  std::vector<Vec> inputs;  // input to each layer
  std::vector<Vec> pre;     // pre-activation of each layer
  Vec out;
};

inline ForwardTrace forward_trace(std::span<const Layer> layers, const Vec& x) {
  ForwardTrace tr;
  tr.inputs.reserve(layers.size());
  tr.pre.reserve(layers.size());
  Vec h = x;
  for (const auto& L : layers) {
    tr.inputs.push_back(h);
    Vec a = L.weight * h + L.bias;
    tr.pre.push_back(a);
    h = L.activation == Activation::relu ? Vec(a.cwiseMax(0.0)) : a;
  }
  tr.out = std::move(h);
  return tr;
}

// Accumulates scale * d/dparams into grads and returns d/dx for upstream
// gradient dout on the network output. ReLU'(0) is taken as 0.
inline Vec backprop_layers(std::span<const Layer> layers, const ForwardTrace& tr, Vec dout,
                           std::span<Layer> grads, double scale = 1.0) {
  for (std::size_t l = layers.size(); l-- > 0;) {
    const auto& L = layers[l];
    if (L.activation == Activation::relu) {
      for (Eigen::Index i = 0; i < dout.size(); ++i)
        if (!(tr.pre[l][i] > 0.0)) dout[i] = 0.0;
    }
    if (!grads.empty()) {
      grads[l].weight.noalias() += scale * dout * tr.inputs[l].transpose();
      grads[l].bias += scale * dout;
    }
    dout = L.weight.transpose() * dout;
  }
  return dout;
}

inline ModelParams zeros_like(const ModelParams& p) {
  ModelParams z;
  z.layers.reserve(p.layers.size());
  for (const auto& L : p.layers)
    z.layers.push_back({Mat::Zero(L.weight.rows(), L.weight.cols()), Vec::Zero(L.bias.size()), L.activation});
  z.head = {Mat::Zero(p.head.weight.rows(), p.head.weight.cols()), Vec::Zero(p.head.bias.size())};
  return z;
}

inline void check_same_shape(const ModelParams& a, const ModelParams& b) {
  require(a.layers.size() == b.layers.size(), "layer count mismatch");
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    require(a.layers[l].weight.rows() == b.layers[l].weight.rows() &&
                a.layers[l].weight.cols() == b.layers[l].weight.cols() &&
                a.layers[l].bias.size() == b.layers[l].bias.size(),
            "layer " + std::to_string(l) + " shape mismatch");
  }
  require(a.head.weight.rows() == b.head.weight.rows() && a.head.weight.cols() == b.head.weight.cols() &&
              a.head.bias.size() == b.head.bias.size(),
          "head shape mismatch");
}

// a += s * b
inline void axpy(ModelParams& a, double s, const ModelParams& b) {
  check_same_shape(a, b);
  for (std::size_t l = 0; l < a.layers.size(); ++l) {
    a.layers[l].weight += s * b.layers[l].weight;
    a.layers[l].bias += s * b.layers[l].bias;
  }
  a.head.weight += s * b.head.weight;
  a.head.bias += s * b.head.bias;
}

// Adds the contribution of one point with loss-gradient weight `scale`.
// `dz_extra` is an extra upstream gradient on the representation (may be empty).
inline double accumulate_point(const ModelParams& params, const LabeledPoint& p, const LossFamily& fam,
                               double scale, ModelParams& grads, const Vec& rep_offset = Vec(),
                               const Vec& dz_extra = Vec()) {
  ForwardTrace tr = forward_trace(params.layers, p.x);
  Vec z = rep_offset.size() ? Vec(tr.out + rep_offset) : tr.out;
  const Vec lg = logits(params.head, z);
  const double value = loss_from_logits(lg, p.y, fam);
  const Vec dlg = grad_loss_logits(lg, p.y, fam) * scale;
  grads.head.weight.noalias() += dlg * z.transpose();
  grads.head.bias += dlg;
  Vec dz = params.head.weight.transpose() * dlg;
  if (dz_extra.size()) dz += dz_extra;
  backprop_layers(params.layers, tr, dz, grads.layers);
  return value;
}

struct BackwardResult {
  ModelParams grads;
  double mean_loss = 0.0;
};

inline BackwardResult backward(const ModelParams& params, std::span<const LabeledPoint> batch,
                               const LossFamily& fam) {
  require(!batch.empty(), "backward on empty batch");
  if (!fam.differentiable()) fail(ErrorKind::unsupported_loss, "zero_one has no gradient");
  BackwardResult r{zeros_like(params), 0.0};
  const double w = 1.0 / static_cast<double>(batch.size());
  double total = 0.0;
  for (const auto& p : batch) total += accumulate_point(params, p, fam, w, r.grads);
  r.mean_loss = total * w;
  return r;
}

// d loss(h(g(x)), y) / dx
inline Vec grad_loss_x(const ModelParams& params, const Vec& x, int y, const LossFamily& fam) {
  ForwardTrace tr = forward_trace(params.layers, x);
  const Vec dz = grad_loss_z(params.head, tr.out, y, fam);
  return backprop_layers(params.layers, tr, dz, {});
}

inline void scale_in_place(ModelParams& a, double s) {
  for (auto& L : a.layers) {
    L.weight *= s;
    L.bias *= s;
  }
  a.head.weight *= s;
  a.head.bias *= s;
}

inline ModelParams sgd_update(const ModelParams& params, const ModelParams& grads, double eta) {
  require(eta >= 0.0, "learning rate must be non-negative");
  check_same_shape(params, grads);
  ModelParams out = params;
  axpy(out, -eta, grads);
  return out;
}

struct NetShape {
  int input_dim = 2;
  std::vector<int> hidden{16, 16};
  int rep_dim = 2;
  int classes = 2;
};

// He-uniform weights, zero biases. Hidden layers use relu; the final
// representation layer is linear.
inline ModelParams init_params(const NetShape& shape, std::uint64_t seed) {
  require(shape.input_dim > 0 && shape.rep_dim > 0 && shape.classes >= 2, "invalid network shape");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(-1.0, 1.0);
  auto fill = [&](Mat& m) {
    const double lim = std::sqrt(6.0 / static_cast<double>(m.cols()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
      for (Eigen::Index c = 0; c < m.cols(); ++c) m(r, c) = lim * unit(rng);
  };
  ModelParams p;
  int prev = shape.input_dim;
  for (int w : shape.hidden) {
    require(w > 0, "hidden width must be positive");
    Layer L{Mat(w, prev), Vec::Zero(w), Activation::relu};
    fill(L.weight);
    p.layers.push_back(std::move(L));
    prev = w;
  }
  Layer rep{Mat(shape.rep_dim, prev), Vec::Zero(shape.rep_dim), Activation::identity};
  fill(rep.weight);
  p.layers.push_back(std::move(rep));
  p.head = {Mat(shape.classes, shape.rep_dim), Vec::Zero(shape.classes)};
  fill(p.head.weight);
  return p;
}

}  // namespace certdg
