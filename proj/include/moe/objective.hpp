#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "moe/errors.hpp"

namespace moe {

enum class EntropyMode { maximize, minimize, none };

inline std::string to_string(EntropyMode m) {
  switch (m) {
    case EntropyMode::maximize: return "maximize";
    case EntropyMode::minimize: return "minimize";
    case EntropyMode::none: return "none";
  }
  return "maximize";
}

inline EntropyMode entropy_mode_from_string(const std::string& s) {
  if (s == "maximize") return EntropyMode::maximize;
  if (s == "minimize") return EntropyMode::minimize;
  if (s == "none") return EntropyMode::none;
  throw ConfigError("unknown entropy mode '" + s + "'");
}

inline constexpr double kEntropyEps = 1e-12;

struct LossBreakdown {
  double loss_pressure = 0.0;
  double loss_shear = 0.0;
  double entropy_pressure = 0.0;
  double entropy_shear = 0.0;
  double lambda_entropy = 0.0;
  double total = 0.0;
};

// P_moe = sum_i w_i * P_i + C, per point. bias may be empty.
inline std::vector<double> blend_pressure(const std::vector<double>& weights,
                                          const std::vector<double>& expert_p,
                                          const std::vector<double>& bias,
                                          std::size_t n_points, int n_experts) {
  if (weights.size() != n_points * static_cast<std::size_t>(n_experts) ||
      expert_p.size() != weights.size()) {
    throw UsageError("blend_pressure: shape mismatch");
  }
  if (!bias.empty() && bias.size() != n_points) {
    throw UsageError("blend_pressure: bias shape mismatch");
  }
  std::vector<double> out(n_points);
  for (std::size_t p = 0; p < n_points; ++p) {
    const double* w = weights.data() + p * n_experts;
    const double* e = expert_p.data() + p * n_experts;
    double acc = bias.empty() ? 0.0 : bias[p];
    for (int i = 0; i < n_experts; ++i) acc += w[i] * e[i];
    out[p] = acc;
  }
  return out;
}

// One weight per expert shared across all three components; bias added
// componentwise. expert_wss layout: point-major, expert, component.
inline std::vector<double> blend_shear(const std::vector<double>& weights,
                                       const std::vector<double>& expert_wss,
                                       const std::vector<double>& bias,
                                       std::size_t n_points, int n_experts) {
  if (weights.size() != n_points * static_cast<std::size_t>(n_experts) ||
      expert_wss.size() != n_points * static_cast<std::size_t>(n_experts) * 3) {
    throw UsageError("blend_shear: shape mismatch");
  }
  if (!bias.empty() && bias.size() != n_points * 3) {
    throw UsageError("blend_shear: bias shape mismatch");
  }
  std::vector<double> out(n_points * 3, 0.0);
  for (std::size_t p = 0; p < n_points; ++p) {
    const double* w = weights.data() + p * n_experts;
    const double* e = expert_wss.data() + p * n_experts * 3;
    double* o = out.data() + p * 3;
    if (!bias.empty()) {
      for (int c = 0; c < 3; ++c) o[c] = bias[p * 3 + c];
    }
    for (int i = 0; i < n_experts; ++i) {
      for (int c = 0; c < 3; ++c) o[c] += w[i] * e[i * 3 + c];
    }
  }
  return out;
}

// Mean of squared differences over all elements.
inline double mse(const std::vector<double>& pred, const std::vector<double>& truth) {
  if (pred.empty() || pred.size() != truth.size()) {
    throw UsageError("mse: empty or mismatched inputs");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    acc += d * d;
  }
  return acc / static_cast<double>(pred.size());
}

// Mean over points of H = -sum_i w_i ln(w_i + eps), natural log.
inline double entropy(const std::vector<double>& weights, std::size_t n_points,
                      int n_experts) {
  if (n_points == 0 || weights.size() != n_points * static_cast<std::size_t>(n_experts)) {
    throw UsageError("entropy: shape mismatch");
  }
  double acc = 0.0;
  for (std::size_t p = 0; p < n_points; ++p) {
    const double* w = weights.data() + p * n_experts;
    double h = 0.0;
    for (int i = 0; i < n_experts; ++i) h -= w[i] * std::log(w[i] + kEntropyEps);
    // the epsilon makes an exactly one-hot row come out at -eps; clamp to 0
    acc += std::max(h, 0.0);
  }
  return acc / static_cast<double>(n_points);
}

inline double entropy_sign(EntropyMode mode) {
  switch (mode) {
    case EntropyMode::maximize: return -1.0;
    case EntropyMode::minimize: return 1.0;
    case EntropyMode::none: return 0.0;
  }
  return -1.0;
}

inline LossBreakdown total_loss(double loss_pressure, double loss_shear,
                                double entropy_pressure, double entropy_shear,
                                double lambda_entropy, EntropyMode mode) {
  if (lambda_entropy < 0.0) throw UsageError("total_loss: negative lambda");
  LossBreakdown b;
  b.loss_pressure = loss_pressure;
  b.loss_shear = loss_shear;
  b.entropy_pressure = entropy_pressure;
  b.entropy_shear = entropy_shear;
  b.lambda_entropy = lambda_entropy;
  b.total = loss_pressure + loss_shear +
            entropy_sign(mode) * lambda_entropy * (entropy_pressure + entropy_shear);
  return b;
}

// Per-sample data in normalized units, as consumed by the loss.
struct NormalizedSampleView {
  std::size_t n_points = 0;
  int n_experts = 0;
  std::vector<double> expert_p;    // n x E
  std::vector<double> expert_wss;  // n x E x 3
  std::vector<double> p_true;      // n
  std::vector<double> wss_true;    // n x 3
};

struct HeadUpstream {
  std::vector<double> d_weights;  // n x E
  std::vector<double> d_bias;     // n x bias_dim
};

struct ObjectiveResult {
  LossBreakdown breakdown;
  HeadUpstream pressure;
  HeadUpstream shear;
};

// Evaluates the full training objective for one sample and the exact
// gradients w.r.t. both heads' outputs (weights and bias corrections).
inline ObjectiveResult evaluate_objective(
    const NormalizedSampleView& data, const std::vector<double>& weights_p,
    const std::vector<double>& bias_p, const std::vector<double>& weights_s,
    const std::vector<double>& bias_s, double lambda_entropy, EntropyMode mode) {
  const std::size_t n = data.n_points;
  const int ne = data.n_experts;
  if (n == 0) throw UsageError("evaluate_objective: empty sample");

  const std::vector<double> p_moe = blend_pressure(weights_p, data.expert_p, bias_p, n, ne);
  const std::vector<double> wss_moe = blend_shear(weights_s, data.expert_wss, bias_s, n, ne);

  const double loss_p = mse(p_moe, data.p_true);
  const double loss_s = mse(wss_moe, data.wss_true);
  const double ent_p = entropy(weights_p, n, ne);
  const double ent_s = entropy(weights_s, n, ne);

  ObjectiveResult res;
  res.breakdown = total_loss(loss_p, loss_s, ent_p, ent_s, lambda_entropy, mode);

  const double sign = entropy_sign(mode) * lambda_entropy;
  const double inv_n = 1.0 / static_cast<double>(n);
  const double inv_3n = 1.0 / (3.0 * static_cast<double>(n));

  res.pressure.d_weights.assign(n * static_cast<std::size_t>(ne), 0.0);
  res.pressure.d_bias.assign(bias_p.size(), 0.0);
  res.shear.d_weights.assign(n * static_cast<std::size_t>(ne), 0.0);
  res.shear.d_bias.assign(bias_s.size(), 0.0);

  for (std::size_t p = 0; p < n; ++p) {
    const double diff_p = 2.0 * inv_n * (p_moe[p] - data.p_true[p]);
    const double* ep = data.expert_p.data() + p * ne;
    const double* wp = weights_p.data() + p * ne;
    double* gwp = res.pressure.d_weights.data() + p * ne;
    for (int i = 0; i < ne; ++i) {
      gwp[i] = diff_p * ep[i] +
               sign * inv_n * (-std::log(wp[i] + kEntropyEps) - wp[i] / (wp[i] + kEntropyEps));
    }
    if (!bias_p.empty()) res.pressure.d_bias[p] = diff_p;

    const double* ew = data.expert_wss.data() + p * ne * 3;
    const double* ws = weights_s.data() + p * ne;
    double* gws = res.shear.d_weights.data() + p * ne;
    double diff_s[3];
    for (int c = 0; c < 3; ++c) {
      diff_s[c] = 2.0 * inv_3n * (wss_moe[p * 3 + c] - data.wss_true[p * 3 + c]);
    }
    for (int i = 0; i < ne; ++i) {
      double acc = 0.0;
      for (int c = 0; c < 3; ++c) acc += diff_s[c] * ew[i * 3 + c];
      gws[i] = acc + sign * inv_n *
                         (-std::log(ws[i] + kEntropyEps) - ws[i] / (ws[i] + kEntropyEps));
    }
    if (!bias_s.empty()) {
      for (int c = 0; c < 3; ++c) res.shear.d_bias[p * 3 + c] = diff_s[c];
    }
  }
  return res;
}

}  // namespace moe
