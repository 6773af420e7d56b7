#pragma once

// Shared helpers for the test suites: random instances and the
// finite-difference oracle used to check analytic gradients.

#include <random>
#include <vector>

#include "moe/field_model.hpp"
#include "moe/gating_mlp.hpp"
#include "moe/objective.hpp"

namespace moetest {

inline std::vector<double> random_features(std::size_t n_points, int width,
                                           std::mt19937_64& rng) {
  std::vector<double> f(n_points * static_cast<std::size_t>(width));
  for (double& v : f) v = moe::uniform_sym(rng, 2.0);
  return f;
}

inline moe::NormalizedSampleView random_view(std::size_t n_points, int n_experts,
                                             std::mt19937_64& rng) {
  moe::NormalizedSampleView v;
  v.n_points = n_points;
  v.n_experts = n_experts;
  v.expert_p.resize(n_points * n_experts);
  v.expert_wss.resize(n_points * n_experts * 3);
  v.p_true.resize(n_points);
  v.wss_true.resize(n_points * 3);
  for (double& x : v.expert_p) x = moe::uniform_sym(rng, 1.5);
  for (double& x : v.expert_wss) x = moe::uniform_sym(rng, 1.5);
  for (double& x : v.p_true) x = moe::uniform_sym(rng, 1.5);
  for (double& x : v.wss_true) x = moe::uniform_sym(rng, 1.5);
  return v;
}

// Total training loss for a pair of heads on one instance.
inline double pair_loss(const moe::GatingHead& hp, const moe::GatingHead& hs,
                        const std::vector<double>& features,
                        const moe::NormalizedSampleView& view, double lambda,
                        moe::EntropyMode mode) {
  moe::HeadOutput op = moe::forward(hp, features, view.n_points);
  moe::HeadOutput os = moe::forward(hs, features, view.n_points);
  moe::ObjectiveResult r = moe::evaluate_objective(view, op.weights, op.bias, os.weights,
                                                   os.bias, lambda, mode);
  return r.breakdown.total;
}

struct GradCheckResult {
  double max_rel_err = 0.0;  // componentwise; noisy for near-zero components
  double vec_rel_err = 0.0;  // ||g_fd - g_a|| / (||g_fd|| + ||g_a||)
  std::size_t n_checked = 0;
};

// Central finite differences over every parameter of both heads.
// Componentwise rel error uses |fd| + |analytic| + 1e-8 in the denominator;
// the vector error compares the full gradients and is robust to roundoff on
// individual tiny components.
inline GradCheckResult gradient_check(moe::GatingHead hp, moe::GatingHead hs,
                                      const std::vector<double>& features,
                                      const moe::NormalizedSampleView& view,
                                      double lambda, moe::EntropyMode mode,
                                      double eps = 1e-5) {
  moe::ForwardCache cp, cs;
  moe::HeadOutput op = moe::forward(hp, features, view.n_points, &cp);
  moe::HeadOutput os = moe::forward(hs, features, view.n_points, &cs);
  moe::ObjectiveResult obj =
      moe::evaluate_objective(view, op.weights, op.bias, os.weights, os.bias, lambda, mode);
  moe::HeadGradients gp = moe::backward(hp, cp, op, obj.pressure.d_weights, obj.pressure.d_bias);
  moe::HeadGradients gs = moe::backward(hs, cs, os, obj.shear.d_weights, obj.shear.d_bias);

  GradCheckResult res;
  double diff_sq = 0.0, fd_sq = 0.0, an_sq = 0.0;
  auto check_param = [&](double* param, double analytic) {
    const double saved = *param;
    *param = saved + eps;
    const double hi = pair_loss(hp, hs, features, view, lambda, mode);
    *param = saved - eps;
    const double lo = pair_loss(hp, hs, features, view, lambda, mode);
    *param = saved;
    const double fd = (hi - lo) / (2.0 * eps);
    const double rel = std::abs(fd - analytic) / (std::abs(fd) + std::abs(analytic) + 1e-8);
    res.max_rel_err = std::max(res.max_rel_err, rel);
    diff_sq += (fd - analytic) * (fd - analytic);
    fd_sq += fd * fd;
    an_sq += analytic * analytic;
    ++res.n_checked;
  };
  auto check_head = [&](moe::GatingHead& h, const moe::HeadGradients& g) {
    for (std::size_t l = 0; l < h.n_layers(); ++l) {
      for (std::size_t i = 0; i < h.weights[l].size(); ++i) {
        check_param(&h.weights[l][i], g.weights[l][i]);
      }
      for (std::size_t i = 0; i < h.biases[l].size(); ++i) {
        check_param(&h.biases[l][i], g.biases[l][i]);
      }
    }
  };
  check_head(hp, gp);
  check_head(hs, gs);
  res.vec_rel_err =
      std::sqrt(diff_sq) / (std::sqrt(fd_sq) + std::sqrt(an_sq) + 1e-12);
  return res;
}

}  // namespace moetest
