#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "moe/errors.hpp"
#include "moe/io_util.hpp"

namespace moe {

enum class HeadKind { pressure, shear };

inline std::string to_string(HeadKind k) {
  return k == HeadKind::pressure ? "pressure" : "shear";
}

inline HeadKind head_kind_from_string(const std::string& s) {
  if (s == "pressure") return HeadKind::pressure;
  if (s == "shear") return HeadKind::shear;
  throw FormatError("unknown head_kind '" + s + "'");
}

// bias correction width: scalar for the pressure head, 3-vector for shear
inline int bias_width(HeadKind kind, bool bias_correction) {
  if (!bias_correction) return 0;
  return kind == HeadKind::pressure ? 1 : 3;
}

// One gating MLP: 3 ReLU hidden layers by default, final linear layer whose
// first E logits are softmaxed into expert weights; any extra outputs are the
// raw additive correction.
struct GatingHead {
  HeadKind kind = HeadKind::pressure;
  int num_experts = 0;
  bool bias_correction = false;
  std::vector<int> layer_dims;                 // [D_in, h1, h2, h3, D_out]
  std::vector<std::vector<double>> weights;    // per layer, row-major out x in
  std::vector<std::vector<double>> biases;     // per layer, out

  int input_dim() const { return layer_dims.front(); }
  int output_dim() const { return layer_dims.back(); }
  std::size_t n_layers() const { return weights.size(); }

  std::size_t n_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      n += weights[l].size() + biases[l].size();
    }
    return n;
  }
};

struct HeadOutput {
  std::size_t n_points = 0;
  int num_experts = 0;
  int bias_dim = 0;
  std::vector<double> weights;  // n_points x num_experts, row-major
  std::vector<double> bias;     // n_points x bias_dim (empty when disabled)
};

// Activations kept for the backward pass.
struct ForwardCache {
  std::size_t n_points = 0;
  std::vector<std::vector<double>> post;  // per layer, n_points x dim, post-ReLU
  std::vector<double> logits;             // n_points x D_out (pre-softmax)
};

struct HeadGradients {
  std::vector<std::vector<double>> weights;
  std::vector<std::vector<double>> biases;
  std::vector<double> inputs;  // n_points x D_in

  double squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights)
      for (double v : w) s += v * v;
    for (const auto& b : biases)
      for (double v : b) s += v * v;
    return s;
  }
};

inline GatingHead init_head(const std::vector<int>& layer_dims, std::uint64_t seed,
                            bool bias_correction_enabled, HeadKind head_kind) {
  if (layer_dims.size() < 2) throw UsageError("init_head: need at least 2 dims");
  for (int d : layer_dims) {
    if (d <= 0) throw UsageError("init_head: layer dims must be positive");
  }
  GatingHead h;
  h.kind = head_kind;
  h.bias_correction = bias_correction_enabled;
  h.layer_dims = layer_dims;
  h.num_experts = layer_dims.back() - bias_width(head_kind, bias_correction_enabled);
  if (h.num_experts < 1) {
    throw UsageError("init_head: output dim too small for bias correction");
  }

  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const int fan_in = layer_dims[l];
    const int fan_out = layer_dims[l + 1];
    const double a = std::sqrt(2.0 / static_cast<double>(fan_in));
    std::vector<double> w(static_cast<std::size_t>(fan_out) * fan_in);
    for (double& v : w) v = uniform_sym(rng, a);
    h.weights.push_back(std::move(w));
    h.biases.push_back(std::vector<double>(fan_out, 0.0));
  }
  return h;
}

inline void softmax_row(const double* logits, int n, double* out) {
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double sum = 0.0;
  for (int i = 0; i < n; ++i) {
    out[i] = std::exp(logits[i] - mx);
    sum += out[i];
  }
  for (int i = 0; i < n; ++i) out[i] /= sum;
}

inline std::vector<double> softmax(const std::vector<double>& logits) {
  for (double v : logits) {
    if (!std::isfinite(v)) throw DataError("softmax: non-finite logit");
  }
  std::vector<double> out(logits.size());
  softmax_row(logits.data(), static_cast<int>(logits.size()), out.data());
  return out;
}

inline HeadOutput forward(const GatingHead& head, const std::vector<double>& features,
                          std::size_t n_points, ForwardCache* cache = nullptr) {
  const int d_in = head.input_dim();
  if (features.size() != n_points * static_cast<std::size_t>(d_in)) {
    throw UsageError("forward: feature width mismatch");
  }
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (!std::isfinite(features[i])) {
      throw DataError("forward: non-finite feature at point " +
                      std::to_string(i / static_cast<std::size_t>(d_in)));
    }
  }

  const std::size_t n_layers = head.n_layers();
  std::vector<double> cur(features);
  if (cache) {
    cache->n_points = n_points;
    cache->post.assign(1, cur);
  }

  for (std::size_t l = 0; l < n_layers; ++l) {
    const int in_dim = head.layer_dims[l];
    const int out_dim = head.layer_dims[l + 1];
    const bool last = (l + 1 == n_layers);
    std::vector<double> next(n_points * static_cast<std::size_t>(out_dim));
    const double* w = head.weights[l].data();
    const double* b = head.biases[l].data();
    for (std::size_t p = 0; p < n_points; ++p) {
      const double* x = cur.data() + p * in_dim;
      double* y = next.data() + p * out_dim;
      for (int o = 0; o < out_dim; ++o) {
        const double* wr = w + static_cast<std::size_t>(o) * in_dim;
        double acc = b[o];
        for (int i = 0; i < in_dim; ++i) acc += wr[i] * x[i];
        // ReLU subgradient convention: 0 at exactly 0
        y[o] = last ? acc : (acc > 0.0 ? acc : 0.0);
      }
    }
    cur.swap(next);
    if (cache && !last) cache->post.push_back(cur);
  }

  const int d_out = head.output_dim();
  const int bw = bias_width(head.kind, head.bias_correction);
  const int ne = head.num_experts;

  if (cache) cache->logits = cur;

  HeadOutput out;
  out.n_points = n_points;
  out.num_experts = ne;
  out.bias_dim = bw;
  out.weights.resize(n_points * static_cast<std::size_t>(ne));
  out.bias.resize(n_points * static_cast<std::size_t>(bw));
  for (std::size_t p = 0; p < n_points; ++p) {
    const double* z = cur.data() + p * d_out;
    softmax_row(z, ne, out.weights.data() + p * ne);
    for (int c = 0; c < bw; ++c) out.bias[p * bw + c] = z[ne + c];
  }
  return out;
}

// Backpropagation through the final softmax and the ReLU trunk.
// upstream_w is dL/d(weights), upstream_b is dL/d(bias correction).
inline HeadGradients backward(const GatingHead& head, const ForwardCache& cache,
                              const HeadOutput& output,
                              const std::vector<double>& upstream_w,
                              const std::vector<double>& upstream_b) {
  const std::size_t n = cache.n_points;
  const int ne = head.num_experts;
  const int bw = bias_width(head.kind, head.bias_correction);
  const int d_out = head.output_dim();
  if (upstream_w.size() != n * static_cast<std::size_t>(ne) ||
      upstream_b.size() != n * static_cast<std::size_t>(bw)) {
    throw UsageError("backward: upstream gradient shape mismatch");
  }

  // dL/dz_i = w_i * (g_i - sum_j g_j w_j), the softmax Jacobian applied to g
  std::vector<double> delta(n * static_cast<std::size_t>(d_out));
  for (std::size_t p = 0; p < n; ++p) {
    const double* w = output.weights.data() + p * ne;
    const double* g = upstream_w.data() + p * ne;
    double dot = 0.0;
    for (int i = 0; i < ne; ++i) dot += g[i] * w[i];
    double* dz = delta.data() + p * d_out;
    for (int i = 0; i < ne; ++i) dz[i] = w[i] * (g[i] - dot);
    for (int c = 0; c < bw; ++c) dz[ne + c] = upstream_b[p * bw + c];
  }

  HeadGradients grads;
  grads.weights.resize(head.n_layers());
  grads.biases.resize(head.n_layers());

  for (std::size_t l = head.n_layers(); l-- > 0;) {
    const int in_dim = head.layer_dims[l];
    const int out_dim = head.layer_dims[l + 1];
    const std::vector<double>& acts = cache.post[l];
    std::vector<double>& gw = grads.weights[l];
    std::vector<double>& gb = grads.biases[l];
    gw.assign(static_cast<std::size_t>(out_dim) * in_dim, 0.0);
    gb.assign(out_dim, 0.0);

    std::vector<double> prev_delta(n * static_cast<std::size_t>(in_dim), 0.0);
    const double* wmat = head.weights[l].data();
    for (std::size_t p = 0; p < n; ++p) {
      const double* x = acts.data() + p * in_dim;
      const double* d = delta.data() + p * out_dim;
      double* pd = prev_delta.data() + p * in_dim;
      for (int o = 0; o < out_dim; ++o) {
        const double dv = d[o];
        if (dv == 0.0) continue;
        gb[o] += dv;
        double* gwr = gw.data() + static_cast<std::size_t>(o) * in_dim;
        const double* wr = wmat + static_cast<std::size_t>(o) * in_dim;
        for (int i = 0; i < in_dim; ++i) {
          gwr[i] += dv * x[i];
          pd[i] += dv * wr[i];
        }
      }
      if (l > 0) {
        // gate by the ReLU mask of this layer's input activations
        for (int i = 0; i < in_dim; ++i) {
          if (x[i] <= 0.0) pd[i] = 0.0;
        }
      }
    }
    if (l == 0) {
      grads.inputs = std::move(prev_delta);
    } else {
      delta = std::move(prev_delta);
    }
  }
  return grads;
}

// ---- checkpoint persistence ----

inline nlohmann::json head_to_json(const GatingHead& h, const std::string& norm_stats_ref,
                                   const std::vector<std::string>& expert_order) {
  nlohmann::json j;
  j["head_kind"] = to_string(h.kind);
  j["layer_dims"] = h.layer_dims;
  j["bias_correction"] = h.bias_correction;
  j["weights"] = h.weights;
  j["biases"] = h.biases;
  j["norm_stats_ref"] = norm_stats_ref;
  j["expert_order"] = expert_order;
  return j;
}

inline void save_head(const GatingHead& h, const std::filesystem::path& path,
                      const std::string& norm_stats_ref,
                      const std::vector<std::string>& expert_order) {
  write_text_file_atomic(path, head_to_json(h, norm_stats_ref, expert_order).dump() + "\n");
}

struct LoadedHead {
  GatingHead head;
  std::string norm_stats_ref;
  std::vector<std::string> expert_order;
};

// expected_input_dim < 0 skips the dimension check
inline LoadedHead load_head(const std::filesystem::path& path,
                            int expected_input_dim = -1) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  LoadedHead out;
  GatingHead& h = out.head;
  try {
    h.kind = head_kind_from_string(j.at("head_kind").get<std::string>());
    h.layer_dims = j.at("layer_dims").get<std::vector<int>>();
    h.bias_correction = j.at("bias_correction").get<bool>();
    h.weights = j.at("weights").get<std::vector<std::vector<double>>>();
    h.biases = j.at("biases").get<std::vector<std::vector<double>>>();
    out.norm_stats_ref = j.at("norm_stats_ref").get<std::string>();
    out.expert_order = j.at("expert_order").get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  if (h.layer_dims.size() < 2 || h.weights.size() != h.layer_dims.size() - 1 ||
      h.biases.size() != h.weights.size()) {
    throw FormatError(path.string() + ": inconsistent layer structure");
  }
  for (std::size_t l = 0; l + 1 < h.layer_dims.size(); ++l) {
    const std::size_t want_w =
        static_cast<std::size_t>(h.layer_dims[l + 1]) * h.layer_dims[l];
    if (h.weights[l].size() != want_w ||
        h.biases[l].size() != static_cast<std::size_t>(h.layer_dims[l + 1])) {
      throw FormatError(path.string() + ": parameter shape mismatch at layer " +
                        std::to_string(l));
    }
  }
  h.num_experts = h.layer_dims.back() - bias_width(h.kind, h.bias_correction);
  if (h.num_experts < 1) throw FormatError(path.string() + ": bad output dim");
  if (expected_input_dim >= 0 && h.input_dim() != expected_input_dim) {
    throw ConfigError(path.string() + ": checkpoint D_in " +
                      std::to_string(h.input_dim()) + " does not match expected " +
                      std::to_string(expected_input_dim));
  }
  for (const auto& w : h.weights) {
    for (double v : w) {
      if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite parameter");
    }
  }
  return out;
}

}  // namespace moe
