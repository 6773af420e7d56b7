#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "moe/errors.hpp"
#include "moe/evaluator.hpp"
#include "moe/field_model.hpp"
#include "moe/io_util.hpp"
#include "moe/trainer.hpp"

namespace moe {

inline constexpr int kSynthExperts = 3;
inline constexpr int kSynthRegions = 3;

// Per expert, per x-region noise amplitude as a fraction of the local field
// scale. Applied to both pressure and shear channels.
using ExpertProfile = std::array<std::array<double, kSynthRegions>, kSynthExperts>;

// Each expert is best in exactly one region.
inline ExpertProfile complementary_profile(double low = 0.02, double high = 0.30) {
  ExpertProfile p;
  for (int e = 0; e < kSynthExperts; ++e) {
    for (int r = 0; r < kSynthRegions; ++r) p[e][r] = (e == r) ? low : high;
  }
  return p;
}

// Expert 1 dominates everywhere.
inline ExpertProfile dominant_profile(double best = 0.01, double rest = 0.40) {
  ExpertProfile p;
  for (int e = 0; e < kSynthExperts; ++e) {
    for (int r = 0; r < kSynthRegions; ++r) p[e][r] = (e == 0) ? best : rest;
  }
  return p;
}

struct SynthSpec {
  int n_samples = 40;
  int n_pts = 2000;
  std::uint64_t seed = 7;
  int n_test = 4;
  double train_frac = 0.8;
  ExpertProfile profile = complementary_profile();

  void validate() const {
    if (n_samples < 4) throw UsageError("synth spec: need at least 4 samples");
    if (n_pts < 1) throw UsageError("synth spec: n_pts must be >= 1");
    if (n_test < 1 || n_test >= n_samples - 1) throw UsageError("synth spec: bad n_test");
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw UsageError("synth spec: bad train_frac");
    for (const auto& e : profile) {
      for (double a : e) {
        if (a < 0.0) throw UsageError("synth spec: negative noise amplitude");
      }
    }
  }
};

inline int synth_region(double x, double half_length) {
  if (x < -half_length / 3.0) return 0;
  if (x < half_length / 3.0) return 1;
  return 2;
}

namespace detail {

// Smooth low-frequency random scalar field: a small sum of random-direction
// sinusoids, normalized to unit RMS.
struct SmoothField {
  static constexpr int kModes = 4;
  std::array<Vec3, kModes> omega;
  std::array<double, kModes> phase;
  std::array<double, kModes> coeff;
  double norm = 1.0;

  static SmoothField random(std::mt19937_64& rng) {
    SmoothField f;
    double sumsq = 0.0;
    for (int k = 0; k < kModes; ++k) {
      const double freq = 0.5 + 2.0 * uniform01(rng);
      // random direction
      double dx = uniform_sym(rng, 1.0), dy = uniform_sym(rng, 1.0), dz = uniform_sym(rng, 1.0);
      double len = std::sqrt(dx * dx + dy * dy + dz * dz);
      if (len < 1e-6) { dx = 1.0; len = 1.0; }
      f.omega[k] = {freq * dx / len, freq * dy / len, freq * dz / len};
      f.phase[k] = 2.0 * std::numbers::pi * uniform01(rng);
      f.coeff[k] = 0.5 + uniform01(rng);
      sumsq += f.coeff[k] * f.coeff[k];
    }
    f.norm = 1.0 / std::sqrt(0.5 * sumsq);  // each sinusoid has RMS 1/sqrt(2)
    return f;
  }

  double operator()(const Vec3& p) const {
    double acc = 0.0;
    for (int k = 0; k < kModes; ++k) {
      acc += coeff[k] * std::sin(omega[k][0] * p[0] + omega[k][1] * p[1] +
                                 omega[k][2] * p[2] + phase[k]);
    }
    return acc * norm;
  }
};

}  // namespace detail

struct SynthDataset {
  std::vector<SurfaceSample> samples;
  DatasetManifest manifest;  // paths sample_<idx>.csv, splits assigned
};

// Procedural closed surface resembling an elongated body (scaled ellipsoid
// with per-sample shape jitter), analytic pressure and tangential shear
// fields, and per-expert predictions with region-dependent smooth noise.
inline SynthDataset generate_dataset(const SynthSpec& spec) {
  spec.validate();
  SynthDataset out;
  out.manifest.experts = {"expert1", "expert2", "expert3"};
  out.manifest.seed = spec.seed;

  for (int si = 0; si < spec.n_samples; ++si) {
    std::mt19937_64 rng(spec.seed ^ (0xd1342543de82ef95ull * (si + 1)));

    // body half-axes, jittered per sample
    const double a = 2.0 * (0.9 + 0.2 * uniform01(rng));
    const double b = 0.7 * (0.9 + 0.2 * uniform01(rng));
    const double c = 0.5 * (0.9 + 0.2 * uniform01(rng));

    SurfaceSample s;
    char idbuf[32];
    std::snprintf(idbuf, sizeof(idbuf), "sample_%03d", si);
    s.sample_id = idbuf;
    s.expert_order = out.manifest.experts;
    s.expert_preds.resize(kSynthExperts);

    const int n = spec.n_pts;
    s.points.reserve(n);
    s.normals.reserve(n);
    for (int i = 0; i < n; ++i) {
      const double u = uniform01(rng);                       // cos(theta) in [-1,1]
      const double ct = 2.0 * u - 1.0;
      const double st = std::sqrt(std::max(0.0, 1.0 - ct * ct));
      const double phi = 2.0 * std::numbers::pi * uniform01(rng);
      const Vec3 p = {a * ct, b * st * std::cos(phi), c * st * std::sin(phi)};
      Vec3 nrm = {p[0] / (a * a), p[1] / (b * b), p[2] / (c * c)};
      const double len = std::sqrt(nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]);
      for (int k = 0; k < 3; ++k) nrm[k] /= len;
      s.points.push_back(p);
      s.normals.push_back(nrm);
    }

    // ground truth: three pressure bumps along the body plus a ripple
    const double bump_x[3] = {-0.6 * a, 0.0, 0.6 * a};
    const double bump_amp[3] = {120.0, -80.0, 60.0};
    s.p_true.resize(n);
    s.wss_true.resize(n);
    for (int i = 0; i < n; ++i) {
      const Vec3& p = s.points[i];
      double pv = 15.0 * std::sin(1.3 * p[0] + 0.7 * p[1]);
      for (int k = 0; k < 3; ++k) {
        const double dx = (p[0] - bump_x[k]) / (0.35 * a);
        pv += bump_amp[k] * std::exp(-dx * dx - (p[1] * p[1] + p[2] * p[2]));
      }
      s.p_true[i] = pv;

      // tangential field: project a smooth vector field onto the surface
      const Vec3& nrm = s.normals[i];
      const double g = 1.2 + std::sin(1.5 * p[0]);
      Vec3 v = {g, 0.4 * std::sin(2.0 * p[0]) + 0.2 * p[1],
                0.3 * std::cos(2.0 * p[0]) - 0.2 * p[2]};
      const double dot = v[0] * nrm[0] + v[1] * nrm[1] + v[2] * nrm[2];
      for (int k = 0; k < 3; ++k) s.wss_true[i][k] = v[k] - dot * nrm[k];
    }

    // local field scales for noise amplitudes
    auto channel_scale = [&](auto value_at) {
      double sum = 0.0, sumsq = 0.0;
      for (int i = 0; i < n; ++i) {
        const double v = value_at(i);
        sum += v;
        sumsq += v * v;
      }
      const double mean = sum / n;
      const double var = std::max(0.0, sumsq / n - mean * mean);
      return std::max(std::sqrt(var), 1e-3);
    };
    const double p_scale = channel_scale([&](int i) { return s.p_true[i]; });
    double w_scale[3];
    for (int ccomp = 0; ccomp < 3; ++ccomp) {
      w_scale[ccomp] = channel_scale([&](int i) { return s.wss_true[i][ccomp]; });
    }

    for (int e = 0; e < kSynthExperts; ++e) {
      auto noise_p = detail::SmoothField::random(rng);
      detail::SmoothField noise_w[3] = {detail::SmoothField::random(rng),
                                        detail::SmoothField::random(rng),
                                        detail::SmoothField::random(rng)};
      ExpertFieldSet& ef = s.expert_preds[e];
      ef.p_pred.resize(n);
      ef.wss_pred.resize(n);
      for (int i = 0; i < n; ++i) {
        const Vec3& p = s.points[i];
        const double amp = spec.profile[e][synth_region(p[0], a)];
        ef.p_pred[i] = s.p_true[i] + amp * p_scale * noise_p(p);
        for (int ccomp = 0; ccomp < 3; ++ccomp) {
          ef.wss_pred[i][ccomp] =
              s.wss_true[i][ccomp] + amp * w_scale[ccomp] * noise_w[ccomp](p);
        }
      }
    }
    out.samples.push_back(std::move(s));
  }

  // split: carve test samples first, then train/val over the remainder
  std::vector<std::size_t> order(out.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 split_rng(spec.seed);
  fisher_yates_shuffle(order, split_rng);

  out.manifest.samples.resize(out.samples.size());
  const std::size_t m = out.samples.size();
  const std::size_t n_rest = m - static_cast<std::size_t>(spec.n_test);
  const std::size_t n_train =
      static_cast<std::size_t>(std::ceil(spec.train_frac * static_cast<double>(n_rest)));
  for (std::size_t k = 0; k < m; ++k) {
    ManifestEntry& entry = out.manifest.samples[order[k]];
    entry.path = out.samples[order[k]].sample_id + ".csv";
    if (k < static_cast<std::size_t>(spec.n_test)) entry.split = "test";
    else if (k - spec.n_test < n_train) entry.split = "train";
    else entry.split = "val";
  }
  return out;
}

inline void write_dataset(const SynthDataset& ds, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    write_sample(ds.samples[i], dir / ds.manifest.samples[i].path);
  }
  save_manifest(ds.manifest, dir / "manifest.json");
}

inline LoadedDataset to_loaded(const SynthDataset& ds) {
  LoadedDataset out;
  out.experts = ds.manifest.experts;
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    const std::string& split = ds.manifest.samples[i].split;
    if (split == "train") out.train.push_back(ds.samples[i]);
    else if (split == "val") out.val.push_back(ds.samples[i]);
    else out.test.push_back(ds.samples[i]);
  }
  return out;
}

// Replaces expert dst's predictions with a copy of expert src's, everywhere.
inline void duplicate_expert(LoadedDataset& ds, int src, int dst) {
  auto apply = [&](std::vector<SurfaceSample>& samples) {
    for (auto& s : samples) s.expert_preds[dst] = s.expert_preds[src];
  };
  apply(ds.train);
  apply(ds.val);
  apply(ds.test);
}

// ---- ablation harness ----

struct WeightSummary {
  std::array<double, kSynthExperts> mean_weights_p{};
  std::array<double, kSynthExperts> mean_weights_s{};
  double mean_entropy_p = 0.0;
  double mean_entropy_s = 0.0;
};

inline WeightSummary summarize_weights(const GatingHead& pressure_head,
                                       const GatingHead& shear_head,
                                       const NormalizationStats& stats,
                                       const std::vector<SurfaceSample>& samples,
                                       bool use_normals) {
  if (samples.empty()) throw UsageError("summarize_weights: no samples");
  WeightSummary sum;
  std::size_t total = 0;
  for (const auto& s : samples) {
    InferenceOutput inf = infer_sample(pressure_head, shear_head, stats, s, use_normals);
    const int ne = inf.num_experts;
    sum.mean_entropy_p += entropy(inf.weights_p, inf.n_points, ne) * inf.n_points;
    sum.mean_entropy_s += entropy(inf.weights_s, inf.n_points, ne) * inf.n_points;
    for (std::size_t i = 0; i < inf.n_points; ++i) {
      for (int e = 0; e < ne; ++e) {
        sum.mean_weights_p[e] += inf.weights_p[i * ne + e];
        sum.mean_weights_s[e] += inf.weights_s[i * ne + e];
      }
    }
    total += inf.n_points;
  }
  const double inv = 1.0 / static_cast<double>(total);
  for (int e = 0; e < kSynthExperts; ++e) {
    sum.mean_weights_p[e] *= inv;
    sum.mean_weights_s[e] *= inv;
  }
  sum.mean_entropy_p *= inv;
  sum.mean_entropy_s *= inv;
  return sum;
}

inline constexpr double kCollapseThreshold = 0.9;

struct AblationResult {
  std::string label;
  WeightSummary weights;
  EvalReport report;
  bool collapse_pressure = false;
  bool collapse_shear = false;
};

inline nlohmann::json ablation_to_json(const AblationResult& r) {
  nlohmann::json j;
  j["label"] = r.label;
  j["mean_entropy_pressure"] = r.weights.mean_entropy_p;
  j["mean_entropy_shear"] = r.weights.mean_entropy_s;
  j["mean_weights_pressure"] = r.weights.mean_weights_p;
  j["mean_weights_shear"] = r.weights.mean_weights_s;
  j["collapse_pressure"] = r.collapse_pressure;
  j["collapse_shear"] = r.collapse_shear;
  nlohmann::json errs = nlohmann::json::object();
  for (std::size_t m = 0; m < r.report.models.size(); ++m) {
    nlohmann::json row = nlohmann::json::object();
    for (int q = 0; q < 4; ++q) row[kQuantityNames[q]] = r.report.errors[m][q];
    errs[r.report.models[m]] = row;
  }
  j["l2_errors"] = errs;
  return j;
}

inline AblationResult run_single_ablation(const std::string& label,
                                          const LoadedDataset& data,
                                          const TrainConfig& config,
                                          const std::filesystem::path& out_dir) {
  FitResult fitres = fit(data, config, out_dir / label);
  const std::vector<SurfaceSample>& probe = data.val.empty() ? data.train : data.val;
  const std::vector<SurfaceSample>& eval_set = data.test.empty() ? probe : data.test;

  AblationResult res;
  res.label = label;
  res.weights = summarize_weights(fitres.pressure_head, fitres.shear_head, fitres.stats,
                                  probe, config.use_normals);
  res.report = evaluate(fitres.pressure_head, fitres.shear_head, fitres.stats, eval_set,
                        config.use_normals);
  double max_p = 0.0, max_s = 0.0;
  for (int e = 0; e < kSynthExperts; ++e) {
    max_p = std::max(max_p, res.weights.mean_weights_p[e]);
    max_s = std::max(max_s, res.weights.mean_weights_s[e]);
  }
  res.collapse_pressure = max_p > kCollapseThreshold;
  res.collapse_shear = max_s > kCollapseThreshold;

  write_text_file_atomic(out_dir / label / "ablation.json",
                         ablation_to_json(res).dump(2) + "\n");
  return res;
}

// The four labeled experiments: regularized, no_reg, duplicated expert with
// and without regularization, and entropy minimization.
inline std::vector<AblationResult> run_ablation_suite(
    const SynthSpec& spec, const TrainConfig& base_config,
    const std::filesystem::path& out_dir) {
  std::filesystem::create_directories(out_dir);
  SynthDataset ds = generate_dataset(spec);
  LoadedDataset data = to_loaded(ds);
  LoadedDataset dup = data;
  duplicate_expert(dup, 0, 2);

  std::vector<AblationResult> results;
  auto run = [&](const std::string& label, const LoadedDataset& d, double lambda,
                 EntropyMode mode) {
    TrainConfig cfg = base_config;
    cfg.lambda_entropy = lambda;
    cfg.entropy_mode = mode;
    try {
      results.push_back(run_single_ablation(label, d, cfg, out_dir));
    } catch (const std::exception& ex) {
      AblationResult failed;
      failed.label = label + " (failed: " + ex.what() + ")";
      results.push_back(failed);
    }
  };
  run("regularized", data, base_config.lambda_entropy, EntropyMode::maximize);
  run("no_reg", data, 0.0, EntropyMode::none);
  run("dup_expert_no_reg", dup, 0.0, EntropyMode::none);
  run("dup_expert_reg", dup, base_config.lambda_entropy, EntropyMode::maximize);
  run("min_entropy", data, base_config.lambda_entropy, EntropyMode::minimize);

  std::string summary;
  nlohmann::json all = nlohmann::json::array();
  for (const auto& r : results) {
    all.push_back(ablation_to_json(r));
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "%-20s H_p=%.4f H_s=%.4f w_p=[%.3f %.3f %.3f] collapse_p=%d\n",
                  r.label.c_str(), r.weights.mean_entropy_p, r.weights.mean_entropy_s,
                  r.weights.mean_weights_p[0], r.weights.mean_weights_p[1],
                  r.weights.mean_weights_p[2], r.collapse_pressure ? 1 : 0);
    summary += buf;
  }
  write_text_file_atomic(out_dir / "ablation_summary.json", all.dump(2) + "\n");
  write_text_file_atomic(out_dir / "ablation_summary.txt", summary);
  return results;
}

}  // namespace moe
