#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "moe/errors.hpp"
#include "moe/field_model.hpp"
#include "moe/gating_mlp.hpp"
#include "moe/io_util.hpp"
#include "moe/objective.hpp"

namespace moe {

enum class OptimizerKind { sgd, momentum, adam };

inline std::string to_string(OptimizerKind k) {
  switch (k) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::momentum: return "momentum";
    case OptimizerKind::adam: return "adam";
  }
  return "adam";
}

inline OptimizerKind optimizer_from_string(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "momentum") return OptimizerKind::momentum;
  if (s == "adam") return OptimizerKind::adam;
  throw ConfigError("unknown optimizer '" + s + "'");
}

struct TrainConfig {
  int num_epochs = 10;
  double start_lr = 1e-3;
  double end_lr = 5e-6;
  double lambda_entropy = 0.01;
  EntropyMode entropy_mode = EntropyMode::maximize;
  bool use_normals = true;
  bool bias_correction = false;
  std::uint64_t seed = 0;
  double train_frac = 0.8;
  OptimizerKind optimizer = OptimizerKind::adam;
  int hidden_layers = 3;
  int hidden_width = 128;
  double clip_norm = 10.0;  // 0 disables

  void validate() const {
    if (num_epochs < 1) throw UsageError("config: num_epochs must be >= 1");
    if (!(start_lr > 0.0) || !(end_lr > 0.0)) throw UsageError("config: learning rates must be positive");
    if (end_lr > start_lr) throw UsageError("config: end_lr must not exceed start_lr");
    if (lambda_entropy < 0.0) throw UsageError("config: lambda_entropy must be >= 0");
    if (!(train_frac > 0.0 && train_frac < 1.0)) throw UsageError("config: train_frac must be in (0,1)");
    if (hidden_layers < 1 || hidden_width < 1) throw UsageError("config: hidden dims must be positive");
    if (clip_norm < 0.0) throw UsageError("config: clip_norm must be >= 0");
  }
};

inline nlohmann::json config_to_json(const TrainConfig& c) {
  return nlohmann::json{
      {"num_epochs", c.num_epochs},
      {"start_lr", c.start_lr},
      {"end_lr", c.end_lr},
      {"lambda_entropy", c.lambda_entropy},
      {"entropy_mode", to_string(c.entropy_mode)},
      {"use_normals", c.use_normals},
      {"bias_correction", c.bias_correction},
      {"seed", c.seed},
      {"train_frac", c.train_frac},
      {"optimizer", to_string(c.optimizer)},
      {"hidden_layers", c.hidden_layers},
      {"hidden_width", c.hidden_width},
      {"clip_norm", c.clip_norm},
  };
}

inline TrainConfig config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> known = {
      "num_epochs", "start_lr", "end_lr", "lambda_entropy", "entropy_mode",
      "use_normals", "bias_correction", "seed", "train_frac", "optimizer",
      "hidden_layers", "hidden_width", "clip_norm"};
  for (const auto& [key, _] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ConfigError("config: unknown key '" + key + "'");
    }
  }
  TrainConfig c;
  try {
    if (j.contains("num_epochs")) c.num_epochs = j["num_epochs"].get<int>();
    if (j.contains("start_lr")) c.start_lr = j["start_lr"].get<double>();
    if (j.contains("end_lr")) c.end_lr = j["end_lr"].get<double>();
    if (j.contains("lambda_entropy")) c.lambda_entropy = j["lambda_entropy"].get<double>();
    if (j.contains("entropy_mode"))
      c.entropy_mode = entropy_mode_from_string(j["entropy_mode"].get<std::string>());
    if (j.contains("use_normals")) c.use_normals = j["use_normals"].get<bool>();
    if (j.contains("bias_correction")) c.bias_correction = j["bias_correction"].get<bool>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("train_frac")) c.train_frac = j["train_frac"].get<double>();
    if (j.contains("optimizer"))
      c.optimizer = optimizer_from_string(j["optimizer"].get<std::string>());
    if (j.contains("hidden_layers")) c.hidden_layers = j["hidden_layers"].get<int>();
    if (j.contains("hidden_width")) c.hidden_width = j["hidden_width"].get<int>();
    if (j.contains("clip_norm")) c.clip_norm = j["clip_norm"].get<double>();
  } catch (const nlohmann::json::exception& ex) {
    throw ConfigError(std::string("config: ") + ex.what());
  }
  c.validate();
  return c;
}

// eta(step) = end + 0.5 (start - end) (1 + cos(pi step/total))
inline double cosine_lr(long step, long total_steps, double start_lr, double end_lr) {
  if (total_steps < 1 || step < 0 || step > total_steps) {
    throw UsageError("cosine_lr: step out of range");
  }
  const double frac = static_cast<double>(step) / static_cast<double>(total_steps);
  return end_lr + 0.5 * (start_lr - end_lr) * (1.0 + std::cos(std::numbers::pi * frac));
}

// ---- optimizer ----

struct OptimizerState {
  OptimizerKind kind = OptimizerKind::adam;
  long t = 0;
  // first/second moments per layer; momentum uses m only
  std::vector<std::vector<double>> m_w, v_w, m_b, v_b;

  static OptimizerState init(OptimizerKind kind, const GatingHead& head) {
    OptimizerState s;
    s.kind = kind;
    for (std::size_t l = 0; l < head.n_layers(); ++l) {
      s.m_w.emplace_back(head.weights[l].size(), 0.0);
      s.v_w.emplace_back(head.weights[l].size(), 0.0);
      s.m_b.emplace_back(head.biases[l].size(), 0.0);
      s.v_b.emplace_back(head.biases[l].size(), 0.0);
    }
    return s;
  }
};

inline constexpr double kAdamBeta1 = 0.9;
inline constexpr double kAdamBeta2 = 0.999;
inline constexpr double kAdamEps = 1e-8;
inline constexpr double kMomentumBeta = 0.9;

inline void apply_update(GatingHead& head, OptimizerState& opt,
                         const HeadGradients& grads, double lr, double clip_norm) {
  double scale = 1.0;
  if (clip_norm > 0.0) {
    const double norm = std::sqrt(grads.squared_norm());
    if (norm > clip_norm) scale = clip_norm / norm;
  }
  opt.t += 1;
  const double bc1 = 1.0 - std::pow(kAdamBeta1, static_cast<double>(opt.t));
  const double bc2 = 1.0 - std::pow(kAdamBeta2, static_cast<double>(opt.t));

  auto update = [&](std::vector<double>& param, const std::vector<double>& grad,
                    std::vector<double>& m, std::vector<double>& v) {
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double g = grad[i] * scale;
      switch (opt.kind) {
        case OptimizerKind::sgd:
          param[i] -= lr * g;
          break;
        case OptimizerKind::momentum:
          m[i] = kMomentumBeta * m[i] + g;
          param[i] -= lr * m[i];
          break;
        case OptimizerKind::adam: {
          m[i] = kAdamBeta1 * m[i] + (1.0 - kAdamBeta1) * g;
          v[i] = kAdamBeta2 * v[i] + (1.0 - kAdamBeta2) * g * g;
          const double mhat = m[i] / bc1;
          const double vhat = v[i] / bc2;
          param[i] -= lr * mhat / (std::sqrt(vhat) + kAdamEps);
          break;
        }
      }
    }
  };
  for (std::size_t l = 0; l < head.n_layers(); ++l) {
    update(head.weights[l], grads.weights[l], opt.m_w[l], opt.v_w[l]);
    update(head.biases[l], grads.biases[l], opt.m_b[l], opt.v_b[l]);
  }
}

inline nlohmann::json optimizer_to_json(const OptimizerState& s) {
  return nlohmann::json{{"kind", to_string(s.kind)}, {"t", s.t},
                        {"m_w", s.m_w}, {"v_w", s.v_w},
                        {"m_b", s.m_b}, {"v_b", s.v_b}};
}

inline OptimizerState optimizer_from_json(const nlohmann::json& j) {
  OptimizerState s;
  try {
    s.kind = optimizer_from_string(j.at("kind").get<std::string>());
    s.t = j.at("t").get<long>();
    s.m_w = j.at("m_w").get<std::vector<std::vector<double>>>();
    s.v_w = j.at("v_w").get<std::vector<std::vector<double>>>();
    s.m_b = j.at("m_b").get<std::vector<std::vector<double>>>();
    s.v_b = j.at("v_b").get<std::vector<std::vector<double>>>();
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("optimizer state: ") + ex.what());
  }
  return s;
}

// ---- dataset preparation ----

struct LoadedDataset {
  std::vector<std::string> experts;
  std::vector<SurfaceSample> train;
  std::vector<SurfaceSample> val;
  std::vector<SurfaceSample> test;
};

inline LoadedDataset load_dataset(const DatasetManifest& manifest,
                                  const std::filesystem::path& base_dir) {
  LoadedDataset ds;
  ds.experts = manifest.experts;
  for (const auto& entry : manifest.samples) {
    std::filesystem::path p(entry.path);
    if (p.is_relative()) p = base_dir / p;
    SurfaceSample s = load_sample(p);
    if (s.expert_order != manifest.experts) {
      throw DataError(p.string() + ": expert order differs from manifest");
    }
    if (entry.split == "train") ds.train.push_back(std::move(s));
    else if (entry.split == "val") ds.val.push_back(std::move(s));
    else ds.test.push_back(std::move(s));
  }
  return ds;
}

struct PreparedSample {
  std::string id;
  std::vector<double> features;  // n x D_in
  NormalizedSampleView view;
};

// Normalizes one sample for training: gate features use per-expert channel
// stats, the blend path uses the truth-channel stats so that a one-hot gate
// reproduces the expert exactly after de-normalization.
inline PreparedSample prepare_sample(const SurfaceSample& s,
                                     const NormalizationStats& stats,
                                     bool use_normals) {
  PreparedSample out;
  out.id = s.sample_id;
  out.features = normalize_features(s, stats, use_normals);

  const std::size_t n = s.n_points();
  const int ne = static_cast<int>(s.n_experts());
  out.view.n_points = n;
  out.view.n_experts = ne;
  out.view.expert_p.resize(n * ne);
  out.view.expert_wss.resize(n * ne * 3);
  out.view.p_true.resize(n);
  out.view.wss_true.resize(n * 3);

  const ChannelStats pt = stats.at("p_true");
  ChannelStats wt[3];
  for (int c = 0; c < 3; ++c) wt[c] = stats.at(channel::wss_true(c));

  for (std::size_t i = 0; i < n; ++i) {
    out.view.p_true[i] = (s.p_true[i] - pt.mean) / pt.std;
    for (int c = 0; c < 3; ++c) {
      out.view.wss_true[i * 3 + c] = (s.wss_true[i][c] - wt[c].mean) / wt[c].std;
    }
    for (int e = 0; e < ne; ++e) {
      out.view.expert_p[i * ne + e] = (s.expert_preds[e].p_pred[i] - pt.mean) / pt.std;
      for (int c = 0; c < 3; ++c) {
        out.view.expert_wss[(i * ne + e) * 3 + c] =
            (s.expert_preds[e].wss_pred[i][c] - wt[c].mean) / wt[c].std;
      }
    }
  }
  return out;
}

// ---- training ----

struct StepRecord {
  int epoch = 0;
  long step = 0;
  double lr = 0.0;
  LossBreakdown breakdown;
  std::optional<double> val_loss_pressure;
  std::optional<double> val_loss_shear;
};

struct FitResult {
  GatingHead pressure_head;
  GatingHead shear_head;
  NormalizationStats stats;
  std::vector<StepRecord> log;
};

inline const char* kMetricsHeader =
    "epoch,step,lr,loss_pressure,loss_shear,entropy_pressure,entropy_shear,"
    "total_loss,val_loss_pressure,val_loss_shear";

inline std::string metrics_row(const StepRecord& r) {
  std::string line = std::to_string(r.epoch) + ',' + std::to_string(r.step) + ',' +
                     fmt17(r.lr) + ',' + fmt17(r.breakdown.loss_pressure) + ',' +
                     fmt17(r.breakdown.loss_shear) + ',' +
                     fmt17(r.breakdown.entropy_pressure) + ',' +
                     fmt17(r.breakdown.entropy_shear) + ',' + fmt17(r.breakdown.total);
  line += ',';
  if (r.val_loss_pressure) line += fmt17(*r.val_loss_pressure);
  line += ',';
  if (r.val_loss_shear) line += fmt17(*r.val_loss_shear);
  return line;
}

class Trainer {
 public:
  Trainer(const LoadedDataset& data, const TrainConfig& config)
      : config_(config), experts_(data.experts) {
    config_.validate();
    if (data.train.empty()) throw UsageError("trainer: empty training split");
    stats_ = compute_norm_stats(data.train);
    for (const auto& s : data.train) {
      train_.push_back(prepare_sample(s, stats_, config_.use_normals));
    }
    for (const auto& s : data.val) {
      val_.push_back(prepare_sample(s, stats_, config_.use_normals));
    }
    const int ne = static_cast<int>(experts_.size());
    const int d_in = static_cast<int>(feature_width(experts_.size(), config_.use_normals));

    auto dims = [&](HeadKind kind) {
      std::vector<int> d = {d_in};
      for (int l = 0; l < config_.hidden_layers; ++l) d.push_back(config_.hidden_width);
      d.push_back(ne + bias_width(kind, config_.bias_correction));
      return d;
    };
    // distinct init streams per head
    pressure_ = init_head(dims(HeadKind::pressure), config_.seed * 2 + 1,
                          config_.bias_correction, HeadKind::pressure);
    shear_ = init_head(dims(HeadKind::shear), config_.seed * 2 + 2,
                       config_.bias_correction, HeadKind::shear);
    opt_p_ = OptimizerState::init(config_.optimizer, pressure_);
    opt_s_ = OptimizerState::init(config_.optimizer, shear_);
    epochs_done_ = 0;
    step_ = 0;
  }

  long total_steps() const {
    return static_cast<long>(config_.num_epochs) * static_cast<long>(train_.size());
  }

  // Runs epochs [epochs_done, num_epochs), appending to the step log.
  // until_epoch caps how far this invocation goes (the LR schedule still spans
  // the full num_epochs), which models an interrupted run.
  void run(std::vector<StepRecord>* log, int until_epoch = -1) {
    const int stop = until_epoch < 0
                         ? config_.num_epochs
                         : std::min(until_epoch, config_.num_epochs);
    for (int epoch = epochs_done_; epoch < stop; ++epoch) {
      run_epoch(epoch, log);
      epochs_done_ = epoch + 1;
      if (epoch_callback) epoch_callback(epoch);
    }
  }

  void run_epoch(int epoch, std::vector<StepRecord>* log) {
    std::vector<std::size_t> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    // shuffle stream depends only on (seed, epoch) so resumed runs agree
    std::mt19937_64 rng(config_.seed ^ (0x9e3779b97f4a7c15ull * (epoch + 1)));
    fisher_yates_shuffle(order, rng);

    for (std::size_t k = 0; k < order.size(); ++k) {
      const PreparedSample& sample = train_[order[k]];
      const double lr = cosine_lr(step_, total_steps(), config_.start_lr, config_.end_lr);

      ForwardCache cache_p, cache_s;
      HeadOutput out_p = forward(pressure_, sample.features, sample.view.n_points, &cache_p);
      HeadOutput out_s = forward(shear_, sample.features, sample.view.n_points, &cache_s);

      ObjectiveResult obj = evaluate_objective(
          sample.view, out_p.weights, out_p.bias, out_s.weights, out_s.bias,
          config_.lambda_entropy, config_.entropy_mode);
      if (!std::isfinite(obj.breakdown.total)) {
        throw NumericError("non-finite loss at step " + std::to_string(step_) +
                           " on sample '" + sample.id + "'");
      }

      HeadGradients g_p = backward(pressure_, cache_p, out_p, obj.pressure.d_weights,
                                   obj.pressure.d_bias);
      HeadGradients g_s = backward(shear_, cache_s, out_s, obj.shear.d_weights,
                                   obj.shear.d_bias);
      apply_update(pressure_, opt_p_, g_p, lr, config_.clip_norm);
      apply_update(shear_, opt_s_, g_s, lr, config_.clip_norm);

      StepRecord rec;
      rec.epoch = epoch;
      rec.step = step_;
      rec.lr = lr;
      rec.breakdown = obj.breakdown;
      if (k + 1 == order.size()) {
        auto [vp, vs] = validation_loss();
        rec.val_loss_pressure = vp;
        rec.val_loss_shear = vs;
      }
      if (log) log->push_back(rec);
      ++step_;
    }
  }

  // Mean per-sample normalized MSE over the validation split, no updates.
  std::pair<double, double> validation_loss() const {
    if (val_.empty()) return {0.0, 0.0};
    double lp = 0.0, ls = 0.0;
    for (const auto& sample : val_) {
      HeadOutput out_p = forward(pressure_, sample.features, sample.view.n_points);
      HeadOutput out_s = forward(shear_, sample.features, sample.view.n_points);
      auto pm = blend_pressure(out_p.weights, sample.view.expert_p, out_p.bias,
                               sample.view.n_points, sample.view.n_experts);
      auto sm = blend_shear(out_s.weights, sample.view.expert_wss, out_s.bias,
                            sample.view.n_points, sample.view.n_experts);
      lp += mse(pm, sample.view.p_true);
      ls += mse(sm, sample.view.wss_true);
    }
    const double inv = 1.0 / static_cast<double>(val_.size());
    return {lp * inv, ls * inv};
  }

  const GatingHead& pressure_head() const { return pressure_; }
  const GatingHead& shear_head() const { return shear_; }
  const NormalizationStats& stats() const { return stats_; }
  const std::vector<std::string>& experts() const { return experts_; }
  const TrainConfig& config() const { return config_; }
  int epochs_done() const { return epochs_done_; }
  long step() const { return step_; }

  nlohmann::json state_to_json() const {
    return nlohmann::json{{"epochs_done", epochs_done_},
                          {"step", step_},
                          {"optimizer_pressure", optimizer_to_json(opt_p_)},
                          {"optimizer_shear", optimizer_to_json(opt_s_)}};
  }

  void restore(const GatingHead& pressure, const GatingHead& shear,
               const nlohmann::json& state) {
    pressure_ = pressure;
    shear_ = shear;
    try {
      epochs_done_ = state.at("epochs_done").get<int>();
      step_ = state.at("step").get<long>();
      opt_p_ = optimizer_from_json(state.at("optimizer_pressure"));
      opt_s_ = optimizer_from_json(state.at("optimizer_shear"));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("train state: ") + ex.what());
    }
  }

  std::function<void(int)> epoch_callback;

 private:
  TrainConfig config_;
  std::vector<std::string> experts_;
  NormalizationStats stats_;
  std::vector<PreparedSample> train_, val_;
  GatingHead pressure_, shear_;
  OptimizerState opt_p_, opt_s_;
  int epochs_done_ = 0;
  long step_ = 0;
};

// Full run: preprocessing stats, all epochs, checkpoints, metrics CSV.
// With resume=true, picks up from the state saved in out_dir at the last
// completed epoch and reproduces the uninterrupted run exactly.
inline FitResult fit(const LoadedDataset& data, const TrainConfig& config,
                     const std::filesystem::path& out_dir, bool resume = false,
                     int until_epoch = -1) {
  std::filesystem::create_directories(out_dir);
  Trainer trainer(data, config);

  std::vector<StepRecord> log;
  std::string metrics = std::string(kMetricsHeader) + "\n";
  if (resume) {
    auto lp = load_head(out_dir / "pressure_head.json");
    auto ls = load_head(out_dir / "shear_head.json");
    nlohmann::json state;
    try {
      state = nlohmann::json::parse(read_text_file(out_dir / "state.json"));
    } catch (const nlohmann::json::exception& ex) {
      throw FormatError(std::string("state.json: ") + ex.what());
    }
    trainer.restore(lp.head, ls.head, state);
    metrics = read_text_file(out_dir / "metrics.csv");
  }

  const std::string stats_ref = stats_hash(trainer.stats());
  auto save_all = [&]() {
    save_head(trainer.pressure_head(), out_dir / "pressure_head.json", stats_ref,
              trainer.experts());
    save_head(trainer.shear_head(), out_dir / "shear_head.json", stats_ref,
              trainer.experts());
    save_stats(trainer.stats(), out_dir / "norm_stats.json");
    write_text_file_atomic(out_dir / "config.json", config_to_json(config).dump(2) + "\n");
    write_text_file_atomic(out_dir / "state.json", trainer.state_to_json().dump() + "\n");
    write_text_file_atomic(out_dir / "metrics.csv", metrics);
  };

  std::size_t flushed = 0;
  trainer.epoch_callback = [&](int) {
    for (; flushed < log.size(); ++flushed) metrics += metrics_row(log[flushed]) + "\n";
    save_all();
  };
  trainer.run(&log, until_epoch);

  FitResult res;
  res.pressure_head = trainer.pressure_head();
  res.shear_head = trainer.shear_head();
  res.stats = trainer.stats();
  res.log = std::move(log);
  return res;
}

}  // namespace moe
