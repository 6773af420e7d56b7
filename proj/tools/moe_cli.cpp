// Command-line entry point: preprocess, train, infer, eval, synth, ablate.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "moe/evaluator.hpp"
#include "moe/field_model.hpp"
#include "moe/synthbench.hpp"
#include "moe/trainer.hpp"

namespace fs = std::filesystem;

namespace {

int log_level() {
  const char* env = std::getenv("MOE_LOG_LEVEL");
  if (!env) return 1;
  return std::atoi(env);
}

void log_info(const std::string& msg) {
  if (log_level() >= 1) std::cerr << "[moe] " << msg << "\n";
}

// --set k=v overrides applied over the config file before validation
moe::TrainConfig build_config(const std::string& config_path,
                              const std::vector<std::string>& overrides,
                              const std::string& entropy_mode, long seed_override) {
  nlohmann::json j = nlohmann::json::object();
  if (!config_path.empty()) {
    try {
      j = nlohmann::json::parse(moe::read_text_file(config_path));
    } catch (const nlohmann::json::exception& ex) {
      throw moe::ConfigError(config_path + ": " + ex.what());
    }
  }
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) {
      throw moe::UsageError("--set expects key=value, got '" + kv + "'");
    }
    const std::string key = kv.substr(0, eq);
    const std::string val = kv.substr(eq + 1);
    nlohmann::json parsed = nlohmann::json::parse(val, nullptr, false);
    if (parsed.is_discarded()) parsed = val;  // plain string value
    j[key] = parsed;
  }
  if (!entropy_mode.empty()) j["entropy_mode"] = entropy_mode;
  if (seed_override >= 0) j["seed"] = seed_override;
  return moe::config_from_json(j);
}

moe::SynthSpec build_spec(int samples, int points, long seed, int test_count,
                          const std::string& profile) {
  moe::SynthSpec spec;
  spec.n_samples = samples;
  spec.n_pts = points;
  if (seed >= 0) spec.seed = static_cast<std::uint64_t>(seed);
  if (test_count > 0) spec.n_test = test_count;
  if (profile == "complementary") spec.profile = moe::complementary_profile();
  else if (profile == "dominant") spec.profile = moe::dominant_profile();
  else throw moe::UsageError("unknown profile '" + profile + "'");
  spec.validate();
  return spec;
}

struct Checkpoint {
  moe::GatingHead pressure;
  moe::GatingHead shear;
  moe::NormalizationStats stats;
  moe::TrainConfig config;
  std::vector<std::string> experts;
};

Checkpoint load_checkpoint(const fs::path& dir) {
  Checkpoint ck;
  nlohmann::json cj;
  try {
    cj = nlohmann::json::parse(moe::read_text_file(dir / "config.json"));
  } catch (const nlohmann::json::exception& ex) {
    throw moe::FormatError((dir / "config.json").string() + ": " + ex.what());
  }
  ck.config = moe::config_from_json(cj);
  ck.stats = moe::load_stats(dir / "norm_stats.json");
  auto lp = moe::load_head(dir / "pressure_head.json");
  auto ls = moe::load_head(dir / "shear_head.json");
  if (lp.expert_order != ls.expert_order) {
    throw moe::ConfigError("checkpoint heads disagree on expert order");
  }
  const std::string ref = moe::stats_hash(ck.stats);
  if (lp.norm_stats_ref != ref || ls.norm_stats_ref != ref) {
    throw moe::ConfigError("checkpoint heads do not match norm_stats.json");
  }
  const int d_in = static_cast<int>(
      moe::feature_width(lp.expert_order.size(), ck.config.use_normals));
  if (lp.head.input_dim() != d_in || ls.head.input_dim() != d_in) {
    throw moe::ConfigError("checkpoint input dim does not match config");
  }
  ck.pressure = std::move(lp.head);
  ck.shear = std::move(ls.head);
  ck.experts = lp.expert_order;
  return ck;
}

std::vector<moe::SurfaceSample> load_split(const moe::DatasetManifest& manifest,
                                           const fs::path& base,
                                           const std::string& split,
                                           const std::vector<std::string>& experts) {
  std::vector<moe::SurfaceSample> out;
  for (const auto& entry : manifest.samples) {
    if (entry.split != split) continue;
    fs::path p(entry.path);
    if (p.is_relative()) p = base / p;
    moe::SurfaceSample s = moe::load_sample(p);
    if (s.expert_order != experts) {
      throw moe::ConfigError(p.string() + ": expert order differs from checkpoint");
    }
    out.push_back(std::move(s));
  }
  return out;
}

void write_inference_csv(const moe::SurfaceSample& s, const moe::InferenceOutput& inf,
                         const fs::path& path) {
  std::string out = "x,y,z,p_moe,wss_moe_x,wss_moe_y,wss_moe_z";
  for (const auto& e : s.expert_order) out += ",weight_p_" + e;
  for (const auto& e : s.expert_order) out += ",weight_s_" + e;
  out += '\n';
  const int ne = inf.num_experts;
  for (std::size_t i = 0; i < inf.n_points; ++i) {
    out += moe::fmt17(s.points[i][0]) + ',' + moe::fmt17(s.points[i][1]) + ',' +
           moe::fmt17(s.points[i][2]) + ',' + moe::fmt17(inf.p[i]);
    for (int c = 0; c < 3; ++c) out += ',' + moe::fmt17(inf.wss[i * 3 + c]);
    for (int e = 0; e < ne; ++e) out += ',' + moe::fmt17(inf.weights_p[i * ne + e]);
    for (int e = 0; e < ne; ++e) out += ',' + moe::fmt17(inf.weights_s[i * ne + e]);
    out += '\n';
  }
  moe::write_text_file_atomic(path, out);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Entropy-regularized mixture-of-experts gating for surface field ensembling"};
  app.require_subcommand(1);

  int threads = 0;
  app.add_option("--threads", threads, "cap worker parallelism (0 = hardware)");

  // synth
  auto* synth = app.add_subcommand("synth", "generate a synthetic benchmark dataset");
  std::string synth_out = "synth_data";
  int synth_samples = 40, synth_points = 2000, synth_test = 4;
  long synth_seed = -1;
  std::string synth_profile = "complementary";
  synth->add_option("--out", synth_out, "output directory");
  synth->add_option("--samples", synth_samples, "number of samples");
  synth->add_option("--points", synth_points, "points per sample");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_option("--test-count", synth_test, "samples reserved for the test split");
  synth->add_option("--profile", synth_profile, "complementary | dominant");

  // preprocess
  auto* prep = app.add_subcommand("preprocess", "validate samples, split, compute stats");
  std::string prep_data, prep_out;
  double prep_train_frac = 0.8;
  long prep_seed = 0;
  prep->add_option("--data", prep_data, "directory of sample CSV files")->required();
  prep->add_option("--out", prep_out, "output directory (manifest + stats)")->required();
  prep->add_option("--train-frac", prep_train_frac, "training fraction");
  prep->add_option("--seed", prep_seed, "split seed");

  // train
  auto* train = app.add_subcommand("train", "train both gating heads");
  std::string train_manifest, train_config, train_out = "checkpoint", train_entropy_mode;
  std::vector<std::string> train_sets;
  long train_seed = -1;
  bool train_resume = false;
  train->add_option("--manifest", train_manifest, "dataset manifest JSON")->required();
  train->add_option("--config", train_config, "training config JSON");
  train->add_option("--set", train_sets, "config override key=value")->take_all();
  train->add_option("--seed", train_seed, "seed override");
  train->add_option("--entropy-mode", train_entropy_mode, "maximize | minimize | none");
  train->add_option("--out", train_out, "checkpoint directory");
  train->add_flag("--resume", train_resume, "resume from the checkpoint in --out");

  // infer
  auto* infer = app.add_subcommand("infer", "run inference, write VTK + CSV per sample");
  std::string infer_ckpt, infer_manifest, infer_out = "inference", infer_split = "test";
  int infer_force = -1;
  infer->add_option("--checkpoint", infer_ckpt, "checkpoint directory")->required();
  infer->add_option("--manifest", infer_manifest, "dataset manifest JSON")->required();
  infer->add_option("--split", infer_split, "which split to run (train|val|test)");
  infer->add_option("--out", infer_out, "output directory");
  infer->add_option("--force-expert", infer_force, "pin one-hot weights on expert index");

  // eval
  auto* evalc = app.add_subcommand("eval", "L-2 relative error comparison report");
  std::string eval_ckpt, eval_manifest, eval_out = "eval", eval_split = "test";
  evalc->add_option("--checkpoint", eval_ckpt, "checkpoint directory")->required();
  evalc->add_option("--manifest", eval_manifest, "dataset manifest JSON")->required();
  evalc->add_option("--split", eval_split, "which split to evaluate");
  evalc->add_option("--out", eval_out, "output directory");

  // ablate
  auto* ablate = app.add_subcommand("ablate", "run the labeled ablation suite");
  std::string abl_out = "ablations", abl_config;
  std::vector<std::string> abl_sets;
  int abl_samples = 16, abl_points = 600, abl_test = 2;
  long abl_seed = -1;
  ablate->add_option("--out", abl_out, "output directory");
  ablate->add_option("--config", abl_config, "base training config JSON");
  ablate->add_option("--set", abl_sets, "config override key=value")->take_all();
  ablate->add_option("--samples", abl_samples, "number of samples");
  ablate->add_option("--points", abl_points, "points per sample");
  ablate->add_option("--seed", abl_seed, "seed");
  ablate->add_option("--test-count", abl_test, "test split size");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    if (*synth) {
      moe::SynthSpec spec = build_spec(synth_samples, synth_points, synth_seed,
                                       synth_test, synth_profile);
      moe::SynthDataset ds = moe::generate_dataset(spec);
      moe::write_dataset(ds, synth_out);
      log_info("wrote " + std::to_string(ds.samples.size()) + " samples to " + synth_out);
    } else if (*prep) {
      moe::DatasetManifest manifest;
      std::vector<fs::path> files;
      for (const auto& de : fs::directory_iterator(prep_data)) {
        if (de.path().extension() == ".csv") files.push_back(de.path());
      }
      std::sort(files.begin(), files.end());
      if (files.empty()) throw moe::UsageError("no .csv samples in " + prep_data);
      std::vector<moe::SurfaceSample> samples;
      for (const auto& f : files) {
        moe::SurfaceSample s = moe::load_sample(f);  // full validation
        if (manifest.experts.empty()) manifest.experts = s.expert_order;
        else if (s.expert_order != manifest.experts) {
          throw moe::DataError(f.string() + ": expert order differs across dataset");
        }
        manifest.samples.push_back({fs::relative(f, prep_data).string(), "train"});
        samples.push_back(std::move(s));
      }
      manifest = moe::split_dataset(manifest, prep_train_frac,
                                    static_cast<std::uint64_t>(prep_seed));
      std::vector<moe::SurfaceSample> train_samples;
      for (std::size_t i = 0; i < samples.size(); ++i) {
        if (manifest.samples[i].split == "train") train_samples.push_back(samples[i]);
      }
      moe::NormalizationStats stats = moe::compute_norm_stats(train_samples);
      fs::create_directories(prep_out);
      // manifest paths stay relative to the data directory
      for (auto& e : manifest.samples) {
        e.path = (fs::absolute(prep_data) / e.path).string();
      }
      moe::save_manifest(manifest, fs::path(prep_out) / "manifest.json");
      moe::save_stats(stats, fs::path(prep_out) / "norm_stats.json");
      log_info("manifest: " + std::to_string(train_samples.size()) + " train / " +
               std::to_string(samples.size() - train_samples.size()) + " val");
    } else if (*train) {
      moe::TrainConfig config =
          build_config(train_config, train_sets, train_entropy_mode, train_seed);
      moe::DatasetManifest manifest = moe::load_manifest(train_manifest);
      moe::LoadedDataset data =
          moe::load_dataset(manifest, fs::path(train_manifest).parent_path());
      moe::FitResult res = moe::fit(data, config, train_out, train_resume);
      log_info("trained " + std::to_string(res.log.size()) + " steps, checkpoint in " +
               train_out);
    } else if (*infer) {
      Checkpoint ck = load_checkpoint(infer_ckpt);
      moe::DatasetManifest manifest = moe::load_manifest(infer_manifest);
      auto samples = load_split(manifest, fs::path(infer_manifest).parent_path(),
                                infer_split, ck.experts);
      if (samples.empty()) throw moe::UsageError("no samples in split '" + infer_split + "'");
      fs::create_directories(infer_out);
      moe::InferOptions opts;
      opts.force_expert = infer_force;
      for (const auto& s : samples) {
        moe::InferenceOutput inf = moe::infer_sample(ck.pressure, ck.shear, ck.stats, s,
                                                     ck.config.use_normals, opts);
        moe::export_vtk_polydata(s, inf, fs::path(infer_out) / (s.sample_id + ".vtk"));
        write_inference_csv(s, inf, fs::path(infer_out) / (s.sample_id + ".csv"));
      }
      log_info("wrote inference outputs for " + std::to_string(samples.size()) +
               " samples to " + infer_out);
    } else if (*evalc) {
      Checkpoint ck = load_checkpoint(eval_ckpt);
      moe::DatasetManifest manifest = moe::load_manifest(eval_manifest);
      auto samples = load_split(manifest, fs::path(eval_manifest).parent_path(),
                                eval_split, ck.experts);
      if (samples.empty()) throw moe::UsageError("no samples in split '" + eval_split + "'");
      moe::EvalReport report = moe::evaluate(ck.pressure, ck.shear, ck.stats, samples,
                                             ck.config.use_normals);
      fs::create_directories(eval_out);
      moe::write_text_file_atomic(fs::path(eval_out) / "eval_report.txt",
                                  moe::report_text(report));
      moe::write_text_file_atomic(fs::path(eval_out) / "eval_report.csv",
                                  moe::report_csv(report));
      std::cout << moe::report_text(report);
    } else if (*ablate) {
      moe::SynthSpec spec =
          build_spec(abl_samples, abl_points, abl_seed, abl_test, "complementary");
      moe::TrainConfig config = build_config(abl_config, abl_sets, "", abl_seed);
      auto results = moe::run_ablation_suite(spec, config, abl_out);
      std::cout << moe::read_text_file(fs::path(abl_out) / "ablation_summary.txt");
    }
  } catch (const moe::UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const moe::ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const moe::NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
