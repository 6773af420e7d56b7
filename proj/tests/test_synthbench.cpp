#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <filesystem>
#include <set>
#include <unistd.h>

#include "moe/synthbench.hpp"

using namespace moe;
namespace fs = std::filesystem;

TEST_CASE("generation is deterministic per seed") {
  SynthSpec spec;
  spec.n_samples = 5;
  spec.n_pts = 64;
  spec.seed = 12;
  spec.n_test = 1;
  SynthDataset a = generate_dataset(spec);
  SynthDataset b = generate_dataset(spec);
  REQUIRE(a.samples.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(a.samples[i].points == b.samples[i].points);
    CHECK(a.samples[i].p_true == b.samples[i].p_true);
    CHECK(a.samples[i].expert_preds[1].p_pred == b.samples[i].expert_preds[1].p_pred);
    CHECK(a.manifest.samples[i].split == b.manifest.samples[i].split);
  }
  spec.seed = 13;
  SynthDataset c = generate_dataset(spec);
  CHECK(a.samples[0].points != c.samples[0].points);
}

TEST_CASE("zero noise amplitudes make every expert exact") {
  SynthSpec spec;
  spec.n_samples = 4;
  spec.n_pts = 50;
  spec.seed = 3;
  spec.n_test = 1;
  for (auto& e : spec.profile) e = {0.0, 0.0, 0.0};
  SynthDataset ds = generate_dataset(spec);
  for (const auto& s : ds.samples) {
    for (const auto& ef : s.expert_preds) {
      for (std::size_t i = 0; i < s.n_points(); ++i) {
        CHECK(ef.p_pred[i] == s.p_true[i]);
        CHECK(ef.wss_pred[i] == s.wss_true[i]);
      }
    }
  }
}

TEST_CASE("normals are unit length and samples pass validation") {
  SynthSpec spec;
  spec.n_samples = 4;
  spec.n_pts = 200;
  spec.seed = 5;
  spec.n_test = 1;
  SynthDataset ds = generate_dataset(spec);
  for (const auto& s : ds.samples) {
    validate_sample(s);
    for (const auto& n : s.normals) {
      const double len = std::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
      CHECK_THAT(len, Catch::Matchers::WithinAbs(1.0, 1e-9));
    }
  }
}

TEST_CASE("complementary profile: each expert is best in its own region") {
  SynthSpec spec;
  spec.n_samples = 6;
  spec.n_pts = 1500;
  spec.seed = 9;
  spec.n_test = 1;
  SynthDataset ds = generate_dataset(spec);

  for (const auto& s : ds.samples) {
    // recover the body half-length from the point extent
    double half = 0.0;
    for (const auto& p : s.points) half = std::max(half, std::abs(p[0]));

    std::array<std::array<double, 3>, 3> sq_err{};  // [region][expert]
    std::array<int, 3> region_n{};
    for (std::size_t i = 0; i < s.n_points(); ++i) {
      const int r = synth_region(s.points[i][0], half);
      ++region_n[r];
      for (int e = 0; e < 3; ++e) {
        const double d = s.expert_preds[e].p_pred[i] - s.p_true[i];
        sq_err[r][e] += d * d;
      }
    }
    // region r's owner has much lower MSE there than either competitor
    for (int r = 0; r < 3; ++r) {
      REQUIRE(region_n[r] > 0);
      for (int e = 0; e < 3; ++e) {
        if (e == r) continue;
        CHECK(sq_err[r][r] < 0.1 * sq_err[r][e]);
      }
    }
  }
}

TEST_CASE("manifest splits are disjoint and cover all samples") {
  SynthSpec spec;
  spec.n_samples = 12;
  spec.n_pts = 20;
  spec.seed = 21;
  spec.n_test = 3;
  SynthDataset ds = generate_dataset(spec);
  std::set<std::string> splits;
  int n_train = 0, n_val = 0, n_test = 0;
  for (const auto& e : ds.manifest.samples) {
    if (e.split == "train") ++n_train;
    else if (e.split == "val") ++n_val;
    else if (e.split == "test") ++n_test;
  }
  CHECK(n_test == 3);
  CHECK(n_train + n_val + n_test == 12);
  CHECK(n_train == static_cast<int>(std::ceil(0.8 * 9)));
}

TEST_CASE("dataset files round trip through the canonical format") {
  const fs::path dir =
      fs::temp_directory_path() / ("moe_sb_" + std::to_string(::getpid()));
  fs::remove_all(dir);
  SynthSpec spec;
  spec.n_samples = 4;
  spec.n_pts = 30;
  spec.seed = 2;
  spec.n_test = 1;
  SynthDataset ds = generate_dataset(spec);
  write_dataset(ds, dir);

  DatasetManifest manifest = load_manifest(dir / "manifest.json");
  CHECK(manifest.experts == std::vector<std::string>{"expert1", "expert2", "expert3"});
  LoadedDataset loaded = load_dataset(manifest, dir);
  CHECK(loaded.train.size() + loaded.val.size() + loaded.test.size() == 4);
  // numeric content survives the CSV round trip
  const SurfaceSample& orig = ds.samples[0];
  bool found = false;
  for (const auto& pool : {loaded.train, loaded.val, loaded.test}) {
    for (const auto& s : pool) {
      if (s.sample_id == orig.sample_id) {
        CHECK(s.p_true == orig.p_true);
        CHECK(s.points == orig.points);
        found = true;
      }
    }
  }
  CHECK(found);
  fs::remove_all(dir);
}

TEST_CASE("duplicate_expert copies predictions across all splits") {
  SynthSpec spec;
  spec.n_samples = 5;
  spec.n_pts = 16;
  spec.seed = 14;
  spec.n_test = 1;
  LoadedDataset data = to_loaded(generate_dataset(spec));
  duplicate_expert(data, 0, 2);
  for (const auto& pool : {&data.train, &data.val, &data.test}) {
    for (const auto& s : *pool) {
      CHECK(s.expert_preds[2].p_pred == s.expert_preds[0].p_pred);
      CHECK(s.expert_preds[2].wss_pred == s.expert_preds[0].wss_pred);
    }
  }
}

TEST_CASE("spec validation rejects bad parameters") {
  SynthSpec spec;
  spec.n_samples = 2;
  CHECK_THROWS_AS(spec.validate(), UsageError);
  spec = SynthSpec{};
  spec.profile[1][2] = -0.1;
  CHECK_THROWS_AS(spec.validate(), UsageError);
}
