#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moe/errors.hpp"
#include "moe/io_util.hpp"

namespace moe {

using Vec3 = std::array<double, 3>;

struct ExpertFieldSet {
  std::vector<double> p_pred;    // N
  std::vector<Vec3> wss_pred;    // N
};

// One specimen: a surface point cloud with ground truth and the
// per-expert predicted fields, expert order fixed dataset-wide.
struct SurfaceSample {
  std::string sample_id;
  std::vector<Vec3> points;
  std::vector<Vec3> normals;
  std::vector<double> p_true;
  std::vector<Vec3> wss_true;
  std::vector<std::string> expert_order;
  std::vector<ExpertFieldSet> expert_preds;  // parallel to expert_order

  std::size_t n_points() const { return points.size(); }
  std::size_t n_experts() const { return expert_order.size(); }
};

struct ChannelStats {
  double mean = 0.0;
  double std = 1.0;
};

inline constexpr double kStdFloor = 1e-8;

struct NormalizationStats {
  std::map<std::string, ChannelStats> channels;

  const ChannelStats& at(const std::string& name) const {
    auto it = channels.find(name);
    if (it == channels.end()) {
      throw ConfigError("normalization stats missing channel '" + name + "'");
    }
    return it->second;
  }
  bool has(const std::string& name) const { return channels.count(name) != 0; }
};

struct ManifestEntry {
  std::string path;
  std::string split;  // "train" | "val" | "test"
};

struct DatasetManifest {
  std::vector<std::string> experts;
  std::vector<ManifestEntry> samples;
  std::uint64_t seed = 0;

  std::vector<std::string> paths_for(const std::string& split) const {
    std::vector<std::string> out;
    for (const auto& e : samples) {
      if (e.split == split) out.push_back(e.path);
    }
    return out;
  }
};

namespace channel {
inline std::string expert_p(const std::string& name) { return "p_" + name; }
inline std::string expert_wss(const std::string& name, int comp) {
  static const char* suffix[3] = {"_x", "_y", "_z"};
  return "wss_" + name + suffix[comp];
}
inline std::string wss_true(int comp) {
  static const char* names[3] = {"wss_true_x", "wss_true_y", "wss_true_z"};
  return names[comp];
}
inline std::string normal(int comp) {
  static const char* names[3] = {"nx", "ny", "nz"};
  return names[comp];
}
}  // namespace channel

inline std::vector<std::string> sample_csv_header(
    const std::vector<std::string>& experts) {
  std::vector<std::string> cols = {"x",  "y",  "z",  "nx", "ny", "nz",
                                   "p_true", "wss_true_x", "wss_true_y",
                                   "wss_true_z"};
  for (const auto& e : experts) {
    cols.push_back(channel::expert_p(e));
    for (int c = 0; c < 3; ++c) cols.push_back(channel::expert_wss(e, c));
  }
  return cols;
}

inline void validate_sample(const SurfaceSample& s) {
  const std::size_t n = s.n_points();
  if (n < 1) throw DataError("sample '" + s.sample_id + "' has no points");
  if (s.normals.size() != n || s.p_true.size() != n || s.wss_true.size() != n) {
    throw DataError("sample '" + s.sample_id + "' block lengths disagree");
  }
  if (s.expert_preds.size() != s.expert_order.size()) {
    throw DataError("sample '" + s.sample_id + "' expert blocks disagree");
  }
  for (std::size_t e = 0; e < s.expert_preds.size(); ++e) {
    if (s.expert_preds[e].p_pred.size() != n ||
        s.expert_preds[e].wss_pred.size() != n) {
      throw DataError("sample '" + s.sample_id + "' expert '" +
                      s.expert_order[e] + "' covers wrong point count");
    }
  }
  auto check_finite = [&](double v, std::size_t row, const char* what) {
    if (!std::isfinite(v)) {
      throw DataError("sample '" + s.sample_id + "': non-finite " + what +
                      " at row " + std::to_string(row));
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    for (int c = 0; c < 3; ++c) {
      check_finite(s.points[i][c], i, "coordinate");
      check_finite(s.normals[i][c], i, "normal");
      check_finite(s.wss_true[i][c], i, "wss_true");
    }
    check_finite(s.p_true[i], i, "p_true");
    for (const auto& ef : s.expert_preds) {
      check_finite(ef.p_pred[i], i, "expert pressure");
      for (int c = 0; c < 3; ++c) check_finite(ef.wss_pred[i][c], i, "expert wss");
    }
  }
}

// Renormalizes normals to unit length in place; zero normals are rejected.
inline void renormalize_normals(SurfaceSample& s) {
  for (std::size_t i = 0; i < s.normals.size(); ++i) {
    Vec3& nrm = s.normals[i];
    double len = std::sqrt(nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]);
    if (len < 1e-12) {
      throw DataError("sample '" + s.sample_id + "': zero normal at row " +
                      std::to_string(i));
    }
    if (std::abs(len - 1.0) > 1e-3 || len != 1.0) {
      for (int c = 0; c < 3; ++c) nrm[c] /= len;
    }
  }
}

inline SurfaceSample load_sample(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open sample file " + path.string());

  std::string line;
  if (!std::getline(in, line)) {
    throw FormatError("empty sample file " + path.string());
  }
  const std::vector<std::string> header = split_csv_line(line);

  // experts are discovered from the header column layout
  constexpr std::size_t kFixedCols = 10;
  if (header.size() < kFixedCols) {
    throw FormatError(path.string() + ": header too short");
  }
  const auto expected_fixed = sample_csv_header({});
  for (std::size_t i = 0; i < kFixedCols; ++i) {
    if (header[i] != expected_fixed[i]) {
      throw FormatError(path.string() + ": missing column `" +
                        expected_fixed[i] + "` (found `" + header[i] + "`)");
    }
  }
  if ((header.size() - kFixedCols) % 4 != 0) {
    throw FormatError(path.string() + ": expert column groups incomplete");
  }
  std::vector<std::string> experts;
  for (std::size_t i = kFixedCols; i < header.size(); i += 4) {
    if (header[i].rfind("p_", 0) != 0) {
      throw FormatError(path.string() + ": expected expert pressure column, found `" +
                        header[i] + "`");
    }
    const std::string name = header[i].substr(2);
    for (int c = 0; c < 3; ++c) {
      const std::string want = channel::expert_wss(name, c);
      if (header[i + 1 + c] != want) {
        throw FormatError(path.string() + ": missing column `" + want + "`");
      }
    }
    experts.push_back(name);
  }

  SurfaceSample s;
  s.sample_id = path.stem().string();
  s.expert_order = experts;
  s.expert_preds.resize(experts.size());

  std::size_t row = 0;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const std::vector<std::string> cells = split_csv_line(line);
    if (cells.size() != header.size()) {
      throw FormatError(path.string() + ": row " + std::to_string(row) + " has " +
                        std::to_string(cells.size()) + " cells, expected " +
                        std::to_string(header.size()));
    }
    auto num = [&](std::size_t col) {
      double v = parse_double(cells[col], path.string() + " row " + std::to_string(row));
      if (!std::isfinite(v)) {
        throw DataError(path.string() + ": non-finite value at row " +
                        std::to_string(row) + " column `" + header[col] + "`");
      }
      return v;
    };
    s.points.push_back({num(0), num(1), num(2)});
    s.normals.push_back({num(3), num(4), num(5)});
    s.p_true.push_back(num(6));
    s.wss_true.push_back({num(7), num(8), num(9)});
    for (std::size_t e = 0; e < experts.size(); ++e) {
      const std::size_t base = kFixedCols + 4 * e;
      s.expert_preds[e].p_pred.push_back(num(base));
      s.expert_preds[e].wss_pred.push_back({num(base + 1), num(base + 2), num(base + 3)});
    }
    ++row;
  }
  if (row == 0) throw FormatError(path.string() + ": no data rows");

  renormalize_normals(s);
  validate_sample(s);
  return s;
}

inline void write_sample(const SurfaceSample& s, const std::filesystem::path& path) {
  validate_sample(s);
  std::string out;
  const auto header = sample_csv_header(s.expert_order);
  for (std::size_t i = 0; i < header.size(); ++i) {
    if (i) out += ',';
    out += header[i];
  }
  out += '\n';
  for (std::size_t i = 0; i < s.n_points(); ++i) {
    out += fmt17(s.points[i][0]) + ',' + fmt17(s.points[i][1]) + ',' + fmt17(s.points[i][2]);
    for (int c = 0; c < 3; ++c) out += ',' + fmt17(s.normals[i][c]);
    out += ',' + fmt17(s.p_true[i]);
    for (int c = 0; c < 3; ++c) out += ',' + fmt17(s.wss_true[i][c]);
    for (const auto& ef : s.expert_preds) {
      out += ',' + fmt17(ef.p_pred[i]);
      for (int c = 0; c < 3; ++c) out += ',' + fmt17(ef.wss_pred[i][c]);
    }
    out += '\n';
  }
  write_text_file_atomic(path, out);
}

inline NormalizationStats compute_norm_stats(
    const std::vector<SurfaceSample>& train_samples) {
  if (train_samples.empty()) {
    throw UsageError("compute_norm_stats: no training samples");
  }
  std::size_t total = 0;
  for (const auto& s : train_samples) total += s.n_points();
  if (total == 0) throw UsageError("compute_norm_stats: no points");

  struct Acc {
    double sum = 0.0, sumsq = 0.0;
  };
  std::map<std::string, Acc> acc;
  auto add = [&](const std::string& ch, double v) {
    Acc& a = acc[ch];
    a.sum += v;
    a.sumsq += v * v;
  };

  const auto& experts = train_samples.front().expert_order;
  for (const auto& s : train_samples) {
    if (s.expert_order != experts) {
      throw DataError("expert ordering differs across samples");
    }
    for (std::size_t i = 0; i < s.n_points(); ++i) {
      add("p_true", s.p_true[i]);
      for (int c = 0; c < 3; ++c) {
        add(channel::wss_true(c), s.wss_true[i][c]);
        add(channel::normal(c), s.normals[i][c]);
      }
      for (std::size_t e = 0; e < experts.size(); ++e) {
        add(channel::expert_p(experts[e]), s.expert_preds[e].p_pred[i]);
        for (int c = 0; c < 3; ++c) {
          add(channel::expert_wss(experts[e], c), s.expert_preds[e].wss_pred[i][c]);
        }
      }
    }
  }

  NormalizationStats stats;
  const double n = static_cast<double>(total);
  for (const auto& [name, a] : acc) {
    ChannelStats cs;
    cs.mean = a.sum / n;
    double var = a.sumsq / n - cs.mean * cs.mean;  // population variance
    if (var < 0.0) var = 0.0;
    cs.std = std::max(std::sqrt(var), kStdFloor);
    stats.channels[name] = cs;
  }
  return stats;
}

// Gating input row: expert pressures, expert WSS vectors, then raw unit
// normals when enabled. Width = E + 3E (+3).
inline std::size_t feature_width(std::size_t n_experts, bool use_normals) {
  return n_experts + 3 * n_experts + (use_normals ? 3 : 0);
}

inline std::vector<double> normalize_features(const SurfaceSample& s,
                                              const NormalizationStats& stats,
                                              bool use_normals) {
  const std::size_t n = s.n_points();
  const std::size_t ne = s.n_experts();
  const std::size_t width = feature_width(ne, use_normals);
  std::vector<double> feats(n * width);

  std::vector<ChannelStats> p_cs(ne);
  std::vector<std::array<ChannelStats, 3>> w_cs(ne);
  for (std::size_t e = 0; e < ne; ++e) {
    p_cs[e] = stats.at(channel::expert_p(s.expert_order[e]));
    for (int c = 0; c < 3; ++c) {
      w_cs[e][c] = stats.at(channel::expert_wss(s.expert_order[e], c));
    }
  }

  for (std::size_t i = 0; i < n; ++i) {
    double* row = feats.data() + i * width;
    std::size_t k = 0;
    for (std::size_t e = 0; e < ne; ++e) {
      row[k++] = (s.expert_preds[e].p_pred[i] - p_cs[e].mean) / p_cs[e].std;
    }
    for (std::size_t e = 0; e < ne; ++e) {
      for (int c = 0; c < 3; ++c) {
        row[k++] = (s.expert_preds[e].wss_pred[i][c] - w_cs[e][c].mean) / w_cs[e][c].std;
      }
    }
    if (use_normals) {
      for (int c = 0; c < 3; ++c) row[k++] = s.normals[i][c];
    }
  }
  return feats;
}

inline DatasetManifest split_dataset(const DatasetManifest& manifest,
                                     double train_frac, std::uint64_t seed) {
  if (manifest.samples.size() < 2) {
    throw UsageError("split_dataset: need at least 2 samples");
  }
  if (!(train_frac > 0.0 && train_frac < 1.0)) {
    throw UsageError("split_dataset: train_frac must be in (0,1)");
  }
  DatasetManifest out = manifest;
  out.seed = seed;
  std::vector<std::size_t> order(manifest.samples.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(seed);
  fisher_yates_shuffle(order, rng);

  const std::size_t m = manifest.samples.size();
  const std::size_t n_train =
      static_cast<std::size_t>(std::ceil(train_frac * static_cast<double>(m)));
  for (std::size_t k = 0; k < m; ++k) {
    out.samples[order[k]].split = (k < n_train) ? "train" : "val";
  }
  return out;
}

// ---- JSON persistence ----

inline nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json j;
  j["experts"] = m.experts;
  j["seed"] = m.seed;
  j["samples"] = nlohmann::json::array();
  for (const auto& e : m.samples) {
    j["samples"].push_back({{"path", e.path}, {"split", e.split}});
  }
  return j;
}

inline DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.experts = j.at("experts").get<std::vector<std::string>>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("samples")) {
      ManifestEntry me;
      me.path = e.at("path").get<std::string>();
      me.split = e.at("split").get<std::string>();
      if (me.split != "train" && me.split != "val" && me.split != "test") {
        throw FormatError("manifest: unknown split '" + me.split + "'");
      }
      m.samples.push_back(me);
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("manifest: ") + ex.what());
  }
  if (m.experts.empty()) throw FormatError("manifest: expert order empty");
  return m;
}

inline void save_manifest(const DatasetManifest& m, const std::filesystem::path& path) {
  write_text_file_atomic(path, manifest_to_json(m).dump(2) + "\n");
}

inline DatasetManifest load_manifest(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  return manifest_from_json(j);
}

inline nlohmann::json stats_to_json(const NormalizationStats& s) {
  nlohmann::json chans = nlohmann::json::object();
  for (const auto& [name, cs] : s.channels) {
    chans[name] = {{"mean", cs.mean}, {"std", cs.std}};
  }
  return nlohmann::json{{"channels", chans}};
}

inline NormalizationStats stats_from_json(const nlohmann::json& j) {
  NormalizationStats s;
  try {
    for (const auto& [name, cs] : j.at("channels").items()) {
      s.channels[name] = {cs.at("mean").get<double>(), cs.at("std").get<double>()};
    }
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("norm stats: ") + ex.what());
  }
  return s;
}

inline void save_stats(const NormalizationStats& s, const std::filesystem::path& path) {
  write_text_file_atomic(path, stats_to_json(s).dump(2) + "\n");
}

inline NormalizationStats load_stats(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text_file(path));
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(path.string() + ": " + ex.what());
  }
  return stats_from_json(j);
}

inline std::string stats_hash(const NormalizationStats& s) {
  return fnv1a_hex(stats_to_json(s).dump());
}

}  // namespace moe
