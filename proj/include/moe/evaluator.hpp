#pragma once

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "moe/errors.hpp"
#include "moe/field_model.hpp"
#include "moe/gating_mlp.hpp"
#include "moe/objective.hpp"
#include "moe/trainer.hpp"

namespace moe {

inline const char* kQuantityNames[4] = {"P", "WSS_x", "WSS_y", "WSS_z"};

// sqrt(sum (pred-truth)^2) / sqrt(sum truth^2), per scalar quantity
inline double l2_relative_error(const std::vector<double>& pred,
                                const std::vector<double>& truth) {
  if (pred.empty() || pred.size() != truth.size()) {
    throw UsageError("l2_relative_error: empty or mismatched inputs");
  }
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double d = pred[i] - truth[i];
    num += d * d;
    den += truth[i] * truth[i];
  }
  if (den == 0.0) throw DataError("l2_relative_error: ground truth is identically zero");
  return std::sqrt(num) / std::sqrt(den);
}

struct InferenceOutput {
  std::size_t n_points = 0;
  int num_experts = 0;
  std::vector<double> p;           // physical units
  std::vector<double> wss;         // n x 3, physical units
  std::vector<double> weights_p;   // n x E
  std::vector<double> weights_s;   // n x E
  std::vector<double> bias_p;      // n, normalized units (empty if disabled)
  std::vector<double> bias_s;      // n x 3 (empty if disabled)
};

struct InferOptions {
  int force_expert = -1;  // >= 0 pins both heads one-hot on that expert, bias off
};

inline InferenceOutput infer_sample(const GatingHead& pressure_head,
                                    const GatingHead& shear_head,
                                    const NormalizationStats& stats,
                                    const SurfaceSample& sample, bool use_normals,
                                    const InferOptions& opts = {}) {
  const int ne = static_cast<int>(sample.n_experts());
  if (pressure_head.num_experts != ne || shear_head.num_experts != ne) {
    throw ConfigError("infer_sample: expert count mismatch between checkpoint and sample");
  }
  const std::size_t n = sample.n_points();
  PreparedSample prep = prepare_sample(sample, stats, use_normals);

  HeadOutput out_p, out_s;
  if (opts.force_expert >= 0) {
    if (opts.force_expert >= ne) throw UsageError("infer_sample: forced expert out of range");
    out_p.n_points = out_s.n_points = n;
    out_p.num_experts = out_s.num_experts = ne;
    out_p.weights.assign(n * ne, 0.0);
    out_s.weights.assign(n * ne, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      out_p.weights[i * ne + opts.force_expert] = 1.0;
      out_s.weights[i * ne + opts.force_expert] = 1.0;
    }
  } else {
    out_p = forward(pressure_head, prep.features, n);
    out_s = forward(shear_head, prep.features, n);
  }

  auto p_norm = blend_pressure(out_p.weights, prep.view.expert_p, out_p.bias, n, ne);
  auto s_norm = blend_shear(out_s.weights, prep.view.expert_wss, out_s.bias, n, ne);

  InferenceOutput out;
  out.n_points = n;
  out.num_experts = ne;
  out.weights_p = std::move(out_p.weights);
  out.weights_s = std::move(out_s.weights);
  out.bias_p = std::move(out_p.bias);
  out.bias_s = std::move(out_s.bias);
  out.p.resize(n);
  out.wss.resize(n * 3);

  const ChannelStats pt = stats.at("p_true");
  ChannelStats wt[3];
  for (int c = 0; c < 3; ++c) wt[c] = stats.at(channel::wss_true(c));
  for (std::size_t i = 0; i < n; ++i) {
    out.p[i] = p_norm[i] * pt.std + pt.mean;
    for (int c = 0; c < 3; ++c) out.wss[i * 3 + c] = s_norm[i * 3 + c] * wt[c].std + wt[c].mean;
  }
  return out;
}

struct EvalReport {
  std::vector<std::string> models;            // "MoE" first, then experts
  // mean over samples, [model][quantity 0..3]
  std::vector<std::array<double, 4>> errors;
  // per-sample detail: [sample][model][quantity]
  std::vector<std::string> sample_ids;
  std::vector<std::vector<std::array<double, 4>>> per_sample;
};

inline EvalReport evaluate(const GatingHead& pressure_head, const GatingHead& shear_head,
                           const NormalizationStats& stats,
                           const std::vector<SurfaceSample>& test_samples,
                           bool use_normals) {
  if (test_samples.empty()) throw UsageError("evaluate: empty test set");
  const auto& experts = test_samples.front().expert_order;
  const int ne = static_cast<int>(experts.size());

  EvalReport report;
  report.models.push_back("MoE");
  for (const auto& e : experts) report.models.push_back(e);
  report.errors.assign(report.models.size(), {0.0, 0.0, 0.0, 0.0});

  for (const auto& sample : test_samples) {
    const std::size_t n = sample.n_points();
    std::vector<double> truth_p = sample.p_true;
    std::array<std::vector<double>, 3> truth_w;
    for (int c = 0; c < 3; ++c) {
      truth_w[c].resize(n);
      for (std::size_t i = 0; i < n; ++i) truth_w[c][i] = sample.wss_true[i][c];
    }

    std::vector<std::array<double, 4>> row(report.models.size());

    InferenceOutput moe = infer_sample(pressure_head, shear_head, stats, sample, use_normals);
    std::array<std::vector<double>, 3> moe_w;
    for (int c = 0; c < 3; ++c) {
      moe_w[c].resize(n);
      for (std::size_t i = 0; i < n; ++i) moe_w[c][i] = moe.wss[i * 3 + c];
    }
    row[0][0] = l2_relative_error(moe.p, truth_p);
    for (int c = 0; c < 3; ++c) row[0][c + 1] = l2_relative_error(moe_w[c], truth_w[c]);

    for (int e = 0; e < ne; ++e) {
      row[e + 1][0] = l2_relative_error(sample.expert_preds[e].p_pred, truth_p);
      for (int c = 0; c < 3; ++c) {
        std::vector<double> pe(n);
        for (std::size_t i = 0; i < n; ++i) pe[i] = sample.expert_preds[e].wss_pred[i][c];
        row[e + 1][c + 1] = l2_relative_error(pe, truth_w[c]);
      }
    }

    report.sample_ids.push_back(sample.sample_id);
    report.per_sample.push_back(row);
    for (std::size_t m = 0; m < row.size(); ++m) {
      for (int q = 0; q < 4; ++q) report.errors[m][q] += row[m][q];
    }
  }
  const double inv = 1.0 / static_cast<double>(test_samples.size());
  for (auto& e : report.errors) {
    for (int q = 0; q < 4; ++q) e[q] *= inv;
  }
  return report;
}

inline std::string report_text(const EvalReport& r) {
  std::string out;
  char buf[160];
  std::snprintf(buf, sizeof(buf), "%-18s %12s %14s %14s %14s\n", "Model",
                "P L-2", "WSS(x) L-2", "WSS(y) L-2", "WSS(z) L-2");
  out += buf;
  for (std::size_t m = 0; m < r.models.size(); ++m) {
    std::snprintf(buf, sizeof(buf), "%-18s %12.6f %14.6f %14.6f %14.6f\n",
                  r.models[m].c_str(), r.errors[m][0], r.errors[m][1],
                  r.errors[m][2], r.errors[m][3]);
    out += buf;
  }
  return out;
}

inline std::string report_csv(const EvalReport& r) {
  std::string out = "model,quantity,l2_error\n";
  for (std::size_t m = 0; m < r.models.size(); ++m) {
    for (int q = 0; q < 4; ++q) {
      out += r.models[m] + ',' + kQuantityNames[q] + ',' + fmt17(r.errors[m][q]) + '\n';
    }
  }
  return out;
}

// ---- minimal legacy-ASCII VTK polydata export ----

inline void export_vtk_polydata(const SurfaceSample& sample,
                                const InferenceOutput& inference,
                                const std::filesystem::path& path) {
  const std::size_t n = sample.n_points();
  if (inference.n_points != n) throw UsageError("export_vtk_polydata: point count mismatch");

  std::string out;
  out += "# vtk DataFile Version 3.0\n";
  out += "moe blended surface fields\n";
  out += "ASCII\n";
  out += "DATASET POLYDATA\n";
  out += "POINTS " + std::to_string(n) + " float\n";
  for (std::size_t i = 0; i < n; ++i) {
    out += fmt17(sample.points[i][0]) + ' ' + fmt17(sample.points[i][1]) + ' ' +
           fmt17(sample.points[i][2]) + '\n';
  }
  out += "VERTICES " + std::to_string(n) + ' ' + std::to_string(2 * n) + '\n';
  for (std::size_t i = 0; i < n; ++i) out += "1 " + std::to_string(i) + '\n';

  out += "POINT_DATA " + std::to_string(n) + '\n';
  auto scalars = [&](const std::string& name, auto value_at) {
    out += "SCALARS " + name + " float 1\n";
    out += "LOOKUP_TABLE default\n";
    for (std::size_t i = 0; i < n; ++i) out += fmt17(value_at(i)) + '\n';
  };
  scalars("p_moe", [&](std::size_t i) { return inference.p[i]; });
  scalars("wss_moe_x", [&](std::size_t i) { return inference.wss[i * 3 + 0]; });
  scalars("wss_moe_y", [&](std::size_t i) { return inference.wss[i * 3 + 1]; });
  scalars("wss_moe_z", [&](std::size_t i) { return inference.wss[i * 3 + 2]; });
  const int ne = inference.num_experts;
  for (int e = 0; e < ne; ++e) {
    scalars("weight_p_" + sample.expert_order[e],
            [&](std::size_t i) { return inference.weights_p[i * ne + e]; });
  }
  for (int e = 0; e < ne; ++e) {
    scalars("weight_s_" + sample.expert_order[e],
            [&](std::size_t i) { return inference.weights_s[i * ne + e]; });
  }
  write_text_file_atomic(path, out);
}

struct VtkPolydata {
  std::vector<Vec3> points;
  std::map<std::string, std::vector<double>> arrays;
};

// Reads back files produced by export_vtk_polydata (not a general VTK parser).
inline VtkPolydata read_vtk_polydata(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  VtkPolydata out;
  std::string tok;
  auto expect_line = [&](std::istream& s) {
    std::string line;
    if (!std::getline(s, line)) throw FormatError(path.string() + ": truncated");
    return line;
  };
  expect_line(in);  // version
  expect_line(in);  // title
  if (expect_line(in) != "ASCII") throw FormatError(path.string() + ": not ASCII");
  if (expect_line(in) != "DATASET POLYDATA") throw FormatError(path.string() + ": not polydata");

  std::size_t n = 0;
  in >> tok;
  if (tok != "POINTS") throw FormatError(path.string() + ": POINTS expected");
  in >> n >> tok;
  out.points.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    in >> out.points[i][0] >> out.points[i][1] >> out.points[i][2];
  }
  std::size_t nv = 0, sz = 0;
  in >> tok;
  if (tok != "VERTICES") throw FormatError(path.string() + ": VERTICES expected");
  in >> nv >> sz;
  for (std::size_t i = 0; i < sz; ++i) in >> tok;

  std::size_t nd = 0;
  in >> tok;
  if (tok != "POINT_DATA") throw FormatError(path.string() + ": POINT_DATA expected");
  in >> nd;
  if (nd != n) throw FormatError(path.string() + ": POINT_DATA count mismatch");

  while (in >> tok) {
    if (tok != "SCALARS") throw FormatError(path.string() + ": SCALARS expected, got " + tok);
    std::string name, type;
    int comps = 0;
    in >> name >> type >> comps;
    in >> tok >> tok;  // LOOKUP_TABLE default
    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (!(in >> vals[i])) throw FormatError(path.string() + ": truncated array " + name);
    }
    out.arrays[name] = std::move(vals);
  }
  return out;
}

}  // namespace moe
