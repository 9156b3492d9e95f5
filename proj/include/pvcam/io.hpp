// Copyright 2026 The pvcam Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "pvcam/data_model.hpp"
#include "pvcam/error.hpp"
#include "pvcam/metrics.hpp"
#include "pvcam/pipeline.hpp"
#include "pvcam/simulation.hpp"

namespace pvcam::io {

/// Shortest decimal text that reads back to the same double.
inline std::string format_double(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

inline std::string format_fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string format_mean_sd(const MeanSd& s) { return format_fixed(s.mean, 4) + "(" + format_fixed(s.sd, 4) + ")"; }

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

inline std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(',', start);
    out.emplace_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline double parse_double(std::string_view text, const std::string& context) {
  text = trim(text);
  if (text.empty() || text == "NA" || text == "NaN" || text == "nan")
    throw DataError("missing value " + context);
  double v = 0.0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (res.ec != std::errc{} || res.ptr != text.data() + text.size() || !std::isfinite(v))
    throw DataError("malformed number '" + std::string(text) + "' " + context);
  return v;
}

inline int parse_int(std::string_view text, const std::string& context) {
  text = trim(text);
  int v = 0;
  const auto res = std::from_chars(text.data(), text.data() + text.size(), v);
  if (text.empty() || res.ec != std::errc{} || res.ptr != text.data() + text.size())
    throw DataError("malformed integer '" + std::string(text) + "' " + context);
  return v;
}

inline std::ifstream open_input(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open '" + path + "' for reading");
  return in;
}

inline std::ofstream open_output(const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot open '" + path + "' for writing");
  return out;
}

// ---------------------------------------------------------------------------
// Panel CSV: cluster_id, t, [u], y, x1..xq
// ---------------------------------------------------------------------------

/// Rows are grouped by cluster_id (clusters ordered by first appearance) and
/// sorted by t within a cluster. Without a u column, u = t / T_i.
inline PanelDataset read_panel_csv(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DataError("panel CSV is empty");
  const auto header = split_csv_line(line);
  int c_id = -1, c_t = -1, c_u = -1, c_y = -1;
  std::vector<int> c_x;
  for (int k = 0; k < static_cast<int>(header.size()); ++k) {
    const auto& h = header[static_cast<std::size_t>(k)];
    if (h == "cluster_id") c_id = k;
    else if (h == "t") c_t = k;
    else if (h == "u") c_u = k;
    else if (h == "y") c_y = k;
    else if (h == covariate_name(static_cast<int>(c_x.size()))) c_x.push_back(k);
    else throw DataError("unexpected column '" + h + "' in panel CSV header");
  }
  for (auto [col, name] : {std::pair{c_id, "cluster_id"}, std::pair{c_t, "t"}, std::pair{c_y, "y"}})
    if (col < 0) throw DataError(std::string("panel CSV lacks required column '") + name + "'");
  if (c_x.empty()) throw DataError("panel CSV has no covariate columns (x1, x2, ...)");

  struct Row {
    double t, u, y;
    std::vector<double> x;
  };
  std::vector<std::string> order;
  std::map<std::string, std::vector<Row>> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != header.size())
      throw DataError("row " + std::to_string(line_no) + " has " + std::to_string(f.size()) + " fields, expected " +
                      std::to_string(header.size()));
    auto where = [&](int col) {
      return "in column '" + header[static_cast<std::size_t>(col)] + "' at row " + std::to_string(line_no);
    };
    const std::string& id = f[static_cast<std::size_t>(c_id)];
    if (id.empty()) throw DataError("missing value " + where(c_id));
    Row r{parse_double(f[static_cast<std::size_t>(c_t)], where(c_t)),
          c_u >= 0 ? parse_double(f[static_cast<std::size_t>(c_u)], where(c_u)) : 0.0,
          parse_double(f[static_cast<std::size_t>(c_y)], where(c_y)),
          {}};
    for (int col : c_x) r.x.push_back(parse_double(f[static_cast<std::size_t>(col)], where(col)));
    auto [it, inserted] = rows.try_emplace(id);
    if (inserted) order.push_back(id);
    it->second.push_back(std::move(r));
  }
  PanelDataset out;
  for (const auto& id : order) {
    auto& rs = rows[id];
    std::stable_sort(rs.begin(), rs.end(), [](const Row& a, const Row& b) { return a.t < b.t; });
    ClusterSeries s;
    s.id = id;
    s.x.resize(static_cast<Eigen::Index>(rs.size()), static_cast<Eigen::Index>(c_x.size()));
    for (std::size_t k = 0; k < rs.size(); ++k) {
      if (k > 0 && rs[k].t == rs[k - 1].t)
        throw DataError("cluster '" + id + "' repeats time index " + format_double(rs[k].t));
      s.u.push_back(c_u >= 0 ? rs[k].u : rs[k].t / static_cast<double>(rs.size()));
      s.y.push_back(rs[k].y);
      for (std::size_t l = 0; l < c_x.size(); ++l) s.x(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(l)) = rs[k].x[l];
    }
    out.clusters.push_back(std::move(s));
  }
  out.validate();
  return out;
}

inline PanelDataset read_panel_csv(const std::string& path) {
  auto in = open_input(path);
  return read_panel_csv(in);
}

inline void write_panel_csv(std::ostream& out, const PanelDataset& data) {
  const int q = data.num_covariates();
  out << "cluster_id,t,u,y";
  for (int l = 0; l < q; ++l) out << ',' << covariate_name(l);
  out << '\n';
  for (const auto& c : data.clusters)
    for (std::size_t t = 0; t < c.length(); ++t) {
      out << c.id << ',' << t + 1 << ',' << format_double(c.u[t]) << ',' << format_double(c.y[t]);
      for (int l = 0; l < q; ++l) out << ',' << format_double(c.x(static_cast<Eigen::Index>(t), l));
      out << '\n';
    }
}

// ---------------------------------------------------------------------------
// Partitions: family, i, j, block_id (all 1-based)
// ---------------------------------------------------------------------------

inline void write_partitions(std::ostream& out, const PairPartition& coef, const PairPartition& additive) {
  out << "family,i,j,block_id\n";
  for (auto [name, part] : {std::pair{"coef", &coef}, std::pair{"additive", &additive}})
    for (int i = 0; i < part->num_clusters(); ++i)
      for (int j = 0; j < part->num_variables(); ++j)
        out << name << ',' << i + 1 << ',' << j + 1 << ',' << part->block_of(i, j) + 1 << '\n';
}

inline std::pair<PairPartition, PairPartition> read_partitions(std::istream& in) {
  std::string line;
  if (!std::getline(in, line) || split_csv_line(line) != std::vector<std::string>{"family", "i", "j", "block_id"})
    throw DataError("partition file must start with the header family,i,j,block_id");
  std::map<std::string, std::map<std::pair<int, int>, int>> entries;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    const auto f = split_csv_line(line);
    const std::string at = "at row " + std::to_string(line_no);
    if (f.size() != 4) throw DataError("partition file: wrong field count " + at);
    if (f[0] != "coef" && f[0] != "additive") throw DataError("partition file: unknown family '" + f[0] + "' " + at);
    entries[f[0]][{parse_int(f[1], at) - 1, parse_int(f[2], at) - 1}] = parse_int(f[3], at) - 1;
  }
  auto build = [&](const std::string& fam) {
    const auto& e = entries[fam];
    if (e.empty()) throw DataError("partition file has no '" + fam + "' rows");
    int n = 0, d = 0;
    for (const auto& [key, b] : e) {
      n = std::max(n, key.first + 1);
      d = std::max(d, key.second + 1);
    }
    if (static_cast<std::size_t>(n) * static_cast<std::size_t>(d) != e.size())
      throw DataError("partition file: family '" + fam + "' does not cover every (i, j)");
    std::vector<int> labels;
    for (const auto& [key, b] : e) {
      if (key.first < 0 || key.second < 0 || b < 0) throw DataError("partition file: indices must be positive");
      labels.push_back(b);
    }
    return PairPartition(n, d, std::move(labels));
  };
  return {build("coef"), build("additive")};
}

inline std::pair<PairPartition, PairPartition> read_partitions(const std::string& path) {
  auto in = open_input(path);
  return read_partitions(in);
}

// ---------------------------------------------------------------------------
// Function grids for plotting
// ---------------------------------------------------------------------------

inline constexpr int kPlotGridPoints = 201;

/// One row per block function and grid point. x_scaled is the spline
/// argument in [0,1]; x is the same point in original units. Trend and
/// additive values are in response units; coefficient values are unitless.
/// Block functions use the block-average centering.
inline void write_function_grids(std::ostream& out, const FittedModel& m) {
  const auto& urec = m.scaling.at(0);
  const auto& yrec = m.scaling.at(1);
  const int p = m.spec.p;
  out << "function,block_id,j,x_scaled,x,value\n";
  auto grid = [&](const std::string& name, int block, int j, const FunctionEstimate& f, const ScalingRecord& arg,
                  auto&& transform) {
    for (int k = 0; k < kPlotGridPoints; ++k) {
      const double s = static_cast<double>(k) / (kPlotGridPoints - 1);
      out << name << ',' << block << ',' << j << ',' << format_double(s) << ',' << format_double(arg.unscale(s)) << ','
          << format_double(transform(f(s))) << '\n';
    }
  };
  grid("b", 0, 0, m.trend, urec, [&](double v) { return yrec.unscale(v); });
  const auto cblocks = m.coef_partition.blocks();
  for (std::size_t b = 0; b < m.coef_functions.size(); ++b)
    grid("a", static_cast<int>(b) + 1, cblocks[b].front().variable + 1, m.coef_functions[b], urec,
         [](double v) { return v; });
  const auto ablocks = m.additive_partition.blocks();
  for (std::size_t b = 0; b < m.additive_functions.size(); ++b) {
    const int j = ablocks[b].front().variable;
    grid("g", static_cast<int>(b) + 1, j + 1, m.additive_functions[b], j < p ? yrec : m.scaling.at(2 + j - p),
         [&](double v) { return yrec.range() * v; });
  }
}

// ---------------------------------------------------------------------------
// Model serialization
// ---------------------------------------------------------------------------

namespace detail {
inline nlohmann::json to_json(const Eigen::VectorXd& v) { return std::vector<double>(v.data(), v.data() + v.size()); }
inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}
inline nlohmann::json to_json(const PairPartition& p) {
  return {{"num_clusters", p.num_clusters()}, {"num_variables", p.num_variables()}, {"labels", p.labels()}};
}
inline PairPartition partition_from_json(const nlohmann::json& j) {
  return PairPartition(j.at("num_clusters").get<int>(), j.at("num_variables").get<int>(),
                       j.at("labels").get<std::vector<int>>());
}
}  // namespace detail

inline nlohmann::json model_to_json(const FittedModel& m) {
  using nlohmann::json;
  json j;
  j["spec"] = {{"p", m.spec.p}, {"q", m.spec.q}, {"K0", m.spec.K0}, {"K", m.spec.K}, {"degree", m.spec.degree}};
  j["cluster_ids"] = m.cluster_ids;
  json scaling = json::array();
  for (const auto& r : m.scaling) scaling.push_back({{"variable", r.variable_id}, {"min", r.min}, {"max", r.max}});
  j["scaling"] = scaling;
  json centering = json::array();
  for (const auto& c : m.centering) {
    json z = json::array();
    for (const auto& r : c.z) z.push_back({{"sample", r.sample_id}, {"means", detail::to_json(r.means)}});
    centering.push_back({{"u", {{"sample", c.u.sample_id}, {"means", detail::to_json(c.u.means)}}}, {"z", z}});
  }
  j["centering"] = centering;
  j["trend"] = detail::to_json(m.trend.coeffs);
  j["coef_partition"] = detail::to_json(m.coef_partition);
  j["additive_partition"] = detail::to_json(m.additive_partition);
  json cf = json::array(), af = json::array();
  for (const auto& f : m.coef_functions) cf.push_back(detail::to_json(f.coeffs));
  for (const auto& f : m.additive_functions) af.push_back(detail::to_json(f.coeffs));
  j["coef_blocks"] = cf;
  j["additive_blocks"] = af;
  json support = json::array();
  for (const auto& [lo, hi] : m.additive_support) support.push_back({lo, hi});
  j["additive_support"] = support;
  j["variances"] = {{"sigma2", m.variances.sigma2}, {"sigma_eta2", m.variances.sigma_eta2}};
  j["status"] = {{"converged", m.status.converged}, {"iterations", m.status.iterations}, {"warnings", m.status.warnings}};
  return j;
}

inline FittedModel model_from_json(const nlohmann::json& j) {
  try {
    FittedModel m;
    const auto& s = j.at("spec");
    m.spec = {s.at("p").get<int>(), s.at("q").get<int>(), s.at("K0").get<int>(), s.at("K").get<int>(),
              s.at("degree").get<int>()};
    m.spec.validate();
    m.basis = BSplineBasis(m.spec.K, m.spec.degree);
    m.cluster_ids = j.at("cluster_ids").get<std::vector<std::string>>();
    for (const auto& r : j.at("scaling"))
      m.scaling.push_back({r.at("variable").get<std::string>(), r.at("min").get<double>(), r.at("max").get<double>()});
    for (const auto& c : j.at("centering")) {
      ClusterCentering cc;
      cc.u = {detail::vector_from_json(c.at("u").at("means")), c.at("u").at("sample").get<std::string>()};
      for (const auto& z : c.at("z"))
        cc.z.push_back({detail::vector_from_json(z.at("means")), z.at("sample").get<std::string>()});
      m.centering.push_back(std::move(cc));
    }
    m.trend = FunctionEstimate::trend(m.basis, detail::vector_from_json(j.at("trend")));
    m.coef_partition = detail::partition_from_json(j.at("coef_partition"));
    m.additive_partition = detail::partition_from_json(j.at("additive_partition"));
    if (m.centering.empty()) throw DataError("model file lists no clusters");
    const auto cavg = block_average_centering(m.centering, m.coef_partition, true);
    const auto aavg = block_average_centering(m.centering, m.additive_partition, false);
    const auto& cb = j.at("coef_blocks");
    const auto& ab = j.at("additive_blocks");
    if (cb.size() != cavg.size() || ab.size() != aavg.size()) throw DataError("model file block counts disagree");
    for (std::size_t k = 0; k < cavg.size(); ++k)
      m.coef_functions.push_back(FunctionEstimate::coefficient(m.basis, detail::vector_from_json(cb[k]), cavg[k]));
    for (std::size_t k = 0; k < aavg.size(); ++k)
      m.additive_functions.push_back(FunctionEstimate::additive(m.basis, detail::vector_from_json(ab[k]), aavg[k]));
    if (j.contains("additive_support")) {
      for (const auto& r : j.at("additive_support")) m.additive_support.emplace_back(r.at(0).get<double>(), r.at(1).get<double>());
      if (m.additive_support.size() != aavg.size()) throw DataError("model file block counts disagree");
    }
    m.variances = {j.at("variances").at("sigma2").get<double>(), j.at("variances").at("sigma_eta2").get<double>()};
    m.status.converged = j.at("status").at("converged").get<bool>();
    m.status.iterations = j.at("status").at("iterations").get<int>();
    m.status.warnings = j.at("status").at("warnings").get<std::vector<std::string>>();
    if (static_cast<int>(m.centering.size()) != m.num_clusters() ||
        m.coef_partition.num_clusters() != m.num_clusters() ||
        static_cast<int>(m.coef_functions.size()) != m.coef_partition.num_blocks() ||
        static_cast<int>(m.additive_functions.size()) != m.additive_partition.num_blocks() ||
        static_cast<int>(m.scaling.size()) != m.spec.q + 2)
      throw DataError("model file is internally inconsistent");
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model file: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Flat key = value configuration
// ---------------------------------------------------------------------------

using KeyValues = std::map<std::string, std::string>;

/// Lines of `key = value`; '#' starts a comment; blank lines are skipped.
inline KeyValues parse_key_values(std::istream& in) {
  KeyValues out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string_view::npos) throw ConfigError("config line " + std::to_string(line_no) + ": expected key = value");
    const auto key = std::string(trim(body.substr(0, eq)));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    out[key] = std::string(trim(body.substr(eq + 1)));
  }
  return out;
}

inline KeyValues read_key_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  return parse_key_values(in);
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

inline void write_bic_trace(std::ostream& out, const std::string& stage, const BicTrace& trace, bool header = true) {
  if (header) out << "stage,K,rss,complexity,bic,chosen\n";
  for (const auto& c : trace.candidates)
    out << stage << ',' << c.K << ',' << format_double(c.rss) << ',' << c.complexity << ',' << format_double(c.bic)
        << ',' << (c.K == trace.chosen ? 1 : 0) << '\n';
}

inline void write_cv_trace(std::ostream& out, const CvResult& cv) {
  out << "threshold,coef_blocks,additive_blocks,cv_mse,skipped,chosen\n";
  for (const auto& c : cv.candidates)
    out << format_double(c.threshold) << ',' << c.coef_blocks << ',' << c.additive_blocks << ','
        << (c.skipped ? std::string("NA") : format_double(c.cv_mse)) << ',' << (c.skipped ? 1 : 0) << ','
        << (c.threshold == cv.threshold ? 1 : 0) << '\n';
}

/// NMI table: rows per family and identification variant, one column per T.
inline void write_nmi_table(std::ostream& out, const std::vector<StudyResult>& studies) {
  out << "family,identification,n";
  for (const auto& s : studies) out << ",T=" << s.config.T;
  out << '\n';
  const int n = studies.empty() ? 0 : studies.front().config.n;
  for (const char* family : {"coef", "additive"})
    for (const char* variant : {"greedy", "refined"}) {
      out << family << ',' << variant << ',' << n;
      for (const auto& s : studies) {
        const NmiReport& r = std::string_view(variant) == "greedy" ? s.nmi_greedy : s.nmi_refined;
        out << ',' << format_mean_sd(std::string_view(family) == "coef" ? r.coef : r.additive);
      }
      out << '\n';
    }
}

/// MISE table: rows per function and fitting method, one column per T.
/// Each cell averages the integrated squared error over all (i, j) of the
/// function family, then reports mean(sd) over replications.
inline void write_mise_table(std::ostream& out, const std::vector<StudyResult>& studies,
                             const std::vector<FitMode>& modes) {
  out << "function,method";
  for (const auto& s : studies) out << ",T=" << s.config.T;
  out << '\n';
  for (std::size_t k = 0; k < study_function_names().size(); ++k)
    for (FitMode mode : modes) {
      out << study_function_names()[k] << ',' << to_string(mode);
      for (const auto& s : studies) {
        const auto it = s.mise.find(mode);
        out << ',' << (it == s.mise.end() ? std::string("NA") : format_mean_sd(it->second.stats[k]));
      }
      out << '\n';
    }
}

/// One row per replication with every recorded quantity.
inline void write_replications(std::ostream& out, const StudyResult& s, const std::vector<FitMode>& modes) {
  out << "T,replication,ok,K0,K,threshold,nmi_coef_greedy,nmi_additive_greedy,nmi_coef,nmi_additive";
  for (FitMode mode : modes)
    for (const auto& f : study_function_names()) out << ",ise_" << f << '_' << to_string(mode);
  out << '\n';
  for (std::size_t r = 0; r < s.replications.size(); ++r) {
    const auto& rep = s.replications[r];
    out << s.config.T << ',' << r << ',' << (rep.ok ? 1 : 0) << ',' << rep.K0 << ',' << rep.K << ','
        << format_double(rep.threshold) << ',' << format_double(rep.nmi_coef_greedy) << ','
        << format_double(rep.nmi_additive_greedy) << ',' << format_double(rep.nmi_coef) << ','
        << format_double(rep.nmi_additive);
    for (FitMode mode : modes) {
      const auto it = rep.ise.find(mode);
      for (std::size_t k = 0; k < 5; ++k)
        out << ',' << (it == rep.ise.end() ? std::string("NA") : format_double(it->second[k]));
    }
    out << '\n';
  }
}

}  // namespace pvcam::io
