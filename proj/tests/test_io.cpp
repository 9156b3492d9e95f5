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

#include <sstream>

#include <gtest/gtest.h>

#include "support.hpp"

namespace pvcam {
namespace {

std::string message_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.what();
  }
  return {};
}

TEST(PanelCsv, RoundTripIsExact) {
  const auto sim = generate(SimulationConfig{4, 20}, 0);
  std::stringstream s;
  io::write_panel_csv(s, sim.data);
  const PanelDataset back = io::read_panel_csv(s);
  ASSERT_EQ(back.clusters.size(), 4u);
  for (std::size_t i = 0; i < 4; ++i) {
    EXPECT_EQ(back.clusters[i].id, sim.data.clusters[i].id);
    EXPECT_EQ(back.clusters[i].y, sim.data.clusters[i].y);
    EXPECT_EQ(back.clusters[i].u, sim.data.clusters[i].u);
    EXPECT_EQ(back.clusters[i].x, sim.data.clusters[i].x);
  }
}

TEST(PanelCsv, RowsAreGroupedAndSortedAndUDefaultsToTOverT) {
  std::istringstream in("cluster_id,t,y,x1\nb,2,1.0,0.1\na,1,2.0,0.2\nb,1,3.0,0.3\na,2,4.0,0.4\n");
  const PanelDataset d = io::read_panel_csv(in);
  ASSERT_EQ(d.clusters.size(), 2u);
  EXPECT_EQ(d.clusters[0].id, "b");
  EXPECT_EQ(d.clusters[0].y, (std::vector<double>{3.0, 1.0}));
  EXPECT_EQ(d.clusters[0].u, (std::vector<double>{0.5, 1.0}));
  EXPECT_EQ(d.clusters[1].x(1, 0), 0.4);
}

TEST(PanelCsv, ErrorsNameTheColumnAndRow) {
  auto read = [](const std::string& text) {
    std::istringstream in(text);
    return io::read_panel_csv(in);
  };
  EXPECT_EQ(message_of([&] { read("cluster_id,t,y,x1\na,1,oops,0.1\n"); }), "malformed number 'oops' in column 'y' at row 2");
  EXPECT_EQ(message_of([&] { read("cluster_id,t,y,x1\na,1,1,0.1\na,2,NA,0.1\n"); }), "missing value in column 'y' at row 3");
  EXPECT_EQ(message_of([&] { read("cluster_id,t,x1\na,1,0.1\n"); }), "panel CSV lacks required column 'y'");
  EXPECT_EQ(message_of([&] { read("cluster_id,t,y,x2\n"); }), "unexpected column 'x2' in panel CSV header");
  EXPECT_EQ(message_of([&] { read("cluster_id,t,y,x1\na,1,1\n"); }), "row 2 has 3 fields, expected 4");
  EXPECT_EQ(message_of([&] { read("cluster_id,t,y,x1\na,1,1,1\na,1,2,2\n"); }), "cluster 'a' repeats time index 1");
  EXPECT_THROW(read(""), DataError);
  EXPECT_THROW(io::read_panel_csv(std::string("/nonexistent/panel.csv")), DataError);
}

TEST(Partitions, RoundTripAndOneBasedIds) {
  const auto [coef, additive] = true_partitions(4);
  std::stringstream s;
  io::write_partitions(s, coef, additive);
  const std::string text = s.str();
  EXPECT_EQ(text.substr(0, text.find('\n')), "family,i,j,block_id");
  EXPECT_NE(text.find("coef,1,1,1\n"), std::string::npos);
  EXPECT_NE(text.find("additive,4,2,3\n"), std::string::npos);
  const auto [c2, a2] = io::read_partitions(s);
  EXPECT_EQ(c2, coef);
  EXPECT_EQ(a2, additive);
}

TEST(Partitions, IncompleteFilesAreRejected) {
  std::istringstream bad("family,i,j,block_id\ncoef,1,1,1\ncoef,2,2,1\nadditive,1,1,1\n");
  EXPECT_THROW(io::read_partitions(bad), DataError);
  std::istringstream header("fam,i,j,b\n");
  EXPECT_THROW(io::read_partitions(header), DataError);
}

TEST(ModelJson, RoundTripPreservesPredictions) {
  const PanelDataset raw = testing::tiny_panel(3, 40, 11, 0.05);
  PipelineOptions opts;
  opts.K0 = 5;
  opts.K = 6;
  opts.mode = FitMode::overfit;
  const auto r = fit_pipeline(raw, opts);
  const auto j = io::model_to_json(r.model);
  const FittedModel back = io::model_from_json(nlohmann::json::parse(j.dump()));
  const auto p1 = predict(r.model, raw), p2 = predict(back, raw);
  for (std::size_t i = 0; i < p1.size(); ++i) EXPECT_EQ(p1[i].fitted, p2[i].fitted);
  EXPECT_EQ(back.spec.K, 6);
  EXPECT_EQ(back.coef_partition, r.model.coef_partition);
  EXPECT_EQ(back.additive_support, r.model.additive_support);
  auto broken = j;
  broken["coef_blocks"].erase(0);
  EXPECT_THROW(io::model_from_json(broken), DataError);
  EXPECT_THROW(io::model_from_json(nlohmann::json::object()), DataError);
}

TEST(FunctionGrids, OneRowPerGridPointAndBlock) {
  const PanelDataset raw = testing::tiny_panel(2, 40, 13, 0.05);
  PipelineOptions opts;
  opts.K0 = 5;
  opts.K = 5;
  opts.mode = FitMode::underfit;
  const auto r = fit_pipeline(raw, opts);
  std::stringstream s;
  io::write_function_grids(s, r.model);
  std::string line;
  std::getline(s, line);
  EXPECT_EQ(line, "function,block_id,j,x_scaled,x,value");
  int rows = 0;
  while (std::getline(s, line)) ++rows;
  EXPECT_EQ(rows, io::kPlotGridPoints * (1 + 2 + 2));
}

TEST(KeyValues, CommentsBlanksAndErrors) {
  std::istringstream in("# top\n seed = 7  \n\nmode=overfit # trailing\n");
  const auto kv = io::parse_key_values(in);
  EXPECT_EQ(kv.at("seed"), "7");
  EXPECT_EQ(kv.at("mode"), "overfit");
  EXPECT_EQ(kv.size(), 2u);
  std::istringstream bad("seed 7\n");
  EXPECT_THROW(io::parse_key_values(bad), ConfigError);
}

TEST(Formatting, ShortestRoundTripAndFixed) {
  EXPECT_EQ(io::format_double(0.1), "0.1");
  EXPECT_EQ(std::stod(io::format_double(1.0 / 3.0)), 1.0 / 3.0);
  EXPECT_EQ(io::format_fixed(0.12345, 4), "0.1235");
  EXPECT_EQ(io::format_mean_sd({0.5, 0.25, 3}), "0.5000(0.2500)");
}

TEST(Tables, HeadersCarryOneColumnPerT) {
  StudyResult a, b;
  a.config.T = 100;
  b.config.T = 400;
  for (auto* s : {&a, &b}) {
    MiseReport rep;
    for (int k = 0; k < 5; ++k) rep.stats.push_back({0.1, 0.01, 2});
    s->mise[FitMode::correct] = rep;
  }
  std::stringstream nmi, mise;
  io::write_nmi_table(nmi, {a, b});
  io::write_mise_table(mise, {a, b}, {FitMode::correct, FitMode::overfit});
  std::string line;
  std::getline(nmi, line);
  EXPECT_EQ(line, "family,identification,n,T=100,T=400");
  std::getline(mise, line);
  EXPECT_EQ(line, "function,method,T=100,T=400");
  std::getline(mise, line);
  EXPECT_EQ(line, "b,correct,0.1000(0.0100),0.1000(0.0100)");
  std::getline(mise, line);
  EXPECT_EQ(line, "b,overfit,NA,NA");
}

}  // namespace
}  // namespace pvcam
