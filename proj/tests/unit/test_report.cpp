#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "orthokd/errors.hpp"
#include "orthokd/metrics.hpp"
#include "orthokd/report.hpp"

using namespace orthokd;

namespace {

const std::string kModel = "resnet-d1-w8-c10-s16";

RunRecord rec(RunTag tag, const std::string& type, double acc, std::uint64_t seed = 1,
              const std::string& model = kModel) {
  RunRecord r;
  r.tag = tag;
  r.train_type = type;
  r.accuracy = acc;
  r.seed = seed;
  r.model = model;
  return r;
}

// ResNet-56, 40/70/90 channels, scratch and label rows.
std::vector<RunRecord> table_rows() {
  return {rec(RunTag::Unpruned, "scratch", 71.23),  rec(RunTag::Scratch, "scratch", 70.06),
          rec(RunTag::Unpruned, "label", 73.76),    rec(RunTag::PreDistill, "label", 72.05),
          rec(RunTag::PostDistill, "label", 71.37), rec(RunTag::PrePost, "label", 73.24),
          rec(RunTag::SelfDistill, "label", 73.30)};
}

std::vector<std::string> lines(const std::string& text) {
  std::istringstream in(text);
  std::vector<std::string> out;
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Report, RowGivesExpectedSurplus) {
  const auto rows = build_report(table_rows());
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].train_type, "scratch");
  EXPECT_FALSE(rows[0].surplus.has_value());
  ASSERT_TRUE(rows[1].surplus.has_value());
  EXPECT_NEAR(*rows[1].surplus, 0.71, 1e-9);
  const auto md = lines(report_markdown(rows));
  EXPECT_EQ(md[3], "| label | " + kModel + " | 1 | 73.76 | 72.05 | 71.37 | 73.24 | 73.30 | 0.71 |");
  EXPECT_EQ(md[2], "| scratch | " + kModel + " | 1 | 71.23 | 70.06 | - | - | - | - |");
}

TEST(Report, MissingSelfDistillGivesDash) {
  auto rs = table_rows();
  rs.pop_back();
  const auto rows = build_report(rs);
  EXPECT_FALSE(rows[1].surplus.has_value());
  EXPECT_FALSE(rows[1].cells[static_cast<std::size_t>(ReportColumn::SelfDistill)].mean.has_value());
  const auto csv = lines(report_csv(rows));
  EXPECT_EQ(csv[0], "train_type,model,seeds,unpruned,finetuned,post_distill,pre_post,self_distill,surplus");
  EXPECT_EQ(csv[2].substr(csv[2].size() - 4), ",-,-");
}

TEST(Report, MultiSeedMeansAndCompanion) {
  std::vector<RunRecord> rs{rec(RunTag::Unpruned, "scratch", 50.0, 1),
                            rec(RunTag::Unpruned, "scratch", 53.0, 2),
                            rec(RunTag::Unpruned, "scratch", 59.0, 3),
                            rec(RunTag::Scratch, "scratch", 40.0, 1)};
  const auto rows = build_report(rs);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_DOUBLE_EQ(*rows[0].cells[0].mean, (50.0 + 53.0 + 59.0) / 3.0);
  EXPECT_EQ(rows[0].cells[0].seeds, 3u);
  EXPECT_EQ(rows[0].cells[1].seeds, 1u);
  EXPECT_NE(report_markdown(rows).find("| scratch | " + kModel + " | 1-3 | 54.00 | 40.00 |"),
            std::string::npos);
  const auto seeds = lines(per_seed_csv(rs));
  ASSERT_EQ(seeds.size(), 5u);
  EXPECT_EQ(seeds[0], "tag,train_type,seed,accuracy");
  EXPECT_EQ(seeds[2], "Unpruned,scratch,2,53");
}

TEST(Report, SurplusAlwaysMatchesMetric) {
  // Two seeds per cell; the rendered surplus must equal the metric on the rendered means.
  std::vector<RunRecord> rs;
  const double vals[2][4] = {{60.1, 65.3, 58.2, 63.0}, {61.7, 64.9, 57.0, 64.4}};
  for (std::uint64_t s = 0; s < 2; ++s) {
    rs.push_back(rec(RunTag::Unpruned, "scratch", vals[s][0], s));
    rs.push_back(rec(RunTag::Unpruned, "feature", vals[s][1], s));
    rs.push_back(rec(RunTag::Scratch, "scratch", vals[s][2], s));
    rs.push_back(rec(RunTag::SelfDistill, "feature", vals[s][3], s));
  }
  const auto rows = build_report(rs);
  const auto& f = rows[1];
  ASSERT_EQ(f.train_type, "feature");
  const double expect = surplus(*rows[0].cells[0].mean, *f.cells[0].mean, *rows[0].cells[1].mean,
                                *f.cells[4].mean);
  EXPECT_EQ(*f.surplus, expect);
  EXPECT_NEAR(expect, ((63.0 + 64.4) / 2 - 57.6) - ((65.3 + 64.9) / 2 - 60.9), 1e-12);
}

TEST(Report, RejectsInconsistentModels) {
  auto rs = table_rows();
  rs.push_back(rec(RunTag::Unpruned, "label", 70.0, 2, "vgg-w8-c10-s16"));
  EXPECT_THROW(build_report(rs), ConfigError);

  auto cross = table_rows();
  for (auto& r : cross)
    if (r.train_type == "label") r.model = "resnet-d2-w8-c10-s16";
  EXPECT_THROW(build_report(cross), ConfigError);

  EXPECT_THROW(build_report({rec(RunTag::PreDistill, "scratch", 50.0)}), ConfigError);
  EXPECT_THROW(build_report({rec(RunTag::Unpruned, "scratch", 101.0)}), ConfigError);
}

TEST(Report, WritesThreeFiles) {
  const auto dir = (std::filesystem::temp_directory_path() / "orthokd_test_report").string();
  std::filesystem::remove_all(dir);
  write_report(dir, table_rows());
  for (const char* f : {"report.md", "report.csv", "report-seeds.csv"})
    EXPECT_TRUE(std::filesystem::exists(std::filesystem::path(dir) / f)) << f;
  std::filesystem::remove_all(dir);
}
