#include "orthokd/report.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

#include "orthokd/errors.hpp"
#include "orthokd/metrics.hpp"

namespace orthokd {

namespace {

const char* kColumnTitles[kReportColumns] = {"Unpruned", "Finetuned / Pre-Distill",
                                             "Post-Distill", "Pre-Post", "Self-Distill"};

std::optional<ReportColumn> column_of(RunTag tag, bool scratch_row) {
  switch (tag) {
    case RunTag::Unpruned:
      return ReportColumn::Unpruned;
    case RunTag::Scratch:
      return scratch_row ? std::optional(ReportColumn::Finetuned) : std::nullopt;
    case RunTag::PreDistill:
      return scratch_row ? std::nullopt : std::optional(ReportColumn::Finetuned);
    case RunTag::PostDistill:
      return ReportColumn::PostDistill;
    case RunTag::PrePost:
      return ReportColumn::PrePost;
    case RunTag::SelfDistill:
      return ReportColumn::SelfDistill;
  }
  return std::nullopt;
}

int row_order(const std::string& type) {
  if (type == "scratch") return 0;
  if (type == "label") return 1;
  return 2;
}

std::string fmt(const std::optional<double>& v, int precision = 2) {
  if (!v) return "-";
  std::ostringstream os;
  os << std::fixed << std::setprecision(precision) << *v;
  return os.str();
}

std::string seed_summary(const ReportRow& row) {
  std::size_t lo = SIZE_MAX, hi = 0;
  for (const auto& c : row.cells) {
    if (!c.mean) continue;
    lo = std::min(lo, c.seeds);
    hi = std::max(hi, c.seeds);
  }
  if (hi == 0) return "0";
  return lo == hi ? std::to_string(hi) : std::to_string(lo) + "-" + std::to_string(hi);
}

}  // namespace

std::vector<ReportRow> build_report(const std::vector<RunRecord>& records) {
  std::map<std::string, ReportRow> rows;
  std::map<std::string, std::array<std::pair<double, std::size_t>, kReportColumns>> sums;
  for (const auto& r : records) {
    r.validate();
    const bool scratch_row = r.train_type == "scratch";
    const auto col = column_of(r.tag, scratch_row);
    if (!col) {
      throw ConfigError("record tag " + to_string(r.tag) + " cannot appear with train type " +
                        r.train_type);
    }
    ReportRow& row = rows[r.train_type];
    if (row.train_type.empty()) {
      row.train_type = r.train_type;
      row.model = r.model;
    } else if (row.model != r.model) {
      throw ConfigError("row '" + r.train_type + "' mixes model specs '" + row.model + "' and '" +
                        r.model + "'");
    }
    auto& acc = sums[r.train_type][static_cast<std::size_t>(*col)];
    acc.first += r.accuracy;
    ++acc.second;
  }
  std::vector<ReportRow> out;
  for (auto& [type, row] : rows) {
    for (std::size_t c = 0; c < kReportColumns; ++c) {
      const auto& [sum, n] = sums[type][c];
      row.cells[c].seeds = n;
      if (n > 0) row.cells[c].mean = sum / static_cast<double>(n);
    }
    out.push_back(row);
  }
  std::sort(out.begin(), out.end(), [](const ReportRow& a, const ReportRow& b) {
    return row_order(a.train_type) < row_order(b.train_type);
  });

  const ReportRow* base = nullptr;
  for (const auto& r : out)
    if (r.train_type == "scratch") base = &r;
  for (auto& r : out) {
    if (r.train_type == "scratch" || !base) continue;
    if (base->model != r.model) {
      throw ConfigError("row '" + r.train_type + "' and the scratch row use different model specs");
    }
    const auto& us = base->cells[static_cast<std::size_t>(ReportColumn::Unpruned)].mean;
    const auto& fs = base->cells[static_cast<std::size_t>(ReportColumn::Finetuned)].mean;
    const auto& uk = r.cells[static_cast<std::size_t>(ReportColumn::Unpruned)].mean;
    const auto& sd = r.cells[static_cast<std::size_t>(ReportColumn::SelfDistill)].mean;
    if (us && fs && uk && sd) r.surplus = surplus(*us, *uk, *fs, *sd);
  }
  return out;
}

std::string report_markdown(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "| Train | Model | Seeds |";
  for (const char* t : kColumnTitles) os << ' ' << t << " |";
  os << " Surplus |\n|---|---|---|";
  for (std::size_t c = 0; c < kReportColumns; ++c) os << "---|";
  os << "---|\n";
  for (const auto& r : rows) {
    os << "| " << r.train_type << " | " << r.model << " | " << seed_summary(r) << " |";
    for (const auto& c : r.cells) os << ' ' << fmt(c.mean) << " |";
    os << ' ' << fmt(r.surplus) << " |\n";
  }
  os << "\nAccuracies are test top-1 (%) averaged over seeds; per-seed values are in "
        "report-seeds.csv. '-' marks a cell that was not run.\n";
  return os.str();
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream os;
  os << "train_type,model,seeds,unpruned,finetuned,post_distill,pre_post,self_distill,surplus\n";
  for (const auto& r : rows) {
    os << r.train_type << ',' << r.model << ',' << seed_summary(r);
    for (const auto& c : r.cells) os << ',' << fmt(c.mean, 6);
    os << ',' << fmt(r.surplus, 6) << '\n';
  }
  return os.str();
}

std::string per_seed_csv(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "tag,train_type,seed,accuracy\n" << std::setprecision(17);
  for (const auto& r : records)
    os << to_string(r.tag) << ',' << r.train_type << ',' << r.seed << ',' << r.accuracy << '\n';
  return os.str();
}

void write_report(const std::string& dir, const std::vector<RunRecord>& records) {
  const auto rows = build_report(records);
  std::filesystem::create_directories(dir);
  auto put = [&](const char* name, const std::string& text) {
    std::ofstream os(std::filesystem::path(dir) / name);
    if (!os) throw ConfigError("cannot write '" + (std::filesystem::path(dir) / name).string() + "'");
    os << text;
  };
  put("report.md", report_markdown(rows));
  put("report.csv", report_csv(rows));
  put("report-seeds.csv", per_seed_csv(records));
}

}  // namespace orthokd
