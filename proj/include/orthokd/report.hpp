#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "orthokd/experiment.hpp"

namespace orthokd {

/// Table columns in display order.
enum class ReportColumn { Unpruned = 0, Finetuned, PostDistill, PrePost, SelfDistill };
inline constexpr std::size_t kReportColumns = 5;

struct ReportCell {
  std::optional<double> mean;  // absent cells render as a dash
  std::size_t seeds = 0;
};

struct ReportRow {
  std::string train_type;  // scratch | label | feature
  std::string model;
  std::array<ReportCell, kReportColumns> cells;
  std::optional<double> surplus;
};

/// One row per train type present. The scratch row's Finetuned cell holds
/// the fine-tuned scratch model; a distilled row's holds Pre-Distill.
/// Surplus is computed from the cell means of the distilled row and the
/// scratch row; it is absent whenever any of its four inputs is.
/// Throws ConfigError when records of one row (or a distilled row and the
/// scratch row it refers to) disagree on the model spec.
std::vector<ReportRow> build_report(const std::vector<RunRecord>& records);

std::string report_markdown(const std::vector<ReportRow>& rows);
std::string report_csv(const std::vector<ReportRow>& rows);
/// Per-seed companion table: tag, train type, seed, accuracy.
std::string per_seed_csv(const std::vector<RunRecord>& records);

/// Writes report.md, report.csv and report-seeds.csv into `dir`.
void write_report(const std::string& dir, const std::vector<RunRecord>& records);

}  // namespace orthokd
