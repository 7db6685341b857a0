#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "orthokd/model.hpp"

namespace orthokd {

/// (self_distill - finetuned_scratch) - (unpruned_kd - unpruned_scratch), accuracies in %.
double surplus(double unpruned_scratch, double unpruned_kd, double finetuned_scratch,
               double self_distill);

// ------------------------------------------------------ confidence report

inline constexpr double kZ99 = 2.576;

struct ConfidenceReport {
  std::size_t n = 0;
  double avg = 0.0;
  double stddev = 0.0;      // sample (n - 1) standard deviation
  double err_margin = 0.0;  // stddev / sqrt(n)
  double interval99 = 0.0;  // kZ99 * err_margin
};

/// Throws ConfigError for fewer than two scores.
ConfidenceReport confidence_report(std::span<const double> scores);
/// Margins from an already-known standard deviation.
ConfidenceReport confidence_from_stddev(double stddev, std::size_t n, double avg = 0.0);

/// Header "name,n,avg,stddev,errmargin,interval99" plus one row per entry.
std::string score_csv(const std::vector<std::pair<std::string, ConfidenceReport>>& rows);

// ---------------------------------------------------------------- NASWOT

inline constexpr double kNaswotK = 1e-5;

struct NaswotResult {
  double score = 0.0;
  std::size_t degenerate_rows = 0;  // zero-variance Jacobian rows
};

/// Pearson correlation between the rows of `rows` [N, D]. A zero-variance
/// row correlates 1 with everything; `degenerate` counts such rows.
Tensor correlation_matrix(const Tensor& rows, std::size_t* degenerate = nullptr);
/// -sum_i [log(sigma_i + k) + 1 / (sigma_i + k)] over the eigenvalues of `corr`.
double naswot_from_correlation(const Tensor& corr, double k = kNaswotK);
NaswotResult naswot_from_jacobians(const Tensor& jacobians, double k = kNaswotK);

/// Per-sample Jacobians [N, C*H*W] of the logit sum w.r.t. the input pixels,
/// eval mode. Samples do not interact in eval mode, so one backward pass
/// over the batch yields every row.
Tensor input_jacobians(const ModelGraph& model, const Tensor& batch);
/// Logs a warning when degenerate rows occur.
NaswotResult naswot_score(const ModelGraph& model, const Tensor& batch, double k = kNaswotK);

// ------------------------------------------------------------- landscape

struct LandscapeSlice {
  std::size_t grid_n = 0;
  std::vector<double> coords;  // grid_n values evenly spaced over [-1, 1]
  std::vector<double> loss;    // loss[j * grid_n + i] at (a = coords[i], b = coords[j])
  std::uint64_t seed_a = 0;
  std::uint64_t seed_b = 0;

  double at(std::size_t i, std::size_t j) const { return loss[j * grid_n + i]; }
  double center() const { return at(grid_n / 2, grid_n / 2); }
};

/// Loss as a function of a full parameter list; must be safe to call concurrently.
using ParamLossFn = std::function<double(const std::vector<Tensor>& params)>;

/// Gaussian direction, rescaled so each output filter (row along axis 0 of
/// every rank >= 2 tensor) has the norm of the matching filter of `params`.
/// Rank-1 tensors (biases, BN scale/shift) get a zero direction.
std::vector<Tensor> filter_normalized_direction(const std::vector<Tensor>& params,
                                                std::uint64_t seed);

/// L(theta + a d + b e) over a grid_n x grid_n grid; grid_n must be odd.
LandscapeSlice landscape_slice(const std::vector<Tensor>& params, const ParamLossFn& loss,
                               std::size_t grid_n, std::uint64_t seed_a, std::uint64_t seed_b,
                               std::size_t jobs = 1);
/// Mean eval-mode cross-entropy of `model` on (inputs, labels), normalised inputs.
double dataset_loss(const ModelGraph& model, const Tensor& inputs, const std::vector<int>& labels,
                    std::size_t batch_size = 256);
LandscapeSlice landscape_slice(const ModelGraph& model, const Tensor& inputs,
                               const std::vector<int>& labels, std::size_t grid_n,
                               std::uint64_t seed_a, std::uint64_t seed_b, std::size_t jobs = 1);

/// CSV with header "a,b,loss".
void write_landscape_csv(const std::string& path, const LandscapeSlice& slice);
/// Legacy ASCII VTK structured-points grid with a "loss" point scalar.
void write_landscape_vtk(const std::string& path, const LandscapeSlice& slice);

}  // namespace orthokd
