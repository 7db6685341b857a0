#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "orthokd/config.hpp"
#include "orthokd/data.hpp"
#include "orthokd/model.hpp"
#include "orthokd/optim.hpp"

namespace orthokd {

/// Column tags of the result tables. `Scratch` is the fine-tuned pruned
/// scratch model; `Unpruned` is a model straight out of initial training.
enum class RunTag { Scratch, PreDistill, PostDistill, PrePost, SelfDistill, Unpruned };

std::string to_string(RunTag tag);
RunTag run_tag_from_string(const std::string& s);

struct RunRecord {
  RunTag tag = RunTag::Unpruned;
  std::string train_type = "scratch";  // scratch | label | feature
  double accuracy = 0.0;               // test accuracy, %
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string model;                   // model tag, e.g. resnet-d1-w8-c10-s16
  std::string model_digest;
  std::string teacher_digest;          // empty when trained without a teacher

  void validate() const;
};

std::string records_csv(const std::vector<RunRecord>& records);
std::vector<RunRecord> parse_records_csv(const std::string& text);
void write_records_csv(const std::string& path, const std::vector<RunRecord>& records);
std::vector<RunRecord> read_records_csv(const std::string& path);

/// Deterministic 64-bit stream seed for one (seed, phase) pair.
std::uint64_t phase_seed(std::uint64_t seed, const std::string& phase);

struct PrunedModel {
  ModelGraph model;                 // compact for channel methods, masked for magnitude
  std::optional<WeightMask> mask;   // magnitude pruning only
};

/// Applies `spec` to `model`. The input is never modified.
PrunedModel prune_model(const ModelGraph& model, const PruneSpec& spec);

struct RunOptions {
  std::size_t jobs = 1;
  std::string out_dir;  // checkpoints and results.csv are written here when set
};

/// Unpruned models of one seed, kept for analysis (diversity scores, landscapes).
struct SeedModels {
  std::uint64_t seed = 0;
  std::optional<ModelGraph> scratch;
  std::optional<ModelGraph> distilled;
  std::string distilled_digest_before_prune;
  std::string distilled_digest_after_prune;
};

struct ExperimentResult {
  std::vector<RunRecord> records;
  std::vector<SeedModels> models;
  std::shared_ptr<const DatasetHandle> data;
};

/// Runs the listed schedules for every configured seed, sharing phases:
/// each (seed, augmentation) scratch model is trained once and doubles as
/// the automatic teacher of seed - 1; each seed's distilled model is trained
/// once and pruned once. Throws ConfigError before any training when a
/// required teacher cannot be resolved.
ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::set<Schedule>& schedules,
                                const RunOptions& opts = {});
/// cfg.schedule only.
ExperimentResult run_schedule(const ExperimentConfig& cfg, const RunOptions& opts = {});
/// Every schedule (the full table layout).
ExperimentResult run_matrix(const ExperimentConfig& cfg, const RunOptions& opts = {});

/// First `batch` test images, normalised.
Tensor scoring_batch(const DatasetHandle& data, std::size_t batch);

struct DiversityScores {
  std::vector<double> scratch;
  std::vector<double> distilled;
};
DiversityScores diversity_scores(const ExperimentResult& result, std::size_t batch);

}  // namespace orthokd
