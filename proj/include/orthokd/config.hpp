#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "orthokd/augment.hpp"
#include "orthokd/data.hpp"
#include "orthokd/distill.hpp"
#include "orthokd/model.hpp"
#include "orthokd/prune.hpp"
#include "orthokd/train.hpp"

namespace orthokd {

/// Flat key-value configuration. Grammar (docs/config.md):
///   line    := blank | comment | key '=' value [comment]
///   comment := '#' to end of line
///   key     := [a-z0-9_.]+   (dotted sections, e.g. distill.alpha)
///   value   := text with surrounding whitespace trimmed; lists are comma-separated
/// Duplicate keys are an error. Reading a key marks it as used so that
/// unknown keys can be reported.
class Config {
 public:
  static Config parse(const std::string& text, const std::string& origin = "<string>");
  static Config load(const std::string& path);

  /// Applies "key=value" overrides (later wins).
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const;

  std::string get_string(const std::string& key, const std::string& fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::int64_t get_int(const std::string& key, std::int64_t fallback) const;
  std::size_t get_size(const std::string& key, std::size_t fallback) const;
  bool get_bool(const std::string& key, bool fallback) const;
  std::vector<double> get_doubles(const std::string& key, std::vector<double> fallback) const;
  std::vector<std::uint64_t> get_seeds(const std::string& key,
                                       std::vector<std::uint64_t> fallback) const;

  /// Keys present in the text that no getter has read.
  std::vector<std::string> unused_keys() const;
  const std::map<std::string, std::string>& entries() const { return values_; }

 private:
  const std::string* find(const std::string& key) const;
  std::map<std::string, std::string> values_;
  mutable std::set<std::string> used_;
  std::string origin_;
};

enum class Schedule { Scratch, Pre, Post, PrePost, SelfDistill };

std::string to_string(Schedule s);
Schedule schedule_from_string(const std::string& s);

struct ExperimentConfig {
  ModelSpec model;
  DatasetSpec data;
  TrainConfig train;     // initial training phase (optimizer, epochs, distill, augment)
  TrainConfig finetune;  // fine-tuning phase after pruning
  PruneSpec prune;
  Schedule schedule = Schedule::Scratch;
  std::vector<std::uint64_t> seeds{1};
  // "auto" trains a scratch teacher with seed + 1; otherwise a checkpoint path.
  std::string teacher_checkpoint = "auto";
  std::string aug_teacher_checkpoint = "auto";
  bool beta_auto = true;  // distill.beta rescaled from the family reference
  std::size_t score_batch = 128;
  std::size_t landscape_grid = 41;
  std::size_t landscape_samples = 512;  // training images in the plotted loss
  std::uint64_t landscape_seed_a = 11;
  std::uint64_t landscape_seed_b = 12;

  /// Cross-field checks; throws ConfigError.
  void validate() const;
  /// Canonical "key = value" text of every setting except the seeds.
  std::string canonical() const;
  std::uint64_t digest() const;
  std::string model_tag() const;  // e.g. "resnet-d1-w8-c10-s16"
};

/// Builds and validates an experiment config; unknown keys are rejected.
ExperimentConfig experiment_config(const Config& cfg);

}  // namespace orthokd
