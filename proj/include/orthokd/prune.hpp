#pragma once

#include <map>
#include <string>
#include <vector>

#include "orthokd/autograd.hpp"
#include "orthokd/model.hpp"
#include "orthokd/optim.hpp"

namespace orthokd {

enum class PruneMethod { None, L1Filter, Slimming, Magnitude };

std::string to_string(PruneMethod m);
PruneMethod prune_method_from_string(const std::string& s);

struct PruneSpec {
  PruneMethod method = PruneMethod::None;
  std::vector<double> keep_ratios;  // per group, l1_filter
  double keep_percent = 1.0;        // global fraction, slimming / magnitude
  double lambda_s = 0.0;            // BN-scale L1 penalty used during initial training

  void validate(const ModelGraph& model) const;
};

/// Per conv layer (by layer name): true = output channel kept. Layers that are
/// not channel-prunable are present and all-true.
using ChannelMask = std::map<std::string, std::vector<bool>>;

struct ChannelPruneResult {
  ModelGraph compact;
  ChannelMask mask;
};

/// Indices kept when `keep` of `scores.size()` units survive: ascending
/// (score, index) order is pruned first, so equal scores lose the lower index.
std::vector<bool> keep_top(const std::vector<double>& scores, std::size_t keep);

/// Filters per prunable conv, kept count floor(ratio_g * width), minimum 1.
ChannelPruneResult l1_filter_prune(const ModelGraph& model, const PruneSpec& spec);

/// lambda_s * sum |gamma| over every BN scale (sign subgradient).
Variable slimming_penalty(Tape& tape, const ModelGraph& model, double lambda_s);
double slimming_penalty_value(const ModelGraph& model, double lambda_s);

/// Global |gamma| threshold over the BN layers that follow prunable convs;
/// keeps floor(keep * total) channels with a per-layer floor of one.
ChannelPruneResult slimming_prune(const ModelGraph& model, double keep_percent);
/// |gamma| of the weakest globally kept channel (before survivor repair).
double slimming_threshold(const ModelGraph& model, double keep_percent);

/// Keeps the top ceil(keep * n) conv weights by |w| pooled over all
/// weight-prunable layers; the final linear layer is never masked.
WeightMask magnitude_prune(const ModelGraph& model, double keep_percent);

/// Zeroes the filters (and their BN scale/shift) of every pruned channel.
ModelGraph apply_channel_mask(const ModelGraph& model, const ChannelMask& mask);
/// Physically removes pruned channels and slices downstream consumers.
ModelGraph compact_model(const ModelGraph& model, const ChannelMask& mask);
WeightMask channel_mask_to_weight_mask(const ModelGraph& model, const ChannelMask& mask);

void apply_weight_mask(ModelGraph& model, const WeightMask& mask);
/// True when every masked coordinate is exactly zero.
bool mask_respected(const ModelGraph& model, const WeightMask& mask);

/// Kept / total over the weight-prunable conv parameters.
double remaining_fraction(const ModelGraph& model, const WeightMask& mask);
/// Kept / total channels over channel-prunable layers.
double remaining_channel_fraction(const ChannelMask& mask, const ModelGraph& model);

/// Names of layers that no pruning method of the given kind may touch.
std::vector<std::string> protected_layers(const ModelGraph& model, PruneMethod method);

}  // namespace orthokd
