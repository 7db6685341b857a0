#include "orthokd/prune.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "orthokd/errors.hpp"
#include "orthokd/log.hpp"
#include "orthokd/ops.hpp"

namespace orthokd {

namespace {

// Guards floor/ceil against representation error in products such as 0.7 * 10.
constexpr double kRoundSlack = 1e-9;

std::size_t floor_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n) + kRoundSlack));
}

std::size_t ceil_count(double ratio, std::size_t n) {
  return static_cast<std::size_t>(std::ceil(ratio * static_cast<double>(n) - kRoundSlack));
}

// Index of the BN directly following conv `i`, and of the next conv/linear consuming it.
struct Neighbours {
  std::ptrdiff_t bn = -1;
  std::ptrdiff_t consumer = -1;
};

Neighbours neighbours_of(const std::vector<LayerSpec>& layers, std::size_t i) {
  Neighbours nb;
  for (std::size_t j = i + 1; j < layers.size(); ++j) {
    const auto k = layers[j].kind;
    if (k == LayerKind::BatchNorm && nb.bn < 0) nb.bn = static_cast<std::ptrdiff_t>(j);
    if (k == LayerKind::Conv || k == LayerKind::Linear) {
      nb.consumer = static_cast<std::ptrdiff_t>(j);
      break;
    }
    if (k == LayerKind::AddShortcut) {
      throw std::logic_error("channel-prunable layer '" + layers[i].name +
                             "' feeds a residual addition");
    }
  }
  return nb;
}

double filter_l1(const Tensor& w, std::size_t o) {
  const std::size_t per = w.numel() / w.dim(0);
  double s = 0.0;
  for (std::size_t j = 0; j < per; ++j) s += std::abs(w[o * per + j]);
  return s;
}

Tensor slice_axis0(const Tensor& t, const std::vector<bool>& keep) {
  const std::size_t per = t.numel() / t.dim(0);
  Shape s = t.shape();
  s[0] = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  Tensor out(s);
  std::size_t r = 0;
  for (std::size_t o = 0; o < keep.size(); ++o) {
    if (!keep[o]) continue;
    std::copy(t.data() + o * per, t.data() + (o + 1) * per, out.data() + r * per);
    ++r;
  }
  return out;
}

Tensor slice_axis1(const Tensor& t, const std::vector<bool>& keep) {
  const std::size_t rows = t.dim(0), cols = t.dim(1);
  const std::size_t inner = t.numel() / (rows * cols);
  Shape s = t.shape();
  s[1] = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
  Tensor out(s);
  double* dst = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c) {
      if (!keep[c]) continue;
      const double* src = t.data() + (r * cols + c) * inner;
      dst = std::copy(src, src + inner, dst);
    }
  return out;
}

ChannelMask full_channel_mask(const ModelGraph& model) {
  ChannelMask mask;
  for (const auto& l : model.layers)
    if (l.kind == LayerKind::Conv) mask[l.name] = std::vector<bool>(l.out_channels, true);
  return mask;
}

void warn_floor(const std::string& layer) {
  log_warning("pruning would remove every channel of '" + layer + "'; one channel retained");
}

}  // namespace

std::string to_string(PruneMethod m) {
  switch (m) {
    case PruneMethod::None:
      return "none";
    case PruneMethod::L1Filter:
      return "l1_filter";
    case PruneMethod::Slimming:
      return "slimming";
    case PruneMethod::Magnitude:
      return "magnitude";
  }
  return "none";
}

PruneMethod prune_method_from_string(const std::string& s) {
  if (s == "none") return PruneMethod::None;
  if (s == "l1_filter") return PruneMethod::L1Filter;
  if (s == "slimming") return PruneMethod::Slimming;
  if (s == "magnitude") return PruneMethod::Magnitude;
  throw ConfigError("prune.method must be none, l1_filter, slimming or magnitude (got '" + s + "')");
}

void PruneSpec::validate(const ModelGraph& model) const {
  if (lambda_s < 0.0) throw ConfigError("prune.lambda_s must be non-negative");
  switch (method) {
    case PruneMethod::None:
      return;
    case PruneMethod::L1Filter:
      if (keep_ratios.size() != model.group_count()) {
        throw ConfigError("prune.keep_ratios has " + std::to_string(keep_ratios.size()) +
                          " entries, model has " + std::to_string(model.group_count()) + " groups");
      }
      for (double r : keep_ratios)
        if (!(r > 0.0) || r > 1.0) throw ConfigError("prune.keep_ratios entries must lie in (0,1]");
      return;
    case PruneMethod::Slimming:
    case PruneMethod::Magnitude:
      if (!(keep_percent > 0.0) || keep_percent > 1.0) {
        throw ConfigError("prune.keep_percent must lie in (0,1]");
      }
      return;
  }
}

std::vector<bool> keep_top(const std::vector<double>& scores, std::size_t keep) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  std::vector<bool> kept(scores.size(), true);
  const std::size_t drop = scores.size() - std::min(keep, scores.size());
  for (std::size_t i = 0; i < drop; ++i) kept[order[i]] = false;
  return kept;
}

ChannelPruneResult l1_filter_prune(const ModelGraph& model, const PruneSpec& spec) {
  if (spec.method != PruneMethod::L1Filter) throw ConfigError("l1_filter_prune: spec method mismatch");
  spec.validate(model);
  ChannelMask mask = full_channel_mask(model);
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::Conv || !l.channel_prunable) continue;
    const double ratio = spec.keep_ratios.at(static_cast<std::size_t>(l.group));
    std::size_t keep = floor_count(ratio, l.out_channels);
    if (keep == 0) {
      warn_floor(l.name);
      keep = 1;
    }
    const Tensor& w = model.param(l.name + ".weight").value();
    std::vector<double> norms(l.out_channels);
    for (std::size_t o = 0; o < l.out_channels; ++o) norms[o] = filter_l1(w, o);
    mask[l.name] = keep_top(norms, keep);
  }
  return {compact_model(model, mask), mask};
}

Variable slimming_penalty(Tape& tape, const ModelGraph& model, double lambda_s) {
  if (lambda_s < 0.0) throw ConfigError("slimming_penalty: lambda_s must be non-negative");
  Variable total;
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::BatchNorm) continue;
    Variable term = abs_sum(tape, model.param(l.name + ".gamma"));
    total = total.defined() ? add(tape, total, term) : term;
  }
  if (!total.defined()) return Variable(Tensor::scalar(0.0));
  return scale(tape, total, lambda_s);
}

double slimming_penalty_value(const ModelGraph& model, double lambda_s) {
  double s = 0.0;
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::BatchNorm) continue;
    for (double g : model.param(l.name + ".gamma").value().values()) s += std::abs(g);
  }
  return lambda_s * s;
}

namespace {

struct PooledScales {
  std::vector<double> scores;
  std::vector<std::pair<std::string, std::size_t>> owner;  // (conv layer, channel)
};

PooledScales pool_prunable_scales(const ModelGraph& model) {
  PooledScales p;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind != LayerKind::Conv || !l.channel_prunable) continue;
    const auto nb = neighbours_of(model.layers, i);
    if (nb.bn < 0) throw std::logic_error("prunable conv '" + l.name + "' has no batch-norm");
    const Tensor& g = model.param(model.layers[static_cast<std::size_t>(nb.bn)].name + ".gamma").value();
    for (std::size_t c = 0; c < l.out_channels; ++c) {
      p.scores.push_back(std::abs(g[c]));
      p.owner.emplace_back(l.name, c);
    }
  }
  return p;
}

}  // namespace

double slimming_threshold(const ModelGraph& model, double keep_percent) {
  const auto pooled = pool_prunable_scales(model);
  if (pooled.scores.empty()) return 0.0;
  const std::size_t keep = std::max<std::size_t>(1, floor_count(keep_percent, pooled.scores.size()));
  const auto kept = keep_top(pooled.scores, keep);
  double th = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < kept.size(); ++i)
    if (kept[i]) th = std::min(th, pooled.scores[i]);
  return th;
}

ChannelPruneResult slimming_prune(const ModelGraph& model, double keep_percent) {
  if (!(keep_percent > 0.0) || keep_percent > 1.0) {
    throw ConfigError("slimming_prune: keep_percent must lie in (0,1]");
  }
  const auto pooled = pool_prunable_scales(model);
  ChannelMask mask = full_channel_mask(model);
  if (pooled.scores.empty()) return {model, mask};
  const std::size_t keep = std::max<std::size_t>(1, floor_count(keep_percent, pooled.scores.size()));
  const auto kept = keep_top(pooled.scores, keep);
  for (std::size_t i = 0; i < kept.size(); ++i) {
    const auto& [layer, ch] = pooled.owner[i];
    mask[layer][ch] = kept[i];
  }
  // Per-layer floor: a layer with no survivors keeps its largest-|gamma| channel.
  for (auto& [layer, keep_flags] : mask) {
    if (std::find(keep_flags.begin(), keep_flags.end(), true) != keep_flags.end()) continue;
    std::size_t best = 0;
    double best_score = -1.0;
    for (std::size_t i = 0; i < pooled.owner.size(); ++i) {
      if (pooled.owner[i].first != layer) continue;
      if (pooled.scores[i] > best_score) {
        best_score = pooled.scores[i];
        best = pooled.owner[i].second;
      }
    }
    keep_flags[best] = true;
    warn_floor(layer);
  }
  return {compact_model(model, mask), mask};
}

WeightMask magnitude_prune(const ModelGraph& model, double keep_percent) {
  if (!(keep_percent > 0.0) || keep_percent > 1.0) {
    throw ConfigError("magnitude_prune: keep_percent must lie in (0,1]");
  }
  std::vector<double> scores;
  std::vector<std::string> names;
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::Conv || !l.weight_prunable) continue;
    names.push_back(l.name + ".weight");
    for (double w : model.param(names.back()).value().values()) scores.push_back(std::abs(w));
  }
  const auto kept = keep_top(scores, ceil_count(keep_percent, scores.size()));
  WeightMask mask;
  std::size_t offset = 0;
  for (const auto& name : names) {
    const std::size_t n = model.param(name).numel();
    mask[name] = std::vector<bool>(kept.begin() + static_cast<std::ptrdiff_t>(offset),
                                   kept.begin() + static_cast<std::ptrdiff_t>(offset + n));
    offset += n;
  }
  return mask;
}

ModelGraph apply_channel_mask(const ModelGraph& model, const ChannelMask& mask) {
  ModelGraph out = model;
  apply_weight_mask(out, channel_mask_to_weight_mask(model, mask));
  return out;
}

WeightMask channel_mask_to_weight_mask(const ModelGraph& model, const ChannelMask& mask) {
  WeightMask wm;
  for (std::size_t i = 0; i < model.layers.size(); ++i) {
    const auto& l = model.layers[i];
    if (l.kind != LayerKind::Conv) continue;
    auto it = mask.find(l.name);
    if (it == mask.end()) continue;
    const auto& keep = it->second;
    if (keep.size() != l.out_channels) {
      throw ShapeError("channel mask for '" + l.name + "' has " + std::to_string(keep.size()) +
                       " entries, layer has " + std::to_string(l.out_channels) + " channels");
    }
    if (std::all_of(keep.begin(), keep.end(), [](bool b) { return b; })) continue;
    const std::size_t per = l.in_channels * l.kernel * l.kernel;
    std::vector<bool> wk(l.out_channels * per);
    for (std::size_t o = 0; o < l.out_channels; ++o)
      std::fill(wk.begin() + static_cast<std::ptrdiff_t>(o * per),
                wk.begin() + static_cast<std::ptrdiff_t>((o + 1) * per), static_cast<bool>(keep[o]));
    wm[l.name + ".weight"] = std::move(wk);
    if (l.bias) wm[l.name + ".bias"] = keep;
    const auto nb = neighbours_of(model.layers, i);
    if (nb.bn >= 0) {
      const auto& bn = model.layers[static_cast<std::size_t>(nb.bn)].name;
      wm[bn + ".gamma"] = keep;
      wm[bn + ".beta"] = keep;
    }
  }
  return wm;
}

ModelGraph compact_model(const ModelGraph& model, const ChannelMask& mask) {
  ModelGraph out = model;
  for (std::size_t i = 0; i < out.layers.size(); ++i) {
    LayerSpec& l = out.layers[i];
    if (l.kind != LayerKind::Conv) continue;
    auto it = mask.find(l.name);
    if (it == mask.end()) continue;
    const auto& keep = it->second;
    if (keep.size() != l.out_channels) {
      throw ShapeError("channel mask for '" + l.name + "' has " + std::to_string(keep.size()) +
                       " entries, layer has " + std::to_string(l.out_channels) + " channels");
    }
    const auto kept = static_cast<std::size_t>(std::count(keep.begin(), keep.end(), true));
    if (kept == l.out_channels) continue;
    if (!l.channel_prunable) {
      throw ConfigError("channel mask removes channels of protected layer '" + l.name + "'");
    }
    if (kept == 0) throw ConfigError("channel mask removes every channel of '" + l.name + "'");

    auto& w = out.param(l.name + ".weight");
    w.mutable_value() = slice_axis0(w.value(), keep);
    if (l.bias) {
      auto& b = out.param(l.name + ".bias");
      b.mutable_value() = slice_axis0(b.value(), keep);
    }
    l.out_channels = kept;

    const auto nb = neighbours_of(out.layers, i);
    if (nb.bn >= 0) {
      LayerSpec& bn = out.layers[static_cast<std::size_t>(nb.bn)];
      for (const char* suffix : {".gamma", ".beta"}) {
        auto& p = out.param(bn.name + suffix);
        p.mutable_value() = slice_axis0(p.value(), keep);
      }
      auto& st = out.bn_state.at(bn.name);
      st.running_mean = slice_axis0(st.running_mean, keep);
      st.running_var = slice_axis0(st.running_var, keep);
      bn.in_channels = bn.out_channels = kept;
    }
    for (std::size_t j = i + 1; j < static_cast<std::size_t>(nb.consumer); ++j) {
      LayerSpec& mid = out.layers[j];
      if (mid.kind == LayerKind::Relu || mid.kind == LayerKind::MaxPool ||
          mid.kind == LayerKind::GlobalAvgPool) {
        mid.in_channels = mid.out_channels = kept;
      }
    }
    if (nb.consumer >= 0) {
      LayerSpec& cons = out.layers[static_cast<std::size_t>(nb.consumer)];
      auto& cw = out.param(cons.name + ".weight");
      cw.mutable_value() = slice_axis1(cw.value(), keep);
      cons.in_channels = kept;
    }
  }
  // Gradients of the source model do not carry over to a resized model.
  out.zero_grad();
  out.validate();
  return out;
}

void apply_weight_mask(ModelGraph& model, const WeightMask& mask) {
  for (const auto& [name, keep] : mask) {
    Tensor& v = model.param(name).mutable_value();
    if (keep.size() != v.numel()) {
      throw ShapeError("mask for '" + name + "' has " + std::to_string(keep.size()) +
                       " entries, parameter has " + std::to_string(v.numel()));
    }
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) v[i] = 0.0;
  }
}

bool mask_respected(const ModelGraph& model, const WeightMask& mask) {
  for (const auto& [name, keep] : mask) {
    const Tensor& v = model.param(name).value();
    if (keep.size() != v.numel()) return false;
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i] && v[i] != 0.0) return false;
  }
  return true;
}

double remaining_fraction(const ModelGraph& model, const WeightMask& mask) {
  std::size_t total = 0, kept = 0;
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::Conv || !l.weight_prunable) continue;
    const std::string name = l.name + ".weight";
    const std::size_t n = model.param(name).numel();
    total += n;
    auto it = mask.find(name);
    kept += it == mask.end() ? n
                             : static_cast<std::size_t>(
                                   std::count(it->second.begin(), it->second.end(), true));
  }
  return total == 0 ? 1.0 : static_cast<double>(kept) / static_cast<double>(total);
}

double remaining_channel_fraction(const ChannelMask& mask, const ModelGraph& model) {
  std::size_t total = 0, kept = 0;
  for (const auto& l : model.layers) {
    if (l.kind != LayerKind::Conv || !l.channel_prunable) continue;
    total += l.out_channels;
    auto it = mask.find(l.name);
    kept += it == mask.end() ? l.out_channels
                             : static_cast<std::size_t>(
                                   std::count(it->second.begin(), it->second.end(), true));
  }
  return total == 0 ? 1.0 : static_cast<double>(kept) / static_cast<double>(total);
}

std::vector<std::string> protected_layers(const ModelGraph& model, PruneMethod method) {
  std::vector<std::string> out;
  for (const auto& l : model.layers) {
    const bool param_layer = l.kind == LayerKind::Conv || l.kind == LayerKind::Linear;
    if (!param_layer) continue;
    const bool prunable = method == PruneMethod::Magnitude
                              ? (l.kind == LayerKind::Conv && l.weight_prunable)
                              : (l.kind == LayerKind::Conv && l.channel_prunable);
    if (!prunable) out.push_back(l.name);
  }
  return out;
}

}  // namespace orthokd
