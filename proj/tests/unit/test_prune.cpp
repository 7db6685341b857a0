#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "oracles.hpp"
#include "orthokd/checkpoint.hpp"
#include "orthokd/errors.hpp"
#include "orthokd/log.hpp"
#include "orthokd/prune.hpp"
#include "orthokd/train.hpp"

using namespace orthokd;

namespace {

LayerSpec make_layer(LayerKind kind, std::string name, std::size_t in, std::size_t out) {
  LayerSpec l;
  l.kind = kind;
  l.name = std::move(name);
  l.in_channels = in;
  l.out_channels = out;
  l.group = 0;
  return l;
}

// input(c_in) -> conv k x k (prunable) -> bn -> relu -> conv 3x3 (protected) -> bn -> relu -> pool -> fc
ModelGraph tiny_model(std::size_t c_in, std::size_t width, std::size_t kernel, std::uint64_t seed) {
  std::vector<LayerSpec> layers;
  LayerSpec c1 = make_layer(LayerKind::Conv, "c1", c_in, width);
  c1.kernel = kernel;
  c1.padding = kernel / 2;
  c1.channel_prunable = c1.weight_prunable = true;
  layers.push_back(c1);
  layers.push_back(make_layer(LayerKind::BatchNorm, "bn1", width, width));
  layers.push_back(make_layer(LayerKind::Relu, "r1", width, width));
  LayerSpec c2 = make_layer(LayerKind::Conv, "c2", width, 3);
  c2.kernel = 3;
  c2.padding = 1;
  layers.push_back(c2);
  layers.push_back(make_layer(LayerKind::BatchNorm, "bn2", 3, 3));
  layers.push_back(make_layer(LayerKind::Relu, "r2", 3, 3));
  layers.push_back(make_layer(LayerKind::GlobalAvgPool, "pool", 3, 3));
  LayerSpec fc = make_layer(LayerKind::Linear, "fc", 3, 2);
  fc.bias = true;
  fc.group = -1;
  layers.push_back(fc);
  return instantiate("resnet", 2, c_in, 4, std::move(layers), seed);
}

// Non-trivial BN running statistics so eval-mode equivalence is exercised.
void perturb_bn(ModelGraph& m, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.2, 2.0);
  for (auto& [name, st] : m.bn_state) {
    for (auto& v : st.running_mean.values()) v = u(rng) - 1.0;
    for (auto& v : st.running_var.values()) v = u(rng);
    for (auto& v : m.param(name + ".gamma").mutable_value().values()) v = u(rng) - 1.1;
    for (auto& v : m.param(name + ".beta").mutable_value().values()) v = u(rng) - 1.0;
  }
}

PruneSpec l1_spec(std::vector<double> ratios) {
  PruneSpec s;
  s.method = PruneMethod::L1Filter;
  s.keep_ratios = std::move(ratios);
  return s;
}

std::size_t count_true(const std::vector<bool>& v) {
  return static_cast<std::size_t>(std::count(v.begin(), v.end(), true));
}

DatasetHandle tiny_data(std::size_t size = 8) {
  SyntheticSpec s;
  s.classes = 4;
  s.train = 64;
  s.test = 32;
  s.size = size;
  return synthetic_dataset(s);
}

}  // namespace

TEST(KeepTop, LowerIndexPrunedOnTies) {
  EXPECT_EQ(keep_top({4, 3, 2, 1}, 2), (std::vector<bool>{true, true, false, false}));
  EXPECT_EQ(keep_top({1, 1, 1, 1}, 2), (std::vector<bool>{false, false, true, true}));
  EXPECT_EQ(keep_top({2, 1, 2, 1}, 3), (std::vector<bool>{true, false, true, true}));
  EXPECT_EQ(count_true(keep_top({1, 2, 3}, 5)), 3u);
}

TEST(L1Filter, KeepsLargestNormFilters) {
  ModelGraph m = tiny_model(1, 4, 1, 1);
  Tensor& w = m.param("c1.weight").mutable_value();
  w = Tensor({4, 1, 1, 1}, std::vector<double>{-4.0, 3.0, 2.0, -1.0});
  auto r = l1_filter_prune(m, l1_spec({0.5}));
  EXPECT_EQ(r.mask.at("c1"), (std::vector<bool>{true, true, false, false}));
  EXPECT_EQ(r.compact.param("c1.weight").value(), Tensor({2, 1, 1, 1}, std::vector<double>{-4.0, 3.0}));
  EXPECT_EQ(r.compact.param("c2.weight").value().shape(), (Shape{3, 2, 3, 3}));
  EXPECT_EQ(r.compact.param("bn1.gamma").numel(), 2u);
  EXPECT_EQ(r.compact.bn_state.at("bn1").running_mean.numel(), 2u);
}

TEST(L1Filter, KeptNormsDominatePruned) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 3);
  auto r = l1_filter_prune(m, l1_spec({0.4, 0.7, 0.9}));
  for (const auto& l : m.layers) {
    if (!l.channel_prunable) continue;
    const Tensor& w = m.param(l.name + ".weight").value();
    const std::size_t per = w.numel() / l.out_channels;
    double min_kept = 1e300, max_pruned = -1;
    for (std::size_t o = 0; o < l.out_channels; ++o) {
      double s = 0;
      for (std::size_t i = 0; i < per; ++i) s += std::abs(w[o * per + i]);
      if (r.mask.at(l.name)[o]) min_kept = std::min(min_kept, s);
      else max_pruned = std::max(max_pruned, s);
    }
    EXPECT_GE(min_kept, max_pruned) << l.name;
  }
}

TEST(L1Filter, GroupRatiosGiveFloorCounts) {
  ModelGraph m = build_micro_resnet(2, 10, 10, 3);
  const std::vector<double> ratios{0.4, 0.7, 0.9};
  auto r = l1_filter_prune(m, l1_spec(ratios));
  for (const auto& l : m.layers) {
    if (!l.channel_prunable) continue;
    const std::size_t expected =
        static_cast<std::size_t>(std::floor(ratios[static_cast<std::size_t>(l.group)] * l.out_channels + 1e-9));
    EXPECT_EQ(count_true(r.mask.at(l.name)), expected) << l.name;
  }
  // 10 -> 4, 20 -> 14, 40 -> 36
  EXPECT_EQ(count_true(r.mask.at("g0.b0.conv1")), 4u);
  EXPECT_EQ(count_true(r.mask.at("g1.b1.conv1")), 14u);
  EXPECT_EQ(count_true(r.mask.at("g2.b0.conv1")), 36u);
}

TEST(L1Filter, FullKeepIsIdentity) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 3);
  auto r = l1_filter_prune(m, l1_spec({1.0, 1.0, 1.0}));
  std::mt19937_64 rng(1);
  Tensor x = oracle::random_tensor({3, 3, 16, 16}, rng);
  EXPECT_EQ(predict_logits(r.compact, x), predict_logits(m, x));
  EXPECT_EQ(model_digest(r.compact), model_digest(m));
}

TEST(L1Filter, ZeroCountClampedToOneAndWarned) {
  std::vector<std::string> warnings;
  set_log_sink([&](LogLevel lv, const std::string& msg) {
    if (lv == LogLevel::Warning) warnings.push_back(msg);
  });
  ModelGraph m = build_micro_resnet(1, 4, 10, 3);
  auto r = l1_filter_prune(m, l1_spec({0.1, 0.5, 0.5}));
  set_log_sink({});
  EXPECT_EQ(count_true(r.mask.at("g0.b0.conv1")), 1u);
  ASSERT_FALSE(warnings.empty());
  EXPECT_NE(warnings[0].find("g0.b0.conv1"), std::string::npos);
}

TEST(L1Filter, SpecValidation) {
  ModelGraph m = build_micro_resnet(1, 4, 10, 3);
  EXPECT_THROW(l1_filter_prune(m, l1_spec({0.5, 0.5})), ConfigError);
  EXPECT_THROW(l1_filter_prune(m, l1_spec({0.5, 0.0, 0.5})), ConfigError);
  EXPECT_THROW(l1_filter_prune(m, l1_spec({0.5, 1.5, 0.5})), ConfigError);
  PruneSpec s = l1_spec({0.5, 0.5, 0.5});
  s.method = PruneMethod::Slimming;
  EXPECT_THROW(l1_filter_prune(m, s), ConfigError);
  EXPECT_THROW(prune_method_from_string("random"), ConfigError);
  EXPECT_EQ(prune_method_from_string(to_string(PruneMethod::Magnitude)), PruneMethod::Magnitude);
}

TEST(L1Filter, SelectionIsNested) {
  ModelGraph m = build_micro_resnet(1, 16, 10, 7);
  ChannelMask prev;
  for (double r : {0.1, 0.25, 0.5, 0.75, 1.0}) {
    auto cur = l1_filter_prune(m, l1_spec({r, r, r})).mask;
    for (const auto& [layer, keep] : prev)
      for (std::size_t i = 0; i < keep.size(); ++i)
        if (keep[i]) EXPECT_TRUE(cur.at(layer)[i]) << layer << " ratio " << r;
    prev = cur;
  }
}

TEST(ChannelPruning, CompactEqualsMaskedOverManyBatches) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 11);
  perturb_bn(m, 11);
  auto r = l1_filter_prune(m, l1_spec({0.5, 0.5, 0.5}));
  ModelGraph masked = apply_channel_mask(m, r.mask);
  double worst = 0;
  for (int b = 0; b < 100; ++b) {
    std::mt19937_64 rng(b);
    Tensor x = oracle::random_tensor({2, 3, 16, 16}, rng);
    worst = std::max(worst, oracle::max_abs_diff(predict_logits(r.compact, x), predict_logits(masked, x)));
  }
  EXPECT_LE(worst, 1e-5);
}

TEST(ChannelPruning, ProtectedLayersUntouched) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 11);
  auto r = l1_filter_prune(m, l1_spec({0.5, 0.5, 0.5}));
  const auto prot = protected_layers(m, PruneMethod::L1Filter);
  EXPECT_EQ(protected_layers(r.compact, PruneMethod::L1Filter), prot);
  for (const auto& name : prot) {
    if (name == "fc") continue;
    EXPECT_EQ(count_true(r.mask.at(name)), r.mask.at(name).size()) << name;
    EXPECT_EQ(r.compact.layer(name).out_channels, m.layer(name).out_channels);
  }
  EXPECT_EQ(r.compact.param("fc.weight").value(), m.param("fc.weight").value());
}

TEST(ChannelPruning, CompactingProtectedLayerRejected) {
  ModelGraph m = build_micro_resnet(1, 4, 10, 11);
  ChannelMask mask;
  for (const auto& l : m.layers)
    if (l.kind == LayerKind::Conv) mask[l.name] = std::vector<bool>(l.out_channels, true);
  mask["g0.b0.conv2"][0] = false;
  EXPECT_THROW(compact_model(m, mask), ConfigError);
}

TEST(ChannelPruning, RemainingChannelFraction) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 11);
  auto r = l1_filter_prune(m, l1_spec({0.5, 0.25, 0.75}));
  // kept 4 + 4 + 24 of 8 + 16 + 32
  EXPECT_DOUBLE_EQ(remaining_channel_fraction(r.mask, m), 32.0 / 56.0);
}

TEST(Slimming, PenaltyValue) {
  ModelGraph m = tiny_model(1, 2, 1, 1);
  m.param("bn1.gamma").mutable_value() = Tensor::from({1.0, -2.0});
  m.param("bn2.gamma").mutable_value() = Tensor({3}, 0.0);
  EXPECT_DOUBLE_EQ(slimming_penalty_value(m, 0.5), 1.5);
  Tape tape;
  Variable p = slimming_penalty(tape, m, 0.5);
  EXPECT_DOUBLE_EQ(p.value()[0], 1.5);
  tape.backward(p);
  EXPECT_EQ(m.param("bn1.gamma").grad(), Tensor::from({0.5, -0.5}));
  EXPECT_EQ(m.param("bn2.gamma").grad(), Tensor({3}, 0.0));
  EXPECT_DOUBLE_EQ(slimming_penalty_value(m, 0.0), 0.0);
  Tape t2;
  EXPECT_THROW(slimming_penalty(t2, m, -1.0), ConfigError);
}

TEST(Slimming, GlobalQuantile) {
  ModelGraph m = tiny_model(1, 4, 1, 1);
  m.param("bn1.gamma").mutable_value() = Tensor::from({0.5, 0.1, 0.4, 0.01});
  auto r = slimming_prune(m, 0.5);
  EXPECT_EQ(r.mask.at("c1"), (std::vector<bool>{true, false, true, false}));
  EXPECT_DOUBLE_EQ(slimming_threshold(m, 0.5), 0.4);
  EXPECT_EQ(r.compact.param("bn1.gamma").value(), Tensor::from({0.5, 0.4}));
}

TEST(Slimming, FullKeepUnchanged) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 3);
  auto r = slimming_prune(m, 1.0);
  std::mt19937_64 rng(1);
  Tensor x = oracle::random_tensor({2, 3, 16, 16}, rng);
  EXPECT_EQ(predict_logits(r.compact, x), predict_logits(m, x));
  EXPECT_THROW(slimming_prune(m, 0.0), ConfigError);
}

TEST(Slimming, EmptyLayerKeepsOneChannel) {
  ModelGraph m = build_micro_resnet(1, 4, 10, 3);
  // group 0 scales are tiny, so the global threshold empties that layer
  m.param("g0.b0.bn1.gamma").mutable_value() = Tensor::from({1e-4, 3e-4, 2e-4, 1e-5});
  std::vector<std::string> warnings;
  set_log_sink([&](LogLevel, const std::string& msg) { warnings.push_back(msg); });
  auto r = slimming_prune(m, 0.5);
  set_log_sink({});
  EXPECT_EQ(r.mask.at("g0.b0.conv1"), (std::vector<bool>{false, true, false, false}));
  EXPECT_FALSE(warnings.empty());
}

TEST(Slimming, ThirtyPercentCount) {
  ModelGraph m = build_micro_vgg(10, 10, 4);
  perturb_bn(m, 4);
  std::size_t total = 0;
  for (const auto& l : m.layers)
    if (l.channel_prunable) total += l.out_channels;
  auto r = slimming_prune(m, 0.30);
  std::size_t kept = 0, layers = 0;
  for (const auto& l : m.layers)
    if (l.channel_prunable) {
      kept += count_true(r.mask.at(l.name));
      ++layers;
    }
  const auto target = static_cast<std::size_t>(std::floor(0.30 * total));
  EXPECT_GE(kept, target);
  EXPECT_LE(kept, target + layers);
}

TEST(Magnitude, KeepsLargestWeights) {
  ModelGraph m = tiny_model(1, 4, 1, 1);
  m.param("c1.weight").mutable_value() = Tensor({4, 1, 1, 1}, std::vector<double>{-3.0, 0.5, 2.0, -0.1});
  m.layers[3].weight_prunable = false;  // restrict the pool to c1
  WeightMask mask = magnitude_prune(m, 0.5);
  EXPECT_EQ(mask.at("c1.weight"), (std::vector<bool>{true, false, true, false}));
  EXPECT_EQ(mask.count("fc.weight"), 0u);
}

TEST(Magnitude, FullKeepAllTrue) {
  ModelGraph m = build_micro_resnet(1, 4, 10, 3);
  WeightMask mask = magnitude_prune(m, 1.0);
  for (const auto& [name, keep] : mask) EXPECT_EQ(count_true(keep), keep.size()) << name;
  EXPECT_DOUBLE_EQ(remaining_fraction(m, mask), 1.0);
}

TEST(Magnitude, FortyPercentRemaining) {
  ModelGraph m = build_micro_resnet(1, 8, 10, 3);
  WeightMask mask = magnitude_prune(m, 0.40);
  std::size_t n = 0, kept = 0;
  for (const auto& [name, keep] : mask) {
    n += keep.size();
    kept += count_true(keep);
  }
  EXPECT_EQ(kept, static_cast<std::size_t>(std::ceil(0.40 * n - 1e-9)));
  EXPECT_NEAR(remaining_fraction(m, mask), 0.40, 1.0 / n);
  EXPECT_DOUBLE_EQ(remaining_fraction(m, mask), static_cast<double>(kept) / n);
  apply_weight_mask(m, mask);
  EXPECT_TRUE(mask_respected(m, mask));
  for (const auto& name : protected_layers(m, PruneMethod::Magnitude)) {
    EXPECT_EQ(mask.count(name + ".weight"), 0u) << name;
  }
}

TEST(MaskedFinetune, MaskedWeightsStayZero) {
  DatasetHandle data = tiny_data();
  ModelGraph m = build_micro_resnet(1, 4, 4, 1, 3, 8);
  WeightMask mask = magnitude_prune(m, 0.3);
  apply_weight_mask(m, mask);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.optim.learning_rate = 0.05;
  cfg.seed = 2;
  TrainResult r = masked_finetune(m, mask, 100, data, cfg);
  EXPECT_EQ(r.steps, 100u);
  EXPECT_EQ(r.mask_audits, 100u);
  double worst = 0;
  for (const auto& [name, keep] : mask) {
    const Tensor& w = r.model.param(name).value();
    for (std::size_t i = 0; i < keep.size(); ++i)
      if (!keep[i]) worst = std::max(worst, std::abs(w[i]));
  }
  EXPECT_EQ(worst, 0.0);
}

TEST(MaskedFinetune, AllTrueMaskMatchesPlainTraining) {
  DatasetHandle data = tiny_data();
  ModelGraph m = build_micro_resnet(1, 4, 4, 1, 3, 8);
  WeightMask mask = magnitude_prune(m, 1.0);
  TrainConfig cfg;
  cfg.batch_size = 16;
  cfg.steps = 20;
  cfg.seed = 3;
  TrainResult a = masked_finetune(m, mask, 20, data, cfg);
  TrainResult b = train_model(m, data, cfg);
  for (std::size_t i = 0; i < a.model.params.size(); ++i)
    EXPECT_EQ(a.model.params[i].value(), b.model.params[i].value()) << a.model.params[i].name();
}

TEST(MaskedFinetune, MaskShapeDriftRejected) {
  DatasetHandle data = tiny_data();
  ModelGraph m = build_micro_resnet(1, 4, 4, 1, 3, 8);
  WeightMask mask{{"g0.b0.conv1.weight", std::vector<bool>(3, true)}};
  TrainConfig cfg;
  cfg.batch_size = 16;
  EXPECT_THROW(masked_finetune(m, mask, 5, data, cfg), std::exception);
}
