#include "orthokd/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <stdexcept>

#include "orthokd/errors.hpp"
#include "orthokd/log.hpp"
#include "orthokd/ops.hpp"
#include "orthokd/prune.hpp"

namespace orthokd {

std::size_t TrainConfig::total_steps(std::size_t train_size) const {
  if (steps > 0) return steps;
  return epochs * std::max<std::size_t>(1, train_size / std::max<std::size_t>(1, batch_size));
}

OptimizerConfig TrainConfig::optimizer_for(std::size_t total) const {
  OptimizerConfig o = optim;
  o.decay_schedule.clear();
  for (double f : decay_at) {
    if (f <= 0.0 || f >= 1.0) throw ConfigError("train.decay_at fractions must lie in (0,1)");
    const auto step = static_cast<std::size_t>(std::llround(f * static_cast<double>(total)));
    if (step == 0 || step >= total) continue;
    if (!o.decay_schedule.empty() && o.decay_schedule.back().first >= step) continue;
    o.decay_schedule.emplace_back(step, decay_factor);
  }
  o.validate();
  return o;
}

namespace {

// Epoch-wise shuffled batches that never hand out a batch of one.
class BatchStream {
 public:
  BatchStream(std::size_t n, std::size_t batch, Rng& rng)
      : n_(n), batch_(std::min(batch, n)), rng_(rng), order_(n) {
    if (batch_ < 2) throw ConfigError("training needs at least two samples per batch");
    std::iota(order_.begin(), order_.end(), 0);
    reshuffle();
  }
  std::span<const std::size_t> next(bool& new_epoch) {
    new_epoch = false;
    if (pos_ + batch_ > n_) {
      reshuffle();
      new_epoch = true;
    }
    std::span<const std::size_t> s(order_.data() + pos_, batch_);
    pos_ += batch_;
    return s;
  }

 private:
  void reshuffle() {
    std::shuffle(order_.begin(), order_.end(), rng_);
    pos_ = 0;
  }
  std::size_t n_, batch_;
  Rng& rng_;
  std::vector<std::size_t> order_;
  std::size_t pos_ = 0;
};

void check_mask_shapes(const ModelGraph& model, const WeightMask& mask) {
  for (const auto& [name, keep] : mask) {
    if (!model.has_param(name)) throw ShapeError("mask names unknown parameter '" + name + "'");
    if (keep.size() != model.param(name).numel()) {
      throw ShapeError("mask for '" + name + "' does not match the parameter size");
    }
  }
}

}  // namespace

TrainResult train_model(ModelGraph model, const DatasetHandle& data, const TrainConfig& cfg,
                        const TeacherSet* teachers, const WeightMask* mask) {
  cfg.distill.validate();
  if (cfg.lambda_s < 0.0) throw ConfigError("lambda_s must be non-negative");
  const bool distill = cfg.distill.mode != DistillMode::None;
  const TeacherSet none;
  const TeacherSet& tset = teachers ? *teachers : none;
  if (distill) select_teacher(tset, cfg.regime);  // fail before any work
  if (cfg.augment == AugmentKind::Policy) cfg.policy.validate();
  if (mask) {
    check_mask_shapes(model, *mask);
    apply_weight_mask(model, *mask);
  }

  TrainResult res;
  const std::size_t total = cfg.total_steps(data.train.size());
  Sgd opt(cfg.optimizer_for(std::max<std::size_t>(total, 1)));
  Rng rng(cfg.seed);
  BatchStream stream(data.train.size(), cfg.batch_size, rng);

  if (cfg.distill.mode == DistillMode::Feature) {
    const ModelGraph& t = select_teacher(tset, cfg.regime);
    res.regressor = make_regressor(model.last_feature_channels(), t.last_feature_channels(),
                                   cfg.seed ^ 0x5eedULL);
  }
  std::vector<Variable> params = model.params;
  if (res.regressor) {
    params.push_back(res.regressor->weight);
    params.push_back(res.regressor->bias);
  }
  const bool augment = cfg.regime.student_aug && cfg.augment != AugmentKind::None;
  const AugmentRegime regime{cfg.regime.teacher_aug, augment};

  double epoch_sum = 0.0;
  std::size_t epoch_n = 0;
  for (std::size_t step = 0; step < total; ++step) {
    bool new_epoch = false;
    const auto idx = stream.next(new_epoch);
    if (new_epoch && epoch_n > 0) {
      res.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_n));
      epoch_sum = 0.0;
      epoch_n = 0;
    }
    const Tensor raw = data.gather(data.train, idx);
    const std::vector<int> labels = data.gather_labels(data.train, idx);
    Tensor targets = one_hot(labels, data.classes);

    ImageFn aug_fn = [&](const Tensor& b) {
      if (cfg.augment == AugmentKind::CutMix) {
        CutMixBatch cmb = sample_cutmix(b, labels, rng, cfg.placement);
        targets = mixed_targets(cmb, data.classes);
        return cmb.inputs;
      }
      return apply_policy_batch(b, cfg.policy, rng);
    };
    ImageFn prepare = [&](const Tensor& b) { return data.normalize(b); };

    Tape tape;
    Variable loss;
    if (distill) {
      RegimeStep rs = regime_forward(tset, model, tape, raw, regime, aug_fn, prepare);
      if (cfg.distill.mode == DistillMode::Label) {
        loss = kd_loss(tape, targets, rs.student.logits, rs.teacher_logits, cfg.distill);
      } else {
        loss = fd_loss(tape, targets, rs.student.logits, rs.student.last_feature,
                       rs.teacher_feature, *res.regressor, cfg.distill)
                   .total;
      }
    } else {
      const Tensor x = prepare(augment ? aug_fn(raw) : raw);
      loss = softmax_cross_entropy(tape, forward_train(model, tape, Variable(x)).logits, targets);
    }
    if (cfg.lambda_s > 0.0) loss = add(tape, loss, slimming_penalty(tape, model, cfg.lambda_s));

    const double lv = loss.value()[0];
    if (!std::isfinite(lv)) {
      throw NumericError("non-finite training loss at step " + std::to_string(step));
    }
    epoch_sum += lv;
    ++epoch_n;
    tape.backward(loss);
    opt.step(params, mask);
    for (auto& p : params) p.zero_grad();
    if (mask) {
      if (!mask_respected(model, *mask)) {
        throw std::logic_error("mask violated after step " + std::to_string(step));
      }
      ++res.mask_audits;
    }
  }
  if (epoch_n > 0) res.epoch_loss.push_back(epoch_sum / static_cast<double>(epoch_n));
  res.steps = total;
  res.model = std::move(model);
  return res;
}

TrainResult masked_finetune(ModelGraph model, const WeightMask& mask, std::size_t steps,
                            const DatasetHandle& data, TrainConfig cfg, const TeacherSet* teachers) {
  cfg.steps = steps;
  return train_model(std::move(model), data, cfg, teachers, &mask);
}

double accuracy_of(const Tensor& logits, const std::vector<int>& labels) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  if (labels.size() != n) throw ShapeError("accuracy: one label per logit row required");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * c;
    const auto best = static_cast<int>(std::max_element(row, row + c) - row);
    hit += best == labels[i];
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(n);
}

double evaluate_accuracy(const ModelGraph& model, const DatasetHandle& data,
                         std::size_t batch_size) {
  const std::size_t n = data.test.size();
  std::size_t hit = 0;
  std::vector<std::size_t> idx;
  for (std::size_t start = 0; start < n; start += batch_size) {
    const std::size_t m = std::min(batch_size, n - start);
    idx.resize(m);
    std::iota(idx.begin(), idx.end(), start);
    const Tensor logits = predict_logits(model, data.normalize(data.gather(data.test, idx)));
    hit += static_cast<std::size_t>(
        std::llround(accuracy_of(logits, data.gather_labels(data.test, idx)) * m / 100.0));
  }
  return 100.0 * static_cast<double>(hit) / static_cast<double>(n);
}

}  // namespace orthokd
