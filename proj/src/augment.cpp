#include "orthokd/augment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "orthokd/distill.hpp"
#include "orthokd/errors.hpp"

namespace orthokd {

std::string to_string(AugmentKind kind) {
  switch (kind) {
    case AugmentKind::None:
      return "none";
    case AugmentKind::CutMix:
      return "cutmix";
    case AugmentKind::Policy:
      return "policy";
  }
  return "none";
}

AugmentKind augment_kind_from_string(const std::string& s) {
  if (s == "none") return AugmentKind::None;
  if (s == "cutmix") return AugmentKind::CutMix;
  if (s == "policy") return AugmentKind::Policy;
  throw ConfigError("augment.kind must be none, cutmix or policy (got '" + s + "')");
}

CutBox sample_box(std::size_t height, std::size_t width, double lambda, Rng& rng,
                  BoxPlacement placement) {
  if (lambda < 0.0 || lambda > 1.0) throw ConfigError("sample_box: lambda must lie in [0,1]");
  const double cut = std::sqrt(1.0 - lambda);
  const auto w = std::min(width, static_cast<std::size_t>(std::lround(cut * static_cast<double>(width))));
  const auto h = std::min(height, static_cast<std::size_t>(std::lround(cut * static_cast<double>(height))));
  CutBox box;
  if (placement == BoxPlacement::Contained) {
    box.w = w;
    box.h = h;
    box.x = std::uniform_int_distribution<std::size_t>(0, width - w)(rng);
    box.y = std::uniform_int_distribution<std::size_t>(0, height - h)(rng);
    return box;
  }
  const auto cx = static_cast<long>(std::uniform_int_distribution<std::size_t>(0, width - 1)(rng));
  const auto cy = static_cast<long>(std::uniform_int_distribution<std::size_t>(0, height - 1)(rng));
  const long x0 = std::clamp(cx - static_cast<long>(w / 2), 0L, static_cast<long>(width));
  const long x1 = std::clamp(cx + static_cast<long>(w - w / 2), 0L, static_cast<long>(width));
  const long y0 = std::clamp(cy - static_cast<long>(h / 2), 0L, static_cast<long>(height));
  const long y1 = std::clamp(cy + static_cast<long>(h - h / 2), 0L, static_cast<long>(height));
  box.x = static_cast<std::size_t>(x0);
  box.y = static_cast<std::size_t>(y0);
  box.w = static_cast<std::size_t>(x1 - x0);
  box.h = static_cast<std::size_t>(y1 - y0);
  return box;
}

double adjusted_lambda(const CutBox& box, std::size_t height, std::size_t width) {
  return 1.0 - static_cast<double>(box.area()) / static_cast<double>(height * width);
}

CutMixBatch cutmix_with(const Tensor& batch, const std::vector<int>& labels, const CutBox& box,
                        std::vector<std::size_t> partner) {
  if (batch.rank() != 4) throw ShapeError("cutmix: batch must be NCHW");
  const std::size_t n = batch.dim(0), c = batch.dim(1), h = batch.dim(2), w = batch.dim(3);
  if (labels.size() != n || partner.size() != n) {
    throw ShapeError("cutmix: labels/partners must have one entry per sample");
  }
  if (box.x + box.w > w || box.y + box.h > h) throw ShapeError("cutmix: box exceeds image bounds");
  CutMixBatch out;
  out.inputs = batch;
  out.labels_a = labels;
  out.labels_b.resize(n);
  out.box = box;
  out.lambda = adjusted_lambda(box, h, w);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t j = partner[i];
    if (j >= n) throw ShapeError("cutmix: partner index out of range");
    out.labels_b[i] = labels[j];
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t r = box.y; r < box.y + box.h; ++r)
        for (std::size_t col = box.x; col < box.x + box.w; ++col)
          out.inputs.at(i, ch, r, col) = batch.at(j, ch, r, col);
  }
  out.partner = std::move(partner);
  return out;
}

CutMixBatch sample_cutmix(const Tensor& batch, const std::vector<int>& labels, Rng& rng,
                          BoxPlacement placement, double beta_a) {
  if (batch.rank() != 4 || batch.dim(0) < 2) throw ShapeError("cutmix: batch size must be >= 2");
  if (!(beta_a > 0.0)) throw ConfigError("cutmix: beta parameter must be positive");
  double lambda;
  if (beta_a == 1.0) {
    lambda = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  } else {
    std::gamma_distribution<double> g(beta_a, 1.0);
    const double a = g(rng), b = g(rng);
    lambda = a / (a + b);
  }
  std::vector<std::size_t> partner(batch.dim(0));
  std::iota(partner.begin(), partner.end(), 0);
  std::shuffle(partner.begin(), partner.end(), rng);
  const CutBox box = sample_box(batch.dim(2), batch.dim(3), lambda, rng, placement);
  return cutmix_with(batch, labels, box, std::move(partner));
}

Tensor mixed_targets(const CutMixBatch& cmb, std::size_t classes) {
  Tensor a = one_hot(cmb.labels_a, classes);
  const Tensor b = one_hot(cmb.labels_b, classes);
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] = cmb.lambda * a[i] + (1.0 - cmb.lambda) * b[i];
  return a;
}

Variable cutmix_loss(Tape& tape, const Variable& logits, const CutMixBatch& cmb,
                     std::size_t classes, const TargetLoss& loss) {
  Variable la = loss(tape, logits, one_hot(cmb.labels_a, classes));
  if (cmb.lambda == 1.0) return la;
  Variable lb = loss(tape, logits, one_hot(cmb.labels_b, classes));
  return add(tape, scale(tape, la, cmb.lambda), scale(tape, lb, 1.0 - cmb.lambda));
}

// ------------------------------------------------------- random policy

namespace {

const std::pair<PolicyOp, const char*> kOpNames[] = {
    {PolicyOp::Rotate, "rotate"},         {PolicyOp::Translate, "translate"},
    {PolicyOp::Shear, "shear"},           {PolicyOp::Flip, "flip"},
    {PolicyOp::Brightness, "brightness"}, {PolicyOp::Contrast, "contrast"},
    {PolicyOp::Erase, "erase"},
};

// Bilinear sample of one channel plane; neighbours outside the image read `fill`.
double bilinear(const double* plane, std::size_t h, std::size_t w, double r, double c, double fill) {
  const double r0f = std::floor(r), c0f = std::floor(c);
  const double fr = r - r0f, fc = c - c0f;
  auto px = [&](double rr, double cc) {
    if (rr < 0 || cc < 0 || rr > static_cast<double>(h - 1) || cc > static_cast<double>(w - 1)) return fill;
    return plane[static_cast<std::size_t>(rr) * w + static_cast<std::size_t>(cc)];
  };
  double v = (1 - fr) * (1 - fc) * px(r0f, c0f);
  if (fc != 0.0) v += (1 - fr) * fc * px(r0f, c0f + 1);
  if (fr != 0.0) v += fr * (1 - fc) * px(r0f + 1, c0f);
  if (fr != 0.0 && fc != 0.0) v += fr * fc * px(r0f + 1, c0f + 1);
  return v;
}

// out(r, c) = in(src(r, c)) with `src` given relative to the image centre.
template <typename Map>
Tensor warp(const Tensor& image, double fill, Map src) {
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  const double cr = (static_cast<double>(h) - 1) / 2, cc = (static_cast<double>(w) - 1) / 2;
  Tensor out(image.shape());
  for (std::size_t k = 0; k < ch; ++k) {
    const double* plane = image.data() + k * h * w;
    for (std::size_t r = 0; r < h; ++r)
      for (std::size_t c = 0; c < w; ++c) {
        const auto [sr, sc] = src(static_cast<double>(r) - cr, static_cast<double>(c) - cc);
        out.data()[(k * h + r) * w + c] = bilinear(plane, h, w, sr + cr, sc + cc, fill);
      }
  }
  return out;
}

}  // namespace

std::string to_string(PolicyOp op) {
  for (const auto& [o, name] : kOpNames)
    if (o == op) return name;
  return "rotate";
}

PolicyOp policy_op_from_string(const std::string& s) {
  for (const auto& [o, name] : kOpNames)
    if (s == name) return o;
  throw ConfigError("unknown augmentation op '" + s + "'");
}

AugmentPolicy AugmentPolicy::standard() {
  AugmentPolicy p;
  p.ops = {{PolicyOp::Rotate, -15.0, 15.0},    {PolicyOp::Translate, -3.0, 3.0},
           {PolicyOp::Shear, -0.1, 0.1},       {PolicyOp::Flip, 0.0, 1.0},
           {PolicyOp::Brightness, -0.2, 0.2},  {PolicyOp::Contrast, -0.2, 0.2},
           {PolicyOp::Erase, 0.0, 0.25}};
  return p;
}

void AugmentPolicy::validate() const {
  if (ops.empty()) throw ConfigError("augmentation policy has no ops");
  if (fill < 0.0 || fill > 1.0) throw ConfigError("augmentation fill must lie in [0,1]");
  for (const auto& r : ops) {
    if (r.lo > r.hi) throw ConfigError("augmentation op '" + to_string(r.op) + "' has lo > hi");
    if (r.op == PolicyOp::Erase && (r.lo < 0.0 || r.hi > 1.0)) {
      throw ConfigError("erase area fraction must lie in [0,1]");
    }
  }
}

AugmentPolicy parse_policy(const std::string& text) {
  AugmentPolicy p;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string word;
    if (!(ls >> word)) continue;
    const std::string where = "policy line " + std::to_string(lineno);
    if (word == "ops_per_sample") {
      if (!(ls >> p.ops_per_sample)) throw ConfigError(where + ": expected a count");
      continue;
    }
    if (word == "fill") {
      if (!(ls >> p.fill)) throw ConfigError(where + ": expected a value");
      continue;
    }
    OpRange r{policy_op_from_string(word), 0.0, 0.0};
    if (!(ls >> r.lo >> r.hi)) throw ConfigError(where + ": expected 'op lo hi'");
    p.ops.push_back(r);
  }
  p.validate();
  return p;
}

AugmentPolicy load_policy_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open policy file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_policy(ss.str());
}

Tensor apply_op(const Tensor& image, PolicyOp op, double m, double m2, Rng& rng, double fill) {
  if (image.rank() != 3) throw ShapeError("apply_op: image must be [C, H, W]");
  const std::size_t ch = image.dim(0), h = image.dim(1), w = image.dim(2);
  switch (op) {
    case PolicyOp::Rotate: {
      const double a = m * std::numbers::pi / 180.0, ca = std::cos(a), sa = std::sin(a);
      return warp(image, fill, [&](double r, double c) {
        return std::pair{ca * r - sa * c, sa * r + ca * c};
      });
    }
    case PolicyOp::Translate:
      return warp(image, fill, [&](double r, double c) { return std::pair{r - m2, c - m}; });
    case PolicyOp::Shear:
      return warp(image, fill, [&](double r, double c) { return std::pair{r, c - m * r}; });
    case PolicyOp::Flip: {
      if (m < 0.5) return image;
      Tensor out(image.shape());
      for (std::size_t k = 0; k < ch; ++k)
        for (std::size_t r = 0; r < h; ++r)
          for (std::size_t c = 0; c < w; ++c)
            out.data()[(k * h + r) * w + c] = image.data()[(k * h + r) * w + (w - 1 - c)];
      return out;
    }
    case PolicyOp::Brightness: {
      Tensor out = image;
      for (auto& v : out.values()) v += m;
      return out;
    }
    case PolicyOp::Contrast: {
      Tensor out = image;
      const double mean = image.sum() / static_cast<double>(image.numel());
      for (auto& v : out.values()) v = v * (1.0 + m) - mean * m;
      return out;
    }
    case PolicyOp::Erase: {
      const double side = std::sqrt(std::clamp(m, 0.0, 1.0));
      const auto eh = std::min(h, static_cast<std::size_t>(std::lround(side * static_cast<double>(h))));
      const auto ew = std::min(w, static_cast<std::size_t>(std::lround(side * static_cast<double>(w))));
      const auto y = std::uniform_int_distribution<std::size_t>(0, h - eh)(rng);
      const auto x = std::uniform_int_distribution<std::size_t>(0, w - ew)(rng);
      Tensor out = image;
      for (std::size_t k = 0; k < ch; ++k)
        for (std::size_t r = y; r < y + eh; ++r)
          for (std::size_t c = x; c < x + ew; ++c) out.data()[(k * h + r) * w + c] = fill;
      return out;
    }
  }
  return image;
}

Tensor apply_policy(const Tensor& image, const AugmentPolicy& policy, Rng& rng) {
  if (policy.ops.empty()) throw ConfigError("augmentation policy has no ops");
  Tensor out = image;
  std::uniform_int_distribution<std::size_t> pick(0, policy.ops.size() - 1);
  for (std::size_t k = 0; k < policy.ops_per_sample; ++k) {
    const OpRange& r = policy.ops[pick(rng)];
    std::uniform_real_distribution<double> mag(r.lo, r.hi);
    const double m = r.lo == r.hi ? r.lo : mag(rng);
    const double m2 = r.lo == r.hi ? r.lo : mag(rng);
    out = apply_op(out, r.op, m, m2, rng, policy.fill);
  }
  for (auto& v : out.values()) v = std::clamp(v, 0.0, 1.0);
  return out;
}

Tensor apply_policy_batch(const Tensor& batch, const AugmentPolicy& policy, Rng& rng) {
  if (batch.rank() != 4) throw ShapeError("apply_policy_batch: batch must be NCHW");
  const std::size_t n = batch.dim(0), per = batch.numel() / n;
  const Shape img{batch.dim(1), batch.dim(2), batch.dim(3)};
  Tensor out(batch.shape());
  for (std::size_t i = 0; i < n; ++i) {
    Tensor one(img, std::vector<double>(batch.data() + i * per, batch.data() + (i + 1) * per));
    const Tensor aug = apply_policy(one, policy, rng);
    std::copy(aug.data(), aug.data() + per, out.data() + i * per);
  }
  return out;
}

// --------------------------------------------------------------- regimes

AugmentRegime AugmentRegime::parse(const std::string& code) {
  if (code.size() == 2 && (code[0] == 'n' || code[0] == 'y') && (code[1] == 'n' || code[1] == 'y')) {
    return {code[0] == 'y', code[1] == 'y'};
  }
  throw ConfigError("augment.regime must be nn, ny, yn or yy (got '" + code + "')");
}

std::string AugmentRegime::code() const {
  return std::string(1, teacher_aug ? 'y' : 'n') + (student_aug ? 'y' : 'n');
}

const ModelGraph& select_teacher(const TeacherSet& teachers, AugmentRegime regime) {
  const ModelGraph* t = regime.teacher_aug ? teachers.augmented : teachers.vanilla;
  if (!t) {
    throw ConfigError(std::string("regime '") + regime.code() + "' needs a " +
                      (regime.teacher_aug ? "augmentation-trained" : "vanilla") +
                      " teacher, none available");
  }
  return *t;
}

RegimeStep regime_forward(const TeacherSet& teachers, ModelGraph& student, Tape& tape,
                          const Tensor& batch, AugmentRegime regime, const ImageFn& augment,
                          const ImageFn& prepare) {
  const ModelGraph& teacher = select_teacher(teachers, regime);
  RegimeStep step;
  if (regime.student_aug) {
    if (!augment) throw ConfigError("regime '" + regime.code() + "' needs an augmentation");
    step.pixels = augment(batch);
  } else {
    step.pixels = batch;
  }
  if (prepare) step.pixels = prepare(step.pixels);
  Tape frozen;
  frozen.set_recording(false);
  const ForwardOutput t = forward_eval(teacher, frozen, Variable(step.pixels));
  step.teacher_logits = t.logits.value();
  step.teacher_feature = t.last_feature.value();
  step.student = forward_train(student, tape, Variable(step.pixels));
  return step;
}

}  // namespace orthokd
