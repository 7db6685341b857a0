#include "orthokd/config.hpp"

#include <algorithm>
#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "orthokd/errors.hpp"

namespace orthokd {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool valid_key(const std::string& k) {
  return !k.empty() && std::all_of(k.begin(), k.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
  });
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double parse_double(const std::string& key, const std::string& v) {
  double d = 0.0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, d);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + v + "' is not a number");
  return d;
}

std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t i = 0;
  const auto* end = v.data() + v.size();
  const auto [p, ec] = std::from_chars(v.data(), end, i);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': '" + v + "' is not an integer");
  return i;
}

}  // namespace

Config Config::parse(const std::string& text, const std::string& origin) {
  Config c;
  c.origin_ = origin;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = origin + ":" + std::to_string(lineno);
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + ": invalid key '" + key + "'");
    if (!c.values_.emplace(key, value).second) throw ConfigError(where + ": duplicate key '" + key + "'");
  }
  return c;
}

Config Config::load(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse(ss.str(), path);
}

void Config::set(const std::string& key, const std::string& value) {
  if (!valid_key(key)) throw ConfigError("invalid config key '" + key + "'");
  values_[key] = trim(value);
}

bool Config::has(const std::string& key) const { return values_.count(key) > 0; }

const std::string* Config::find(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) return nullptr;
  used_.insert(key);
  return &it->second;
}

std::string Config::get_string(const std::string& key, const std::string& fallback) const {
  const auto* v = find(key);
  return v ? *v : fallback;
}

double Config::get_double(const std::string& key, double fallback) const {
  const auto* v = find(key);
  return v ? parse_double(key, *v) : fallback;
}

std::int64_t Config::get_int(const std::string& key, std::int64_t fallback) const {
  const auto* v = find(key);
  return v ? parse_int(key, *v) : fallback;
}

std::size_t Config::get_size(const std::string& key, std::size_t fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  const auto i = parse_int(key, *v);
  if (i < 0) throw ConfigError("config key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(i);
}

bool Config::get_bool(const std::string& key, bool fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  if (*v == "true" || *v == "1" || *v == "yes") return true;
  if (*v == "false" || *v == "0" || *v == "no") return false;
  throw ConfigError("config key '" + key + "': '" + *v + "' is not a boolean");
}

std::vector<double> Config::get_doubles(const std::string& key, std::vector<double> fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  std::vector<double> out;
  for (const auto& item : split_list(*v)) out.push_back(parse_double(key, item));
  return out;
}

std::vector<std::uint64_t> Config::get_seeds(const std::string& key,
                                             std::vector<std::uint64_t> fallback) const {
  const auto* v = find(key);
  if (!v) return fallback;
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(*v)) {
    const auto i = parse_int(key, item);
    if (i < 0) throw ConfigError("config key '" + key + "': seeds must be non-negative");
    out.push_back(static_cast<std::uint64_t>(i));
  }
  if (out.empty()) throw ConfigError("config key '" + key + "' is empty");
  return out;
}

std::vector<std::string> Config::unused_keys() const {
  std::vector<std::string> out;
  for (const auto& [k, v] : values_)
    if (!used_.count(k)) out.push_back(k);
  return out;
}

// ------------------------------------------------------------ experiment

std::string to_string(Schedule s) {
  switch (s) {
    case Schedule::Scratch:
      return "scratch";
    case Schedule::Pre:
      return "pre";
    case Schedule::Post:
      return "post";
    case Schedule::PrePost:
      return "prepost";
    case Schedule::SelfDistill:
      return "selfdistill";
  }
  return "scratch";
}

Schedule schedule_from_string(const std::string& s) {
  if (s == "scratch") return Schedule::Scratch;
  if (s == "pre") return Schedule::Pre;
  if (s == "post") return Schedule::Post;
  if (s == "prepost") return Schedule::PrePost;
  if (s == "selfdistill") return Schedule::SelfDistill;
  throw ConfigError("schedule must be scratch, pre, post, prepost or selfdistill (got '" + s + "')");
}

namespace {

TrainConfig read_phase(const Config& c, const std::string& p, const TrainConfig& base) {
  TrainConfig t = base;
  t.epochs = c.get_size(p + ".epochs", base.epochs);
  t.batch_size = c.get_size(p + ".batch_size", base.batch_size);
  t.optim.learning_rate = c.get_double(p + ".lr", base.optim.learning_rate);
  t.optim.momentum = c.get_double(p + ".momentum", base.optim.momentum);
  t.optim.weight_decay = c.get_double(p + ".weight_decay", base.optim.weight_decay);
  t.optim.norm_order = static_cast<int>(c.get_int(p + ".norm_order", base.optim.norm_order));
  t.decay_at = c.get_doubles(p + ".decay_at", base.decay_at);
  t.decay_factor = c.get_double(p + ".decay_factor", base.decay_factor);
  return t;
}

std::size_t last_feature_elements(const ModelSpec& spec) {
  const ModelGraph m = build_model(spec, 0);
  Tape tape;
  tape.set_recording(false);
  Variable x(Tensor({1, spec.input_channels, spec.input_size, spec.input_size}));
  return forward_eval(m, tape, x).last_feature.numel();
}

}  // namespace

ExperimentConfig experiment_config(const Config& c) {
  ExperimentConfig e;
  // data
  e.data.source = c.get_string("data.source", "synthetic");
  e.data.train_path = c.get_string("data.train_path", "");
  e.data.test_path = c.get_string("data.test_path", "");
  const std::size_t classes = c.get_size("data.classes", 10);
  e.data.cifar.classes = classes;
  e.data.cifar.label_bytes = c.get_size("data.label_bytes", 1);
  e.data.cifar.downscale = c.get_bool("data.downscale", true);
  e.data.cifar.limit = c.get_size("data.train_limit", 0);
  e.data.test_limit = c.get_size("data.test_limit", 0);
  auto& s = e.data.synthetic;
  s.classes = classes;
  s.train = c.get_size("data.synthetic.train", s.train);
  s.test = c.get_size("data.synthetic.test", s.test);
  s.size = c.get_size("data.synthetic.size", s.size);
  s.noise = c.get_double("data.synthetic.noise", s.noise);
  s.mix = c.get_double("data.synthetic.mix", s.mix);
  s.label_noise = c.get_double("data.synthetic.label_noise", s.label_noise);
  s.seed = static_cast<std::uint64_t>(c.get_size("data.synthetic.seed", s.seed));

  // model
  e.model.arch = c.get_string("model.arch", "resnet");
  e.model.depth = c.get_size("model.depth", 1);
  e.model.width = c.get_size("model.width", 8);
  e.model.classes = classes;
  if (e.data.source == "cifar") {
    e.model.input_channels = 3;
    e.model.input_size = e.data.cifar.downscale ? 16 : 32;
  } else {
    e.model.input_channels = s.channels;
    e.model.input_size = s.size;
  }

  // training phases
  TrainConfig base;
  e.train = read_phase(c, "train", base);
  TrainConfig ft_base = e.train;
  ft_base.epochs = 20;
  ft_base.optim.learning_rate = 0.01;
  ft_base.decay_at = {0.5};
  e.finetune = read_phase(c, "finetune", ft_base);

  DistillConfig d;
  d.mode = distill_mode_from_string(c.get_string("distill.mode", "label"));
  d.alpha = c.get_double("distill.alpha", d.alpha);
  d.temperature = c.get_double("distill.temperature", d.temperature);
  const std::string beta = c.get_string("distill.beta", "auto");
  e.beta_auto = beta == "auto";
  e.teacher_checkpoint = c.get_string("distill.teacher_checkpoint", "auto");
  e.aug_teacher_checkpoint = c.get_string("distill.aug_teacher_checkpoint", "auto");

  e.prune.method = prune_method_from_string(c.get_string("prune.method", "l1_filter"));
  e.prune.keep_percent = c.get_double("prune.keep_percent", 0.5);
  e.prune.lambda_s = c.get_double("prune.lambda_s", 0.0);

  const AugmentKind kind = augment_kind_from_string(c.get_string("augment.kind", "none"));
  const AugmentRegime regime = AugmentRegime::parse(c.get_string("augment.regime", "nn"));
  const std::string placement = c.get_string("augment.placement", "contained");
  if (placement != "contained" && placement != "clamped") {
    throw ConfigError("augment.placement must be contained or clamped");
  }
  const std::string policy_file = c.get_string("augment.policy_file", "");
  for (TrainConfig* t : {&e.train, &e.finetune}) {
    t->distill = d;
    t->augment = kind;
    t->regime = regime;
    t->placement = placement == "clamped" ? BoxPlacement::Clamped : BoxPlacement::Contained;
    if (!policy_file.empty()) t->policy = load_policy_file(policy_file);
  }

  e.schedule = schedule_from_string(c.get_string("schedule", "scratch"));
  e.seeds = c.get_seeds("seeds", {1});
  e.score_batch = c.get_size("score.batch", e.score_batch);
  e.landscape_grid = c.get_size("landscape.grid", e.landscape_grid);
  e.landscape_samples = c.get_size("landscape.samples", e.landscape_samples);
  e.landscape_seed_a = static_cast<std::uint64_t>(c.get_size("landscape.seed_a", e.landscape_seed_a));
  e.landscape_seed_b = static_cast<std::uint64_t>(c.get_size("landscape.seed_b", e.landscape_seed_b));

  // Model-dependent settings need a well-formed model spec.
  if (e.model.arch != "resnet" && e.model.arch != "vgg") {
    throw ConfigError("model.arch must be resnet or vgg (got '" + e.model.arch + "')");
  }
  const ModelGraph probe = build_model(e.model, 0);
  e.prune.keep_ratios = c.get_doubles("prune.keep_ratios",
                                      std::vector<double>(probe.group_count(), 0.5));
  const double beta_value =
      e.beta_auto ? default_beta(e.model.arch, last_feature_elements(e.model))
                  : c.get_double("distill.beta", 0.0);
  e.train.distill.beta = e.finetune.distill.beta = beta_value;

  if (const auto unknown = c.unused_keys(); !unknown.empty()) {
    std::string list;
    for (const auto& k : unknown) list += (list.empty() ? "" : ", ") + k;
    throw ConfigError("unknown config key(s): " + list);
  }
  e.validate();
  return e;
}

void ExperimentConfig::validate() const {
  if (model.depth < 1) throw ConfigError("model.depth must be >= 1");
  if (model.width < 1) throw ConfigError("model.width must be >= 1");
  if (model.classes < 2) throw ConfigError("data.classes must be >= 2");
  for (const TrainConfig* t : {&train, &finetune}) {
    t->distill.validate();
    t->optimizer_for(1000);
    if (t->batch_size < 2) throw ConfigError("batch_size must be >= 2");
  }
  if (train.distill.mode == DistillMode::None && schedule != Schedule::Scratch) {
    throw ConfigError("schedule '" + to_string(schedule) + "' needs distill.mode label or feature");
  }
  if (schedule != Schedule::Scratch && schedule != Schedule::Pre &&
      prune.method == PruneMethod::None) {
    throw ConfigError("schedule '" + to_string(schedule) + "' needs a pruning method");
  }
  const ModelGraph probe = build_model(model, 0);
  prune.validate(probe);
  auto check_file = [](const std::string& key, const std::string& path) {
    if (path != "auto" && !std::filesystem::exists(path)) {
      throw ConfigError(key + ": teacher checkpoint '" + path + "' not found");
    }
  };
  check_file("distill.teacher_checkpoint", teacher_checkpoint);
  check_file("distill.aug_teacher_checkpoint", aug_teacher_checkpoint);
  if (landscape_grid % 2 == 0) throw ConfigError("landscape.grid must be odd");
  if (landscape_samples < 1) throw ConfigError("landscape.samples must be >= 1");
  if (score_batch < 2) throw ConfigError("score.batch must be >= 2");
}

std::string ExperimentConfig::canonical() const {
  std::ostringstream os;
  os.precision(17);
  auto phase = [&](const std::string& p, const TrainConfig& t) {
    os << p << ".epochs = " << t.epochs << '\n'
       << p << ".batch_size = " << t.batch_size << '\n'
       << p << ".lr = " << t.optim.learning_rate << '\n'
       << p << ".momentum = " << t.optim.momentum << '\n'
       << p << ".weight_decay = " << t.optim.weight_decay << '\n'
       << p << ".norm_order = " << t.optim.norm_order << '\n'
       << p << ".decay_factor = " << t.decay_factor << '\n'
       << p << ".decay_at =";
    for (double f : t.decay_at) os << ' ' << f;
    os << '\n';
  };
  os << "model = " << model_tag() << '\n'
     << "data.source = " << data.source << '\n';
  if (data.source == "synthetic") {
    const auto& s = data.synthetic;
    os << "data.synthetic = " << s.train << ' ' << s.test << ' ' << s.size << ' ' << s.noise << ' '
       << s.mix << ' ' << s.label_noise << ' ' << s.seed << '\n';
  } else {
    os << "data.paths = " << data.train_path << ' ' << data.test_path << ' '
       << data.cifar.label_bytes << ' ' << data.cifar.downscale << ' ' << data.cifar.limit << ' '
       << data.test_limit << '\n';
  }
  phase("train", train);
  phase("finetune", finetune);
  os << "distill = " << to_string(train.distill.mode) << ' ' << train.distill.alpha << ' '
     << train.distill.temperature << ' ' << train.distill.beta << '\n'
     << "teacher = " << teacher_checkpoint << ' ' << aug_teacher_checkpoint << '\n'
     << "prune = " << to_string(prune.method) << ' ' << prune.keep_percent << ' ' << prune.lambda_s;
  for (double r : prune.keep_ratios) os << ' ' << r;
  os << '\n'
     << "augment = " << to_string(train.augment) << ' ' << train.regime.code() << ' '
     << (train.placement == BoxPlacement::Clamped ? "clamped" : "contained") << '\n'
     << "schedule = " << to_string(schedule) << '\n';
  return os.str();
}

std::uint64_t ExperimentConfig::digest() const {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char ch : canonical()) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

std::string ExperimentConfig::model_tag() const {
  return model.arch + "-d" + std::to_string(model.depth) + "-w" + std::to_string(model.width) +
         "-c" + std::to_string(model.classes) + "-s" + std::to_string(model.input_size);
}

}  // namespace orthokd
