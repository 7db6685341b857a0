#include "orthokd/experiment.hpp"

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "orthokd/checkpoint.hpp"
#include "orthokd/errors.hpp"
#include "orthokd/log.hpp"
#include "orthokd/metrics.hpp"
#include "orthokd/train.hpp"

namespace orthokd {

namespace {

const std::pair<RunTag, const char*> kTagNames[] = {
    {RunTag::Scratch, "Scratch"},         {RunTag::PreDistill, "Pre-Distill"},
    {RunTag::PostDistill, "Post-Distill"}, {RunTag::PrePost, "Pre-Post"},
    {RunTag::SelfDistill, "Self-Distill"}, {RunTag::Unpruned, "Unpruned"},
};

}  // namespace

std::string to_string(RunTag tag) {
  for (const auto& [t, name] : kTagNames)
    if (t == tag) return name;
  return "Unpruned";
}

RunTag run_tag_from_string(const std::string& s) {
  for (const auto& [t, name] : kTagNames)
    if (s == name) return t;
  throw ConfigError("unknown run tag '" + s + "'");
}

void RunRecord::validate() const {
  if (!(accuracy >= 0.0 && accuracy <= 100.0)) {
    throw ConfigError("run record accuracy " + std::to_string(accuracy) + " outside [0,100]");
  }
  if (train_type != "scratch" && train_type != "label" && train_type != "feature") {
    throw ConfigError("run record train type must be scratch, label or feature");
  }
}

std::string records_csv(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << "tag,train_type,seed,accuracy,model,config_digest,model_digest,teacher_digest\n";
  os << std::setprecision(17);
  for (const auto& r : records) {
    os << to_string(r.tag) << ',' << r.train_type << ',' << r.seed << ',' << r.accuracy << ','
       << r.model << ',' << r.config_digest << ',' << r.model_digest << ',' << r.teacher_digest
       << '\n';
  }
  return os.str();
}

std::vector<RunRecord> parse_records_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  std::vector<RunRecord> out;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (lineno == 1 && line.rfind("tag,", 0) == 0)) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (line.back() == ',') f.emplace_back();
    if (f.size() < 4) throw ConfigError("results line " + std::to_string(lineno) + ": too few fields");
    f.resize(8);
    RunRecord r;
    try {
      r.tag = run_tag_from_string(f[0]);
      r.train_type = f[1];
      r.seed = std::stoull(f[2]);
      r.accuracy = std::stod(f[3]);
    } catch (const std::logic_error& e) {
      throw ConfigError("results line " + std::to_string(lineno) + ": " + e.what());
    }
    r.model = f[4];
    r.config_digest = f[5];
    r.model_digest = f[6];
    r.teacher_digest = f[7];
    r.validate();
    out.push_back(std::move(r));
  }
  return out;
}

void write_records_csv(const std::string& path, const std::vector<RunRecord>& records) {
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot open '" + path + "' for writing");
  os << records_csv(records);
}

std::vector<RunRecord> read_records_csv(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open results file '" + path + "'");
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_records_csv(ss.str());
}

std::uint64_t phase_seed(std::uint64_t seed, const std::string& phase) {
  // FNV-1a over the phase name, folded into the seed with a splitmix64 finaliser.
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : phase) {
    h ^= c;
    h *= 1099511628211ull;
  }
  std::uint64_t z = seed * 0x9e3779b97f4a7c15ull + h;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

PrunedModel prune_model(const ModelGraph& model, const PruneSpec& spec) {
  switch (spec.method) {
    case PruneMethod::None:
      return {model, std::nullopt};
    case PruneMethod::L1Filter:
      return {l1_filter_prune(model, spec).compact, std::nullopt};
    case PruneMethod::Slimming:
      return {slimming_prune(model, spec.keep_percent).compact, std::nullopt};
    case PruneMethod::Magnitude: {
      PrunedModel p{model, magnitude_prune(model, spec.keep_percent)};
      apply_weight_mask(p.model, *p.mask);
      return p;
    }
  }
  return {model, std::nullopt};
}

namespace {

// Runs fn(0..n-1) on up to `jobs` threads; rethrows the first failure.
void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i; (i = next++) < n;) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(mu);
          if (!failure) failure = std::current_exception();
          next = n;
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

std::string train_type_of(DistillMode m) { return m == DistillMode::Feature ? "feature" : "label"; }

ModelGraph load_teacher(const std::string& path, const ExperimentConfig& cfg) {
  ModelGraph t = model_from_checkpoint(read_checkpoint(path));
  if (t.num_classes != cfg.model.classes || t.input_size != cfg.model.input_size ||
      t.input_channels != cfg.model.input_channels) {
    throw ConfigError("teacher checkpoint '" + path + "' does not match the student's data shape");
  }
  t.set_trainable(false);
  return t;
}

struct FinetuneJob {
  std::uint64_t seed;
  RunTag tag;
  bool from_distilled;  // prune source
  bool distill;         // fine-tune with a teacher
  bool self_teacher;    // teacher = unpruned distilled snapshot
};

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& cfg, const std::set<Schedule>& schedules,
                                const RunOptions& opts) {
  cfg.validate();
  auto has = [&](Schedule s) { return schedules.count(s) > 0; };
  const bool pruning = cfg.prune.method != PruneMethod::None;
  const bool need_baseline = has(Schedule::Scratch) || has(Schedule::Post);
  const bool need_kd = has(Schedule::Pre) || has(Schedule::PrePost) || has(Schedule::SelfDistill);
  const bool need_ext_teacher = need_kd || has(Schedule::Post) || has(Schedule::PrePost);
  const DistillMode mode = cfg.train.distill.mode;
  const AugmentKind kind = cfg.train.augment;
  const AugmentRegime regime = cfg.train.regime;
  const bool student_aug = regime.student_aug;
  if (need_ext_teacher && mode == DistillMode::None) {
    throw ConfigError("distilling schedules need distill.mode label or feature");
  }
  if ((has(Schedule::Post) || has(Schedule::PrePost) || has(Schedule::SelfDistill)) && !pruning) {
    throw ConfigError("post, prepost and selfdistill schedules need a pruning method");
  }
  if ((regime.teacher_aug || regime.student_aug) && kind == AugmentKind::None) {
    throw ConfigError("augment.regime '" + regime.code() +
                      "' needs augment.kind cutmix or policy: no augmentation-trained model can exist");
  }

  // Resolve teachers before any training starts.
  const std::string& teacher_path =
      regime.teacher_aug ? cfg.aug_teacher_checkpoint : cfg.teacher_checkpoint;
  std::optional<ModelGraph> fixed_teacher;
  if (need_ext_teacher && teacher_path != "auto") fixed_teacher = load_teacher(teacher_path, cfg);

  auto data = std::make_shared<const DatasetHandle>(ingest_dataset(cfg.data));
  if (data->classes != cfg.model.classes || data->image_size() != cfg.model.input_size) {
    throw ConfigError("dataset shape does not match the model spec");
  }
  const double lambda_s = cfg.prune.method == PruneMethod::Slimming ? cfg.prune.lambda_s : 0.0;
  const std::string cdigest = hex_digest(cfg.digest());
  const std::string mtag = cfg.model_tag();
  if (!opts.out_dir.empty()) std::filesystem::create_directories(opts.out_dir);
  auto save = [&](const std::string& name, const ModelGraph& m, const WeightMask* mask = nullptr) {
    if (opts.out_dir.empty()) return;
    write_checkpoint((std::filesystem::path(opts.out_dir) / (name + ".ckpt")).string(),
                     make_checkpoint(m, nullptr, mask));
  };

  // Phase 1: scratch models keyed by (seed, trained with augmentation).
  std::map<std::pair<std::uint64_t, bool>, ModelGraph> scratch;
  for (auto s : cfg.seeds) {
    if (need_baseline) scratch[{s, student_aug}];
    if (need_ext_teacher && !fixed_teacher) scratch[{s + 1, regime.teacher_aug}];
  }
  std::vector<std::pair<std::uint64_t, bool>> keys;
  for (const auto& [k, v] : scratch) keys.push_back(k);
  log_info("training " + std::to_string(keys.size()) + " scratch model(s)");
  parallel_for(keys.size(), opts.jobs, [&](std::size_t i) {
    const auto [s, aug] = keys[i];
    TrainConfig t = cfg.train;
    t.distill.mode = DistillMode::None;
    t.regime = {false, aug};
    t.lambda_s = lambda_s;
    t.seed = phase_seed(s, aug ? "scratch-aug" : "scratch");
    ModelGraph m = train_model(build_model(cfg.model, phase_seed(s, "init")), *data, t).model;
    save("scratch-seed" + std::to_string(s) + (aug ? "-aug" : ""), m);
    scratch.at(keys[i]) = std::move(m);
  });

  auto ext_teacher = [&](std::uint64_t s) -> const ModelGraph& {
    return fixed_teacher ? *fixed_teacher : scratch.at({s + 1, regime.teacher_aug});
  };
  auto teacher_set = [&](const ModelGraph& t) {
    return regime.teacher_aug ? TeacherSet{nullptr, &t} : TeacherSet{&t, nullptr};
  };

  // Phase 2: distilled students.
  ExperimentResult result;
  result.data = data;
  result.models.resize(cfg.seeds.size());
  std::vector<std::string> kd_teacher_digest(cfg.seeds.size());
  parallel_for(need_kd ? cfg.seeds.size() : 0, opts.jobs, [&](std::size_t i) {
    const auto s = cfg.seeds[i];
    TrainConfig t = cfg.train;
    t.lambda_s = lambda_s;
    t.seed = phase_seed(s, "distill");
    const ModelGraph& teacher = ext_teacher(s);
    const TeacherSet ts = teacher_set(teacher);
    kd_teacher_digest[i] = hex_digest(model_digest(teacher));
    ModelGraph m = train_model(build_model(cfg.model, phase_seed(s, "init")), *data, t, &ts).model;
    save("distilled-seed" + std::to_string(s), m);
    result.models[i].distilled = std::move(m);
  });
  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    result.models[i].seed = cfg.seeds[i];
    if (need_baseline) result.models[i].scratch = scratch.at({cfg.seeds[i], student_aug});
  }

  // Phase 3: prune each source once.
  std::vector<std::optional<PrunedModel>> pruned_scratch(cfg.seeds.size()), pruned_kd(cfg.seeds.size());
  if (pruning) {
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
      auto& sm = result.models[i];
      if (sm.scratch) pruned_scratch[i] = prune_model(*sm.scratch, cfg.prune);
      if (sm.distilled) {
        sm.distilled_digest_before_prune = hex_digest(model_digest(*sm.distilled));
        pruned_kd[i] = prune_model(*sm.distilled, cfg.prune);
        sm.distilled_digest_after_prune = hex_digest(model_digest(*sm.distilled));
      }
    }
  }

  // Phase 4: fine-tuning.
  std::vector<FinetuneJob> jobs;
  for (auto s : cfg.seeds) {
    if (!pruning) break;
    if (has(Schedule::Scratch)) jobs.push_back({s, RunTag::Scratch, false, false, false});
    if (has(Schedule::Pre)) jobs.push_back({s, RunTag::PreDistill, true, false, false});
    if (has(Schedule::Post)) jobs.push_back({s, RunTag::PostDistill, false, true, false});
    if (has(Schedule::PrePost)) jobs.push_back({s, RunTag::PrePost, true, true, false});
    if (has(Schedule::SelfDistill)) jobs.push_back({s, RunTag::SelfDistill, true, true, true});
  }
  std::vector<RunRecord> ft_records(jobs.size());
  parallel_for(jobs.size(), opts.jobs, [&](std::size_t j) {
    const FinetuneJob& job = jobs[j];
    const std::size_t i = static_cast<std::size_t>(
        std::find(cfg.seeds.begin(), cfg.seeds.end(), job.seed) - cfg.seeds.begin());
    const PrunedModel& src = job.from_distilled ? *pruned_kd[i] : *pruned_scratch[i];
    TrainConfig t = cfg.finetune;
    t.lambda_s = 0.0;
    t.seed = phase_seed(job.seed, "finetune-" + to_string(job.tag));
    RunRecord r;
    r.tag = job.tag;
    r.seed = job.seed;
    r.config_digest = cdigest;
    r.model = mtag;
    TeacherSet ts;
    if (job.distill) {
      const ModelGraph& teacher =
          job.self_teacher ? *result.models[i].distilled : ext_teacher(job.seed);
      ts = job.self_teacher ? TeacherSet{&teacher, &teacher} : teacher_set(teacher);
      r.teacher_digest = hex_digest(model_digest(teacher));
    } else {
      t.distill.mode = DistillMode::None;
      t.regime.teacher_aug = false;
    }
    r.train_type = job.tag == RunTag::Scratch ? "scratch" : train_type_of(mode);
    const WeightMask* mask = src.mask ? &*src.mask : nullptr;
    ModelGraph m = train_model(src.model, *data, t, job.distill ? &ts : nullptr, mask).model;
    r.accuracy = evaluate_accuracy(m, *data);
    r.model_digest = hex_digest(model_digest(m));
    save("finetuned-" + to_string(job.tag) + "-seed" + std::to_string(job.seed), m, mask);
    ft_records[j] = std::move(r);
  });

  for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
    const auto& sm = result.models[i];
    if (sm.scratch) {
      RunRecord r{RunTag::Unpruned, "scratch", evaluate_accuracy(*sm.scratch, *data), sm.seed,
                  cdigest, mtag, hex_digest(model_digest(*sm.scratch)), ""};
      result.records.push_back(std::move(r));
    }
    if (sm.distilled) {
      RunRecord r{RunTag::Unpruned, train_type_of(mode), evaluate_accuracy(*sm.distilled, *data),
                  sm.seed, cdigest, mtag, hex_digest(model_digest(*sm.distilled)),
                  kd_teacher_digest[i]};
      result.records.push_back(std::move(r));
    }
  }
  for (auto& r : ft_records) result.records.push_back(std::move(r));
  if (!opts.out_dir.empty()) {
    write_records_csv((std::filesystem::path(opts.out_dir) / "results.csv").string(), result.records);
  }
  return result;
}

ExperimentResult run_schedule(const ExperimentConfig& cfg, const RunOptions& opts) {
  return run_experiment(cfg, {cfg.schedule}, opts);
}

ExperimentResult run_matrix(const ExperimentConfig& cfg, const RunOptions& opts) {
  return run_experiment(cfg,
                        {Schedule::Scratch, Schedule::Pre, Schedule::Post, Schedule::PrePost,
                         Schedule::SelfDistill},
                        opts);
}

Tensor scoring_batch(const DatasetHandle& data, std::size_t batch) {
  batch = std::min(batch, data.test.size());
  std::vector<std::size_t> idx(batch);
  for (std::size_t i = 0; i < batch; ++i) idx[i] = i;
  return data.normalize(data.gather(data.test, idx));
}

DiversityScores diversity_scores(const ExperimentResult& result, std::size_t batch) {
  DiversityScores d;
  const Tensor x = scoring_batch(*result.data, batch);
  for (const auto& sm : result.models) {
    if (sm.scratch) d.scratch.push_back(naswot_score(*sm.scratch, x).score);
    if (sm.distilled) d.distilled.push_back(naswot_score(*sm.distilled, x).score);
  }
  return d;
}

}  // namespace orthokd
