// orthokd: experiment driver. Exit codes: 0 success, 1 configuration or
// input error, 2 numeric failure (non-finite loss or gradient).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "orthokd/checkpoint.hpp"
#include "orthokd/config.hpp"
#include "orthokd/errors.hpp"
#include "orthokd/experiment.hpp"
#include "orthokd/log.hpp"
#include "orthokd/metrics.hpp"
#include "orthokd/report.hpp"
#include "orthokd/train.hpp"

namespace fs = std::filesystem;
using namespace orthokd;

namespace {

struct Globals {
  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  std::size_t jobs = 1;
  std::string out_dir = ".";
  bool verbose = false;
};

ExperimentConfig load_config(const Globals& g) {
  Config c = g.config_path.empty() ? Config::parse("") : Config::load(g.config_path);
  for (const auto& kv : g.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value (got '" + kv + "')");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (g.seed >= 0) c.set("seeds", std::to_string(g.seed));
  return experiment_config(c);
}

std::string out_path(const Globals& g, const std::string& name) {
  fs::create_directories(g.out_dir);
  return (fs::path(g.out_dir) / name).string();
}

ModelGraph resolve_teacher(const ExperimentConfig& cfg, const DatasetHandle& data,
                           const Globals& g, const std::string& flag_path) {
  const std::string path = !flag_path.empty() ? flag_path : cfg.teacher_checkpoint;
  if (path != "auto") return model_from_checkpoint(read_checkpoint(path));
  const std::uint64_t s = cfg.seeds.front() + 1;
  log_info("training scratch teacher with seed " + std::to_string(s));
  TrainConfig t = cfg.train;
  t.distill.mode = DistillMode::None;
  t.regime = {false, cfg.train.regime.teacher_aug};
  t.seed = phase_seed(s, t.regime.student_aug ? "scratch-aug" : "scratch");
  ModelGraph m = train_model(build_model(cfg.model, phase_seed(s, "init")), data, t).model;
  write_checkpoint(out_path(g, "teacher.ckpt"), make_checkpoint(m));
  return m;
}

int cmd_train(const Globals& g, const std::string& teacher_path) {
  const ExperimentConfig cfg = load_config(g);
  const DatasetHandle data = ingest_dataset(cfg.data);
  const std::uint64_t s = cfg.seeds.front();
  TrainConfig t = cfg.train;
  t.lambda_s = cfg.prune.method == PruneMethod::Slimming ? cfg.prune.lambda_s : 0.0;
  std::optional<ModelGraph> teacher;
  TeacherSet ts;
  if (t.distill.mode != DistillMode::None) {
    teacher = resolve_teacher(cfg, data, g, teacher_path);
    ts = t.regime.teacher_aug ? TeacherSet{nullptr, &*teacher} : TeacherSet{&*teacher, nullptr};
  }
  t.seed = phase_seed(s, t.distill.mode == DistillMode::None ? "scratch" : "distill");
  const TrainResult r =
      train_model(build_model(cfg.model, phase_seed(s, "init")), data, t, teacher ? &ts : nullptr);
  const std::string path = out_path(g, "model.ckpt");
  write_checkpoint(path, make_checkpoint(r.model));
  std::cout << "accuracy " << evaluate_accuracy(r.model, data) << "\ncheckpoint " << path << '\n';
  return 0;
}

int cmd_prune(const Globals& g, const std::string& in) {
  const ExperimentConfig cfg = load_config(g);
  const ModelGraph model = model_from_checkpoint(read_checkpoint(in));
  const PrunedModel p = prune_model(model, cfg.prune);
  const std::string path = out_path(g, "pruned.ckpt");
  write_checkpoint(path, make_checkpoint(p.model, nullptr, p.mask ? &*p.mask : nullptr));
  if (p.mask) {
    std::cout << "remaining_params " << remaining_fraction(p.model, *p.mask) << '\n';
  } else {
    std::cout << "parameters " << model.parameter_count() << " -> " << p.model.parameter_count()
              << '\n';
  }
  std::cout << "checkpoint " << path << '\n';
  return 0;
}

int cmd_finetune(const Globals& g, const std::string& in, const std::string& teacher_path) {
  const ExperimentConfig cfg = load_config(g);
  const DatasetHandle data = ingest_dataset(cfg.data);
  const Checkpoint ck = read_checkpoint(in);
  ModelGraph model = model_from_checkpoint(ck);
  const WeightMask mask = mask_from_checkpoint(ck);
  TrainConfig t = cfg.finetune;
  std::optional<ModelGraph> teacher;
  TeacherSet ts;
  if (t.distill.mode != DistillMode::None) {
    if (teacher_path.empty() && cfg.teacher_checkpoint == "auto") {
      throw ConfigError("finetune with distillation needs --teacher or distill.teacher_checkpoint");
    }
    teacher = resolve_teacher(cfg, data, g, teacher_path);
    ts = t.regime.teacher_aug ? TeacherSet{nullptr, &*teacher} : TeacherSet{&*teacher, nullptr};
  }
  t.seed = phase_seed(cfg.seeds.front(), "finetune");
  const TrainResult r = train_model(std::move(model), data, t, teacher ? &ts : nullptr,
                                    mask.empty() ? nullptr : &mask);
  const std::string path = out_path(g, "finetuned.ckpt");
  write_checkpoint(path, make_checkpoint(r.model, nullptr, mask.empty() ? nullptr : &mask));
  std::cout << "accuracy " << evaluate_accuracy(r.model, data) << "\ncheckpoint " << path << '\n';
  return 0;
}

int cmd_evaluate(const Globals& g, const std::string& in) {
  const ExperimentConfig cfg = load_config(g);
  const DatasetHandle data = ingest_dataset(cfg.data);
  const ModelGraph model = model_from_checkpoint(read_checkpoint(in));
  std::cout << "accuracy " << evaluate_accuracy(model, data) << '\n'
            << "digest " << hex_digest(model_digest(model)) << '\n';
  return 0;
}

int cmd_score(const Globals& g, const std::vector<std::string>& groups) {
  const ExperimentConfig cfg = load_config(g);
  const DatasetHandle data = ingest_dataset(cfg.data);
  const Tensor x = scoring_batch(data, cfg.score_batch);
  std::vector<std::pair<std::string, ConfidenceReport>> rows;
  for (const auto& grp : groups) {
    const auto eq = grp.find('=');
    if (eq == std::string::npos) throw ConfigError("--group expects name=ckpt[,ckpt...]");
    std::vector<double> scores;
    std::stringstream ss(grp.substr(eq + 1));
    for (std::string p; std::getline(ss, p, ',');) {
      if (p.empty()) continue;
      scores.push_back(naswot_score(model_from_checkpoint(read_checkpoint(p)), x).score);
    }
    rows.emplace_back(grp.substr(0, eq), confidence_report(scores));
  }
  const std::string csv = score_csv(rows);
  std::ofstream(out_path(g, "scores.csv")) << csv;
  std::cout << csv;
  return 0;
}

int cmd_landscape(const Globals& g, const std::string& in) {
  const ExperimentConfig cfg = load_config(g);
  const DatasetHandle data = ingest_dataset(cfg.data);
  const ModelGraph model = model_from_checkpoint(read_checkpoint(in));
  const std::size_t n = std::min(cfg.landscape_samples, data.train.size());
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  const Tensor x = data.normalize(data.gather(data.train, idx));
  const auto labels = data.gather_labels(data.train, idx);
  const LandscapeSlice s = landscape_slice(model, x, labels, cfg.landscape_grid,
                                           cfg.landscape_seed_a, cfg.landscape_seed_b, g.jobs);
  write_landscape_csv(out_path(g, "landscape.csv"), s);
  write_landscape_vtk(out_path(g, "landscape.vtk"), s);
  std::cout << "center_loss " << s.center() << "\ncheckpoint_loss " << dataset_loss(model, x, labels)
            << '\n';
  return 0;
}

int cmd_report(const Globals& g, const std::vector<std::string>& results) {
  std::vector<RunRecord> records;
  for (const auto& p : results) {
    auto r = read_records_csv(p);
    records.insert(records.end(), r.begin(), r.end());
  }
  write_report(g.out_dir, records);
  std::cout << report_markdown(build_report(records));
  return 0;
}

int cmd_reproduce(const Globals& g) {
  const ExperimentConfig cfg = load_config(g);
  fs::create_directories(g.out_dir);
  const ExperimentResult res = run_matrix(cfg, {g.jobs, (fs::path(g.out_dir) / "checkpoints").string()});
  write_records_csv(out_path(g, "results.csv"), res.records);
  write_report(g.out_dir, res.records);
  const DiversityScores d = diversity_scores(res, cfg.score_batch);
  std::vector<std::pair<std::string, ConfidenceReport>> rows;
  if (d.scratch.size() >= 2) rows.emplace_back("scratch", confidence_report(d.scratch));
  if (d.distilled.size() >= 2) {
    rows.emplace_back(to_string(cfg.train.distill.mode), confidence_report(d.distilled));
  }
  std::ofstream(out_path(g, "scores.csv")) << score_csv(rows);
  std::cout << report_markdown(build_report(res.records)) << '\n' << score_csv(rows);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"orthokd: distillation, pruning and augmentation experiments"};
  app.require_subcommand(1);
  Globals g;
  auto add_globals = [&](CLI::App* sub) {
    sub->add_option("--config", g.config_path, "experiment config file (key = value)");
    sub->add_option("--set", g.overrides, "override a config key, key=value (repeatable)");
    sub->add_option("--seed", g.seed, "run a single seed instead of the configured list");
    sub->add_option("--jobs", g.jobs, "parallel runs")->check(CLI::PositiveNumber);
    sub->add_option("--out-dir", g.out_dir, "output directory");
    sub->add_flag("-v,--verbose", g.verbose, "progress messages");
  };
  std::string ckpt, teacher;
  std::vector<std::string> groups, results;

  auto* train = app.add_subcommand("train", "train one model (scratch or distilled)");
  train->add_option("--teacher", teacher, "teacher checkpoint");
  auto* prune = app.add_subcommand("prune", "prune a checkpoint");
  prune->add_option("--checkpoint", ckpt, "input checkpoint")->required();
  auto* finetune = app.add_subcommand("finetune", "fine-tune a pruned checkpoint under its mask");
  finetune->add_option("--checkpoint", ckpt, "pruned checkpoint")->required();
  finetune->add_option("--teacher", teacher, "teacher checkpoint");
  auto* evaluate = app.add_subcommand("evaluate", "test accuracy of a checkpoint");
  evaluate->add_option("--checkpoint", ckpt, "checkpoint")->required();
  auto* score = app.add_subcommand("score-diversity", "NASWOT scores with 99% intervals");
  score->add_option("--group", groups, "name=ckpt,ckpt,... (repeatable)")->required();
  auto* landscape = app.add_subcommand("landscape", "2-D loss landscape slice (CSV + VTK)");
  landscape->add_option("--checkpoint", ckpt, "checkpoint")->required();
  auto* report = app.add_subcommand("report", "render tables from results CSV files");
  report->add_option("--results", results, "results.csv (repeatable)")->required();
  auto* reproduce = app.add_subcommand("reproduce-tables", "run the full desk-scale matrix");
  for (auto* s : {train, prune, finetune, evaluate, score, landscape, report, reproduce}) add_globals(s);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 1;
  }
  set_log_level(g.verbose ? LogLevel::Info : LogLevel::Warning);
  try {
    if (*train) return cmd_train(g, teacher);
    if (*prune) return cmd_prune(g, ckpt);
    if (*finetune) return cmd_finetune(g, ckpt, teacher);
    if (*evaluate) return cmd_evaluate(g, ckpt);
    if (*score) return cmd_score(g, groups);
    if (*landscape) return cmd_landscape(g, ckpt);
    if (*report) return cmd_report(g, results);
    if (*reproduce) return cmd_reproduce(g);
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
