// calibkd: teacher training, cross-layer distillation, evaluation, analysis
// and report aggregation from the command line.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "calibkd/analysis.hpp"
#include "calibkd/checkpoint.hpp"
#include "calibkd/config.hpp"
#include "calibkd/report.hpp"
#include "calibkd/trainer.hpp"

namespace fs = std::filesystem;
using namespace calibkd;

namespace {

enum Exit { kOk = 0, kUsage = 1, kData = 2, kNumeric = 3 };

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> few_shot, label_noise;
  std::string out;
  bool force = false;
};

ExperimentConfig load_with_overrides(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig{} : load_config(c.config_path);
  if (c.seed) cfg.seed = *c.seed;
  if (c.few_shot) cfg.data.few_shot = *c.few_shot;
  if (c.label_noise) cfg.data.label_noise = *c.label_noise;
  cfg.sync();
  return cfg;
}

fs::path run_dir(const Common& c, const ExperimentConfig& cfg, const std::string& run_id) {
  return c.out.empty() ? fs::path(cfg.out) / run_id : fs::path(c.out);
}

void prepare_run_dir(const fs::path& dir, bool force) {
  for (const char* f : {"summary.json", "checkpoint.ckdc", "metrics.csv"}) {
    if (fs::exists(dir / f) && !force) {
      throw ConfigError("refusing to overwrite " + (dir / f).string() + " (use --force)");
    }
  }
  fs::create_directories(dir);
  fs::remove(dir / "summary.json");  // summary marks completion; it is rewritten last
}

Json config_json(const ExperimentConfig& cfg) {
  Json j;
  for (const auto& [k, v] : to_key_values(cfg)) j[k.substr(7)] = v;  // strip "config."
  return j;
}

void log_epoch(const EpochMetrics& m) {
  std::cerr << "epoch " << m.epoch << "  loss " << format_number(m.loss);
  if (!std::isnan(m.test_accuracy)) std::cerr << "  test acc " << format_number(m.test_accuracy);
  if (!std::isnan(m.sm_score)) std::cerr << "  sm " << format_number(m.sm_score);
  std::cerr << "\n";
}

void write_run(const fs::path& dir, const RunInfo& info, const RunResult& result, const Checkpoint& ckpt,
               const DistillConfig* dc, const ExperimentConfig& cfg, std::chrono::system_clock::time_point started) {
  write_file_atomic(dir / "checkpoint.ckdc", save_checkpoint(ckpt));
  write_file_atomic(dir / "metrics.csv", metrics_csv(info, result));
  auto summary = summary_json(info, result, dc, config_json(cfg));
  add_timing(summary, started, std::chrono::system_clock::now());
  write_file_atomic(dir / "summary.json", summary.dump(2) + "\n");
}

// ---------------------------------------------------------------------------

int cmd_defaults() {
  std::cout << to_yaml(ExperimentConfig{});
  return kOk;
}

int cmd_train_teacher(const Common& c) {
  const auto started = std::chrono::system_clock::now();
  auto cfg = load_with_overrides(c);
  cfg.validate();
  const std::string run_id = "teacher-seed" + std::to_string(cfg.seed);
  const auto dir = run_dir(c, cfg, run_id);
  prepare_run_dir(dir, c.force);
  auto data = prepare_data(cfg.data, cfg.seed);
  const auto stats = ChannelStats::compute(data.train);
  auto result = train_supervised(cfg.teacher, data.train, data.test, stats, cfg.teacher_train, log_epoch);
  auto kv = to_key_values(cfg);
  kv["result.test_accuracy"] = format_number(result.test_accuracy);
  auto ckpt = make_checkpoint(result.net, stats, kv, "teacher", result.history.size(), result.rng_state);
  write_run(dir, {run_id, cfg.seed, Mode::student, false}, result, ckpt, nullptr, cfg, started);
  std::cout << "teacher accuracy " << format_number(result.test_accuracy) << "\nwrote " << dir.string() << "\n";
  return kOk;
}

struct DistillArgs {
  std::string teacher;
  std::string mode;
  std::string pair;
  std::optional<double> tau, beta;
};

LayerPair parse_pair(const std::string& text) {
  const auto comma = text.find(',');
  try {
    if (comma == std::string::npos) throw std::invalid_argument("no comma");
    const long s = std::stol(text.substr(0, comma)), t = std::stol(text.substr(comma + 1));
    if (s < 1 || t < 1) throw std::invalid_argument("not 1-based");
    return {static_cast<std::size_t>(s - 1), static_cast<std::size_t>(t - 1)};
  } catch (const std::logic_error&) {
    throw ConfigError("--pair expects STUDENT,TEACHER layer indices (1-based), got '" + text + "'");
  }
}

int cmd_distill(const Common& c, const DistillArgs& a) {
  const auto started = std::chrono::system_clock::now();
  auto cfg = load_with_overrides(c);
  if (!a.mode.empty()) cfg.mode = parse_mode(a.mode);
  auto& dc = cfg.student_train.distill;
  if (!a.pair.empty()) dc.pair = parse_pair(a.pair);
  if (a.tau) dc.tau = *a.tau;
  if (a.beta) dc.beta = *a.beta;
  dc = configure_mode(cfg.mode, dc);
  cfg.validate();

  const std::string run_id = std::string(mode_name(cfg.mode)) + "-seed" + std::to_string(cfg.seed);
  const auto dir = run_dir(c, cfg, run_id);
  auto data = prepare_data(cfg.data, cfg.seed);

  RunResult result;
  ChannelStats stats;
  if (cfg.mode == Mode::student) {
    prepare_run_dir(dir, c.force);
    stats = ChannelStats::compute(data.train);
    result = train_supervised(cfg.student, data.train, data.test, stats, cfg.student_train, log_epoch);
  } else {
    if (a.teacher.empty()) throw ConfigError("distill needs --teacher CHECKPOINT (except --mode student)");
    const auto teacher_ckpt = read_checkpoint_file(a.teacher);
    const auto teacher = model_from_checkpoint(teacher_ckpt);
    if (teacher.spec().num_classes != cfg.student.num_classes) {
      throw ConfigError("teacher checkpoint predicts " + std::to_string(teacher.spec().num_classes) +
                        " classes, the student config " + std::to_string(cfg.student.num_classes));
    }
    dc.validate(cfg.student.stages.size(), teacher.spec().stages.size());
    prepare_run_dir(dir, c.force);
    stats = stats_from_checkpoint(teacher_ckpt);
    result = distill(teacher, cfg.student, data.train, data.test, stats, cfg.student_train, log_epoch);
  }
  auto kv = to_key_values(cfg);
  kv["result.test_accuracy"] = format_number(result.test_accuracy);
  kv["result.sm_score"] = format_number(result.sm_score);
  auto ckpt = make_checkpoint(result.net, stats, kv, "student", result.history.size(), result.rng_state);
  const bool has_fmd = cfg.mode != Mode::student && dc.beta > 0.0;
  write_run(dir, {run_id, cfg.seed, cfg.mode, has_fmd}, result, ckpt, cfg.mode == Mode::student ? nullptr : &dc, cfg,
            started);
  std::cout << mode_name(cfg.mode) << " accuracy " << format_number(result.test_accuracy);
  if (!std::isnan(result.sm_score)) std::cout << "  sm-score " << format_number(result.sm_score);
  std::cout << "\nwrote " << dir.string() << "\n";
  return kOk;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint, const std::string& split) {
  if (checkpoint.empty()) throw ConfigError("evaluate needs --checkpoint PATH");
  auto cfg = load_with_overrides(c);
  const auto ckpt = read_checkpoint_file(checkpoint);
  auto data = prepare_data(cfg.data, cfg.seed);
  const auto& ds = split == "train" ? data.train : data.test;
  const double acc = evaluate(ckpt, ds);
  Json j{{"checkpoint", checkpoint}, {"split", split}, {"instances", ds.size()}, {"accuracy", acc}};
  std::cout << j.dump(2) << "\n";
  return kOk;
}

// ---------------------------------------------------------------------------
// analyze

struct AnalyzeArgs {
  std::vector<std::string> checkpoints;
  bool random = false;
  std::string ari;
  std::size_t probe = 16;
};

Json analyze_pair(const Network<float>& teacher, const Network<float>& student, const Batch<float>& probe,
                  const std::string& label, std::string& csv) {
  const auto t_rec = forward_with_taps(teacher, probe.images);
  const auto s_rec = forward_with_taps(student, probe.images);
  Json pairs = Json::array();
  std::size_t bounds_ok = 0, total = 0;
  double worst_identity = 0.0;
  std::vector<analysis::Matrix> gs, gt;
  for (const auto& t : s_rec.taps) gs.push_back(analysis::flatten_instances(t) * analysis::flatten_instances(t).transpose());
  for (const auto& t : t_rec.taps) gt.push_back(analysis::flatten_instances(t) * analysis::flatten_instances(t).transpose());
  const double sm = analysis::sm_score(gs, gt, analysis::unit_weights(gs.size(), gt.size(), probe.labels.size()));
  for (std::size_t s = 0; s < s_rec.taps.size(); ++s)
    for (std::size_t t = 0; t < t_rec.taps.size(); ++t) {
      auto [a, b] = analysis::pad_columns(analysis::flatten_instances(s_rec.taps[s]),
                                          analysis::flatten_instances(t_rec.taps[t]));
      const auto pr = analysis::procrustes_align(a, b);
      const double expected_residual = a.squaredNorm() + b.squaredNorm() - 2.0 * pr.objective;
      const double residual_gap =
          std::abs(pr.residual - expected_residual) / std::max({std::abs(pr.residual), std::abs(expected_residual), 1e-30});
      const auto nb = analysis::norm_bounds_check(b.transpose() * a);
      const auto w = analysis::averaged_weight(a, b);
      const double identity_gap = std::abs(w.dot - w.frobenius) / std::max({std::abs(w.dot), std::abs(w.frobenius), 1e-300});
      worst_identity = std::max(worst_identity, identity_gap);
      bounds_ok += nb.bounds_hold ? 1 : 0;
      ++total;
      double cka = kNan;
      try {
        cka = analysis::linear_cka(analysis::flatten_instances(s_rec.taps[s]), analysis::flatten_instances(t_rec.taps[t]));
      } catch (const NumericError&) {
      }
      Json p{{"student_layer", s + 1},
             {"teacher_layer", t + 1},
             {"procrustes_objective", pr.objective},
             {"nuclear_norm", pr.singular_values.sum()},
             {"procrustes_residual", pr.residual},
             {"residual_identity_gap", residual_gap},
             {"frobenius", nb.frobenius},
             {"nuclear", nb.nuclear},
             {"lemma1_holds", nb.bounds_hold},
             {"weight_dot", w.dot},
             {"weight_frobenius", w.frobenius},
             {"weight_identity_gap", identity_gap},
             {"cka", std::isnan(cka) ? Json(nullptr) : Json(cka)}};
      pairs.push_back(p);
      csv += label + "," + std::to_string(s + 1) + "," + std::to_string(t + 1) + "," + format_number(pr.objective) +
             "," + format_number(pr.residual) + "," + (nb.bounds_hold ? "1" : "0") + "," + format_number(identity_gap) +
             "," + format_number(cka) + "\n";
    }
  return Json{{"label", label},
              {"sm_score_unit_weights", sm},
              {"lemma1_pass", bounds_ok},
              {"lemma1_total", total},
              {"max_weight_identity_gap", worst_identity},
              {"pairs", pairs}};
}

/// "student=70.46,new=75.27,base=72.91[,base=...]"
Json ari_table(const std::string& spec) {
  std::optional<double> student, fresh;
  std::vector<double> bases;
  std::stringstream ss(spec);
  std::string item;
  try {
    while (std::getline(ss, item, ',')) {
      const auto eq = item.find('=');
      if (eq == std::string::npos) throw std::invalid_argument(item);
      const auto key = item.substr(0, eq);
      const double v = std::stod(item.substr(eq + 1));
      if (key == "student") student = v;
      else if (key == "new") fresh = v;
      else if (key == "base") bases.push_back(v);
      else throw std::invalid_argument(key);
    }
  } catch (const std::logic_error&) {
    throw ConfigError("--ari expects student=ACC,new=ACC,base=ACC[,base=ACC...], got '" + spec + "'");
  }
  if (!student || !fresh || bases.empty()) throw ConfigError("--ari needs student=, new= and at least one base=");
  const auto ri = analysis::relative_improvement(*fresh, bases, *student);
  Json rows = Json::array();
  for (std::size_t i = 0; i < bases.size(); ++i)
    rows.push_back({{"baseline", bases[i]}, {"ri_percent", ri.ri[i] ? Json(*ri.ri[i]) : Json(nullptr)}});
  for (const auto& w : ri.warnings) std::cerr << "warning: " << w << "\n";
  return Json{{"student", *student}, {"new", *fresh}, {"ri", rows}, {"ari_percent", ri.ari ? Json(*ri.ari) : Json(nullptr)}};
}

int cmd_analyze(const Common& c, const AnalyzeArgs& a) {
  Json report;
  std::string csv = "run,student_layer,teacher_layer,procrustes_objective,procrustes_residual,lemma1_holds,weight_identity_gap,cka\n";
  const bool needs_data = a.random || !a.checkpoints.empty();
  if (!needs_data && a.ari.empty()) throw ConfigError("analyze needs --checkpoints, --random or --ari");
  if (needs_data) {
    if (c.config_path.empty()) throw ConfigError("analyze needs --config naming the probe dataset");
    auto cfg = load_with_overrides(c);
    auto data = prepare_data(cfg.data, cfg.seed);
    if (a.probe < 2 || a.probe > data.test.size()) throw ConfigError("--probe must be in [2, test size]");
    std::vector<std::size_t> idx(a.probe);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    Json runs = Json::array();
    if (a.random) {
      auto teacher = build_network<float>(cfg.teacher, derive_seed(cfg.seed, 20));
      auto student = build_network<float>(cfg.student, derive_seed(cfg.seed, 21));
      const auto probe = make_batch<float>(data.test, idx, ChannelStats::compute(data.train));
      runs.push_back(analyze_pair(teacher, student, probe, "random", csv));
    }
    if (!a.checkpoints.empty()) {
      if (a.checkpoints.size() < 2) throw ConfigError("--checkpoints needs a teacher followed by students");
      const auto tck = read_checkpoint_file(a.checkpoints[0]);
      const auto teacher = model_from_checkpoint(tck);
      const auto probe = make_batch<float>(data.test, idx, stats_from_checkpoint(tck));
      for (std::size_t k = 1; k < a.checkpoints.size(); ++k) {
        const auto sck = read_checkpoint_file(a.checkpoints[k]);
        auto entry = analyze_pair(teacher, model_from_checkpoint(sck), probe, a.checkpoints[k], csv);
        if (auto it = sck.config.find("result.sm_score"); it != sck.config.end() && !it->second.empty()) {
          entry["run_sm_score"] = std::stod(it->second);
          entry["run_log_sm_score"] = std::log(std::stod(it->second));
        }
        if (auto it = sck.config.find("config.mode"); it != sck.config.end()) entry["mode"] = it->second;
        runs.push_back(entry);
      }
    }
    report["runs"] = runs;
  }
  if (!a.ari.empty()) report["relative_improvement"] = ari_table(a.ari);
  const std::string text = report.dump(2) + "\n";
  std::cout << text;
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    write_file_atomic(fs::path(c.out) / "analysis.csv", csv);
    write_file_atomic(fs::path(c.out) / "analysis.json", text);
  }
  return kOk;
}

int cmd_report(const Common& c, const std::string& runs_dir, bool svg) {
  if (runs_dir.empty()) throw ConfigError("report needs --runs DIR");
  const auto runs = collect_runs(runs_dir);
  const auto rows = aggregate_runs(runs);
  const auto table = format_table(rows);
  std::cout << table;
  const fs::path out = c.out.empty() ? fs::path(runs_dir) : fs::path(c.out);
  fs::create_directories(out);
  write_file_atomic(out / "report.csv", aggregate_csv(rows));
  write_file_atomic(out / "report.txt", table);
  if (svg) {
    write_file_atomic(out / "accuracy.svg", svg_plot(runs, "test_accuracy", false));
    write_file_atomic(out / "sm_score.svg", svg_plot(runs, "sm_score", true));
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"calibkd: cross-layer knowledge distillation with semantic calibration"};
  app.require_subcommand(1);
  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "YAML experiment config");
    sub->add_option("--seed", common.seed, "Run seed (overrides the config)");
    sub->add_option("--few-shot", common.few_shot, "Fraction of each training class to keep");
    sub->add_option("--label-noise", common.label_noise, "Fraction of training labels to perturb");
    sub->add_option("--out", common.out, "Output directory");
    sub->add_flag("--force", common.force, "Overwrite existing outputs");
  };

  auto* defaults = app.add_subcommand("defaults", "Print the default config");
  auto* teacher = app.add_subcommand("train-teacher", "Train the teacher network");
  add_common(teacher);

  DistillArgs dargs;
  auto* dist = app.add_subcommand("distill", "Train a student against a teacher checkpoint");
  add_common(dist);
  dist->add_option("--teacher", dargs.teacher, "Teacher checkpoint");
  dist->add_option("--mode", dargs.mode, "semckd|kd|fitnet|equal|shared|semckd_tau|student");
  dist->add_option("--pair", dargs.pair, "One-hot pair STUDENT,TEACHER (1-based)");
  dist->add_option("--tau", dargs.tau, "Attention temperature");
  dist->add_option("--beta", dargs.beta, "Feature-map loss weight");

  std::string eval_ckpt, eval_split = "test";
  auto* eval = app.add_subcommand("evaluate", "Top-1 accuracy of a checkpoint");
  add_common(eval);
  eval->add_option("--checkpoint", eval_ckpt, "Checkpoint to evaluate");
  eval->add_option("--split", eval_split, "train|test")->check(CLI::IsMember({"train", "test"}));

  AnalyzeArgs aargs;
  auto* analyze = app.add_subcommand("analyze", "Procrustes, norm bounds, weight identity, SM-score, CKA, RI/ARI");
  add_common(analyze);
  analyze->add_option("--checkpoints", aargs.checkpoints, "Teacher checkpoint followed by student checkpoints");
  analyze->add_flag("--random", aargs.random, "Analyze a freshly initialized teacher/student pair");
  analyze->add_option("--ari", aargs.ari, "student=ACC,new=ACC,base=ACC[,base=ACC...]");
  analyze->add_option("--probe", aargs.probe, "Probe instances from the test split");

  std::string runs_dir;
  bool svg = false;
  auto* report = app.add_subcommand("report", "Aggregate finished runs per mode");
  report->add_option("--runs", runs_dir, "Directory holding run directories");
  report->add_option("--out", common.out, "Output directory (defaults to --runs)");
  report->add_flag("--svg", svg, "Also write SVG line plots");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (defaults->parsed()) return cmd_defaults();
    if (teacher->parsed()) return cmd_train_teacher(common);
    if (dist->parsed()) return cmd_distill(common, dargs);
    if (eval->parsed()) return cmd_evaluate(common, eval_ckpt, eval_split);
    if (analyze->parsed()) return cmd_analyze(common, aargs);
    if (report->parsed()) return cmd_report(common, runs_dir, svg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const ContractError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << "\n";
    return kNumeric;
  } catch (const DimensionError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }
  return kUsage;
}
