#pragma once

#include <charconv>
#include <cstdint>
#include <functional>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "calibkd/checkpoint.hpp"
#include "calibkd/data.hpp"
#include "calibkd/trainer.hpp"

// Experiment configuration: a YAML document mirroring the training,
// distillation and data settings. Unknown keys are rejected.
namespace calibkd {

enum class DataSource { synthetic, idx, csv };

struct DataConfig {
  DataSource source = DataSource::synthetic;
  SyntheticSpec synthetic;
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::string train_csv, test_csv;                                  // csv
  double few_shot = 1.0;     // fraction of each class kept
  double label_noise = 0.0;  // fraction of training labels perturbed
};

struct ExperimentConfig {
  std::uint64_t seed = 1;
  std::string out = "runs";
  Mode mode = Mode::semckd;
  DataConfig data;
  NetworkSpec teacher;
  TrainConfig teacher_train;
  NetworkSpec student;
  TrainConfig student_train;

  ExperimentConfig() {
    teacher.stages = {{16, 1, true}, {32, 1, true}, {32, 1, true}, {32, 1, false}};
    student.stages = {{8, 1, true}, {16, 1, true}, {16, 1, true}};
    for (TrainConfig* tc : {&teacher_train, &student_train}) {
      tc->epochs = 30;
      tc->batch_size = 16;
      tc->lr = {0.01, {19, 26}, 0.1};
    }
    student_train.distill.beta = 1.0;
    student_train.distill.pair = {1, 2};
  }

  /// Copies the shared settings (seed, image shape, classes) into the
  /// network specs and training configs.
  void sync() {
    const auto& s = data.synthetic;
    for (NetworkSpec* n : {&teacher, &student}) {
      n->in_channels = s.channels;
      n->in_height = s.height;
      n->in_width = s.width;
      n->num_classes = s.num_classes;
    }
    teacher_train.seed = seed;
    student_train.seed = seed;
  }

  void validate() const {
    teacher.validate();
    student.validate();
    teacher_train.validate();
    student_train.validate();
    student_train.distill.validate(student.stages.size(), teacher.stages.size());
    if (!(data.few_shot > 0.0 && data.few_shot <= 1.0)) throw ConfigError("data.few_shot must be in (0, 1]");
    if (!(data.label_noise >= 0.0 && data.label_noise < 1.0)) throw ConfigError("data.label_noise must be in [0, 1)");
    if (data.synthetic.num_classes < 2) throw ConfigError("data.classes must be >= 2");
  }
};

namespace detail {

inline std::string where(const YAML::Node& node) {
  const auto m = node.Mark();
  if (m.line < 0) return "";
  return " (line " + std::to_string(m.line + 1) + ", column " + std::to_string(m.column + 1) + ")";
}

/// Rejects keys of `node` outside `allowed`, naming the offending key.
inline void check_keys(const YAML::Node& node, const std::string& section, const std::set<std::string>& allowed) {
  if (!node.IsMap()) throw ConfigError("config section '" + section + "' must be a mapping" + where(node));
  for (const auto& kv : node) {
    const auto key = kv.first.as<std::string>();
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + (section.empty() ? key : section + "." + key) + "'" +
                        where(kv.first));
    }
  }
}

template <class V>
void read(const YAML::Node& node, const std::string& key, const std::string& section, V& out) {
  if (!node[key]) return;
  try {
    out = node[key].as<V>();
  } catch (const YAML::Exception&) {
    throw ConfigError("config key '" + section + key + "' has an invalid value" + where(node[key]));
  }
}

inline std::vector<StageSpec> read_stages(const YAML::Node& node, const std::string& section) {
  if (!node.IsSequence()) throw ConfigError(section + ".stages must be a list" + where(node));
  std::vector<StageSpec> stages;
  for (const auto& st : node) {
    check_keys(st, section + ".stages[]", {"channels", "convs", "downsample"});
    StageSpec s;
    read(st, "channels", section + ".stages[].", s.out_channels);
    read(st, "convs", section + ".stages[].", s.conv_count);
    read(st, "downsample", section + ".stages[].", s.downsample);
    stages.push_back(s);
  }
  return stages;
}

inline void read_train(const YAML::Node& node, const std::string& section, TrainConfig& tc) {
  check_keys(node, section,
             {"epochs", "batch_size", "lr", "lr_milestones", "lr_factor", "momentum", "weight_decay", "eval_every"});
  const auto p = section + ".";
  read(node, "epochs", p, tc.epochs);
  read(node, "batch_size", p, tc.batch_size);
  read(node, "lr", p, tc.lr.initial);
  read(node, "lr_milestones", p, tc.lr.milestones);
  read(node, "lr_factor", p, tc.lr.factor);
  read(node, "momentum", p, tc.momentum);
  read(node, "weight_decay", p, tc.weight_decay);
  read(node, "eval_every", p, tc.eval_every);
}

template <class E>
E read_enum(const YAML::Node& node, const std::string& key, const std::string& section,
            const std::vector<std::pair<std::string, E>>& options, E fallback) {
  if (!node[key]) return fallback;
  const auto text = node[key].as<std::string>();
  for (const auto& [name, value] : options)
    if (name == text) return value;
  std::string names;
  for (const auto& [name, value] : options) names += (names.empty() ? "" : "|") + name;
  throw ConfigError("config key '" + section + key + "' must be one of " + names + ", got '" + text + "'" +
                    where(node[key]));
}

inline const std::vector<std::pair<std::string, DataSource>>& source_names() {
  static const std::vector<std::pair<std::string, DataSource>> v{
      {"synthetic", DataSource::synthetic}, {"idx", DataSource::idx}, {"csv", DataSource::csv}};
  return v;
}
inline const std::vector<std::pair<std::string, TapPosition>>& tap_names() {
  static const std::vector<std::pair<std::string, TapPosition>> v{{"post_activation", TapPosition::post_activation},
                                                                  {"pre_activation", TapPosition::pre_activation}};
  return v;
}
inline const std::vector<std::pair<std::string, MlpMode>>& mlp_names() {
  static const std::vector<std::pair<std::string, MlpMode>> v{{"nonlinear", MlpMode::nonlinear},
                                                              {"linear", MlpMode::linear}};
  return v;
}
inline const std::vector<std::pair<std::string, Reduction>>& reduction_names() {
  static const std::vector<std::pair<std::string, Reduction>> v{{"mean", Reduction::mean}, {"sum", Reduction::sum}};
  return v;
}

template <class E>
std::string enum_text(const std::vector<std::pair<std::string, E>>& options, E value) {
  for (const auto& [name, v] : options)
    if (v == value) return name;
  return "?";
}

}  // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
  YAML::Node root;
  try {
    root = YAML::Load(text);
  } catch (const YAML::ParserException& e) {
    throw ConfigError(std::string("config parse error: ") + e.what());
  }
  ExperimentConfig cfg;
  if (root.IsNull()) {
    cfg.sync();
    return cfg;
  }
  using detail::read;
  detail::check_keys(root, "", {"seed", "out", "mode", "data", "teacher", "student", "distill"});
  read(root, "seed", "", cfg.seed);
  read(root, "out", "", cfg.out);
  if (root["mode"]) cfg.mode = parse_mode(root["mode"].as<std::string>());

  if (const auto d = root["data"]) {
    detail::check_keys(d, "data",
                       {"source", "classes", "train_per_class", "test_per_class", "shape", "difficulty", "noise_scale",
                        "shift_scale", "seed", "train_images", "train_labels", "test_images", "test_labels",
                        "train_csv", "test_csv", "few_shot", "label_noise"});
    auto& s = cfg.data.synthetic;
    cfg.data.source = detail::read_enum(d, "source", "data.", detail::source_names(), cfg.data.source);
    read(d, "classes", "data.", s.num_classes);
    read(d, "train_per_class", "data.", s.train_per_class);
    read(d, "test_per_class", "data.", s.test_per_class);
    if (d["shape"]) {
      std::vector<std::size_t> shape;
      read(d, "shape", "data.", shape);
      if (shape.size() != 3) throw ConfigError("data.shape must be [channels, height, width]" + detail::where(d["shape"]));
      s.channels = shape[0];
      s.height = shape[1];
      s.width = shape[2];
    }
    read(d, "difficulty", "data.", s.difficulty);
    read(d, "noise_scale", "data.", s.noise_scale);
    read(d, "shift_scale", "data.", s.shift_scale);
    read(d, "seed", "data.", s.seed);
    read(d, "train_images", "data.", cfg.data.train_images);
    read(d, "train_labels", "data.", cfg.data.train_labels);
    read(d, "test_images", "data.", cfg.data.test_images);
    read(d, "test_labels", "data.", cfg.data.test_labels);
    read(d, "train_csv", "data.", cfg.data.train_csv);
    read(d, "test_csv", "data.", cfg.data.test_csv);
    read(d, "few_shot", "data.", cfg.data.few_shot);
    read(d, "label_noise", "data.", cfg.data.label_noise);
  }
  for (auto [name, spec, tc] : {std::tuple{"teacher", &cfg.teacher, &cfg.teacher_train},
                                std::tuple{"student", &cfg.student, &cfg.student_train}}) {
    if (const auto n = root[name]) {
      detail::check_keys(n, name, {"stages", "train"});
      if (n["stages"]) spec->stages = detail::read_stages(n["stages"], name);
      if (n["train"]) detail::read_train(n["train"], std::string(name) + ".train", *tc);
    }
  }
  if (const auto d = root["distill"]) {
    auto& dc = cfg.student_train.distill;
    detail::check_keys(d, "distill",
                       {"temperature", "beta", "tau", "pair", "tap_position", "mlp", "reduction", "per_layer_mlp"});
    read(d, "temperature", "distill.", dc.temperature);
    read(d, "beta", "distill.", dc.beta);
    read(d, "tau", "distill.", dc.tau);
    if (d["pair"]) {
      std::vector<std::size_t> pair;
      read(d, "pair", "distill.", pair);
      if (pair.size() != 2 || pair[0] < 1 || pair[1] < 1) {
        throw ConfigError("distill.pair must be [student_layer, teacher_layer], 1-based" + detail::where(d["pair"]));
      }
      dc.pair = {pair[0] - 1, pair[1] - 1};
    }
    dc.tap_position = detail::read_enum(d, "tap_position", "distill.", detail::tap_names(), dc.tap_position);
    dc.mlp_mode = detail::read_enum(d, "mlp", "distill.", detail::mlp_names(), dc.mlp_mode);
    dc.reduction = detail::read_enum(d, "reduction", "distill.", detail::reduction_names(), dc.reduction);
    read(d, "per_layer_mlp", "distill.", dc.per_layer_mlp);
  }
  cfg.sync();
  return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  try {
    return parse_config(ss.str());
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

namespace detail {

/// Shortest text that reads back to the same double.
inline std::string shortest(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

}  // namespace detail

/// The configuration as a YAML document that parse_config accepts.
inline std::string to_yaml(const ExperimentConfig& cfg) {
  YAML::Emitter out;
  out << YAML::BeginMap;
  out << YAML::Key << "seed" << YAML::Value << cfg.seed;
  out << YAML::Key << "out" << YAML::Value << cfg.out;
  out << YAML::Key << "mode" << YAML::Value << mode_name(cfg.mode);
  const auto& d = cfg.data;
  const auto& s = d.synthetic;
  out << YAML::Key << "data" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "source" << YAML::Value << detail::enum_text(detail::source_names(), d.source);
  out << YAML::Key << "classes" << YAML::Value << s.num_classes;
  out << YAML::Key << "train_per_class" << YAML::Value << s.train_per_class;
  out << YAML::Key << "test_per_class" << YAML::Value << s.test_per_class;
  out << YAML::Key << "shape" << YAML::Value << YAML::Flow << std::vector<std::size_t>{s.channels, s.height, s.width};
  out << YAML::Key << "difficulty" << YAML::Value << detail::shortest(s.difficulty);
  out << YAML::Key << "noise_scale" << YAML::Value << detail::shortest(s.noise_scale);
  out << YAML::Key << "shift_scale" << YAML::Value << detail::shortest(s.shift_scale);
  out << YAML::Key << "seed" << YAML::Value << s.seed;
  out << YAML::Key << "train_images" << YAML::Value << d.train_images;
  out << YAML::Key << "train_labels" << YAML::Value << d.train_labels;
  out << YAML::Key << "test_images" << YAML::Value << d.test_images;
  out << YAML::Key << "test_labels" << YAML::Value << d.test_labels;
  out << YAML::Key << "train_csv" << YAML::Value << d.train_csv;
  out << YAML::Key << "test_csv" << YAML::Value << d.test_csv;
  out << YAML::Key << "few_shot" << YAML::Value << detail::shortest(d.few_shot);
  out << YAML::Key << "label_noise" << YAML::Value << detail::shortest(d.label_noise);
  out << YAML::EndMap;

  auto emit_net = [&](const char* name, const NetworkSpec& spec, const TrainConfig& tc) {
    out << YAML::Key << name << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "stages" << YAML::Value << YAML::BeginSeq;
    for (const auto& st : spec.stages) {
      out << YAML::Flow << YAML::BeginMap << YAML::Key << "channels" << YAML::Value << st.out_channels << YAML::Key
          << "convs" << YAML::Value << st.conv_count << YAML::Key << "downsample" << YAML::Value << st.downsample
          << YAML::EndMap;
    }
    out << YAML::EndSeq;
    out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
    out << YAML::Key << "epochs" << YAML::Value << tc.epochs;
    out << YAML::Key << "batch_size" << YAML::Value << tc.batch_size;
    out << YAML::Key << "lr" << YAML::Value << detail::shortest(tc.lr.initial);
    out << YAML::Key << "lr_milestones" << YAML::Value << YAML::Flow << tc.lr.milestones;
    out << YAML::Key << "lr_factor" << YAML::Value << detail::shortest(tc.lr.factor);
    out << YAML::Key << "momentum" << YAML::Value << detail::shortest(tc.momentum);
    out << YAML::Key << "weight_decay" << YAML::Value << detail::shortest(tc.weight_decay);
    out << YAML::Key << "eval_every" << YAML::Value << tc.eval_every;
    out << YAML::EndMap << YAML::EndMap;
  };
  emit_net("teacher", cfg.teacher, cfg.teacher_train);
  emit_net("student", cfg.student, cfg.student_train);

  const auto& dc = cfg.student_train.distill;
  out << YAML::Key << "distill" << YAML::Value << YAML::BeginMap;
  out << YAML::Key << "temperature" << YAML::Value << detail::shortest(dc.temperature);
  out << YAML::Key << "beta" << YAML::Value << detail::shortest(dc.beta);
  out << YAML::Key << "tau" << YAML::Value << detail::shortest(dc.tau);
  out << YAML::Key << "pair" << YAML::Value << YAML::Flow
      << std::vector<std::size_t>{dc.pair.student + 1, dc.pair.teacher + 1};
  out << YAML::Key << "tap_position" << YAML::Value << detail::enum_text(detail::tap_names(), dc.tap_position);
  out << YAML::Key << "mlp" << YAML::Value << detail::enum_text(detail::mlp_names(), dc.mlp_mode);
  out << YAML::Key << "reduction" << YAML::Value << detail::enum_text(detail::reduction_names(), dc.reduction);
  out << YAML::Key << "per_layer_mlp" << YAML::Value << dc.per_layer_mlp;
  out << YAML::EndMap;
  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

/// Flattened "section.key" view of the YAML document, used as the
/// checkpoint's config snapshot.
inline KeyValues to_key_values(const ExperimentConfig& cfg) {
  KeyValues kv;
  std::function<void(const YAML::Node&, const std::string&)> walk = [&](const YAML::Node& node,
                                                                       const std::string& prefix) {
    if (node.IsMap()) {
      for (const auto& it : node) walk(it.second, prefix.empty() ? it.first.as<std::string>() : prefix + "." + it.first.as<std::string>());
    } else if (node.IsSequence()) {
      YAML::Node flow = YAML::Clone(node);
      flow.SetStyle(YAML::EmitterStyle::Flow);
      YAML::Emitter e;
      e << flow;
      kv["config." + prefix] = e.c_str();
    } else {
      kv["config." + prefix] = node.IsNull() ? "" : node.as<std::string>();
    }
  };
  walk(YAML::Load(to_yaml(cfg)), "");
  return kv;
}

// ---------------------------------------------------------------------------
// Data preparation

struct PreparedData {
  Dataset train;
  Dataset test;
};

/// Loads or generates both splits. Few-shot and label-noise transforms are
/// applied to the training split with `transform_seed`.
inline PreparedData prepare_data(const DataConfig& dc, std::uint64_t transform_seed) {
  PreparedData out;
  const auto& s = dc.synthetic;
  switch (dc.source) {
    case DataSource::synthetic: {
      auto gen = gen_synthetic(s);
      out.train = std::move(gen.train);
      out.test = std::move(gen.test);
      break;
    }
    case DataSource::idx:
      if (dc.train_images.empty() || dc.train_labels.empty() || dc.test_images.empty() || dc.test_labels.empty()) {
        throw ConfigError("data.source idx needs train_images, train_labels, test_images and test_labels");
      }
      out.train = load_idx(dc.train_images, dc.train_labels, s.num_classes, Split::train);
      out.test = load_idx(dc.test_images, dc.test_labels, s.num_classes, Split::test);
      break;
    case DataSource::csv:
      if (dc.train_csv.empty() || dc.test_csv.empty()) throw ConfigError("data.source csv needs train_csv and test_csv");
      out.train = load_csv(dc.train_csv, s.channels, s.height, s.width, s.num_classes, Split::train);
      out.test = load_csv(dc.test_csv, s.channels, s.height, s.width, s.num_classes, Split::test);
      break;
  }
  if (out.train.channels != s.channels || out.train.height != s.height || out.train.width != s.width) {
    throw DataError("training images are " + std::to_string(out.train.channels) + "x" +
                    std::to_string(out.train.height) + "x" + std::to_string(out.train.width) +
                    ", config data.shape says otherwise");
  }
  if (dc.few_shot < 1.0) out.train = subsample_few_shot(out.train, dc.few_shot, derive_seed(transform_seed, 10));
  if (dc.label_noise > 0.0) out.train = inject_label_noise(out.train, dc.label_noise, derive_seed(transform_seed, 11));
  return out;
}

}  // namespace calibkd
