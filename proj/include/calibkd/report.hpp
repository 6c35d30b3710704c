#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "calibkd/checkpoint.hpp"
#include "calibkd/trainer.hpp"

// Metric files: one CSV row per epoch plus a flagged final row, and a JSON
// summary that is written last.
namespace calibkd {

using Json = nlohmann::ordered_json;

inline std::string format_number(double v) {
  if (std::isnan(v)) return "";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

struct RunInfo {
  std::string run_id;
  std::uint64_t seed = 0;
  Mode mode = Mode::semckd;
  bool has_fmd = false;  // feature-map columns present
};

inline std::vector<std::string> metrics_columns(bool has_fmd) {
  std::vector<std::string> cols{"run_id", "seed", "mode", "epoch", "lr", "loss"};
  if (has_fmd) cols.push_back("fmd_loss");
  cols.insert(cols.end(), {"train_accuracy", "test_accuracy", "sm_score"});
  if (has_fmd) cols.push_back("attention_entropy");
  cols.push_back("final");
  return cols;
}

inline std::string metrics_csv(const RunInfo& info, const RunResult& result) {
  std::ostringstream out;
  const auto cols = metrics_columns(info.has_fmd);
  for (std::size_t i = 0; i < cols.size(); ++i) out << (i ? "," : "") << cols[i];
  out << "\n";
  auto row = [&](const EpochMetrics& m, bool final, double sm) {
    out << info.run_id << "," << info.seed << "," << mode_name(info.mode) << "," << m.epoch << "," << format_number(m.lr)
        << "," << format_number(m.loss);
    if (info.has_fmd) out << "," << format_number(m.fmd_loss);
    out << "," << format_number(m.train_accuracy) << "," << format_number(m.test_accuracy) << "," << format_number(sm);
    if (info.has_fmd) out << "," << format_number(m.attention_entropy);
    out << "," << (final ? 1 : 0) << "\n";
  };
  for (const auto& m : result.history) row(m, false, m.sm_score);
  if (!result.history.empty()) row(result.history.back(), true, result.sm_score);
  return out.str();
}

inline Json matrix_json(const std::vector<std::vector<double>>& m) {
  Json arr = Json::array();
  for (const auto& row : m) {
    Json r = Json::array();
    for (double v : row) r.push_back(std::isnan(v) ? Json(nullptr) : Json(v));
    arr.push_back(r);
  }
  return arr;
}

/// Deterministic content of a run summary; timing lives in its own field.
inline Json summary_json(const RunInfo& info, const RunResult& result, const DistillConfig* distill,
                         const Json& config_doc) {
  Json j;
  j["run_id"] = info.run_id;
  j["mode"] = mode_name(info.mode);
  j["seed"] = info.seed;
  j["accuracy"] = result.test_accuracy;
  j["epochs"] = result.history.size();
  if (!std::isnan(result.sm_score)) {
    j["sm_score"] = result.sm_score;
    j["log_sm_score"] = std::log(result.sm_score);
  } else {
    j["sm_score"] = nullptr;
    j["log_sm_score"] = nullptr;
  }
  if (distill) {
    j["beta"] = distill->beta;
    j["tau"] = distill->tau;
    j["temperature"] = distill->temperature;
    j["pair"] = {distill->pair.student + 1, distill->pair.teacher + 1};
  }
  if (!result.mean_alpha.empty()) j["mean_alpha"] = matrix_json(result.mean_alpha);
  if (!result.cka.empty()) {
    j["cka"] = matrix_json(result.cka);
    double sum = 0.0;
    std::size_t n = 0;
    for (const auto& row : result.cka)
      for (double v : row)
        if (!std::isnan(v)) {
          sum += v;
          ++n;
        }
    j["cka_mean"] = n ? Json(sum / static_cast<double>(n)) : Json(nullptr);
  }
  if (!result.teacher_hash.empty()) j["teacher_hash"] = result.teacher_hash;
  j["config"] = config_doc;
  return j;
}

inline std::string utc_timestamp(std::chrono::system_clock::time_point t) {
  const std::time_t tt = std::chrono::system_clock::to_time_t(t);
  std::tm tm{};
  gmtime_r(&tt, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Adds the "timing" field, excluded from determinism comparisons.
inline void add_timing(Json& summary, std::chrono::system_clock::time_point started,
                       std::chrono::system_clock::time_point finished) {
  summary["timing"] = {{"started", utc_timestamp(started)},
                       {"finished", utc_timestamp(finished)},
                       {"seconds", std::chrono::duration<double>(finished - started).count()}};
}

// ---------------------------------------------------------------------------
// Aggregation over run directories

struct ModeRow {
  std::string mode;
  std::size_t runs = 0;
  double acc_mean = 0.0, acc_std = 0.0;
  double sm_mean = kNan, sm_std = kNan;  // log SM-score
};

inline std::pair<double, double> mean_std(const std::vector<double>& v) {
  if (v.empty()) return {kNan, kNan};
  double m = 0.0;
  for (double x : v) m += x;
  m /= static_cast<double>(v.size());
  if (v.size() < 2) return {m, 0.0};
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return {m, std::sqrt(s / static_cast<double>(v.size() - 1))};
}

struct RunRecord {
  std::filesystem::path dir;
  Json summary;
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

/// Every directory below `root` holding a summary.json (written last, so
/// unfinished runs are skipped).
inline std::vector<RunRecord> collect_runs(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw DataError("runs directory " + root.string() + " does not exist");
  std::vector<fs::path> dirs;
  for (const auto& entry : fs::recursive_directory_iterator(root))
    if (entry.is_regular_file() && entry.path().filename() == "summary.json") dirs.push_back(entry.path().parent_path());
  std::sort(dirs.begin(), dirs.end());
  std::vector<RunRecord> runs;
  for (const auto& dir : dirs) {
    RunRecord r;
    r.dir = dir;
    std::ifstream js(dir / "summary.json");
    try {
      r.summary = Json::parse(js);
    } catch (const Json::exception& e) {
      throw FormatError((dir / "summary.json").string() + ": " + e.what());
    }
    std::ifstream csv(dir / "metrics.csv");
    if (!csv) throw FormatError("run " + dir.string() + " has a summary but no metrics.csv");
    std::string line;
    if (!std::getline(csv, line)) throw FormatError((dir / "metrics.csv").string() + ": empty");
    r.header = split_csv_line(line);
    std::size_t lineno = 1;
    while (std::getline(csv, line)) {
      ++lineno;
      auto cells = split_csv_line(line);
      if (cells.size() != r.header.size()) {
        throw FormatError((dir / "metrics.csv").string() + ": line " + std::to_string(lineno) + " has " +
                          std::to_string(cells.size()) + " fields, header has " + std::to_string(r.header.size()));
      }
      r.rows.push_back(std::move(cells));
    }
    runs.push_back(std::move(r));
  }
  if (runs.empty()) throw DataError("no finished runs (summary.json) under " + root.string());
  return runs;
}

/// One row per mode, sorted by mode name. Runs of one mode must share
/// the metrics column schema.
inline std::vector<ModeRow> aggregate_runs(const std::vector<RunRecord>& runs) {
  std::map<std::string, std::vector<const RunRecord*>> by_mode;
  for (const auto& r : runs) by_mode[r.summary.at("mode").get<std::string>()].push_back(&r);
  std::vector<ModeRow> out;
  for (const auto& [mode, list] : by_mode) {
    for (const auto* r : list)
      if (r->header != list.front()->header) {
        throw FormatError("inconsistent metrics columns between " + list.front()->dir.string() + " and " +
                          r->dir.string());
      }
    std::vector<double> acc, sm;
    for (const auto* r : list) {
      acc.push_back(r->summary.at("accuracy").get<double>());
      if (r->summary.contains("log_sm_score") && !r->summary["log_sm_score"].is_null())
        sm.push_back(r->summary["log_sm_score"].get<double>());
    }
    ModeRow row;
    row.mode = mode;
    row.runs = list.size();
    std::tie(row.acc_mean, row.acc_std) = mean_std(acc);
    if (!sm.empty()) std::tie(row.sm_mean, row.sm_std) = mean_std(sm);
    out.push_back(row);
  }
  return out;
}

inline std::string format_table(const std::vector<ModeRow>& rows) {
  std::ostringstream out;
  char buf[160];
  std::snprintf(buf, sizeof buf, "%-12s %5s  %-16s %-16s\n", "mode", "runs", "accuracy (%)", "log SM-score");
  out << buf;
  for (const auto& r : rows) {
    std::string sm = "-";
    if (!std::isnan(r.sm_mean)) {
      char s[40];
      std::snprintf(s, sizeof s, "%.2f +- %.2f", r.sm_mean, r.sm_std);
      sm = s;
    }
    char acc[40];
    std::snprintf(acc, sizeof acc, "%.2f +- %.2f", 100.0 * r.acc_mean, 100.0 * r.acc_std);
    std::snprintf(buf, sizeof buf, "%-12s %5zu  %-16s %-16s\n", r.mode.c_str(), r.runs, acc, sm.c_str());
    out << buf;
  }
  return out.str();
}

inline std::string aggregate_csv(const std::vector<ModeRow>& rows) {
  std::ostringstream out;
  out << "mode,runs,accuracy_mean,accuracy_std,log_sm_mean,log_sm_std\n";
  for (const auto& r : rows)
    out << r.mode << "," << r.runs << "," << format_number(r.acc_mean) << "," << format_number(r.acc_std) << ","
        << format_number(r.sm_mean) << "," << format_number(r.sm_std) << "\n";
  return out.str();
}

/// Line plot of one metrics column against epoch, one polyline per run.
inline std::string svg_plot(const std::vector<RunRecord>& runs, const std::string& column, bool log_scale) {
  struct Series {
    std::string label;
    std::vector<std::pair<double, double>> points;
  };
  std::vector<Series> series;
  double xmin = 1e300, xmax = -1e300, ymin = 1e300, ymax = -1e300;
  for (const auto& r : runs) {
    auto col = std::find(r.header.begin(), r.header.end(), column);
    auto ep = std::find(r.header.begin(), r.header.end(), "epoch");
    auto fin = std::find(r.header.begin(), r.header.end(), "final");
    if (col == r.header.end() || ep == r.header.end()) continue;
    Series s{r.summary.at("run_id").get<std::string>(), {}};
    for (const auto& row : r.rows) {
      if (fin != r.header.end() && row[static_cast<std::size_t>(fin - r.header.begin())] == "1") continue;
      const auto& cell = row[static_cast<std::size_t>(col - r.header.begin())];
      if (cell.empty()) continue;
      double y = std::stod(cell);
      if (log_scale) {
        if (!(y > 0.0)) continue;
        y = std::log(y);
      }
      const double x = std::stod(row[static_cast<std::size_t>(ep - r.header.begin())]);
      s.points.emplace_back(x, y);
      xmin = std::min(xmin, x);
      xmax = std::max(xmax, x);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    if (!s.points.empty()) series.push_back(std::move(s));
  }
  const double W = 640, H = 400, M = 50;
  std::ostringstream out;
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  out << "<text x=\"" << M << "\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">" << (log_scale ? "log " : "")
      << column << " vs epoch</text>\n";
  if (series.empty()) {
    out << "</svg>\n";
    return out.str();
  }
  if (xmax == xmin) xmax = xmin + 1;
  if (ymax == ymin) ymax = ymin + 1;
  auto px = [&](double x) { return M + (x - xmin) / (xmax - xmin) * (W - 2 * M); };
  auto py = [&](double y) { return H - M - (y - ymin) / (ymax - ymin) * (H - 2 * M); };
  out << "<line x1=\"" << M << "\" y1=\"" << H - M << "\" x2=\"" << W - M << "\" y2=\"" << H - M
      << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << M << "\" y1=\"" << M << "\" x2=\"" << M << "\" y2=\"" << H - M << "\" stroke=\"black\"/>\n";
  out << "<text x=\"5\" y=\"" << M << "\" font-size=\"10\">" << format_number(ymax) << "</text>\n";
  out << "<text x=\"5\" y=\"" << H - M << "\" font-size=\"10\">" << format_number(ymin) << "</text>\n";
  static const char* colors[] = {"#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2"};
  for (std::size_t i = 0; i < series.size(); ++i) {
    out << "<polyline fill=\"none\" stroke=\"" << colors[i % 7] << "\" points=\"";
    for (const auto& [x, y] : series[i].points) out << px(x) << "," << py(y) << " ";
    out << "\"/>\n";
    out << "<text x=\"" << W - M + 2 << "\" y=\"" << M + 12 * static_cast<double>(i) << "\" font-size=\"9\" fill=\""
        << colors[i % 7] << "\">" << series[i].label << "</text>\n";
  }
  out << "</svg>\n";
  return out.str();
}

}  // namespace calibkd
