#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "calibkd/tensor.hpp"

namespace calibkd {

enum class Split { train, test };

/// Images (N x c x h x w, values in [0,1]) with integer labels in [0, K).
struct Dataset {
  std::size_t channels = 1, height = 1, width = 1;
  std::size_t num_classes = 2;
  Split split = Split::train;
  std::vector<float> images;
  std::vector<int> labels;

  std::size_t size() const { return labels.size(); }
  std::size_t image_size() const { return channels * height * width; }
  std::span<const float> image(std::size_t i) const {
    return std::span<const float>(images).subspan(i * image_size(), image_size());
  }

  std::vector<std::size_t> class_counts() const {
    std::vector<std::size_t> counts(num_classes, 0);
    for (int y : labels) ++counts.at(static_cast<std::size_t>(y));
    return counts;
  }

  void validate() const {
    if (labels.empty()) throw DataError("dataset is empty");
    if (images.size() != labels.size() * image_size()) {
      throw DataError("dataset holds " + std::to_string(images.size()) + " pixel values for " +
                      std::to_string(labels.size()) + " images of size " + std::to_string(image_size()));
    }
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= num_classes) {
        throw DataError("label " + std::to_string(labels[i]) + " of instance " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_classes) + ")");
      }
    }
  }

  /// Copy restricted to the given instance indices, in that order.
  Dataset subset(std::span<const std::size_t> indices) const {
    Dataset out = *this;
    out.images.clear();
    out.labels.clear();
    out.images.reserve(indices.size() * image_size());
    for (auto i : indices) {
      auto img = image(i);
      out.images.insert(out.images.end(), img.begin(), img.end());
      out.labels.push_back(labels.at(i));
    }
    return out;
  }
};

// ---------------------------------------------------------------------------
// Synthetic class-template data

struct SyntheticSpec {
  std::size_t num_classes = 10;
  std::size_t train_per_class = 200;
  std::size_t test_per_class = 100;
  std::size_t channels = 1, height = 16, width = 16;
  double difficulty = 0.8;
  double noise_scale = 0.4;  // noise sd per unit difficulty
  double shift_scale = 4.0;  // maximal translation (pixels) per unit difficulty
  std::uint64_t seed = 1;
};

struct SyntheticData {
  Dataset train;
  Dataset test;
  std::vector<std::vector<float>> templates;  // one per class, before noise
};

namespace detail {

inline std::vector<double> box_blur(const std::vector<double>& src, std::size_t c, std::size_t h, std::size_t w) {
  std::vector<double> out(src.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        double acc = 0.0;
        int count = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const long yy = static_cast<long>(y) + dy, xx = static_cast<long>(x) + dx;
            if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(w)) continue;
            acc += src[(ch * h + static_cast<std::size_t>(yy)) * w + static_cast<std::size_t>(xx)];
            ++count;
          }
        out[(ch * h + y) * w + x] = acc / count;
      }
  return out;
}

}  // namespace detail

/// Each class gets a smoothed Gaussian template (centred at 0.5 with spread
/// 0.2). An instance is its class template, cyclically shifted by up to
/// floor(shift_scale * difficulty) pixels along each axis, plus i.i.d.
/// Gaussian noise of standard deviation noise_scale * difficulty, clipped to
/// [0, 1].
inline SyntheticData gen_synthetic(const SyntheticSpec& spec) {
  if (spec.num_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.train_per_class == 0) throw ConfigError("synthetic data needs instances per class");
  if (spec.difficulty < 0.0) throw ConfigError("difficulty must be >= 0");
  const std::size_t c = spec.channels, h = spec.height, w = spec.width, n = c * h * w;
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);

  SyntheticData out;
  for (std::size_t k = 0; k < spec.num_classes; ++k) {
    std::vector<double> field(n);
    for (auto& v : field) v = normal(rng);
    field = detail::box_blur(detail::box_blur(field, c, h, w), c, h, w);
    double mean = 0.0, var = 0.0;
    for (double v : field) mean += v;
    mean /= static_cast<double>(n);
    for (double v : field) var += (v - mean) * (v - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    std::vector<float> tmpl(n);
    for (std::size_t i = 0; i < n; ++i)
      tmpl[i] = static_cast<float>(std::clamp(0.5 + 0.2 * (field[i] - mean) / sd, 0.0, 1.0));
    out.templates.push_back(std::move(tmpl));
  }

  const long max_shift = static_cast<long>(std::floor(spec.shift_scale * spec.difficulty));
  std::uniform_int_distribution<long> shift(-max_shift, max_shift);
  auto fill = [&](Dataset& ds, std::size_t per_class, Split split) {
    ds.channels = c;
    ds.height = h;
    ds.width = w;
    ds.num_classes = spec.num_classes;
    ds.split = split;
    ds.images.reserve(per_class * spec.num_classes * n);
    for (std::size_t i = 0; i < per_class; ++i)
      for (std::size_t k = 0; k < spec.num_classes; ++k) {
        const long dy = max_shift > 0 ? shift(rng) : 0;
        const long dx = max_shift > 0 ? shift(rng) : 0;
        const auto& tmpl = out.templates[k];
        for (std::size_t ch = 0; ch < c; ++ch)
          for (std::size_t y = 0; y < h; ++y)
            for (std::size_t x = 0; x < w; ++x) {
              const auto sy = static_cast<std::size_t>(((static_cast<long>(y) - dy) % static_cast<long>(h) + static_cast<long>(h)) % static_cast<long>(h));
              const auto sx = static_cast<std::size_t>(((static_cast<long>(x) - dx) % static_cast<long>(w) + static_cast<long>(w)) % static_cast<long>(w));
              const double noise = normal(rng) * spec.noise_scale * spec.difficulty;
              ds.images.push_back(static_cast<float>(std::clamp(tmpl[(ch * h + sy) * w + sx] + noise, 0.0, 1.0)));
            }
        ds.labels.push_back(static_cast<int>(k));
      }
  };
  fill(out.train, spec.train_per_class, Split::train);
  fill(out.test, spec.test_per_class, Split::test);
  return out;
}

// ---------------------------------------------------------------------------
// IDX and CSV ingestion

namespace detail {

class ByteReader {
 public:
  ByteReader(std::span<const std::uint8_t> bytes, std::string what) : bytes_(bytes), what_(std::move(what)) {}

  std::uint32_t u32_be() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v = (v << 8) | bytes_[offset_ + static_cast<std::size_t>(i)];
    offset_ += 4;
    return v;
  }

  std::span<const std::uint8_t> take(std::size_t n) {
    need(n);
    auto out = bytes_.subspan(offset_, n);
    offset_ += n;
    return out;
  }

  std::size_t offset() const { return offset_; }
  std::size_t remaining() const { return bytes_.size() - offset_; }

  [[noreturn]] void fail(const std::string& msg) const {
    throw FormatError(what_ + ": " + msg + " at byte offset " + std::to_string(offset_));
  }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - offset_ < n) {
      throw FormatError(what_ + ": truncated at byte offset " + std::to_string(bytes_.size()) + ", needed " +
                        std::to_string(n) + " bytes from offset " + std::to_string(offset_));
    }
  }

  std::span<const std::uint8_t> bytes_;
  std::string what_;
  std::size_t offset_ = 0;
};

inline std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

inline constexpr std::uint32_t kIdxImageMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

/// Parses an IDX image/label pair. Pixels are scaled by 1/255. The class
/// count is max(label)+1 unless `num_classes` is given.
inline Dataset parse_idx(std::span<const std::uint8_t> image_bytes, std::span<const std::uint8_t> label_bytes,
                         std::size_t num_classes = 0, Split split = Split::train) {
  detail::ByteReader img(image_bytes, "IDX images");
  if (img.u32_be() != kIdxImageMagic) {
    throw FormatError("IDX images: bad magic at byte offset 0 (expected 0x00000803)");
  }
  const std::uint32_t n = img.u32_be(), rows = img.u32_be(), cols = img.u32_be();
  const auto pixels = img.take(static_cast<std::size_t>(n) * rows * cols);
  if (img.remaining() != 0) img.fail("unexpected trailing data");

  detail::ByteReader lbl(label_bytes, "IDX labels");
  if (lbl.u32_be() != kIdxLabelMagic) {
    throw FormatError("IDX labels: bad magic at byte offset 0 (expected 0x00000801)");
  }
  const std::uint32_t n_labels = lbl.u32_be();
  if (n_labels != n) {
    throw FormatError("IDX labels: count " + std::to_string(n_labels) + " at byte offset 4 does not match " +
                      std::to_string(n) + " images");
  }
  const auto raw_labels = lbl.take(n);
  if (lbl.remaining() != 0) lbl.fail("unexpected trailing data");

  Dataset ds;
  ds.channels = 1;
  ds.height = rows;
  ds.width = cols;
  ds.split = split;
  ds.images.reserve(pixels.size());
  for (auto p : pixels) ds.images.push_back(static_cast<float>(p) / 255.0f);
  int max_label = 0;
  for (auto y : raw_labels) {
    ds.labels.push_back(static_cast<int>(y));
    max_label = std::max(max_label, static_cast<int>(y));
  }
  ds.num_classes = num_classes ? num_classes : std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  if (n == 0) throw DataError("IDX dataset has no images");
  ds.validate();
  return ds;
}

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path, std::size_t num_classes = 0,
                        Split split = Split::train) {
  auto img = detail::read_file(images_path);
  auto lbl = detail::read_file(labels_path);
  return parse_idx(img, lbl, num_classes, split);
}

/// CSV with a header row; the column named "label" holds the class, the
/// remaining columns are pixels in row-major (c, h, w) order. Pixel values
/// are divided by 255 when any of them exceeds 1.
inline Dataset parse_csv(std::istream& in, std::size_t channels, std::size_t height, std::size_t width,
                         std::size_t num_classes = 0, Split split = Split::train) {
  auto split_row = [](const std::string& line) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      cell.erase(0, cell.find_first_not_of(" \t\r"));
      cell.erase(cell.find_last_not_of(" \t\r") + 1);
      cells.push_back(cell);
    }
    return cells;
  };
  std::string line;
  if (!std::getline(in, line)) throw FormatError("CSV: missing header row");
  const auto header = split_row(line);
  const auto label_col = std::find(header.begin(), header.end(), "label");
  if (label_col == header.end()) throw FormatError("CSV: no column named \"label\"");
  const auto label_index = static_cast<std::size_t>(label_col - header.begin());
  const std::size_t expected = channels * height * width;
  if (header.size() - 1 != expected) {
    throw FormatError("CSV: " + std::to_string(header.size() - 1) + " pixel columns, expected " +
                      std::to_string(expected));
  }
  Dataset ds;
  ds.channels = channels;
  ds.height = height;
  ds.width = width;
  ds.split = split;
  std::size_t line_no = 1;
  float max_value = 0.0f;
  int max_label = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const auto cells = split_row(line);
    if (cells.size() != header.size()) {
      throw FormatError("CSV line " + std::to_string(line_no) + ": " + std::to_string(cells.size()) +
                        " cells, expected " + std::to_string(header.size()));
    }
    try {
      for (std::size_t j = 0; j < cells.size(); ++j) {
        if (j == label_index) {
          ds.labels.push_back(std::stoi(cells[j]));
          max_label = std::max(max_label, ds.labels.back());
        } else {
          ds.images.push_back(std::stof(cells[j]));
          max_value = std::max(max_value, ds.images.back());
        }
      }
    } catch (const std::logic_error&) {
      throw FormatError("CSV line " + std::to_string(line_no) + ": non-numeric cell");
    }
  }
  if (max_value > 1.0f) {
    for (auto& v : ds.images) v /= 255.0f;
  }
  ds.num_classes = num_classes ? num_classes : std::max<std::size_t>(2, static_cast<std::size_t>(max_label) + 1);
  ds.validate();
  return ds;
}

inline Dataset load_csv(const std::string& path, std::size_t channels, std::size_t height, std::size_t width,
                        std::size_t num_classes = 0, Split split = Split::train) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open " + path);
  return parse_csv(in, channels, height, width, num_classes, split);
}

// ---------------------------------------------------------------------------
// Transforms

/// Per-class stratified sample of ceil(fraction * n_k) instances, kept in
/// their original order.
inline Dataset subsample_few_shot(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw ConfigError("few-shot fraction must be in (0, 1]");
  std::vector<std::vector<std::size_t>> by_class(ds.num_classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class.at(static_cast<std::size_t>(ds.labels[i])).push_back(i);
  std::mt19937_64 rng(seed);
  std::vector<std::size_t> keep;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    auto& idx = by_class[k];
    const auto take = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(idx.size()) - 1e-9));
    if (take == 0) throw DataError("few-shot sampling left class " + std::to_string(k) + " empty");
    std::shuffle(idx.begin(), idx.end(), rng);
    keep.insert(keep.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(take));
  }
  std::sort(keep.begin(), keep.end());
  return ds.subset(keep);
}

/// Replaces exactly floor(fraction * N) training labels with a different,
/// uniformly drawn class. Test splits are returned unchanged.
inline Dataset inject_label_noise(const Dataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw ConfigError("label-noise fraction must be in [0, 1)");
  Dataset out = ds;
  if (ds.split == Split::test || fraction == 0.0) return out;
  const auto count = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(ds.size()) + 1e-9));
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  std::uniform_int_distribution<int> offset(1, static_cast<int>(ds.num_classes) - 1);
  for (std::size_t j = 0; j < count; ++j) {
    auto& y = out.labels[order[j]];
    y = (y + offset(rng)) % static_cast<int>(ds.num_classes);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Normalization and batching

/// Per-channel mean and standard deviation of a (training) split.
struct ChannelStats {
  std::vector<float> mean;
  std::vector<float> stddev;

  static ChannelStats compute(const Dataset& ds) {
    ChannelStats st;
    const std::size_t plane = ds.height * ds.width;
    for (std::size_t c = 0; c < ds.channels; ++c) {
      double sum = 0.0, sq = 0.0;
      for (std::size_t i = 0; i < ds.size(); ++i)
        for (std::size_t p = 0; p < plane; ++p) {
          const double v = ds.images[(i * ds.channels + c) * plane + p];
          sum += v;
          sq += v * v;
        }
      const double n = static_cast<double>(ds.size() * plane);
      const double m = sum / n;
      const double var = std::max(sq / n - m * m, 0.0);
      st.mean.push_back(static_cast<float>(m));
      st.stddev.push_back(static_cast<float>(var > 1e-12 ? std::sqrt(var) : 1.0));
    }
    return st;
  }

  static ChannelStats identity(std::size_t channels) {
    return {std::vector<float>(channels, 0.0f), std::vector<float>(channels, 1.0f)};
  }
};

struct BatchPlan {
  std::size_t batch_size = 16;
  std::uint64_t seed = 1;
  // The trailing partial batch is always dropped: the attention MLPs are b wide.
};

/// Index lists of one epoch: a seeded permutation cut into full batches.
inline std::vector<std::vector<std::size_t>> epoch_batches(std::size_t n, const BatchPlan& plan, std::size_t epoch) {
  if (plan.batch_size < 2) throw ConfigError("batch size must be >= 2");
  if (n < plan.batch_size) {
    throw ConfigError("dataset of " + std::to_string(n) + " instances is smaller than batch size " +
                      std::to_string(plan.batch_size));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(plan.seed * 0x9E3779B97F4A7C15ULL + epoch);
  std::shuffle(order.begin(), order.end(), rng);
  std::vector<std::vector<std::size_t>> out;
  for (std::size_t start = 0; start + plan.batch_size <= n; start += plan.batch_size)
    out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                     order.begin() + static_cast<std::ptrdiff_t>(start + plan.batch_size));
  return out;
}

template <class T>
struct Batch {
  Tensor<T> images;  // (b, c, h, w), normalized
  std::vector<int> labels;
};

template <class T>
Batch<T> make_batch(const Dataset& ds, std::span<const std::size_t> indices, const ChannelStats& stats) {
  const std::size_t plane = ds.height * ds.width;
  std::vector<T> values;
  values.reserve(indices.size() * ds.image_size());
  std::vector<int> labels;
  for (auto i : indices) {
    auto img = ds.image(i);
    for (std::size_t c = 0; c < ds.channels; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        values.push_back(static_cast<T>((img[c * plane + p] - stats.mean[c]) / stats.stddev[c]));
    labels.push_back(ds.labels.at(i));
  }
  return {Tensor<T>({indices.size(), ds.channels, ds.height, ds.width}, std::move(values)), std::move(labels)};
}

/// All batches of one epoch, in order.
template <class T>
std::vector<Batch<T>> batches(const Dataset& ds, const BatchPlan& plan, std::size_t epoch, const ChannelStats& stats) {
  std::vector<Batch<T>> out;
  for (const auto& idx : epoch_batches(ds.size(), plan, epoch)) out.push_back(make_batch<T>(ds, idx, stats));
  return out;
}

}  // namespace calibkd
