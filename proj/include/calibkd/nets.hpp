#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "calibkd/ops.hpp"

namespace calibkd {

/// One building block: `conv_count` 3x3 convolutions, each followed by a
/// ReLU. With `downsample` the first convolution has stride 2.
struct StageSpec {
  std::size_t out_channels = 8;
  std::size_t conv_count = 1;
  bool downsample = false;

  bool operator==(const StageSpec&) const = default;
};

struct TapShape {
  std::size_t channels, height, width;

  bool operator==(const TapShape&) const = default;
};

struct NetworkSpec {
  std::vector<StageSpec> stages;
  std::size_t in_channels = 1;
  std::size_t in_height = 16;
  std::size_t in_width = 16;
  std::size_t num_classes = 10;

  bool operator==(const NetworkSpec&) const = default;

  /// Throws ConfigError on fewer than 2 stages, fewer than 2 classes, or a
  /// downsample that would leave a spatial size below 1.
  void validate() const {
    if (stages.size() < 2) throw ConfigError("network needs at least 2 stages");
    if (num_classes < 2) throw ConfigError("network needs at least 2 classes");
    if (in_channels == 0 || in_height == 0 || in_width == 0) throw ConfigError("empty input shape");
    tap_shapes();
  }

  std::vector<TapShape> tap_shapes() const {
    std::vector<TapShape> taps;
    std::size_t h = in_height, w = in_width;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      const auto& st = stages[s];
      if (st.out_channels == 0 || st.conv_count == 0) {
        throw ConfigError("stage " + std::to_string(s) + " has no channels or convolutions");
      }
      if (st.downsample) {
        if (h / 2 == 0 || w / 2 == 0) {
          throw ConfigError("stage " + std::to_string(s) + " downsamples a " + std::to_string(h) + "x" +
                            std::to_string(w) + " map below 1x1");
        }
        h = (h - 1) / 2 + 1;
        w = (w - 1) / 2 + 1;
      }
      taps.push_back({st.out_channels, h, w});
    }
    return taps;
  }

  std::size_t embedding_dim() const { return stages.back().out_channels; }
};

template <class T>
struct ConvLayer {
  Tensor<T> weight;  // (out, in, 3, 3)
  Tensor<T> bias;    // (out)
  std::size_t stride = 1;
};

template <class T>
using NamedTensor = std::pair<std::string, Tensor<T>>;

/// Plain conv/ReLU network with a global-average-pool + linear head.
template <class T>
class Network {
 public:
  Network() = default;
  explicit Network(NetworkSpec spec) : spec_(std::move(spec)) {}

  const NetworkSpec& spec() const { return spec_; }
  std::size_t stage_count() const { return stages_.size(); }

  std::vector<std::vector<ConvLayer<T>>>& stages() { return stages_; }
  const std::vector<std::vector<ConvLayer<T>>>& stages() const { return stages_; }
  Tensor<T>& fc_weight() { return fc_weight_; }
  const Tensor<T>& fc_weight() const { return fc_weight_; }
  Tensor<T>& fc_bias() { return fc_bias_; }
  const Tensor<T>& fc_bias() const { return fc_bias_; }

  /// Stable names, used as checkpoint keys: stage{s}.conv{c}.{weight,bias}, fc.{weight,bias}.
  std::vector<NamedTensor<T>> named_parameters() const {
    std::vector<NamedTensor<T>> out;
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (std::size_t c = 0; c < stages_[s].size(); ++c) {
        const auto prefix = "stage" + std::to_string(s) + ".conv" + std::to_string(c);
        out.emplace_back(prefix + ".weight", stages_[s][c].weight);
        out.emplace_back(prefix + ".bias", stages_[s][c].bias);
      }
    out.emplace_back("fc.weight", fc_weight_);
    out.emplace_back("fc.bias", fc_bias_);
    return out;
  }

  std::vector<Tensor<T>> parameters() const {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : named_parameters()) out.push_back(t);
    return out;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (auto& [name, t] : named_parameters()) n += t.numel();
    return n;
  }

  void set_trainable(bool flag) {
    for (auto& [name, t] : named_parameters()) {
      auto handle = t;
      handle.set_requires_grad(flag);
    }
  }

  template <class U>
  Network<U> cast() const {
    Network<U> out(spec_);
    out.stages().resize(stages_.size());
    for (std::size_t s = 0; s < stages_.size(); ++s)
      for (const auto& layer : stages_[s])
        out.stages()[s].push_back({layer.weight.template cast<U>(), layer.bias.template cast<U>(), layer.stride});
    out.fc_weight() = fc_weight_.template cast<U>();
    out.fc_bias() = fc_bias_.template cast<U>();
    return out;
  }

 private:
  NetworkSpec spec_;
  std::vector<std::vector<ConvLayer<T>>> stages_;
  Tensor<T> fc_weight_;
  Tensor<T> fc_bias_;
};

namespace detail {

/// Gaussian N(0, gain/fan_in) values drawn in double precision so that
/// float and double builds of the same seed agree after rounding.
template <class T>
Tensor<T> fan_in_gaussian(Shape shape, std::size_t fan_in, double gain, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(gain / static_cast<double>(fan_in)));
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) v = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(values), true);
}

}  // namespace detail

/// He-initialized network (conv gain 2, classifier gain 1), zero biases.
template <class T>
Network<T> build_network(const NetworkSpec& spec, std::uint64_t seed) {
  spec.validate();
  Network<T> net(spec);
  std::mt19937_64 rng(seed);
  std::size_t in_c = spec.in_channels;
  for (const auto& stage : spec.stages) {
    std::vector<ConvLayer<T>> layers;
    for (std::size_t c = 0; c < stage.conv_count; ++c) {
      const std::size_t stride = (c == 0 && stage.downsample) ? 2 : 1;
      layers.push_back({detail::fan_in_gaussian<T>({stage.out_channels, in_c, 3, 3}, in_c * 9, 2.0, rng),
                        Tensor<T>::zeros({stage.out_channels}, true), stride});
      in_c = stage.out_channels;
    }
    net.stages().push_back(std::move(layers));
  }
  net.fc_weight() = detail::fan_in_gaussian<T>({spec.num_classes, in_c}, in_c, 1.0, rng);
  net.fc_bias() = Tensor<T>::zeros({spec.num_classes}, true);
  return net;
}

/// Everything one forward pass exposes to distillation.
template <class T>
struct ForwardRecord {
  std::vector<Tensor<T>> taps;                // stage outputs after the final ReLU
  std::vector<Tensor<T>> taps_preactivation;  // the same outputs before that ReLU
  Tensor<T> penultimate;                      // (b, d) pooled embedding
  Tensor<T> logits;                           // (b, K)
};

template <class T>
ForwardRecord<T> forward_with_taps(const Network<T>& net, const Tensor<T>& batch) {
  const auto& spec = net.spec();
  if (batch.rank() != 4 || batch.dim(1) != spec.in_channels || batch.dim(2) != spec.in_height ||
      batch.dim(3) != spec.in_width) {
    throw DimensionError("network expects input (b," + std::to_string(spec.in_channels) + "," +
                         std::to_string(spec.in_height) + "," + std::to_string(spec.in_width) + "), got " +
                         shape_str(batch.shape()));
  }
  ForwardRecord<T> rec;
  Tensor<T> x = batch;
  for (const auto& stage : net.stages()) {
    Tensor<T> pre;
    for (const auto& layer : stage) {
      pre = ops::conv2d(x, layer.weight, layer.bias, layer.stride, 1);
      x = ops::relu(pre);
    }
    rec.taps_preactivation.push_back(pre);
    rec.taps.push_back(x);
  }
  const std::size_t b = batch.dim(0);
  rec.penultimate = ops::reshape(ops::adaptive_avg_pool2d(x, 1, 1), {b, x.dim(1)});
  rec.logits = ops::linear(rec.penultimate, net.fc_weight(), net.fc_bias());
  return rec;
}

}  // namespace calibkd
