#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "zapnet/autograd.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/layers.hpp"
#include "zapnet/random.hpp"
#include "zapnet/tensor.hpp"

namespace zapnet {

/// Architecture of the three-block convolutional classifier.
struct ModelDims {
  std::size_t channels = 256;
  std::size_t height = 28;
  std::size_t width = 28;
  std::size_t in_channels = 1;
  std::size_t n_classes = 1;
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 0;
  double norm_eps = 1e-5;

  friend bool operator==(const ModelDims&, const ModelDims&) = default;
};

/// Spatial side lengths after each stage: conv1, pool1, conv2, pool2, conv3.
/// Returns an empty array entry (zero) at the first stage that collapses.
inline std::array<std::size_t, 5> stage_sizes(std::size_t in, const ModelDims& d) {
  std::array<std::size_t, 5> s{};
  s[0] = conv_out_size(in, d.kernel, d.stride, d.padding);
  s[1] = s[0] / 2;
  s[2] = s[1] ? conv_out_size(s[1], d.kernel, d.stride, d.padding) : 0;
  s[3] = s[2] / 2;
  s[4] = s[3] ? conv_out_size(s[3], d.kernel, d.stride, d.padding) : 0;
  return s;
}

inline std::size_t feature_count(const ModelDims& d) {
  const auto h = stage_sizes(d.height, d);
  const auto w = stage_sizes(d.width, d);
  return d.channels * h[4] * w[4];
}

// Weights ~ U(-scale/sqrt(fan_in), +scale/sqrt(fan_in)); biases zero.
// Resampling draws from exactly this distribution with fresh randomness.
struct InitSpec {
  double scale = 1.0;

  template <typename T>
  void fill(Tensor<T>& weight, std::size_t fan_in, Rng& rng) const {
    const double bound = scale / std::sqrt(static_cast<double>(fan_in));
    for (auto& v : weight.data()) v = static_cast<T>(rng.uniform(-bound, bound));
  }
};

template <typename T>
struct Layer {
  std::string name;
  Tensor<T> weight;
  Tensor<T> bias;

  /// Number of inputs feeding one output unit.
  std::size_t fan_in() const { return weight.numel() / weight.dim(0); }
};

inline constexpr std::array<std::string_view, 4> kLayerNames{"conv1", "conv2", "conv3", "fc"};

template <typename T>
class ConvNet {
 public:
  ConvNet() = default;

  ConvNet(ModelDims dims, InitSpec init, std::uint64_t seed) : dims_(dims), init_(init) {
    if (dims.channels == 0 || dims.height == 0 || dims.width == 0 || dims.in_channels == 0 ||
        dims.n_classes == 0 || dims.kernel == 0 || dims.stride == 0) {
      throw ConfigError("model dimensions must be positive");
    }
    const auto h = stage_sizes(dims.height, dims);
    const auto w = stage_sizes(dims.width, dims);
    for (std::size_t i = 0; i < 5; ++i) {
      if (h[i] == 0 || w[i] == 0) {
        throw ConfigError("input " + std::to_string(dims.height) + "x" +
                          std::to_string(dims.width) +
                          " is too small: convolution stack output would be empty");
      }
    }
    // Instance norm over a single position maps every feature to zero.
    if (h[4] * w[4] < 2) {
      throw ConfigError("input " + std::to_string(dims.height) + "x" + std::to_string(dims.width) +
                        " is too small: conv3 output must have at least 2 positions");
    }
    const std::size_t c = dims.channels, k = dims.kernel;
    conv1_ = make_layer("conv1", Shape{c, dims.in_channels, k, k});
    conv2_ = make_layer("conv2", Shape{c, c, k, k});
    conv3_ = make_layer("conv3", Shape{c, c, k, k});
    fc_ = make_layer("fc", Shape{dims.n_classes, feature_count(dims)});
    Rng rng(seed);
    for (Layer<T>* l : layers()) init_.fill(l->weight, l->fan_in(), rng);
  }

  const ModelDims& dims() const noexcept { return dims_; }
  const InitSpec& init_spec() const noexcept { return init_; }
  std::size_t n_classes() const noexcept { return dims_.n_classes; }
  std::size_t features() const { return fc_.weight.dim(1); }

  std::array<Layer<T>*, 4> layers() { return {&conv1_, &conv2_, &conv3_, &fc_}; }
  std::array<const Layer<T>*, 4> layers() const { return {&conv1_, &conv2_, &conv3_, &fc_}; }

  Layer<T>& layer(std::string_view name) {
    for (Layer<T>* l : layers())
      if (l->name == name) return *l;
    throw ConfigError("unknown layer '" + std::string(name) + "'");
  }
  const Layer<T>& layer(std::string_view name) const {
    return const_cast<ConvNet*>(this)->layer(name);
  }
  Layer<T>& fc() noexcept { return fc_; }
  const Layer<T>& fc() const noexcept { return fc_; }

  /// Parameters in registry order: conv1.weight, conv1.bias, ..., fc.bias.
  std::vector<Tensor<T>*> parameters() {
    std::vector<Tensor<T>*> out;
    for (Layer<T>* l : layers()) {
      out.push_back(&l->weight);
      out.push_back(&l->bias);
    }
    return out;
  }
  std::vector<const Tensor<T>*> parameters() const {
    std::vector<const Tensor<T>*> out;
    for (const Layer<T>* l : layers()) {
      out.push_back(&l->weight);
      out.push_back(&l->bias);
    }
    return out;
  }
  static std::vector<std::string> parameter_names() {
    std::vector<std::string> out;
    for (auto n : kLayerNames) {
      out.push_back(std::string(n) + ".weight");
      out.push_back(std::string(n) + ".bias");
    }
    return out;
  }

  /// Controls which parameters receive gradients on the next forward pass.
  void set_trainable(bool conv, bool fc) {
    for (Layer<T>* l : {&conv1_, &conv2_, &conv3_}) {
      l->weight.set_requires_grad(conv);
      l->bias.set_requires_grad(conv);
    }
    fc_.weight.set_requires_grad(fc);
    fc_.bias.set_requires_grad(fc);
  }

  /// Flattened conv3 activations, [N x features].
  Var features(Tape<T>& tape, Var input) {
    return features_impl(*this, tape, input, [&tape](Tensor<T>& p) { return tape.param(p); });
  }

  Var head(Tape<T>& tape, Var features) {
    return linear(tape, features, tape.param(fc_.weight), tape.param(fc_.bias));
  }

  Var forward(Tape<T>& tape, Var input) { return head(tape, features(tape, input)); }

  /// Logits without gradient bookkeeping.
  Tensor<T> logits(const Tensor<T>& batch) const {
    Tape<T> tape;
    auto bind = [&tape](const Tensor<T>& p) { return tape.input(p); };
    Var f = features_impl(*this, tape, tape.input(batch), bind);
    Var out = linear(tape, f, bind(fc_.weight), bind(fc_.bias));
    return tape.value(out);
  }

  Tensor<T> feature_values(const Tensor<T>& batch) const {
    Tape<T> tape;
    auto bind = [&tape](const Tensor<T>& p) { return tape.input(p); };
    return tape.value(features_impl(*this, tape, tape.input(batch), bind));
  }

  /// Logits of the classifier alone applied to precomputed features.
  Tensor<T> head_values(const Tensor<T>& features) const {
    Tape<T> tape;
    return tape.value(linear(tape, tape.input(features), tape.input(fc_.weight),
                             tape.input(fc_.bias)));
  }

  /// Redraws the whole classifier (weights and bias) from the init spec.
  void zap_fc(Rng& rng) {
    init_.fill(fc_.weight, fc_.fan_in(), rng);
    std::fill(fc_.bias.data().begin(), fc_.bias.data().end(), T{0});
  }

  /// Redraws the classifier row (and bias entry) of one class.
  void zap_class_row(std::size_t class_id, Rng& rng) {
    if (class_id >= n_classes()) {
      throw ShapeError("class " + std::to_string(class_id) + " out of range for " +
                       std::to_string(n_classes()) + " classes");
    }
    const std::size_t f = features();
    Tensor<T> row(Shape{1, f});
    init_.fill(row, f, rng);
    std::copy(row.data().begin(), row.data().end(), fc_.weight.data().begin() + class_id * f);
    fc_.bias[class_id] = T{0};
  }

  /// Replaces the classifier with a fresh head of a new width.
  void resize_fc(std::size_t new_n_classes, Rng& rng) {
    if (new_n_classes == 0) throw ConfigError("classifier width must be at least 1");
    const bool w_rg = fc_.weight.requires_grad(), b_rg = fc_.bias.requires_grad();
    dims_.n_classes = new_n_classes;
    fc_ = make_layer("fc", Shape{new_n_classes, feature_count(dims_)});
    fc_.weight.set_requires_grad(w_rg);
    fc_.bias.set_requires_grad(b_rg);
    init_.fill(fc_.weight, fc_.fan_in(), rng);
  }

 private:
  static Layer<T> make_layer(std::string name, Shape weight_shape) {
    Layer<T> l;
    l.name = std::move(name);
    const std::size_t out = weight_shape[0];
    l.weight = Tensor<T>(std::move(weight_shape));
    l.bias = Tensor<T>(Shape{out});
    l.weight.set_requires_grad(true);
    l.bias.set_requires_grad(true);
    return l;
  }

  template <typename Self, typename Bind>
  static Var features_impl(Self& self, Tape<T>& tape, Var input, Bind bind) {
    const T eps = static_cast<T>(self.dims_.norm_eps);
    Var x = input;
    int block = 0;
    for (auto* l : {&self.conv1_, &self.conv2_, &self.conv3_}) {
      x = conv2d(tape, x, bind(l->weight), bind(l->bias), self.dims_.stride, self.dims_.padding);
      x = relu(tape, instance_norm(tape, x, eps));
      if (++block < 3) x = maxpool2x2(tape, x);
    }
    return flatten(tape, x);
  }

  ModelDims dims_;
  InitSpec init_;
  Layer<T> conv1_, conv2_, conv3_, fc_;
};

template <typename T = float>
ConvNet<T> init_model(std::size_t channels, std::size_t height, std::size_t width,
                      std::size_t in_channels, std::size_t n_classes, std::uint64_t seed,
                      InitSpec init = {}) {
  ModelDims d;
  d.channels = channels;
  d.height = height;
  d.width = width;
  d.in_channels = in_channels;
  d.n_classes = n_classes;
  return ConvNet<T>(d, init, seed);
}

template <typename T>
void zap_full_fc(ConvNet<T>& model, Rng& rng) {
  model.zap_fc(rng);
}

template <typename T>
void zap_class_row(ConvNet<T>& model, std::size_t class_id, Rng& rng) {
  model.zap_class_row(class_id, rng);
}

template <typename T>
void resize_fc(ConvNet<T>& model, std::size_t new_n_classes, Rng& rng) {
  model.resize_fc(new_n_classes, rng);
}

template <typename T>
ConvNet<T> clone_model(const ConvNet<T>& model) {
  return model;
}

/// Converts every parameter to another scalar type (e.g. for 64-bit checks).
template <typename U, typename T>
ConvNet<U> cast_model(const ConvNet<T>& model) {
  ConvNet<U> out(model.dims(), model.init_spec(), 0);
  auto src = model.parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    for (std::size_t j = 0; j < src[i]->numel(); ++j) (*dst[i])[j] = static_cast<U>((*src[i])[j]);
  }
  return out;
}

/// Index of the largest logit in each row; ties go to the lowest index.
template <typename T>
std::vector<std::size_t> argmax_rows(const Tensor<T>& logits) {
  const std::size_t n = logits.dim(0), c = logits.dim(1);
  std::vector<std::size_t> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (logits[i * c + j] > logits[i * c + best]) best = j;
    out[i] = best;
  }
  return out;
}

}  // namespace zapnet
