#pragma once

#include <algorithm>
#include <cstddef>
#include <limits>
#include <span>
#include <utility>
#include <vector>

#include "zapnet/autograd.hpp"
#include "zapnet/data.hpp"
#include "zapnet/layers.hpp"
#include "zapnet/model.hpp"
#include "zapnet/optim.hpp"

namespace zapnet {

// Registry indices of the classifier parameters in ConvNet::parameters().
inline constexpr std::size_t kFcWeightIndex = 6;
inline constexpr std::size_t kFcBiasIndex = 7;

/// Forward, backward and one optimizer step on a batch. Returns the batch
/// loss; `correct` (if given) receives the number of correct predictions made
/// by the pre-step model.
template <typename T>
double train_step(ConvNet<T>& model, Optimizer<T>& opt, const Tensor<T>& x,
                  std::span<const std::size_t> labels, std::size_t* correct = nullptr) {
  Tape<T> tape;
  Var logits = model.forward(tape, tape.input(x));
  Var loss = cross_entropy(tape, logits, labels);
  if (correct) {
    const auto pred = argmax_rows(tape.value(logits));
    *correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) *correct += pred[i] == labels[i];
  }
  tape.backward(loss);
  auto params = model.parameters();
  opt.step(std::span<Tensor<T>* const>(params));
  return static_cast<double>(tape.value(loss)[0]);
}

/// As train_step, but on precomputed conv features; only the classifier is
/// touched.
template <typename T>
double head_step(ConvNet<T>& model, Optimizer<T>& opt, const Tensor<T>& features,
                 std::span<const std::size_t> labels, std::size_t* correct = nullptr) {
  Tape<T> tape;
  Var logits = model.head(tape, tape.input(features));
  Var loss = cross_entropy(tape, logits, labels);
  if (correct) {
    const auto pred = argmax_rows(tape.value(logits));
    *correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) *correct += pred[i] == labels[i];
  }
  tape.backward(loss);
  auto params = model.parameters();
  opt.step(std::span<Tensor<T>* const>(params));
  return static_cast<double>(tape.value(loss)[0]);
}

/// Conv features of every item of a view, addressable by (label, example).
template <typename T>
class FeatureTable {
 public:
  FeatureTable() = default;

  FeatureTable(const ConvNet<T>& model, const DataView& view, std::size_t chunk = 64) {
    const auto items = view.items();
    if (items.empty()) throw ConfigError("cannot compute features of an empty view");
    width_ = model.features();
    values_.resize(items.size() * width_);
    row_.assign(view.n_classes(), std::vector<std::size_t>(view.data->n_per_class, kNone));
    for (std::size_t i = 0; i < items.size(); i += chunk) {
      const std::size_t n = std::min(chunk, items.size() - i);
      auto [x, y] = make_batch<T>(view, std::span<const Item>(items).subspan(i, n));
      const Tensor<T> f = model.feature_values(x);
      std::copy(f.data().begin(), f.data().end(), values_.begin() + i * width_);
    }
    for (std::size_t i = 0; i < items.size(); ++i) row_[items[i].label][items[i].example] = i;
  }

  std::size_t width() const noexcept { return width_; }

  /// Stacked features and labels of the given items.
  std::pair<Tensor<T>, std::vector<std::size_t>> batch(std::span<const Item> items) const {
    Tensor<T> out(Shape{items.size(), width_});
    std::vector<std::size_t> labels(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) {
      const std::size_t r = row_.at(items[i].label).at(items[i].example);
      if (r == kNone) throw ConfigError("item is not part of the feature table");
      std::copy(values_.begin() + r * width_, values_.begin() + (r + 1) * width_,
                out.data().begin() + i * width_);
      labels[i] = items[i].label;
    }
    return {std::move(out), std::move(labels)};
  }

 private:
  static constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::size_t width_ = 0;
  std::vector<T> values_;
  std::vector<std::vector<std::size_t>> row_;
};

/// Logits of the given items, computed in chunks without recording gradients.
template <typename T>
Tensor<T> logits_of(const ConvNet<T>& model, const DataView& view, std::span<const Item> items,
                    const FeatureTable<T>* features = nullptr, std::size_t chunk = 64) {
  Tensor<T> out(Shape{items.size(), model.n_classes()});
  for (std::size_t i = 0; i < items.size(); i += chunk) {
    const std::size_t n = std::min(chunk, items.size() - i);
    const auto part = items.subspan(i, n);
    const Tensor<T> z = features ? model.head_values(features->batch(part).first)
                                 : model.logits(make_batch<T>(view, part).first);
    std::copy(z.data().begin(), z.data().end(), out.data().begin() + i * model.n_classes());
  }
  return out;
}

struct Evaluation {
  double accuracy = 0;
  double loss = 0;
};

/// Accuracy (argmax, ties to the lowest index) and mean cross-entropy.
template <typename T>
Evaluation evaluate(const ConvNet<T>& model, const DataView& view,
                    const FeatureTable<T>* features = nullptr) {
  const auto items = view.items();
  if (items.empty()) throw ConfigError("cannot evaluate on an empty view");
  const Tensor<T> z = logits_of(model, view, std::span<const Item>(items), features);
  std::vector<std::size_t> labels(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) labels[i] = items[i].label;
  const auto pred = argmax_rows(z);
  const auto losses = cross_entropy_rows(z, std::span<const std::size_t>(labels));
  std::size_t correct = 0;
  double total = 0;
  for (std::size_t i = 0; i < items.size(); ++i) {
    correct += pred[i] == labels[i];
    total += losses[i];
  }
  const auto n = static_cast<double>(items.size());
  return {static_cast<double>(correct) / n, total / n};
}

template <typename T>
double evaluate_accuracy(const ConvNet<T>& model, const DataView& view) {
  return evaluate(model, view).accuracy;
}

}  // namespace zapnet
