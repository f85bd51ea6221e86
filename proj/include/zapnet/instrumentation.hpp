#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/metrics.hpp"
#include "zapnet/model.hpp"
#include "zapnet/optim.hpp"
#include "zapnet/random.hpp"
#include "zapnet/training.hpp"

namespace zapnet {

/// Cosine similarity of two equally sized vectors, accumulated in double.
/// One zero vector gives 0; two zero vectors are an error.
template <typename T>
double cosine_similarity(std::span<const T> a, std::span<const T> b) {
  if (a.size() != b.size()) throw ShapeError("cosine similarity of vectors of different length");
  double dot = 0, na = 0, nb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 && nb == 0) throw NumericalError("cosine similarity undefined: both vectors are zero");
  if (na == 0 || nb == 0) return 0.0;
  // sqrt(na * nb) rather than sqrt(na) * sqrt(nb): identical inputs give exactly 1.
  return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

/// Cosine between the flattened weights (bias excluded) of one layer.
template <typename T>
double layer_cosim(const ConvNet<T>& a, const ConvNet<T>& b, std::string_view layer) {
  const Tensor<T>& wa = a.layer(layer).weight;
  const Tensor<T>& wb = b.layer(layer).weight;
  if (wa.shape() != wb.shape()) {
    throw ShapeError("layer " + std::string(layer) + " has shape " + shape_str(wa.shape()) +
                     " vs " + shape_str(wb.shape()));
  }
  return cosine_similarity<T>(wa.data(), wb.data());
}

// values[layer][step] for layers conv1, conv2, conv3, fc; step 0 is the
// state right after the perturbation.
struct CosimSeries {
  std::vector<std::string> layers;
  std::vector<std::vector<double>> values;
  std::string optimizer;
  double lr = 0;
  std::size_t replicate = 0;

  std::size_t steps() const { return values.empty() ? 0 : values[0].size(); }

  std::vector<CosimRow> rows(const std::string& run_id) const {
    std::vector<CosimRow> out;
    for (std::size_t s = 0; s < steps(); ++s)
      for (std::size_t l = 0; l < layers.size(); ++l)
        out.push_back({run_id, replicate, optimizer, lr, s, layers[l], values[l][s]});
    return out;
  }
};

struct ZapDivergenceConfig {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  // false runs the control against an unperturbed copy of itself.
  bool zap = true;
};

/// Trains an unperturbed copy and a copy with a freshly resampled classifier
/// on the same batches, recording per-layer cosine similarity after every step.
template <typename T>
CosimSeries zap_divergence_run(const ConvNet<T>& model, const DataView& data,
                               const ZapDivergenceConfig& cfg, std::size_t replicate = 0) {
  if (model.n_classes() != data.n_classes()) {
    throw ConfigError("model has " + std::to_string(model.n_classes()) + " outputs but data has " +
                      std::to_string(data.n_classes()) + " classes");
  }
  ConvNet<T> control = clone_model(model);
  control.set_trainable(true, true);
  ConvNet<T> treatment = clone_model(control);
  if (cfg.zap) {
    Rng zap_rng(derive_seed(cfg.seed, Stream::zap));
    treatment.zap_fc(zap_rng);
  }
  Optimizer<T> opt_control(cfg.optimizer), opt_treatment(cfg.optimizer);

  CosimSeries series;
  series.optimizer = to_string(cfg.optimizer.kind);
  series.lr = cfg.optimizer.lr;
  series.replicate = replicate;
  for (auto name : kLayerNames) series.layers.emplace_back(name);
  series.values.resize(series.layers.size());
  auto record = [&] {
    for (std::size_t l = 0; l < series.layers.size(); ++l)
      series.values[l].push_back(layer_cosim(control, treatment, series.layers[l]));
  };
  record();

  std::size_t step = 0;
  for (std::uint64_t epoch = 0; step < cfg.steps; ++epoch) {
    const auto batches = iid_batches(data, cfg.batch_size, derive_seed(cfg.seed, Stream::data_order, epoch));
    for (const auto& b : batches) {
      if (step == cfg.steps) break;
      auto [x, y] = make_batch<T>(data, b);
      try {
        train_step(control, opt_control, x, y);
        train_step(treatment, opt_treatment, x, y);
      } catch (const NumericalError& e) {
        throw NumericalError("zap-divergence aborted at step " + std::to_string(step + 1) + ": " +
                             e.what());
      }
      ++step;
      record();
    }
  }
  return series;
}

/// Mean cross-entropy of each task's probe examples under the current model.
/// `tasks` lists view labels in reporting order. Nothing is mutated.
template <typename T>
std::vector<double> per_task_probe(const ConvNet<T>& model, const DataView& view,
                                   std::span<const std::size_t> tasks,
                                   const FeatureTable<T>* features = nullptr) {
  std::vector<Item> items;
  for (std::size_t t : tasks) {
    if (t >= view.n_classes()) throw ConfigError("probe task " + std::to_string(t) + " not in view");
    for (std::size_t e : view.examples[t]) items.push_back({t, e});
  }
  if (items.empty()) return std::vector<double>(tasks.size(), 0.0);
  const Tensor<T> z = logits_of(model, view, std::span<const Item>(items), features);
  std::vector<std::size_t> labels(items.size());
  for (std::size_t i = 0; i < items.size(); ++i) labels[i] = items[i].label;
  const auto losses = cross_entropy_rows(z, std::span<const std::size_t>(labels));
  std::vector<double> out;
  std::size_t i = 0;
  for (std::size_t t : tasks) {
    const std::size_t n = view.examples[t].size();
    double total = 0;
    for (std::size_t j = 0; j < n; ++j) total += losses[i++];
    out.push_back(n ? total / static_cast<double>(n) : 0.0);
  }
  return out;
}

}  // namespace zapnet
