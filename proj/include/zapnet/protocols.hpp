#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/instrumentation.hpp"
#include "zapnet/metrics.hpp"
#include "zapnet/model.hpp"
#include "zapnet/optim.hpp"
#include "zapnet/random.hpp"
#include "zapnet/training.hpp"

namespace zapnet {

enum class PretrainMode { iid, asb };
enum class TransferMode { iid, sequential };
enum class ProbeMode { linear, full };

inline std::string to_string(PretrainMode m) { return m == PretrainMode::iid ? "iid" : "asb"; }
inline std::string to_string(TransferMode m) { return m == TransferMode::iid ? "iid" : "sequential"; }
inline std::string to_string(ProbeMode m) { return m == ProbeMode::linear ? "linear" : "full"; }

struct PretrainConfig {
  PretrainMode mode = PretrainMode::iid;
  bool zap = true;
  std::size_t epochs = 40;      // iid
  std::size_t iterations = 0;   // asb
  std::size_t eval_interval = 0;  // asb: evaluate every n iterations (0 = at the end only)
  std::size_t batch_size = 32;
  std::size_t remember_set_size = 64;
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
};

struct TransferConfig {
  TransferMode mode = TransferMode::sequential;
  ProbeMode probe = ProbeMode::linear;
  std::size_t n_tasks = 20;
  std::size_t epochs = 3;
  std::size_t batch_size = 32;  // iid only; sequential always uses 1
  std::size_t probe_stride = 5;  // 0 disables per-task probes
  OptimizerSpec optimizer;
  std::uint64_t seed = 0;
  std::uint64_t order_seed = 0;
};

// Identifies a run in its metric rows. `flush` is called with the metrics
// gathered so far at every epoch boundary and once more before an abort
// propagates (with `truncated` set).
struct RunContext {
  std::string run_id = "run";
  std::size_t replicate = 0;
  std::function<void(const MetricsRecord&)> flush;
};

template <typename T>
struct RunResult {
  ConvNet<T> model;
  MetricsRecord metrics;
};

namespace detail {

template <typename T>
void check_head(const ConvNet<T>& model, const DataView& view) {
  if (model.n_classes() != view.n_classes()) {
    throw ConfigError("model head has " + std::to_string(model.n_classes()) +
                      " outputs but the data has " + std::to_string(view.n_classes()) + " classes");
  }
}

inline void flush(const RunContext& ctx, const MetricsRecord& m) {
  if (ctx.flush) ctx.flush(m);
}

// Marks the metrics as truncated, flushes them and rethrows with position
// information.
[[noreturn]] inline void abort_run(const RunContext& ctx, MetricsRecord& m, const std::string& phase,
                                   long long epoch, std::size_t step, const NumericalError& e) {
  const std::string msg = phase + " aborted at epoch " + std::to_string(epoch) + ", step " +
                          std::to_string(step) + ": " + e.what();
  m.truncated = msg;
  flush(ctx, m);
  throw NumericalError(msg);
}

inline std::vector<ParamSlice> fc_slices(std::optional<std::size_t> row = std::nullopt) {
  return {{kFcWeightIndex, row}, {kFcBiasIndex, row}};
}

}  // namespace detail

/// i.i.d. pre-training; with cfg.zap the whole classifier is resampled after
/// the last step of every epoch. Validation metrics are taken before the zap.
template <typename T>
RunResult<T> pretrain_iid(const ConvNet<T>& model, const DataView& train, const DataView& val,
                          const PretrainConfig& cfg, const RunContext& ctx = {}) {
  detail::check_head(model, train);
  RunResult<T> res{clone_model(model), {}};
  ConvNet<T>& m = res.model;
  m.set_trainable(true, true);
  Optimizer<T> opt(cfg.optimizer);
  Rng zap_rng(derive_seed(cfg.seed, Stream::zap));
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = iid_batches(train, cfg.batch_size, derive_seed(cfg.seed, Stream::data_order, epoch));
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (const auto& b : batches) {
      auto [x, y] = make_batch<T>(train, b);
      std::size_t c = 0;
      try {
        loss_sum += train_step(m, opt, x, y, &c) * static_cast<double>(b.size());
      } catch (const NumericalError& e) {
        detail::abort_run(ctx, res.metrics, "pretrain", static_cast<long long>(epoch), step, e);
      }
      ++step;
      correct += c;
      seen += b.size();
    }
    const auto e = static_cast<long long>(epoch);
    res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "pretrain", e, "train",
                                    static_cast<double>(correct) / static_cast<double>(seen),
                                    loss_sum / static_cast<double>(seen)});
    const Evaluation v = evaluate(m, val);
    res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "pretrain", e, "val", v.accuracy, v.loss});
    if (cfg.zap) {
      m.zap_fc(zap_rng);
      auto params = m.parameters();
      const auto slices = detail::fc_slices();
      opt.on_resampled(std::span<Tensor<T>* const>(params), std::span<const ParamSlice>(slices));
    }
    detail::flush(ctx, res.metrics);
  }
  return res;
}

/// Alternating sequential and batch pre-training. Each iteration picks one
/// class (uniformly, with replacement), optionally resamples its classifier
/// row, steps once per training example of that class, then takes one step on
/// the class's examples plus a remember set drawn from all training items.
template <typename T>
RunResult<T> pretrain_asb(const ConvNet<T>& model, const DataView& train, const DataView& val,
                          const PretrainConfig& cfg, const RunContext& ctx = {}) {
  detail::check_head(model, train);
  RunResult<T> res{clone_model(model), {}};
  ConvNet<T>& m = res.model;
  m.set_trainable(true, true);
  Optimizer<T> opt(cfg.optimizer);
  Rng zap_rng(derive_seed(cfg.seed, Stream::zap));
  Rng choice_rng(derive_seed(cfg.seed, Stream::asb_choice));
  Rng remember_rng(derive_seed(cfg.seed, Stream::data_order));
  const auto all_items = train.items();
  std::size_t step = 0;
  double loss_sum = 0;
  std::size_t correct = 0, seen = 0;
  for (std::size_t it = 0; it < cfg.iterations; ++it) {
    const std::size_t cls = choice_rng.below(train.n_classes());
    if (cfg.zap) {
      m.zap_class_row(cls, zap_rng);
      auto params = m.parameters();
      const auto slices = detail::fc_slices(cls);
      opt.on_resampled(std::span<Tensor<T>* const>(params), std::span<const ParamSlice>(slices));
    }
    std::vector<Item> seq;
    for (std::size_t e : train.examples[cls]) seq.push_back({cls, e});
    try {
      for (const Item& item : seq) {
        auto [x, y] = make_batch<T>(train, std::span<const Item>(&item, 1));
        std::size_t c = 0;
        loss_sum += train_step(m, opt, x, y, &c);
        correct += c;
        ++seen;
        ++step;
      }
      std::vector<Item> batch;
      for (std::size_t r = 0; r < cfg.remember_set_size; ++r)
        batch.push_back(all_items[remember_rng.below(all_items.size())]);
      batch.insert(batch.end(), seq.begin(), seq.end());
      auto [x, y] = make_batch<T>(train, batch);
      train_step(m, opt, x, y);
      ++step;
    } catch (const NumericalError& e) {
      detail::abort_run(ctx, res.metrics, "pretrain", static_cast<long long>(it), step, e);
    }
    const bool last = it + 1 == cfg.iterations;
    if (last || (cfg.eval_interval && (it + 1) % cfg.eval_interval == 0)) {
      const auto e = static_cast<long long>(it);
      res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "pretrain", e, "train",
                                      seen ? static_cast<double>(correct) / static_cast<double>(seen) : 0.0,
                                      seen ? loss_sum / static_cast<double>(seen) : 0.0});
      const Evaluation v = evaluate(m, val);
      res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "pretrain", e, "val", v.accuracy, v.loss});
      loss_sum = 0;
      correct = seen = 0;
      detail::flush(ctx, res.metrics);
    }
  }
  return res;
}

template <typename T>
RunResult<T> pretrain(const ConvNet<T>& model, const DataView& train, const DataView& val,
                      const PretrainConfig& cfg, const RunContext& ctx = {}) {
  return cfg.mode == PretrainMode::iid ? pretrain_iid(model, train, val, cfg, ctx)
                                       : pretrain_asb(model, train, val, cfg, ctx);
}

namespace detail {

// Shared set-up of both transfer modes: fresh head, trainability and the
// optional feature cache for linear probing.
template <typename T>
struct TransferSession {
  ConvNet<T> model;
  std::optional<FeatureTable<T>> train_features, test_features;

  TransferSession(const ConvNet<T>& pretrained, const DataView& train, const DataView& test,
                  const TransferConfig& cfg)
      : model(clone_model(pretrained)) {
    if (train.n_classes() == 0) throw ConfigError("transfer data has no classes");
    Rng head_rng(derive_seed(cfg.seed, Stream::zap));
    model.resize_fc(train.n_classes(), head_rng);
    const bool linear = cfg.probe == ProbeMode::linear;
    model.set_trainable(!linear, true);
    if (linear) {
      // Frozen conv stack: features never change during the run.
      train_features.emplace(model, train);
      test_features.emplace(model, test);
    }
  }

  const FeatureTable<T>* train_cache() const { return train_features ? &*train_features : nullptr; }
  const FeatureTable<T>* test_cache() const { return test_features ? &*test_features : nullptr; }

  double step(Optimizer<T>& opt, const DataView& view, std::span<const Item> items, std::size_t* correct) {
    if (train_features) {
      auto [f, y] = train_features->batch(items);
      return head_step(model, opt, f, y, correct);
    }
    auto [x, y] = make_batch<T>(view, items);
    return train_step(model, opt, x, y, correct);
  }
};

}  // namespace detail

/// i.i.d. fine-tuning of a pretrained model on unseen classes.
template <typename T>
RunResult<T> transfer_iid(const ConvNet<T>& pretrained, const DataView& train, const DataView& test,
                          const TransferConfig& cfg, const RunContext& ctx = {}) {
  detail::TransferSession<T> s(pretrained, train, test, cfg);
  RunResult<T> res{{}, {}};
  Optimizer<T> opt(cfg.optimizer);
  const Evaluation base = evaluate(s.model, test, s.test_cache());
  res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "transfer", -1, "test", base.accuracy, base.loss});
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto batches = iid_batches(train, cfg.batch_size, derive_seed(cfg.seed, Stream::data_order, epoch));
    double loss_sum = 0;
    std::size_t correct = 0, seen = 0;
    for (const auto& b : batches) {
      std::size_t c = 0;
      try {
        loss_sum += s.step(opt, train, b, &c) * static_cast<double>(b.size());
      } catch (const NumericalError& e) {
        detail::abort_run(ctx, res.metrics, "transfer", static_cast<long long>(epoch), step, e);
      }
      ++step;
      correct += c;
      seen += b.size();
    }
    const auto e = static_cast<long long>(epoch);
    res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "transfer", e, "train",
                                    static_cast<double>(correct) / static_cast<double>(seen),
                                    loss_sum / static_cast<double>(seen)});
    const Evaluation v = evaluate(s.model, test, s.test_cache());
    res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "transfer", e, "test", v.accuracy, v.loss});
    detail::flush(ctx, res.metrics);
  }
  res.model = std::move(s.model);
  return res;
}

/// Continual transfer: one example at a time, tasks (classes) in a seeded
/// order. Per-task losses are probed every probe_stride steps and at every
/// epoch end; pertask task_id is the task's position in the training order.
template <typename T>
RunResult<T> transfer_sequential(const ConvNet<T>& pretrained, const DataView& train,
                                 const DataView& test, const TransferConfig& cfg,
                                 const RunContext& ctx = {}) {
  detail::TransferSession<T> s(pretrained, train, test, cfg);
  RunResult<T> res{{}, {}};
  Optimizer<T> opt(cfg.optimizer);
  const TaskOrder order = make_task_order(train.n_classes(), cfg.order_seed);
  const auto stream = sequential_stream(train, order);
  const std::string opt_name = to_string(cfg.optimizer.kind);
  const std::string probe_name = to_string(cfg.probe);

  auto probe = [&](long long epoch, std::size_t step) {
    const auto losses = per_task_probe(s.model, train, std::span<const std::size_t>(order.order),
                                       s.train_cache());
    for (std::size_t t = 0; t < losses.size(); ++t)
      res.metrics.pertask.push_back({ctx.run_id, ctx.replicate, opt_name, cfg.optimizer.lr,
                                     probe_name, epoch, step, t, losses[t]});
  };

  const Evaluation base = evaluate(s.model, test, s.test_cache());
  res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "transfer", -1, "test", base.accuracy, base.loss});
  std::size_t step = 0;
  if (cfg.probe_stride) probe(0, 0);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto e = static_cast<long long>(epoch);
    double loss_sum = 0;
    std::size_t correct = 0;
    for (const Item& item : stream) {
      std::size_t c = 0;
      try {
        loss_sum += s.step(opt, train, std::span<const Item>(&item, 1), &c);
      } catch (const NumericalError& err) {
        detail::abort_run(ctx, res.metrics, "transfer", e, step, err);
      }
      ++step;
      correct += c;
      if (cfg.probe_stride && (step % cfg.probe_stride == 0 || &item == &stream.back())) probe(e, step);
    }
    const auto n = static_cast<double>(stream.size());
    res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "transfer", e, "train",
                                    static_cast<double>(correct) / n, loss_sum / n});
    const Evaluation v = evaluate(s.model, test, s.test_cache());
    res.metrics.accuracy.push_back({ctx.run_id, ctx.replicate, "transfer", e, "test", v.accuracy, v.loss});
    detail::flush(ctx, res.metrics);
  }
  res.model = std::move(s.model);
  return res;
}

template <typename T>
RunResult<T> transfer(const ConvNet<T>& pretrained, const DataView& train, const DataView& test,
                      const TransferConfig& cfg, const RunContext& ctx = {}) {
  return cfg.mode == TransferMode::iid ? transfer_iid(pretrained, train, test, cfg, ctx)
                                       : transfer_sequential(pretrained, train, test, cfg, ctx);
}

}  // namespace zapnet
