#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "zapnet/checkpoint.hpp"
#include "zapnet/config.hpp"
#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/gradcheck.hpp"
#include "zapnet/instrumentation.hpp"
#include "zapnet/metrics.hpp"
#include "zapnet/model.hpp"
#include "zapnet/protocols.hpp"
#include "zapnet/random.hpp"

namespace zapnet {

enum class Subcommand { pretrain, transfer, zapdiv, gradcheck, sweep };

inline std::string to_string(Subcommand s) {
  switch (s) {
    case Subcommand::pretrain: return "pretrain";
    case Subcommand::transfer: return "transfer";
    case Subcommand::zapdiv: return "zapdiv";
    case Subcommand::gradcheck: return "gradcheck";
    case Subcommand::sweep: return "sweep";
  }
  return "?";
}

inline Subcommand parse_subcommand(const std::string& s) {
  for (auto c : {Subcommand::pretrain, Subcommand::transfer, Subcommand::zapdiv, Subcommand::gradcheck,
                 Subcommand::sweep})
    if (to_string(c) == s) return c;
  throw ConfigError("unknown subcommand '" + s + "'");
}

// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::vector<double> lrs;
  std::optional<std::size_t> replicates;
};

inline void apply_overrides(RunConfig& c, Subcommand cmd, const Overrides& o) {
  if (o.out) c.output_dir = *o.out;
  if (o.seed) {
    c.seed = *o.seed;
    c.split.seed = derive_seed(c.seed, Stream::split);
  }
  if (o.replicates) {
    if (*o.replicates == 0) throw ConfigError("--replicates must be at least 1");
    c.replicates = *o.replicates;
  }
  if (!o.lrs.empty()) {
    for (double lr : o.lrs)
      if (!(lr >= 0)) throw ConfigError("learning rates must be >= 0");
    switch (cmd) {
      case Subcommand::zapdiv: c.zapdiv.lrs = o.lrs; break;
      case Subcommand::sweep: c.sweep.lrs = o.lrs; break;
      case Subcommand::pretrain:
      case Subcommand::transfer:
        if (o.lrs.size() != 1) throw ConfigError("--lr takes a single value for " + to_string(cmd));
        (cmd == Subcommand::pretrain ? c.pretrain.optimizer : c.transfer.optimizer).lr = o.lrs[0];
        break;
      case Subcommand::gradcheck: throw ConfigError("--lr does not apply to gradcheck");
    }
  }
}

/// Sessions run in parallel: ZAPNET_THREADS if set, else the core count.
inline std::size_t session_threads() {
  if (const char* env = std::getenv("ZAPNET_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ConfigError(std::string("ZAPNET_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

/// Calls fn(i) for i in [0, n) on up to `threads` workers. After a failure no
/// new index is started; the failure with the lowest index is rethrown.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  std::vector<std::exception_ptr> errors(n);
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  auto worker = [&] {
    for (std::size_t i; !failed && (i = next++) < n;) {
      try {
        fn(i);
      } catch (...) {
        errors[i] = std::current_exception();
        failed = true;
      }
    }
  };
  const std::size_t k = std::min(threads, n);
  if (k <= 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < k; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// The unit of parallel work: one pre-training, transfer or zap-divergence run.
// Each session writes its own CSVs under <out>/runs/<name>/ at every flush.
struct Session {
  std::string name;
  std::size_t replicate = 0;
  MetricKind kinds = MetricKind::accuracy;
  std::function<MetricsRecord(const RunContext&)> body;
};

class Orchestrator {
 public:
  Orchestrator(std::filesystem::path out, std::size_t threads, std::ostream* log)
      : out_(std::move(out)), threads_(threads), log_(log) {}

  const std::filesystem::path& out() const { return out_; }
  bool failed() const { return static_cast<bool>(error_); }

  /// Runs one stage of sessions; does nothing once an earlier stage failed.
  void run(std::vector<Session> sessions) {
    if (error_) return;
    const std::size_t base = records_.size();
    records_.resize(base + sessions.size());
    try {
      parallel_for(sessions.size(), threads_, [&](std::size_t i) { run_one(sessions[i], records_[base + i]); });
    } catch (...) {
      error_ = std::current_exception();
    }
  }

  /// Writes the merged tables (sessions in stage and index order) and
  /// rethrows the first failure.
  MetricsRecord finish(MetricKind kinds) {
    MetricsRecord merged;
    for (const auto& r : records_) merged.append(r);
    write_metrics(merged, out_, kinds);
    if (error_) std::rethrow_exception(error_);
    return merged;
  }

  void log(const std::string& line) {
    if (!log_) return;
    std::lock_guard lock(log_mutex_);
    *log_ << line << std::endl;
  }

 private:
  void run_one(const Session& s, MetricsRecord& slot) {
    const auto dir = out_ / "runs" / s.name;
    RunContext ctx;
    ctx.run_id = s.name;
    ctx.replicate = s.replicate;
    ctx.flush = [&slot, &dir, &s](const MetricsRecord& m) {
      slot = m;
      write_metrics(slot, dir, s.kinds);
    };
    log("start " + s.name);
    try {
      slot = s.body(ctx);
    } catch (const std::exception& e) {
      if (!slot.truncated) slot.truncated = e.what();
      write_metrics(slot, dir, s.kinds);
      log("abort " + s.name + ": " + e.what());
      throw;
    }
    write_metrics(slot, dir, s.kinds);
    log("done " + s.name);
  }

  std::filesystem::path out_;
  std::size_t threads_;
  std::ostream* log_;
  std::mutex log_mutex_;
  std::vector<MetricsRecord> records_;
  std::exception_ptr error_;
};

// Dataset, split and the class ranges used by each phase.
struct Experiment {
  FewShotDataset data;
  DataView train, test;
  DataView pretrain_train, pretrain_val;
  DataView transfer_train, transfer_test;
};

inline FewShotDataset load_run_dataset(const RunConfig& c) {
  if (c.synthetic) {
    return make_synthetic(c.synthetic->classes, c.synthetic->per_class, c.synthetic->size,
                          derive_seed(c.seed, Stream::synthetic));
  }
  return load_dataset(*c.dataset_path, c.image_size);
}

/// Loads the data; the transfer range is only required when `need_transfer`.
inline std::unique_ptr<Experiment> make_experiment(const RunConfig& c, bool need_transfer) {
  auto e = std::make_unique<Experiment>();
  e->data = load_run_dataset(c);
  if (e->data.height != c.image_size || e->data.width != c.image_size) {
    throw ConfigError("dataset images are " + std::to_string(e->data.height) + "x" +
                      std::to_string(e->data.width) + " but image_size is " + std::to_string(c.image_size));
  }
  auto [train, test] = split(e->data, c.split);
  e->train = std::move(train);
  e->test = std::move(test);
  const std::size_t n = e->data.n_classes();
  if (c.pretrain_classes > n) {
    throw ConfigError("pretrain_classes = " + std::to_string(c.pretrain_classes) + " but the dataset has " +
                      std::to_string(n) + " classes");
  }
  e->pretrain_train = e->train.class_range(0, c.pretrain_classes);
  e->pretrain_val = e->test.class_range(0, c.pretrain_classes);
  if (need_transfer) {
    if (c.pretrain_classes + c.transfer.n_tasks > n) {
      throw ConfigError("transfer needs classes [" + std::to_string(c.pretrain_classes) + ", " +
                        std::to_string(c.pretrain_classes + c.transfer.n_tasks) + ") but the dataset has " +
                        std::to_string(n));
    }
    e->transfer_train = e->train.class_range(c.pretrain_classes, c.transfer.n_tasks);
    e->transfer_test = e->test.class_range(c.pretrain_classes, c.transfer.n_tasks);
  }
  return e;
}

inline std::uint64_t replicate_seed(const RunConfig& c, Stream s, std::size_t replicate) {
  return derive_seed(derive_seed(c.seed, s), s, replicate);
}

inline ModelDims run_dims(const RunConfig& c, const FewShotDataset& data, std::size_t n_classes) {
  ModelDims d = c.model;
  d.height = data.height;
  d.width = data.width;
  d.in_channels = data.channels;
  d.n_classes = n_classes;
  return d;
}

inline ConvNet<float> initial_model(const RunConfig& c, const Experiment& e, std::size_t replicate) {
  return ConvNet<float>(run_dims(c, e.data, c.pretrain_classes), InitSpec{c.init_scale},
                        replicate_seed(c, Stream::model_init, replicate));
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
    s.replace(pos, from.size(), to);
  return s;
}

inline std::string zap_tag(bool zapped) { return zapped ? "zapped" : "unzapped"; }

/// Path of the configured checkpoint for one replicate, with "{replicate}"
/// and "{zapped}" substituted.
inline std::filesystem::path checkpoint_path(const RunConfig& c, std::size_t replicate, bool zapped) {
  return replace_all(replace_all(*c.checkpoint, "{replicate}", std::to_string(replicate)), "{zapped}",
                     zap_tag(zapped));
}

inline ConvNet<float> load_model(const RunConfig& c, const Experiment& e, const std::filesystem::path& path) {
  const Checkpoint ck = load_checkpoint(path);
  return model_from_checkpoint(ck, run_dims(c, e.data, 1), InitSpec{c.init_scale});
}

inline PretrainConfig pretrain_settings(const RunConfig& c, std::size_t replicate) {
  PretrainConfig p = c.pretrain;
  p.seed = replicate_seed(c, Stream::pretrain, replicate);
  if (p.mode == PretrainMode::asb && p.iterations == 0) {
    throw ConfigError("pretrain.iterations must be at least 1 for asb");
  }
  return p;
}

inline TransferConfig transfer_settings(const RunConfig& c, std::size_t replicate) {
  TransferConfig t = c.transfer;
  t.seed = replicate_seed(c, Stream::transfer, replicate);
  t.order_seed = replicate_seed(c, Stream::task_order, replicate);
  return t;
}

namespace detail {

// Pretrained models, one per (replicate, zap setting), either loaded from the
// configured checkpoint or trained in a session stage and saved under
// <out>/checkpoints/.
struct ModelBank {
  std::vector<std::optional<ConvNet<float>>> models;
  std::vector<std::pair<std::size_t, bool>> keys;

  std::size_t index(std::size_t replicate, bool zapped) const {
    for (std::size_t i = 0; i < keys.size(); ++i)
      if (keys[i] == std::pair{replicate, zapped}) return i;
    throw ConfigError("no pretrained model for replicate " + std::to_string(replicate));
  }
  const ConvNet<float>& at(std::size_t replicate, bool zapped) const { return *models[index(replicate, zapped)]; }
};

inline ModelBank pretrained_models(Orchestrator& orc, const RunConfig& c, const Experiment& e,
                                   const std::string& run_id, const std::vector<bool>& zaps, bool tag_zap) {
  ModelBank bank;
  for (std::size_t r = 0; r < c.replicates; ++r)
    for (bool z : zaps) bank.keys.push_back({r, z});
  bank.models.resize(bank.keys.size());
  if (c.checkpoint) {
    for (std::size_t i = 0; i < bank.keys.size(); ++i)
      bank.models[i] = load_model(c, e, checkpoint_path(c, bank.keys[i].first, bank.keys[i].second));
    return bank;
  }
  std::vector<Session> sessions;
  for (std::size_t i = 0; i < bank.keys.size(); ++i) {
    const auto [r, z] = bank.keys[i];
    std::string name = run_id + ".pretrain.r" + std::to_string(r);
    if (tag_zap) name += "." + zap_tag(z);
    sessions.push_back({name, r, MetricKind::accuracy, [&, i, r = r, z = z, name](const RunContext& ctx) {
                          PretrainConfig p = pretrain_settings(c, r);
                          p.zap = z;
                          auto res = pretrain(initial_model(c, e, r), e.pretrain_train, e.pretrain_val, p, ctx);
                          save_checkpoint(make_checkpoint(res.model, nullptr, to_json(c).dump()),
                                          orc.out() / "checkpoints" / (name + ".zck"));
                          bank.models[i] = std::move(res.model);
                          return std::move(res.metrics);
                        }});
  }
  orc.run(std::move(sessions));
  return bank;
}

}  // namespace detail

inline void write_resolved_config(const RunConfig& c, const std::filesystem::path& out) {
  std::error_code ec;
  std::filesystem::create_directories(out, ec);
  if (ec) throw IoError("cannot create " + out.string() + ": " + ec.message());
  detail::write_file_atomic(out / "resolved_config.json", to_json(c).dump(2) + "\n");
}

inline void run_pretrain(const RunConfig& c, Orchestrator& orc) {
  const auto e = make_experiment(c, false);
  std::vector<Session> sessions;
  for (std::size_t r = 0; r < c.replicates; ++r) {
    const std::string name = c.run_id + ".r" + std::to_string(r);
    sessions.push_back({name, r, MetricKind::accuracy, [&, r, name](const RunContext& ctx) {
                          ConvNet<float> start = c.checkpoint ? load_model(c, *e, checkpoint_path(c, r, c.pretrain.zap))
                                                              : initial_model(c, *e, r);
                          auto res = pretrain(start, e->pretrain_train, e->pretrain_val, pretrain_settings(c, r), ctx);
                          save_checkpoint(make_checkpoint(res.model, nullptr, to_json(c).dump()),
                                          orc.out() / "checkpoints" / (name + ".zck"));
                          return std::move(res.metrics);
                        }});
  }
  orc.run(std::move(sessions));
  orc.finish(MetricKind::accuracy);
}

inline void run_transfer(const RunConfig& c, Orchestrator& orc) {
  const auto e = make_experiment(c, true);
  const auto bank = detail::pretrained_models(orc, c, *e, c.run_id, {c.pretrain.zap}, false);
  std::vector<Session> sessions;
  for (std::size_t r = 0; r < c.replicates; ++r) {
    sessions.push_back({c.run_id + ".transfer.r" + std::to_string(r), r,
                        MetricKind::accuracy | MetricKind::pertask, [&, r](const RunContext& ctx) {
                          return transfer(bank.at(r, c.pretrain.zap), e->transfer_train, e->transfer_test,
                                          transfer_settings(c, r), ctx)
                              .metrics;
                        }});
  }
  orc.run(std::move(sessions));
  orc.finish(MetricKind::accuracy | MetricKind::pertask);
}

inline void run_zapdiv(const RunConfig& c, Orchestrator& orc) {
  const auto e = make_experiment(c, false);
  const auto bank = detail::pretrained_models(orc, c, *e, c.run_id, {c.pretrain.zap}, false);
  std::vector<Session> sessions;
  for (std::size_t r = 0; r < c.replicates; ++r)
    for (double lr : c.zapdiv.lrs) {
      const std::string name = c.run_id + ".zapdiv.r" + std::to_string(r) + ".lr" + format_number(lr);
      sessions.push_back({name, r, MetricKind::cosim, [&, r, lr](const RunContext& ctx) {
                            ZapDivergenceConfig z;
                            z.steps = c.zapdiv.steps;
                            z.batch_size = c.zapdiv.batch_size;
                            z.optimizer = c.zapdiv.optimizer;
                            z.optimizer.lr = lr;
                            z.seed = replicate_seed(c, Stream::zapdiv, r);
                            MetricsRecord m;
                            const auto series = zap_divergence_run(bank.at(r, c.pretrain.zap), e->pretrain_train, z, r);
                            m.cosim = series.rows(ctx.run_id);
                            return m;
                          }});
    }
  orc.run(std::move(sessions));
  orc.finish(MetricKind::accuracy | MetricKind::cosim);
}

inline void run_sweep(const RunConfig& c, Orchestrator& orc) {
  const auto e = make_experiment(c, true);
  const auto bank = detail::pretrained_models(orc, c, *e, c.run_id, c.sweep.zapped, true);
  struct Cell {
    std::size_t replicate;
    OptimizerKind kind;
    bool zapped;
    double lr;
    std::string name;
  };
  std::vector<Cell> cells;
  for (std::size_t r = 0; r < c.replicates; ++r)
    for (OptimizerKind k : c.sweep.optimizers)
      for (bool z : c.sweep.zapped)
        for (double lr : c.sweep.lrs)
          cells.push_back({r, k, z, lr,
                           c.run_id + "." + to_string(k) + "." + zap_tag(z) + ".lr" + format_number(lr) + ".r" +
                               std::to_string(r)});
  std::vector<Session> sessions;
  for (const Cell& cell : cells) {
    sessions.push_back({cell.name, cell.replicate, MetricKind::accuracy | MetricKind::pertask,
                        [&, cell](const RunContext& ctx) {
                          TransferConfig t = transfer_settings(c, cell.replicate);
                          t.optimizer.kind = cell.kind;
                          t.optimizer.lr = cell.lr;
                          return transfer(bank.at(cell.replicate, cell.zapped), e->transfer_train,
                                          e->transfer_test, t, ctx)
                              .metrics;
                        }});
  }
  orc.run(std::move(sessions));
  const MetricsRecord merged = orc.finish(MetricKind::accuracy | MetricKind::pertask);
  std::vector<SweepRow> rows;
  for (const Cell& cell : cells)
    for (const auto& a : merged.accuracy)
      if (a.run_id == cell.name && a.phase == "transfer" && a.split == "test" && a.epoch >= 0)
        rows.push_back({cell.name, cell.replicate, to_string(cell.kind), cell.zapped, cell.lr, a.epoch, a.accuracy,
                        a.loss});
  write_csv(orc.out() / CsvSchema<SweepRow>::file, rows);
}

inline GradcheckReport run_gradcheck(const RunConfig& c, const std::filesystem::path& out, std::ostream& os) {
  GradcheckOptions o;
  o.channels = c.gradcheck.channels;
  o.classes = c.gradcheck.classes;
  o.batch = c.gradcheck.batch;
  o.image_size = c.image_size;
  o.h = c.gradcheck.h;
  o.tolerance = c.gradcheck.tolerance;
  o.seed = c.seed;
  const GradcheckReport r = gradient_check(o);
  const std::string line = std::string(r.passed ? "PASS" : "FAIL") +
                           " max_relative_error=" + format_number(r.max_rel_error) + " at " +
                           r.worst_parameter + "[" + std::to_string(r.worst_index) + "]" +
                           " tolerance=" + format_number(o.tolerance) + " h=" + format_number(o.h) +
                           " checked=" + std::to_string(r.checked) +
                           " pattern_switches=" + std::to_string(r.pattern_switches) +
                           " max_relative_error_frozen=" + format_number(r.max_rel_error_frozen);
  os << line << std::endl;
  detail::write_file_atomic(out / "gradcheck.txt", line + "\n");
  return r;
}

/// Exit status of a failure: 1 configuration, 2 numerical, 3 I/O.
inline int exit_code(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ShapeError*>(&e)) return 1;
  if (dynamic_cast<const NumericalError*>(&e)) return 2;
  return 3;
}

/// Runs a subcommand and returns its exit status. A failed gradient check
/// exits with 2, like a numerical abort.
inline int run(Subcommand cmd, const RunConfig& c, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  try {
    if (c.mode && *c.mode != to_string(cmd)) {
      throw ConfigError("config is for mode \"" + *c.mode + "\", not \"" + to_string(cmd) + "\"");
    }
    const std::filesystem::path dir = c.output_dir;
    write_resolved_config(c, dir);
    if (cmd == Subcommand::gradcheck) return run_gradcheck(c, dir, out).passed ? 0 : 2;
    Orchestrator orc(dir, session_threads(), &err);
    switch (cmd) {
      case Subcommand::pretrain: run_pretrain(c, orc); break;
      case Subcommand::transfer: run_transfer(c, orc); break;
      case Subcommand::zapdiv: run_zapdiv(c, orc); break;
      case Subcommand::sweep: run_sweep(c, orc); break;
      case Subcommand::gradcheck: break;
    }
    out << "wrote " << dir.string() << std::endl;
    return 0;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << std::endl;
    return exit_code(e);
  }
}

}  // namespace zapnet
