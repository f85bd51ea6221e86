#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "zapnet/data.hpp"
#include "zapnet/errors.hpp"
#include "zapnet/instrumentation.hpp"
#include "zapnet/model.hpp"
#include "zapnet/optim.hpp"
#include "zapnet/protocols.hpp"
#include "zapnet/random.hpp"

namespace zapnet {

using Json = nlohmann::ordered_json;

struct SyntheticSpec {
  std::size_t classes = 40;
  std::size_t per_class = 20;
  std::size_t size = 28;
  friend bool operator==(const SyntheticSpec&, const SyntheticSpec&) = default;
};

struct GradcheckConfig {
  std::size_t channels = 8;
  std::size_t classes = 2;
  std::size_t batch = 2;
  double h = 1e-3;
  double tolerance = 1e-5;
};

struct ZapdivSettings {
  std::size_t steps = 300;
  std::size_t batch_size = 32;
  std::vector<double> lrs{0.001};
  OptimizerSpec optimizer;
};

struct SweepSettings {
  std::vector<double> lrs{0.0001, 0.0003, 0.0006, 0.001};
  std::vector<OptimizerKind> optimizers{OptimizerKind::sgd, OptimizerKind::adam};
  std::vector<bool> zapped{true, false};
};

// Complete declarative description of a run. Classes [0, pretrain_classes)
// of the dataset are used for pre-training and the following
// transfer.n_tasks classes for transfer.
struct RunConfig {
  // Optional subcommand name; when present the CLI refuses to run another.
  std::optional<std::string> mode;
  std::string run_id = "run";
  std::optional<std::string> dataset_path;
  std::optional<SyntheticSpec> synthetic;
  std::size_t image_size = 28;
  std::uint64_t seed = 0;
  std::size_t replicates = 1;
  std::string output_dir = "out";
  SplitSpec split;
  ModelDims model;
  double init_scale = 1.0;
  std::size_t pretrain_classes = 30;
  // Load the pretrained model instead of pre-training; "{replicate}" in the
  // path is replaced by the replicate index.
  std::optional<std::string> checkpoint;
  PretrainConfig pretrain;
  TransferConfig transfer;
  ZapdivSettings zapdiv;
  GradcheckConfig gradcheck;
  SweepSettings sweep;
};

namespace detail {

inline void reject_unknown(const Json& obj, const std::string& where,
                           std::initializer_list<const char*> allowed) {
  if (!obj.is_object()) throw ConfigError(where + " must be a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& [key, _] : obj.items()) {
    if (!ok.count(key)) {
      throw ConfigError("unknown key \"" + key + "\"" + (where.empty() ? "" : " in " + where));
    }
  }
}

template <typename V>
void read(const Json& obj, const char* key, V& out, const std::string& where) {
  if (!obj.contains(key)) return;
  try {
    out = obj.at(key).get<V>();
  } catch (const nlohmann::json::exception&) {
    throw ConfigError("bad value for \"" + std::string(key) + "\"" +
                      (where.empty() ? "" : " in " + where) + ": " + obj.at(key).dump());
  }
}

inline std::string path_of(const std::string& parent, const char* key) {
  return parent.empty() ? key : parent + "." + key;
}

inline OptimizerSpec parse_optimizer(const Json& j, const std::string& where, OptimizerSpec o) {
  reject_unknown(j, where, {"kind", "lr", "momentum", "beta1", "beta2", "eps", "keep_state"});
  if (j.contains("kind")) {
    std::string kind;
    read(j, "kind", kind, where);
    o.kind = parse_optimizer_kind(kind);
  }
  read(j, "lr", o.lr, where);
  read(j, "momentum", o.momentum, where);
  read(j, "beta1", o.beta1, where);
  read(j, "beta2", o.beta2, where);
  read(j, "eps", o.eps, where);
  read(j, "keep_state", o.keep_state, where);
  if (!(o.lr >= 0)) throw ConfigError(where + ".lr must be >= 0");
  if (!(o.beta1 >= 0 && o.beta1 < 1) || !(o.beta2 >= 0 && o.beta2 < 1)) {
    throw ConfigError(where + ": betas must be in [0, 1)");
  }
  if (!(o.eps >= 0)) throw ConfigError(where + ".eps must be >= 0");
  return o;
}

inline Json optimizer_json(const OptimizerSpec& o) {
  return Json{{"kind", to_string(o.kind)}, {"lr", o.lr},       {"momentum", o.momentum},
              {"beta1", o.beta1},          {"beta2", o.beta2}, {"eps", o.eps},
              {"keep_state", o.keep_state}};
}

inline void require_positive(std::size_t v, const std::string& what) {
  if (v == 0) throw ConfigError(what + " must be at least 1");
}

}  // namespace detail

/// Parses and validates a config document. Every key is optional except
/// "dataset"; unknown keys are rejected.
inline RunConfig parse_config_json(const Json& j) {
  using namespace detail;
  RunConfig c;
  reject_unknown(j, "", {"mode", "run_id", "dataset", "image_size", "seed", "replicates", "output_dir", "split",
                         "model", "pretrain_classes", "checkpoint", "pretrain", "transfer", "zapdiv",
                         "gradcheck", "sweep"});
  if (!j.contains("dataset")) throw ConfigError("missing required key \"dataset\"");
  const Json& ds = j.at("dataset");
  if (ds.is_string()) {
    c.dataset_path = ds.get<std::string>();
  } else if (ds.is_object()) {
    reject_unknown(ds, "dataset", {"synthetic"});
    if (!ds.contains("synthetic")) throw ConfigError("missing required key \"synthetic\" in dataset");
    const Json& s = ds.at("synthetic");
    reject_unknown(s, "dataset.synthetic", {"classes", "per_class", "size"});
    SyntheticSpec spec;
    read(s, "classes", spec.classes, "dataset.synthetic");
    read(s, "per_class", spec.per_class, "dataset.synthetic");
    read(s, "size", spec.size, "dataset.synthetic");
    require_positive(spec.classes, "dataset.synthetic.classes");
    require_positive(spec.per_class, "dataset.synthetic.per_class");
    require_positive(spec.size, "dataset.synthetic.size");
    c.synthetic = spec;
  } else {
    throw ConfigError("\"dataset\" must be a path or {\"synthetic\": {...}}");
  }
  if (j.contains("mode")) {
    std::string mode;
    read(j, "mode", mode, "");
    if (mode != "pretrain" && mode != "transfer" && mode != "zapdiv" && mode != "gradcheck" && mode != "sweep") {
      throw ConfigError("mode must be one of pretrain, transfer, zapdiv, gradcheck, sweep; got \"" + mode + "\"");
    }
    c.mode = mode;
  }
  read(j, "run_id", c.run_id, "");
  read(j, "image_size", c.image_size, "");
  read(j, "seed", c.seed, "");
  read(j, "replicates", c.replicates, "");
  read(j, "output_dir", c.output_dir, "");
  read(j, "pretrain_classes", c.pretrain_classes, "");
  if (j.contains("checkpoint") && !j.at("checkpoint").is_null()) {
    std::string p;
    read(j, "checkpoint", p, "");
    c.checkpoint = p;
  }
  require_positive(c.image_size, "image_size");
  require_positive(c.replicates, "replicates");
  if (c.run_id.empty() || c.run_id.find_first_of(",\n\"/") != std::string::npos) {
    throw ConfigError("run_id must be non-empty and free of ',', '\"', '/' and newlines");
  }

  if (j.contains("split")) {
    const Json& s = j.at("split");
    reject_unknown(s, "split", {"train", "test"});
    read(s, "train", c.split.n_train, "split");
    read(s, "test", c.split.n_test, "split");
    require_positive(c.split.n_train, "split.train");
  }
  c.split.seed = derive_seed(c.seed, Stream::split);

  if (j.contains("model")) {
    const Json& m = j.at("model");
    reject_unknown(m, "model", {"channels", "kernel", "stride", "padding", "norm_eps", "init_scale"});
    read(m, "channels", c.model.channels, "model");
    read(m, "kernel", c.model.kernel, "model");
    read(m, "stride", c.model.stride, "model");
    read(m, "padding", c.model.padding, "model");
    read(m, "norm_eps", c.model.norm_eps, "model");
    read(m, "init_scale", c.init_scale, "model");
    require_positive(c.model.channels, "model.channels");
    require_positive(c.model.kernel, "model.kernel");
    require_positive(c.model.stride, "model.stride");
    if (!(c.model.norm_eps > 0)) throw ConfigError("model.norm_eps must be > 0");
    if (!(c.init_scale > 0)) throw ConfigError("model.init_scale must be > 0");
  }
  c.model.height = c.model.width = c.image_size;

  if (j.contains("pretrain")) {
    const Json& p = j.at("pretrain");
    reject_unknown(p, "pretrain", {"mode", "zap", "epochs", "iterations", "eval_interval", "batch_size",
                                   "remember_set_size", "optimizer"});
    if (p.contains("mode")) {
      std::string mode;
      read(p, "mode", mode, "pretrain");
      if (mode == "iid") c.pretrain.mode = PretrainMode::iid;
      else if (mode == "asb") c.pretrain.mode = PretrainMode::asb;
      else throw ConfigError("pretrain.mode must be \"iid\" or \"asb\", got \"" + mode + "\"");
    }
    read(p, "zap", c.pretrain.zap, "pretrain");
    read(p, "epochs", c.pretrain.epochs, "pretrain");
    read(p, "iterations", c.pretrain.iterations, "pretrain");
    read(p, "eval_interval", c.pretrain.eval_interval, "pretrain");
    read(p, "batch_size", c.pretrain.batch_size, "pretrain");
    read(p, "remember_set_size", c.pretrain.remember_set_size, "pretrain");
    if (p.contains("optimizer"))
      c.pretrain.optimizer = parse_optimizer(p.at("optimizer"), "pretrain.optimizer", c.pretrain.optimizer);
    require_positive(c.pretrain.batch_size, "pretrain.batch_size");
  }
  if (j.contains("transfer")) {
    const Json& t = j.at("transfer");
    reject_unknown(t, "transfer", {"mode", "probe", "n_tasks", "epochs", "batch_size", "probe_stride",
                                   "optimizer"});
    if (t.contains("mode")) {
      std::string mode;
      read(t, "mode", mode, "transfer");
      if (mode == "iid") c.transfer.mode = TransferMode::iid;
      else if (mode == "sequential") c.transfer.mode = TransferMode::sequential;
      else throw ConfigError("transfer.mode must be \"iid\" or \"sequential\", got \"" + mode + "\"");
    }
    if (t.contains("probe")) {
      std::string probe;
      read(t, "probe", probe, "transfer");
      if (probe == "linear") c.transfer.probe = ProbeMode::linear;
      else if (probe == "full") c.transfer.probe = ProbeMode::full;
      else throw ConfigError("transfer.probe must be \"linear\" or \"full\", got \"" + probe + "\"");
    }
    read(t, "n_tasks", c.transfer.n_tasks, "transfer");
    read(t, "epochs", c.transfer.epochs, "transfer");
    read(t, "batch_size", c.transfer.batch_size, "transfer");
    read(t, "probe_stride", c.transfer.probe_stride, "transfer");
    if (t.contains("optimizer"))
      c.transfer.optimizer = parse_optimizer(t.at("optimizer"), "transfer.optimizer", c.transfer.optimizer);
    require_positive(c.transfer.n_tasks, "transfer.n_tasks");
    require_positive(c.transfer.batch_size, "transfer.batch_size");
  }
  if (j.contains("zapdiv")) {
    const Json& z = j.at("zapdiv");
    reject_unknown(z, "zapdiv", {"steps", "batch_size", "lrs", "optimizer"});
    read(z, "steps", c.zapdiv.steps, "zapdiv");
    read(z, "batch_size", c.zapdiv.batch_size, "zapdiv");
    read(z, "lrs", c.zapdiv.lrs, "zapdiv");
    if (z.contains("optimizer"))
      c.zapdiv.optimizer = parse_optimizer(z.at("optimizer"), "zapdiv.optimizer", c.zapdiv.optimizer);
    require_positive(c.zapdiv.batch_size, "zapdiv.batch_size");
    if (c.zapdiv.lrs.empty()) throw ConfigError("zapdiv.lrs must not be empty");
  }
  if (j.contains("gradcheck")) {
    const Json& g = j.at("gradcheck");
    reject_unknown(g, "gradcheck", {"channels", "classes", "batch", "h", "tolerance"});
    read(g, "channels", c.gradcheck.channels, "gradcheck");
    read(g, "classes", c.gradcheck.classes, "gradcheck");
    read(g, "batch", c.gradcheck.batch, "gradcheck");
    read(g, "h", c.gradcheck.h, "gradcheck");
    read(g, "tolerance", c.gradcheck.tolerance, "gradcheck");
    require_positive(c.gradcheck.channels, "gradcheck.channels");
    require_positive(c.gradcheck.classes, "gradcheck.classes");
    require_positive(c.gradcheck.batch, "gradcheck.batch");
    if (!(c.gradcheck.h > 0)) throw ConfigError("gradcheck.h must be > 0");
  }
  if (j.contains("sweep")) {
    const Json& s = j.at("sweep");
    reject_unknown(s, "sweep", {"lrs", "optimizers", "zapped"});
    read(s, "lrs", c.sweep.lrs, "sweep");
    if (s.contains("optimizers")) {
      std::vector<std::string> names;
      read(s, "optimizers", names, "sweep");
      c.sweep.optimizers.clear();
      for (const auto& n : names) c.sweep.optimizers.push_back(parse_optimizer_kind(n));
    }
    read(s, "zapped", c.sweep.zapped, "sweep");
    if (c.sweep.lrs.empty() || c.sweep.optimizers.empty() || c.sweep.zapped.empty()) {
      throw ConfigError("sweep lists must not be empty");
    }
  }
  for (double lr : c.zapdiv.lrs)
    if (!(lr >= 0)) throw ConfigError("learning rates must be >= 0");
  for (double lr : c.sweep.lrs)
    if (!(lr >= 0)) throw ConfigError("learning rates must be >= 0");
  return c;
}

inline RunConfig parse_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw ConfigError("config file not found: " + path.string());
  Json j;
  try {
    j = Json::parse(detail::read_file(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config_json(j);
}

/// Fully resolved config; parse_config_json(to_json(c)) reproduces c.
inline Json to_json(const RunConfig& c) {
  using detail::optimizer_json;
  Json j;
  if (c.mode) j["mode"] = *c.mode;
  j["run_id"] = c.run_id;
  if (c.dataset_path) {
    j["dataset"] = *c.dataset_path;
  } else if (c.synthetic) {
    j["dataset"] = Json{{"synthetic", Json{{"classes", c.synthetic->classes},
                                           {"per_class", c.synthetic->per_class},
                                           {"size", c.synthetic->size}}}};
  }
  j["image_size"] = c.image_size;
  j["seed"] = c.seed;
  j["replicates"] = c.replicates;
  j["output_dir"] = c.output_dir;
  j["split"] = Json{{"train", c.split.n_train}, {"test", c.split.n_test}};
  j["model"] = Json{{"channels", c.model.channels}, {"kernel", c.model.kernel},
                    {"stride", c.model.stride},     {"padding", c.model.padding},
                    {"norm_eps", c.model.norm_eps}, {"init_scale", c.init_scale}};
  j["pretrain_classes"] = c.pretrain_classes;
  j["checkpoint"] = c.checkpoint ? Json(*c.checkpoint) : Json(nullptr);
  j["pretrain"] = Json{{"mode", to_string(c.pretrain.mode)},
                       {"zap", c.pretrain.zap},
                       {"epochs", c.pretrain.epochs},
                       {"iterations", c.pretrain.iterations},
                       {"eval_interval", c.pretrain.eval_interval},
                       {"batch_size", c.pretrain.batch_size},
                       {"remember_set_size", c.pretrain.remember_set_size},
                       {"optimizer", optimizer_json(c.pretrain.optimizer)}};
  j["transfer"] = Json{{"mode", to_string(c.transfer.mode)},
                       {"probe", to_string(c.transfer.probe)},
                       {"n_tasks", c.transfer.n_tasks},
                       {"epochs", c.transfer.epochs},
                       {"batch_size", c.transfer.batch_size},
                       {"probe_stride", c.transfer.probe_stride},
                       {"optimizer", optimizer_json(c.transfer.optimizer)}};
  j["zapdiv"] = Json{{"steps", c.zapdiv.steps},
                     {"batch_size", c.zapdiv.batch_size},
                     {"lrs", c.zapdiv.lrs},
                     {"optimizer", optimizer_json(c.zapdiv.optimizer)}};
  j["gradcheck"] = Json{{"channels", c.gradcheck.channels}, {"classes", c.gradcheck.classes},
                        {"batch", c.gradcheck.batch},       {"h", c.gradcheck.h},
                        {"tolerance", c.gradcheck.tolerance}};
  std::vector<std::string> opts;
  for (auto k : c.sweep.optimizers) opts.push_back(to_string(k));
  j["sweep"] = Json{{"lrs", c.sweep.lrs}, {"optimizers", opts}, {"zapped", c.sweep.zapped}};
  return j;
}

}  // namespace zapnet
