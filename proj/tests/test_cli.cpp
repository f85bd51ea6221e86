#include <gtest/gtest.h>

#include <bit>
#include <cstring>
#include <sstream>

#include "test_util.hpp"

using namespace zapnet;

namespace {

Json tiny_config(const std::filesystem::path& out) {
  Json j = Json::parse(R"({
    "run_id": "tiny",
    "dataset": {"synthetic": {"classes": 5, "per_class": 20, "size": 22}},
    "image_size": 22,
    "seed": 7,
    "replicates": 2,
    "model": {"channels": 4},
    "pretrain_classes": 3,
    "pretrain": {"epochs": 1, "batch_size": 16},
    "transfer": {"n_tasks": 2, "epochs": 2, "probe_stride": 10},
    "zapdiv": {"steps": 5, "batch_size": 8, "lrs": [0.001, 0.01]},
    "sweep": {"lrs": [0.0001, 0.001]}
  })");
  j["output_dir"] = out.string();
  return j;
}

int run_quiet(Subcommand cmd, const RunConfig& c, std::string* err_text = nullptr) {
  std::ostringstream out, err;
  const int code = run(cmd, c, out, err);
  if (err_text) *err_text = err.str();
  return code;
}

Checkpoint random_checkpoint(Rng& rng) {
  Checkpoint ck;
  const std::size_t n = rng.below(5);
  for (std::size_t i = 0; i < n; ++i) {
    Shape s(1 + rng.below(4));
    for (auto& d : s) d = 1 + rng.below(4);
    Tensor<float> t(s);
    // Raw bit patterns, including NaN payloads and infinities.
    for (auto& v : t.data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
    std::string name;
    for (std::size_t k = 0, len = rng.below(12); k < len; ++k) name.push_back(static_cast<char>('a' + rng.below(26)));
    ck.tensors.push_back({name, std::move(t)});
  }
  if (rng.below(2)) {
    OptimizerSnapshot o;
    o.spec.kind = rng.below(2) ? OptimizerKind::sgd : OptimizerKind::adam;
    o.spec.lr = rng.uniform();
    o.spec.momentum = rng.uniform();
    o.spec.keep_state = rng.below(2) == 1;
    o.t = rng();
    o.buffers.resize(rng.below(4));
    for (auto& b : o.buffers) {
      b.resize(rng.below(6));
      for (auto& v : b) v = static_cast<float>(rng.normal());
    }
    ck.optimizer = std::move(o);
  }
  if (rng.below(2)) ck.config_json = "{\"seed\": " + std::to_string(rng.below(1000)) + "}";
  return ck;
}

}  // namespace

TEST(Config, MinimalConfigGetsDefaults) {
  const RunConfig c = parse_config_json(Json::parse(R"({"dataset": "data/omniglot", "mode": "pretrain"})"));
  EXPECT_EQ(*c.mode, "pretrain");
  EXPECT_EQ(c.split.n_train, 15u);
  EXPECT_EQ(c.split.n_test, 5u);
  EXPECT_DOUBLE_EQ(c.pretrain.optimizer.momentum, 0.9);
  EXPECT_DOUBLE_EQ(c.pretrain.optimizer.beta1, 0.9);
  EXPECT_DOUBLE_EQ(c.pretrain.optimizer.beta2, 0.999);
  EXPECT_DOUBLE_EQ(c.pretrain.optimizer.eps, 1e-8);
  EXPECT_EQ(c.transfer.probe_stride, 5u);
  EXPECT_EQ(c.pretrain.remember_set_size, 64u);
  // The resolved dump parses back to the same values.
  const Json dumped = to_json(c);
  EXPECT_EQ(to_json(parse_config_json(dumped)), dumped);
  EXPECT_TRUE(dumped.contains("pretrain"));
}

TEST(Config, UnknownKeyIsNamed) {
  try {
    parse_config_json(Json::parse(R"({"dataset": "d", "pretrain": {"learnig_rate": 0.1}})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("learnig_rate"), std::string::npos);
  }
}

TEST(Config, MissingDatasetIsNamed) {
  try {
    parse_config_json(Json::parse(R"({"mode": "sweep"})"));
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("dataset"), std::string::npos);
  }
}

TEST(Config, SweepLrListAccepted) {
  const RunConfig c = parse_config_json(
      Json::parse(R"({"dataset": "d", "mode": "sweep", "sweep": {"lrs": [0.0001, 0.0003, 0.0006, 0.0010]}})"));
  EXPECT_EQ(c.sweep.lrs, (std::vector<double>{0.0001, 0.0003, 0.0006, 0.001}));
}

TEST(Config, BadValuesRejected) {
  EXPECT_THROW(parse_config_json(Json::parse(R"({"dataset": "d", "mode": "train"})")), ConfigError);
  EXPECT_THROW(parse_config_json(Json::parse(R"({"dataset": "d", "seed": "x"})")), ConfigError);
  EXPECT_THROW(parse_config_json(Json::parse(R"({"dataset": "d", "zapdiv": {"lrs": [-1]}})")), ConfigError);
  EXPECT_THROW(parse_config_json(Json::parse(R"({"dataset": "d", "run_id": "a,b"})")), ConfigError);
  EXPECT_THROW(parse_config("/nonexistent/config.json"), ConfigError);
}

TEST(Config, OverridesApply) {
  RunConfig c = parse_config_json(Json::parse(R"({"dataset": "d"})"));
  apply_overrides(c, Subcommand::zapdiv, Overrides{"o", 5, {0.1, 0.2}, 3});
  EXPECT_EQ(c.output_dir, "o");
  EXPECT_EQ(c.seed, 5u);
  EXPECT_EQ(c.split.seed, derive_seed(5, Stream::split));
  EXPECT_EQ(c.zapdiv.lrs, (std::vector<double>{0.1, 0.2}));
  EXPECT_EQ(c.replicates, 3u);
  EXPECT_THROW(apply_overrides(c, Subcommand::gradcheck, Overrides{{}, {}, {0.1}, {}}), ConfigError);
  EXPECT_THROW(apply_overrides(c, Subcommand::pretrain, Overrides{{}, {}, {0.1, 0.2}, {}}), ConfigError);
  EXPECT_THROW(parse_subcommand("train"), ConfigError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
  Rng rng(5);
  for (int trial = 0; trial < 150; ++trial) {
    const Checkpoint ck = random_checkpoint(rng);
    const std::string bytes = encode_checkpoint(ck);
    const Checkpoint back = decode_checkpoint(bytes);
    EXPECT_EQ(encode_checkpoint(back), bytes);
    ASSERT_EQ(back.tensors.size(), ck.tensors.size());
    for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
      EXPECT_EQ(back.tensors[i].name, ck.tensors[i].name);
      EXPECT_EQ(std::memcmp(back.tensors[i].tensor.data().data(), ck.tensors[i].tensor.data().data(),
                            ck.tensors[i].tensor.numel() * sizeof(float)),
                0);
    }
  }
}

TEST(Checkpoint, ModelRoundTripThroughDisk) {
  const auto m = init_model<float>(4, 22, 22, 1, 3, 8);
  Optimizer<float> opt(OptimizerSpec{});
  const auto dir = zt::temp_dir("ckpt_disk");
  save_checkpoint(make_checkpoint(m, &opt, "{}"), dir / "sub" / "m.zck");
  const Checkpoint ck = load_checkpoint(dir / "sub" / "m.zck");
  ASSERT_TRUE(ck.optimizer);
  EXPECT_EQ(ck.optimizer->buffers.size(), 16u);
  ModelDims d = m.dims();
  d.n_classes = 99;
  const auto back = model_from_checkpoint(ck, d);
  EXPECT_EQ(back.n_classes(), 3u);
  const auto pa = m.parameters(), pb = back.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->storage(), pb[i]->storage());
  d.channels = 5;
  EXPECT_THROW(model_from_checkpoint(ck, d), FormatError);
}

TEST(Checkpoint, WithoutOptimizerStateLoadsAsAbsent) {
  const auto ck = decode_checkpoint(encode_checkpoint(make_checkpoint(init_model<float>(4, 22, 22, 1, 2, 1))));
  EXPECT_FALSE(ck.optimizer);
  EXPECT_FALSE(ck.config_json);
}

TEST(Checkpoint, CorruptionIsFormatError) {
  const std::string bytes = encode_checkpoint(make_checkpoint(init_model<float>(4, 22, 22, 1, 2, 1)));
  std::string bad = bytes;
  bad[2] = 'X';
  EXPECT_THROW(decode_checkpoint(bad), FormatError);
  std::string version = bytes;
  version[7] = '2';
  try {
    decode_checkpoint(version);
    FAIL() << "expected FormatError";
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("version"), std::string::npos);
  }
  EXPECT_THROW(decode_checkpoint(bytes.substr(0, bytes.size() - 3)), FormatError);
  EXPECT_THROW(decode_checkpoint(bytes + "x"), FormatError);
  EXPECT_THROW(load_checkpoint("/nonexistent/m.zck"), IoError);
}

TEST(Run, GradcheckReportWritten) {
  const auto dir = zt::temp_dir("run_gradcheck");
  Json j = Json::parse(R"({"dataset": "unused", "gradcheck": {"channels": 2, "batch": 1}, "image_size": 22})");
  j["output_dir"] = dir.string();
  const RunConfig c = parse_config_json(j);
  std::ostringstream out, err;
  const int code = run(Subcommand::gradcheck, c, out, err);
  const std::string report = zt::slurp(dir / "gradcheck.txt");
  EXPECT_EQ(report, out.str());
  EXPECT_EQ(code, report.rfind("PASS", 0) == 0 ? 0 : 2);
  EXPECT_NE(report.find("max_relative_error="), std::string::npos);
  EXPECT_TRUE(std::filesystem::exists(dir / "resolved_config.json"));
}

TEST(Run, ExitCodes) {
  const auto dir = zt::temp_dir("run_codes");
  RunConfig c = parse_config_json(tiny_config(dir));
  c.mode = "zapdiv";
  EXPECT_EQ(run_quiet(Subcommand::pretrain, c), 1);
  c.mode.reset();
  c.dataset_path = (dir / "missing.zd").string();
  c.synthetic.reset();
  EXPECT_EQ(run_quiet(Subcommand::pretrain, c), 3);

  RunConfig nan = parse_config_json(tiny_config(dir / "nan"));
  nan.pretrain.optimizer.kind = OptimizerKind::sgd;
  nan.pretrain.optimizer.lr = 1e38;
  nan.pretrain.zap = false;
  nan.pretrain.epochs = 3;
  nan.replicates = 1;
  std::string err;
  EXPECT_EQ(run_quiet(Subcommand::pretrain, nan, &err), 2);
  EXPECT_NE(err.find("aborted"), std::string::npos) << err;
  std::optional<std::string> reason;
  read_csv<AccuracyRow>(dir / "nan" / "accuracy.csv", &reason);
  EXPECT_TRUE(reason);
}

TEST(Run, PretrainWritesCheckpointsAndResolvedConfig) {
  const auto dir = zt::temp_dir("run_pretrain");
  const RunConfig c = parse_config_json(tiny_config(dir));
  ASSERT_EQ(run_quiet(Subcommand::pretrain, c), 0);
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "tiny.r0.zck"));
  EXPECT_TRUE(std::filesystem::exists(dir / "checkpoints" / "tiny.r1.zck"));
  const auto acc = read_csv<AccuracyRow>(dir / "accuracy.csv");
  EXPECT_EQ(acc.size(), 2u * 2);
  const Json resolved = Json::parse(zt::slurp(dir / "resolved_config.json"));
  EXPECT_EQ(parse_config_json(resolved).seed, 7u);

  // A transfer run can start from the saved checkpoints.
  Json j = tiny_config(dir / "from_ckpt");
  j["checkpoint"] = (dir / "checkpoints" / "tiny.r{replicate}.zck").string();
  ASSERT_EQ(run_quiet(Subcommand::transfer, parse_config_json(j)), 0);
  EXPECT_FALSE(std::filesystem::exists(dir / "from_ckpt" / "checkpoints"));
  const auto pt = read_csv<PerTaskRow>(dir / "from_ckpt" / "pertask.csv");
  EXPECT_FALSE(pt.empty());
}

TEST(Run, ZapdivRowCount) {
  const auto dir = zt::temp_dir("run_zapdiv");
  const RunConfig c = parse_config_json(tiny_config(dir));
  ASSERT_EQ(run_quiet(Subcommand::zapdiv, c), 0);
  // lrs x replicates x (steps + step-0 row) x layers
  EXPECT_EQ(read_csv<CosimRow>(dir / "zapdiv.csv").size(), 2u * 2 * 6 * 4);
}

TEST(Run, SweepRowsAndDeterminism) {
  const auto a = zt::temp_dir("run_sweep_a");
  const auto b = zt::temp_dir("run_sweep_b");
  RunConfig c = parse_config_json(tiny_config(a));
  ASSERT_EQ(run_quiet(Subcommand::sweep, c), 0);
  // optimizers x zapped x epochs x lrs x replicates
  const auto rows = read_csv<SweepRow>(a / "sweep.csv");
  EXPECT_EQ(rows.size(), 2u * 2 * 2 * 2 * 2);
  c.output_dir = b.string();
  ASSERT_EQ(run_quiet(Subcommand::sweep, c), 0);
  for (const char* f : {"sweep.csv", "accuracy.csv", "pertask.csv"}) EXPECT_EQ(zt::slurp(a / f), zt::slurp(b / f)) << f;
}

TEST(Config, ShippedConfigsParse) {
  std::size_t n = 0;
  for (const auto& e : std::filesystem::directory_iterator(ZAPNET_CONFIG_DIR)) {
    if (e.path().extension() != ".json") continue;
    const RunConfig c = parse_config(e.path());
    ASSERT_TRUE(c.mode) << e.path();
    EXPECT_NO_THROW(parse_subcommand(*c.mode)) << e.path();
    ++n;
  }
  EXPECT_GE(n, 5u);
}
