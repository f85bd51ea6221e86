#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace zapnet;

namespace {

double cos2(std::vector<double> a, std::vector<double> b) {
  return cosine_similarity<double>(a, b);
}

}  // namespace

TEST(Cosine, Examples) {
  EXPECT_DOUBLE_EQ(cos2({0.3, -1.2, 5.0}, {0.3, -1.2, 5.0}), 1.0);
  EXPECT_DOUBLE_EQ(cos2({1, 0}, {0, 1}), 0.0);
  EXPECT_NEAR(cos2({1, 1}, {1, 0}), 0.70711, 1e-5);
  EXPECT_DOUBLE_EQ(cos2({1, 2}, {-2, -4}), -1.0);
  EXPECT_DOUBLE_EQ(cos2({0, 0}, {1, 2}), 0.0);
  EXPECT_THROW(cos2({0, 0}, {0, 0}), NumericalError);
  EXPECT_THROW(cos2({1}, {1, 2}), ShapeError);
}

TEST(Cosine, IdenticalFloatVectorsGiveExactlyOne) {
  Rng rng(2);
  std::vector<float> v(5000);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  EXPECT_EQ(cosine_similarity<float>(v, v), 1.0);
}

TEST(Cosine, LayerCosimChecksShapes) {
  const auto a = init_model<float>(8, 28, 28, 1, 3, 1);
  const auto b = init_model<float>(8, 28, 28, 1, 4, 1);
  EXPECT_EQ(layer_cosim(a, b, "conv2"), 1.0);
  EXPECT_THROW(layer_cosim(a, b, "fc"), ShapeError);
  EXPECT_THROW(layer_cosim(a, a, "conv9"), ConfigError);
}

class ZapDivergence : public ::testing::Test {
 protected:
  FewShotDataset data = make_synthetic(4, 20, 22, 3);
  DataView view = full_view(data);
  ConvNet<float> model = init_model<float>(16, 22, 22, 1, 4, 5);
};

TEST_F(ZapDivergence, ControlRunStaysIdentical) {
  ZapDivergenceConfig cfg;
  cfg.steps = 4;
  cfg.zap = false;
  const auto s = zap_divergence_run(model, view, cfg);
  ASSERT_EQ(s.steps(), 5u);
  for (const auto& layer : s.values)
    for (double v : layer) EXPECT_EQ(v, 1.0);
}

TEST_F(ZapDivergence, StepZeroSignature) {
  ZapDivergenceConfig cfg;
  cfg.steps = 6;
  cfg.batch_size = 8;
  cfg.seed = 9;
  const auto s = zap_divergence_run(model, view, cfg, 2);
  ASSERT_EQ(s.layers, (std::vector<std::string>{"conv1", "conv2", "conv3", "fc"}));
  for (std::size_t l = 0; l < 3; ++l) EXPECT_EQ(s.values[l][0], 1.0);
  EXPECT_LT(std::abs(s.values[3][0]), 0.2);
  // The zapped copy sees a different loss, so conv weights part ways.
  EXPECT_LT(s.values[2].back(), 1.0);
  const auto rows = s.rows("zd");
  EXPECT_EQ(rows.size(), 7u * 4);
  EXPECT_EQ(rows[4].step, 1u);
  EXPECT_EQ(rows[0].replicate, 2u);
  EXPECT_EQ(rows[0].optimizer, "adam");
}

TEST_F(ZapDivergence, Deterministic) {
  ZapDivergenceConfig cfg;
  cfg.steps = 3;
  cfg.seed = 4;
  const auto a = zap_divergence_run(model, view, cfg);
  const auto b = zap_divergence_run(model, view, cfg);
  EXPECT_EQ(a.values, b.values);
}

TEST(Probe, SideEffectFreeAndNearChance) {
  const auto data = make_synthetic(5, 20, 22, 3);
  const auto [train, test] = split(data, SplitSpec{});
  const auto m = init_model<float>(16, 22, 22, 1, 5, 2);
  const auto before = m;
  const std::vector<std::size_t> tasks{4, 0, 2, 1, 3};
  const auto losses = per_task_probe(m, train, std::span<const std::size_t>(tasks));
  ASSERT_EQ(losses.size(), 5u);
  // An untrained head: individual tasks scatter, their mean sits near ln C.
  double mean = 0;
  for (double l : losses) mean += l / 5;
  EXPECT_NEAR(mean, std::log(5.0), 0.3);
  const auto pa = m.parameters(), pb = before.parameters();
  for (std::size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i]->storage(), pb[i]->storage());
  // Reporting order follows the task list.
  const std::vector<std::size_t> first{4};
  // Logits are computed in chunks, so float rounding may differ slightly.
  EXPECT_NEAR(per_task_probe(m, train, std::span<const std::size_t>(first))[0], losses[0], 1e-6);
  const std::vector<std::size_t> bad{5};
  EXPECT_THROW(per_task_probe(m, train, std::span<const std::size_t>(bad)), ConfigError);
}

TEST(Metrics, HeaderOnlyFilesForEmptyRecord) {
  const auto dir = zt::temp_dir("metrics_empty");
  const auto paths = write_metrics(MetricsRecord{}, dir);
  ASSERT_EQ(paths.size(), 3u);
  EXPECT_EQ(zt::slurp(dir / "accuracy.csv"), "run_id,replicate,phase,epoch,split,accuracy,loss\n");
  EXPECT_EQ(zt::slurp(dir / "pertask.csv"), "run_id,replicate,optimizer,lr,probe,epoch,step,task_id,loss\n");
  EXPECT_EQ(zt::slurp(dir / "zapdiv.csv"), "run_id,replicate,optimizer,lr,step,layer,cosim\n");
}

TEST(Metrics, RoundTripAndRowCounts) {
  MetricsRecord m;
  m.accuracy.push_back({"r", 0, "transfer", -1, "test", 0.05, 2.9957322735539909});
  m.accuracy.push_back({"r", 1, "pretrain", 3, "val", 0.1 + 0.2, 1e-300});
  m.pertask.push_back({"r", 0, "sgd", 0.0006, "full", 2, 300, 19, 0.123456789});
  m.cosim.push_back({"r", 4, "adam", 0.001, 300, "conv3", 0.99990000000000001});
  const auto dir = zt::temp_dir("metrics_rt");
  write_metrics(m, dir);
  const auto acc = read_csv<AccuracyRow>(dir / "accuracy.csv");
  ASSERT_EQ(acc.size(), 2u);
  EXPECT_EQ(acc[0].epoch, -1);
  EXPECT_EQ(acc[1].accuracy, 0.1 + 0.2);
  EXPECT_EQ(acc[1].loss, 1e-300);
  const auto pt = read_csv<PerTaskRow>(dir / "pertask.csv");
  ASSERT_EQ(pt.size(), 1u);
  EXPECT_EQ(pt[0].task_id, 19u);
  EXPECT_EQ(pt[0].lr, 0.0006);
  const auto cs = read_csv<CosimRow>(dir / "zapdiv.csv");
  ASSERT_EQ(cs.size(), 1u);
  EXPECT_EQ(cs[0].layer, "conv3");
  EXPECT_EQ(cs[0].cosim, 0.99990000000000001);
  // Shortest round-trip formatting.
  EXPECT_NE(zt::slurp(dir / "accuracy.csv").find(",0.30000000000000004,"), std::string::npos);
}

TEST(Metrics, TruncationMarker) {
  MetricsRecord m;
  m.accuracy.push_back({"r", 0, "pretrain", 0, "train", 0.5, 1.0});
  m.truncated = "pretrain aborted at epoch 1, step 7: non-finite loss";
  const std::string text = render_csv(m.accuracy, m.truncated);
  EXPECT_NE(text.find("\n#TRUNCATED,pretrain aborted at epoch 1  step 7: non-finite loss,,,,,\n"),
            std::string::npos)
      << text;
  std::optional<std::string> reason;
  const auto rows = parse_csv<AccuracyRow>(text, &reason);
  EXPECT_EQ(rows.size(), 1u);
  ASSERT_TRUE(reason);
  EXPECT_NE(reason->find("aborted"), std::string::npos);
}

TEST(Metrics, SweepRows) {
  std::vector<SweepRow> rows{{"s", 2, "sgd", true, 0.0001, 2, 0.75, 0.9}};
  const std::string text = render_csv(rows);
  const auto back = parse_csv<SweepRow>(text);
  ASSERT_EQ(back.size(), 1u);
  EXPECT_TRUE(back[0].zapped);
  EXPECT_EQ(back[0].epoch, 2);
  EXPECT_THROW(parse_csv<AccuracyRow>(text), FormatError);
}
