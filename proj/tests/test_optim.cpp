#include <gtest/gtest.h>

#include <cmath>

#include "test_util.hpp"

using namespace zapnet;

namespace {

Tensor<double> param(std::vector<double> values) {
  const std::size_t n = values.size();
  Tensor<double> t(Shape{n}, std::move(values));
  t.set_requires_grad(true);
  return t;
}

void set_grad(Tensor<double>& p, std::vector<double> g) { p.set_grad(std::move(g)); }

std::span<Tensor<double>* const> one(Tensor<double>*& p) { return {&p, 1}; }

std::span<Tensor<double>* const> sp(std::vector<Tensor<double>*>& v) { return v; }

}  // namespace

TEST(Sgd, HandDerivedTwoSteps) {
  auto th = param({1.0});
  Tensor<double>* p = &th;
  SgdState<double> s{0.1, 0.9, {}};
  set_grad(th, {0.5});
  sgd_step(one(p), s);
  EXPECT_NEAR(s.b[0][0], 0.5, 1e-9);
  EXPECT_NEAR(th[0], 0.95, 1e-9);
  sgd_step(one(p), s);
  EXPECT_NEAR(s.b[0][0], 0.95, 1e-9);
  EXPECT_NEAR(th[0], 0.855, 1e-9);
}

TEST(Sgd, ZeroGradientZeroBufferNoChange) {
  auto th = param({0.3, -2.0});
  Tensor<double>* p = &th;
  SgdState<double> s{0.1, 0.9, {}};
  set_grad(th, {0, 0});
  sgd_step(one(p), s);
  EXPECT_EQ(th.storage(), (std::vector<double>{0.3, -2.0}));
}

TEST(Sgd, NoMomentumIsPlainGradientDescent) {
  Rng rng(1);
  auto th = zt::random_tensor(Shape{16}, rng);
  th.set_requires_grad(true);
  Tensor<double>* p = &th;
  SgdState<double> s{0.01, 0.0, {}};
  for (int step = 0; step < 5; ++step) {
    const auto g = zt::random_tensor(Shape{16}, rng);
    set_grad(th, g.storage());
    auto expect = th.storage();
    for (std::size_t i = 0; i < 16; ++i) expect[i] = expect[i] - 0.01 * g[i];
    sgd_step(one(p), s);
    EXPECT_EQ(th.storage(), expect);
  }
}

TEST(Sgd, BufferShapeMismatchThrows) {
  auto th = param({1, 2});
  Tensor<double>* p = &th;
  SgdState<double> s{0.1, 0.9, {std::vector<double>(3)}};
  set_grad(th, {1, 1});
  EXPECT_THROW(sgd_step(one(p), s), ShapeError);
}

TEST(Adam, HandDerivedFirstStep) {
  auto th = param({0.0});
  Tensor<double>* p = &th;
  AdamState<double> s;
  s.lr = 0.001;
  set_grad(th, {1.0});
  adam_step(one(p), s);
  EXPECT_EQ(s.t, 1u);
  EXPECT_NEAR(s.m[0][0], 0.1, 1e-12);
  EXPECT_NEAR(s.v[0][0], 0.001, 1e-12);
  // m_hat = 1, v_hat = 1: theta = -0.001 / (1 + 1e-8)
  EXPECT_NEAR(th[0], -0.0009999999900, 1e-9);
  EXPECT_NEAR(th[0], -0.001 / (1 + 1e-8), 1e-15);
}

TEST(Adam, ZeroGradientZeroStateNoChange) {
  auto th = param({0.7, -0.1});
  Tensor<double>* p = &th;
  AdamState<double> s;
  set_grad(th, {0, 0});
  adam_step(one(p), s);
  EXPECT_EQ(th.storage(), (std::vector<double>{0.7, -0.1}));
}

TEST(Adam, ConstantGradientStepApproachesLearningRate) {
  auto th = param({0.0, 0.0});
  Tensor<double>* p = &th;
  AdamState<double> s;
  s.lr = 0.001;
  double last = 0;
  for (int i = 0; i < 2000; ++i) {
    set_grad(th, {3.0, -0.02});
    const double before0 = th[0];
    adam_step(one(p), s);
    last = before0 - th[0];
  }
  // Bias-corrected moments equal g and g^2 exactly, so the step is lr * |g| / (|g| + eps).
  EXPECT_NEAR(last, 0.001, 1e-9);
  EXPECT_GT(th[1], 0.0);
}

TEST(Adam, GradientScaleInvarianceAtZeroEps) {
  for (double c : {0.1, 10.0}) {
    Rng rng(3);
    auto a = zt::random_tensor(Shape{32}, rng);
    a.set_requires_grad(true);
    auto b = a;
    Tensor<double>*pa = &a, *pb = &b;
    AdamState<double> sa, sb;
    sa.eps = sb.eps = 0;
    for (int step = 0; step < 20; ++step) {
      const auto g = zt::random_tensor(Shape{32}, rng);
      auto gc = g.storage();
      for (auto& v : gc) v *= c;
      const auto a0 = a.storage(), b0 = b.storage();
      set_grad(a, g.storage());
      set_grad(b, gc);
      adam_step(one(pa), sa);
      adam_step(one(pb), sb);
      for (std::size_t i = 0; i < 32; ++i) {
        const double da = a[i] - a0[i], db = b[i] - b0[i];
        EXPECT_NEAR(db, da, 1e-5 * std::abs(da)) << "c=" << c << " step " << step;
      }
    }
  }
}

TEST(Adam, SecondMomentStaysNonNegative) {
  Rng rng(4);
  auto th = zt::random_tensor(Shape{64}, rng);
  th.set_requires_grad(true);
  Tensor<double>* p = &th;
  AdamState<double> s;
  for (int step = 0; step < 200; ++step) {
    set_grad(th, zt::random_tensor(Shape{64}, rng, -100, 100).storage());
    adam_step(one(p), s);
    for (double v : s.v[0]) ASSERT_GE(v, 0.0);
  }
}

TEST(Optimizers, Deterministic) {
  for (auto kind : {OptimizerKind::sgd, OptimizerKind::adam}) {
    std::vector<double> out[2];
    for (int run = 0; run < 2; ++run) {
      Rng rng(9);
      auto th = zt::random_tensor(Shape{8}, rng);
      th.set_requires_grad(true);
      Tensor<double>* p = &th;
      Optimizer<double> opt(OptimizerSpec{kind, 0.01});
      for (int i = 0; i < 10; ++i) {
        set_grad(th, zt::random_tensor(Shape{8}, rng).storage());
        opt.step(one(p));
      }
      out[run] = th.storage();
    }
    EXPECT_EQ(out[0], out[1]);
  }
}

TEST(Optimizers, StepSkipsFrozenParameters) {
  auto a = param({1.0}), b = param({1.0});
  b.set_requires_grad(false);
  set_grad(a, {1.0});
  set_grad(b, {1.0});
  std::vector<Tensor<double>*> ps{&a, &b};
  Optimizer<double> opt(OptimizerSpec{OptimizerKind::sgd, 0.5});
  opt.step(ps);
  EXPECT_EQ(a[0], 0.5);
  EXPECT_EQ(b[0], 1.0);
}

namespace {

// Two parameters: a 3x2 matrix and a vector; one step with nonzero gradients
// so every buffer is populated.
template <typename S>
std::pair<std::vector<Tensor<double>>, S> stepped_state(OptimizerKind kind) {
  std::vector<Tensor<double>> ps{param({1, 2, 3, 4, 5, 6}), param({1, 1})};
  ps[0] = Tensor<double>(Shape{3, 2}, ps[0].storage());
  ps[0].set_requires_grad(true);
  set_grad(ps[0], {0.1, -0.2, 0.3, 0.4, -0.5, 0.6});
  set_grad(ps[1], {1, -1});
  std::vector<Tensor<double>*> ptrs{&ps[0], &ps[1]};
  S s;
  if constexpr (std::is_same_v<S, SgdState<double>>) {
    sgd_step(sp(ptrs), s);
  } else {
    adam_step(sp(ptrs), s);
  }
  (void)kind;
  return {std::move(ps), std::move(s)};
}

}  // namespace

TEST(ResetState, RowResetThenZeroGradientLeavesRowUnchanged) {
  auto [ps, s] = stepped_state<AdamState<double>>(OptimizerKind::adam);
  std::vector<Tensor<double>*> ptrs{&ps[0], &ps[1]};
  const auto m_before = s.m;
  const std::vector<ParamSlice> slices{{0, 1}};
  reset_state_for(sp(ptrs), std::span<const ParamSlice>(slices), s);
  EXPECT_EQ(s.t, 1u);
  EXPECT_EQ(s.m[0][2], 0.0);
  EXPECT_EQ(s.m[0][3], 0.0);
  EXPECT_EQ(s.m[0][0], m_before[0][0]);
  EXPECT_EQ(s.m[0][5], m_before[0][5]);
  EXPECT_EQ(s.m[1], m_before[1]);

  const auto row_before = std::vector<double>{ps[0][2], ps[0][3]};
  set_grad(ps[0], std::vector<double>(6, 0.0));
  set_grad(ps[1], {0, 0});
  adam_step(sp(ptrs), s);
  EXPECT_EQ(ps[0][2], row_before[0]);
  EXPECT_EQ(ps[0][3], row_before[1]);
}

TEST(ResetState, SgdWholeTensorReset) {
  auto [ps, s] = stepped_state<SgdState<double>>(OptimizerKind::sgd);
  s.lr = 0.1;
  std::vector<Tensor<double>*> ptrs{&ps[0], &ps[1]};
  const auto b1 = s.b[1];
  const std::vector<ParamSlice> slices{{0, std::nullopt}};
  reset_state_for(sp(ptrs), std::span<const ParamSlice>(slices), s);
  EXPECT_EQ(s.b[1], b1);
  const auto p0 = ps[0].storage();
  set_grad(ps[0], std::vector<double>(6, 0.0));
  set_grad(ps[1], {0, 0});
  sgd_step(sp(ptrs), s);
  EXPECT_EQ(ps[0].storage(), p0);
}

TEST(ResetState, FullResetIsFreshExceptStepCount) {
  auto [ps, s] = stepped_state<AdamState<double>>(OptimizerKind::adam);
  std::vector<Tensor<double>*> ptrs{&ps[0], &ps[1]};
  const std::vector<ParamSlice> all{{0, std::nullopt}, {1, std::nullopt}};
  reset_state_for(sp(ptrs), std::span<const ParamSlice>(all), s);
  auto copy = ps;
  std::vector<Tensor<double>*> cptrs{&copy[0], &copy[1]};
  AdamState<double> fresh;
  fresh.t = s.t;
  set_grad(ps[0], {1, 2, 3, 4, 5, 6});
  set_grad(copy[0], {1, 2, 3, 4, 5, 6});
  set_grad(ps[1], {0.5, 0.5});
  set_grad(copy[1], {0.5, 0.5});
  adam_step(sp(ptrs), s);
  adam_step(sp(cptrs), fresh);
  EXPECT_EQ(ps[0], copy[0]);
  EXPECT_EQ(ps[1], copy[1]);
  EXPECT_EQ(s, fresh);
}

TEST(ResetState, UnknownSliceThrows) {
  auto [ps, s] = stepped_state<SgdState<double>>(OptimizerKind::sgd);
  std::vector<Tensor<double>*> ptrs{&ps[0], &ps[1]};
  const std::vector<ParamSlice> bad_param{{2, std::nullopt}}, bad_row{{0, 3}};
  EXPECT_THROW(reset_state_for(sp(ptrs), std::span<const ParamSlice>(bad_param), s), ShapeError);
  EXPECT_THROW(reset_state_for(sp(ptrs), std::span<const ParamSlice>(bad_row), s), ShapeError);
}

TEST(ResetState, KeepStateFlagSkipsResetUnlessShapeChanged) {
  auto th = param({1.0, 2.0});
  std::vector<Tensor<double>*> ptrs{&th};
  OptimizerSpec spec{OptimizerKind::sgd, 0.1};
  spec.keep_state = true;
  Optimizer<double> keep(spec);
  set_grad(th, {1, 1});
  keep.step(ptrs);
  const std::vector<ParamSlice> whole{{0, std::nullopt}};
  keep.on_resampled(ptrs, whole);
  EXPECT_EQ(std::get<SgdState<double>>(keep.state()).b[0], (std::vector<double>{1, 1}));

  spec.keep_state = false;
  Optimizer<double> reset(spec);
  reset.step(ptrs);
  reset.on_resampled(ptrs, whole);
  EXPECT_TRUE(std::get<SgdState<double>>(reset.state()).b[0].empty());

  // A parameter that changed shape always loses its buffer.
  th = param({1, 2, 3});
  keep.on_resampled(ptrs, whole);
  set_grad(th, {1, 1, 1});
  EXPECT_NO_THROW(keep.step(ptrs));
}

TEST(OptimizerSpec, RejectsNegativeLearningRate) {
  EXPECT_THROW(Optimizer<float>(OptimizerSpec{OptimizerKind::adam, -1.0}), ConfigError);
  EXPECT_THROW(parse_optimizer_kind("rmsprop"), ConfigError);
}
