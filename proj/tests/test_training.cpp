#include <gtest/gtest.h>

#include "support.hpp"

using namespace mvt;
using mvt::test::small_scenario;
using mvt::test::tiny_model;

namespace {

double smooth_l1(double x) { return std::abs(x) < 1 ? 0.5 * x * x : std::abs(x) - 0.5; }

ScenarioSet tiny_set() {
  ScenarioSet set;
  auto a = small_scenario();
  auto b = small_scenario();
  b.scenario_id = "small-b";
  for (auto& p : b.history) p.x += 1.0;
  for (auto& f : b.futures)
    for (auto& p : f) p.x += 1.0;
  set.scenarios = {a, b};
  return set;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.optimizer = OptimizerKind::adam;
  t.learning_rate = 0.01;
  t.seed = 4;
  return t;
}

}  // namespace

TEST(Losses, ClassificationIsMeanNegLogOfTrueCell) {
  Graph<double> g;
  Tensor<double> b0(Shape{1, 2, 1}, std::vector<double>{0.25, 0.75});
  Tensor<double> b1(Shape{1, 2, 1}, std::vector<double>{1.0, 0.0});
  Tensor<double> b2(Shape{1, 2, 1}, std::vector<double>{0.5, 0.5});
  const std::vector<Var> beliefs{g.constant(b0), g.constant(b1), g.constant(b2)};
  EXPECT_NEAR(g.value(loss_cls(g, beliefs, {CellIndex{1}, CellIndex{0}}))[0], -std::log(0.75) / 2, 1e-15);
  // A zero-probability target is charged at the floor.
  EXPECT_NEAR(g.value(loss_cls(g, beliefs, {CellIndex{0}, CellIndex{1}}))[0], (-std::log(0.25) - std::log(1e-12)) / 2,
              1e-9);
  EXPECT_THROW(loss_cls(g, beliefs, {}), ArgumentError);
  EXPECT_THROW(loss_cls(g, beliefs, std::vector<CellIndex>(4, CellIndex{0})), ArgumentError);
}

TEST(Losses, RegressionAveragesOverStepsCellsAndCoordinates) {
  const GridSpec grid{2, 3, {0, 0}, 1.0, 2.0, 0};
  std::mt19937_64 rng(2);
  Graph<double> g;
  std::vector<Var> offs;
  for (int t = 0; t < 3; ++t) offs.push_back(g.constant(test::random_tensor(Shape{2, 3, 2}, rng, -3, 3)));
  const Trajectory pts{{0.2, 0.3}, {2.9, 3.9}, {1.5, 1.0}};
  double ref = 0;
  for (std::size_t t = 0; t < pts.size(); ++t)
    for (std::size_t i = 0; i < grid.num_cells(); ++i) {
      const Point2 c = cell_center(grid, CellIndex{i});
      ref += smooth_l1(g.value(offs[t])[2 * i] - (pts[t].x - c.x));
      ref += smooth_l1(g.value(offs[t])[2 * i + 1] - (pts[t].y - c.y));
    }
  ref /= 3.0 * 6.0 * 2.0;
  EXPECT_NEAR(g.value(loss_reg(g, offs, pts, grid))[0], ref, 1e-12);
  // Shorter ground truth uses only the leading offset fields.
  EXPECT_NO_THROW(loss_reg(g, offs, Trajectory{pts[0]}, grid));
  EXPECT_THROW(loss_reg(g, {offs[0]}, pts, grid), ArgumentError);
}

TEST(Losses, TotalCombinesTermsWithDefaultWeights) {
  const auto cfg = tiny_model();
  const auto sc = small_scenario();
  const auto params = init_parameters<double>(cfg, 1);
  const TrainConfig tc;
  EXPECT_DOUBLE_EQ(tc.lambda1, 0.1);
  EXPECT_DOUBLE_EQ(tc.lambda2, 0.001);
  Graph<double> g;
  const auto lv = scenario_loss(g, params, cfg, tc, sc, prepare_inputs<double>(sc));
  const auto b = breakdown(g, lv);
  EXPECT_NEAR(b.l_wd, params.squared_norm(), 1e-9);
  EXPECT_NEAR(b.total, b.l_cls + 0.1 * b.l_reg + 0.001 * b.l_wd, 1e-12);
  EXPECT_GT(b.l_cls, 0.0);
  EXPECT_GT(b.l_reg, 0.0);
}

TEST(Losses, ClassificationAveragesFuturesAndSumsScales) {
  const auto cfg = tiny_model();
  const auto sc = small_scenario();
  const auto params = init_parameters<double>(cfg, 2);
  const auto in = prepare_inputs<double>(sc);
  TrainConfig tc;
  Graph<double> g;
  const auto lv = scenario_loss(g, params, cfg, tc, sc, in, false);
  const auto ro = rollout(g, params, cfg, in, sc.longest_future());
  double ref = 0;
  for (const auto& sr : ro.scales)
    for (const auto& f : sc.futures) {
      double s = 0;
      for (std::size_t t = 0; t < f.size(); ++t)
        s -= std::log(g.value(sr.beliefs[t])[quantize_point(sr.grid, f[t]).value]);
      ref += s / static_cast<double>(f.size()) / static_cast<double>(sc.futures.size());
    }
  EXPECT_NEAR(g.value(lv.l_cls)[0], ref, 1e-10);
  EXPECT_EQ(g.value(lv.l_wd)[0], 0.0);
}

TEST(Optimizers, SingleStepClosedForms) {
  auto one_step = [](TrainConfig tc, double w, double grad) {
    ParameterStore<double> p;
    p.add("w", Tensor<double>::scalar(w));
    Optimizer<double> opt(tc);
    opt.step(p, {{"w", Tensor<double>::scalar(grad)}});
    return p.get("w")[0];
  };
  TrainConfig tc;
  // Adadelta from zero state: delta = sqrt(eps) / sqrt((1 - rho) g^2 + eps) * g.
  const double g = 0.5;
  const double delta = std::sqrt(1e-6) / std::sqrt(0.05 * g * g + 1e-6) * g;
  EXPECT_NEAR(one_step(tc, 1.0, g), 1.0 - 0.3 * delta, 1e-15);
  tc.optimizer = OptimizerKind::adam;
  tc.learning_rate = 0.01;
  EXPECT_NEAR(one_step(tc, 1.0, g), 1.0 - 0.01 * g / (std::abs(g) + 1e-8), 1e-12);
  tc.optimizer = OptimizerKind::sgd;
  EXPECT_NEAR(one_step(tc, 1.0, g), 1.0 - 0.01 * g, 1e-15);
}

TEST(Optimizers, StateExportImportContinuesExactly) {
  for (auto kind : {OptimizerKind::adadelta, OptimizerKind::adam}) {
    TrainConfig tc;
    tc.optimizer = kind;
    ParameterStore<float> p;
    p.add("w", Tensor<float>(Shape{3}, std::vector<float>{1, -2, 3}));
    auto grad = [&]() {
      std::map<std::string, Tensor<float>> gr;
      Tensor<float> t(Shape{3});
      for (std::size_t i = 0; i < 3; ++i) t[i] = 2 * p.get("w")[i];
      gr.emplace("w", t);
      return gr;
    };
    Optimizer<float> a(tc);
    for (int i = 0; i < 3; ++i) a.step(p, grad());
    auto q = p;
    Optimizer<float> b(tc);
    b.import_state(a.export_state());
    EXPECT_EQ(b.steps(), 3u);
    a.step(p, grad());
    std::swap(p, q);
    b.step(p, grad());
    EXPECT_EQ(p.get("w"), q.get("w"));
  }
  Optimizer<float> o{TrainConfig{}};
  EXPECT_THROW(o.import_state({{"zz", Tensor<float>::scalar(1)}}), FormatError);
}

TEST(Train, DeterministicAndLossDecreases) {
  const auto data = tiny_set();
  const auto cfg = tiny_model();
  const auto tc = quick_train(25);
  std::vector<std::size_t> seen;
  const auto a = train<float>(data, cfg, tc, [&](std::size_t e, const LossBreakdown&) { seen.push_back(e); });
  const auto b = train<float>(data, cfg, tc);
  ASSERT_EQ(a.history.size(), 25u);
  EXPECT_EQ(seen.front(), 1u);
  EXPECT_EQ(seen.back(), 25u);
  for (std::size_t i = 0; i < a.history.size(); ++i) EXPECT_EQ(a.history[i].total, b.history[i].total);
  for (const auto& [name, e] : a.params.entries()) EXPECT_EQ(e.value, b.params.get(name)) << name;
  EXPECT_LT(a.history.back().l_cls, 0.7 * a.history.front().l_cls);
}

TEST(Train, ResumeReplaysTheUninterruptedRun) {
  const auto data = tiny_set();
  const auto cfg = tiny_model();
  for (auto kind : {OptimizerKind::adadelta, OptimizerKind::adam}) {
    auto tc = quick_train(6);
    tc.optimizer = kind;
    tc.batch_size = 2;
    const auto full = train<float>(data, cfg, tc);

    auto head_cfg = tc;
    head_cfg.epochs = 3;
    const auto head = train<float>(data, cfg, head_cfg);
    TrainState<float> st{head.params, Optimizer<float>(tc), 3, head.history};
    st.optimizer.import_state(head.optimizer_state);
    const auto tail = train<float>(data, cfg, tc, st);
    EXPECT_EQ(tail.epochs_run, 3u);
    ASSERT_EQ(tail.history.size(), 6u);
    for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(tail.history[i].total, full.history[i].total);
    for (const auto& [name, e] : full.params.entries()) EXPECT_EQ(e.value, tail.params.get(name)) << name;
  }
}

TEST(Train, EarlyStopping) {
  auto tc = quick_train(50);
  tc.patience = 2;
  tc.min_delta = 0.5;
  const auto r = train<float>(tiny_set(), tiny_model(), tc);
  EXPECT_TRUE(r.early_stopped);
  EXPECT_EQ(r.epochs_run, 3u);
}

TEST(Train, DivergenceRaisesWithLastFiniteLoss) {
  auto tc = quick_train(20);
  tc.optimizer = OptimizerKind::sgd;
  tc.learning_rate = 1e30;
  try {
    train<float>(tiny_set(), tiny_model(), tc);
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_GE(e.epoch(), 1);
    if (e.epoch() > 1) EXPECT_TRUE(std::isfinite(e.last_finite_loss()));
  }
}

TEST(Train, RejectsBadInputs) {
  const auto cfg = tiny_model();
  EXPECT_THROW(train<float>(ScenarioSet{}, cfg, quick_train(1)), ArgumentError);
  auto tc = quick_train(1);
  tc.rho = 1.0;
  EXPECT_THROW(train<float>(tiny_set(), cfg, tc), ConfigError);
  auto st = start_training<float>(cfg, quick_train(1));
  auto other = cfg;
  other.use_gat = false;
  EXPECT_THROW(train<float>(tiny_set(), other, quick_train(1), st), ShapeError);
  EXPECT_THROW(optimizer_from_string("rmsprop"), ConfigError);
}

TEST(TrainConfig, JsonRoundTrip) {
  auto tc = quick_train(7);
  tc.patience = 3;
  EXPECT_EQ(to_json(train_config_from_json(to_json(tc))), to_json(tc));
}
