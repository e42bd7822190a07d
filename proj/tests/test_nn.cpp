#include <gtest/gtest.h>

#include <random>

#include "support.hpp"

using namespace mvt;
using mvt::test::random_tensor;

namespace {

// Nested-loop cross-correlation with zero padding.
Tensor<double> conv_reference(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b) {
  const std::size_t H = x.dim(0), W = x.dim(1), ci = x.dim(2), k = w.dim(0), co = w.dim(3);
  const long r = static_cast<long>(k / 2);
  Tensor<double> y(Shape{H, W, co});
  for (std::size_t i = 0; i < H; ++i)
    for (std::size_t j = 0; j < W; ++j)
      for (std::size_t o = 0; o < co; ++o) {
        double s = b[o];
        for (long di = -r; di <= r; ++di)
          for (long dj = -r; dj <= r; ++dj) {
            const long ii = static_cast<long>(i) + di, jj = static_cast<long>(j) + dj;
            if (ii < 0 || jj < 0 || ii >= static_cast<long>(H) || jj >= static_cast<long>(W)) continue;
            for (std::size_t c = 0; c < ci; ++c)
              s += x.at(ii, jj, c) * w[((static_cast<std::size_t>(di + r) * k + static_cast<std::size_t>(dj + r)) * ci + c) * co + o];
          }
        y.at(i, j, o) = s;
      }
  return y;
}

// Per-node additive graph layer written directly from its definition.
Tensor<double> gat_reference(const Tensor<double>& h, const Tensor<double>& ctx, const ParameterStore<double>& p,
                             const GridSpec& grid, nn::GatForm form) {
  const std::size_t d = h.dim(2), cs = ctx.dim(2), dv = d + cs;
  const auto& w1 = p.get("gat.w1");
  const auto& b1 = p.get("gat.b1");
  auto node = [&](std::size_t i) {
    std::vector<double> v(dv);
    for (std::size_t c = 0; c < d; ++c) v[c] = h[i * d + c];
    for (std::size_t c = 0; c < cs; ++c) v[d + c] = ctx[i * cs + c];
    return v;
  };
  auto edge = [&](std::size_t i, std::size_t j) {
    const auto vi = node(i), vj = node(j);
    std::vector<double> t(d);
    for (std::size_t o = 0; o < d; ++o) {
      double s = b1[o];
      for (std::size_t c = 0; c < dv; ++c) s += vi[c] * w1[c * d + o] + vj[c] * w1[(dv + c) * d + o];
      t[o] = std::tanh(s);
    }
    return t;
  };
  Tensor<double> out = h;
  for (std::size_t i = 0; i < grid.num_cells(); ++i) {
    const auto nb = neighbor_list(grid, CellIndex{i});
    if (form == nn::GatForm::additive) {
      const auto& w2 = p.get("gat.w2");
      const auto& b2 = p.get("gat.b2");
      for (auto j : nb) {
        const auto t = edge(i, j.value);
        for (std::size_t o = 0; o < d; ++o) {
          double s = b2[o];
          for (std::size_t c = 0; c < d; ++c) s += t[c] * w2[c * d + o];
          out[i * d + o] += s / static_cast<double>(nb.size());
        }
      }
    } else {
      const auto& u = p.get("gat.att");
      std::vector<double> e;
      for (auto j : nb) {
        const auto t = edge(i, j.value);
        double s = 0;
        for (std::size_t o = 0; o < d; ++o) s += u[o] * t[o];
        e.push_back(s);
      }
      const double mx = *std::max_element(e.begin(), e.end());
      double z = 0;
      for (auto& v : e) z += (v = std::exp(v - mx));
      for (std::size_t k = 0; k < nb.size(); ++k)
        for (std::size_t o = 0; o < d; ++o) out[i * d + o] += e[k] / z * h[nb[k].value * d + o];
    }
  }
  return out;
}

ParameterStore<double> gat_store(std::size_t d, std::size_t cs, nn::GatForm form, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  ParameterStore<double> p;
  nn::LayerSpec s{nn::LayerSpec::Kind::gat, d, d, 1, cs, form};
  nn::declare(p, "gat", s, rng);
  for (auto& [name, e] : p.entries())
    for (auto& v : p.values(name)) v = std::uniform_real_distribution<double>(-0.8, 0.8)(rng);
  return p;
}

double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
  EXPECT_EQ(a.shape(), b.shape());
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

const std::uint64_t kSeeds[] = {1, 2, 3};

}  // namespace

TEST(Conv2d, MatchesNestedLoops) {
  for (std::size_t k : {1, 3, 5})
    for (std::uint64_t seed : kSeeds) {
      std::mt19937_64 rng(seed);
      const auto x = random_tensor(Shape{5, 6, 3}, rng);
      const auto w = random_tensor(Shape{k, k, 3, 4}, rng);
      const auto b = random_tensor(Shape{4}, rng);
      Graph<double> g(false);
      const auto y = g.value(nn::conv2d(g, g.constant(x), g.constant(w), g.constant(b)));
      EXPECT_LT(max_abs_diff(y, conv_reference(x, w, b)), 1e-6) << "k=" << k;
    }
}

TEST(Conv2d, RejectsBadShapes) {
  Graph<double> g(false);
  Var x = g.constant(Tensor<double>(Shape{4, 4, 2}));
  EXPECT_THROW(nn::conv2d(g, x, g.constant(Tensor<double>(Shape{2, 2, 2, 1})), g.constant(Tensor<double>(Shape{1}))),
               ShapeError);
  EXPECT_THROW(nn::conv2d(g, x, g.constant(Tensor<double>(Shape{3, 3, 3, 1})), g.constant(Tensor<double>(Shape{1}))),
               ShapeError);
}

TEST(Dense, MatchesLoops) {
  std::mt19937_64 rng(5);
  const auto x = random_tensor(Shape{3, 2, 4}, rng);
  const auto w = random_tensor(Shape{4, 3}, rng);
  const auto b = random_tensor(Shape{3}, rng);
  Graph<double> g(false);
  const auto y = g.value(nn::dense(g, g.constant(x), g.constant(w), g.constant(b)));
  for (std::size_t n = 0; n < 6; ++n)
    for (std::size_t o = 0; o < 3; ++o) {
      double s = b[o];
      for (std::size_t c = 0; c < 4; ++c) s += x[n * 4 + c] * w[c * 3 + o];
      EXPECT_NEAR(y[n * 3 + o], s, 1e-12);
    }
}

TEST(Gat, AdditiveMatchesPerNodeDefinition) {
  for (std::uint64_t seed : kSeeds) {
    const GridSpec grid{3, 4, {0, 0}, 1, 1, 0};
    std::mt19937_64 rng(seed + 100);
    const auto h = random_tensor(Shape{3, 4, 3}, rng);
    const auto ctx = random_tensor(Shape{3, 4, 2}, rng);
    for (auto form : {nn::GatForm::additive, nn::GatForm::attention}) {
      const auto p = gat_store(3, 2, form, seed);
      Graph<double> g(false);
      const auto gp = nn::gat_params(g, p, "gat", form);
      const auto y = g.value(nn::gat_layer(g, g.constant(h), g.constant(ctx), gp, NeighborTable::of(grid), form));
      EXPECT_LT(max_abs_diff(y, gat_reference(h, ctx, p, grid, form)), 1e-10);
    }
  }
}

TEST(Gat, IsolatedCellPassesThrough) {
  const GridSpec grid{1, 1, {0, 0}, 1, 1, 0};
  std::mt19937_64 rng(2);
  const auto h = random_tensor(Shape{1, 1, 3}, rng);
  const auto p = gat_store(3, 1, nn::GatForm::additive, 2);
  Graph<double> g(false);
  const auto gp = nn::gat_params(g, p, "gat", nn::GatForm::additive);
  const auto y =
      g.value(nn::gat_layer(g, g.constant(h), g.constant(Tensor<double>(Shape{1, 1, 1})), gp, NeighborTable::of(grid)));
  EXPECT_EQ(max_abs_diff(y, h), 0.0);
}

TEST(SpatialSoftmax, SumsToOneAndIsShiftInvariant) {
  std::mt19937_64 rng(7);
  auto logits = random_tensor(Shape{4, 5, 1}, rng, -5, 5);
  Graph<double> g(false);
  const auto p = g.value(nn::spatial_softmax(g, g.constant(logits)));
  double s = 0;
  for (double v : p.values()) {
    EXPECT_GT(v, 0.0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  for (auto& v : logits.values()) v += 1000.0;
  const auto q = g.value(nn::spatial_softmax(g, g.constant(logits)));
  EXPECT_LT(max_abs_diff(p, q), 1e-12);
}

TEST(SpatialSoftmax, ExtremeLogitsStayFinite) {
  Tensor<float> l(Shape{2, 2, 1}, std::vector<float>{-1e30f, 80.0f, 1e30f, 0.0f});
  Graph<float> g(false);
  const auto p = g.value(nn::spatial_softmax(g, g.constant(l)));
  EXPECT_TRUE(p.all_finite());
  EXPECT_FLOAT_EQ(p[2], 1.0f);
  Tensor<float> bad(Shape{1, 2, 1}, std::vector<float>{0.0f, std::numeric_limits<float>::quiet_NaN()});
  EXPECT_THROW(nn::spatial_softmax(g, g.constant(bad)), NumericError);
  EXPECT_THROW(nn::spatial_softmax(g, g.constant(Tensor<float>(Shape{2, 2, 2}))), ShapeError);
}

TEST(SpatialSoftmax, UniformForEqualLogits) {
  Graph<double> g(false);
  const auto p = g.value(nn::spatial_softmax(g, g.constant(Tensor<double>(Shape{3, 3, 1}, 2.0))));
  for (double v : p.values()) EXPECT_NEAR(v, 1.0 / 9, 1e-15);
}

TEST(EmbedBelief, AffinePerCell) {
  Graph<double> g(false);
  Tensor<double> c(Shape{1, 2, 1}, std::vector<double>{0.25, 0.75});
  Tensor<double> w(Shape{3}, std::vector<double>{1, -2, 4});
  Tensor<double> b(Shape{3}, std::vector<double>{0.5, 0, -1});
  const auto y = g.value(nn::embed_belief(g, g.constant(c), g.constant(w), g.constant(b)));
  EXPECT_EQ(y.shape(), (Shape{1, 2, 3}));
  EXPECT_DOUBLE_EQ(y[0], 0.75);
  EXPECT_DOUBLE_EQ(y[4], -1.5);
  EXPECT_DOUBLE_EQ(y[5], 2.0);
}

TEST(Losses, SmoothL1AndFlooredLog) {
  Graph<double> g;
  Tensor<double> pred(Shape{3}, std::vector<double>{0.5, 3.0, -2.0});
  Tensor<double> target(Shape{3}, std::vector<double>{0.0, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(g.value(nn::smooth_l1_sum(g, g.constant(pred), target))[0], 0.125 + 2.5 + 1.5);
  Tensor<double> probs(Shape{1, 2, 1}, std::vector<double>{1.0, 0.0});
  EXPECT_NEAR(g.value(nn::neg_log_prob_at(g, g.constant(probs), 1))[0], -std::log(1e-12), 1e-9);
  EXPECT_THROW(nn::neg_log_prob_at(g, g.constant(probs), 2), RangeError);
}

// Gradient checks, double precision on a 4x4 map.

TEST(GradCheckOps, Conv2d) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    ParameterStore<double> p;
    p.add("x", random_tensor(Shape{4, 4, 2}, rng));
    p.add("w", random_tensor(Shape{3, 3, 2, 3}, rng));
    p.add("b", random_tensor(Shape{3}, rng));
    auto f = [](Graph<double>& g, const ParameterStore<double>& p) {
      return nn::sum_squares(g, nn::tanh(g, nn::conv2d(g, g.param(p, "x"), g.param(p, "w"), g.param(p, "b"))));
    };
    const auto rep = grad_check(f, p, 1e-4);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst_param;
  }
}

TEST(GradCheckOps, DenseEmbedSoftmax) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    ParameterStore<double> p;
    p.add("c", random_tensor(Shape{4, 4, 1}, rng, 0, 1));
    p.add("we", random_tensor(Shape{3}, rng));
    p.add("be", random_tensor(Shape{3}, rng));
    p.add("w", random_tensor(Shape{3, 1}, rng));
    p.add("b", random_tensor(Shape{1}, rng));
    auto f = [](Graph<double>& g, const ParameterStore<double>& p) {
      Var e = nn::embed_belief(g, g.param(p, "c"), g.param(p, "we"), g.param(p, "be"));
      Var probs = nn::spatial_softmax(g, nn::dense(g, nn::sigmoid(g, e), g.param(p, "w"), g.param(p, "b")));
      return nn::linear_combination(g, {nn::neg_log_prob_at(g, probs, 5), nn::sum_squares(g, probs)}, {1.0, 3.0});
    };
    const auto rep = grad_check(f, p, 1e-4);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst_param;
  }
}

TEST(GradCheckOps, GatBothForms) {
  const GridSpec grid{4, 4, {0, 0}, 1, 1, 0};
  for (auto form : {nn::GatForm::additive, nn::GatForm::attention})
    for (std::uint64_t seed : kSeeds) {
      auto p = gat_store(3, 2, form, seed);
      std::mt19937_64 rng(seed + 7);
      p.add("h", random_tensor(Shape{4, 4, 3}, rng));
      p.add("ctx", random_tensor(Shape{4, 4, 2}, rng));
      const auto nb = NeighborTable::of(grid);
      auto f = [&](Graph<double>& g, const ParameterStore<double>& p) {
        const auto gp = nn::gat_params(g, p, "gat", form);
        return nn::sum_squares(g, nn::gat_layer(g, g.param(p, "h"), g.param(p, "ctx"), gp, nb, form));
      };
      const auto rep = grad_check(f, p, 1e-4);
      EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst_param;
    }
}

TEST(GradCheckOps, ConvLstmTwoSteps) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    ParameterStore<double> p;
    nn::declare(p, "rnn", nn::LayerSpec{nn::LayerSpec::Kind::convrnn_cell, 2, 3, 3}, rng);
    p.add("x0", random_tensor(Shape{4, 4, 2}, rng));
    p.add("x1", random_tensor(Shape{4, 4, 2}, rng));
    const Tensor<double> target = random_tensor(Shape{4, 4, 3}, rng);
    auto f = [&](Graph<double>& g, const ParameterStore<double>& p) {
      const auto lp = nn::lstm_params(g, p, "rnn");
      nn::LstmState s{g.constant(Tensor<double>(Shape{4, 4, 3})), g.constant(Tensor<double>(Shape{4, 4, 3}))};
      s = nn::convrnn_step(g, g.param(p, "x0"), s, lp);
      s = nn::convrnn_step(g, g.param(p, "x1"), s, lp);
      return nn::add(g, nn::smooth_l1_sum(g, s.h, target), nn::sum_squares(g, s.c));
    };
    const auto rep = grad_check(f, p, 1e-4);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst_param;
  }
}

TEST(GradCheckOps, ChannelPlumbingAndPooling) {
  for (std::uint64_t seed : kSeeds) {
    std::mt19937_64 rng(seed);
    ParameterStore<double> p;
    p.add("a", random_tensor(Shape{4, 4, 2}, rng));
    p.add("m", random_tensor(Shape{4, 4, 1}, rng));
    auto f = [](Graph<double>& g, const ParameterStore<double>& p) {
      Var a = g.param(p, "a");
      Var cat = nn::concat_channels(g, {a, nn::mul_cells(g, g.param(p, "m"), a)});
      Var part = nn::slice_channels(g, cat, 1, 2);
      return nn::sum_squares(g, nn::avg_pool2(g, nn::mul(g, part, part)));
    };
    const auto rep = grad_check(f, p, 1e-4);
    EXPECT_TRUE(rep.passed) << rep.max_rel_error << " at " << rep.worst_param;
  }
}

TEST(Declare, ShapesAndForgetBias) {
  std::mt19937_64 rng(1);
  ParameterStore<float> p;
  nn::declare(p, "rnn", nn::LayerSpec{nn::LayerSpec::Kind::convrnn_cell, 2, 3, 3}, rng);
  EXPECT_EQ(p.shape("rnn.w"), (Shape{3, 3, 5, 12}));
  EXPECT_EQ(p.get("rnn.b")[3], 1.0f);
  EXPECT_EQ(p.get("rnn.b")[0], 0.0f);
  EXPECT_THROW(nn::declare(p, "bad", nn::LayerSpec{nn::LayerSpec::Kind::conv2d, 2, 3, 2}, rng), ConfigError);
}
