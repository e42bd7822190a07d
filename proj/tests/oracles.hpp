#pragma once

// Independent reference implementations shared by the unit tests and the
// acceptance runner. They restate each definition with plain loops and do
// not call the library code they check.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <vector>

#include "support.hpp"

namespace mvt::test {



// Belief depends on the whole chosen prefix: a fresh random distribution per
// distinct prefix, so beams with different histories see different beliefs.
class PrefixSource {
 public:
  using State = std::vector<std::size_t>;

  PrefixSource(std::size_t cells, std::uint64_t seed) : cells_(cells), seed_(seed) {}

  State initial() const { return {}; }
  State advance(const State& s, CellIndex c) const {
    State n = s;
    n.push_back(c.value);
    return n;
  }
  std::vector<double> belief(const State& s) const {
    std::uint64_t h = seed_;
    for (std::size_t c : s) h = mvt::detail::mix_seed(h, c + 1);
    std::mt19937_64 rng(h);
    return random_belief(cells_, rng);
  }

 private:
  std::size_t cells_;
  std::uint64_t seed_;
};

struct Seq {
  std::vector<std::size_t> cells;
  double log_prob;
};

// Every sequence of `steps` cells with its log-probability under per-prefix
// beliefs, sorted best first (ties by lexicographic cell order).
template <typename Source>
std::vector<Seq> enumerate_all(const Source& src, std::size_t steps) {
  std::vector<Seq> out;
  std::vector<std::size_t> cur;
  std::function<void(const typename Source::State&, double)> rec = [&](const auto& st, double lp) {
    if (cur.size() == steps) {
      out.push_back({cur, lp});
      return;
    }
    const auto b = src.belief(st);
    for (std::size_t i = 0; i < b.size(); ++i) {
      cur.push_back(i);
      rec(src.advance(st, CellIndex{i}), lp + std::log(static_cast<double>(b[i])));
      cur.pop_back();
    }
  };
  rec(src.initial(), 0.0);
  std::stable_sort(out.begin(), out.end(), [](const Seq& a, const Seq& b) { return a.log_prob > b.log_prob; });
  return out;
}

// Plain restatement of the rank-sequential penalty search: full candidate
// list, penalty recomputed from the beams processed so far.
template <typename Source>
std::vector<Seq> penalized_search_oracle(const Source& src, std::size_t k, double gamma0, std::size_t steps) {
  struct B {
    std::vector<std::size_t> cells;
    double lp;
    typename Source::State st;
  };
  std::vector<B> beams{{{}, 0.0, src.initial()}};
  for (std::size_t t = 0; t < steps; ++t) {
    struct C {
      double score, lp;
      std::size_t parent, cell;
    };
    std::vector<C> all;
    std::vector<std::size_t> picks;  // best penalized pick of each beam so far
    for (std::size_t r = 0; r < beams.size(); ++r) {
      const auto b = src.belief(beams[r].st);
      double best = -1e300;
      std::size_t best_i = 0;
      for (std::size_t i = 0; i < b.size(); ++i) {
        const double pen = gamma0 * static_cast<double>(std::count(picks.begin(), picks.end(), i));
        const double lp = beams[r].lp + std::log(static_cast<double>(b[i]));
        all.push_back({lp - pen, lp, r, i});
        if (lp - pen > best) best = lp - pen, best_i = i;
      }
      picks.push_back(best_i);
    }
    std::sort(all.begin(), all.end(), [](const C& a, const C& b) {
      return std::tie(b.score, a.parent, a.cell) < std::tie(a.score, b.parent, b.cell);
    });
    std::vector<B> next;
    for (std::size_t r = 0; r < std::min(k, all.size()); ++r) {
      const auto& p = beams[all[r].parent];
      B nb{p.cells, all[r].lp, src.advance(p.st, CellIndex{all[r].cell})};
      nb.cells.push_back(all[r].cell);
      next.push_back(std::move(nb));
    }
    beams = std::move(next);
  }
  std::vector<Seq> out;
  for (auto& b : beams) out.push_back({b.cells, b.lp});
  std::stable_sort(out.begin(), out.end(), [](const Seq& a, const Seq& b) { return a.log_prob > b.log_prob; });
  return out;
}

inline FixedBeliefSource random_fixed(std::size_t cells, std::size_t steps, std::mt19937_64& rng) {
  std::vector<std::vector<double>> per_step;
  for (std::size_t t = 0; t < steps; ++t) per_step.push_back(random_belief(cells, rng));
  return FixedBeliefSource(per_step);
}

// ---------------------------------------------------------------------------
// Metrics

struct MetricFixture {
  std::vector<Scenario> scenarios;
  std::vector<PredictionSet> preds;
};

inline std::size_t oracle_cell(const GridSpec& g, Point2 p) {
  long c = static_cast<long>(std::floor((p.x - g.origin.x) / g.cell_w));
  long r = static_cast<long>(std::floor((p.y - g.origin.y) / g.cell_h));
  c = std::clamp(c, 0L, static_cast<long>(g.cols) - 1);
  r = std::clamp(r, 0L, static_cast<long>(g.rows) - 1);
  return static_cast<std::size_t>(r) * g.cols + static_cast<std::size_t>(c);
}

struct OracleReport {
  double ade = 0, fde = 0, min_ade = 0, min_fde = 0;
  std::map<std::size_t, std::optional<double>> nll;  // by frame horizon
  std::map<std::size_t, std::size_t> skipped;
};

// Every (scenario, future) pair weighs the same; prediction k of K is
// prediction k mod n of the n supplied.
inline OracleReport metrics_oracle(const MetricFixture& fx, std::size_t K, const std::vector<std::size_t>& frames) {
  OracleReport r;
  double n = 0;
  std::map<std::size_t, double> nll_sum;
  std::map<std::size_t, double> nll_n;
  for (std::size_t s = 0; s < fx.scenarios.size(); ++s) {
    const Scenario& sc = fx.scenarios[s];
    const PredictionSet* ps = nullptr;
    for (const auto& p : fx.preds)
      if (p.scenario_id == sc.scenario_id) ps = &p;
    for (const auto& gt : sc.futures) {
      n += 1;
      const std::size_t T = gt.size();
      double best_ade = 1e300, best_fde = 1e300;
      for (std::size_t k = 0; k < K; ++k) {
        const auto& pr = ps->trajectories[k % ps->trajectories.size()];
        double a = 0;
        for (std::size_t t = 0; t < T; ++t) a += std::sqrt(std::pow(pr[t].x - gt[t].x, 2) + std::pow(pr[t].y - gt[t].y, 2));
        a /= static_cast<double>(T);
        const double f = std::sqrt(std::pow(pr[T - 1].x - gt[T - 1].x, 2) + std::pow(pr[T - 1].y - gt[T - 1].y, 2));
        if (k == 0) {
          r.ade += a;
          r.fde += f;
        }
        best_ade = std::min(best_ade, a);
        best_fde = std::min(best_fde, f);
      }
      r.min_ade += best_ade;
      r.min_fde += best_fde;
      for (std::size_t h : frames) {
        if (T < h) {
          ++r.skipped[h];
          continue;
        }
        const double p = ps->beliefs[h - 1][oracle_cell(sc.fine, gt[h - 1])];
        nll_sum[h] -= std::log(p < 1e-12 ? 1e-12 : p);
        nll_n[h] += 1;
      }
    }
  }
  r.ade /= n;
  r.fde /= n;
  r.min_ade /= n;
  r.min_fde /= n;
  for (std::size_t h : frames) r.nll[h] = nll_n[h] > 0 ? std::optional<double>(nll_sum[h] / nll_n[h]) : std::nullopt;
  return r;
}

// Scenarios on small grids with 1-3 futures of random lengths and 1-K
// predictions each, long enough to cover every future.
inline MetricFixture random_metric_fixture(std::mt19937_64& rng, std::size_t max_pred, std::size_t max_len = 9) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MetricFixture fx;
  const std::size_t n = 1 + rng() % 4;
  for (std::size_t s = 0; s < n; ++s) {
    Scenario sc = small_scenario(4 + 2 * (rng() % 3), 4 + 2 * (rng() % 3), 2);
    sc.scenario_id = "m" + std::to_string(s);
    sc.view_tag = static_cast<ViewTag>(rng() % 4);
    const double W = sc.fine.width(), H = sc.fine.height();
    sc.futures.clear();
    const std::size_t J = 1 + rng() % 3;
    std::size_t longest = 0;
    for (std::size_t j = 0; j < J; ++j) {
      Trajectory f;
      const std::size_t len = 1 + rng() % max_len;
      for (std::size_t t = 0; t < len; ++t) f.push_back({W * u(rng), H * u(rng)});
      longest = std::max(longest, len);
      sc.futures.push_back(std::move(f));
    }
    sc.destinations.clear();
    for (const auto& f : sc.futures) sc.destinations.push_back(f.back());
    PredictionSet ps;
    ps.scenario_id = sc.scenario_id;
    const std::size_t k = 1 + rng() % max_pred;
    for (std::size_t i = 0; i < k; ++i) {
      Trajectory p;
      for (std::size_t t = 0; t < max_len; ++t) p.push_back({W * u(rng), H * u(rng)});
      ps.trajectories.push_back(std::move(p));
    }
    for (std::size_t t = 0; t < max_len; ++t) {
      auto b = random_belief(sc.fine.num_cells(), rng);
      if (rng() % 5 == 0) {
        b[rng() % b.size()] = 0.0;
        double z = 0;
        for (double v : b) z += v;
        for (double& v : b) v /= z;
      }
      ps.beliefs.push_back(std::move(b));
    }
    fx.scenarios.push_back(std::move(sc));
    fx.preds.push_back(std::move(ps));
  }
  return fx;
}

}  // namespace mvt::test
