#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "multiverse/gridworld.hpp"
#include "multiverse/model.hpp"
#include "multiverse/scenegen.hpp"

namespace mvt {

// Anything that can emit a belief over cells and advance on a chosen cell.
template <typename S>
concept BeliefSource = requires(const S& src, const typename S::State& st, CellIndex c) {
  { src.initial() } -> std::convertible_to<typename S::State>;
  { src.advance(st, c) } -> std::convertible_to<typename S::State>;
  { src.belief(st).size() } -> std::convertible_to<std::size_t>;
  { static_cast<double>(src.belief(st)[0]) };
};

// log with a floor at the smallest normal double, so underflowed cells keep
// a finite (very negative) score and stay orderable.
inline double safe_log(double p) { return std::log(std::max(p, std::numeric_limits<double>::min())); }

// Coarse decoder of a trained model, conditioned on hard cell choices.
template <typename T>
class ModelBeliefSource {
 public:
  using State = DecoderState<T>;

  ModelBeliefSource(const ParameterStore<T>& params, const ModelConfig& cfg, const SceneInputs<T>& in)
      : dec_(params, cfg, in) {}

  State initial() const { return dec_.initial(); }
  State advance(const State& s, CellIndex c) const { return dec_.advance(s, c); }
  const Tensor<T>& belief(const State& s) const { return s.belief; }
  const GridSpec& grid() const { return dec_.grid(); }

 private:
  CoarseDecoder<T> dec_;
};

// History-independent per-step beliefs; handy for hand-checked instances.
class FixedBeliefSource {
 public:
  using State = std::size_t;

  explicit FixedBeliefSource(std::vector<std::vector<double>> per_step) : steps_(std::move(per_step)) {}

  State initial() const { return 0; }
  State advance(State s, CellIndex) const { return s + 1; }
  const std::vector<double>& belief(State s) const { return steps_.at(s); }

 private:
  std::vector<std::vector<double>> steps_;
};

struct Beam {
  std::vector<CellIndex> cells;
  double log_prob = 0.0;  // sum of log C_t(chosen cell), no penalties
  double score = 0.0;     // log_prob plus the penalty charged at the last step
  std::size_t rank = 0;
};

enum class DiversityRule {
  // Beams are visited in rank order; each charges gamma0 for every
  // higher-ranked beam whose own best pick at this step was the same cell.
  cross_beam,
  // Expansions of one beam are ranked by probability; the r-th best child
  // (0-based) is charged gamma0 * r.
  sibling_rank,
};

inline const char* to_string(DiversityRule r) { return r == DiversityRule::cross_beam ? "cross_beam" : "sibling_rank"; }

inline DiversityRule diversity_rule_from_string(const std::string& s) {
  if (s == "cross_beam") return DiversityRule::cross_beam;
  if (s == "sibling_rank") return DiversityRule::sibling_rank;
  throw ConfigError("unknown diversity rule '" + s + "' (expected cross_beam|sibling_rank)");
}

struct BeamOptions {
  std::size_t k = 20;
  double gamma0 = 1.0;
  std::size_t steps = 1;
  DiversityRule rule = DiversityRule::cross_beam;
};

namespace detail {

inline bool exceeds_sequence_count(std::size_t k, std::size_t cells, std::size_t steps) {
  double n = 1.0;
  for (std::size_t t = 0; t < steps; ++t) {
    n *= static_cast<double>(cells);
    if (n >= static_cast<double>(k)) return false;
  }
  return static_cast<double>(k) > n;
}

}  // namespace detail

// Beam search over cell sequences. Each beam keeps its own decoder state,
// so beliefs are re-computed per beam from that beam's own choices.
// Candidates compete on parent log_prob + log C(i) - penalty; the penalty is
// not carried into later steps. Beams are returned sorted by unpenalized
// log-probability (ties keep search rank).
template <BeliefSource Source>
std::vector<Beam> diverse_beam_search(const Source& src, const BeamOptions& opt) {
  if (opt.k < 1) throw ArgumentError("beam search needs K >= 1");
  if (opt.steps < 1) throw ArgumentError("beam search needs steps >= 1");
  if (!(opt.gamma0 >= 0.0)) throw ArgumentError("diversity strength gamma0 must be >= 0");

  using State = typename Source::State;
  struct Live {
    Beam beam;
    State state;
  };
  std::vector<Live> beams;
  beams.push_back({Beam{}, src.initial()});
  const std::size_t cells = src.belief(beams.front().state).size();
  if (detail::exceeds_sequence_count(opt.k, cells, opt.steps))
    throw ArgumentError("K=" + std::to_string(opt.k) + " exceeds the number of distinct sequences (" +
                        std::to_string(cells) + "^" + std::to_string(opt.steps) + ")");

  struct Candidate {
    double score;
    double log_prob;
    std::size_t parent;
    std::size_t cell;
  };
  std::vector<Candidate> cand;
  std::vector<double> logs(cells);
  std::vector<std::size_t> by_prob(cells);
  std::vector<std::size_t> taken(cells);

  for (std::size_t t = 0; t < opt.steps; ++t) {
    cand.clear();
    std::fill(taken.begin(), taken.end(), 0);
    for (std::size_t k = 0; k < beams.size(); ++k) {
      const auto& b = src.belief(beams[k].state);
      if (b.size() != cells) throw ShapeError("belief size changed during search");
      for (std::size_t i = 0; i < cells; ++i) logs[i] = safe_log(static_cast<double>(b[i]));
      for (std::size_t i = 0; i < cells; ++i) by_prob[i] = i;
      std::stable_sort(by_prob.begin(), by_prob.end(), [&](std::size_t a, std::size_t c) { return logs[a] > logs[c]; });
      if (opt.rule == DiversityRule::sibling_rank) {
        for (std::size_t r = 0; r < cells; ++r) {
          const std::size_t i = by_prob[r];
          const double pen = opt.gamma0 * static_cast<double>(r);
          cand.push_back({beams[k].beam.log_prob + logs[i] - pen, beams[k].beam.log_prob + logs[i], k, i});
        }
      } else {
        std::size_t best = 0;
        double best_score = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < cells; ++i) {
          const double pen = opt.gamma0 * static_cast<double>(taken[i]);
          const double s = beams[k].beam.log_prob + logs[i] - pen;
          cand.push_back({s, beams[k].beam.log_prob + logs[i], k, i});
          if (s > best_score) {
            best_score = s;
            best = i;
          }
        }
        ++taken[best];
      }
    }
    const std::size_t keep = std::min(opt.k, cand.size());
    std::partial_sort(cand.begin(), cand.begin() + static_cast<long>(keep), cand.end(),
                      [](const Candidate& a, const Candidate& b) {
                        if (a.score != b.score) return a.score > b.score;
                        if (a.parent != b.parent) return a.parent < b.parent;
                        return a.cell < b.cell;
                      });
    std::vector<Live> next;
    next.reserve(keep);
    for (std::size_t r = 0; r < keep; ++r) {
      const Candidate& c = cand[r];
      const Live& parent = beams[c.parent];
      Beam nb = parent.beam;
      nb.cells.push_back(CellIndex{c.cell});
      nb.log_prob = c.log_prob;
      nb.score = c.score;
      nb.rank = r;
      // The last step's state is never read, so skip advancing it.
      State st = t + 1 < opt.steps ? src.advance(parent.state, CellIndex{c.cell}) : parent.state;
      next.push_back({std::move(nb), std::move(st)});
    }
    beams = std::move(next);
  }

  std::vector<Beam> out;
  for (auto& l : beams) out.push_back(std::move(l.beam));
  std::stable_sort(out.begin(), out.end(), [](const Beam& a, const Beam& b) { return a.log_prob > b.log_prob; });
  for (std::size_t r = 0; r < out.size(); ++r) out[r].rank = r;
  return out;
}

// Argmax decoding with hard feedback; ties go to the lowest cell index.
template <BeliefSource Source>
Beam greedy_decode(const Source& src, std::size_t steps) {
  if (steps < 1) throw ArgumentError("greedy_decode needs steps >= 1");
  Beam b;
  auto st = src.initial();
  for (std::size_t t = 0; t < steps; ++t) {
    const auto& p = src.belief(st);
    std::size_t best = 0;
    for (std::size_t i = 1; i < p.size(); ++i)
      if (static_cast<double>(p[i]) > static_cast<double>(p[best])) best = i;
    b.cells.push_back(CellIndex{best});
    b.log_prob += safe_log(static_cast<double>(p[best]));
    if (t + 1 < steps) st = src.advance(st, CellIndex{best});
  }
  b.score = b.log_prob;
  return b;
}

struct PredictionSet {
  std::string scenario_id;
  std::vector<Trajectory> trajectories;  // best first
  std::vector<double> log_probs;
  std::vector<std::vector<double>> beliefs;  // soft rollout on the fine grid, per step
  int scale = 0;
  // Assembled points whose offset carried them outside the chosen cell.
  std::size_t points_outside_cell = 0;

  std::size_t k() const { return trajectories.size(); }
};

// L_t = center(chosen cell) + offset at that cell.
template <typename T>
PredictionSet assemble_trajectories(const std::vector<Beam>& beams, const std::vector<Tensor<T>>& offsets,
                                    const GridSpec& grid) {
  PredictionSet ps;
  for (const Beam& b : beams) {
    if (b.cells.size() > offsets.size())
      throw ArgumentError("assemble_trajectories: " + std::to_string(b.cells.size()) + " steps but " +
                          std::to_string(offsets.size()) + " offset fields");
    Trajectory tr;
    for (std::size_t t = 0; t < b.cells.size(); ++t) {
      const auto& off = offsets[t];
      require_shape(off.shape(), Shape{grid.rows, grid.cols, 2}, "assemble_trajectories offsets");
      const Point2 q = cell_center(grid, b.cells[t]);
      const double dx = static_cast<double>(off[b.cells[t].value * 2]);
      const double dy = static_cast<double>(off[b.cells[t].value * 2 + 1]);
      if (std::abs(dx) > 0.5 * grid.cell_w || std::abs(dy) > 0.5 * grid.cell_h) ++ps.points_outside_cell;
      tr.push_back({q.x + dx, q.y + dy});
    }
    ps.trajectories.push_back(std::move(tr));
    ps.log_probs.push_back(b.log_prob);
  }
  return ps;
}

// Soft-feedback beliefs on the fine grid, as plain probabilities per step.
template <typename T>
std::vector<std::vector<double>> soft_beliefs(const ParameterStore<T>& params, const ModelConfig& cfg,
                                              const SceneInputs<T>& in, std::size_t steps) {
  Graph<T> g(false);
  ModelConfig single = cfg;
  single.use_multi_scale = false;
  single.use_fine_decoder = false;
  const Rollout ro = rollout(g, params, single, in, steps);
  std::vector<std::vector<double>> out;
  for (Var b : ro.scales.front().beliefs) {
    const auto& v = g.value(b);
    out.emplace_back(v.values().begin(), v.values().end());
  }
  return out;
}

struct PredictOptions {
  std::size_t k = 20;
  double gamma0 = 1.0;
  std::size_t steps = 0;  // 0: max_pred_len of the model
  DiversityRule rule = DiversityRule::cross_beam;
  Bounds bounds = Bounds::clamp;
  bool keep_beliefs = true;
};

template <typename T>
PredictionSet predict(const ParameterStore<T>& params, const ModelConfig& cfg, const Scenario& sc,
                      const PredictOptions& opt) {
  const std::size_t steps = opt.steps ? opt.steps : cfg.max_pred_len;
  const SceneInputs<T> in = prepare_inputs<T>(sc, opt.bounds);
  const ModelBeliefSource<T> src(params, cfg, in);
  std::vector<Beam> beams;
  if (opt.k == 1)
    beams.push_back(greedy_decode(src, steps));
  else
    beams = diverse_beam_search(src, BeamOptions{opt.k, opt.gamma0, steps, opt.rule});
  PredictionSet ps = assemble_trajectories(beams, rollout_offsets(params, cfg, in, steps), in.fine);
  ps.scenario_id = sc.scenario_id;
  if (opt.keep_beliefs) ps.beliefs = soft_beliefs(params, cfg, in, steps);
  return ps;
}

// JSON Lines record: {scenario_id, K, trajectories, log_probs[, beliefs]}.
inline nlohmann::json to_json(const PredictionSet& ps, bool with_beliefs) {
  nlohmann::json trajs = nlohmann::json::array();
  for (const auto& t : ps.trajectories) {
    nlohmann::json pts = nlohmann::json::array();
    for (const Point2& p : t) pts.push_back({p.x, p.y});
    trajs.push_back(std::move(pts));
  }
  nlohmann::json j = {{"scenario_id", ps.scenario_id},
                      {"K", ps.trajectories.size()},
                      {"trajectories", trajs},
                      {"log_probs", ps.log_probs}};
  if (with_beliefs && !ps.beliefs.empty()) j["beliefs"] = ps.beliefs;
  return j;
}

inline PredictionSet prediction_from_json(const nlohmann::json& j) {
  PredictionSet ps;
  ps.scenario_id = j.at("scenario_id").get<std::string>();
  for (const auto& t : j.at("trajectories")) {
    Trajectory tr;
    for (const auto& p : t) tr.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
    ps.trajectories.push_back(std::move(tr));
  }
  if (j.contains("log_probs")) ps.log_probs = j.at("log_probs").get<std::vector<double>>();
  if (j.contains("beliefs")) ps.beliefs = j.at("beliefs").get<std::vector<std::vector<double>>>();
  const auto k = j.at("K").get<std::size_t>();
  if (k != ps.trajectories.size())
    throw ParseError(0, "K=" + std::to_string(k) + " but " + std::to_string(ps.trajectories.size()) + " trajectories");
  return ps;
}

}  // namespace mvt
