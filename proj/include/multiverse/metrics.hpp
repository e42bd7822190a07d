#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiverse/errors.hpp"
#include "multiverse/gridworld.hpp"
#include "multiverse/inference.hpp"
#include "multiverse/scenegen.hpp"

namespace mvt {

struct DisplacementError {
  double ade = 0.0;
  double fde = 0.0;
};

// Prediction is truncated to the ground truth's length.
inline DisplacementError ade_fde(const Trajectory& pred, const Trajectory& gt) {
  if (gt.empty()) throw ArgumentError("ade_fde: empty ground truth");
  if (pred.size() < gt.size())
    throw ArgumentError("ade_fde: prediction has " + std::to_string(pred.size()) + " points, ground truth " +
                        std::to_string(gt.size()));
  double sum = 0.0;
  for (std::size_t t = 0; t < gt.size(); ++t) sum += distance(pred[t], gt[t]);
  return {sum / static_cast<double>(gt.size()), distance(pred[gt.size() - 1], gt.back())};
}

// Best-of-K errors for one scenario. ADE and FDE are minimized separately
// per ground truth, then averaged over ground truths.
inline DisplacementError min_ade_fde_k(const std::vector<Trajectory>& preds, const std::vector<Trajectory>& gts) {
  if (preds.empty()) throw ArgumentError("min_ade_fde_k: no predictions");
  if (gts.empty()) throw ArgumentError("min_ade_fde_k: no ground truths");
  DisplacementError out;
  for (const auto& gt : gts) {
    double best_ade = std::numeric_limits<double>::infinity();
    double best_fde = best_ade;
    for (const auto& p : preds) {
      const auto e = ade_fde(p, gt);
      best_ade = std::min(best_ade, e.ade);
      best_fde = std::min(best_fde, e.fde);
    }
    out.ade += best_ade;
    out.fde += best_fde;
  }
  out.ade /= static_cast<double>(gts.size());
  out.fde /= static_cast<double>(gts.size());
  return out;
}

// Pads a prediction list to k entries by cycling through it, or keeps the
// first k. A single prediction therefore becomes k identical copies.
inline std::vector<Trajectory> duplicate_to_k(const std::vector<Trajectory>& preds, std::size_t k) {
  if (preds.empty()) throw ArgumentError("duplicate_to_k: no predictions");
  if (k < 1) throw ArgumentError("duplicate_to_k: k must be >= 1");
  std::vector<Trajectory> out;
  out.reserve(k);
  for (std::size_t i = 0; i < k; ++i) out.push_back(preds[i % preds.size()]);
  return out;
}

enum class HorizonUnit { seconds, frames };

inline const char* to_string(HorizonUnit u) { return u == HorizonUnit::seconds ? "seconds" : "frames"; }

inline HorizonUnit horizon_unit_from_string(const std::string& s) {
  if (s == "seconds") return HorizonUnit::seconds;
  if (s == "frames") return HorizonUnit::frames;
  throw ConfigError("unknown horizon unit '" + s + "' (expected seconds|frames)");
}

// Rounds half away from zero: at 2.5 fps, 1/2/3 s map to frames 3/5/8.
inline std::size_t seconds_to_frames(double seconds, double fps) {
  if (!(seconds > 0.0) || !(fps > 0.0)) throw ArgumentError("seconds_to_frames: need positive seconds and fps");
  return static_cast<std::size_t>(std::max(1L, std::lround(seconds * fps)));
}

inline std::size_t horizon_frames(double horizon, HorizonUnit unit, double fps) {
  if (unit == HorizonUnit::seconds) return seconds_to_frames(horizon, fps);
  if (!(horizon >= 1.0) || horizon != std::floor(horizon))
    throw ArgumentError("frame horizon must be a positive integer, got " + std::to_string(horizon));
  return static_cast<std::size_t>(horizon);
}

struct NllTerm {
  double sum = 0.0;        // sum of -log C over contributing futures
  std::size_t count = 0;   // futures reaching the horizon
  std::size_t skipped = 0; // futures shorter than the horizon
};

// beliefs[t] is the distribution for future step t + 1 on `grid`;
// `frames` is 1-based. Ground-truth points are quantized with clamping.
inline NllTerm nll_term(const std::vector<std::vector<double>>& beliefs, const std::vector<Trajectory>& gts,
                        const GridSpec& grid, std::size_t frames) {
  if (frames < 1) throw ArgumentError("nll: horizon must be >= 1 frame");
  NllTerm out;
  for (const auto& gt : gts) {
    if (gt.size() < frames) {
      ++out.skipped;
      continue;
    }
    if (beliefs.size() < frames)
      throw ArgumentError("nll: " + std::to_string(beliefs.size()) + " belief steps, horizon " +
                          std::to_string(frames));
    const auto& b = beliefs[frames - 1];
    if (b.size() != grid.num_cells())
      throw ShapeError("nll: belief has " + std::to_string(b.size()) + " cells, grid " +
                       std::to_string(grid.num_cells()));
    const CellIndex c = quantize_point(grid, gt[frames - 1]);
    out.sum += -std::log(std::max(b[c.value], 1e-12));
    ++out.count;
  }
  return out;
}

// Mean NLL per horizon (in frames); horizons no future reaches are absent.
inline std::map<std::size_t, std::optional<double>> nll(const std::vector<std::vector<double>>& beliefs,
                                                        const std::vector<Trajectory>& gts, const GridSpec& grid,
                                                        const std::vector<std::size_t>& horizons) {
  std::map<std::size_t, std::optional<double>> out;
  for (std::size_t h : horizons) {
    const auto term = nll_term(beliefs, gts, grid, h);
    out[h] = term.count ? std::optional<double>(term.sum / static_cast<double>(term.count)) : std::nullopt;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Dataset-level evaluation

struct ScenarioEval {
  std::string scenario_id;
  ViewTag view_tag = ViewTag::topdown;
  std::size_t futures = 0;
  std::size_t k = 0;
  double ade = 0.0;  // top-1 prediction, averaged over futures
  double fde = 0.0;
  double min_ade_k = 0.0;
  double min_fde_k = 0.0;
  std::map<std::size_t, NllTerm> nll;  // keyed by horizon in frames
};

struct EvalReport {
  double ade = 0.0;
  double fde = 0.0;
  double min_ade_k = 0.0;
  double min_fde_k = 0.0;
  // Keyed by the horizon as requested (seconds or frames, per `unit`).
  std::map<double, std::optional<double>> nll_at;
  std::map<double, std::size_t> nll_count;
  std::map<double, std::size_t> nll_skipped;
  std::size_t num_scenarios = 0;
  std::size_t num_futures = 0;
  std::size_t k = 0;
  HorizonUnit unit = HorizonUnit::seconds;
  std::string units = "scene units";
};

struct EvalOptions {
  std::size_t k = 20;
  std::vector<double> horizons = {1.0, 2.0, 3.0};
  HorizonUnit unit = HorizonUnit::seconds;
};

inline ScenarioEval evaluate_scenario(const Scenario& sc, const PredictionSet& ps, const EvalOptions& opt) {
  if (ps.trajectories.empty()) throw ArgumentError(sc.scenario_id + ": prediction has no trajectories");
  ScenarioEval row;
  row.scenario_id = sc.scenario_id;
  row.view_tag = sc.view_tag;
  row.futures = sc.futures.size();
  row.k = opt.k;
  const auto preds = duplicate_to_k(ps.trajectories, opt.k);
  for (const auto& gt : sc.futures) {
    const auto e = ade_fde(preds.front(), gt);
    row.ade += e.ade;
    row.fde += e.fde;
  }
  row.ade /= static_cast<double>(sc.futures.size());
  row.fde /= static_cast<double>(sc.futures.size());
  const auto m = min_ade_fde_k(preds, sc.futures);
  row.min_ade_k = m.ade;
  row.min_fde_k = m.fde;
  if (!ps.beliefs.empty())
    for (double h : opt.horizons) {
      const std::size_t f = horizon_frames(h, opt.unit, sc.fps);
      row.nll[f] = nll_term(ps.beliefs, sc.futures, sc.fine, f);
    }
  return row;
}

// J-weighted pooling of per-scenario rows, in row order.
inline EvalReport pool(const std::vector<ScenarioEval>& rows, const std::vector<double>& fps,
                       const EvalOptions& opt) {
  EvalReport r;
  r.k = opt.k;
  r.unit = opt.unit;
  std::map<double, NllTerm> acc;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& row = rows[i];
    const double w = static_cast<double>(row.futures);
    r.ade += w * row.ade;
    r.fde += w * row.fde;
    r.min_ade_k += w * row.min_ade_k;
    r.min_fde_k += w * row.min_fde_k;
    r.num_futures += row.futures;
    ++r.num_scenarios;
    if (row.nll.empty()) continue;
    for (double h : opt.horizons) {
      const auto& t = row.nll.at(horizon_frames(h, opt.unit, fps[i]));
      acc[h].sum += t.sum;
      acc[h].count += t.count;
      acc[h].skipped += t.skipped;
    }
  }
  if (r.num_futures) {
    const double n = static_cast<double>(r.num_futures);
    r.ade /= n;
    r.fde /= n;
    r.min_ade_k /= n;
    r.min_fde_k /= n;
  }
  for (double h : opt.horizons) {
    const auto it = acc.find(h);
    const NllTerm t = it == acc.end() ? NllTerm{} : it->second;
    r.nll_at[h] = t.count ? std::optional<double>(t.sum / static_cast<double>(t.count)) : std::nullopt;
    r.nll_count[h] = t.count;
    r.nll_skipped[h] = t.skipped;
  }
  return r;
}

struct EvalResult {
  EvalReport overall;
  std::map<std::string, EvalReport> by_view;
  std::vector<ScenarioEval> rows;
};

// Matches predictions to scenarios by id. Every scenario needs a prediction;
// missing ids are listed in the error.
inline EvalResult evaluate(const std::vector<Scenario>& scenarios, const std::vector<PredictionSet>& preds,
                           const EvalOptions& opt) {
  if (opt.k < 1) throw ArgumentError("evaluate: k must be >= 1");
  std::map<std::string, const PredictionSet*> by_id;
  for (const auto& p : preds) {
    if (!by_id.emplace(p.scenario_id, &p).second)
      throw ArgumentError("duplicate prediction for scenario " + p.scenario_id);
  }
  std::vector<std::string> missing;
  for (const auto& s : scenarios)
    if (!by_id.count(s.scenario_id)) missing.push_back(s.scenario_id);
  if (!missing.empty()) {
    std::string msg = "no prediction for scenario id(s):";
    for (const auto& id : missing) msg += " " + id;
    throw ArgumentError(msg);
  }

  EvalResult res;
  std::vector<double> fps;
  std::map<std::string, std::pair<std::vector<ScenarioEval>, std::vector<double>>> groups;
  for (const auto& s : scenarios) {
    res.rows.push_back(evaluate_scenario(s, *by_id.at(s.scenario_id), opt));
    fps.push_back(s.fps);
    auto& g = groups[to_string(s.view_tag)];
    g.first.push_back(res.rows.back());
    g.second.push_back(s.fps);
  }
  res.overall = pool(res.rows, fps, opt);
  for (const auto& [tag, g] : groups) res.by_view[tag] = pool(g.first, g.second, opt);
  return res;
}

// ---------------------------------------------------------------------------
// Output

namespace detail {

inline std::string horizon_label(double h) {
  std::ostringstream os;
  os << h;
  return os.str();
}

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
  nlohmann::json nll = nlohmann::json::object();
  for (const auto& [h, v] : r.nll_at) {
    const auto key = detail::horizon_label(h);
    nll[key] = {{"value", v ? nlohmann::json(*v) : nlohmann::json(nullptr)},
                {"count", r.nll_count.at(h)},
                {"skipped", r.nll_skipped.at(h)}};
  }
  return {{"ade", r.ade},
          {"fde", r.fde},
          {"min_ade_k", r.min_ade_k},
          {"min_fde_k", r.min_fde_k},
          {"nll_at", nll},
          {"horizon_unit", to_string(r.unit)},
          {"num_scenarios", r.num_scenarios},
          {"num_futures", r.num_futures},
          {"k", r.k},
          {"units", r.units}};
}

inline nlohmann::json to_json(const EvalResult& res) {
  nlohmann::json views = nlohmann::json::object();
  for (const auto& [tag, r] : res.by_view) views[tag] = to_json(r);
  return {{"overall", to_json(res.overall)}, {"by_view", views}};
}

inline std::string format_table(const EvalResult& res) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-10s %6s %6s %10s %10s %10s %10s", "view", "N", "J", "minADE_K", "minFDE_K",
                "ADE", "FDE");
  os << buf;
  for (const auto& [h, v] : res.overall.nll_at) {
    (void)v;
    std::snprintf(buf, sizeof buf, " %9s", ("NLL@" + detail::horizon_label(h)).c_str());
    os << buf;
  }
  os << '\n';
  auto line = [&](const std::string& name, const EvalReport& r) {
    std::snprintf(buf, sizeof buf, "%-10s %6zu %6zu %10.4f %10.4f %10.4f %10.4f", name.c_str(), r.num_scenarios,
                  r.num_futures, r.min_ade_k, r.min_fde_k, r.ade, r.fde);
    os << buf;
    for (const auto& [h, v] : r.nll_at) {
      (void)h;
      if (v)
        std::snprintf(buf, sizeof buf, " %9.4f", *v);
      else
        std::snprintf(buf, sizeof buf, " %9s", "-");
      os << buf;
    }
    os << '\n';
  };
  for (const auto& [tag, r] : res.by_view) line(tag, r);
  line("all", res.overall);
  return os.str();
}

inline std::string format_csv(const EvalResult& res) {
  std::ostringstream os;
  os.precision(17);
  os << "scenario_id,view_tag,futures,k,ade,fde,min_ade_k,min_fde_k";
  std::set<std::size_t> frames;
  for (const auto& row : res.rows)
    for (const auto& [f, t] : row.nll) frames.insert(f);
  for (std::size_t f : frames) os << ",nll_f" << f;
  os << '\n';
  for (const auto& row : res.rows) {
    os << row.scenario_id << ',' << to_string(row.view_tag) << ',' << row.futures << ',' << row.k << ',' << row.ade
       << ',' << row.fde << ',' << row.min_ade_k << ',' << row.min_fde_k;
    for (std::size_t f : frames) {
      os << ',';
      const auto it = row.nll.find(f);
      if (it != row.nll.end() && it->second.count) os << it->second.sum / static_cast<double>(it->second.count);
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace mvt
