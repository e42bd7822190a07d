#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "multiverse/errors.hpp"
#include "multiverse/gridworld.hpp"
#include "multiverse/tensor.hpp"

namespace mvt {

// ---------------------------------------------------------------------------
// Semantic classes

inline constexpr int kNumSemanticClasses = 13;

inline constexpr std::array<const char*, kNumSemanticClasses> kClassNames = {
    "sidewalk", "road",  "crosswalk", "grass", "building", "vehicle", "pedestrian",
    "tree",     "fence", "pole",      "sign",  "bicycle",  "other",
};

enum SemanticClass : int {
  kSidewalk = 0,
  kRoad = 1,
  kCrosswalk = 2,
  kGrass = 3,
  kBuilding = 4,
  kVehicle = 5,
  kPedestrian = 6,
  kTree = 7,
  kFence = 8,
  kPole = 9,
  kSign = 10,
  kBicycle = 11,
  kOther = 12,
};

// Only this split matters to the generator.
inline bool walkable(int label) {
  return label == kSidewalk || label == kRoad || label == kCrosswalk || label == kGrass ||
         label == kPedestrian;
}

struct SemanticMap {
  GridSpec grid;
  int num_classes = kNumSemanticClasses;
  std::vector<int> labels;  // row-major, rows * cols

  int at(CellIndex i) const { return labels.at(i.value); }
  friend bool operator==(const SemanticMap&, const SemanticMap&) = default;
};

inline void validate(const SemanticMap& m) {
  validate(m.grid);
  if (m.num_classes <= 0) throw ConfigError("semantic map needs a positive class count");
  if (m.labels.size() != m.grid.num_cells())
    throw ShapeError("semantic map has " + std::to_string(m.labels.size()) + " labels for " +
                     std::to_string(m.grid.num_cells()) + " cells");
  for (int l : m.labels)
    if (l < 0 || l >= m.num_classes)
      throw RangeError("semantic label " + std::to_string(l) + " outside [0, " +
                       std::to_string(m.num_classes) + ")");
}

template <typename T = double>
Tensor<T> one_hot_semantic(const SemanticMap& m) {
  validate(m);
  const auto K = static_cast<std::size_t>(m.num_classes);
  Tensor<T> out(Shape{m.grid.rows, m.grid.cols, K});
  for (std::size_t i = 0; i < m.labels.size(); ++i)
    out[i * K + static_cast<std::size_t>(m.labels[i])] = T{1};
  return out;
}

template <typename T>
Tensor<T> temporal_average(const std::vector<Tensor<T>>& frames) {
  if (frames.empty()) throw ArgumentError("temporal_average: no frames");
  Tensor<T> out(frames.front().shape());
  for (const auto& f : frames) {
    require_shape(f.shape(), out.shape(), "temporal_average frame");
    for (std::size_t i = 0; i < f.size(); ++i) out[i] += f[i];
  }
  const T inv = T{1} / static_cast<T>(frames.size());
  for (T& v : out.values()) v *= inv;
  return out;
}

// ---------------------------------------------------------------------------
// Scenario data model

enum class ViewTag { deg45_a, deg45_b, deg45_c, topdown };

inline const char* to_string(ViewTag v) {
  switch (v) {
    case ViewTag::deg45_a: return "deg45_a";
    case ViewTag::deg45_b: return "deg45_b";
    case ViewTag::deg45_c: return "deg45_c";
    case ViewTag::topdown: return "topdown";
  }
  return "topdown";
}

inline ViewTag view_tag_from_string(const std::string& s) {
  if (s == "deg45_a") return ViewTag::deg45_a;
  if (s == "deg45_b") return ViewTag::deg45_b;
  if (s == "deg45_c") return ViewTag::deg45_c;
  if (s == "topdown") return ViewTag::topdown;
  throw ParseError(0, "unknown view_tag '" + s + "'");
}

using Trajectory = std::vector<Point2>;

struct Scenario {
  std::string scenario_id;
  GridSpec fine;
  GridSpec coarse;
  // One map per history frame, or a single static map reused for all frames.
  std::vector<SemanticMap> semantic_maps;
  Trajectory history;
  std::vector<Trajectory> futures;
  std::vector<Point2> destinations;
  ViewTag view_tag = ViewTag::topdown;
  double fps = 2.5;

  const SemanticMap& map_for_frame(std::size_t t) const {
    return semantic_maps.size() == 1 ? semantic_maps.front() : semantic_maps.at(t);
  }
  std::size_t longest_future() const {
    std::size_t n = 0;
    for (const auto& f : futures) n = std::max(n, f.size());
    return n;
  }

  friend bool operator==(const Scenario&, const Scenario&) = default;
};

inline void validate(const Scenario& s, std::size_t max_pred_len = 0) {
  validate(s.fine);
  validate(s.coarse);
  if (!same_extent(s.fine, s.coarse))
    throw ConfigError(s.scenario_id + ": fine and coarse grids cover different extents");
  if (s.history.empty()) throw ArgumentError(s.scenario_id + ": empty history");
  if (s.futures.empty()) throw ArgumentError(s.scenario_id + ": no futures");
  if (s.semantic_maps.empty()) throw ArgumentError(s.scenario_id + ": no semantic map");
  if (s.semantic_maps.size() != 1 && s.semantic_maps.size() != s.history.size())
    throw ArgumentError(s.scenario_id + ": need 1 or h semantic maps, got " +
                        std::to_string(s.semantic_maps.size()));
  for (const auto& m : s.semantic_maps) {
    validate(m);
    if (!(m.grid == s.fine)) throw ConfigError(s.scenario_id + ": semantic map grid differs from fine grid");
  }
  for (const auto& f : s.futures) {
    if (f.empty()) throw ArgumentError(s.scenario_id + ": empty future");
    if (max_pred_len && f.size() > max_pred_len)
      throw ArgumentError(s.scenario_id + ": future of length " + std::to_string(f.size()) +
                          " exceeds max_pred_len " + std::to_string(max_pred_len));
  }
  if (!(s.fps > 0.0)) throw ArgumentError(s.scenario_id + ": fps must be positive");
}

// ---------------------------------------------------------------------------
// Procedural forking-scenario generator

struct GeneratorConfig {
  GridSpec grid{18, 36, {0.0, 0.0}, 1.0, 1.0, 0};
  std::size_t history_len = 8;
  std::size_t num_futures = 2;
  std::size_t num_destinations = 2;
  std::size_t pred_len = 12;
  std::size_t max_pred_len = 26;
  double speed = 1.0;   // scene units per frame
  double noise = 0.0;   // per-axis Gaussian sigma added to every point
  double spread_deg = 45.0;  // half-angle between the outermost branches
  std::size_t num_obstacles = 3;
  std::size_t max_retries = 64;
  double fps = 2.5;
  bool multi_scale = true;
};

inline nlohmann::json to_json(const GridSpec& g) {
  return {{"rows", g.rows},
          {"cols", g.cols},
          {"origin", {g.origin.x, g.origin.y}},
          {"cell", {g.cell_w, g.cell_h}},
          {"scale_id", g.scale_id}};
}

inline GridSpec grid_from_json(const nlohmann::json& j) {
  GridSpec g;
  g.rows = j.at("rows").get<std::size_t>();
  g.cols = j.at("cols").get<std::size_t>();
  g.origin = {j.at("origin").at(0).get<double>(), j.at("origin").at(1).get<double>()};
  g.cell_w = j.at("cell").at(0).get<double>();
  g.cell_h = j.at("cell").at(1).get<double>();
  g.scale_id = j.at("scale_id").get<int>();
  return g;
}

inline nlohmann::json to_json(const GeneratorConfig& c) {
  return {{"grid", to_json(c.grid)},
          {"history_len", c.history_len},
          {"num_futures", c.num_futures},
          {"num_destinations", c.num_destinations},
          {"pred_len", c.pred_len},
          {"max_pred_len", c.max_pred_len},
          {"speed", c.speed},
          {"noise", c.noise},
          {"spread_deg", c.spread_deg},
          {"num_obstacles", c.num_obstacles},
          {"max_retries", c.max_retries},
          {"fps", c.fps},
          {"multi_scale", c.multi_scale}};
}

inline GeneratorConfig generator_config_from_json(const nlohmann::json& j) {
  GeneratorConfig c;
  c.grid = grid_from_json(j.at("grid"));
  c.history_len = j.at("history_len").get<std::size_t>();
  c.num_futures = j.at("num_futures").get<std::size_t>();
  c.num_destinations = j.at("num_destinations").get<std::size_t>();
  c.pred_len = j.at("pred_len").get<std::size_t>();
  c.max_pred_len = j.at("max_pred_len").get<std::size_t>();
  c.speed = j.at("speed").get<double>();
  c.noise = j.at("noise").get<double>();
  c.spread_deg = j.at("spread_deg").get<double>();
  c.num_obstacles = j.at("num_obstacles").get<std::size_t>();
  c.max_retries = j.at("max_retries").get<std::size_t>();
  c.fps = j.at("fps").get<double>();
  c.multi_scale = j.at("multi_scale").get<bool>();
  return c;
}

inline void validate(const GeneratorConfig& c) {
  validate(c.grid);
  if (c.history_len < 1) throw ConfigError("history_len must be >= 1");
  if (c.num_futures < 2) throw ConfigError("num_futures must be >= 2, got " + std::to_string(c.num_futures));
  if (c.num_destinations < c.num_futures)
    throw ConfigError("num_destinations must be >= num_futures");
  if (c.pred_len < 1 || c.pred_len > c.max_pred_len)
    throw ConfigError("pred_len must lie in [1, max_pred_len]");
  if (!(c.speed > 0.0)) throw ConfigError("speed must be positive");
  if (!(c.noise >= 0.0)) throw ConfigError("noise must be non-negative");
  if (!(c.fps > 0.0)) throw ConfigError("fps must be positive");
  if (c.max_retries < 1) throw ConfigError("max_retries must be >= 1");
  if (c.multi_scale && (c.grid.rows % 2 || c.grid.cols % 2))
    throw ConfigError("multi-scale scenarios need even grid dimensions");
}

namespace detail {

// Points spaced `speed` apart along the polyline, starting one step after
// its first vertex; the final vertex closes the path if it falls between steps.
inline Trajectory walk_polyline(const std::vector<Point2>& verts, double speed, std::size_t max_points) {
  Trajectory out;
  double total = 0.0;
  std::vector<double> cum{0.0};
  for (std::size_t i = 1; i < verts.size(); ++i) {
    total += distance(verts[i - 1], verts[i]);
    cum.push_back(total);
  }
  for (std::size_t k = 1; k <= max_points; ++k) {
    const double s = std::min(static_cast<double>(k) * speed, total);
    std::size_t seg = 1;
    while (seg + 1 < cum.size() && cum[seg] < s) ++seg;
    const double len = cum[seg] - cum[seg - 1];
    const double u = len > 0.0 ? (s - cum[seg - 1]) / len : 1.0;
    out.push_back(verts[seg - 1] + u * (verts[seg] - verts[seg - 1]));
    if (s >= total) break;
  }
  return out;
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

// One controlled agent walking "up" (-y) toward a fork point, then J
// continuations toward distinct destinations fanned out around the heading.
inline Scenario generate_forking_scenario(const GeneratorConfig& cfg, std::uint64_t seed) {
  validate(cfg);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const GridSpec& g = cfg.grid;
  const double W = g.width(), H = g.height();

  for (std::size_t attempt = 0; attempt < cfg.max_retries; ++attempt) {
    Scenario s;
    s.fine = g;
    s.coarse = cfg.multi_scale ? halved(g) : g;
    s.fps = cfg.fps;
    s.view_tag = static_cast<ViewTag>(rng() % 4);
    s.scenario_id = "fork-" + std::to_string(seed);

    const double hist_span = cfg.speed * static_cast<double>(cfg.history_len - 1);
    const double fut_span = cfg.speed * static_cast<double>(cfg.pred_len);
    // Room above the fork for the branches, below it for the history.
    const double reach = fut_span * std::cos(std::max(0.0, cfg.spread_deg * std::numbers::pi / 180.0 - 0.1));
    const double lo = g.origin.y + reach + 0.25 * g.cell_h;
    const double hi = g.origin.y + H - hist_span - 0.25 * g.cell_h;
    const double fork_y = lo <= hi ? lo + (hi - lo) * unit(rng) : 0.5 * (lo + hi);
    const Point2 fork{g.origin.x + W * (0.5 + 0.1 * (unit(rng) - 0.5)), fork_y};
    const double heading = -std::numbers::pi / 2 + (unit(rng) - 0.5) * 0.2;

    // History ends exactly at the fork point.
    for (std::size_t t = 0; t < cfg.history_len; ++t) {
      const double back = cfg.speed * static_cast<double>(cfg.history_len - 1 - t);
      Point2 p{fork.x - back * std::cos(heading), fork.y - back * std::sin(heading)};
      if (cfg.noise > 0.0 && t + 1 < cfg.history_len) {
        p.x += cfg.noise * gauss(rng);
        p.y += cfg.noise * gauss(rng);
      }
      s.history.push_back(p);
    }

    // Destination candidates fanned symmetrically around the heading.
    const double spread = cfg.spread_deg * std::numbers::pi / 180.0;
    std::vector<Point2> candidates;
    for (std::size_t k = 0; k < cfg.num_destinations; ++k) {
      const double frac = cfg.num_destinations == 1
                              ? 0.5
                              : static_cast<double>(k) / static_cast<double>(cfg.num_destinations - 1);
      const double ang = heading - spread + 2.0 * spread * frac + (unit(rng) - 0.5) * 0.15;
      const double radius = fut_span * (0.8 + 0.2 * unit(rng));
      candidates.push_back({fork.x + radius * std::cos(ang), fork.y + radius * std::sin(ang)});
    }
    std::vector<std::size_t> order(candidates.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(cfg.num_futures);
    std::sort(order.begin(), order.end());
    for (std::size_t k : order) s.destinations.push_back(candidates[k]);

    for (const Point2& dest : s.destinations) {
      Trajectory f = detail::walk_polyline({fork, dest}, cfg.speed, std::min(cfg.pred_len, cfg.max_pred_len));
      if (cfg.noise > 0.0)
        for (Point2& p : f) {
          p.x += cfg.noise * gauss(rng);
          p.y += cfg.noise * gauss(rng);
        }
      s.futures.push_back(std::move(f));
    }

    // Every trajectory point must be on the grid.
    auto inside = [&](Point2 p) {
      return p.x >= g.origin.x && p.y >= g.origin.y && p.x < g.origin.x + W && p.y < g.origin.y + H;
    };
    bool ok = std::all_of(s.history.begin(), s.history.end(), inside) &&
              std::all_of(s.destinations.begin(), s.destinations.end(), inside);
    for (const auto& f : s.futures) ok = ok && std::all_of(f.begin(), f.end(), inside);
    if (!ok) continue;

    std::set<std::size_t> path_cells;
    for (const Point2& p : s.history) path_cells.insert(quantize_point(g, p, Bounds::strict).value);
    for (const auto& f : s.futures)
      for (const Point2& p : f) path_cells.insert(quantize_point(g, p, Bounds::strict).value);

    SemanticMap map;
    map.grid = g;
    map.labels.assign(g.num_cells(), kSidewalk);
    // A road band across the upper part of the scene and a grass patch.
    const std::size_t road_row = static_cast<std::size_t>(unit(rng) * static_cast<double>(g.rows / 3));
    for (std::size_t c = 0; c < g.cols; ++c) map.labels[cell_at(g, road_row, c).value] = kRoad;
    {
      const std::size_t r0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(g.rows - 1));
      const std::size_t c0 = static_cast<std::size_t>(unit(rng) * static_cast<double>(g.cols - 1));
      for (std::size_t r = r0; r < std::min(g.rows, r0 + 2); ++r)
        for (std::size_t c = c0; c < std::min(g.cols, c0 + 2); ++c) map.labels[cell_at(g, r, c).value] = kGrass;
    }

    // Impassable blocks placed off the walked cells.
    std::size_t placed = 0;
    for (std::size_t tries = 0; tries < 50 * std::max<std::size_t>(cfg.num_obstacles, 1) && placed < cfg.num_obstacles;
         ++tries) {
      const std::size_t bh = 1 + rng() % std::max<std::size_t>(1, g.rows / 4);
      const std::size_t bw = 1 + rng() % std::max<std::size_t>(1, g.cols / 4);
      const std::size_t r0 = rng() % (g.rows - bh + 1);
      const std::size_t c0 = rng() % (g.cols - bw + 1);
      bool clear = true;
      for (std::size_t r = r0; r < r0 + bh && clear; ++r)
        for (std::size_t c = c0; c < c0 + bw && clear; ++c) clear = !path_cells.count(cell_at(g, r, c).value);
      if (!clear) continue;
      const int label = (placed % 3 == 2) ? kVehicle : kBuilding;
      for (std::size_t r = r0; r < r0 + bh; ++r)
        for (std::size_t c = c0; c < c0 + bw; ++c) map.labels[cell_at(g, r, c).value] = label;
      ++placed;
    }
    if (placed < std::max<std::size_t>(cfg.num_obstacles, 1) && cfg.num_obstacles > 0) continue;
    if (cfg.num_obstacles == 0) {
      // Keep at least one impassable cell so the map always has both kinds.
      bool done = false;
      for (std::size_t i = 0; i < g.num_cells() && !done; ++i)
        if (!path_cells.count(i)) {
          map.labels[i] = kBuilding;
          done = true;
        }
      if (!done) continue;
    }

    bool walk_ok = true;
    for (std::size_t cell : path_cells) walk_ok = walk_ok && walkable(map.labels[cell]);
    if (!walk_ok) continue;

    s.semantic_maps.push_back(std::move(map));
    validate(s, cfg.max_pred_len);
    return s;
  }
  throw GenerationError("could not generate a valid forking scenario after " + std::to_string(cfg.max_retries) +
                        " attempts (seed " + std::to_string(seed) + ")");
}

struct ScenarioSet {
  std::vector<Scenario> scenarios;
  std::uint64_t seed = 0;
  nlohmann::json generator_config = nlohmann::json::object();

  friend bool operator==(const ScenarioSet& a, const ScenarioSet& b) {
    return a.scenarios == b.scenarios && a.seed == b.seed && a.generator_config == b.generator_config;
  }
};

inline void validate(const ScenarioSet& set) {
  std::set<std::string> ids;
  for (const auto& s : set.scenarios) {
    validate(s);
    if (!ids.insert(s.scenario_id).second) throw ArgumentError("duplicate scenario_id " + s.scenario_id);
  }
}

// n scenarios, the i-th seeded from (seed, i).
inline ScenarioSet generate_scenarios(const GeneratorConfig& cfg, std::uint64_t seed, std::size_t n) {
  ScenarioSet set;
  set.seed = seed;
  set.generator_config = to_json(cfg);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint64_t s = detail::mix_seed(seed, i);
    Scenario sc = generate_forking_scenario(cfg, s);
    sc.scenario_id = "fork-" + std::to_string(seed) + "-" + std::to_string(i);
    set.scenarios.push_back(std::move(sc));
  }
  return set;
}

// ---------------------------------------------------------------------------
// JSON Lines scenario files

inline constexpr int kScenarioFileVersion = 1;

namespace detail {

inline nlohmann::json points_json(const std::vector<Point2>& pts) {
  nlohmann::json a = nlohmann::json::array();
  for (const Point2& p : pts) a.push_back({p.x, p.y});
  return a;
}

inline std::vector<Point2> points_from(const nlohmann::json& j) {
  std::vector<Point2> out;
  for (const auto& p : j) {
    if (!p.is_array() || p.size() != 2) throw ParseError(0, "point must be [x, y]");
    out.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
  }
  return out;
}

inline const nlohmann::json& field(const nlohmann::json& j, const char* name) {
  auto it = j.find(name);
  if (it == j.end()) throw ParseError(0, std::string("missing field \"") + name + "\"");
  return *it;
}

}  // namespace detail

inline nlohmann::json to_json(const Scenario& s) {
  nlohmann::json maps = nlohmann::json::array();
  for (const auto& m : s.semantic_maps) maps.push_back({{"k", m.num_classes}, {"labels", m.labels}});
  nlohmann::json futures = nlohmann::json::array();
  for (const auto& f : s.futures) futures.push_back(detail::points_json(f));
  return {{"v", kScenarioFileVersion},
          {"scenario_id", s.scenario_id},
          {"grid_fine", to_json(s.fine)},
          {"grid_coarse", to_json(s.coarse)},
          {"semantic_maps", maps},
          {"history", detail::points_json(s.history)},
          {"futures", futures},
          {"destinations", detail::points_json(s.destinations)},
          {"view_tag", to_string(s.view_tag)},
          {"fps", s.fps}};
}

inline Scenario scenario_from_json(const nlohmann::json& j) {
  using detail::field;
  const int v = field(j, "v").get<int>();
  if (v != kScenarioFileVersion)
    throw VersionError("scenario record version " + std::to_string(v) + " is not supported (expected " +
                       std::to_string(kScenarioFileVersion) + ")");
  Scenario s;
  s.scenario_id = field(j, "scenario_id").get<std::string>();
  s.fine = grid_from_json(field(j, "grid_fine"));
  s.coarse = grid_from_json(field(j, "grid_coarse"));
  for (const auto& m : field(j, "semantic_maps")) {
    SemanticMap sm;
    sm.grid = s.fine;
    sm.num_classes = field(m, "k").get<int>();
    sm.labels = field(m, "labels").get<std::vector<int>>();
    s.semantic_maps.push_back(std::move(sm));
  }
  s.history = detail::points_from(field(j, "history"));
  for (const auto& f : field(j, "futures")) s.futures.push_back(detail::points_from(f));
  s.destinations = detail::points_from(field(j, "destinations"));
  s.view_tag = view_tag_from_string(field(j, "view_tag").get<std::string>());
  s.fps = field(j, "fps").get<double>();
  validate(s);
  return s;
}

inline std::filesystem::path sidecar_path(const std::filesystem::path& path) {
  std::filesystem::path p = path;
  p.replace_extension(".meta.json");
  return p;
}

inline void write_scenarios(const ScenarioSet& set, const std::filesystem::path& path) {
  validate(set);
  auto write_atomic = [](const std::filesystem::path& target, const std::string& body) {
    std::filesystem::path tmp = target;
    tmp += ".tmp";
    {
      std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
      if (!os) throw IoError("cannot open " + tmp.string() + " for writing");
      os << body;
      if (!os) throw IoError("write failed for " + tmp.string());
    }
    std::error_code ec;
    std::filesystem::rename(tmp, target, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + target.string() + ": " + ec.message());
  };
  std::string body;
  for (const auto& s : set.scenarios) body += to_json(s).dump() + "\n";
  write_atomic(path, body);
  nlohmann::json meta = {{"v", kScenarioFileVersion}, {"seed", set.seed}, {"generator_config", set.generator_config}};
  write_atomic(sidecar_path(path), meta.dump(2) + "\n");
}

// All-or-nothing: any malformed line fails the whole read.
inline ScenarioSet read_scenarios(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open scenario file " + path.string());
  ScenarioSet set;
  std::string line;
  std::size_t lineno = 0;
  std::set<std::string> ids;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("malformed JSON: ") + e.what());
    }
    try {
      Scenario s = scenario_from_json(j);
      if (!ids.insert(s.scenario_id).second) throw ParseError(0, "duplicate scenario_id " + s.scenario_id);
      set.scenarios.push_back(std::move(s));
    } catch (const ParseError& e) {
      throw ParseError(lineno, e.what());
    } catch (const VersionError&) {
      throw;
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(lineno, std::string("bad field value: ") + e.what());
    } catch (const Error& e) {
      throw ParseError(lineno, e.what());
    }
  }
  const auto meta_path = sidecar_path(path);
  if (std::filesystem::exists(meta_path)) {
    std::ifstream ms(meta_path);
    try {
      const auto meta = nlohmann::json::parse(ms);
      set.seed = meta.at("seed").get<std::uint64_t>();
      set.generator_config = meta.at("generator_config");
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(0, meta_path.string() + ": " + e.what());
    }
  }
  return set;
}

}  // namespace mvt
