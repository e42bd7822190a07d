#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "multiverse/multiverse.hpp"

namespace mvt::test {

inline GridSpec square_grid(std::size_t n, double extent = 100.0) {
  return GridSpec{n, n, {0.0, 0.0}, extent / static_cast<double>(n), extent / static_cast<double>(n), 0};
}

template <typename T = double>
Tensor<T> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  Tensor<T> t(std::move(s));
  for (auto& v : t.values()) v = static_cast<T>(u(rng));
  return t;
}

// Random belief over `n` cells.
inline std::vector<double> random_belief(std::size_t n, std::mt19937_64& rng) {
  std::gamma_distribution<double> ga(0.7, 1.0);
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& v : p) s += (v = ga(rng) + 1e-6);
  for (auto& v : p) v /= s;
  return p;
}

// Hand-built scenario on a 4x4 grid with cell size 1: a history walking up
// column 1 and two futures splitting left and right.
inline Scenario small_scenario(std::size_t rows = 4, std::size_t cols = 4, std::size_t history = 3) {
  Scenario s;
  s.scenario_id = "small";
  s.fine = GridSpec{rows, cols, {0.0, 0.0}, 1.0, 1.0, 0};
  s.coarse = halved(s.fine);
  SemanticMap m;
  m.grid = s.fine;
  m.labels.assign(rows * cols, kSidewalk);
  m.labels[cols - 1] = kBuilding;
  m.labels[rows * cols - 1] = kRoad;
  s.semantic_maps = {m};
  const double x = 1.4;
  for (std::size_t t = 0; t < history; ++t)
    s.history.push_back({x + 0.05 * static_cast<double>(t), static_cast<double>(rows) - 0.6 - 0.4 * static_cast<double>(t)});
  const Point2 last = s.history.back();
  s.futures.push_back({{last.x - 0.5, last.y - 0.5}, {last.x - 1.0, last.y - 1.0}});
  s.futures.push_back({{last.x + 0.5, last.y - 0.5}, {last.x + 1.0, last.y - 1.0}, {last.x + 1.5, last.y - 1.3}});
  s.destinations = {s.futures[0].back(), s.futures[1].back()};
  return s;
}

inline ModelConfig tiny_model(std::size_t d = 3) {
  ModelConfig c;
  c.d_enc = c.d_dec = d;
  c.d_embed = 2;
  c.history_len = 3;
  c.max_pred_len = 4;
  return c;
}

inline std::filesystem::path temp_dir(const std::string& tag) {
  auto p = std::filesystem::temp_directory_path() / ("mvt_" + tag + "_" + std::to_string(std::random_device{}()));
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace mvt::test
