#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <compare>
#include <cstddef>
#include <string>
#include <vector>

#include "multiverse/errors.hpp"
#include "multiverse/tensor.hpp"

namespace mvt {

struct Point2 {
  double x = 0.0;
  double y = 0.0;

  friend bool operator==(const Point2&, const Point2&) = default;
  friend Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
  friend Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
  friend Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
};

inline double distance(Point2 a, Point2 b) { return std::hypot(a.x - b.x, a.y - b.y); }

struct CellIndex {
  std::size_t value = 0;
  friend auto operator<=>(const CellIndex&, const CellIndex&) = default;
};

// Row-major H x W discretization of a rectangle in scene units. Columns run
// along +x, rows along +y. Cells are half-open: [low, high) on both axes.
struct GridSpec {
  std::size_t rows = 2;
  std::size_t cols = 2;
  Point2 origin{};
  double cell_w = 1.0;
  double cell_h = 1.0;
  int scale_id = 0;

  std::size_t num_cells() const noexcept { return rows * cols; }
  double width() const noexcept { return static_cast<double>(cols) * cell_w; }
  double height() const noexcept { return static_cast<double>(rows) * cell_h; }

  friend bool operator==(const GridSpec&, const GridSpec&) = default;
};

inline void validate(const GridSpec& g) {
  if (g.rows < 2 || g.cols < 2)
    throw ConfigError("grid must be at least 2x2, got " + std::to_string(g.rows) + "x" +
                      std::to_string(g.cols));
  if (!(g.cell_w > 0.0) || !(g.cell_h > 0.0) || !std::isfinite(g.cell_w) ||
      !std::isfinite(g.cell_h))
    throw ConfigError("grid cell extents must be positive and finite");
  if (!std::isfinite(g.origin.x) || !std::isfinite(g.origin.y))
    throw ConfigError("grid origin must be finite");
}

inline void check_cell(const GridSpec& g, CellIndex i) {
  if (i.value >= g.num_cells())
    throw RangeError("cell index " + std::to_string(i.value) + " out of range for " +
                     std::to_string(g.rows) + "x" + std::to_string(g.cols) + " grid");
}

inline std::size_t row_of(const GridSpec& g, CellIndex i) { return i.value / g.cols; }
inline std::size_t col_of(const GridSpec& g, CellIndex i) { return i.value % g.cols; }
inline CellIndex cell_at(const GridSpec& g, std::size_t r, std::size_t c) {
  return CellIndex{r * g.cols + c};
}

enum class Bounds { clamp, strict };

// Number of points that were pulled back onto the grid by clamp mode.
class ClampCounter {
 public:
  void bump() noexcept { n_.fetch_add(1, std::memory_order_relaxed); }
  std::size_t count() const noexcept { return n_.load(std::memory_order_relaxed); }

 private:
  std::atomic<std::size_t> n_{0};
};

namespace detail {

inline std::size_t axis_bin(double v, double lo, double extent, std::size_t n, Bounds mode,
                            bool& clamped, const char* axis) {
  if (!std::isfinite(v)) throw RangeError(std::string("non-finite ") + axis + " coordinate");
  const double f = std::floor((v - lo) / extent);
  if (f < 0.0 || f >= static_cast<double>(n)) {
    if (mode == Bounds::strict)
      throw RangeError(std::string(axis) + "=" + std::to_string(v) + " outside grid range [" +
                       std::to_string(lo) + ", " + std::to_string(lo + extent * n) + ")");
    clamped = true;
    return f < 0.0 ? 0 : n - 1;
  }
  return static_cast<std::size_t>(f);
}

}  // namespace detail

inline CellIndex quantize_point(const GridSpec& g, Point2 p, Bounds mode = Bounds::clamp,
                                ClampCounter* counter = nullptr) {
  bool clamped = false;
  const std::size_t c = detail::axis_bin(p.x, g.origin.x, g.cell_w, g.cols, mode, clamped, "x");
  const std::size_t r = detail::axis_bin(p.y, g.origin.y, g.cell_h, g.rows, mode, clamped, "y");
  if (clamped && counter) counter->bump();
  return cell_at(g, r, c);
}

inline Point2 cell_center(const GridSpec& g, CellIndex i) {
  check_cell(g, i);
  return {g.origin.x + (static_cast<double>(col_of(g, i)) + 0.5) * g.cell_w,
          g.origin.y + (static_cast<double>(row_of(g, i)) + 0.5) * g.cell_h};
}

// Per-cell regression targets: entry i holds p - center(i), layout rows x cols x 2.
template <typename T = double>
Tensor<T> offset_targets(const GridSpec& g, Point2 p) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y)) throw RangeError("non-finite target point");
  Tensor<T> out(Shape{g.rows, g.cols, 2});
  for (std::size_t r = 0; r < g.rows; ++r) {
    for (std::size_t c = 0; c < g.cols; ++c) {
      const Point2 q = cell_center(g, cell_at(g, r, c));
      out.at(r, c, 0) = static_cast<T>(p.x - q.x);
      out.at(r, c, 1) = static_cast<T>(p.y - q.y);
    }
  }
  return out;
}

// 8-connected Moore neighborhood, clipped at the border, ascending order.
inline std::vector<CellIndex> neighbor_list(const GridSpec& g, CellIndex i) {
  check_cell(g, i);
  const auto r0 = static_cast<long>(row_of(g, i));
  const auto c0 = static_cast<long>(col_of(g, i));
  std::vector<CellIndex> out;
  out.reserve(8);
  for (long dr = -1; dr <= 1; ++dr) {
    for (long dc = -1; dc <= 1; ++dc) {
      if (dr == 0 && dc == 0) continue;
      const long r = r0 + dr;
      const long c = c0 + dc;
      if (r < 0 || c < 0 || r >= static_cast<long>(g.rows) || c >= static_cast<long>(g.cols))
        continue;
      out.push_back(cell_at(g, static_cast<std::size_t>(r), static_cast<std::size_t>(c)));
    }
  }
  return out;
}

// Compressed adjacency of the scene graph, used by the graph layers.
// Built from raw dimensions so degenerate 1x1 maps are representable.
struct NeighborTable {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::size_t> offsets;  // size rows*cols + 1
  std::vector<std::size_t> indices;

  std::size_t degree(std::size_t i) const { return offsets[i + 1] - offsets[i]; }

  static NeighborTable moore(std::size_t rows, std::size_t cols) {
    NeighborTable t;
    t.rows = rows;
    t.cols = cols;
    t.offsets.reserve(rows * cols + 1);
    t.offsets.push_back(0);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < cols; ++c) {
        for (long dr = -1; dr <= 1; ++dr) {
          for (long dc = -1; dc <= 1; ++dc) {
            if (dr == 0 && dc == 0) continue;
            const long rr = static_cast<long>(r) + dr;
            const long cc = static_cast<long>(c) + dc;
            if (rr < 0 || cc < 0 || rr >= static_cast<long>(rows) || cc >= static_cast<long>(cols))
              continue;
            t.indices.push_back(static_cast<std::size_t>(rr) * cols + static_cast<std::size_t>(cc));
          }
        }
        t.offsets.push_back(t.indices.size());
      }
    }
    return t;
  }

  static NeighborTable of(const GridSpec& g) { return moore(g.rows, g.cols); }
};

inline bool same_extent(const GridSpec& a, const GridSpec& b) {
  auto close = [](double u, double v) {
    return std::abs(u - v) <= 1e-9 * std::max({1.0, std::abs(u), std::abs(v)});
  };
  return close(a.origin.x, b.origin.x) && close(a.origin.y, b.origin.y) &&
         close(a.width(), b.width()) && close(a.height(), b.height());
}

inline CellIndex rescale_cell(const GridSpec& from, const GridSpec& to, CellIndex i) {
  if (!same_extent(from, to))
    throw ConfigError("rescale_cell: grids do not cover the same bounding box");
  return quantize_point(to, cell_center(from, i), Bounds::strict);
}

// Coarse companion of a fine grid with each axis halved (fine dims must be even).
inline GridSpec halved(const GridSpec& fine, int scale_id = 1) {
  if (fine.rows % 2 || fine.cols % 2)
    throw ConfigError("multi-scale needs even fine grid dimensions, got " +
                      std::to_string(fine.rows) + "x" + std::to_string(fine.cols));
  GridSpec g = fine;
  g.rows /= 2;
  g.cols /= 2;
  g.cell_w *= 2.0;
  g.cell_h *= 2.0;
  g.scale_id = scale_id;
  return g;
}

}  // namespace mvt
