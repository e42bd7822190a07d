#include <gtest/gtest.h>

#include <random>
#include <set>

#include "support.hpp"

using namespace mvt;
using mvt::test::square_grid;

TEST(Quantize, ContainmentAndBoundary) {
  const GridSpec g = square_grid(4);
  EXPECT_EQ(quantize_point(g, {10, 10}).value, 0u);
  // x = 25 sits on the boundary between columns 0 and 1; it belongs to column 1.
  EXPECT_EQ(quantize_point(g, {25, 0}).value, 1u);
  EXPECT_EQ(quantize_point(g, {99.999, 99.999}).value, 15u);
}

TEST(Quantize, CenterErrorBoundedOnRandomPoints) {
  const GridSpec g{5, 7, {-3.0, 2.0}, 1.5, 0.75, 0};
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> ux(g.origin.x, g.origin.x + g.width());
  std::uniform_real_distribution<double> uy(g.origin.y, g.origin.y + g.height());
  double worst_x = 0, worst_y = 0;
  for (int i = 0; i < 500; ++i) {
    const Point2 p{ux(rng), uy(rng)};
    const Point2 q = cell_center(g, quantize_point(g, p));
    worst_x = std::max(worst_x, std::abs(p.x - q.x));
    worst_y = std::max(worst_y, std::abs(p.y - q.y));
  }
  EXPECT_LE(worst_x, g.cell_w / 2);
  EXPECT_LE(worst_y, g.cell_h / 2);
}

TEST(Quantize, StrictModeNamesTheAxis) {
  const GridSpec g = square_grid(4);
  try {
    quantize_point(g, {50, 120}, Bounds::strict);
    FAIL() << "expected RangeError";
  } catch (const RangeError& e) {
    EXPECT_NE(std::string(e.what()).find("y="), std::string::npos) << e.what();
  }
  EXPECT_THROW(quantize_point(g, {-0.1, 50}, Bounds::strict), RangeError);
}

TEST(Quantize, ClampModeCounts) {
  const GridSpec g = square_grid(4);
  ClampCounter n;
  EXPECT_EQ(quantize_point(g, {-5, 50}, Bounds::clamp, &n).value, 8u);
  EXPECT_EQ(quantize_point(g, {150, 150}, Bounds::clamp, &n).value, 15u);
  EXPECT_EQ(quantize_point(g, {50, 50}, Bounds::clamp, &n).value, 10u);
  EXPECT_EQ(n.count(), 2u);
}

TEST(CellCenter, Arithmetic) {
  const GridSpec g = square_grid(4);
  EXPECT_EQ(cell_center(g, CellIndex{0}), (Point2{12.5, 12.5}));
  EXPECT_EQ(cell_center(g, CellIndex{15}), (Point2{87.5, 87.5}));
  EXPECT_THROW(cell_center(g, CellIndex{16}), RangeError);
}

TEST(CellCenter, RoundTripsThroughQuantize) {
  for (const GridSpec& g : {square_grid(4), GridSpec{18, 36, {0, 0}, 1, 1, 0}, GridSpec{3, 5, {-2, 7}, 0.3, 2.5, 0}})
    for (std::size_t i = 0; i < g.num_cells(); ++i) {
      EXPECT_EQ(quantize_point(g, cell_center(g, CellIndex{i})).value, i);
      EXPECT_EQ(cell_at(g, row_of(g, CellIndex{i}), col_of(g, CellIndex{i})).value, i);
    }
}

TEST(OffsetTargets, Values) {
  const GridSpec g = square_grid(4);
  const auto t = offset_targets<double>(g, {10, 10});
  EXPECT_EQ(t.shape(), (Shape{4, 4, 2}));
  EXPECT_DOUBLE_EQ(t.at(1, 1, 0), -27.5);
  EXPECT_DOUBLE_EQ(t.at(1, 1, 1), -27.5);
  const auto z = offset_targets<double>(g, {12.5, 12.5});
  EXPECT_EQ(z.at(0, 0, 0), 0.0);
  EXPECT_EQ(z.at(0, 0, 1), 0.0);
}

TEST(OffsetTargets, TrueCellWithinHalfExtent) {
  const GridSpec g{6, 9, {1, 1}, 2.0, 0.5, 0};
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> ux(1, 1 + g.width()), uy(1, 1 + g.height());
  for (int i = 0; i < 200; ++i) {
    const Point2 p{ux(rng), uy(rng)};
    const auto t = offset_targets<double>(g, p);
    const CellIndex c = quantize_point(g, p);
    EXPECT_LE(std::abs(t[c.value * 2]), g.cell_w / 2);
    EXPECT_LE(std::abs(t[c.value * 2 + 1]), g.cell_h / 2);
  }
}

TEST(Neighbors, CenterAndCorner) {
  const GridSpec g{3, 3, {0, 0}, 1, 1, 0};
  std::vector<std::size_t> center, corner;
  for (auto c : neighbor_list(g, CellIndex{4})) center.push_back(c.value);
  for (auto c : neighbor_list(g, CellIndex{0})) corner.push_back(c.value);
  EXPECT_EQ(center, (std::vector<std::size_t>{0, 1, 2, 3, 5, 6, 7, 8}));
  EXPECT_EQ(corner, (std::vector<std::size_t>{1, 3, 4}));
}

TEST(Neighbors, SymmetricIrreflexiveDegrees) {
  const GridSpec g{5, 7, {0, 0}, 1, 1, 0};
  std::set<std::pair<std::size_t, std::size_t>> edges;
  for (std::size_t i = 0; i < g.num_cells(); ++i) {
    const auto nb = neighbor_list(g, CellIndex{i});
    EXPECT_TRUE(nb.size() == 3 || nb.size() == 5 || nb.size() == 8);
    EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end()));
    for (auto j : nb) {
      EXPECT_NE(j.value, i);
      edges.insert({i, j.value});
    }
  }
  for (auto [a, b] : edges) EXPECT_TRUE(edges.count({b, a})) << a << "-" << b;
}

TEST(Neighbors, TableMatchesList) {
  const GridSpec g{4, 6, {0, 0}, 1, 1, 0};
  const auto t = NeighborTable::of(g);
  for (std::size_t i = 0; i < g.num_cells(); ++i) {
    const auto nb = neighbor_list(g, CellIndex{i});
    ASSERT_EQ(t.degree(i), nb.size());
    for (std::size_t k = 0; k < nb.size(); ++k) EXPECT_EQ(t.indices[t.offsets[i] + k], nb[k].value);
  }
  EXPECT_EQ(NeighborTable::moore(1, 1).degree(0), 0u);
}

TEST(Rescale, FineToCoarseContainsCenter) {
  const GridSpec fine{18, 36, {0, 0}, 1, 1, 0};
  const GridSpec coarse = halved(fine);
  EXPECT_EQ(coarse.rows, 9u);
  EXPECT_EQ(coarse.cols, 18u);
  for (std::size_t i = 0; i < fine.num_cells(); ++i) {
    const CellIndex c = rescale_cell(fine, coarse, CellIndex{i});
    EXPECT_EQ(c, quantize_point(coarse, cell_center(fine, CellIndex{i})));
    EXPECT_EQ(row_of(coarse, c), row_of(fine, CellIndex{i}) / 2);
    EXPECT_EQ(col_of(coarse, c), col_of(fine, CellIndex{i}) / 2);
    const CellIndex back = rescale_cell(coarse, fine, c);
    const Point2 a = cell_center(fine, CellIndex{i}), b = cell_center(fine, back);
    EXPECT_LE(std::abs(a.x - b.x), coarse.cell_w);
    EXPECT_LE(std::abs(a.y - b.y), coarse.cell_h);
  }
}

TEST(Rescale, IdentityAndMismatch) {
  const GridSpec g = square_grid(4);
  for (std::size_t i = 0; i < g.num_cells(); ++i) EXPECT_EQ(rescale_cell(g, g, CellIndex{i}).value, i);
  GridSpec other = g;
  other.origin.x = 1.0;
  EXPECT_THROW(rescale_cell(g, other, CellIndex{0}), ConfigError);
  EXPECT_THROW(halved(GridSpec{5, 4, {0, 0}, 1, 1, 0}), ConfigError);
}

TEST(GridSpec, Validation) {
  EXPECT_THROW(validate(GridSpec{1, 4, {0, 0}, 1, 1, 0}), ConfigError);
  EXPECT_THROW(validate(GridSpec{4, 4, {0, 0}, 0, 1, 0}), ConfigError);
  EXPECT_NO_THROW(validate(GridSpec{2, 2, {0, 0}, 1, 1, 0}));
}
