#include <gtest/gtest.h>

#include <algorithm>
#include <vector>

#include "bevrestore/bevgrid.hpp"

using namespace bevrestore;

namespace {

const BevScope kHundred = BevScope::square(-50.0, 50.0, 0.5);
const BevScope kEight = BevScope::square(0.0, 8.0, 2.0);

}  // namespace

TEST(BevScope, GridDimensions) {
  EXPECT_EQ(kHundred.width(), 200);
  EXPECT_EQ(kHundred.depth(), 200);
  EXPECT_EQ(kEight.width(), 4);
  const BevScope rect(0.0, 10.0, -2.0, 2.0, 0.5, 1.0);
  EXPECT_EQ(rect.width(), 20);
  EXPECT_EQ(rect.depth(), 4);
}

TEST(BevScope, RejectsBadScopes) {
  EXPECT_THROW(BevScope::square(0.0, 10.0, 3.0), ConfigError);
  EXPECT_THROW(BevScope::square(5.0, 5.0, 1.0), ConfigError);
  EXPECT_THROW(BevScope::square(0.0, 4.0, 0.0), ConfigError);
  EXPECT_THROW(BevScope::square(0.0, 4.0, -1.0), ConfigError);
}

TEST(PixelCoverage, Examples) {
  EXPECT_EQ(pixel_coverage({0, 0}, kHundred), (Rect{-50.0, -49.5, -50.0, -49.5}));
  EXPECT_EQ(pixel_coverage({199, 0}, kHundred), (Rect{49.5, 50.0, -50.0, -49.5}));
  EXPECT_EQ(pixel_coverage({3, 2}, kEight), (Rect{6.0, 8.0, 4.0, 6.0}));
}

TEST(PixelCoverage, OutOfBounds) {
  EXPECT_THROW(pixel_coverage({200, 0}, kHundred), BoundsError);
  EXPECT_THROW(pixel_coverage({0, -1}, kHundred), BoundsError);
}

TEST(WorldToPixel, Examples) {
  EXPECT_EQ(world_to_pixel({-50.0, -50.0}, kHundred), (PixelCoord{0, 0}));
  EXPECT_EQ(world_to_pixel({-49.5, -50.0}, kHundred), (PixelCoord{1, 0}));
  EXPECT_EQ(world_to_pixel({7.9, 5.9}, kEight), (PixelCoord{3, 2}));
}

TEST(WorldToPixel, OutsideWindow) {
  EXPECT_THROW(world_to_pixel({50.0, 0.0}, kHundred), OutOfScopeError);
  EXPECT_THROW(world_to_pixel({0.0, -50.01}, kHundred), OutOfScopeError);
  EXPECT_FALSE(try_world_to_pixel({8.0, 1.0}, kEight).has_value());
}

TEST(WorldToPixel, RoundTripThroughCenters) {
  for (const BevScope& s : {kHundred, kEight, BevScope(-3.2, 4.8, -1.0, 1.0, 0.1, 0.25)})
    for (int v = 0; v < s.depth(); ++v)
      for (int u = 0; u < s.width(); ++u) {
        const PixelCoord p{u, v};
        ASSERT_EQ(world_to_pixel(pixel_coverage(p, s).center(), s), p);
      }
}

TEST(WorldToPixel, CellCornersBelongToTheirCell) {
  const BevScope s(-3.2, 4.8, -1.0, 1.0, 0.1, 0.25);
  for (int v = 0; v < s.depth(); ++v)
    for (int u = 0; u < s.width(); ++u) {
      const Rect r = pixel_coverage({u, v}, s);
      ASSERT_EQ(world_to_pixel({r.min_x, r.min_y}, s), (PixelCoord{u, v}));
    }
}

TEST(PixelCoverage, TilesTheWindow) {
  for (int n : {1, 3, 8, 32}) {
    const BevScope s = BevScope::square(-4.0, 4.0, 8.0 / n);
    double area = 0.0;
    std::vector<Rect> rects;
    for (int v = 0; v < s.depth(); ++v)
      for (int u = 0; u < s.width(); ++u) rects.push_back(pixel_coverage({u, v}, s));
    for (const auto& r : rects) area += r.area();
    EXPECT_NEAR(area, 64.0, 1e-9);
    for (std::size_t i = 0; i < rects.size(); ++i)
      for (std::size_t j = i + 1; j < rects.size(); ++j) {
        const Rect& a = rects[i];
        const Rect& b = rects[j];
        const bool disjoint = a.max_x <= b.min_x || b.max_x <= a.min_x || a.max_y <= b.min_y || b.max_y <= a.min_y;
        ASSERT_TRUE(disjoint) << i << " " << j;
      }
  }
}

TEST(PooledCoverage, Examples) {
  const auto p = pooled_coverage({0, 0}, kHundred, Kernel2::square(2));
  EXPECT_EQ(p.r_x, 1.0);
  EXPECT_EQ(p.r_y, 1.0);
  EXPECT_EQ(p.rect, (Rect{-50.0, -49.0, -50.0, -49.0}));

  const auto q = pooled_coverage({1, 0}, kEight, Kernel2(2, 1));
  EXPECT_EQ(q.r_x, 4.0);
  EXPECT_EQ(q.r_y, 2.0);
  EXPECT_EQ(q.rect, (Rect{4.0, 8.0, 0.0, 2.0}));
}

TEST(PooledCoverage, IdentityKernel) {
  for (int v = 0; v < 4; ++v)
    for (int u = 0; u < 4; ++u) {
      const auto p = pooled_coverage({u, v}, kEight, Kernel2::square(1));
      EXPECT_EQ(p.rect, pixel_coverage({u, v}, kEight));
      EXPECT_EQ(p.r_x, kEight.r_x());
    }
}

TEST(PooledCoverage, Errors) {
  EXPECT_THROW(pooled_coverage({0, 0}, kEight, Kernel2(3, 1)), ConfigError);
  EXPECT_THROW(pooled_coverage({2, 0}, kEight, Kernel2(2, 2)), BoundsError);
  EXPECT_THROW(Kernel2(0, 1), ConfigError);
}

TEST(Scope, Downscale) {
  EXPECT_EQ(downscale_scope(kHundred, 4), BevScope::square(-50.0, 50.0, 2.0));
  EXPECT_EQ(downscale_scope(kHundred, 8), BevScope::square(-50.0, 50.0, 4.0));
  EXPECT_EQ(downscale_scope(kHundred, 1), kHundred);
  EXPECT_THROW(downscale_scope(kHundred, 3), ConfigError);
  EXPECT_THROW(downscale_scope(kHundred, 0), ConfigError);
}

TEST(Scope, DownscaleComposes) {
  const BevScope s = BevScope::square(-16.0, 16.0, 0.5);
  for (int a : {1, 2, 4})
    for (int b : {1, 2, 4, 8}) {
      if (64 % (a * b) != 0) continue;
      EXPECT_EQ(downscale_scope(s, a * b), downscale_scope(downscale_scope(s, a), b));
    }
}

TEST(Scope, UpscaleInvertsDownscale) {
  const BevScope s = BevScope::square(-16.0, 16.0, 0.5);
  EXPECT_EQ(upscale_scope(downscale_scope(s, 4), 4), s);
}
