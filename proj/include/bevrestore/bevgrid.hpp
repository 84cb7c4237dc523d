#pragma once

// BEV scope/resolution algebra: pixel <-> world mapping, per-pixel coverage,
// pooled coverage and scale-factor scope derivation.
//
// Conventions:
//   * u is the column index (X axis), v is the row index (Y axis).
//   * cells are half-open: pixel (u, v) owns [lb_x + u*r_x, lb_x + (u+1)*r_x)
//     on X and likewise on Y, so a point on a shared edge belongs to the
//     cell on the right / below.

#include <cmath>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>

#include "bevrestore/errors.hpp"

namespace bevrestore {

struct Point2 {
  double x = 0.0;
  double y = 0.0;
};

struct PixelCoord {
  int u = 0;
  int v = 0;
  friend bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

struct Rect {
  double min_x = 0.0;
  double max_x = 0.0;
  double min_y = 0.0;
  double max_y = 0.0;

  double area() const { return (max_x - min_x) * (max_y - min_y); }
  Point2 center() const { return {0.5 * (min_x + max_x), 0.5 * (min_y + max_y)}; }
  bool contains(Point2 p) const {
    return p.x >= min_x && p.x < max_x && p.y >= min_y && p.y < max_y;
  }
  friend bool operator==(const Rect&, const Rect&) = default;
};

// Pooling kernel: the contiguous offset block {0..size_u-1} x {0..size_v-1},
// anchored at the pooled pixel's top-left member.
struct Kernel2 {
  int size_u = 1;
  int size_v = 1;

  Kernel2() = default;
  Kernel2(int su, int sv) : size_u(su), size_v(sv) {
    if (su < 1 || sv < 1) throw ConfigError("kernel sizes must be positive");
  }
  static Kernel2 square(int s) { return Kernel2(s, s); }
};

namespace detail {

// Exact-division check for (ub - lb) / r, tolerant to the rounding error of
// decimal inputs such as 0.1.
inline int exact_cells(double lb, double ub, double r, const char* axis) {
  if (!(ub > lb)) {
    throw ConfigError(std::string("scope upper bound must exceed lower bound on ") + axis);
  }
  if (!(r > 0.0)) {
    throw ConfigError(std::string("scope resolution must be positive on ") + axis);
  }
  const double cells = (ub - lb) / r;
  const double rounded = std::round(cells);
  if (rounded < 1.0 || std::abs(cells - rounded) > 1e-9 * std::max(1.0, cells)) {
    std::ostringstream os;
    os << "scope extent " << (ub - lb) << " is not a multiple of resolution " << r << " on "
       << axis;
    throw ConfigError(os.str());
  }
  return static_cast<int>(rounded);
}

}  // namespace detail

class BevScope {
 public:
  BevScope() : BevScope(-1.0, 1.0, -1.0, 1.0, 1.0, 1.0) {}

  BevScope(double lb_x, double ub_x, double lb_y, double ub_y, double r_x, double r_y)
      : lb_x_(lb_x), ub_x_(ub_x), lb_y_(lb_y), ub_y_(ub_y), r_x_(r_x), r_y_(r_y) {
    width_ = detail::exact_cells(lb_x, ub_x, r_x, "x");
    depth_ = detail::exact_cells(lb_y, ub_y, r_y, "y");
  }

  // Square window [lb, ub) on both axes with one resolution.
  static BevScope square(double lb, double ub, double r) { return BevScope(lb, ub, lb, ub, r, r); }

  double lb_x() const { return lb_x_; }
  double ub_x() const { return ub_x_; }
  double lb_y() const { return lb_y_; }
  double ub_y() const { return ub_y_; }
  double r_x() const { return r_x_; }
  double r_y() const { return r_y_; }

  // Grid columns (X) and rows (Y).
  int width() const { return width_; }
  int depth() const { return depth_; }
  std::int64_t cells() const { return static_cast<std::int64_t>(width_) * depth_; }

  Rect window() const { return {lb_x_, ub_x_, lb_y_, ub_y_}; }
  bool contains(Point2 p) const {
    return p.x >= lb_x_ && p.x < ub_x_ && p.y >= lb_y_ && p.y < ub_y_;
  }
  bool contains(PixelCoord u) const { return u.u >= 0 && u.u < width_ && u.v >= 0 && u.v < depth_; }

  // Lower corner of column u / row v. Kept as a single expression so that
  // grids at different resolutions agree bit-for-bit on shared corners.
  double x_at(int u) const { return lb_x_ + static_cast<double>(u) * r_x_; }
  double y_at(int v) const { return lb_y_ + static_cast<double>(v) * r_y_; }

  friend bool operator==(const BevScope& a, const BevScope& b) {
    return a.lb_x_ == b.lb_x_ && a.ub_x_ == b.ub_x_ && a.lb_y_ == b.lb_y_ && a.ub_y_ == b.ub_y_ &&
           a.r_x_ == b.r_x_ && a.r_y_ == b.r_y_;
  }

  std::string str() const {
    std::ostringstream os;
    os << "(" << lb_x_ << "," << ub_x_ << "," << lb_y_ << "," << ub_y_ << "," << r_x_ << ","
       << r_y_ << ")";
    return os.str();
  }

 private:
  double lb_x_, ub_x_, lb_y_, ub_y_, r_x_, r_y_;
  int width_ = 0;
  int depth_ = 0;
};

inline Rect pixel_coverage(PixelCoord u, const BevScope& scope) {
  if (!scope.contains(u)) {
    std::ostringstream os;
    os << "pixel (" << u.u << "," << u.v << ") outside " << scope.width() << "x" << scope.depth()
       << " grid";
    throw BoundsError(os.str());
  }
  return {scope.x_at(u.u), scope.x_at(u.u + 1), scope.y_at(u.v), scope.y_at(u.v + 1)};
}

namespace detail {

inline int locate(double p, double lb, double r, int n, double (BevScope::*at)(int) const,
                  const BevScope& scope) {
  int i = static_cast<int>(std::floor((p - lb) / r));
  if (i < 0) i = 0;
  if (i > n - 1) i = n - 1;
  // floor of the quotient can be off by one near cell edges; settle it
  // against the same corner expression pixel_coverage uses.
  while (i > 0 && p < (scope.*at)(i)) --i;
  while (i < n - 1 && p >= (scope.*at)(i + 1)) ++i;
  return i;
}

}  // namespace detail

// Non-throwing variant used where out-of-scope points are simply dropped.
inline std::optional<PixelCoord> try_world_to_pixel(Point2 p, const BevScope& scope) {
  if (!std::isfinite(p.x) || !std::isfinite(p.y) || !scope.contains(p)) return std::nullopt;
  const int u = detail::locate(p.x, scope.lb_x(), scope.r_x(), scope.width(), &BevScope::x_at, scope);
  const int v = detail::locate(p.y, scope.lb_y(), scope.r_y(), scope.depth(), &BevScope::y_at, scope);
  return PixelCoord{u, v};
}

inline PixelCoord world_to_pixel(Point2 p, const BevScope& scope) {
  auto u = try_world_to_pixel(p, scope);
  if (!u) {
    std::ostringstream os;
    os << "point (" << p.x << "," << p.y << ") outside scope " << scope.str();
    throw OutOfScopeError(os.str());
  }
  return *u;
}

struct PooledCoverage {
  Rect rect;
  double r_x = 0.0;
  double r_y = 0.0;
};

// Coverage of pooled pixel u: the union of its |k_u| x |k_v| member cells,
// together with the pooled resolution r' = (r_x * |k_u|, r_y * |k_v|).
inline PooledCoverage pooled_coverage(PixelCoord u, const BevScope& scope, const Kernel2& k) {
  if (scope.width() % k.size_u != 0 || scope.depth() % k.size_v != 0) {
    std::ostringstream os;
    os << "grid " << scope.width() << "x" << scope.depth() << " not divisible by kernel "
       << k.size_u << "x" << k.size_v;
    throw ConfigError(os.str());
  }
  const int pooled_w = scope.width() / k.size_u;
  const int pooled_d = scope.depth() / k.size_v;
  if (u.u < 0 || u.u >= pooled_w || u.v < 0 || u.v >= pooled_d) {
    std::ostringstream os;
    os << "pooled pixel (" << u.u << "," << u.v << ") outside " << pooled_w << "x" << pooled_d
       << " pooled grid";
    throw BoundsError(os.str());
  }
  const int u0 = u.u * k.size_u;
  const int v0 = u.v * k.size_v;
  PooledCoverage out;
  out.rect = {scope.x_at(u0), scope.x_at(u0 + k.size_u), scope.y_at(v0), scope.y_at(v0 + k.size_v)};
  out.r_x = scope.r_x() * k.size_u;
  out.r_y = scope.r_y() * k.size_v;
  return out;
}

inline BevScope downscale_scope(const BevScope& scope, int s) {
  if (s < 1) throw ConfigError("scale factor must be a positive integer");
  if (scope.width() % s != 0 || scope.depth() % s != 0) {
    std::ostringstream os;
    os << "grid " << scope.width() << "x" << scope.depth() << " not divisible by scale " << s;
    throw ConfigError(os.str());
  }
  if (s == 1) return scope;
  return BevScope(scope.lb_x(), scope.ub_x(), scope.lb_y(), scope.ub_y(), scope.r_x() * s,
                  scope.r_y() * s);
}

// Finer grid on the same window (resolution divided by s).
inline BevScope upscale_scope(const BevScope& scope, int s) {
  if (s < 1) throw ConfigError("scale factor must be a positive integer");
  if (s == 1) return scope;
  return BevScope(scope.lb_x(), scope.ub_x(), scope.lb_y(), scope.ub_y(), scope.r_x() / s,
                  scope.r_y() / s);
}

}  // namespace bevrestore
