#pragma once

// Procedural vector urban scenes and their exact rasterization.
//
// A scene is a jittered grid of intersections ("nodes") joined by road
// segments ("edges"); class geometry (drivable, divider, walkway, crossing)
// is derived from the graph as polygons and width-buffered polylines.
// Rasters are produced by point sampling the vector geometry, never by
// resampling another raster, so every resolution is exact.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "bevrestore/bevgrid.hpp"
#include "bevrestore/errors.hpp"
#include "bevrestore/sensors.hpp"
#include "bevrestore/tensor.hpp"

namespace bevrestore {

enum class SemanticClass : int { kDrivable = 0, kDivider = 1, kWalkway = 2, kCrossing = 3 };
inline constexpr int kNumClasses = 4;
inline constexpr std::array<const char*, kNumClasses> kClassNames = {"drivable", "divider", "walkway",
                                                                      "crossing"};

inline SemanticClass parse_class(const std::string& s) {
  for (int i = 0; i < kNumClasses; ++i)
    if (s == kClassNames[static_cast<std::size_t>(i)]) return static_cast<SemanticClass>(i);
  throw IoError("unknown semantic class '" + s + "'");
}

struct SceneEdge {
  int a = 0, b = 0;
  double width = 0.0;
  friend bool operator==(const SceneEdge&, const SceneEdge&) = default;
};

struct ScenePolygon {
  SemanticClass cls = SemanticClass::kDrivable;
  std::vector<Point2> pts;
};

struct ScenePolyline {
  SemanticClass cls = SemanticClass::kDivider;
  double width = 0.0;
  std::vector<Point2> pts;
};

// Oriented obstacle box (building, parked vehicle) used for occlusion.
struct ObstacleBox {
  double cx = 0.0, cy = 0.0;
  double hx = 1.0, hy = 1.0;  // half extents along the box axes
  double yaw = 0.0;           // radians
  double height = 3.0;
};

inline bool operator==(const Point2& a, const Point2& b) { return a.x == b.x && a.y == b.y; }
inline bool operator==(const ScenePolygon& a, const ScenePolygon& b) { return a.cls == b.cls && a.pts == b.pts; }
inline bool operator==(const ScenePolyline& a, const ScenePolyline& b) {
  return a.cls == b.cls && a.width == b.width && a.pts == b.pts;
}
inline bool operator==(const ObstacleBox& a, const ObstacleBox& b) {
  return a.cx == b.cx && a.cy == b.cy && a.hx == b.hx && a.hy == b.hy && a.yaw == b.yaw && a.height == b.height;
}

struct VectorScene {
  double bound = 20.0;  // all geometry inside [-bound, bound]^2
  std::uint64_t seed = 0;
  std::vector<Point2> nodes;
  std::vector<SceneEdge> edges;
  std::vector<ScenePolygon> polygons;
  std::vector<ScenePolyline> polylines;
  std::vector<ObstacleBox> boxes;

  friend bool operator==(const VectorScene&, const VectorScene&) = default;
};

struct SceneParams {
  double bound = 20.0;
  int grid_min = 2;  // nodes per axis, drawn uniformly in [grid_min, grid_max]
  int grid_max = 4;
  double jitter = 2.0;
  double road_width_min = 5.0;
  double road_width_max = 9.0;
  double prune_prob = 0.3;
  double divider_width = 0.5;
  double walkway_width = 2.0;
  double crossing_prob = 0.5;
  double crossing_depth = 3.0;
  int boxes = 10;
  double box_size_min = 1.5;
  double box_size_max = 5.0;
  double box_height_min = 2.0;
  double box_height_max = 8.0;

  void validate() const {
    if (grid_min < 1 || grid_max < grid_min) throw ConfigError("scene grid range is empty");
    if (grid_max < 2 && grid_min < 2) throw ConfigError("scene needs at least two nodes per axis");
    if (!(bound > 0.0)) throw ConfigError("scene bound must be positive");
    if (!(road_width_min > 0.0) || road_width_max < road_width_min) throw ConfigError("bad road width range");
    if (!(divider_width > 0.0) || !(walkway_width > 0.0)) throw ConfigError("widths must be positive");
    if (prune_prob < 0.0 || prune_prob > 1.0) throw ConfigError("prune_prob must be in [0,1]");
    if (crossing_prob < 0.0 || crossing_prob > 1.0) throw ConfigError("crossing_prob must be in [0,1]");
    if (boxes < 0) throw ConfigError("box count must be non-negative");
  }
};

// ---------------------------------------------------------------------------
// Geometry predicates.

namespace geom {

inline bool point_in_polygon(const std::vector<Point2>& poly, Point2 p) {
  bool inside = false;
  const std::size_t n = poly.size();
  for (std::size_t i = 0, j = n - 1; i < n; j = i++) {
    const Point2& a = poly[i];
    const Point2& b = poly[j];
    if ((a.y > p.y) != (b.y > p.y)) {
      const double xc = (b.x - a.x) * (p.y - a.y) / (b.y - a.y) + a.x;
      if (p.x < xc) inside = !inside;
    }
  }
  return inside;
}

inline double dist_to_segment(Point2 p, Point2 a, Point2 b) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0.0 ? ((p.x - a.x) * dx + (p.y - a.y) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  const double ex = a.x + t * dx - p.x, ey = a.y + t * dy - p.y;
  return std::sqrt(ex * ex + ey * ey);
}

inline bool point_on_polyline(const ScenePolyline& pl, Point2 p) {
  const double hw = 0.5 * pl.width;
  if (pl.pts.size() == 1) return dist_to_segment(p, pl.pts[0], pl.pts[0]) < hw;
  for (std::size_t i = 0; i + 1 < pl.pts.size(); ++i)
    if (dist_to_segment(p, pl.pts[i], pl.pts[i + 1]) < hw) return true;
  return false;
}

// Rectangle around segment a->b with half-width hw, trimmed by `trim_a` and
// `trim_b` along the segment and offset sideways by `offset` (left positive).
inline std::vector<Point2> segment_rect(Point2 a, Point2 b, double hw, double trim_a = 0.0,
                                        double trim_b = 0.0, double offset = 0.0) {
  const double dx = b.x - a.x, dy = b.y - a.y;
  const double len = std::sqrt(dx * dx + dy * dy);
  const double ux = dx / len, uy = dy / len;
  const double nx = -uy, ny = ux;
  const Point2 s{a.x + ux * trim_a + nx * offset, a.y + uy * trim_a + ny * offset};
  const Point2 e{b.x - ux * trim_b + nx * offset, b.y - uy * trim_b + ny * offset};
  return {{s.x - nx * hw, s.y - ny * hw},
          {e.x - nx * hw, e.y - ny * hw},
          {e.x + nx * hw, e.y + ny * hw},
          {s.x + nx * hw, s.y + ny * hw}};
}

// Distance along the ray (ox,oy)+t(dx,dy), t >= 0, to the first boundary of
// the box, or +inf when the ray misses. Direction need not be normalized;
// the result is in units of t.
inline double ray_box(double ox, double oy, double dx, double dy, const ObstacleBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double rx = ox - b.cx, ry = oy - b.cy;
  const double lox = c * rx + s * ry, loy = -s * rx + c * ry;
  const double ldx = c * dx + s * dy, ldy = -s * dx + c * dy;
  double t0 = -INFINITY, t1 = INFINITY;
  const double o[2] = {lox, loy}, d[2] = {ldx, ldy}, h[2] = {b.hx, b.hy};
  for (int k = 0; k < 2; ++k) {
    if (d[k] == 0.0) {
      if (o[k] < -h[k] || o[k] > h[k]) return INFINITY;
      continue;
    }
    double ta = (-h[k] - o[k]) / d[k], tb = (h[k] - o[k]) / d[k];
    if (ta > tb) std::swap(ta, tb);
    t0 = std::max(t0, ta);
    t1 = std::min(t1, tb);
  }
  if (t0 > t1 || t1 < 0.0) return INFINITY;
  return std::max(t0, 0.0);
}

inline bool point_in_box(Point2 p, const ObstacleBox& b) {
  const double c = std::cos(b.yaw), s = std::sin(b.yaw);
  const double rx = p.x - b.cx, ry = p.y - b.cy;
  return std::abs(c * rx + s * ry) <= b.hx && std::abs(-s * rx + c * ry) <= b.hy;
}

}  // namespace geom

// Bitmask of classes whose geometry contains p.
inline unsigned classes_at(const VectorScene& scene, Point2 p) {
  unsigned mask = 0;
  for (const auto& poly : scene.polygons)
    if (geom::point_in_polygon(poly.pts, p)) mask |= 1u << static_cast<int>(poly.cls);
  for (const auto& pl : scene.polylines)
    if (geom::point_on_polyline(pl, p)) mask |= 1u << static_cast<int>(pl.cls);
  return mask;
}

// ---------------------------------------------------------------------------
// Generation.

namespace detail {

struct UnionFind {
  std::vector<int> parent;
  explicit UnionFind(int n) : parent(static_cast<std::size_t>(n)) { std::iota(parent.begin(), parent.end(), 0); }
  int find(int x) {
    while (parent[static_cast<std::size_t>(x)] != x) {
      parent[static_cast<std::size_t>(x)] = parent[static_cast<std::size_t>(parent[static_cast<std::size_t>(x)])];
      x = parent[static_cast<std::size_t>(x)];
    }
    return x;
  }
  bool unite(int a, int b) {
    a = find(a);
    b = find(b);
    if (a == b) return false;
    parent[static_cast<std::size_t>(a)] = b;
    return true;
  }
};

inline bool connected_without(int n, const std::vector<SceneEdge>& edges, const std::vector<bool>& alive,
                              std::size_t skip) {
  UnionFind uf(n);
  int comps = n;
  for (std::size_t i = 0; i < edges.size(); ++i)
    if (alive[i] && i != skip && uf.unite(edges[i].a, edges[i].b)) --comps;
  return comps == 1;
}

}  // namespace detail

inline bool scene_graph_connected(const VectorScene& s) {
  detail::UnionFind uf(static_cast<int>(s.nodes.size()));
  int comps = static_cast<int>(s.nodes.size());
  for (const auto& e : s.edges)
    if (uf.unite(e.a, e.b)) --comps;
  return comps == 1;
}

inline VectorScene generate_scene(std::uint64_t seed, const SceneParams& params) {
  params.validate();
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };
  auto uniform_int = [&](int lo, int hi) {
    return lo + static_cast<int>(std::min<double>(hi - lo, std::floor(unit(rng) * (hi - lo + 1))));
  };

  VectorScene sc;
  sc.seed = seed;
  sc.bound = params.bound;
  const int nx = std::max(uniform_int(params.grid_min, params.grid_max), 1);
  const int ny = std::max(uniform_int(params.grid_min, params.grid_max), 1);
  if (nx * ny < 2) throw ConfigError("scene needs at least two nodes");
  const double span = 2.0 * params.bound;
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      const double x = -params.bound + (i + 0.5) * span / nx + uniform(-params.jitter, params.jitter);
      const double y = -params.bound + (j + 0.5) * span / ny + uniform(-params.jitter, params.jitter);
      sc.nodes.push_back({x, y});
    }
  auto id = [nx](int i, int j) { return j * nx + i; };
  for (int j = 0; j < ny; ++j)
    for (int i = 0; i < nx; ++i) {
      if (i + 1 < nx) sc.edges.push_back({id(i, j), id(i + 1, j), 0.0});
      if (j + 1 < ny) sc.edges.push_back({id(i, j), id(i, j + 1), 0.0});
    }
  for (auto& e : sc.edges) e.width = uniform(params.road_width_min, params.road_width_max);

  // Random pruning in a shuffled order, never disconnecting the graph.
  std::vector<bool> alive(sc.edges.size(), true);
  std::vector<std::size_t> order(sc.edges.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const int n_nodes = static_cast<int>(sc.nodes.size());
  for (std::size_t idx : order) {
    if (unit(rng) >= params.prune_prob) continue;
    if (detail::connected_without(n_nodes, sc.edges, alive, idx)) alive[idx] = false;
  }
  std::vector<SceneEdge> kept;
  for (std::size_t i = 0; i < sc.edges.size(); ++i)
    if (alive[i]) kept.push_back(sc.edges[i]);
  sc.edges = std::move(kept);

  // Half-size of each intersection square.
  std::vector<double> node_half(sc.nodes.size(), 0.0);
  std::vector<int> degree(sc.nodes.size(), 0);
  for (const auto& e : sc.edges) {
    for (int n : {e.a, e.b}) {
      node_half[static_cast<std::size_t>(n)] = std::max(node_half[static_cast<std::size_t>(n)], 0.5 * e.width);
      ++degree[static_cast<std::size_t>(n)];
    }
  }

  for (std::size_t n = 0; n < sc.nodes.size(); ++n) {
    if (degree[n] == 0) continue;
    const Point2 c = sc.nodes[n];
    const double h = node_half[n];
    sc.polygons.push_back({SemanticClass::kDrivable, {{c.x - h, c.y - h}, {c.x + h, c.y - h}, {c.x + h, c.y + h}, {c.x - h, c.y + h}}});
  }
  const double ww = params.walkway_width;
  for (const auto& e : sc.edges) {
    const Point2 a = sc.nodes[static_cast<std::size_t>(e.a)];
    const Point2 b = sc.nodes[static_cast<std::size_t>(e.b)];
    const double ha = node_half[static_cast<std::size_t>(e.a)];
    const double hb = node_half[static_cast<std::size_t>(e.b)];
    sc.polygons.push_back({SemanticClass::kDrivable, geom::segment_rect(a, b, 0.5 * e.width)});
    // Divider along the centerline, between the intersection squares.
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double len = std::sqrt(dx * dx + dy * dy);
    if (len > ha + hb + 1.0) {
      const double ux = dx / len, uy = dy / len;
      sc.polylines.push_back({SemanticClass::kDivider, params.divider_width,
                              {{a.x + ux * ha, a.y + uy * ha}, {b.x - ux * hb, b.y - uy * hb}}});
    }
    // Walkways on both borders, stopping short of the intersections.
    if (len > ha + hb + 2.0 * ww + 1.0) {
      for (double side : {-1.0, 1.0}) {
        sc.polygons.push_back({SemanticClass::kWalkway,
                               geom::segment_rect(a, b, 0.5 * ww, ha + ww, hb + ww, side * (0.5 * e.width + 0.5 * ww))});
      }
    }
  }
  // Pedestrian crossings across every road entering a chosen intersection.
  for (std::size_t n = 0; n < sc.nodes.size(); ++n) {
    if (degree[n] < 2 || unit(rng) >= params.crossing_prob) continue;
    for (const auto& e : sc.edges) {
      if (e.a != static_cast<int>(n) && e.b != static_cast<int>(n)) continue;
      const Point2 c = sc.nodes[n];
      const Point2 o = sc.nodes[static_cast<std::size_t>(e.a == static_cast<int>(n) ? e.b : e.a)];
      const double h = node_half[n];
      const double dx = o.x - c.x, dy = o.y - c.y;
      const double len = std::sqrt(dx * dx + dy * dy);
      if (len < h + params.crossing_depth + 1.0) continue;
      const Point2 s{c.x + dx / len * h, c.y + dy / len * h};
      const Point2 t{c.x + dx / len * (h + params.crossing_depth), c.y + dy / len * (h + params.crossing_depth)};
      sc.polygons.push_back({SemanticClass::kCrossing, geom::segment_rect(s, t, 0.5 * e.width)});
    }
  }

  // Obstacles off the road network (rejection sampling, bounded attempts).
  auto clear_of_roads = [&](const ObstacleBox& bx) {
    const double r = std::sqrt(bx.hx * bx.hx + bx.hy * bx.hy);
    for (const auto& e : sc.edges) {
      const double d = geom::dist_to_segment({bx.cx, bx.cy}, sc.nodes[static_cast<std::size_t>(e.a)],
                                             sc.nodes[static_cast<std::size_t>(e.b)]);
      if (d < r + 0.5 * e.width + ww + 0.5) return false;
    }
    for (std::size_t n = 0; n < sc.nodes.size(); ++n) {
      const double ddx = bx.cx - sc.nodes[n].x, ddy = bx.cy - sc.nodes[n].y;
      if (std::sqrt(ddx * ddx + ddy * ddy) < r + node_half[n] * std::sqrt(2.0) + ww) return false;
    }
    // Keep the sensor origin free.
    if (std::sqrt(bx.cx * bx.cx + bx.cy * bx.cy) < r + 1.0) return false;
    return true;
  };
  for (int attempt = 0; attempt < 40 * params.boxes && static_cast<int>(sc.boxes.size()) < params.boxes; ++attempt) {
    ObstacleBox bx;
    bx.hx = 0.5 * uniform(params.box_size_min, params.box_size_max);
    bx.hy = 0.5 * uniform(params.box_size_min, params.box_size_max);
    bx.cx = uniform(-params.bound + bx.hx, params.bound - bx.hx);
    bx.cy = uniform(-params.bound + bx.hy, params.bound - bx.hy);
    bx.yaw = uniform(-0.3, 0.3);
    bx.height = uniform(params.box_height_min, params.box_height_max);
    if (clear_of_roads(bx)) sc.boxes.push_back(bx);
  }
  return sc;
}

// ---------------------------------------------------------------------------
// Text format.
//
//   bound B
//   seed N
//   node x y
//   edge i j width
//   poly CLASS x1 y1 x2 y2 ...
//   line CLASS width x1 y1 x2 y2 ...
//   box cx cy hx hy yaw height
//   # comment

inline void write_scene(std::ostream& out, const VectorScene& s) {
  out << std::setprecision(17);
  out << "# vector scene\n";
  out << "bound " << s.bound << "\n";
  out << "seed " << s.seed << "\n";
  for (const auto& n : s.nodes) out << "node " << n.x << " " << n.y << "\n";
  for (const auto& e : s.edges) out << "edge " << e.a << " " << e.b << " " << e.width << "\n";
  for (const auto& p : s.polygons) {
    out << "poly " << kClassNames[static_cast<std::size_t>(p.cls)];
    for (const auto& q : p.pts) out << " " << q.x << " " << q.y;
    out << "\n";
  }
  for (const auto& p : s.polylines) {
    out << "line " << kClassNames[static_cast<std::size_t>(p.cls)] << " " << p.width;
    for (const auto& q : p.pts) out << " " << q.x << " " << q.y;
    out << "\n";
  }
  for (const auto& b : s.boxes)
    out << "box " << b.cx << " " << b.cy << " " << b.hx << " " << b.hy << " " << b.yaw << " " << b.height << "\n";
}

inline VectorScene parse_scene(std::istream& in) {
  VectorScene s;
  std::string line;
  int lineno = 0;
  auto fail = [&lineno](const std::string& why) {
    throw IoError("scene line " + std::to_string(lineno) + ": " + why);
  };
  auto read_points = [&](std::istringstream& ls) {
    std::vector<Point2> pts;
    double x, y;
    while (ls >> x) {
      if (!(ls >> y)) fail("odd coordinate count");
      pts.push_back({x, y});
    }
    if (!ls.eof()) fail("bad coordinate");
    if (pts.empty()) fail("no coordinates");
    return pts;
  };
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "bound") {
      if (!(ls >> s.bound)) fail("bad bound");
    } else if (tag == "seed") {
      if (!(ls >> s.seed)) fail("bad seed");
    } else if (tag == "node") {
      Point2 p;
      if (!(ls >> p.x >> p.y)) fail("bad node");
      s.nodes.push_back(p);
    } else if (tag == "edge") {
      SceneEdge e;
      if (!(ls >> e.a >> e.b >> e.width)) fail("bad edge");
      if (e.a < 0 || e.b < 0 || e.a >= static_cast<int>(s.nodes.size()) || e.b >= static_cast<int>(s.nodes.size()))
        fail("edge references unknown node");
      if (!(e.width > 0.0)) fail("edge width must be positive");
      s.edges.push_back(e);
    } else if (tag == "poly") {
      std::string cls;
      if (!(ls >> cls)) fail("missing class");
      ScenePolygon p{parse_class(cls), read_points(ls)};
      if (p.pts.size() < 3) fail("polygon needs three points");
      s.polygons.push_back(std::move(p));
    } else if (tag == "line") {
      std::string cls;
      ScenePolyline p;
      if (!(ls >> cls >> p.width)) fail("bad polyline header");
      if (!(p.width > 0.0)) fail("polyline width must be positive");
      p.cls = parse_class(cls);
      p.pts = read_points(ls);
      s.polylines.push_back(std::move(p));
    } else if (tag == "box") {
      ObstacleBox b;
      if (!(ls >> b.cx >> b.cy >> b.hx >> b.hy >> b.yaw >> b.height)) fail("bad box");
      s.boxes.push_back(b);
    } else {
      fail("unknown record '" + tag + "'");
    }
  }
  return s;
}

// ---------------------------------------------------------------------------
// Semantic maps.

struct SemanticMap {
  BevScope scope;
  std::vector<std::string> classes;
  std::vector<std::vector<std::uint8_t>> masks;  // per class, row-major (v, u)

  SemanticMap() = default;
  SemanticMap(const BevScope& s, std::vector<std::string> names) : scope(s), classes(std::move(names)) {
    masks.assign(classes.size(), std::vector<std::uint8_t>(static_cast<std::size_t>(scope.cells()), 0));
  }

  int width() const { return scope.width(); }
  int depth() const { return scope.depth(); }
  std::uint8_t at(std::size_t cls, int u, int v) const {
    return masks[cls][static_cast<std::size_t>(v) * scope.width() + u];
  }
  std::uint8_t& at(std::size_t cls, int u, int v) { return masks[cls][static_cast<std::size_t>(v) * scope.width() + u]; }

  // (d, w, classes) tensor of 0/1 values.
  Tensor to_tensor() const {
    Tensor t = Tensor::hwc(depth(), width(), static_cast<int>(classes.size()));
    for (std::size_t c = 0; c < classes.size(); ++c)
      for (std::size_t p = 0; p < masks[c].size(); ++p) t[p * classes.size() + c] = masks[c][p];
    return t;
  }

  double fraction(std::size_t cls) const {
    const auto& m = masks[cls];
    return static_cast<double>(std::count(m.begin(), m.end(), std::uint8_t{1})) / static_cast<double>(m.size());
  }

  friend bool operator==(const SemanticMap& a, const SemanticMap& b) {
    return a.scope == b.scope && a.classes == b.classes && a.masks == b.masks;
  }
};

inline std::vector<std::string> default_class_names() { return {kClassNames.begin(), kClassNames.end()}; }

// Each pixel samples the geometry at its owned corner (x_at(u), y_at(v)),
// the one point of the half-open cell shared with every coarser grid over
// the same window. A bit is 1 iff that point lies inside the class geometry.
inline SemanticMap rasterize(const VectorScene& scene, const BevScope& scope) {
  SemanticMap m(scope, default_class_names());
  const int W = scope.width(), D = scope.depth();
  auto col_range = [&](double lo, double hi) {
    const int a = std::max(0, static_cast<int>(std::floor((lo - scope.lb_x()) / scope.r_x())) - 1);
    const int b = std::min(W - 1, static_cast<int>(std::ceil((hi - scope.lb_x()) / scope.r_x())) + 1);
    return std::pair<int, int>{a, b};
  };
  auto row_range = [&](double lo, double hi) {
    const int a = std::max(0, static_cast<int>(std::floor((lo - scope.lb_y()) / scope.r_y())) - 1);
    const int b = std::min(D - 1, static_cast<int>(std::ceil((hi - scope.lb_y()) / scope.r_y())) + 1);
    return std::pair<int, int>{a, b};
  };
  auto bbox = [](const std::vector<Point2>& pts, double pad) {
    Rect r{INFINITY, -INFINITY, INFINITY, -INFINITY};
    for (const auto& p : pts) {
      r.min_x = std::min(r.min_x, p.x - pad);
      r.max_x = std::max(r.max_x, p.x + pad);
      r.min_y = std::min(r.min_y, p.y - pad);
      r.max_y = std::max(r.max_y, p.y + pad);
    }
    return r;
  };
  for (const auto& poly : scene.polygons) {
    const Rect bb = bbox(poly.pts, 0.0);
    const auto [u0, u1] = col_range(bb.min_x, bb.max_x);
    const auto [v0, v1] = row_range(bb.min_y, bb.max_y);
    auto& mask = m.masks[static_cast<std::size_t>(poly.cls)];
    for (int v = v0; v <= v1; ++v)
      for (int u = u0; u <= u1; ++u)
        if (geom::point_in_polygon(poly.pts, {scope.x_at(u), scope.y_at(v)}))
          mask[static_cast<std::size_t>(v) * W + u] = 1;
  }
  for (const auto& pl : scene.polylines) {
    const Rect bb = bbox(pl.pts, 0.5 * pl.width);
    const auto [u0, u1] = col_range(bb.min_x, bb.max_x);
    const auto [v0, v1] = row_range(bb.min_y, bb.max_y);
    auto& mask = m.masks[static_cast<std::size_t>(pl.cls)];
    for (int v = v0; v <= v1; ++v)
      for (int u = u0; u <= u1; ++u)
        if (geom::point_on_polyline(pl, {scope.x_at(u), scope.y_at(v)}))
          mask[static_cast<std::size_t>(v) * W + u] = 1;
  }
  return m;
}

// Picks pixel (s*u, s*v) of every s x s block: the HR pixel sharing the LR
// pixel's sample point.
inline SemanticMap subsample(const SemanticMap& hr, int s) {
  SemanticMap lr(downscale_scope(hr.scope, s), hr.classes);
  for (std::size_t c = 0; c < hr.classes.size(); ++c)
    for (int v = 0; v < lr.depth(); ++v)
      for (int u = 0; u < lr.width(); ++u) lr.at(c, u, v) = hr.at(c, s * u, s * v);
  return lr;
}

// fraction: soft LR target = share of the block's HR pixels that carry the
// class (average pooling of the HR masks).
enum class LabelPolicy { kMajority, kAny, kFraction };

inline LabelPolicy parse_label_policy(const std::string& s) {
  if (s == "majority") return LabelPolicy::kMajority;
  if (s == "any") return LabelPolicy::kAny;
  if (s == "fraction") return LabelPolicy::kFraction;
  throw ConfigError("unknown label policy '" + s + "'");
}

inline const char* to_string(LabelPolicy p) {
  switch (p) {
    case LabelPolicy::kMajority: return "majority";
    case LabelPolicy::kAny: return "any";
    case LabelPolicy::kFraction: return "fraction";
  }
  return "?";
}

namespace detail {
inline void check_label_block(const SemanticMap& hr, int s) {
  if (s < 1 || hr.width() % s != 0 || hr.depth() % s != 0) {
    throw ShapeError("lr_label: " + std::to_string(hr.width()) + "x" + std::to_string(hr.depth()) +
                     " map not divisible by " + std::to_string(s));
  }
}
}  // namespace detail

// s x s block reduction of every mask: majority (ties count as 1) or any-hit.
inline SemanticMap lr_label(const SemanticMap& hr, int s, LabelPolicy policy) {
  detail::check_label_block(hr, s);
  if (policy == LabelPolicy::kFraction) throw ConfigError("lr_label: fraction targets are not binary masks");
  SemanticMap lr(downscale_scope(hr.scope, s), hr.classes);
  for (std::size_t c = 0; c < hr.classes.size(); ++c)
    for (int v = 0; v < lr.depth(); ++v)
      for (int u = 0; u < lr.width(); ++u) {
        int n = 0;
        for (int j = 0; j < s; ++j)
          for (int i = 0; i < s; ++i) n += hr.at(c, s * u + i, s * v + j);
        lr.at(c, u, v) = policy == LabelPolicy::kAny ? (n > 0) : (2 * n >= s * s);
      }
  return lr;
}

// LR training target (d, w, classes) under any policy; fraction gives n / s^2.
inline Tensor lr_label_tensor(const SemanticMap& hr, int s, LabelPolicy policy) {
  if (policy != LabelPolicy::kFraction) return lr_label(hr, s, policy).to_tensor();
  detail::check_label_block(hr, s);
  const std::size_t k = hr.classes.size();
  const int d = hr.depth() / s, w = hr.width() / s;
  Tensor t = Tensor::hwc(d, w, static_cast<int>(k));
  for (std::size_t c = 0; c < k; ++c)
    for (int v = 0; v < d; ++v)
      for (int u = 0; u < w; ++u) {
        int n = 0;
        for (int j = 0; j < s; ++j)
          for (int i = 0; i < s; ++i) n += hr.at(c, s * u + i, s * v + j);
        t.at(v, u, static_cast<int>(c)) = static_cast<double>(n) / (s * s);
      }
  return t;
}

// Per-class binary PGM (P5, 0/255) named <stem>_<class>.pgm plus a text
// sidecar <stem>.txt carrying the scope and class order.
inline void write_semantic_map(const SemanticMap& m, const std::filesystem::path& dir, const std::string& stem) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream side(dir / (stem + ".txt"));
    if (!side) throw IoError("cannot write sidecar for '" + stem + "'");
    side << std::setprecision(17);
    side << "scope " << m.scope.lb_x() << " " << m.scope.ub_x() << " " << m.scope.lb_y() << " " << m.scope.ub_y()
         << " " << m.scope.r_x() << " " << m.scope.r_y() << "\n";
    side << "classes";
    for (const auto& c : m.classes) side << " " << c;
    side << "\n";
  }
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    std::ofstream f(dir / (stem + "_" + m.classes[c] + ".pgm"), std::ios::binary);
    if (!f) throw IoError("cannot write mask for class '" + m.classes[c] + "'");
    f << "P5\n" << m.width() << " " << m.depth() << "\n255\n";
    std::string row(m.masks[c].size(), '\0');
    for (std::size_t p = 0; p < row.size(); ++p) row[p] = m.masks[c][p] ? static_cast<char>(255) : '\0';
    f.write(row.data(), static_cast<std::streamsize>(row.size()));
  }
}

inline SemanticMap read_semantic_map(const std::filesystem::path& dir, const std::string& stem) {
  std::ifstream side(dir / (stem + ".txt"));
  if (!side) throw IoError("missing sidecar for '" + stem + "'");
  std::string tag;
  double v[6];
  if (!(side >> tag) || tag != "scope") throw IoError("sidecar: expected scope");
  for (double& x : v)
    if (!(side >> x)) throw IoError("sidecar: bad scope");
  if (!(side >> tag) || tag != "classes") throw IoError("sidecar: expected classes");
  std::string rest;
  std::getline(side, rest);
  std::istringstream cs(rest);
  std::vector<std::string> names;
  for (std::string n; cs >> n;) names.push_back(n);
  SemanticMap m(BevScope(v[0], v[1], v[2], v[3], v[4], v[5]), names);
  for (std::size_t c = 0; c < names.size(); ++c) {
    std::ifstream f(dir / (stem + "_" + names[c] + ".pgm"), std::ios::binary);
    if (!f) throw IoError("missing mask for class '" + names[c] + "'");
    std::string magic;
    int w = 0, h = 0, maxv = 0;
    f >> magic >> w >> h >> maxv;
    f.get();
    if (magic != "P5" || w != m.width() || h != m.depth() || maxv != 255) throw IoError("bad PGM header");
    std::string buf(static_cast<std::size_t>(w) * h, '\0');
    f.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("truncated PGM");
    for (std::size_t p = 0; p < buf.size(); ++p) {
      const auto b = static_cast<unsigned char>(buf[p]);
      if (b != 0 && b != 255) throw IoError("PGM mask values must be 0 or 255");
      m.masks[c][p] = b ? 1 : 0;
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Observation synthesis.

struct SensorPose {
  double x = 0.0, y = 0.0, yaw = 0.0;
  double height = 1.8;
};

struct LidarParams {
  int rays = 720;
  double max_range = 24.0;
  // Ground-hit ranges of the downward beams; each is cut short by obstacles.
  std::vector<double> ring_ranges{2.5, 3.5, 4.5, 5.5, 6.5, 7.5, 8.5, 9.5, 11.0, 12.5, 14.0, 15.5, 17.0, 18.5, 20.0, 22.0};
  double range_noise = 0.02;
  double height_noise = 0.02;
  double intensity_noise = 0.05;
  std::uint64_t seed = 0;
};

namespace detail {

// Ground height and return intensity of the surface class at a point.
inline std::pair<double, double> surface_response(unsigned mask) {
  auto has = [mask](SemanticClass c) { return (mask >> static_cast<int>(c)) & 1u; };
  if (has(SemanticClass::kCrossing)) return {0.0, 0.8};
  if (has(SemanticClass::kDivider)) return {0.0, 0.9};
  if (has(SemanticClass::kDrivable)) return {0.0, 0.2};
  if (has(SemanticClass::kWalkway)) return {0.15, 0.5};
  return {0.1, 0.35};
}

inline constexpr double kBoxIntensity = 0.6;

}  // namespace detail

// Planar ray casting with synthesized heights. Every azimuth fires one
// horizontal beam (obstacle hit or a ground return at max range) plus one
// downward beam per ring range, which hits the ground unless an obstacle
// comes first.
inline PointCloud simulate_lidar(const VectorScene& scene, const SensorPose& pose, const LidarParams& params) {
  PointCloud pc;
  pc.feature_dim = 1;
  std::mt19937_64 rng(params.seed ^ (scene.seed * 0x9E3779B97F4A7C15ULL));
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto noise = [&](double sigma) { return sigma > 0.0 ? sigma * gauss(rng) : 0.0; };
  for (int i = 0; i < params.rays; ++i) {
    const double th = pose.yaw + 2.0 * M_PI * i / params.rays;
    const double dx = std::cos(th), dy = std::sin(th);
    double t_box = INFINITY;
    for (const auto& b : scene.boxes) t_box = std::min(t_box, geom::ray_box(pose.x, pose.y, dx, dy, b));
    auto emit_ground = [&](double r) {
      const double rr = r + noise(params.range_noise);
      const Point2 p{pose.x + rr * dx, pose.y + rr * dy};
      const auto [z, inten] = detail::surface_response(classes_at(scene, p));
      pc.add({p.x, p.y, z + noise(params.height_noise)}, {inten + noise(params.intensity_noise)});
    };
    auto emit_box = [&](double r, double z) {
      const double rr = r + noise(params.range_noise);
      pc.add({pose.x + rr * dx, pose.y + rr * dy, z + noise(params.height_noise)},
             {detail::kBoxIntensity + noise(params.intensity_noise)});
    };
    if (t_box < params.max_range) {
      emit_box(t_box, pose.height);
    } else {
      emit_ground(params.max_range);
    }
    for (double ring : params.ring_ranges) {
      if (ring >= params.max_range) continue;
      if (t_box < ring) {
        emit_box(t_box, pose.height * (1.0 - t_box / ring));
      } else {
        emit_ground(ring);
      }
    }
  }
  return pc;
}

inline std::array<double, 3> class_color(unsigned mask) {
  auto has = [mask](SemanticClass c) { return (mask >> static_cast<int>(c)) & 1u; };
  if (has(SemanticClass::kCrossing)) return {0.9, 0.9, 0.6};
  if (has(SemanticClass::kDivider)) return {0.95, 0.95, 0.95};
  if (has(SemanticClass::kDrivable)) return {0.2, 0.2, 0.22};
  if (has(SemanticClass::kWalkway)) return {0.6, 0.6, 0.55};
  return {0.35, 0.3, 0.25};
}

inline constexpr std::array<double, 3> kSkyColor = {0.5, 0.7, 1.0};

// Renders the ground-plane classes seen by `cam`; rays that do not descend
// see sky. Output (image_h, image_w, 3) in [0, 1].
inline Tensor simulate_camera(const VectorScene& scene, const CameraModel& cam) {
  cam.validate();
  if (!(cam.translation[2] > 0.0)) throw ConfigError("camera must be above the ground plane");
  if (!(cam.optical_axis()[2] < 0.0)) throw ConfigError("degenerate camera pose: optical axis must point below the horizon");
  Tensor img = Tensor::hwc(cam.image_h, cam.image_w, 3);
  for (int r = 0; r < cam.image_h; ++r)
    for (int c = 0; c < cam.image_w; ++c) {
      const Vec3 d = cam.ray(c + 0.5, r + 0.5);
      std::array<double, 3> col = kSkyColor;
      if (d[2] < 0.0) {
        const double lam = -cam.translation[2] / d[2];
        const Point2 p{cam.translation[0] + lam * d[0], cam.translation[1] + lam * d[1]};
        col = class_color(classes_at(scene, p));
      }
      for (int k = 0; k < 3; ++k) img.at(r, c, k) = col[static_cast<std::size_t>(k)];
    }
  return img;
}

}  // namespace bevrestore
