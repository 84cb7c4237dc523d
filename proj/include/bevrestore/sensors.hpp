#pragma once

// Toy-scale sensor branches that emit LR BEV feature maps on a shared scope:
//   * LiDAR: voxelize -> Z-flatten -> small conv backbone (one 2x2 stride-2
//     step per halving from the voxel grid down to the LR grid).
//   * Camera: small conv backbone emitting features + depth logits, then a
//     lift-splat view transform into the BEV grid.

#include <array>
#include <cmath>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "bevrestore/arch.hpp"
#include "bevrestore/bevgrid.hpp"
#include "bevrestore/errors.hpp"
#include "bevrestore/ops.hpp"
#include "bevrestore/params.hpp"
#include "bevrestore/tape.hpp"
#include "bevrestore/tensor.hpp"

namespace bevrestore {

struct Point3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

struct PointCloud {
  std::vector<Point3> points;
  std::vector<double> features;  // row-major, feature_dim per point
  int feature_dim = 1;

  std::size_t size() const { return points.size(); }
  void add(Point3 p, std::initializer_list<double> f) {
    if (static_cast<int>(f.size()) != feature_dim) throw ShapeError("point feature width mismatch");
    points.push_back(p);
    features.insert(features.end(), f.begin(), f.end());
  }
  void add(Point3 p, const double* f) {
    points.push_back(p);
    features.insert(features.end(), f, f + feature_dim);
  }
  const double* feature(std::size_t i) const { return features.data() + i * feature_dim; }
};

// Text format: one point per line "x y z f...", '#' starts a comment.
inline PointCloud parse_point_cloud(std::istream& in) {
  PointCloud pc;
  pc.feature_dim = -1;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    std::vector<double> vals;
    double v;
    while (ls >> v) vals.push_back(v);
    if (!ls.eof()) throw IoError("point cloud line " + std::to_string(lineno) + ": not a number");
    if (vals.empty()) continue;
    if (vals.size() < 3) throw IoError("point cloud line " + std::to_string(lineno) + ": need x y z");
    const int f = static_cast<int>(vals.size()) - 3;
    if (pc.feature_dim < 0) pc.feature_dim = f;
    if (f != pc.feature_dim) {
      throw IoError("point cloud line " + std::to_string(lineno) + ": inconsistent feature count");
    }
    pc.points.push_back({vals[0], vals[1], vals[2]});
    pc.features.insert(pc.features.end(), vals.begin() + 3, vals.end());
  }
  if (pc.feature_dim < 0) pc.feature_dim = 0;
  return pc;
}

inline void write_point_cloud(std::ostream& out, const PointCloud& pc) {
  out.precision(17);
  out << "# x y z";
  for (int j = 0; j < pc.feature_dim; ++j) out << " f" << j;
  out << "\n";
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const auto& p = pc.points[i];
    out << p.x << " " << p.y << " " << p.z;
    for (int j = 0; j < pc.feature_dim; ++j) out << " " << pc.feature(i)[j];
    out << "\n";
  }
}

// ---------------------------------------------------------------------------
// Voxelization.

struct ZConfig {
  double z_min = -1.0;
  double z_max = 3.0;
  int z_bins = 4;
};

struct VoxelGrid {
  BevScope scope;
  ZConfig z;
  int feature_dim = 0;
  std::vector<int> counts;       // (v, u, zbin)
  std::vector<double> mean;      // (v, u, zbin, feature)
  std::size_t dropped = 0;

  std::size_t cell(int u, int v, int zb) const {
    return (static_cast<std::size_t>(v) * scope.width() + u) * z.z_bins + zb;
  }
  int count(int u, int v, int zb) const { return counts[cell(u, v, zb)]; }
  const double* mean_feature(int u, int v, int zb) const {
    return mean.data() + cell(u, v, zb) * feature_dim;
  }
  std::size_t total_count() const {
    std::size_t n = 0;
    for (int c : counts) n += static_cast<std::size_t>(c);
    return n;
  }
};

// Z bin of height z, or nullopt outside [z_min, z_max).
inline std::optional<int> z_bin(double z, const ZConfig& zc) {
  if (!std::isfinite(z) || z < zc.z_min || z >= zc.z_max) return std::nullopt;
  const double dz = (zc.z_max - zc.z_min) / zc.z_bins;
  int b = static_cast<int>(std::floor((z - zc.z_min) / dz));
  return std::min(std::max(b, 0), zc.z_bins - 1);
}

inline VoxelGrid voxelize(const PointCloud& pc, const BevScope& scope, const ZConfig& zc) {
  if (zc.z_bins < 1) throw ConfigError("z_bins must be >= 1");
  if (!(zc.z_max > zc.z_min)) throw ConfigError("z_max must exceed z_min");
  VoxelGrid vg;
  vg.scope = scope;
  vg.z = zc;
  vg.feature_dim = pc.feature_dim;
  const std::size_t ncell = static_cast<std::size_t>(scope.cells()) * zc.z_bins;
  vg.counts.assign(ncell, 0);
  vg.mean.assign(ncell * pc.feature_dim, 0.0);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const auto& p = pc.points[i];
    auto px = try_world_to_pixel({p.x, p.y}, scope);
    auto zb = z_bin(p.z, zc);
    if (!px || !zb) {
      ++vg.dropped;
      continue;
    }
    const std::size_t c = vg.cell(px->u, px->v, *zb);
    ++vg.counts[c];
    double* m = vg.mean.data() + c * pc.feature_dim;
    const double* f = pc.feature(i);
    for (int j = 0; j < pc.feature_dim; ++j) m[j] += f[j];
  }
  for (std::size_t c = 0; c < ncell; ++c) {
    if (vg.counts[c] == 0) continue;
    double* m = vg.mean.data() + c * pc.feature_dim;
    for (int j = 0; j < pc.feature_dim; ++j) m[j] /= vg.counts[c];
  }
  return vg;
}

// (d, w, z_bins * (1 + feature_dim)); per z bin: [count / max_count, mean...],
// z bins in ascending order.
inline Tensor flatten_z(const VoxelGrid& vg) {
  const int f = 1 + vg.feature_dim;
  const int zb = vg.z.z_bins;
  Tensor out = Tensor::hwc(vg.scope.depth(), vg.scope.width(), zb * f);
  int max_count = 0;
  for (int c : vg.counts) max_count = std::max(max_count, c);
  if (max_count == 0) return out;
  for (int v = 0; v < vg.scope.depth(); ++v)
    for (int u = 0; u < vg.scope.width(); ++u)
      for (int b = 0; b < zb; ++b) {
        const int n = vg.count(u, v, b);
        if (n == 0) continue;
        out.at(v, u, b * f) = static_cast<double>(n) / max_count;
        const double* m = vg.mean_feature(u, v, b);
        for (int j = 0; j < vg.feature_dim; ++j) out.at(v, u, b * f + 1 + j) = m[j];
      }
  return out;
}

// ---------------------------------------------------------------------------
// Camera.

using Mat3 = std::array<double, 9>;  // row-major
using Vec3 = std::array<double, 3>;

inline Vec3 mat_vec(const Mat3& m, const Vec3& v) {
  return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2], m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
          m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
}

// Pinhole camera. Camera axes: x right, y down, z along the optical axis.
// `rotation` maps camera-frame directions into the BEV frame (its columns are
// the camera axes expressed in BEV coordinates) and `translation` is the
// camera center in the BEV frame. BEV frame: x forward, y left, z up.
struct CameraModel {
  double fx = 28.0, fy = 28.0, cx = 28.0, cy = 16.0;
  Mat3 rotation{1, 0, 0, 0, 1, 0, 0, 0, 1};
  Vec3 translation{0, 0, 0};
  int image_h = 32;
  int image_w = 56;
  std::vector<double> depth_bins;

  // Camera at `height` looking along BEV heading `yaw_deg`, tilted down by
  // `pitch_deg`.
  static CameraModel looking(double height, double pitch_deg, double yaw_deg, int image_h, int image_w,
                             double fx, double fy, std::vector<double> depth_bins) {
    CameraModel cam;
    cam.fx = fx;
    cam.fy = fy;
    cam.cx = image_w / 2.0;
    cam.cy = image_h / 2.0;
    cam.image_h = image_h;
    cam.image_w = image_w;
    cam.depth_bins = std::move(depth_bins);
    const double p = pitch_deg * M_PI / 180.0;
    const double y = yaw_deg * M_PI / 180.0;
    const Vec3 fwd{std::cos(p) * std::cos(y), std::cos(p) * std::sin(y), -std::sin(p)};
    const Vec3 right{std::sin(y), -std::cos(y), 0.0};
    // down = forward x right
    const Vec3 down{fwd[1] * right[2] - fwd[2] * right[1], fwd[2] * right[0] - fwd[0] * right[2],
                    fwd[0] * right[1] - fwd[1] * right[0]};
    cam.rotation = {right[0], down[0], fwd[0], right[1], down[1], fwd[1], right[2], down[2], fwd[2]};
    cam.translation = {0.0, 0.0, height};
    cam.validate();
    return cam;
  }

  static std::vector<double> linspace_bins(double lo, double hi, int n) {
    std::vector<double> b(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) b[static_cast<std::size_t>(i)] = n == 1 ? lo : lo + (hi - lo) * i / (n - 1);
    return b;
  }

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0)) throw ConfigError("camera focal lengths must be positive");
    if (image_h < 1 || image_w < 1) throw ConfigError("camera image size must be positive");
    if (depth_bins.empty()) throw ConfigError("camera needs at least one depth bin");
    for (std::size_t i = 0; i < depth_bins.size(); ++i) {
      if (!(depth_bins[i] > 0.0)) throw ConfigError("depth bins must be positive");
      if (i > 0 && !(depth_bins[i] > depth_bins[i - 1])) {
        throw ConfigError("depth bins must be strictly increasing");
      }
    }
  }

  // BEV-frame direction of the ray through image point (u, v) (pixel units,
  // continuous), scaled so its camera-frame z component is 1.
  Vec3 ray(double u, double v) const { return mat_vec(rotation, {(u - cx) / fx, (v - cy) / fy, 1.0}); }

  Vec3 optical_axis() const { return {rotation[2], rotation[5], rotation[8]}; }
};

// Precomputed splat targets: BEV cell index per (row, col, depth bin) of the
// feature grid, -1 when the lifted point falls outside the scope.
struct SplatPlan {
  int feat_h = 0, feat_w = 0, bins = 0;
  BevScope scope;
  std::vector<int> target;
};

inline SplatPlan make_splat_plan(const CameraModel& cam, const BevScope& scope, int feat_h, int feat_w) {
  cam.validate();
  SplatPlan plan;
  plan.feat_h = feat_h;
  plan.feat_w = feat_w;
  plan.bins = static_cast<int>(cam.depth_bins.size());
  plan.scope = scope;
  plan.target.assign(static_cast<std::size_t>(feat_h) * feat_w * plan.bins, -1);
  const double sx = static_cast<double>(cam.image_w) / feat_w;
  const double sy = static_cast<double>(cam.image_h) / feat_h;
  for (int r = 0; r < feat_h; ++r)
    for (int c = 0; c < feat_w; ++c) {
      const Vec3 dir = cam.ray((c + 0.5) * sx, (r + 0.5) * sy);
      for (int b = 0; b < plan.bins; ++b) {
        const double d = cam.depth_bins[static_cast<std::size_t>(b)];
        const Point2 p{cam.translation[0] + d * dir[0], cam.translation[1] + d * dir[1]};
        if (auto px = try_world_to_pixel(p, scope)) {
          plan.target[(static_cast<std::size_t>(r) * feat_w + c) * plan.bins + b] =
              px->v * scope.width() + px->u;
        }
      }
    }
  return plan;
}

// View transform: softmax(depth_logits) over bins weights each image-cell
// feature, which is sum-splatted into the BEV cell of the lifted point.
inline Var lift_splat(const Var& image_feat, const Var& depth_logits, const SplatPlan& plan) {
  detail::same_tape(image_feat, depth_logits);
  Tape& tape = detail::tape_of(image_feat);
  const Tensor& f = image_feat.value();
  const Tensor& dl = depth_logits.value();
  require_rank3(f, "lift_splat");
  require_rank3(dl, "lift_splat");
  if (f.h() != dl.h() || f.w() != dl.w()) {
    throw ShapeError("lift_splat: feature grid " + shape_str(f.shape()) + " vs depth grid " +
                     shape_str(dl.shape()));
  }
  if (f.h() != plan.feat_h || f.w() != plan.feat_w || dl.c() != plan.bins) {
    throw ShapeError("lift_splat: inputs do not match the splat plan");
  }
  const int C = f.c(), B = plan.bins;
  const std::size_t ncell = static_cast<std::size_t>(f.h()) * f.w();
  auto weights = std::make_shared<std::vector<double>>(ncell * B);
  for (std::size_t p = 0; p < ncell; ++p) {
    const double* z = dl.data() + p * B;
    double* w = weights->data() + p * B;
    double mx = -INFINITY;
    for (int b = 0; b < B; ++b) mx = std::max(mx, z[b]);
    double s = 0.0;
    for (int b = 0; b < B; ++b) s += (w[b] = std::exp(z[b] - mx));
    for (int b = 0; b < B; ++b) w[b] /= s;
  }
  Tensor out = Tensor::hwc(plan.scope.depth(), plan.scope.width(), C);
  const auto target = std::make_shared<std::vector<int>>(plan.target);
  for (std::size_t p = 0; p < ncell; ++p)
    for (int b = 0; b < B; ++b) {
      const int cell = (*target)[p * B + b];
      if (cell < 0) continue;
      const double w = (*weights)[p * B + b];
      const double* src = f.data() + p * C;
      double* dst = out.data() + static_cast<std::size_t>(cell) * C;
      for (int ch = 0; ch < C; ++ch) dst[ch] += w * src[ch];
    }
  return tape.record(
      std::move(out), {image_feat, depth_logits},
      [=](Tape& t, const Tensor& g) {
        Tensor* gf = t.grad_buffer(image_feat);
        Tensor* gd = t.grad_buffer(depth_logits);
        const Tensor& f = image_feat.value();
        std::vector<double> dw(static_cast<std::size_t>(B));
        for (std::size_t p = 0; p < ncell; ++p) {
          const double* w = weights->data() + p * B;
          const double* src = f.data() + p * C;
          for (int b = 0; b < B; ++b) {
            dw[static_cast<std::size_t>(b)] = 0.0;
            const int cell = (*target)[p * B + b];
            if (cell < 0) continue;
            const double* go = g.data() + static_cast<std::size_t>(cell) * C;
            if (gf) {
              double* dst = gf->data() + p * C;
              for (int ch = 0; ch < C; ++ch) dst[ch] += w[b] * go[ch];
            }
            double acc = 0.0;
            for (int ch = 0; ch < C; ++ch) acc += src[ch] * go[ch];
            dw[static_cast<std::size_t>(b)] = acc;
          }
          if (gd) {
            double dot = 0.0;
            for (int b = 0; b < B; ++b) dot += w[b] * dw[static_cast<std::size_t>(b)];
            double* dst = gd->data() + p * B;
            for (int b = 0; b < B; ++b) dst[b] += w[b] * (dw[static_cast<std::size_t>(b)] - dot);
          }
        }
      },
      weights->size() * sizeof(double));
}

// ---------------------------------------------------------------------------
// Backbones. Parameter groups: "encoder.lidar.*" and "encoder.cam.*".

inline void add_lidar_backbone_params(ParameterSet& ps, const ArchConfig& a, std::mt19937_64& rng) {
  add_conv(ps, "encoder.lidar.conv1", 3, a.lidar_in_channels(), a.c_p, rng);
  for (int r = a.lidar_refine(), i = 0; r > 1; r /= 2, ++i)
    add_conv(ps, "encoder.lidar.down" + std::to_string(i), 2, a.c_p, a.c_p, rng);
  add_conv(ps, "encoder.lidar.conv2", 3, a.c_p, a.c_p, rng);
}

inline void add_camera_backbone_params(ParameterSet& ps, const ArchConfig& a, std::mt19937_64& rng) {
  add_conv(ps, "encoder.cam.conv1", 3, 3, a.c_i, rng);
  add_conv(ps, "encoder.cam.down", 3, a.c_i, a.c_i, rng);
  add_conv(ps, "encoder.cam.feat", 1, a.c_i, a.c_i, rng);
  add_conv(ps, "encoder.cam.depth", 1, a.c_i, a.depth_bins, rng);
}

// Input: Z-flattened voxels on the voxel grid. Output: (d, w, C_p) on the LR
// grid. Each "down" layer is a 2x2 stride-2 conv without padding, so an output
// cell sees exactly the 2x2 block it pools (top-left anchored, no overlap).
inline Var lidar_backbone(Tape& tape, ParameterSet& ps, const Var& voxels) {
  Var x = relu(apply_conv(tape, ps, "encoder.lidar.conv1", voxels, 1, 1));
  for (int i = 0; ps.contains("encoder.lidar.down" + std::to_string(i) + ".w"); ++i)
    x = relu(apply_conv(tape, ps, "encoder.lidar.down" + std::to_string(i), x, 2, 0));
  return relu(apply_conv(tape, ps, "encoder.lidar.conv2", x, 1, 1));
}

struct CameraFeatures {
  Var features;      // (Hi/2, Wi/2, C_i)
  Var depth_logits;  // (Hi/2, Wi/2, depth bins)
};

inline CameraFeatures camera_backbone(Tape& tape, ParameterSet& ps, const Var& image) {
  Var x = relu(apply_conv(tape, ps, "encoder.cam.conv1", image, 1, 1));
  x = relu(apply_conv(tape, ps, "encoder.cam.down", x, 2, 1));
  return {apply_conv(tape, ps, "encoder.cam.feat", x, 1, 0), apply_conv(tape, ps, "encoder.cam.depth", x, 1, 0)};
}

}  // namespace bevrestore
