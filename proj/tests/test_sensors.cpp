#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <random>
#include <sstream>
#include <tuple>

#include "bevrestore/sensors.hpp"

using namespace bevrestore;

namespace {

const BevScope kScope = BevScope::square(-4.0, 4.0, 1.0);
const ZConfig kZ{-1.0, 3.0, 4};

PointCloud random_cloud(std::size_t n, std::uint64_t seed, double spread = 5.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> xy(-spread, spread), z(-1.5, 3.5), f(0.0, 1.0);
  PointCloud pc;
  pc.feature_dim = 2;
  for (std::size_t i = 0; i < n; ++i) pc.add({xy(rng), xy(rng), z(rng)}, {f(rng), f(rng)});
  return pc;
}

}  // namespace

TEST(Voxelize, EmptyCloud) {
  PointCloud pc;
  const VoxelGrid vg = voxelize(pc, kScope, kZ);
  EXPECT_EQ(vg.dropped, 0u);
  EXPECT_EQ(vg.total_count(), 0u);
  EXPECT_EQ(vg.counts.size(), 64u * 4u);
}

TEST(Voxelize, SinglePointAtCellCenter) {
  PointCloud pc;
  pc.feature_dim = 1;
  pc.add({1.5, -2.5, 0.5}, {0.75});
  const VoxelGrid vg = voxelize(pc, kScope, kZ);
  EXPECT_EQ(vg.count(5, 1, 1), 1);
  EXPECT_DOUBLE_EQ(vg.mean_feature(5, 1, 1)[0], 0.75);
  EXPECT_EQ(vg.total_count(), 1u);
}

TEST(Voxelize, MatchesNaiveBinning) {
  const PointCloud pc = random_cloud(200, 11);
  const VoxelGrid vg = voxelize(pc, kScope, kZ);
  // independent pass: floor() binning with explicit half-open checks
  std::map<std::tuple<int, int, int>, std::pair<int, std::array<double, 2>>> oracle;
  std::size_t dropped = 0;
  for (std::size_t i = 0; i < pc.size(); ++i) {
    const auto& p = pc.points[i];
    if (p.x < -4.0 || p.x >= 4.0 || p.y < -4.0 || p.y >= 4.0 || p.z < -1.0 || p.z >= 3.0) {
      ++dropped;
      continue;
    }
    auto& e = oracle[{static_cast<int>(std::floor(p.x + 4.0)), static_cast<int>(std::floor(p.y + 4.0)),
                      static_cast<int>(std::floor(p.z + 1.0))}];
    ++e.first;
    e.second[0] += pc.feature(i)[0];
    e.second[1] += pc.feature(i)[1];
  }
  EXPECT_EQ(vg.dropped, dropped);
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u)
      for (int b = 0; b < 4; ++b) {
        auto it = oracle.find({u, v, b});
        const int n = it == oracle.end() ? 0 : it->second.first;
        ASSERT_EQ(vg.count(u, v, b), n) << u << "," << v << "," << b;
        for (int j = 0; j < 2; ++j) {
          const double want = n ? it->second.second[static_cast<std::size_t>(j)] / n : 0.0;
          ASSERT_NEAR(vg.mean_feature(u, v, b)[j], want, 1e-12);
        }
      }
}

TEST(Voxelize, MassConservation) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const PointCloud pc = random_cloud(500, seed);
    const VoxelGrid vg = voxelize(pc, kScope, kZ);
    EXPECT_EQ(vg.total_count() + vg.dropped, pc.size());
    EXPECT_GT(vg.dropped, 0u);
  }
}

TEST(Voxelize, PermutationInvariant) {
  const PointCloud pc = random_cloud(300, 5, 3.9);
  std::vector<std::size_t> order(pc.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::mt19937_64 rng(6);
  std::shuffle(order.begin(), order.end(), rng);
  PointCloud shuffled;
  shuffled.feature_dim = pc.feature_dim;
  for (std::size_t i : order) shuffled.add(pc.points[i], pc.feature(i));
  const VoxelGrid a = voxelize(pc, kScope, kZ), b = voxelize(shuffled, kScope, kZ);
  EXPECT_EQ(a.counts, b.counts);
  for (std::size_t i = 0; i < a.mean.size(); ++i) ASSERT_NEAR(a.mean[i], b.mean[i], 1e-12);
}

TEST(Voxelize, BoundaryTiesAreHalfOpen) {
  PointCloud pc;
  pc.feature_dim = 0;
  pc.add({4.0, 0.0, 0.0}, std::initializer_list<double>{});   // x at max edge: dropped
  pc.add({-4.0, -4.0, -1.0}, std::initializer_list<double>{});  // all mins: kept
  pc.add({0.0, 0.0, 3.0}, std::initializer_list<double>{});   // z at max: dropped
  const VoxelGrid vg = voxelize(pc, kScope, kZ);
  EXPECT_EQ(vg.dropped, 2u);
  EXPECT_EQ(vg.count(0, 0, 0), 1);
}

TEST(Voxelize, BadZConfig) {
  EXPECT_THROW(voxelize(PointCloud{}, kScope, ZConfig{0.0, 1.0, 0}), ConfigError);
  EXPECT_THROW(voxelize(PointCloud{}, kScope, ZConfig{1.0, 1.0, 2}), ConfigError);
}

TEST(FlattenZ, SingleBinEqualsSlab) {
  const PointCloud pc = random_cloud(100, 9, 3.9);
  const ZConfig one{-2.0, 4.0, 1};
  const VoxelGrid vg = voxelize(pc, kScope, one);
  const Tensor t = flatten_z(vg);
  ASSERT_EQ(t.shape(), (Shape{8, 8, 3}));
  int mx = *std::max_element(vg.counts.begin(), vg.counts.end());
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u) {
      EXPECT_DOUBLE_EQ(t.at(v, u, 0), static_cast<double>(vg.count(u, v, 0)) / mx);
      EXPECT_DOUBLE_EQ(t.at(v, u, 1), vg.mean_feature(u, v, 0)[0]);
      EXPECT_DOUBLE_EQ(t.at(v, u, 2), vg.mean_feature(u, v, 0)[1]);
    }
}

TEST(FlattenZ, TopBinOnly) {
  PointCloud pc;
  pc.feature_dim = 1;
  pc.add({0.5, 0.5, 2.5}, {0.3});
  pc.add({-3.5, 2.5, 2.9}, {0.9});
  pc.add({-3.5, 2.5, 2.1}, {0.1});
  const Tensor t = flatten_z(voxelize(pc, kScope, kZ));
  ASSERT_EQ(t.c(), 8);
  double top = 0.0;
  for (int v = 0; v < 8; ++v)
    for (int u = 0; u < 8; ++u)
      for (int ch = 0; ch < 8; ++ch) {
        if (ch < 6) {
          ASSERT_EQ(t.at(v, u, ch), 0.0);
        } else {
          top += std::abs(t.at(v, u, ch));
        }
      }
  EXPECT_GT(top, 0.0);
  EXPECT_DOUBLE_EQ(t.at(6, 0, 6), 1.0);  // the two-point cell has the max count
  EXPECT_DOUBLE_EQ(t.at(6, 0, 7), 0.5);
  EXPECT_DOUBLE_EQ(t.at(4, 4, 6), 0.5);
}

TEST(FlattenZ, EmptyGridIsZero) {
  PointCloud pc;
  pc.feature_dim = 1;
  const Tensor t = flatten_z(voxelize(pc, kScope, kZ));
  EXPECT_EQ(t.shape(), (Shape{8, 8, 8}));
  for (std::size_t i = 0; i < t.size(); ++i) ASSERT_EQ(t[i], 0.0);
}

TEST(PointCloudIo, RoundTrip) {
  const PointCloud pc = random_cloud(20, 4);
  std::stringstream ss;
  write_point_cloud(ss, pc);
  const PointCloud back = parse_point_cloud(ss);
  ASSERT_EQ(back.size(), pc.size());
  EXPECT_EQ(back.feature_dim, 2);
  for (std::size_t i = 0; i < pc.size(); ++i) {
    EXPECT_EQ(back.points[i].x, pc.points[i].x);
    EXPECT_EQ(back.feature(i)[1], pc.feature(i)[1]);
  }
}

TEST(PointCloudIo, Errors) {
  std::istringstream bad("1 2\n");
  EXPECT_THROW(parse_point_cloud(bad), IoError);
  std::istringstream ragged("1 2 3 4\n1 2 3\n");
  EXPECT_THROW(parse_point_cloud(ragged), IoError);
  std::istringstream junk("1 2 x\n");
  EXPECT_THROW(parse_point_cloud(junk), IoError);
}

// ---------------------------------------------------------------------------

namespace {

// One feature pixel, camera at the origin looking along +x; bins at the given
// depths land at (d, 0) in BEV.
SplatPlan forward_plan(const std::vector<double>& bins, const BevScope& scope) {
  CameraModel cam = CameraModel::looking(0.0, 0.0, 0.0, 2, 2, 1.0, 1.0, bins);
  return make_splat_plan(cam, scope, 1, 1);
}

}  // namespace

TEST(Camera, CenterRayFollowsHeading) {
  const CameraModel cam = CameraModel::looking(1.5, 0.0, 90.0, 32, 56, 28.0, 28.0, {2.0});
  const Vec3 r = cam.ray(cam.cx, cam.cy);
  EXPECT_NEAR(r[0], 0.0, 1e-12);
  EXPECT_NEAR(r[1], 1.0, 1e-12);
  EXPECT_NEAR(r[2], 0.0, 1e-12);
  // pixel right of center -> ray swings to the right (negative y when facing +x)
  const CameraModel fwd = CameraModel::looking(1.5, 0.0, 0.0, 32, 56, 28.0, 28.0, {2.0});
  EXPECT_LT(fwd.ray(fwd.cx + 10.0, fwd.cy)[1], 0.0);
  EXPECT_LT(fwd.ray(fwd.cx, fwd.cy + 10.0)[2], 0.0);
}

TEST(Camera, Validation) {
  EXPECT_THROW(CameraModel::looking(1.0, 0.0, 0.0, 4, 4, 0.0, 1.0, {1.0}), ConfigError);
  EXPECT_THROW(CameraModel::looking(1.0, 0.0, 0.0, 4, 4, 1.0, 1.0, {}), ConfigError);
  EXPECT_THROW(CameraModel::looking(1.0, 0.0, 0.0, 4, 4, 1.0, 1.0, {2.0, 2.0}), ConfigError);
  EXPECT_THROW(CameraModel::looking(1.0, 0.0, 0.0, 4, 4, 1.0, 1.0, {-1.0, 2.0}), ConfigError);
}

TEST(LiftSplat, OneHotDepth) {
  const BevScope scope = BevScope::square(0.0, 8.0, 1.0);
  const SplatPlan plan = forward_plan({1.5, 4.5, 6.5}, scope);
  ASSERT_EQ(plan.target[1], world_to_pixel({4.5, 0.0}, scope).v * 8 + 4);
  Tape tape;
  Var f = tape.constant(Tensor({1, 1, 2}, {3.0, -1.0}));
  Var d = tape.constant(Tensor({1, 1, 3}, {0.0, 800.0, 0.0}));
  const Tensor out = lift_splat(f, d, plan).value();
  const int cell = plan.target[1];
  int nonzero = 0;
  for (int i = 0; i < 64; ++i)
    if (out[static_cast<std::size_t>(i) * 2] != 0.0) ++nonzero;
  EXPECT_EQ(nonzero, 1);
  EXPECT_DOUBLE_EQ(out[static_cast<std::size_t>(cell) * 2], 3.0);
  EXPECT_DOUBLE_EQ(out[static_cast<std::size_t>(cell) * 2 + 1], -1.0);
}

TEST(LiftSplat, UniformTwoBinsSplitHalf) {
  const BevScope scope = BevScope::square(0.0, 8.0, 1.0);
  const SplatPlan plan = forward_plan({2.5, 5.5}, scope);
  ASSERT_NE(plan.target[0], plan.target[1]);
  Tape tape;
  Var f = tape.constant(Tensor({1, 1, 1}, {4.0}));
  Var d = tape.constant(Tensor({1, 1, 2}, {0.7, 0.7}));
  const Tensor out = lift_splat(f, d, plan).value();
  EXPECT_DOUBLE_EQ(out[static_cast<std::size_t>(plan.target[0])], 2.0);
  EXPECT_DOUBLE_EQ(out[static_cast<std::size_t>(plan.target[1])], 2.0);
}

TEST(LiftSplat, ConservationMinusDropped) {
  const BevScope scope = BevScope::square(-6.0, 6.0, 0.75);
  const CameraModel cam =
      CameraModel::looking(1.6, 8.0, 20.0, 32, 56, 28.0, 28.0, CameraModel::linspace_bins(2.0, 34.0, 8));
  const SplatPlan plan = make_splat_plan(cam, scope, 16, 28);
  std::size_t kept = 0;
  for (int t : plan.target) kept += t >= 0;
  ASSERT_GT(kept, 0u);
  ASSERT_LT(kept, plan.target.size());  // some rays leave the scope

  std::mt19937_64 rng(3);
  const Tensor feat = random_tensor({16, 28, 5}, rng);
  const Tensor logits = random_tensor({16, 28, 8}, rng, -2.0, 2.0);
  Tape tape;
  const Tensor out = lift_splat(tape.constant(feat), tape.constant(logits), plan).value();
  for (int ch = 0; ch < 5; ++ch) {
    long double expect = 0.0L, got = 0.0L;
    for (int p = 0; p < 16 * 28; ++p) {
      const double* z = logits.data() + p * 8;
      double mx = *std::max_element(z, z + 8), s = 0.0;
      for (int b = 0; b < 8; ++b) s += std::exp(z[b] - mx);
      for (int b = 0; b < 8; ++b)
        if (plan.target[static_cast<std::size_t>(p) * 8 + b] >= 0) {
          expect += std::exp(z[b] - mx) / s * feat[static_cast<std::size_t>(p) * 5 + ch];
        }
    }
    for (std::size_t c = 0; c < out.size() / 5; ++c) got += out[c * 5 + ch];
    EXPECT_NEAR(static_cast<double>(got), static_cast<double>(expect), 1e-12);
  }
}

TEST(LiftSplat, ShapeErrors) {
  const SplatPlan plan = forward_plan({2.5, 5.5}, BevScope::square(0.0, 8.0, 1.0));
  Tape tape;
  EXPECT_THROW(lift_splat(tape.constant(Tensor({1, 2, 1})), tape.constant(Tensor({1, 1, 2})), plan), ShapeError);
  EXPECT_THROW(lift_splat(tape.constant(Tensor({1, 1, 1})), tape.constant(Tensor({1, 1, 3})), plan), ShapeError);
}

// ---------------------------------------------------------------------------

namespace {

ArchConfig small_arch(int scale, int voxel_refine = 0) {
  ArchConfig a;
  a.scale = scale;
  a.voxel_refine = voxel_refine;
  a.validate();
  return a;
}

}  // namespace

TEST(Backbones, ZeroWeightsGiveZeroFeatures) {
  const ArchConfig a = small_arch(2);
  std::mt19937_64 rng(1);
  ParameterSet ps;
  add_lidar_backbone_params(ps, a, rng);
  add_camera_backbone_params(ps, a, rng);
  for (std::size_t i = 0; i < ps.size(); ++i) ps[i].value.fill(0.0);
  Tape tape;
  const Tensor l = lidar_backbone(tape, ps, tape.constant(random_tensor({16, 16, a.lidar_in_channels()}, rng)))
                       .value();
  for (std::size_t i = 0; i < l.size(); ++i) ASSERT_EQ(l[i], 0.0);
  const CameraFeatures cf = camera_backbone(tape, ps, tape.constant(random_tensor({32, 56, 3}, rng)));
  for (std::size_t i = 0; i < cf.features.value().size(); ++i) ASSERT_EQ(cf.features.value()[i], 0.0);
  for (std::size_t i = 0; i < cf.depth_logits.value().size(); ++i) ASSERT_EQ(cf.depth_logits.value()[i], 0.0);
}

TEST(Backbones, StrideTwoLayersHalveDims) {
  std::mt19937_64 rng(2);
  for (int r : {1, 2, 4}) {
    const ArchConfig a = small_arch(4, r);
    ParameterSet ps;
    add_lidar_backbone_params(ps, a, rng);
    Tape tape;
    const Tensor out =
        lidar_backbone(tape, ps, tape.constant(random_tensor({8 * r, 8 * r, a.lidar_in_channels()}, rng))).value();
    EXPECT_EQ(out.shape(), (Shape{8, 8, a.c_p})) << "refine " << r;
  }
  const ArchConfig a = small_arch(1);
  ParameterSet ps;
  add_camera_backbone_params(ps, a, rng);
  Tape tape;
  const CameraFeatures cf = camera_backbone(tape, ps, tape.constant(random_tensor({32, 56, 3}, rng)));
  EXPECT_EQ(cf.features.value().shape(), (Shape{16, 28, a.c_i}));
  EXPECT_EQ(cf.depth_logits.value().shape(), (Shape{16, 28, a.depth_bins}));
}

TEST(Backbones, DownLayerSeesOnlyItsOwnBlock) {
  const ArchConfig a = small_arch(1, 4);
  std::mt19937_64 rng(7);
  ParameterSet ps;
  add_lidar_backbone_params(ps, a, rng);
  ASSERT_TRUE(ps.contains("encoder.lidar.down1.w"));
  EXPECT_FALSE(ps.contains("encoder.lidar.down2.w"));
  EXPECT_EQ(ps.at("encoder.lidar.down0.w").value.shape(), (Shape{2, 2, a.c_p, a.c_p}));
  Tensor x = random_tensor({8, 8, a.c_p}, rng);
  Tape tape;
  const Tensor y0 = apply_conv(tape, ps, "encoder.lidar.down0", tape.constant(x), 2, 0).value();
  x.at(5, 2, 0) += 1.0;  // block (2, 1)
  const Tensor y1 = apply_conv(tape, ps, "encoder.lidar.down0", tape.constant(x), 2, 0).value();
  ASSERT_EQ(y0.shape(), (Shape{4, 4, a.c_p}));
  for (int v = 0; v < 4; ++v)
    for (int u = 0; u < 4; ++u) {
      double d = 0.0;
      for (int c = 0; c < a.c_p; ++c) d = std::max(d, std::abs(y1.at(v, u, c) - y0.at(v, u, c)));
      if (v == 2 && u == 1) EXPECT_GT(d, 0.0);
      else EXPECT_EQ(d, 0.0) << v << "," << u;
    }
}

TEST(Backbones, ChannelCountsFollowConfig) {
  ArchConfig a = small_arch(2);
  a.c_p = 5;
  a.c_i = 7;
  a.depth_bins = 3;
  std::mt19937_64 rng(3);
  ParameterSet ps;
  add_lidar_backbone_params(ps, a, rng);
  add_camera_backbone_params(ps, a, rng);
  Tape tape;
  EXPECT_EQ(lidar_backbone(tape, ps, tape.constant(random_tensor({12, 10, a.lidar_in_channels()}, rng))).value().c(),
            5);
  const CameraFeatures cf = camera_backbone(tape, ps, tape.constant(random_tensor({8, 8, 3}, rng)));
  EXPECT_EQ(cf.features.value().c(), 7);
  EXPECT_EQ(cf.depth_logits.value().c(), 3);
}

TEST(Backbones, InputChannelMismatchThrows) {
  const ArchConfig a = small_arch(2);
  std::mt19937_64 rng(4);
  ParameterSet ps;
  add_lidar_backbone_params(ps, a, rng);
  Tape tape;
  EXPECT_THROW(lidar_backbone(tape, ps, tape.constant(Tensor({8, 8, a.lidar_in_channels() + 1}))), ShapeError);
}
