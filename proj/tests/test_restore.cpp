#include <gtest/gtest.h>

#include <random>

#include "bevrestore/restore.hpp"
#include "test_util.hpp"

using namespace bevrestore;
using testutil::naive_attention;
using testutil::naive_conv;

namespace {

ArchConfig arch_for(int s, UpsampleMethod m, RestoreWidth w = RestoreWidth::kNormal) {
  ArchConfig a;
  a.scale = s;
  a.upsample = m;
  a.restore_width = w;
  a.c_i = 3;
  a.c_p = 4;
  a.c_f = 5;
  a.c = 4;
  a.decoder_hidden = 5;
  a.image_h = 8;
  a.image_w = 12;
  a.depth_bins = 4;
  a.validate();
  return a;
}

double tensor_abs_sum(const Tensor& t) {
  double s = 0.0;
  for (std::size_t i = 0; i < t.size(); ++i) s += std::abs(t[i]);
  return s;
}

// w[0,0,c, c*s*s + phase] = 1: every channel copied into all of its sub-pixel slots.
Tensor identity_lift(int c, int s) {
  Tensor w({1, 1, c, s * s * c});
  for (int ch = 0; ch < c; ++ch)
    for (int ph = 0; ph < s * s; ++ph) w[static_cast<std::size_t>(ch) * s * s * c + ch * s * s + ph] = 1.0;
  return w;
}

}  // namespace

// ---------------------------------------------------------------------------
// fuse

TEST(Fuse, OutputChannelsAndShape) {
  std::mt19937_64 rng(1);
  ParameterSet ps;
  add_conv(ps, "fuser.conv", 3, 4, 6, rng);
  Tape tape;
  const Tensor y =
      fuse(tape, ps, tape.constant(random_tensor({5, 7, 2}, rng)), tape.constant(random_tensor({5, 7, 2}, rng))).value();
  EXPECT_EQ(y.shape(), (Shape{5, 7, 6}));
}

TEST(Fuse, ZeroCameraBranchLeavesOnlyLidar) {
  std::mt19937_64 rng(2);
  ParameterSet ps;
  add_conv(ps, "fuser.conv", 3, 5, 4, rng);
  const Tensor zp = random_tensor({4, 4, 3}, rng);
  Tape t1;
  const Tensor a = fuse(t1, ps, t1.constant(zp), t1.constant(Tensor({4, 4, 2}))).value();
  // scramble the camera-input slice of the kernel; output must not move
  Tensor& w = ps.at("fuser.conv.w").value;
  for (std::size_t tap = 0; tap < 9; ++tap)
    for (int ci = 3; ci < 5; ++ci)
      for (int co = 0; co < 4; ++co) w[(tap * 5 + ci) * 4 + co] = 100.0 * (co + 1);
  Tape t2;
  const Tensor b = fuse(t2, ps, t2.constant(zp), t2.constant(Tensor({4, 4, 2}))).value();
  EXPECT_EQ(max_abs_diff(a, b), 0.0);
}

TEST(Fuse, IdentityKernelSelectsChannel) {
  std::mt19937_64 rng(3);
  ParameterSet ps;
  ps.add("fuser.conv.w", Tensor({3, 3, 5, 2}));
  ps.add("fuser.conv.b", Tensor({2}));
  // center tap: out 0 <- camera channel 1 (input index 3 + 1), out 1 <- LiDAR channel 2
  ps.at("fuser.conv.w").value[(4 * 5 + 4) * 2 + 0] = 1.0;
  ps.at("fuser.conv.w").value[(4 * 5 + 2) * 2 + 1] = 1.0;
  const Tensor zp = random_tensor({3, 3, 3}, rng, 0.0, 1.0), zi = random_tensor({3, 3, 2}, rng, 0.0, 1.0);
  Tape tape;
  const Tensor y = fuse(tape, ps, tape.constant(zp), tape.constant(zi)).value();
  for (int v = 0; v < 3; ++v)
    for (int u = 0; u < 3; ++u) {
      EXPECT_EQ(y.at(v, u, 0), zi.at(v, u, 1));
      EXPECT_EQ(y.at(v, u, 1), zp.at(v, u, 2));
    }
}

TEST(Fuse, SpatialMismatch) {
  std::mt19937_64 rng(4);
  ParameterSet ps;
  add_conv(ps, "fuser.conv", 3, 4, 4, rng);
  Tape tape;
  EXPECT_THROW(fuse(tape, ps, tape.constant(Tensor({4, 4, 2})), tape.constant(Tensor({4, 5, 2}))), ShapeError);
}

// ---------------------------------------------------------------------------
// neck

namespace {

ParameterSet neck_params(int cf, int c, int msa, std::uint64_t seed) {
  ArchConfig a = arch_for(1, UpsampleMethod::kNone);
  a.c_f = cf;
  a.c = c;
  a.msa_layers = msa;
  a.heads = 2;
  PipelineModel m = PipelineModel::create(a, seed);
  return m.params;
}

Tensor relu_t(Tensor t) {
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = std::max(t[i], 0.0);
  return t;
}

}  // namespace

TEST(Neck, NoAttentionIsResidualConvBlock) {
  ParameterSet ps = neck_params(5, 4, 0, 7);
  std::mt19937_64 rng(8);
  const Tensor z = random_tensor({5, 6, 5}, rng);
  Tape tape;
  const Tensor y = neck(tape, ps, tape.constant(z), 0, 2).value();
  const Tensor h1 = relu_t(naive_conv(z, ps.at("neck.conv1.w").value, &ps.at("neck.conv1.b").value, 1, 1));
  Tensor h2 = naive_conv(h1, ps.at("neck.conv2.w").value, &ps.at("neck.conv2.b").value, 1, 1);
  for (std::size_t i = 0; i < h2.size(); ++i) h2[i] += h1[i];
  EXPECT_LE(max_abs_diff(y, relu_t(h2)), 1e-12);
}

TEST(Neck, SpatialDimsPreserved) {
  std::mt19937_64 rng(9);
  for (int k : {0, 1, 2}) {
    ParameterSet ps = neck_params(5, 4, k, 10);
    Tape tape;
    EXPECT_EQ(neck(tape, ps, tape.constant(random_tensor({3, 7, 5}, rng)), k, 2).value().shape(), (Shape{3, 7, 4}));
  }
}

TEST(Neck, TwoAttentionLayersMatchSequentialOracle) {
  ParameterSet ps = neck_params(5, 4, 2, 11);
  std::mt19937_64 rng(12);
  const Tensor z = random_tensor({4, 4, 5}, rng);
  Tape tape;
  const Tensor y = neck(tape, ps, tape.constant(z), 2, 2).value();
  Tape t0;
  Tensor ref = neck(t0, ps, t0.constant(z), 0, 2).value();
  for (int k = 0; k < 2; ++k) {
    const std::string b = "neck.msa" + std::to_string(k) + ".";
    ref = naive_attention(ref, ps.at(b + "q").value, ps.at(b + "k").value, ps.at(b + "v").value,
                          ps.at(b + "o").value, 2);
  }
  EXPECT_LE(max_abs_diff(y, ref), 1e-12);
}

// ---------------------------------------------------------------------------
// restore

TEST(Restore, ScaleOneKeepsGrid) {
  PipelineModel m = PipelineModel::create(arch_for(1, UpsampleMethod::kRestore), 1);
  std::mt19937_64 rng(13);
  const Tensor z = random_tensor({5, 3, 4}, rng);
  Tape tape;
  EXPECT_EQ(restore(tape, m.params, tape.constant(z), 1).value().shape(), z.shape());
}

TEST(Restore, OutputDimsScale) {
  std::mt19937_64 rng(14);
  for (auto w : {RestoreWidth::kNormal, RestoreWidth::kSmall})
    for (int s : {1, 2, 4, 8}) {
      PipelineModel m = PipelineModel::create(arch_for(s, UpsampleMethod::kRestore, w), 2);
      Tape tape;
      EXPECT_EQ(restore(tape, m.params, tape.constant(random_tensor({3, 2, 4}, rng)), s).value().shape(),
                (Shape{3 * s, 2 * s, 4}));
    }
}

TEST(Restore, ParameterLayoutPerWidth) {
  PipelineModel normal = PipelineModel::create(arch_for(4, UpsampleMethod::kRestore), 3);
  EXPECT_EQ(normal.params.at("restore.conv1.w").value.shape(), (Shape{3, 3, 4, 4}));
  EXPECT_EQ(normal.params.at("restore.expand.w").value.shape(), (Shape{3, 3, 4, 64}));
  PipelineModel small = PipelineModel::create(arch_for(4, UpsampleMethod::kRestore, RestoreWidth::kSmall), 3);
  EXPECT_FALSE(small.params.contains("restore.conv1.w"));
  EXPECT_EQ(small.params.at("restore.expand.w").value.shape(), (Shape{1, 1, 4, 64}));
  EXPECT_LT(small.params.group_numel("restore"), normal.params.group_numel("restore"));
}

TEST(Restore, IcnrInitStartsAsNearestOfABaseConv) {
  // all s*s phases of a channel share one kernel, so the initial output is
  // constant over each s x s block
  ArchConfig a = arch_for(2, UpsampleMethod::kRestore);
  PipelineModel m = PipelineModel::create(a, 4);
  std::mt19937_64 rng(15);
  Tape tape;
  const Tensor y = restore(tape, m.params, tape.constant(random_tensor({3, 3, 4}, rng)), 2).value();
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 6; ++u)
      for (int c = 0; c < 4; ++c) ASSERT_EQ(y.at(v, u, c), y.at(v - v % 2, u - u % 2, c));
  a.restore_init = RestoreInit::kHe;
  PipelineModel he = PipelineModel::create(a, 4);
  Tape t2;
  const Tensor z = restore(t2, he.params, t2.constant(random_tensor({3, 3, 4}, rng)), 2).value();
  EXPECT_NE(z.at(0, 0, 0), z.at(0, 1, 0));
}

TEST(Restore, IdentityLiftIsNearest) {
  std::mt19937_64 rng(16);
  for (int s : {1, 2, 3, 4}) {
    ParameterSet ps;
    ps.add("restore.expand.w", identity_lift(3, s));
    ps.add("restore.expand.b", Tensor({s * s * 3}));
    Tape tape;
    Var z = tape.constant(random_tensor({4, 5, 3}, rng));
    EXPECT_EQ(max_abs_diff(restore(tape, ps, z, s).value(), interp_upsample(z, s, InterpMethod::kNearest).value()),
              0.0)
        << "s=" << s;
  }
}

// ---------------------------------------------------------------------------
// baseline upsamplers

TEST(Baseline, NearestReplicatesBlocks) {
  ParameterSet ps;
  Tape tape;
  const Tensor x({2, 2, 1}, std::vector<double>{1, 2, 3, 4});
  const Tensor y = baseline_upsample(tape, ps, tape.constant(x), 2, UpsampleMethod::kNearest).value();
  const std::vector<double> want{1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_EQ(y[i], want[i]);
}

TEST(Baseline, AllOnesStampEqualsNearest) {
  std::mt19937_64 rng(17);
  for (int s : {2, 4}) {
    ParameterSet ps;
    Tensor k({s, s, 3, 3});
    for (int t = 0; t < s * s; ++t)
      for (int c = 0; c < 3; ++c) k[(static_cast<std::size_t>(t) * 3 + c) * 3 + c] = 1.0;
    ps.add("restore.deconv.w", k);
    ps.add("restore.deconv.b", Tensor({3}));
    Tape tape;
    Var z = tape.constant(random_tensor({3, 4, 3}, rng));
    EXPECT_EQ(max_abs_diff(baseline_upsample(tape, ps, z, s, UpsampleMethod::kDeconvolution).value(),
                           interp_upsample(z, s, InterpMethod::kNearest).value()),
              0.0);
  }
}

TEST(Baseline, BilinearAndBicubicKeepConstants) {
  ParameterSet ps;
  Tape tape;
  Var z = tape.constant(Tensor({3, 3, 2}, 0.625));
  for (auto m : {UpsampleMethod::kBilinear, UpsampleMethod::kBicubic}) {
    const Tensor y = baseline_upsample(tape, ps, z, 4, m).value();
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_NEAR(y[i], 0.625, 1e-15);
  }
}

TEST(Baseline, RejectsNonBaselineMethods) {
  ParameterSet ps;
  Tape tape;
  Var z = tape.constant(Tensor({2, 2, 1}));
  EXPECT_THROW(baseline_upsample(tape, ps, z, 2, UpsampleMethod::kRestore), ConfigError);
  EXPECT_THROW(baseline_upsample(tape, ps, z, 2, UpsampleMethod::kNone), ConfigError);
  EXPECT_THROW(parse_upsample_method("lanczos"), ConfigError);
}

// ---------------------------------------------------------------------------
// pixel shuffle <-> transposed conv

TEST(EquivalentDeconv, ScaleOneIsTheSameKernel) {
  std::mt19937_64 rng(18);
  const Tensor w = random_tensor({1, 1, 3, 5}, rng);
  const Tensor k = equivalent_deconv_kernel(w, 1);
  EXPECT_EQ(k.shape(), w.shape());
  EXPECT_EQ(max_abs_diff(k, w), 0.0);
}

TEST(EquivalentDeconv, MatchesShuffledConv) {
  std::mt19937_64 rng(19);
  struct Case {
    int k, s, cin, c, h, w;
  };
  for (const Case& t : {Case{1, 2, 3, 3, 4, 4}, Case{1, 4, 2, 2, 4, 4}, Case{3, 2, 3, 2, 5, 4}, Case{3, 4, 2, 3, 3, 3},
                        Case{5, 2, 2, 2, 6, 5}, Case{3, 1, 4, 4, 4, 4}}) {
    const Tensor w = random_tensor({t.k, t.k, t.cin, t.s * t.s * t.c}, rng);
    const Tensor x = random_tensor({t.h, t.w, t.cin}, rng);
    Tape tape;
    Var xv = tape.constant(x);
    const Tensor ps_path = pixel_shuffle(conv2d(xv, tape.constant(w), 1, (t.k - 1) / 2), t.s).value();
    const Tensor dc_path = transposed_conv2d(xv, tape.constant(equivalent_deconv_kernel(w, t.s)), t.s,
                                             equivalent_deconv_crop(t.k, t.s))
                               .value();
    ASSERT_EQ(ps_path.shape(), dc_path.shape());
    EXPECT_LE(max_abs_diff(ps_path, dc_path), 1e-12) << "k=" << t.k << " s=" << t.s;
  }
}

TEST(EquivalentDeconv, ShapeErrors) {
  EXPECT_THROW(equivalent_deconv_kernel(Tensor({1, 1, 2, 6}), 2), ShapeError);
  EXPECT_THROW(equivalent_deconv_kernel(Tensor({2, 2, 2, 8}), 2), ShapeError);
  EXPECT_THROW(equivalent_deconv_kernel(Tensor({1, 1, 8}), 2), ShapeError);
}

TEST(EquivalentDeconv, LearnableTwinsStartIdentical) {
  // restore and deconvolution models built from one seed compute the same map
  for (auto w : {RestoreWidth::kNormal, RestoreWidth::kSmall}) {
    PipelineModel r = PipelineModel::create(arch_for(4, UpsampleMethod::kRestore, w), 5);
    PipelineModel d = PipelineModel::create(arch_for(4, UpsampleMethod::kDeconvolution, w), 5);
    std::mt19937_64 rng(20);
    const Tensor z = random_tensor({3, 4, 4}, rng);
    Tape tape;
    EXPECT_LE(max_abs_diff(forward_hr_head(tape, r, tape.constant(z)).value(),
                           forward_hr_head(tape, d, tape.constant(z)).value()),
              1e-12);
  }
}

// ---------------------------------------------------------------------------
// decoder and whole model

TEST(Decode, ChannelsAndZeroWeights) {
  PipelineModel m = PipelineModel::create(arch_for(2, UpsampleMethod::kBilinear), 6);
  std::mt19937_64 rng(21);
  const Tensor z = random_tensor({6, 5, 4}, rng);
  Tape tape;
  EXPECT_EQ(decode(tape, m.params, tape.constant(z)).value().shape(), (Shape{6, 5, 4}));
  m.params.at("decoder.conv1.w").value.fill(0.0);
  m.params.at("decoder.conv2.w").value.fill(0.0);
  Tensor& b = m.params.at("decoder.conv2.b").value;
  for (int c = 0; c < 4; ++c) b[static_cast<std::size_t>(c)] = 0.5 * c - 1.0;
  const Tensor y = decode(tape, m.params, tape.constant(z)).value();
  for (int v = 0; v < 6; ++v)
    for (int u = 0; u < 5; ++u)
      for (int c = 0; c < 4; ++c) ASSERT_EQ(y.at(v, u, c), 0.5 * c - 1.0);
}

namespace {

struct Toy {
  BevScope hr = BevScope::square(-8.0, 8.0, 0.5);
  ArchConfig arch;
  SampleInput in;
  SplatPlan plan;
};

Toy toy(int s, UpsampleMethod m, std::uint64_t seed) {
  Toy t;
  t.arch = arch_for(s, m);
  const BevScope lr = downscale_scope(t.hr, s);
  std::mt19937_64 rng(seed);
  t.in.voxels = random_tensor({lr.depth() * s, lr.width() * s, t.arch.lidar_in_channels()}, rng, 0.0, 1.0);
  t.in.image = random_tensor({t.arch.image_h, t.arch.image_w, 3}, rng, 0.0, 1.0);
  const CameraModel cam = CameraModel::looking(2.0, 20.0, 0.0, t.arch.image_h, t.arch.image_w, 6.0, 6.0,
                                               CameraModel::linspace_bins(2.0, 10.0, t.arch.depth_bins));
  t.plan = make_splat_plan(cam, lr, t.arch.image_h / 2, t.arch.image_w / 2);
  return t;
}

}  // namespace

TEST(Pipeline, CompositionShapeLaw) {
  for (auto m : {UpsampleMethod::kRestore, UpsampleMethod::kDeconvolution, UpsampleMethod::kNearest,
                 UpsampleMethod::kBilinear, UpsampleMethod::kBicubic})
    for (int s : {1, 2, 4, 8}) {
      Toy t = toy(s, m, 22);
      PipelineModel model = PipelineModel::create(t.arch, 7);
      Tape tape;
      Var z = forward_lr(tape, model, t.in, t.plan);
      EXPECT_EQ(z.value().shape(), (Shape{32 / s, 32 / s, t.arch.c}));
      EXPECT_EQ(forward_hr_head(tape, model, z).value().shape(), (Shape{32, 32, t.arch.classes}))
          << to_string(m) << " s=" << s;
    }
  Toy t = toy(1, UpsampleMethod::kNone, 23);
  PipelineModel model = PipelineModel::create(t.arch, 8);
  Tape tape;
  EXPECT_EQ(forward_hr_head(tape, model, forward_lr(tape, model, t.in, t.plan)).value().shape(),
            (Shape{32, 32, t.arch.classes}));
}

TEST(Pipeline, GroupsAreDisjointAndComplete) {
  PipelineModel m = PipelineModel::create(arch_for(2, UpsampleMethod::kRestore), 9);
  std::size_t total = 0;
  for (const char* g : {"encoder", "fuser", "neck", "restore", "decoder", "lrhead"}) total += m.params.group_numel(g);
  EXPECT_EQ(total, m.params.numel());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    const std::string g = ParameterSet::group_of(m.params[i].name);
    EXPECT_TRUE(g == "encoder" || g == "fuser" || g == "neck" || g == "restore" || g == "decoder" || g == "lrhead")
        << m.params[i].name;
  }
}

TEST(Pipeline, FrozenPreRestoreGetsNoGradient) {
  for (auto method : {UpsampleMethod::kRestore, UpsampleMethod::kDeconvolution}) {
    Toy t = toy(2, method, 24);
    PipelineModel m = PipelineModel::create(t.arch, 10);
    m.freeze_pre_restore();
    m.params.zero_grad();
    Tape tape;
    Var logits = forward_hr_head(tape, m, forward_lr(tape, m, t.in, t.plan));
    std::mt19937_64 rng(25);
    Tensor target = random_tensor(logits.value().shape(), rng, 0.0, 1.0);
    tape.backward(sigmoid_focal_loss(logits, target, 2.0, 0.5));
    for (std::size_t i = 0; i < m.params.size(); ++i) {
      const Parameter& p = m.params[i];
      const std::string g = ParameterSet::group_of(p.name);
      if (g == "encoder" || g == "fuser" || g == "neck" || g == "lrhead") {
        EXPECT_EQ(tensor_abs_sum(p.grad), 0.0) << p.name;
      } else if (p.name.size() > 2 && p.name.substr(p.name.size() - 2) == ".w") {
        EXPECT_GT(tensor_abs_sum(p.grad), 0.0) << p.name;
      }
    }
  }
}
