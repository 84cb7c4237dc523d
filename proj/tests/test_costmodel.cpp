#include <gtest/gtest.h>

#include <sstream>

#include "bevrestore/costmodel.hpp"
#include "bevrestore/experiments.hpp"
#include "bevrestore/restore.hpp"

using namespace bevrestore;

namespace {

const BevScope kScope = BevScope::square(-16.0, 16.0, 0.5);  // 64 x 64 HR

ArchConfig arch(int s, UpsampleMethod m = UpsampleMethod::kRestore, int k = 0) {
  ArchConfig a;
  a.scale = s;
  a.upsample = s == 1 && m != UpsampleMethod::kRestore ? UpsampleMethod::kNone : m;
  a.msa_layers = k;
  a.validate();
  return a;
}

}  // namespace

TEST(Estimate, ParamsMatchModelPerStage) {
  for (auto m : {UpsampleMethod::kRestore, UpsampleMethod::kDeconvolution, UpsampleMethod::kNearest,
                 UpsampleMethod::kBilinear, UpsampleMethod::kBicubic})
    for (auto w : {RestoreWidth::kNormal, RestoreWidth::kSmall})
      for (int s : {1, 2, 4, 8})
        for (int k : {0, 2}) {
          ArchConfig a = arch(s, m, k);
          a.restore_width = w;
          const CostReport rep = estimate(a, kScope);
          const PipelineModel model = PipelineModel::create(a, 1);
          const std::string tag = std::string(to_string(a.upsample)) + " s=" + std::to_string(s);
          EXPECT_EQ(rep.row("encoder").params, model.params.group_numel("encoder")) << tag;
          EXPECT_EQ(rep.row("neck").params, model.params.group_numel("fuser") + model.params.group_numel("neck"))
              << tag;
          EXPECT_EQ(rep.row("restore").params, model.params.group_numel("restore")) << tag;
          EXPECT_EQ(rep.row("decoder").params, model.params.group_numel("decoder")) << tag;
          EXPECT_EQ(rep.row("cache").params, 0u);
        }
}

TEST(Estimate, TotalsAreRowSums) {
  const CostReport rep = estimate(arch(4, UpsampleMethod::kRestore, 1), kScope, 4);
  CostRow sum;
  for (const auto& r : rep.rows) {
    sum.params += r.params;
    sum.act_elems += r.act_elems;
    sum.act_bytes += r.act_bytes;
    sum.flops += r.flops;
    EXPECT_EQ(r.act_bytes, 4 * r.act_elems);
  }
  EXPECT_EQ(rep.totals.params, sum.params);
  EXPECT_EQ(rep.totals.act_elems, sum.act_elems);
  EXPECT_EQ(rep.totals.act_bytes, sum.act_bytes);
  EXPECT_EQ(rep.totals.flops, sum.flops);
}

TEST(Estimate, OneMsaLayerDelta) {
  const ArchConfig a0 = arch(4, UpsampleMethod::kRestore, 0), a1 = arch(4, UpsampleMethod::kRestore, 1);
  const CostReport r0 = estimate(a0, kScope), r1 = estimate(a1, kScope);
  const std::uint64_t T = 16 * 16, C = static_cast<std::uint64_t>(a0.c);
  EXPECT_EQ(r1.totals.act_elems - r0.totals.act_elems, a0.heads * T * T + 5 * T * C);
  EXPECT_EQ(r1.totals.attn_elems - r0.totals.attn_elems, a0.heads * T * T);
  EXPECT_EQ(r1.totals.params - r0.totals.params, 4 * C * C);
  EXPECT_EQ(r1.totals.flops - r0.totals.flops, 8 * T * C * C + 4 * T * T * C);
}

TEST(Estimate, EncoderBevElementsShrinkBySquaredScale) {
  // with a fixed voxel/LR ratio every BEV-grid tensor in the encoder is 1/s^2 as large
  const auto enc_bev = [](int s) {
    ArchConfig a = arch(s);
    a.voxel_refine = 2;
    return estimate(a, kScope).row("encoder").bev_elems;
  };
  for (int s : {2, 4, 8}) EXPECT_EQ(enc_bev(1), static_cast<std::uint64_t>(s * s) * enc_bev(s)) << s;
}

TEST(Estimate, AttentionRatioIsFourthPower) {
  const CostReport hr = estimate(hr_throughout(arch(4, UpsampleMethod::kRestore, 1)), kScope);
  const CostReport lr = estimate(arch(4, UpsampleMethod::kRestore, 1), kScope);
  EXPECT_EQ(hr.totals.attn_elems, 256 * lr.totals.attn_elems);
}

TEST(Estimate, ScaleCovariance) {
  const BevScope big = BevScope::square(-32.0, 32.0, 0.5);
  for (int s : {1, 2, 4}) {
    const ArchConfig a = arch(s, UpsampleMethod::kRestore, 2);
    const CostReport r1 = estimate(a, kScope), r2 = estimate(a, big);
    EXPECT_EQ(r2.totals.bev_elems - r2.totals.attn_elems, 4 * (r1.totals.bev_elems - r1.totals.attn_elems));
    EXPECT_EQ(r2.totals.attn_elems, 16 * r1.totals.attn_elems);
    EXPECT_EQ(r2.totals.params, r1.totals.params);
  }
}

TEST(Estimate, Deterministic) {
  const ArchConfig a = arch(2, UpsampleMethod::kDeconvolution, 1);
  EXPECT_EQ(estimate(a, kScope).csv(), estimate(a, kScope).csv());
}

TEST(Estimate, Errors) {
  EXPECT_THROW(estimate(arch(4), BevScope::square(-3.5, 3.5, 0.5)), ConfigError);  // 14 px, not divisible by 4
  EXPECT_THROW(estimate(arch(2), kScope, 0), ConfigError);
}

TEST(Estimate, CsvLayout) {
  const CostReport rep = estimate(arch(2), kScope);
  std::istringstream is(rep.csv());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  ASSERT_EQ(lines.size(), 7u);
  EXPECT_EQ(lines[0], "stage,params,act_elems,act_bytes,flops");
  const char* stages[] = {"encoder", "neck", "restore", "decoder", "cache", "total"};
  for (int i = 0; i < 6; ++i) EXPECT_EQ(lines[static_cast<std::size_t>(i) + 1].rfind(stages[i], 0), 0u) << lines[i + 1];
  EXPECT_NE(rep.config_echo().find("s=2"), std::string::npos);
}

TEST(SweepMsa, SlopeRatioIsExactFourthPower) {
  for (int s : {2, 4, 8}) {
    const MsaSweep sw = sweep_msa(arch(s), kScope, 4);
    EXPECT_EQ(sw.attn_slope_ratio(), static_cast<double>(s * s * s * s));
  }
}

TEST(SweepMsa, SeriesIncreaseAndRestoreLastStaysBelow) {
  for (int s : {2, 4}) {
    const MsaSweep sw = sweep_msa(arch(s), kScope, 0, 4, {0, 1, 2, 4, 8});
    ASSERT_EQ(sw.points.size(), 5u);
    for (std::size_t i = 1; i < sw.points.size(); ++i) {
      EXPECT_GT(sw.points[i].restore_last_bytes, sw.points[i - 1].restore_last_bytes);
      EXPECT_GT(sw.points[i].hr_bytes, sw.points[i - 1].hr_bytes);
      EXPECT_LT(sw.points[i].restore_last_bytes, sw.points[i].hr_bytes);
    }
    EXPECT_EQ(sw.points[0].restore_last_attn_bytes, 0u);
    EXPECT_EQ(sw.points[0].hr_attn_bytes, 0u);
  }
  EXPECT_THROW(sweep_msa(arch(2), kScope, 0), ConfigError);
}

TEST(RegressSlope, ExactLine) {
  EXPECT_DOUBLE_EQ(regress_slope({0, 1, 2, 4, 8}, {3, 5, 7, 11, 19}), 2.0);
  EXPECT_THROW(regress_slope({1.0}, {1.0}), UsageError);
  EXPECT_THROW(regress_slope({1.0, 1.0}, {1.0, 2.0}), UsageError);
}

TEST(MeasurePeak, NoOpIsZero) { EXPECT_EQ(measure_peak([](Tape&) {}), 0u); }

TEST(MeasurePeak, AtLeastAnalyticBytes) {
  ExperimentConfig cfg;
  const BevScope scope = BevScope::square(-8.0, 8.0, 0.5);
  for (int s : {1, 2, 4})
    for (int k : {0, 2}) {
      const ArchConfig a = arch(s, UpsampleMethod::kRestore, k);
      const std::size_t measured = measure_training_step(cfg, a, scope);
      const CostReport rep = estimate(a, scope, static_cast<int>(sizeof(double)));
      EXPECT_GE(measured, rep.totals.act_bytes) << "s=" << s << " k=" << k;
    }
}
