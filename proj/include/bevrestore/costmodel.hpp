#pragma once

// Analytic training-cost accounting. Every tensor the tape keeps for backward
// is listed layer by layer (conv outputs, ReLU outputs, shuffles, saved
// attention state), mirroring the ops in restore.hpp / sensors.hpp so that the
// parameter counts match a real PipelineModel exactly.
//
// Rows: encoder (LiDAR + camera backbones, view transform), neck (fuser +
// neck), restore, decoder, cache (sensor inputs, loss targets).

#include <cstdint>
#include <functional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "bevrestore/arch.hpp"
#include "bevrestore/bevgrid.hpp"
#include "bevrestore/errors.hpp"
#include "bevrestore/tape.hpp"

namespace bevrestore {

struct CostRow {
  std::string stage;
  std::uint64_t params = 0;
  std::uint64_t act_elems = 0;
  std::uint64_t act_bytes = 0;
  std::uint64_t flops = 0;
  // Part of act_elems that lives on a BEV grid (scales with the grid area).
  std::uint64_t bev_elems = 0;
  // Attention matrices alone (heads * T^2 per MSA layer).
  std::uint64_t attn_elems = 0;
};

struct CostReport {
  std::vector<CostRow> rows;  // encoder, neck, restore, decoder, cache
  CostRow totals;
  BevScope scope;
  ArchConfig arch;
  int bytes_per_elem = 4;

  const CostRow& row(const std::string& stage) const {
    for (const auto& r : rows)
      if (r.stage == stage) return r;
    throw UsageError("no cost row '" + stage + "'");
  }

  std::string config_echo() const {
    std::ostringstream os;
    os << "scope=" << scope.str() << " s=" << arch.scale << " k=" << arch.msa_layers
       << " C_i=" << arch.c_i << " C_p=" << arch.c_p << " C_f=" << arch.c_f << " C=" << arch.c
       << " upsample=" << to_string(arch.upsample) << " width=" << to_string(arch.restore_width)
       << " bytes_per_elem=" << bytes_per_elem;
    return os.str();
  }

  void write_csv(std::ostream& os) const {
    os << "stage,params,act_elems,act_bytes,flops\n";
    auto line = [&os](const CostRow& r) {
      os << r.stage << ',' << r.params << ',' << r.act_elems << ',' << r.act_bytes << ',' << r.flops << '\n';
    };
    for (const auto& r : rows) line(r);
    line(totals);
  }

  std::string csv() const {
    std::ostringstream os;
    write_csv(os);
    return os.str();
  }
};

namespace detail {

class CostBuilder {
 public:
  explicit CostBuilder(CostRow& row) : row_(row) {}

  // k x k conv producing (h_out, w_out, cout), optionally followed by ReLU.
  void conv(int k, int cin, int cout, bool bias, int h_out, int w_out, bool relu_after, bool bev) {
    row_.params += static_cast<std::uint64_t>(k) * k * cin * cout + (bias ? cout : 0);
    const std::uint64_t out = static_cast<std::uint64_t>(h_out) * w_out * cout;
    row_.flops += 2ULL * k * k * cin * out;
    tensor(out, bev);
    if (relu_after) tensor(out, bev);
  }
  void tensor(std::uint64_t elems, bool bev) {
    row_.act_elems += elems;
    if (bev) row_.bev_elems += elems;
  }
  void flops(std::uint64_t f) { row_.flops += f; }
  void params(std::uint64_t p) { row_.params += p; }
  void attention(std::uint64_t elems) {
    tensor(elems, true);
    row_.attn_elems += elems;
  }

 private:
  CostRow& row_;
};

}  // namespace detail

// `scope` is the HR output scope; the pipeline's LR grid is scope / s.
inline CostReport estimate(const ArchConfig& a, const BevScope& scope, int bytes_per_elem = 4) {
  a.validate();
  if (bytes_per_elem < 1) throw ConfigError("bytes_per_elem must be positive");
  const BevScope lr = downscale_scope(scope, a.scale);
  const std::uint64_t d = static_cast<std::uint64_t>(lr.depth()), w = static_cast<std::uint64_t>(lr.width());
  const int s = a.scale;
  const int D = scope.depth(), W = scope.width();
  const int vr = a.lidar_refine();

  CostReport rep;
  rep.scope = scope;
  rep.arch = a;
  rep.bytes_per_elem = bytes_per_elem;
  rep.rows.resize(5);
  const char* names[] = {"encoder", "neck", "restore", "decoder", "cache"};
  for (int i = 0; i < 5; ++i) rep.rows[static_cast<std::size_t>(i)].stage = names[i];

  {  // encoder
    detail::CostBuilder b(rep.rows[0]);
    const int dv = static_cast<int>(d) * vr, wv = static_cast<int>(w) * vr;
    b.conv(3, a.lidar_in_channels(), a.c_p, true, dv, wv, true, true);
    for (int r = vr / 2; r >= 1; r /= 2) {  // 2x2 stride-2 down layers
      b.conv(2, a.c_p, a.c_p, true, static_cast<int>(d) * r, static_cast<int>(w) * r, true, true);
    }
    b.conv(3, a.c_p, a.c_p, true, static_cast<int>(d), static_cast<int>(w), true, true);
    // camera: image-plane activations do not depend on the BEV grid
    const int hi = a.image_h, wi = a.image_w, hf = hi / 2, wf = wi / 2;
    b.conv(3, 3, a.c_i, true, hi, wi, true, false);
    b.conv(3, a.c_i, a.c_i, true, hf, wf, true, false);
    b.conv(1, a.c_i, a.c_i, true, hf, wf, false, false);
    b.conv(1, a.c_i, a.depth_bins, true, hf, wf, false, false);
    // lift-splat: BEV output plus saved softmax weights
    b.tensor(d * w * a.c_i, true);
    b.tensor(static_cast<std::uint64_t>(hf) * wf * a.depth_bins, false);
    b.flops(2ULL * hf * wf * a.depth_bins * a.c_i);
  }
  {  // fuser + neck
    detail::CostBuilder b(rep.rows[1]);
    const int di = static_cast<int>(d), wi = static_cast<int>(w);
    b.tensor(d * w * (a.c_p + a.c_i), true);  // concat
    b.conv(3, a.c_p + a.c_i, a.c_f, true, di, wi, true, true);
    b.conv(3, a.c_f, a.c, true, di, wi, true, true);
    b.conv(3, a.c, a.c, true, di, wi, false, true);
    b.tensor(2 * d * w * a.c, true);  // residual add + ReLU
    const std::uint64_t T = d * w, C = static_cast<std::uint64_t>(a.c);
    for (int k = 0; k < a.msa_layers; ++k) {
      b.params(4 * C * C);
      b.tensor(T * C, true);      // layer output
      b.tensor(4 * T * C, true);  // saved Q, K, V, head outputs
      b.attention(static_cast<std::uint64_t>(a.heads) * T * T);
      b.flops(8 * T * C * C + 2 * 2 * T * T * C);
    }
  }
  {  // restore
    detail::CostBuilder b(rep.rows[2]);
    const int di = static_cast<int>(d), wi = static_cast<int>(w);
    const std::uint64_t hr_c = static_cast<std::uint64_t>(D) * W * a.c;
    switch (a.upsample) {
      case UpsampleMethod::kRestore:
        if (a.restore_width == RestoreWidth::kNormal) {
          b.conv(3, a.c, a.c, true, di, wi, true, true);
          b.conv(3, a.c, s * s * a.c, true, di, wi, false, true);
        } else {
          b.conv(1, a.c, s * s * a.c, true, di, wi, false, true);
        }
        b.tensor(hr_c, true);  // pixel shuffle
        break;
      case UpsampleMethod::kDeconvolution: {
        const int k = a.restore_width == RestoreWidth::kNormal ? 3 : 1;
        if (k == 3) b.conv(3, a.c, a.c, true, di, wi, true, true);
        b.params(static_cast<std::uint64_t>(k * s) * (k * s) * a.c * a.c + a.c);
        b.tensor(2 * hr_c, true);  // deconv output + bias add
        b.flops(2ULL * k * k * a.c * hr_c);
        break;
      }
      case UpsampleMethod::kNearest: b.tensor(hr_c, true); break;
      case UpsampleMethod::kBilinear:
        b.tensor(hr_c, true);
        b.flops(2ULL * 4 * hr_c);
        break;
      case UpsampleMethod::kBicubic:
        b.tensor(hr_c, true);
        b.flops(2ULL * 16 * hr_c);
        break;
      case UpsampleMethod::kNone: break;
    }
  }
  {  // decoder
    detail::CostBuilder b(rep.rows[3]);
    b.conv(3, a.c, a.decoder_hidden, true, D, W, true, true);
    b.conv(3, a.decoder_hidden, a.classes, true, D, W, false, true);
  }
  {  // cache: sensor inputs, loss target and loss value
    detail::CostBuilder b(rep.rows[4]);
    b.tensor(d * vr * w * vr * a.lidar_in_channels(), true);
    b.tensor(static_cast<std::uint64_t>(a.image_h) * a.image_w * 3, false);
    b.tensor(static_cast<std::uint64_t>(D) * W * a.classes, true);
    b.tensor(1, false);
  }

  rep.totals.stage = "total";
  for (auto& r : rep.rows) {
    r.act_bytes = r.act_elems * static_cast<std::uint64_t>(bytes_per_elem);
    rep.totals.params += r.params;
    rep.totals.act_elems += r.act_elems;
    rep.totals.act_bytes += r.act_bytes;
    rep.totals.flops += r.flops;
    rep.totals.bev_elems += r.bev_elems;
    rep.totals.attn_elems += r.attn_elems;
  }
  return rep;
}

// Configuration with the whole pipeline at HR resolution (no restoration).
inline ArchConfig hr_throughout(ArchConfig a) {
  a.scale = 1;
  a.upsample = UpsampleMethod::kNone;
  return a;
}

struct MsaSweepPoint {
  int k = 0;
  std::uint64_t restore_last_bytes = 0, hr_bytes = 0;
  std::uint64_t restore_last_flops = 0, hr_flops = 0;
  std::uint64_t restore_last_attn_bytes = 0, hr_attn_bytes = 0;
};

struct MsaSweep {
  std::vector<MsaSweepPoint> points;
  double attn_slope_restore_last = 0.0;  // attention bytes per added MSA layer
  double attn_slope_hr = 0.0;
  double attn_slope_ratio() const { return attn_slope_hr / attn_slope_restore_last; }
};

// Analytic sweep of k = 0..k_max MSA layers for the restore-last model `a`
// versus the same model kept at HR throughout.
inline MsaSweep sweep_msa(const ArchConfig& a, const BevScope& scope, int k_max, int bytes_per_elem = 4,
                          const std::vector<int>& ks = {}) {
  if (k_max < 1 && ks.empty()) throw ConfigError("sweep_msa needs k_max >= 1");
  std::vector<int> grid = ks;
  if (grid.empty())
    for (int k = 0; k <= k_max; ++k) grid.push_back(k);
  MsaSweep out;
  for (int k : grid) {
    ArchConfig rl = a;
    rl.msa_layers = k;
    const CostReport r1 = estimate(rl, scope, bytes_per_elem);
    const CostReport r2 = estimate(hr_throughout(rl), scope, bytes_per_elem);
    MsaSweepPoint p;
    p.k = k;
    p.restore_last_bytes = r1.totals.act_bytes;
    p.hr_bytes = r2.totals.act_bytes;
    p.restore_last_flops = r1.totals.flops;
    p.hr_flops = r2.totals.flops;
    p.restore_last_attn_bytes = r1.totals.attn_elems * static_cast<std::uint64_t>(bytes_per_elem);
    p.hr_attn_bytes = r2.totals.attn_elems * static_cast<std::uint64_t>(bytes_per_elem);
    out.points.push_back(p);
  }
  // attention bytes are exactly linear in k; the slope is any secant
  const auto& f = out.points.front();
  const auto& l = out.points.back();
  const double dk = static_cast<double>(l.k - f.k);
  if (dk > 0) {
    out.attn_slope_restore_last = static_cast<double>(l.restore_last_attn_bytes - f.restore_last_attn_bytes) / dk;
    out.attn_slope_hr = static_cast<double>(l.hr_attn_bytes - f.hr_attn_bytes) / dk;
  }
  return out;
}

// Least-squares slope of y over x.
inline double regress_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw UsageError("regress_slope needs >= 2 paired points");
  double mx = 0, my = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    mx += x[i];
    my += y[i];
  }
  mx /= static_cast<double>(x.size());
  my /= static_cast<double>(y.size());
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sxy += (x[i] - mx) * (y[i] - my);
    sxx += (x[i] - mx) * (x[i] - mx);
  }
  if (sxx == 0.0) throw UsageError("regress_slope: x values are all equal");
  return sxy / sxx;
}

// High-water mark of live tape bytes (values, saved state, intermediate
// gradients; parameters excluded) over whatever `run` records.
inline std::size_t measure_peak(const std::function<void(Tape&)>& run) {
  Tape tape;
  run(tape);
  return tape.peak_bytes();
}

}  // namespace bevrestore
