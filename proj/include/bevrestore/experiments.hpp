#pragma once

// The ablation experiments and their CSV / image outputs: upsampler
// comparison, scale sweep, MSA cost sweep, cost report, rendering.
// Every CSV starts with a "# config <json>" echo line followed by a stable
// header; wall-clock times go to the log stream only.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "bevrestore/costmodel.hpp"
#include "bevrestore/harness.hpp"

namespace bevrestore {

namespace fs = std::filesystem;

inline std::string fmt_double(double v, int prec = 6) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(prec) << v;
  return os.str();
}

inline void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw IoError("cannot open '" + path.string() + "' for writing");
  f << text;
  if (!f) throw IoError("write failed for '" + path.string() + "'");
}

inline std::string csv_preamble(const ExperimentConfig& cfg) { return "# config " + config_echo(cfg) + "\n"; }

struct Logger {
  std::ostream* os = &std::cerr;
  bool quiet = false;
  template <class... T>
  void operator()(const T&... parts) const {
    if (quiet || !os) return;
    ((*os) << ... << parts) << '\n';
  }
};

// Parameter count of the deployable model (the stage-A LR head excluded).
inline std::size_t deployed_params(const PipelineModel& m) {
  return m.params.numel() - m.params.group_numel("lrhead");
}

// ---------------------------------------------------------------------------
// Two-stage run for one architecture on one dataset.

struct StageAResult {
  PipelineModel model;
  TrainLog log;
};

inline StageAResult run_stage_a(const PreparedSet& data, const ExperimentConfig& cfg, const ArchConfig& arch,
                                const Logger& log) {
  ArchConfig a = arch;
  a.upsample = UpsampleMethod::kRestore;  // the LR part does not depend on the upsampler
  StageAResult r{PipelineModel::create(a, model_seed(cfg)), {}};
  r.log = train_stage_a(r.model, data, cfg);
  log("stage A (s=", arch.scale, "): loss ", fmt_double(r.log.epoch_loss.empty() ? 0.0 : r.log.epoch_loss.front()),
      " -> ", fmt_double(r.log.epoch_loss.empty() ? 0.0 : r.log.epoch_loss.back()), " in ",
      fmt_double(r.log.seconds, 1), " s");
  return r;
}

struct StageBResult {
  PipelineModel model;
  TrainLog log;
  EvalResult eval;
};

inline StageBResult run_stage_b(const PreparedSet& data, const ExperimentConfig& cfg, const ArchConfig& arch,
                                const ParameterSet& stage_a, const Logger& log) {
  StageBResult r{model_from_stage_a(arch, stage_a, model_seed(cfg)), {}, {}};
  r.log = train_stage_b(r.model, data, cfg);
  r.eval = eval_miou(r.model, data, cfg.threshold);
  r.eval.config = config_echo(cfg);
  r.eval.peak_bytes = r.log.peak_bytes;
  log("stage B ", to_string(arch.upsample), " (s=", arch.scale, "): mIoU ", fmt_double(r.eval.miou, 4), " in ",
      fmt_double(r.log.seconds, 1), " s");
  return r;
}

// ---------------------------------------------------------------------------
// Upsampler comparison.

inline const std::vector<UpsampleMethod>& compared_methods() {
  static const std::vector<UpsampleMethod> m{UpsampleMethod::kNearest, UpsampleMethod::kBilinear,
                                             UpsampleMethod::kBicubic, UpsampleMethod::kDeconvolution,
                                             UpsampleMethod::kRestore};
  return m;
}

struct CompareRow {
  UpsampleMethod method;
  std::vector<double> miou;  // per replica
  double mean_miou = 0.0;
  std::size_t params = 0;
  std::uint64_t act_bytes = 0;
  std::uint64_t flops = 0;
};

struct CompareResult {
  std::vector<CompareRow> rows;
  std::vector<std::uint64_t> seeds;
  std::string csv;
  std::string runs_csv;

  const CompareRow& row(UpsampleMethod m) const {
    for (const auto& r : rows)
      if (r.method == m) return r;
    throw UsageError("no comparison row for this method");
  }
};

// One stage-A checkpoint per replica shared by all five stage-B runs.
// Writes compare_upsamplers.csv, compare_upsamplers_runs.csv and per-replica
// checkpoints under out_dir.
inline CompareResult compare_upsamplers(const ExperimentConfig& cfg, const fs::path& out_dir, const Logger& log = {}) {
  cfg.validate();
  CompareResult res;
  for (UpsampleMethod m : compared_methods()) {
    CompareRow row;
    row.method = m;
    ArchConfig a = cfg.arch;
    a.upsample = m;
    const CostReport rep = estimate(a, cfg.scope, cfg.bytes_per_elem);
    row.params = static_cast<std::size_t>(rep.totals.params);
    row.act_bytes = rep.totals.act_bytes;
    row.flops = rep.totals.flops;
    res.rows.push_back(row);
  }
  std::ostringstream runs;
  runs << csv_preamble(cfg) << "seed,method,miou";
  for (const auto& c : default_class_names()) runs << ",iou_" << c;
  runs << '\n';
  for (int r = 0; r < cfg.replicas; ++r) {
    ExperimentConfig rc = cfg;
    rc.seed = cfg.seed + static_cast<std::uint64_t>(r);
    res.seeds.push_back(rc.seed);
    log("replica seed ", rc.seed);
    const RawDataset raw = synthesize_dataset(rc);
    const PreparedSet data = prepare(raw, rc, rc.arch);
    StageAResult a = run_stage_a(data, rc, rc.arch, log);
    const std::string tag = "seed" + std::to_string(rc.seed);
    save_checkpoint(a.model.params, (out_dir / ("stage_a_" + tag + ".ckpt")).string());
    for (auto& row : res.rows) {
      ArchConfig arch = rc.arch;
      arch.upsample = row.method;
      StageBResult b = run_stage_b(data, rc, arch, a.model.params, log);
      if (deployed_params(b.model) != row.params) {
        throw UsageError("analytic parameter count disagrees with the model");
      }
      save_checkpoint(b.model.params, (out_dir / ("stage_b_" + std::string(to_string(row.method)) + "_" + tag + ".ckpt")).string());
      row.miou.push_back(b.eval.miou);
      runs << rc.seed << ',' << to_string(row.method) << ',' << fmt_double(b.eval.miou);
      for (double v : b.eval.iou) runs << ',' << fmt_double(v);
      runs << '\n';
    }
  }
  std::ostringstream os;
  os << csv_preamble(cfg) << "method,miou,params,act_bytes,flops\n";
  for (auto& row : res.rows) {
    double s = 0.0;
    for (double v : row.miou) s += v;
    row.mean_miou = s / static_cast<double>(row.miou.size());
    os << to_string(row.method) << ',' << fmt_double(row.mean_miou) << ',' << row.params << ',' << row.act_bytes
       << ',' << row.flops << '\n';
  }
  res.csv = os.str();
  res.runs_csv = runs.str();
  write_text(out_dir / "compare_upsamplers.csv", res.csv);
  write_text(out_dir / "compare_upsamplers_runs.csv", res.runs_csv);
  return res;
}

// ---------------------------------------------------------------------------
// Scale sweep.

struct ScaleRow {
  std::string label;  // "restore" or "hr-baseline"
  int scale = 1;
  double lr_res = 0.0, hr_res = 0.0;
  double miou = 0.0;
  std::size_t params = 0;
  std::uint64_t act_bytes = 0;
  std::uint64_t flops = 0;
  double attn_slope_ratio = 1.0;
};

struct ScaleSweepResult {
  std::vector<ScaleRow> rows;
  std::string csv;

  const ScaleRow& restore_row(int s) const {
    for (const auto& r : rows)
      if (r.label == "restore" && r.scale == s) return r;
    throw UsageError("no sweep row for s=" + std::to_string(s));
  }
};

// Restore-last models for every s (two-stage) plus the HR-throughout
// baseline trained end to end for stage_a + stage_b epochs.
inline ScaleSweepResult sweep_scale(const ExperimentConfig& cfg, const fs::path& out_dir, bool with_baseline = true,
                                    const Logger& log = {}) {
  cfg.validate();
  for (int s : cfg.sweep_scales) downscale_scope(cfg.scope, s);  // divisibility up front
  ScaleSweepResult res;
  const RawDataset raw = synthesize_dataset(cfg);
  auto cost_fill = [&](ScaleRow& row, const ArchConfig& a) {
    const CostReport rep = estimate(a, cfg.scope, cfg.bytes_per_elem);
    row.params = static_cast<std::size_t>(rep.totals.params);
    row.act_bytes = rep.totals.act_bytes;
    row.flops = rep.totals.flops;
  };
  for (int s : cfg.sweep_scales) {
    ArchConfig a = cfg.arch;
    a.scale = s;
    a.upsample = UpsampleMethod::kRestore;
    const PreparedSet data = prepare(raw, cfg, a);
    StageAResult sa = run_stage_a(data, cfg, a, log);
    StageBResult sb = run_stage_b(data, cfg, a, sa.model.params, log);
    save_checkpoint(sb.model.params, (out_dir / ("sweep_scale_s" + std::to_string(s) + ".ckpt")).string());
    ScaleRow row;
    row.label = "restore";
    row.scale = s;
    row.lr_res = cfg.scope.r_x() * s;
    row.hr_res = cfg.scope.r_x();
    row.miou = sb.eval.miou;
    cost_fill(row, a);
    ArchConfig probe = a;
    probe.msa_layers = 0;
    row.attn_slope_ratio = sweep_msa(probe, cfg.scope, 1, cfg.bytes_per_elem).attn_slope_ratio();
    res.rows.push_back(row);
  }
  if (with_baseline) {
    ArchConfig a = hr_throughout(cfg.arch);
    const PreparedSet data = prepare(raw, cfg, a);
    PipelineModel m = PipelineModel::create(a, model_seed(cfg));
    TrainLog tl = train_end_to_end(m, data, cfg, cfg.stage_a_epochs + cfg.stage_b_epochs, cfg.stage_a_lr);
    const EvalResult ev = eval_miou(m, data, cfg.threshold);
    log("hr baseline: mIoU ", fmt_double(ev.miou, 4), " in ", fmt_double(tl.seconds, 1), " s");
    save_checkpoint(m.params, (out_dir / "sweep_scale_baseline.ckpt").string());
    ScaleRow row;
    row.label = "hr-baseline";
    row.scale = 1;
    row.lr_res = row.hr_res = cfg.scope.r_x();
    row.miou = ev.miou;
    cost_fill(row, a);
    row.attn_slope_ratio = 1.0;
    res.rows.push_back(row);
  }
  std::ostringstream os;
  os << csv_preamble(cfg) << "model,scale,lr_m_per_px,hr_m_per_px,miou,params,act_bytes,flops,attn_slope_ratio\n";
  for (const auto& r : res.rows) {
    os << r.label << ',' << r.scale << ',' << fmt_double(r.lr_res, 3) << ',' << fmt_double(r.hr_res, 3) << ','
       << fmt_double(r.miou) << ',' << r.params << ',' << r.act_bytes << ',' << r.flops << ','
       << fmt_double(r.attn_slope_ratio, 1) << '\n';
  }
  res.csv = os.str();
  write_text(out_dir / "sweep_scale.csv", res.csv);
  return res;
}

// ---------------------------------------------------------------------------
// MSA cost sweep: analytic series on the main scope plus measured tape peaks
// of one training step on the (small) msa_scope.

struct MsaSweepRow {
  int k = 0;
  std::uint64_t restore_last_bytes = 0, hr_bytes = 0;
  std::uint64_t restore_last_attn_bytes = 0, hr_attn_bytes = 0;
  std::uint64_t restore_last_flops = 0, hr_flops = 0;
  std::size_t measured_restore_last = 0, measured_hr = 0;
};

struct MsaSweepResult {
  std::vector<MsaSweepRow> rows;
  int scale = 2;
  double analytic_ratio = 0.0;
  double measured_ratio = 0.0;
  double measured_slope_restore_last = 0.0, measured_slope_hr = 0.0;
  std::string csv;
};

// Peak live tape bytes of one full training step (forward, focal loss,
// backward) of `arch` on a single synthesized sample over `scope`.
inline std::size_t measure_training_step(const ExperimentConfig& base, const ArchConfig& arch, const BevScope& scope) {
  ExperimentConfig cfg = base;
  cfg.scope = scope;
  cfg.arch = arch;
  cfg.n_train = 1;
  cfg.n_val = 1;
  cfg.drivable_min = 0.0;  // any scene will do for a memory probe
  cfg.drivable_max = 1.0;
  const RawDataset raw = synthesize_dataset(cfg);
  const PreparedSet data = prepare(raw, cfg, arch);
  PipelineModel m = PipelineModel::create(arch, model_seed(cfg));
  m.set_all_trainable(true);
  const PreparedSample& s = data.train.front();
  return measure_peak([&](Tape& tape) {
    Var z = forward_lr(tape, m, s.input, data.plan);
    Var loss = sigmoid_focal_loss(forward_hr_head(tape, m, z), s.hr_target, cfg.gamma, cfg.alpha);
    tape.backward(loss);
  });
}

inline MsaSweepResult sweep_msa_experiment(const ExperimentConfig& cfg, const fs::path& out_dir,
                                           const Logger& log = {}) {
  cfg.validate();
  MsaSweepResult res;
  res.scale = cfg.msa_scale;
  ArchConfig rl = cfg.arch;
  rl.scale = cfg.msa_scale;
  rl.upsample = UpsampleMethod::kRestore;
  downscale_scope(cfg.msa_scope, rl.scale);
  const MsaSweep an = sweep_msa(rl, cfg.msa_scope, 0, cfg.bytes_per_elem, cfg.sweep_msa_k);
  res.analytic_ratio = an.attn_slope_ratio();
  std::vector<double> ks, yr, yh;
  for (const auto& p : an.points) {
    MsaSweepRow row;
    row.k = p.k;
    row.restore_last_bytes = p.restore_last_bytes;
    row.hr_bytes = p.hr_bytes;
    row.restore_last_attn_bytes = p.restore_last_attn_bytes;
    row.hr_attn_bytes = p.hr_attn_bytes;
    row.restore_last_flops = p.restore_last_flops;
    row.hr_flops = p.hr_flops;
    ArchConfig a = rl;
    a.msa_layers = p.k;
    row.measured_restore_last = measure_training_step(cfg, a, cfg.msa_scope);
    row.measured_hr = measure_training_step(cfg, hr_throughout(a), cfg.msa_scope);
    log("msa k=", p.k, ": measured peak restore-last ", row.measured_restore_last, " B, hr ", row.measured_hr, " B");
    ks.push_back(p.k);
    yr.push_back(static_cast<double>(row.measured_restore_last));
    yh.push_back(static_cast<double>(row.measured_hr));
    res.rows.push_back(row);
  }
  if (ks.size() >= 2) {
    res.measured_slope_restore_last = regress_slope(ks, yr);
    res.measured_slope_hr = regress_slope(ks, yh);
    res.measured_ratio = res.measured_slope_hr / res.measured_slope_restore_last;
  }
  std::ostringstream os;
  os << csv_preamble(cfg)
     << "k,restore_last_bytes,hr_bytes,restore_last_attn_bytes,hr_attn_bytes,restore_last_flops,hr_flops,"
        "measured_restore_last_bytes,measured_hr_bytes\n";
  for (const auto& r : res.rows) {
    os << r.k << ',' << r.restore_last_bytes << ',' << r.hr_bytes << ',' << r.restore_last_attn_bytes << ','
       << r.hr_attn_bytes << ',' << r.restore_last_flops << ',' << r.hr_flops << ',' << r.measured_restore_last
       << ',' << r.measured_hr << '\n';
  }
  res.csv = os.str();
  std::ostringstream sum;
  sum << csv_preamble(cfg) << "scale,s4,analytic_attn_slope_ratio,measured_slope_ratio\n"
      << res.scale << ',' << res.scale * res.scale * res.scale * res.scale << ',' << fmt_double(res.analytic_ratio, 6)
      << ',' << fmt_double(res.measured_ratio, 6) << '\n';
  write_text(out_dir / "sweep_msa.csv", res.csv);
  write_text(out_dir / "sweep_msa_summary.csv", sum.str());
  return res;
}

// ---------------------------------------------------------------------------
// Rendering. Pixel row 0 is the top of the window (largest y).

inline std::array<std::uint8_t, 3> class_rgb(unsigned mask) {
  if (mask & (1u << 3)) return {230, 230, 60};   // crossing
  if (mask & (1u << 1)) return {220, 60, 60};    // divider
  if (mask & (1u << 2)) return {60, 140, 230};   // walkway
  if (mask & (1u << 0)) return {150, 150, 150};  // drivable
  return {20, 20, 20};
}

struct RgbImage {
  int w = 0, h = 0;
  std::vector<std::uint8_t> px;  // row-major RGB
  RgbImage(int w_, int h_) : w(w_), h(h_), px(static_cast<std::size_t>(w_) * h_ * 3, 0) {}
  void set(int x, int y, std::array<std::uint8_t, 3> c) {
    auto* p = px.data() + (static_cast<std::size_t>(y) * w + x) * 3;
    p[0] = c[0];
    p[1] = c[1];
    p[2] = c[2];
  }
  std::string ppm() const {
    std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    out.append(reinterpret_cast<const char*>(px.data()), px.size());
    return out;
  }
};

// (D, W, classes) tensor of 0/1 or thresholded logits -> image of size W x D.
inline RgbImage render_masks(const Tensor& t, double cut) {
  RgbImage img(t.w(), t.h());
  for (int v = 0; v < t.h(); ++v)
    for (int u = 0; u < t.w(); ++u) {
      unsigned mask = 0;
      for (int c = 0; c < t.c() && c < 8; ++c)
        if (t.at(v, u, c) > cut) mask |= 1u << c;
      img.set(u, t.h() - 1 - v, class_rgb(mask));
    }
  return img;
}

// Camera image (h, w, 3) with values in [0, 1]; rows as stored.
inline RgbImage render_rgb(const Tensor& t) {
  require_rank3(t, "render_rgb");
  RgbImage img(t.w(), t.h());
  for (int y = 0; y < t.h(); ++y)
    for (int x = 0; x < t.w(); ++x) {
      std::array<std::uint8_t, 3> c{};
      for (int k = 0; k < 3; ++k)
        c[static_cast<std::size_t>(k)] =
            static_cast<std::uint8_t>(std::lround(std::clamp(t.at(y, x, k), 0.0, 1.0) * 255.0));
      img.set(x, y, c);
    }
  return img;
}

inline RgbImage side_by_side(const RgbImage& a, const RgbImage& b, int gap = 2) {
  RgbImage out(a.w + gap + b.w, std::max(a.h, b.h));
  for (int y = 0; y < out.h; ++y)
    for (int x = 0; x < gap; ++x) out.set(a.w + x, y, {255, 255, 255});
  for (int y = 0; y < a.h; ++y)
    for (int x = 0; x < a.w; ++x)
      for (int k = 0; k < 3; ++k)
        out.px[(static_cast<std::size_t>(y) * out.w + x) * 3 + k] = a.px[(static_cast<std::size_t>(y) * a.w + x) * 3 + k];
  for (int y = 0; y < b.h; ++y)
    for (int x = 0; x < b.w; ++x)
      for (int k = 0; k < 3; ++k)
        out.px[(static_cast<std::size_t>(y) * out.w + a.w + gap + x) * 3 + k] =
            b.px[(static_cast<std::size_t>(y) * b.w + x) * 3 + k];
  return out;
}

}  // namespace bevrestore
