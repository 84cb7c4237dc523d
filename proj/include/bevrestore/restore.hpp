#pragma once

// The restoration-last pipeline:
//
//   voxels, image -> encoder -> fuse -> neck (LR) -> restore (LR -> HR) -> decode
//
// Parameter groups: "encoder", "fuser", "neck", "restore", "decoder" and the
// stage-A LR head "lrhead". The restore operator is a short conv stack f
// expanding C channels to s*s*C followed by pixel_shuffle(., s).

#include <random>
#include <string>
#include <vector>

#include "bevrestore/arch.hpp"
#include "bevrestore/errors.hpp"
#include "bevrestore/ops.hpp"
#include "bevrestore/params.hpp"
#include "bevrestore/sensors.hpp"
#include "bevrestore/tape.hpp"
#include "bevrestore/tensor.hpp"

namespace bevrestore {

inline const std::vector<std::string>& pre_restore_groups() {
  static const std::vector<std::string> g{"encoder", "fuser", "neck"};
  return g;
}

// Transposed-conv weights (k*s, k*s, C_in, C) equivalent to pixel_shuffle of
// a k x k "same" conv with weights (k, k, C_in, s*s*C), k odd:
//   K[s*m + dy, s*n + dx, ci, c] = W[k-1-m, k-1-n, ci, c*s*s + dy*s + dx]
// with the output trimmed by equivalent_deconv_crop(k, s).
inline Tensor equivalent_deconv_kernel(const Tensor& conv, int s) {
  if (conv.rank() != 4 || conv.dim(0) != conv.dim(1) || conv.dim(0) % 2 == 0) {
    throw ShapeError("equivalent_deconv_kernel: expected (k,k,Cin,Cout) weights with odd k, got " +
                     shape_str(conv.shape()));
  }
  if (s < 1 || conv.dim(3) % (s * s) != 0) {
    throw ShapeError("equivalent_deconv_kernel: output channels not divisible by s*s");
  }
  const int k = conv.dim(0), cin = conv.dim(2), cw = conv.dim(3), cout = cw / (s * s), ks = k * s;
  Tensor out({ks, ks, cin, cout});
  for (int m = 0; m < k; ++m)
    for (int n = 0; n < k; ++n)
      for (int dy = 0; dy < s; ++dy)
        for (int dx = 0; dx < s; ++dx)
          for (int ci = 0; ci < cin; ++ci)
            for (int c = 0; c < cout; ++c)
              out[((static_cast<std::size_t>(s * m + dy) * ks + s * n + dx) * cin + ci) * cout + c] =
                  conv[((static_cast<std::size_t>(k - 1 - m) * k + (k - 1 - n)) * cin + ci) * cw + c * s * s +
                       dy * s + dx];
  return out;
}

struct PipelineModel {
  ArchConfig arch;
  ParameterSet params;

  // Each group draws from its own stream, so models that differ only in the
  // upsampler start from identical encoder/neck/decoder weights.
  static PipelineModel create(const ArchConfig& arch, std::uint64_t seed) {
    arch.validate();
    PipelineModel m;
    m.arch = arch;
    auto stream = [seed](std::uint64_t g) { return std::mt19937_64(seed * 0x9E3779B97F4A7C15ULL + g); };
    auto rng = stream(1);
    add_lidar_backbone_params(m.params, arch, rng);
    add_camera_backbone_params(m.params, arch, rng);
    rng = stream(2);
    add_conv(m.params, "fuser.conv", 3, arch.c_p + arch.c_i, arch.c_f, rng);
    rng = stream(3);
    add_conv(m.params, "neck.conv1", 3, arch.c_f, arch.c, rng);
    add_conv(m.params, "neck.conv2", 3, arch.c, arch.c, rng);
    const double bound = std::sqrt(3.0 / arch.c);
    for (int k = 0; k < arch.msa_layers; ++k) {
      const std::string base = "neck.msa" + std::to_string(k) + ".";
      for (const char* proj : {"q", "k", "v", "o"}) {
        m.params.add(base + proj, random_tensor({arch.c, arch.c}, rng, -bound, bound));
      }
    }
    rng = stream(4);
    add_restore_params(m.params, arch, rng);
    rng = stream(5);
    add_head_params(m.params, "decoder", arch, rng);
    rng = stream(6);
    if (arch.upsample != UpsampleMethod::kNone) add_head_params(m.params, "lrhead", arch, rng);
    return m;
  }

  static void add_restore_params(ParameterSet& ps, const ArchConfig& a, std::mt19937_64& rng) {
    if (!is_learnable(a.upsample)) return;
    const int s = a.scale;
    const int k = a.restore_width == RestoreWidth::kNormal ? 3 : 1;
    if (k == 3) add_conv(ps, "restore.conv1", 3, a.c, a.c, rng);
    // Expansion kernel (k, k, C, s*s*C) in pixel-shuffle channel order.
    const double bound = std::sqrt(6.0 / (k * k * a.c));
    Tensor expand;
    if (a.restore_init == RestoreInit::kIcnr) {
      const Tensor base = random_tensor({k, k, a.c, a.c}, rng, -bound, bound);
      expand = Tensor({k, k, a.c, s * s * a.c});
      for (std::size_t tap = 0; tap < static_cast<std::size_t>(k * k * a.c); ++tap)
        for (int c = 0; c < a.c; ++c)
          for (int ph = 0; ph < s * s; ++ph) expand[tap * s * s * a.c + c * s * s + ph] = base[tap * a.c + c];
    } else {
      expand = random_tensor({k, k, a.c, s * s * a.c}, rng, -bound, bound);
    }
    if (a.upsample == UpsampleMethod::kRestore) {
      ps.add("restore.expand.w", std::move(expand));
      ps.add("restore.expand.b", Tensor({s * s * a.c}));
    } else {
      // The same draw, laid out as the equivalent transposed-conv kernel.
      ps.add("restore.deconv.w", equivalent_deconv_kernel(expand, s));
      ps.add("restore.deconv.b", Tensor({a.c}));
    }
  }

  static void add_head_params(ParameterSet& ps, const std::string& group, const ArchConfig& a,
                              std::mt19937_64& rng) {
    add_conv(ps, group + ".conv1", 3, a.c, a.decoder_hidden, rng);
    add_conv(ps, group + ".conv2", 3, a.decoder_hidden, a.classes, rng);
  }

  void freeze_pre_restore() {
    for (const auto& g : pre_restore_groups()) params.set_group_trainable(g, false);
  }
  void set_all_trainable(bool t) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i].trainable = t;
  }
};

// f_nu: concat -> 3x3 conv to C_f -> ReLU.
inline Var fuse(Tape& tape, ParameterSet& ps, const Var& z_p, const Var& z_i) {
  const Tensor& a = z_p.value();
  const Tensor& b = z_i.value();
  if (a.rank() != 3 || b.rank() != 3 || a.h() != b.h() || a.w() != b.w()) {
    throw ShapeError("fuse: LiDAR " + shape_str(a.shape()) + " and camera " + shape_str(b.shape()) +
                     " maps must share the LR grid");
  }
  return relu(apply_conv(tape, ps, "fuser.conv", concat_channels(z_p, z_i), 1, 1));
}

// B_psi: residual two-conv block followed by `msa_layers` attention blocks,
// all on the LR grid.
inline Var neck(Tape& tape, ParameterSet& ps, const Var& z, int msa_layers, int heads) {
  Var h1 = relu(apply_conv(tape, ps, "neck.conv1", z, 1, 1));
  Var h2 = apply_conv(tape, ps, "neck.conv2", h1, 1, 1);
  Var x = relu(add(h1, h2));
  for (int k = 0; k < msa_layers; ++k) {
    const std::string base = "neck.msa" + std::to_string(k) + ".";
    MsaWeights w{tape.param(ps.at(base + "q")), tape.param(ps.at(base + "k")), tape.param(ps.at(base + "v")),
                 tape.param(ps.at(base + "o"))};
    x = msa_layer(x, w, heads);
  }
  return x;
}

// S = PS o f: (h, w, C) -> (s*h, s*w, C).
inline Var restore(Tape& tape, ParameterSet& ps, const Var& z_lr, int s) {
  Var x = z_lr;
  if (ps.contains("restore.conv1.w")) {
    x = relu(apply_conv(tape, ps, "restore.conv1", x, 1, 1));
    x = apply_conv(tape, ps, "restore.expand", x, 1, 1);
  } else {
    x = apply_conv(tape, ps, "restore.expand", x, 1, 0);
  }
  return pixel_shuffle(x, s);
}

// Border trim that aligns a (k*s)-wide, stride-s transposed conv with a k x k
// "same" conv followed by pixel_shuffle(., s).
inline int equivalent_deconv_crop(int k, int s) { return s * (k - 1) / 2; }

// Optional 3x3 conv + ReLU (as in restore), then a stride-s transposed conv
// with a (k*s) x (k*s) kernel and per-channel bias.
inline Var deconv_upsample(Tape& tape, ParameterSet& ps, const Var& z_lr, int s) {
  Var x = z_lr;
  if (ps.contains("restore.conv1.w")) x = relu(apply_conv(tape, ps, "restore.conv1", x, 1, 1));
  Var w = tape.param(ps.at("restore.deconv.w"));
  const int k = w.value().dim(0) / s;
  return add_channel_bias(transposed_conv2d(x, w, s, equivalent_deconv_crop(k, s)),
                          tape.param(ps.at("restore.deconv.b")));
}

// Hand-crafted interpolation or the learnable deconvolution.
inline Var baseline_upsample(Tape& tape, ParameterSet& ps, const Var& z_lr, int s, UpsampleMethod method) {
  switch (method) {
    case UpsampleMethod::kNearest: return interp_upsample(z_lr, s, InterpMethod::kNearest);
    case UpsampleMethod::kBilinear: return interp_upsample(z_lr, s, InterpMethod::kBilinear);
    case UpsampleMethod::kBicubic: return interp_upsample(z_lr, s, InterpMethod::kBicubic);
    case UpsampleMethod::kDeconvolution: return deconv_upsample(tape, ps, z_lr, s);
    default:
      throw ConfigError(std::string("baseline_upsample does not handle method '") + to_string(method) + "'");
  }
}

// D_phi (or the LR head): two 3x3 convs ending in raw class logits.
inline Var decode(Tape& tape, ParameterSet& ps, const Var& z, const std::string& group = "decoder") {
  Var h = relu(apply_conv(tape, ps, group + ".conv1", z, 1, 1));
  return apply_conv(tape, ps, group + ".conv2", h, 1, 1);
}

// ---------------------------------------------------------------------------
// Whole-model forward passes.

struct SampleInput {
  Tensor voxels;  // Z-flattened voxel grid, (r*d, r*w, z_bins*(1+f)), r = arch.lidar_refine()
  Tensor image;   // (image_h, image_w, 3)
};

// Encoder + fusion + neck: the LR feature map z (d, w, C).
inline Var forward_lr(Tape& tape, PipelineModel& m, const SampleInput& in, const SplatPlan& plan) {
  Var vox = tape.constant(in.voxels);
  Var img = tape.constant(in.image);
  Var z_p = lidar_backbone(tape, m.params, vox);
  CameraFeatures cf = camera_backbone(tape, m.params, img);
  Var z_i = lift_splat(cf.features, cf.depth_logits, plan);
  Var z = fuse(tape, m.params, z_p, z_i);
  return neck(tape, m.params, z, m.arch.msa_layers, m.arch.heads);
}

// LR features -> HR logits via the configured upsampler and the decoder.
inline Var forward_hr_head(Tape& tape, PipelineModel& m, const Var& z_lr) {
  const ArchConfig& a = m.arch;
  Var up;
  switch (a.upsample) {
    case UpsampleMethod::kRestore: up = restore(tape, m.params, z_lr, a.scale); break;
    case UpsampleMethod::kNone: up = z_lr; break;
    default: up = baseline_upsample(tape, m.params, z_lr, a.scale, a.upsample); break;
  }
  return decode(tape, m.params, up, "decoder");
}

inline Var forward_lr_head(Tape& tape, PipelineModel& m, const Var& z_lr) {
  return decode(tape, m.params, z_lr, "lrhead");
}

}  // namespace bevrestore
