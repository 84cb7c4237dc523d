#pragma once

// Architecture configuration shared by the sensor branches, the restoration
// pipeline and the cost model, plus small helpers for declaring and applying
// convolution parameters by name.

#include <cmath>
#include <random>
#include <string>

#include "bevrestore/errors.hpp"
#include "bevrestore/ops.hpp"
#include "bevrestore/params.hpp"
#include "bevrestore/tape.hpp"

namespace bevrestore {

enum class UpsampleMethod { kRestore, kNearest, kBilinear, kBicubic, kDeconvolution, kNone };
enum class RestoreWidth { kNormal, kSmall };

inline const char* to_string(UpsampleMethod m) {
  switch (m) {
    case UpsampleMethod::kRestore: return "restore";
    case UpsampleMethod::kNearest: return "nearest";
    case UpsampleMethod::kBilinear: return "bilinear";
    case UpsampleMethod::kBicubic: return "bicubic";
    case UpsampleMethod::kDeconvolution: return "deconvolution";
    case UpsampleMethod::kNone: return "none";
  }
  return "?";
}

inline UpsampleMethod parse_upsample_method(const std::string& s) {
  if (s == "restore") return UpsampleMethod::kRestore;
  if (s == "nearest") return UpsampleMethod::kNearest;
  if (s == "bilinear") return UpsampleMethod::kBilinear;
  if (s == "bicubic") return UpsampleMethod::kBicubic;
  if (s == "deconvolution") return UpsampleMethod::kDeconvolution;
  if (s == "none") return UpsampleMethod::kNone;
  throw ConfigError("unknown upsample method '" + s + "'");
}

// icnr: every sub-pixel phase starts with the same kernel, so a freshly
// initialized upsampler is nearest-neighbour upsampling of one conv.
enum class RestoreInit { kIcnr, kHe };

inline const char* to_string(RestoreInit i) { return i == RestoreInit::kIcnr ? "icnr" : "he"; }

inline RestoreInit parse_restore_init(const std::string& s) {
  if (s == "icnr") return RestoreInit::kIcnr;
  if (s == "he") return RestoreInit::kHe;
  throw ConfigError("unknown restore init '" + s + "'");
}

inline const char* to_string(RestoreWidth w) { return w == RestoreWidth::kNormal ? "normal" : "small"; }

inline RestoreWidth parse_restore_width(const std::string& s) {
  if (s == "normal") return RestoreWidth::kNormal;
  if (s == "small") return RestoreWidth::kSmall;
  throw ConfigError("unknown restore width '" + s + "'");
}

inline bool is_learnable(UpsampleMethod m) {
  return m == UpsampleMethod::kRestore || m == UpsampleMethod::kDeconvolution;
}

struct ArchConfig {
  int scale = 4;           // s: LR resolution = HR resolution * s
  int c_i = 8;             // camera BEV channels
  int c_p = 16;            // LiDAR BEV channels
  int c_f = 24;            // fused channels
  int c = 16;              // neck / restored channels
  int msa_layers = 0;      // k
  int heads = 2;
  UpsampleMethod upsample = UpsampleMethod::kRestore;
  RestoreWidth restore_width = RestoreWidth::kNormal;
  RestoreInit restore_init = RestoreInit::kIcnr;
  int classes = 4;
  int decoder_hidden = 16;

  // Sensor-side shapes.
  int z_bins = 4;
  int point_features = 1;  // per-point attributes after x y z
  int voxel_refine = 0;    // voxel grid is this much finer than the LR grid; 0 = scale (HR voxels)
  int depth_bins = 8;
  int image_h = 32;
  int image_w = 56;

  int lidar_in_channels() const { return z_bins * (1 + point_features); }
  int lidar_refine() const { return voxel_refine == 0 ? scale : voxel_refine; }

  void validate() const {
    auto pos = [](int v, const char* what) {
      if (v < 1) throw ConfigError(std::string(what) + " must be positive");
    };
    pos(scale, "scale");
    pos(c_i, "C_i");
    pos(c_p, "C_p");
    pos(c_f, "C_f");
    pos(c, "C");
    pos(heads, "heads");
    pos(classes, "classes");
    pos(decoder_hidden, "decoder_hidden");
    pos(z_bins, "z_bins");
    pos(depth_bins, "depth_bins");
    pos(image_h, "image_h");
    pos(image_w, "image_w");
    if (point_features < 0) throw ConfigError("point_features must be non-negative");
    if (voxel_refine < 0 || (voxel_refine & (voxel_refine - 1)) != 0) {
      throw ConfigError("voxel_refine must be 0 (= scale) or a power of two");
    }
    if (voxel_refine == 0 && (scale & (scale - 1)) != 0) {
      throw ConfigError("voxel_refine 0 needs a power-of-two scale");
    }
    if (msa_layers < 0) throw ConfigError("msa_layers must be non-negative");
    if (msa_layers > 0 && c % heads != 0) throw ConfigError("C must be divisible by heads");
    if (image_h % 2 != 0 || image_w % 2 != 0) throw ConfigError("image dims must be even");
    if (upsample == UpsampleMethod::kNone && scale != 1) {
      throw ConfigError("upsample method 'none' requires scale 1");
    }
  }
};

// Declares name.w (k,k,cin,cout) with He-uniform values and name.b zeros.
inline void add_conv(ParameterSet& ps, const std::string& name, int k, int cin, int cout,
                     std::mt19937_64& rng, bool bias = true) {
  const double bound = std::sqrt(6.0 / static_cast<double>(k * k * cin));
  ps.add(name + ".w", random_tensor({k, k, cin, cout}, rng, -bound, bound));
  if (bias) ps.add(name + ".b", Tensor({cout}));
}

inline Var apply_conv(Tape& tape, ParameterSet& ps, const std::string& name, const Var& x, int stride,
                      int pad) {
  Var w = tape.param(ps.at(name + ".w"));
  Var b = ps.contains(name + ".b") ? tape.param(ps.at(name + ".b")) : Var();
  return conv2d(x, w, b, stride, pad);
}

}  // namespace bevrestore
