#pragma once

// Experiment configuration, dataset synthesis, the two-stage training
// protocol and global-count mIoU evaluation.
//
// Stage A trains encoder + fuser + neck with a temporary LR head on LR labels
// over the downscaled scope. Stage B freezes those groups and trains the
// upsampler + decoder on HR labels.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"

#include "bevrestore/arch.hpp"
#include "bevrestore/bevgrid.hpp"
#include "bevrestore/costmodel.hpp"
#include "bevrestore/errors.hpp"
#include "bevrestore/ops.hpp"
#include "bevrestore/params.hpp"
#include "bevrestore/restore.hpp"
#include "bevrestore/scenegen.hpp"
#include "bevrestore/sensors.hpp"
#include "bevrestore/tape.hpp"

namespace bevrestore {

using Json = nlohmann::ordered_json;

struct CameraConfig {
  double height = 2.0;
  double pitch_deg = 25.0;
  double yaw_deg = 0.0;
  double fx = 28.0, fy = 28.0;
  double depth_min = 2.0, depth_max = 34.0;
};

struct ExperimentConfig {
  BevScope scope = BevScope::square(-16.0, 16.0, 0.5);
  ArchConfig arch;
  // dataset
  int n_train = 64;
  int n_val = 16;
  std::uint64_t seed = 1;
  SceneParams scene;
  LidarParams lidar;
  ZConfig z;
  CameraConfig camera;
  LabelPolicy label_policy = LabelPolicy::kFraction;
  // scenes whose HR drivable share falls outside this range are redrawn
  double drivable_min = 0.05;
  double drivable_max = 0.95;
  // training
  int stage_a_epochs = 30;
  double stage_a_lr = 1e-3;
  int stage_b_epochs = 30;
  double stage_b_lr = 1e-3;
  int batch = 4;
  bool cache_frozen_features = true;
  // loss / eval
  double gamma = 2.0;
  double alpha = 0.5;
  double threshold = 0.5;
  // experiments
  int replicas = 1;  // compare-upsamplers repeats with seed, seed+1, ...
  std::vector<int> sweep_scales{1, 2, 4, 8};
  std::vector<int> sweep_msa_k{0, 1, 2, 4, 8};
  BevScope msa_scope = BevScope::square(-4.0, 4.0, 0.5);
  int msa_scale = 2;
  int bytes_per_elem = 4;
  std::string out_dir = "out";

  void validate() const {
    arch.validate();
    scene.validate();
    if (n_train < 1 || n_val < 1) throw ConfigError("dataset sizes must be positive");
    if (batch < 1) throw ConfigError("batch must be positive");
    if (stage_a_epochs < 0 || stage_b_epochs < 0) throw ConfigError("epochs must be non-negative");
    if (!(stage_a_lr > 0.0) || !(stage_b_lr > 0.0)) throw ConfigError("learning rates must be positive");
    if (!(threshold > 0.0 && threshold < 1.0)) throw ConfigError("threshold must be in (0,1)");
    if (replicas < 1) throw ConfigError("replicas must be positive");
    if (!(drivable_min >= 0.0 && drivable_min < drivable_max && drivable_max <= 1.0)) {
      throw ConfigError("drivable_fraction must be an increasing pair in [0,1]");
    }
    if (!(z.z_max > z.z_min) || z.z_bins != arch.z_bins) throw ConfigError("z config must match arch.z_bins");
    if (arch.depth_bins < 1) throw ConfigError("depth_bins must be positive");
    downscale_scope(scope, arch.scale);  // divisibility
  }

  CameraModel camera_model() const {
    return CameraModel::looking(camera.height, camera.pitch_deg, camera.yaw_deg, arch.image_h, arch.image_w,
                                camera.fx, camera.fy,
                                CameraModel::linspace_bins(camera.depth_min, camera.depth_max, arch.depth_bins));
  }
};

// ---------------------------------------------------------------------------
// JSON round trip. Unknown keys are rejected so typos surface as config errors.

namespace detail {

inline Json scope_json(const BevScope& s) {
  return Json{{"lb_x", s.lb_x()}, {"ub_x", s.ub_x()}, {"lb_y", s.lb_y()},
              {"ub_y", s.ub_y()}, {"r_x", s.r_x()},   {"r_y", s.r_y()}};
}

inline BevScope scope_from(const Json& j) {
  return BevScope(j.at("lb_x").get<double>(), j.at("ub_x").get<double>(), j.at("lb_y").get<double>(),
                  j.at("ub_y").get<double>(), j.at("r_x").get<double>(), j.at("r_y").get<double>());
}

// Reads j[key] into v when present.
template <class T>
void opt(const Json& j, const char* key, T& v) {
  if (j.contains(key)) v = j.at(key).get<T>();
}

inline void reject_unknown(const Json& j, std::initializer_list<const char*> known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be an object");
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("unknown key '" + it.key() + "' in " + where);
  }
}

}  // namespace detail

inline Json to_json(const ExperimentConfig& c) {
  const ArchConfig& a = c.arch;
  Json j;
  j["scope"] = detail::scope_json(c.scope);
  j["arch"] = {{"scale", a.scale},
               {"c_i", a.c_i},
               {"c_p", a.c_p},
               {"c_f", a.c_f},
               {"c", a.c},
               {"msa_layers", a.msa_layers},
               {"heads", a.heads},
               {"upsample", to_string(a.upsample)},
               {"restore_width", to_string(a.restore_width)},
               {"restore_init", to_string(a.restore_init)},
               {"classes", a.classes},
               {"decoder_hidden", a.decoder_hidden},
               {"z_bins", a.z_bins},
               {"point_features", a.point_features},
               {"voxel_refine", a.voxel_refine},
               {"depth_bins", a.depth_bins},
               {"image_h", a.image_h},
               {"image_w", a.image_w}};
  const SceneParams& s = c.scene;
  j["dataset"] = {{"n_train", c.n_train},
                  {"n_val", c.n_val},
                  {"seed", c.seed},
                  {"label_policy", to_string(c.label_policy)},
                  {"drivable_fraction", {c.drivable_min, c.drivable_max}},
                  {"scene",
                   {{"bound", s.bound},
                    {"grid_min", s.grid_min},
                    {"grid_max", s.grid_max},
                    {"jitter", s.jitter},
                    {"road_width_min", s.road_width_min},
                    {"road_width_max", s.road_width_max},
                    {"prune_prob", s.prune_prob},
                    {"divider_width", s.divider_width},
                    {"walkway_width", s.walkway_width},
                    {"crossing_prob", s.crossing_prob},
                    {"crossing_depth", s.crossing_depth},
                    {"boxes", s.boxes},
                    {"box_size_min", s.box_size_min},
                    {"box_size_max", s.box_size_max},
                    {"box_height_min", s.box_height_min},
                    {"box_height_max", s.box_height_max}}},
                  {"lidar",
                   {{"rays", c.lidar.rays},
                    {"max_range", c.lidar.max_range},
                    {"ring_ranges", c.lidar.ring_ranges},
                    {"range_noise", c.lidar.range_noise},
                    {"height_noise", c.lidar.height_noise},
                    {"intensity_noise", c.lidar.intensity_noise}}},
                  {"z", {{"z_min", c.z.z_min}, {"z_max", c.z.z_max}}},
                  {"camera",
                   {{"height", c.camera.height},
                    {"pitch_deg", c.camera.pitch_deg},
                    {"yaw_deg", c.camera.yaw_deg},
                    {"fx", c.camera.fx},
                    {"fy", c.camera.fy},
                    {"depth_min", c.camera.depth_min},
                    {"depth_max", c.camera.depth_max}}}};
  j["training"] = {{"stage_a", {{"epochs", c.stage_a_epochs}, {"lr", c.stage_a_lr}}},
                   {"stage_b", {{"epochs", c.stage_b_epochs}, {"lr", c.stage_b_lr}}},
                   {"batch", c.batch},
                   {"cache_frozen_features", c.cache_frozen_features}};
  j["loss"] = {{"gamma", c.gamma}, {"alpha", c.alpha}};
  j["eval"] = {{"threshold", c.threshold}};
  j["experiments"] = {{"replicas", c.replicas},
                      {"sweep_scales", c.sweep_scales},
                      {"sweep_msa_k", c.sweep_msa_k},
                      {"msa_scope", detail::scope_json(c.msa_scope)},
                      {"msa_scale", c.msa_scale},
                      {"bytes_per_elem", c.bytes_per_elem}};
  j["outputs"] = {{"dir", c.out_dir}};
  return j;
}

inline ExperimentConfig config_from_json(const Json& j) {
  using detail::opt;
  ExperimentConfig c;
  try {
    detail::reject_unknown(j, {"scope", "arch", "dataset", "training", "loss", "eval", "experiments", "outputs"},
                           "config");
    if (j.contains("scope")) c.scope = detail::scope_from(j.at("scope"));
    if (j.contains("arch")) {
      const Json& a = j.at("arch");
      detail::reject_unknown(a, {"scale", "c_i", "c_p", "c_f", "c", "msa_layers", "heads", "upsample",
                                 "restore_width", "restore_init", "classes", "decoder_hidden", "z_bins", "point_features",
                                 "voxel_refine", "depth_bins", "image_h", "image_w"},
                             "arch");
      ArchConfig& x = c.arch;
      opt(a, "scale", x.scale);
      opt(a, "c_i", x.c_i);
      opt(a, "c_p", x.c_p);
      opt(a, "c_f", x.c_f);
      opt(a, "c", x.c);
      opt(a, "msa_layers", x.msa_layers);
      opt(a, "heads", x.heads);
      if (a.contains("upsample")) x.upsample = parse_upsample_method(a.at("upsample").get<std::string>());
      if (a.contains("restore_width")) x.restore_width = parse_restore_width(a.at("restore_width").get<std::string>());
      if (a.contains("restore_init")) x.restore_init = parse_restore_init(a.at("restore_init").get<std::string>());
      opt(a, "classes", x.classes);
      opt(a, "decoder_hidden", x.decoder_hidden);
      opt(a, "z_bins", x.z_bins);
      opt(a, "point_features", x.point_features);
      opt(a, "voxel_refine", x.voxel_refine);
      opt(a, "depth_bins", x.depth_bins);
      opt(a, "image_h", x.image_h);
      opt(a, "image_w", x.image_w);
    }
    if (j.contains("dataset")) {
      const Json& d = j.at("dataset");
      detail::reject_unknown(d, {"n_train", "n_val", "seed", "label_policy", "drivable_fraction", "scene", "lidar", "z",
                                 "camera"},
                             "dataset");
      opt(d, "n_train", c.n_train);
      opt(d, "n_val", c.n_val);
      opt(d, "seed", c.seed);
      if (d.contains("label_policy")) c.label_policy = parse_label_policy(d.at("label_policy").get<std::string>());
      if (d.contains("drivable_fraction")) {
        const auto r = d.at("drivable_fraction").get<std::vector<double>>();
        if (r.size() != 2) throw ConfigError("dataset.drivable_fraction must be [min, max]");
        c.drivable_min = r[0];
        c.drivable_max = r[1];
      }
      if (d.contains("scene")) {
        const Json& s = d.at("scene");
        detail::reject_unknown(s, {"bound", "grid_min", "grid_max", "jitter", "road_width_min", "road_width_max",
                                   "prune_prob", "divider_width", "walkway_width", "crossing_prob",
                                   "crossing_depth", "boxes", "box_size_min", "box_size_max", "box_height_min",
                                   "box_height_max"},
                               "dataset.scene");
        SceneParams& p = c.scene;
        opt(s, "bound", p.bound);
        opt(s, "grid_min", p.grid_min);
        opt(s, "grid_max", p.grid_max);
        opt(s, "jitter", p.jitter);
        opt(s, "road_width_min", p.road_width_min);
        opt(s, "road_width_max", p.road_width_max);
        opt(s, "prune_prob", p.prune_prob);
        opt(s, "divider_width", p.divider_width);
        opt(s, "walkway_width", p.walkway_width);
        opt(s, "crossing_prob", p.crossing_prob);
        opt(s, "crossing_depth", p.crossing_depth);
        opt(s, "boxes", p.boxes);
        opt(s, "box_size_min", p.box_size_min);
        opt(s, "box_size_max", p.box_size_max);
        opt(s, "box_height_min", p.box_height_min);
        opt(s, "box_height_max", p.box_height_max);
      }
      if (d.contains("lidar")) {
        const Json& l = d.at("lidar");
        detail::reject_unknown(l, {"rays", "max_range", "ring_ranges", "range_noise", "height_noise",
                                   "intensity_noise"},
                               "dataset.lidar");
        opt(l, "rays", c.lidar.rays);
        opt(l, "max_range", c.lidar.max_range);
        opt(l, "ring_ranges", c.lidar.ring_ranges);
        opt(l, "range_noise", c.lidar.range_noise);
        opt(l, "height_noise", c.lidar.height_noise);
        opt(l, "intensity_noise", c.lidar.intensity_noise);
      }
      if (d.contains("z")) {
        const Json& z = d.at("z");
        detail::reject_unknown(z, {"z_min", "z_max"}, "dataset.z");
        opt(z, "z_min", c.z.z_min);
        opt(z, "z_max", c.z.z_max);
      }
      if (d.contains("camera")) {
        const Json& k = d.at("camera");
        detail::reject_unknown(k, {"height", "pitch_deg", "yaw_deg", "fx", "fy", "depth_min", "depth_max"},
                               "dataset.camera");
        opt(k, "height", c.camera.height);
        opt(k, "pitch_deg", c.camera.pitch_deg);
        opt(k, "yaw_deg", c.camera.yaw_deg);
        opt(k, "fx", c.camera.fx);
        opt(k, "fy", c.camera.fy);
        opt(k, "depth_min", c.camera.depth_min);
        opt(k, "depth_max", c.camera.depth_max);
      }
    }
    if (j.contains("training")) {
      const Json& t = j.at("training");
      detail::reject_unknown(t, {"stage_a", "stage_b", "batch", "cache_frozen_features"}, "training");
      if (t.contains("stage_a")) {
        detail::reject_unknown(t.at("stage_a"), {"epochs", "lr"}, "training.stage_a");
        opt(t.at("stage_a"), "epochs", c.stage_a_epochs);
        opt(t.at("stage_a"), "lr", c.stage_a_lr);
      }
      if (t.contains("stage_b")) {
        detail::reject_unknown(t.at("stage_b"), {"epochs", "lr"}, "training.stage_b");
        opt(t.at("stage_b"), "epochs", c.stage_b_epochs);
        opt(t.at("stage_b"), "lr", c.stage_b_lr);
      }
      opt(t, "batch", c.batch);
      opt(t, "cache_frozen_features", c.cache_frozen_features);
    }
    if (j.contains("loss")) {
      detail::reject_unknown(j.at("loss"), {"gamma", "alpha"}, "loss");
      opt(j.at("loss"), "gamma", c.gamma);
      opt(j.at("loss"), "alpha", c.alpha);
    }
    if (j.contains("eval")) {
      detail::reject_unknown(j.at("eval"), {"threshold"}, "eval");
      opt(j.at("eval"), "threshold", c.threshold);
    }
    if (j.contains("experiments")) {
      const Json& e = j.at("experiments");
      detail::reject_unknown(e, {"replicas", "sweep_scales", "sweep_msa_k", "msa_scope", "msa_scale",
                                 "bytes_per_elem"},
                             "experiments");
      opt(e, "replicas", c.replicas);
      opt(e, "sweep_scales", c.sweep_scales);
      opt(e, "sweep_msa_k", c.sweep_msa_k);
      if (e.contains("msa_scope")) c.msa_scope = detail::scope_from(e.at("msa_scope"));
      opt(e, "msa_scale", c.msa_scale);
      opt(e, "bytes_per_elem", c.bytes_per_elem);
    }
    if (j.contains("outputs")) {
      detail::reject_unknown(j.at("outputs"), {"dir"}, "outputs");
      opt(j.at("outputs"), "dir", c.out_dir);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  c.z.z_bins = c.arch.z_bins;
  c.validate();
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot open config '" + path + "'");
  Json j;
  try {
    j = Json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

inline std::string config_echo(const ExperimentConfig& c) { return to_json(c).dump(); }

// ---------------------------------------------------------------------------
// Seeds. Every random draw comes from the single dataset seed.

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t index = 0) {
  // splitmix64 finalizer over a combined key
  std::uint64_t z = seed * 0x9E3779B97F4A7C15ULL + stream * 0xBF58476D1CE4E5B9ULL + index * 0x94D049BB133111EBULL;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

enum SeedStream : std::uint64_t {
  kTrainScenes = 1,
  kValScenes = 2,
  kLidarNoise = 3,
  kModelInit = 4,
  kShuffleA = 5,
  kShuffleB = 6,
};

// ---------------------------------------------------------------------------
// Dataset.

struct RawSample {
  VectorScene scene;
  PointCloud cloud;
  Tensor image;
  SemanticMap hr;  // at the HR scope
};

struct RawDataset {
  std::vector<RawSample> train, val;
};

inline RawSample synthesize_sample(const ExperimentConfig& cfg, std::uint64_t scene_seed,
                                   std::uint64_t noise_seed, const CameraModel& cam) {
  RawSample s;
  s.scene = generate_scene(scene_seed, cfg.scene);
  LidarParams lp = cfg.lidar;
  lp.seed = noise_seed;
  s.cloud = simulate_lidar(s.scene, SensorPose{}, lp);
  s.image = simulate_camera(s.scene, cam);
  s.hr = rasterize(s.scene, cfg.scope);
  return s;
}

inline constexpr int kMaxSceneRedraws = 64;

// Scene i of a stream; attempt 0 keeps the plain derived seed, later attempts
// (after a drivable-share rejection) move to a disjoint index range.
inline RawSample synthesize_checked(const ExperimentConfig& cfg, SeedStream stream, std::uint64_t i,
                                    std::uint64_t noise_seed, const CameraModel& cam) {
  for (std::uint64_t attempt = 0; attempt < kMaxSceneRedraws; ++attempt) {
    RawSample s = synthesize_sample(cfg, derive_seed(cfg.seed, stream, i + (attempt << 32)), noise_seed, cam);
    const double f = s.hr.fraction(static_cast<std::size_t>(SemanticClass::kDrivable));
    if (f >= cfg.drivable_min && f <= cfg.drivable_max) return s;
  }
  throw ConfigError("no scene within the drivable_fraction bounds after " + std::to_string(kMaxSceneRedraws) +
                    " draws");
}

inline RawDataset synthesize_dataset(const ExperimentConfig& cfg) {
  const CameraModel cam = cfg.camera_model();
  RawDataset ds;
  for (int i = 0; i < cfg.n_train; ++i) {
    const auto k = static_cast<std::uint64_t>(i);
    ds.train.push_back(synthesize_checked(cfg, kTrainScenes, k, derive_seed(cfg.seed, kLidarNoise, k), cam));
  }
  for (int i = 0; i < cfg.n_val; ++i) {
    const auto k = static_cast<std::uint64_t>(i);
    ds.val.push_back(synthesize_checked(cfg, kValScenes, k, derive_seed(cfg.seed, kLidarNoise, 1000000ULL + k), cam));
  }
  return ds;
}

// Model-ready tensors for one architecture (the voxel grid depends on s).
struct PreparedSample {
  SampleInput input;
  Tensor hr_target;  // (D, W, classes)
  Tensor lr_target;  // (d, w, classes)
};

struct PreparedSet {
  ArchConfig arch;
  BevScope hr_scope, lr_scope;
  SplatPlan plan;
  std::vector<PreparedSample> train, val;
};

inline PreparedSample prepare_sample(const RawSample& raw, const ExperimentConfig& cfg, const ArchConfig& arch) {
  const BevScope lr = downscale_scope(cfg.scope, arch.scale);
  const BevScope vox = upscale_scope(lr, arch.lidar_refine());
  ZConfig zc = cfg.z;
  zc.z_bins = arch.z_bins;
  PreparedSample p;
  p.input.voxels = flatten_z(voxelize(raw.cloud, vox, zc));
  p.input.image = raw.image;
  p.hr_target = raw.hr.to_tensor();
  p.lr_target = lr_label_tensor(raw.hr, arch.scale, cfg.label_policy);
  return p;
}

inline PreparedSet prepare(const RawDataset& ds, const ExperimentConfig& cfg, const ArchConfig& arch) {
  arch.validate();
  PreparedSet ps;
  ps.arch = arch;
  ps.hr_scope = cfg.scope;
  ps.lr_scope = downscale_scope(cfg.scope, arch.scale);
  ps.plan = make_splat_plan(cfg.camera_model(), ps.lr_scope, arch.image_h / 2, arch.image_w / 2);
  for (const auto& r : ds.train) ps.train.push_back(prepare_sample(r, cfg, arch));
  for (const auto& r : ds.val) ps.val.push_back(prepare_sample(r, cfg, arch));
  return ps;
}

// ---------------------------------------------------------------------------
// Evaluation.

struct ConfusionCounts {
  std::vector<std::uint64_t> tp, fp, fn;
  explicit ConfusionCounts(int classes = 0)
      : tp(static_cast<std::size_t>(classes)), fp(static_cast<std::size_t>(classes)),
        fn(static_cast<std::size_t>(classes)) {}

  // logits and targets are (H, W, classes); pred = sigmoid(logit) > threshold,
  // ground truth = target >= 0.5 (soft LR targets count by majority).
  void accumulate(const Tensor& logits, const Tensor& target, double threshold) {
    if (logits.shape() != target.shape()) {
      throw ConfigError("evaluation: prediction " + shape_str(logits.shape()) + " vs ground truth " +
                        shape_str(target.shape()));
    }
    const std::size_t k = tp.size();
    if (static_cast<std::size_t>(logits.c()) != k) throw ConfigError("evaluation: class count mismatch");
    const double cut = std::log(threshold / (1.0 - threshold));  // sigmoid(z) > t  <=>  z > logit(t)
    for (std::size_t i = 0; i < logits.size(); ++i) {
      const std::size_t c = i % k;
      const bool p = logits[i] > cut;
      const bool g = target[i] >= 0.5;
      if (p && g) ++tp[c];
      else if (p) ++fp[c];
      else if (g) ++fn[c];
    }
  }
};

struct EvalResult {
  std::vector<std::string> classes;
  std::vector<double> iou;
  double miou = 0.0;
  std::string config;
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
};

inline EvalResult finalize(const ConfusionCounts& cc, std::vector<std::string> classes) {
  EvalResult r;
  r.classes = std::move(classes);
  for (std::size_t c = 0; c < cc.tp.size(); ++c) {
    const std::uint64_t uni = cc.tp[c] + cc.fp[c] + cc.fn[c];
    r.iou.push_back(uni == 0 ? 1.0 : static_cast<double>(cc.tp[c]) / static_cast<double>(uni));
  }
  r.miou = r.iou.empty() ? 0.0 : std::accumulate(r.iou.begin(), r.iou.end(), 0.0) / static_cast<double>(r.iou.size());
  return r;
}

// Runs `fn` with every parameter marked frozen so the tape keeps no closures.
template <class F>
auto without_grad(PipelineModel& m, F&& fn) {
  std::vector<bool> saved(m.params.size());
  for (std::size_t i = 0; i < m.params.size(); ++i) {
    saved[i] = m.params[i].trainable;
    m.params[i].trainable = false;
  }
  struct Restore {
    PipelineModel& m;
    std::vector<bool>& saved;
    ~Restore() {
      for (std::size_t i = 0; i < m.params.size(); ++i) m.params[i].trainable = saved[i];
    }
  } restore_flags{m, saved};
  return fn();
}

inline Tensor predict_lr_features(PipelineModel& m, const PreparedSample& s, const SplatPlan& plan) {
  return without_grad(m, [&] {
    Tape tape;
    return forward_lr(tape, m, s.input, plan).value();
  });
}

inline Tensor predict_hr_logits(PipelineModel& m, const PreparedSample& s, const SplatPlan& plan) {
  return without_grad(m, [&] {
    Tape tape;
    Var z = forward_lr(tape, m, s.input, plan);
    return forward_hr_head(tape, m, z).value();
  });
}

inline Tensor predict_lr_logits(PipelineModel& m, const PreparedSample& s, const SplatPlan& plan) {
  return without_grad(m, [&] {
    Tape tape;
    Var z = forward_lr(tape, m, s.input, plan);
    return forward_lr_head(tape, m, z).value();
  });
}

// HR mIoU over the validation split with global counts.
inline EvalResult eval_miou(PipelineModel& m, const PreparedSet& data, double threshold) {
  if (!(m.arch.scale == data.arch.scale) || !(downscale_scope(data.hr_scope, m.arch.scale) == data.lr_scope)) {
    throw ConfigError("eval_miou: model and dataset scopes differ");
  }
  const auto t0 = std::chrono::steady_clock::now();
  ConfusionCounts cc(m.arch.classes);
  for (const auto& s : data.val) cc.accumulate(predict_hr_logits(m, s, data.plan), s.hr_target, threshold);
  EvalResult r = finalize(cc, default_class_names());
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// LR-head mIoU against LR labels (stage-A progress).
inline EvalResult eval_lr_miou(PipelineModel& m, const PreparedSet& data, double threshold) {
  ConfusionCounts cc(m.arch.classes);
  for (const auto& s : data.val) cc.accumulate(predict_lr_logits(m, s, data.plan), s.lr_target, threshold);
  return finalize(cc, default_class_names());
}

// ---------------------------------------------------------------------------
// Training.

struct TrainLog {
  std::vector<double> epoch_loss;  // mean per-sample loss per epoch
  double seconds = 0.0;
  std::size_t peak_bytes = 0;
};

struct StepHooks {
  // Called after the first backward of a run, before the optimizer step.
  std::function<void(const PipelineModel&)> after_first_backward;
};

namespace detail {

// Generic minibatch loop. `loss_of(tape, index)` builds the loss for one
// training sample on a fresh tape.
inline TrainLog run_epochs(PipelineModel& m, int n, int epochs, double lr, int batch, std::uint64_t shuffle_seed,
                           const std::function<Var(Tape&, std::size_t)>& loss_of, const StepHooks& hooks,
                           const char* stage) {
  TrainLog log;
  const auto t0 = std::chrono::steady_clock::now();
  Adam opt(lr);
  std::mt19937_64 rng(shuffle_seed);
  std::vector<std::size_t> order(static_cast<std::size_t>(n));
  bool first = true;
  for (int e = 0; e < epochs; ++e) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(batch));
      m.params.zero_grad();
      const auto where = [&] {
        return std::string(stage) + ": epoch " + std::to_string(e) + " step " + std::to_string(opt.steps()) +
               " (lr " + std::to_string(lr) + ")";
      };
      for (std::size_t i = b0; i < b1; ++i) {
        Tape tape;
        try {
          Var loss = loss_of(tape, order[i]);
          const double lv = loss.value()[0];
          if (!std::isfinite(lv)) throw NumericError("non-finite loss");
          total += lv;
          tape.backward(scale(loss, 1.0 / static_cast<double>(b1 - b0)));
        } catch (const NumericError& err) {
          throw NumericError(where() + ": " + err.what());
        }
        log.peak_bytes = std::max(log.peak_bytes, tape.peak_bytes());
      }
      if (first && hooks.after_first_backward) hooks.after_first_backward(m);
      first = false;
      opt.step(m.params);
    }
    log.epoch_loss.push_back(total / static_cast<double>(n));
  }
  log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return log;
}

}  // namespace detail

// Stage A: encoder + fuser + neck + LR head on LR labels.
inline TrainLog train_stage_a(PipelineModel& m, const PreparedSet& data, const ExperimentConfig& cfg,
                              const StepHooks& hooks = {}) {
  if (!m.params.contains("lrhead.conv1.w")) throw ConfigError("stage A needs a model with an LR head");
  m.set_all_trainable(false);
  for (const char* g : {"encoder", "fuser", "neck", "lrhead"}) m.params.set_group_trainable(g, true);
  auto loss_of = [&](Tape& tape, std::size_t i) {
    const PreparedSample& s = data.train[i];
    Var z = forward_lr(tape, m, s.input, data.plan);
    return sigmoid_focal_loss(forward_lr_head(tape, m, z), s.lr_target, cfg.gamma, cfg.alpha);
  };
  return detail::run_epochs(m, static_cast<int>(data.train.size()), cfg.stage_a_epochs, cfg.stage_a_lr, cfg.batch,
                            derive_seed(cfg.seed, kShuffleA), loss_of, hooks, "stage A");
}

// Stage B: pre-restore groups frozen; upsampler + decoder trained on HR
// labels. With cache_frozen_features the frozen LR features are computed once
// per sample (identical values, far fewer FLOPs).
inline TrainLog train_stage_b(PipelineModel& m, const PreparedSet& data, const ExperimentConfig& cfg,
                              const StepHooks& hooks = {}) {
  m.set_all_trainable(false);
  m.params.set_group_trainable("restore", true);
  m.params.set_group_trainable("decoder", true);
  std::vector<Tensor> cached;
  if (cfg.cache_frozen_features)
    for (const auto& s : data.train) cached.push_back(predict_lr_features(m, s, data.plan));
  auto loss_of = [&](Tape& tape, std::size_t i) {
    const PreparedSample& s = data.train[i];
    Var z = cfg.cache_frozen_features ? tape.constant(cached[i]) : forward_lr(tape, m, s.input, data.plan);
    return sigmoid_focal_loss(forward_hr_head(tape, m, z), s.hr_target, cfg.gamma, cfg.alpha);
  };
  return detail::run_epochs(m, static_cast<int>(data.train.size()), cfg.stage_b_epochs, cfg.stage_b_lr, cfg.batch,
                            derive_seed(cfg.seed, kShuffleB), loss_of, hooks, "stage B");
}

// Single-stage training of every group on HR labels (the HR-throughout
// baseline, which has no LR head).
inline TrainLog train_end_to_end(PipelineModel& m, const PreparedSet& data, const ExperimentConfig& cfg, int epochs,
                                 double lr) {
  m.set_all_trainable(true);
  if (m.params.contains("lrhead.conv1.w")) m.params.set_group_trainable("lrhead", false);
  auto loss_of = [&](Tape& tape, std::size_t i) {
    const PreparedSample& s = data.train[i];
    Var z = forward_lr(tape, m, s.input, data.plan);
    return sigmoid_focal_loss(forward_hr_head(tape, m, z), s.hr_target, cfg.gamma, cfg.alpha);
  };
  return detail::run_epochs(m, static_cast<int>(data.train.size()), epochs, lr, cfg.batch,
                            derive_seed(cfg.seed, kShuffleA), loss_of, {}, "end-to-end");
}

// Builds a stage-B model for `arch` from a stage-A checkpoint: pre-restore
// groups are copied, the LR head is dropped, the rest is freshly initialized.
inline PipelineModel model_from_stage_a(const ArchConfig& arch, const ParameterSet& stage_a,
                                        std::uint64_t init_seed) {
  PipelineModel m = PipelineModel::create(arch, init_seed);
  assign_groups(m.params, stage_a, pre_restore_groups());
  m.params.remove_group("lrhead");
  return m;
}

inline std::uint64_t model_seed(const ExperimentConfig& cfg) { return derive_seed(cfg.seed, kModelInit); }

}  // namespace bevrestore
