// bevrestore command line: dataset generation, training, evaluation, the
// ablation sweeps, cost reports and rendering.
//
// Exit code 0 on success; on failure one line "error <class>: <message>" on
// stderr and exit code 1 (2 for command-line usage errors).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "bevrestore/experiments.hpp"

namespace br = bevrestore;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool quiet = false;
};

br::ExperimentConfig resolve(const Common& c) {
  br::ExperimentConfig cfg = c.config.empty() ? br::ExperimentConfig{} : br::load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
  cfg.validate();
  fs::create_directories(cfg.out_dir);
  br::write_text(fs::path(cfg.out_dir) / "config.json", br::to_json(cfg).dump(2) + "\n");
  return cfg;
}

void add_common(CLI::App* sub, Common& c) {
  sub->add_option("--config", c.config, "experiment config (JSON)");
  sub->add_option("--seed", c.seed, "override the dataset seed");
  sub->add_option("--out-dir", c.out_dir, "output directory");
  sub->add_flag("--quiet", c.quiet, "no progress log");
}

void cmd_gen_scenes(const br::ExperimentConfig& cfg, const br::Logger& log) {
  const fs::path out = cfg.out_dir;
  const br::RawDataset ds = br::synthesize_dataset(cfg);
  auto dump = [&](const std::vector<br::RawSample>& set, const std::string& split) {
    for (std::size_t i = 0; i < set.size(); ++i) {
      const std::string stem = split + "_" + std::to_string(i);
      std::ostringstream scene, cloud;
      br::write_scene(scene, set[i].scene);
      br::write_point_cloud(cloud, set[i].cloud);
      br::write_text(out / "scenes" / (stem + ".scene"), scene.str());
      br::write_text(out / "clouds" / (stem + ".pts"), cloud.str());
      br::write_semantic_map(set[i].hr, out / "labels", stem);
      br::write_text(out / "images" / (stem + ".ppm"), br::render_rgb(set[i].image).ppm());
    }
  };
  dump(ds.train, "train");
  dump(ds.val, "val");
  log("wrote ", ds.train.size(), " train and ", ds.val.size(), " val samples to ", out.string());
}

void write_eval(const br::ExperimentConfig& cfg, const br::EvalResult& ev, const fs::path& path) {
  std::ostringstream os;
  os << br::csv_preamble(cfg) << "class,iou\n";
  for (std::size_t c = 0; c < ev.classes.size(); ++c) os << ev.classes[c] << ',' << br::fmt_double(ev.iou[c]) << '\n';
  os << "mean," << br::fmt_double(ev.miou) << '\n';
  br::write_text(path, os.str());
}

void cmd_train(const br::ExperimentConfig& cfg, const br::Logger& log) {
  const fs::path out = cfg.out_dir;
  const br::RawDataset raw = br::synthesize_dataset(cfg);
  const br::PreparedSet data = br::prepare(raw, cfg, cfg.arch);
  std::ostringstream tl;
  tl << br::csv_preamble(cfg) << "stage,epoch,loss\n";
  br::EvalResult ev;
  if (cfg.arch.upsample == br::UpsampleMethod::kNone) {
    br::PipelineModel m = br::PipelineModel::create(cfg.arch, br::model_seed(cfg));
    const br::TrainLog l = br::train_end_to_end(m, data, cfg, cfg.stage_a_epochs + cfg.stage_b_epochs, cfg.stage_a_lr);
    for (std::size_t e = 0; e < l.epoch_loss.size(); ++e) tl << "end_to_end," << e << ',' << br::fmt_double(l.epoch_loss[e], 8) << '\n';
    br::save_checkpoint(m.params, (out / "model.ckpt").string());
    ev = br::eval_miou(m, data, cfg.threshold);
  } else {
    br::StageAResult a = br::run_stage_a(data, cfg, cfg.arch, log);
    br::save_checkpoint(a.model.params, (out / "stage_a.ckpt").string());
    br::StageBResult b = br::run_stage_b(data, cfg, cfg.arch, a.model.params, log);
    br::save_checkpoint(b.model.params, (out / "model.ckpt").string());
    for (std::size_t e = 0; e < a.log.epoch_loss.size(); ++e) tl << "a," << e << ',' << br::fmt_double(a.log.epoch_loss[e], 8) << '\n';
    for (std::size_t e = 0; e < b.log.epoch_loss.size(); ++e) tl << "b," << e << ',' << br::fmt_double(b.log.epoch_loss[e], 8) << '\n';
    ev = b.eval;
  }
  br::write_text(out / "train_log.csv", tl.str());
  write_eval(cfg, ev, out / "eval.csv");
  log("mIoU ", br::fmt_double(ev.miou, 4));
}

br::PipelineModel load_model(const br::ExperimentConfig& cfg, const std::string& ckpt) {
  br::PipelineModel m = br::PipelineModel::create(cfg.arch, br::model_seed(cfg));
  const br::ParameterSet loaded = br::load_checkpoint(ckpt);
  br::assign_groups(m.params, loaded, {"encoder", "fuser", "neck", "restore", "decoder"});
  m.params.remove_group("lrhead");
  return m;
}

void cmd_eval(const br::ExperimentConfig& cfg, const std::string& ckpt, const br::Logger& log) {
  br::PipelineModel m = load_model(cfg, ckpt);
  const br::RawDataset raw = br::synthesize_dataset(cfg);
  const br::PreparedSet data = br::prepare(raw, cfg, cfg.arch);
  const br::EvalResult ev = br::eval_miou(m, data, cfg.threshold);
  write_eval(cfg, ev, fs::path(cfg.out_dir) / "eval.csv");
  log("mIoU ", br::fmt_double(ev.miou, 4), " (", br::fmt_double(ev.seconds, 1), " s)");
}

void cmd_render(const br::ExperimentConfig& cfg, const std::string& ckpt, int index, const br::Logger& log) {
  br::ExperimentConfig one = cfg;
  const br::RawDataset raw = br::synthesize_dataset(one);
  if (index < 0 || index >= static_cast<int>(raw.val.size())) throw br::UsageError("render index out of range");
  const br::RawDataset pick{{}, {raw.val[static_cast<std::size_t>(index)]}};
  const br::PreparedSet data = br::prepare(pick, cfg, cfg.arch);
  const br::Tensor& gt = data.val.front().hr_target;
  const br::RgbImage gt_img = br::render_masks(gt, 0.5);
  const fs::path out = cfg.out_dir;
  br::write_text(out / "render_gt.ppm", gt_img.ppm());
  if (!ckpt.empty()) {
    br::PipelineModel m = load_model(cfg, ckpt);
    const br::Tensor logits = br::predict_hr_logits(m, data.val.front(), data.plan);
    const double cut = std::log(cfg.threshold / (1.0 - cfg.threshold));
    const br::RgbImage pred = br::render_masks(logits, cut);
    br::write_text(out / "render_pred.ppm", pred.ppm());
    br::write_text(out / "render_compare.ppm", br::side_by_side(gt_img, pred).ppm());
  }
  log("rendered val sample ", index, " to ", out.string());
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bevrestore: restoration-last BEV segmentation laboratory"};
  app.require_subcommand(1);
  Common common;
  std::string ckpt;
  int index = 0;

  auto* gen = app.add_subcommand("gen-scenes", "synthesize scenes, point clouds, images and HR labels");
  auto* train = app.add_subcommand("train", "two-stage training of the configured model");
  auto* eval = app.add_subcommand("eval", "HR mIoU of a checkpoint on the validation split");
  auto* cmp = app.add_subcommand("compare-upsamplers", "shared stage A, one stage B per upsampler");
  auto* ssc = app.add_subcommand("sweep-scale", "restore-last models for each scale plus an HR baseline");
  auto* smsa = app.add_subcommand("sweep-msa", "analytic and measured memory versus MSA layer count");
  auto* cost = app.add_subcommand("cost-report", "analytic per-stage cost of the configured model");
  auto* rnd = app.add_subcommand("render", "ground truth / prediction PPM images of a validation scene");
  for (auto* sub : {gen, train, eval, cmp, ssc, smsa, cost, rnd}) add_common(sub, common);
  eval->add_option("--checkpoint", ckpt, "model checkpoint")->required();
  rnd->add_option("--checkpoint", ckpt, "model checkpoint (omit for ground truth only)");
  rnd->add_option("--index", index, "validation sample index");
  bool no_baseline = false;
  ssc->add_flag("--no-baseline", no_baseline, "skip the HR-throughout baseline row");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error usage_error: " << e.what() << '\n';
    return 2;
  }

  try {
    const br::ExperimentConfig cfg = resolve(common);
    br::Logger log;
    log.quiet = common.quiet;
    const fs::path out = cfg.out_dir;
    if (*gen) cmd_gen_scenes(cfg, log);
    else if (*train) cmd_train(cfg, log);
    else if (*eval) cmd_eval(cfg, ckpt, log);
    else if (*cmp) {
      const br::CompareResult r = br::compare_upsamplers(cfg, out, log);
      std::cout << r.csv;
    } else if (*ssc) {
      const br::ScaleSweepResult r = br::sweep_scale(cfg, out, !no_baseline, log);
      std::cout << r.csv;
    } else if (*smsa) {
      const br::MsaSweepResult r = br::sweep_msa_experiment(cfg, out, log);
      std::cout << r.csv;
      log("attention slope ratio ", br::fmt_double(r.analytic_ratio, 3), " (analytic), ",
          br::fmt_double(r.measured_ratio, 3), " (measured)");
    } else if (*cost) {
      const br::CostReport rep = br::estimate(cfg.arch, cfg.scope, cfg.bytes_per_elem);
      const std::string text = br::csv_preamble(cfg) + rep.csv();
      br::write_text(out / "cost_report.csv", text);
      std::cout << rep.csv();
    } else if (*rnd) {
      cmd_render(cfg, ckpt, index, log);
    }
  } catch (const br::Error& e) {
    std::cerr << "error " << e.kind() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    std::cerr << "error io_error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error internal_error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
