#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>

#include "ur3/alignment.hpp"
#include "ur3/degradation.hpp"
#include "ur3/nn/checkpoint.hpp"
#include "ur3/pipeline/config.hpp"
#include "ur3/pipeline/evaluate.hpp"
#include "ur3/pipeline/manifest.hpp"
#include "ur3/pipeline/restore.hpp"
#include "ur3/pipeline/training.hpp"

namespace fs = std::filesystem;
using namespace ur3;
using namespace ur3::pipeline;

namespace {

struct Common {
  std::string config;
  std::string profile = "desk";
  std::string dataset_root, checkpoint_dir, output_dir;
  std::optional<std::uint64_t> seed;
  std::optional<int64_t> iters;
  int log_every = 100;

  void add(CLI::App* app, bool training) {
    app->add_option("--config", config, "pipeline config (JSON)");
    app->add_option("--profile", profile, "defaults when no config is given")
        ->check(CLI::IsMember({"desk", "full"}));
    app->add_option("--dataset-root", dataset_root);
    app->add_option("--checkpoint-dir", checkpoint_dir);
    app->add_option("--output-dir", output_dir);
    app->add_option("--seed", seed);
    if (training) {
      app->add_option("--iters", iters, "override the stage's iteration count");
      app->add_option("--log-every", log_every);
    }
  }

  PipelineConfig load() const {
    PipelineConfig cfg = !config.empty()      ? load_config(config)
                         : profile == "full" ? PipelineConfig{}
                                              : PipelineConfig::desk();
    apply_env_overrides(cfg);
    if (!dataset_root.empty()) cfg.paths.dataset_root = dataset_root;
    if (!checkpoint_dir.empty()) cfg.paths.checkpoint_dir = checkpoint_dir;
    if (!output_dir.empty()) cfg.paths.output_dir = output_dir;
    if (seed) {
      cfg.seed = *seed;
      std::uint64_t k = 1;
      for (auto* s : {&cfg.training.stage1, &cfg.training.codec, &cfg.training.denoiser,
                      &cfg.training.control, &cfg.training.fidelity})
        s->seed = *seed + k++;
    }
    return cfg;
  }

  StageLog logger() const {
    const int every = log_every;
    return [every](const std::string& stage, int64_t it, double loss, double lr) {
      if (every > 0 && it % every == 0)
        std::cout << stage << " iter " << it << " loss " << loss << " lr " << lr << std::endl;
    };
  }
};

fs::path manifest_path(const PipelineConfig& cfg, const std::string& given) {
  return given.empty() ? cfg.paths.dataset_root / "manifest.json" : fs::path(given);
}

std::vector<fs::path> png_files(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
  std::sort(out.begin(), out.end());
  return out;
}

std::pair<std::string, std::string> split_pair(const std::string& s, const char* what) {
  auto pos = s.find('=');
  if (pos == std::string::npos || pos == 0) throw CLI::ValidationError(what, "expected NAME=VALUE, got " + s);
  return {s.substr(0, pos), s.substr(pos + 1)};
}

int cmd_synth(const Common& common, const std::string& out_dir, int count, int height, int width,
              double test_fraction) {
  auto cfg = common.load();
  const fs::path root = out_dir.empty() ? cfg.paths.dataset_root : fs::path(out_dir);
  fs::create_directories(root / "gt");
  fs::create_directories(root / "lq");
  const auto pairs = synthetic_pairs(count, height, width, cfg.seed);
  const int n_test = static_cast<int>(std::lround(test_fraction * count));
  DatasetManifest m;
  m.root = root;
  for (int i = 0; i < count; ++i) {
    char id[32];
    std::snprintf(id, sizeof id, "scene_%04d", i);
    SceneRecord r;
    r.scene_id = id;
    r.gt = fs::path("gt") / (std::string(id) + ".png");
    r.lq = {fs::path("lq") / (std::string(id) + ".png")};
    r.split = i < count - n_test ? Split::kTrain : Split::kTest;
    r.provenance = "synthetic:" + std::to_string(cfg.seed) + ":" + std::to_string(i);
    write_png(root / r.gt, pairs[i].clean);
    write_png(root / r.lq.front(), pairs[i].degraded);
    m.scenes.push_back(std::move(r));
  }
  save_manifest(root / "manifest.json", m);
  std::cout << "wrote " << count << " pairs (" << n_test << " test) to " << root << "\n";
  return 0;
}

int cmd_align(const std::string& reference, const std::string& moving, const std::string& out,
              const std::string& matches_csv, std::uint64_t seed, double threshold) {
  const Image ref = read_png(reference);
  const Image mov = read_png(moving);
  const auto matches = detect_and_match(mov, ref);
  if (!matches_csv.empty()) write_correspondences_csv(matches_csv, matches);
  RansacConfig rc;
  rc.seed = seed;
  rc.inlier_threshold = threshold;
  const auto fit = ransac_homography(matches, rc);
  write_png(out, warp_perspective(mov, fit.model, ref.height(), ref.width()));
  nlohmann::json j;
  j["homography"] = fit.model.matrix();
  j["matches"] = matches.size();
  j["inliers"] = fit.inlier_count;
  j["mean_reprojection_error"] = fit.mean_reprojection_error;
  std::cout << j.dump(2) << "\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& stage, const std::string& manifest,
              bool retrain_base) {
  auto cfg = common.load();
  auto& t = cfg.training;
  nn::TrainSchedule* sched = stage == "stage1"    ? &t.stage1
                             : stage == "vae"     ? &t.codec
                             : stage == "control" ? &t.control
                                                  : &t.fidelity;
  if (common.iters) {
    sched->total_iters = *common.iters;
    if (stage == "control") t.denoiser.total_iters = *common.iters;
  }
  cfg.validate();
  const auto data = load_training_set(load_manifest(manifest_path(cfg, manifest)), cfg);
  std::cout << "training " << stage << " on " << data.lq.size() << " images\n";
  const auto log = common.logger();
  std::vector<double> losses;
  if (stage == "stage1") {
    losses = train_stage1(cfg, data, log);
  } else if (stage == "vae") {
    losses = train_vae(cfg, data, log);
  } else if (stage == "control") {
    auto rep = train_control_stage(cfg, data, log, retrain_base);
    if (rep.pretrained_base)
      std::cout << "base denoiser pretrained, final loss " << rep.base_losses.back() << "\n";
    losses = rep.control_losses;
  } else {
    losses = train_fe_stage(cfg, data, log);
  }
  if (!losses.empty()) std::cout << stage << " final loss " << losses.back() << "\n";
  std::cout << "checkpoints in " << cfg.paths.checkpoint_dir << "\n";
  return 0;
}

int cmd_restore(const Common& common, const std::string& input, std::string output, bool skip_stage2,
                bool no_fidelity, const std::string& color, std::optional<int64_t> steps,
                const std::string& report_path) {
  auto cfg = common.load();
  if (!color.empty()) cfg.color.method = parse_color_method(color);
  if (steps) cfg.sampler_steps = *steps;
  cfg.validate();
  RestoreOptions opts;
  opts.skip_stage2 = skip_stage2;
  opts.use_fidelity = !no_fidelity;
  auto models = load_models(cfg, opts);

  std::vector<std::pair<fs::path, fs::path>> jobs;
  if (fs::is_directory(input)) {
    const fs::path out_dir = output.empty() ? cfg.paths.output_dir : fs::path(output);
    fs::create_directories(out_dir);
    for (const auto& p : png_files(input)) jobs.emplace_back(p, out_dir / p.filename());
  } else {
    if (output.empty()) output = (cfg.paths.output_dir / fs::path(input).filename()).string();
    if (fs::path(output).has_parent_path()) fs::create_directories(fs::path(output).parent_path());
    jobs.emplace_back(input, output);
  }
  nlohmann::json reports = nlohmann::json::array();
  int failures = 0;
  for (const auto& [in, out] : jobs) {
    try {
      auto res = restore_pipeline(cfg, models, in, opts);
      write_png(out, res.output);
      reports.push_back(to_json(res.report));
      std::cout << in.string() << " -> " << out.string() << "\n";
    } catch (const MissingStage1Error& e) {
      ++failures;
      reports.push_back({{"input", in.string()}, {"error", e.what()}});
      std::cerr << "error: " << e.what() << "\n";
    }
  }
  if (!report_path.empty()) {
    std::ofstream r(report_path);
    r << (jobs.size() == 1 && failures == 0 ? reports.front() : reports).dump(2) << "\n";
  }
  return failures == 0 ? 0 : 1;
}

int cmd_evaluate(const Common& common, const std::string& manifest, const std::string& split,
                 const std::vector<std::string>& methods, const std::vector<std::string>& plugins,
                 std::string out_dir, const std::string& resize) {
  auto cfg = common.load();
  const auto m = load_manifest(manifest_path(cfg, manifest));
  std::vector<MethodOutputs> outs;
  for (const auto& s : methods) {
    auto [name, dir] = split_pair(s, "--method");
    outs.push_back({name, dir});
  }
  if (outs.empty()) outs.push_back({"ur3", cfg.paths.output_dir});
  std::vector<MetricPlugin> ps;
  for (const auto& s : plugins) {
    auto [name, cmd] = split_pair(s, "--plugin");
    ps.push_back({name, cmd});
  }
  EvalOptions eo;
  if (!resize.empty()) {
    const auto x = resize.find('x');
    if (x == std::string::npos) throw CLI::ValidationError("--resize", "expected HEIGHTxWIDTH, got " + resize);
    eo.resize_height = std::stoi(resize.substr(0, x));
    eo.resize_width = std::stoi(resize.substr(x + 1));
  }
  const auto rep = evaluate(m, parse_split(split), outs, ps, eo);
  if (out_dir.empty()) out_dir = (cfg.paths.output_dir / "report").string();
  write_report(out_dir, rep);
  std::cout << rep.markdown();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ur3: unified raindrop and reflection removal"};
  app.require_subcommand(1);
  Common common;

  auto* synth = app.add_subcommand("synth", "generate a synthetic paired dataset with a manifest");
  std::string synth_out;
  int count = 16, height = 64, width = 64;
  double test_fraction = 0.25;
  common.add(synth, false);
  synth->add_option("--out", synth_out, "dataset directory (default: paths.dataset_root)");
  synth->add_option("--count", count)->check(CLI::PositiveNumber);
  synth->add_option("--height", height)->check(CLI::PositiveNumber);
  synth->add_option("--width", width)->check(CLI::PositiveNumber);
  synth->add_option("--test-fraction", test_fraction)->check(CLI::Range(0.0, 1.0));

  auto* align = app.add_subcommand("align", "register a degraded capture to its reference");
  std::string reference, moving, aligned_out, matches_csv;
  std::uint64_t align_seed = 0;
  double threshold = 3.0;
  align->add_option("--reference", reference)->required()->check(CLI::ExistingFile);
  align->add_option("--moving", moving)->required()->check(CLI::ExistingFile);
  align->add_option("--out", aligned_out)->required();
  align->add_option("--matches", matches_csv, "write correspondences as CSV");
  align->add_option("--seed", align_seed);
  align->add_option("--threshold", threshold, "RANSAC inlier threshold in pixels");

  std::string manifest;
  bool retrain_base = false;
  std::map<std::string, CLI::App*> trainers;
  for (const auto& [name, stage, help] :
       {std::tuple{"train-stage1", "stage1", "train the stage-I restorer"},
        std::tuple{"train-vae", "vae", "train the latent codec"},
        std::tuple{"train-control", "control", "train the control branch (pretrains the base denoiser if needed)"},
        std::tuple{"train-fe", "fidelity", "train the fidelity encoder against the frozen codec"}}) {
    auto* sub = app.add_subcommand(name, help);
    common.add(sub, true);
    sub->add_option("--manifest", manifest, "default: <dataset_root>/manifest.json");
    if (std::string(stage) == "control") sub->add_flag("--retrain-base", retrain_base);
    trainers[stage] = sub;
  }

  auto* restore = app.add_subcommand("restore", "restore an image or a directory of images");
  std::string input, output, color, report;
  bool skip_stage2 = false, no_fidelity = false;
  std::optional<int64_t> steps;
  common.add(restore, false);
  restore->add_option("--input", input)->required()->check(CLI::ExistingPath);
  restore->add_option("--output", output);
  restore->add_flag("--skip-stage2", skip_stage2, "return the stage-I result");
  restore->add_flag("--no-fidelity", no_fidelity, "decode without the fidelity encoder");
  restore->add_option("--color-correct", color)->check(CLI::IsMember({"normalization", "wavelet", "none"}));
  restore->add_option("--steps", steps, "sampler steps");
  restore->add_option("--report", report, "write the run report as JSON");

  auto* eval = app.add_subcommand("evaluate", "score restored outputs against ground truth");
  std::string split = "test", eval_out, eval_resize;
  std::vector<std::string> methods, plugins;
  common.add(eval, false);
  eval->add_option("--manifest", manifest);
  eval->add_option("--split", split)->check(CLI::IsMember({"train", "test"}));
  eval->add_option("--method", methods, "NAME=DIR, repeatable");
  eval->add_option("--plugin", plugins, "NAME=COMMAND, repeatable; prints one score per image");
  eval->add_option("--out", eval_out, "report directory");
  eval->add_option("--resize", eval_resize, "score at HEIGHTxWIDTH instead of native resolution");

  CLI11_PARSE(app, argc, argv);
  try {
    if (synth->parsed()) return cmd_synth(common, synth_out, count, height, width, test_fraction);
    if (align->parsed()) return cmd_align(reference, moving, aligned_out, matches_csv, align_seed, threshold);
    for (const auto& [stage, sub] : trainers)
      if (sub->parsed()) return cmd_train(common, stage, manifest, retrain_base);
    if (restore->parsed())
      return cmd_restore(common, input, output, skip_stage2, no_fidelity, color, steps, report);
    if (eval->parsed()) return cmd_evaluate(common, manifest, split, methods, plugins, eval_out, eval_resize);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
