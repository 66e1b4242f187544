#include "torch_doctest.hpp"

#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>

#include "test_util.hpp"
#include "ur3/degradation.hpp"
#include "ur3/metrics.hpp"
#include "ur3/nn/checkpoint.hpp"
#include "ur3/pipeline/config.hpp"
#include "ur3/pipeline/evaluate.hpp"
#include "ur3/pipeline/manifest.hpp"
#include "ur3/pipeline/restore.hpp"

using namespace ur3;
using namespace ur3::pipeline;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ur3_" + tag + "_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

PipelineConfig tiny_config(const fs::path& ckpt) {
  auto cfg = PipelineConfig::desk();
  cfg.paths.checkpoint_dir = ckpt;
  cfg.models.restorer.base_channels = 8;
  cfg.models.restorer.blocks_per_level = {0, 1, 1, 1, 1};
  cfg.models.restorer.heads_per_level = {1, 1, 2, 2};
  cfg.models.codec.base_channels = 8;
  cfg.models.codec.channel_mults = {1, 1, 2, 2};
  cfg.models.denoiser.base_channels = 8;
  cfg.models.denoiser.channel_mults = {1, 2};
  cfg.models.modulate.channels = 8;
  cfg.models.modulate.heads = 2;
  cfg.models.modulate.layers = 1;
  cfg.models.gate_hidden = 8;
  cfg.sampler_steps = 4;
  return cfg;
}

// Randomly initialised checkpoints; enough for wiring, shapes and determinism.
void write_models(const PipelineConfig& cfg, bool with_restorer = true) {
  fs::create_directories(cfg.paths.checkpoint_dir);
  torch::manual_seed(11);
  if (with_restorer) {
    nn::Restorer r(cfg.models.restorer);
    nn::save_restorer(cfg.checkpoint(kStage1Checkpoint), r, 0);
  }
  nn::CodecEncoder enc(cfg.models.codec);
  nn::CodecDecoder dec(cfg.models.codec);
  nn::save_codec_encoder(cfg.checkpoint(kEncoderCheckpoint), enc);
  nn::save_codec_decoder(cfg.checkpoint(kDecoderCheckpoint), dec);
  nn::Denoiser unet(cfg.models.denoiser);
  const auto sched = cfg.noise_schedule();
  nn::save_denoiser(cfg.checkpoint(kDenoiserCheckpoint), unet, sched, 0);
  nn::ControlBranch branch(cfg.control_config());
  branch->init_from(unet, nn::denoiser_arch_hash(unet->cfg, sched));
  // give the branch a non-zero effect so conditions matter
  {
    torch::NoGradGuard ng;
    for (auto& p : branch->zero_convs->parameters()) p.normal_(0.0, 0.05);
    for (auto& p : branch->zero_middle->parameters()) p.normal_(0.0, 0.05);
  }
  nn::save_control_branch(cfg.checkpoint(kControlCheckpoint), branch, 0);
  auto fe_cfg = cfg.fe_config();
  nn::FidelityEncoder fe(fe_cfg);
  nn::save_fidelity_encoder(cfg.checkpoint(kFidelityCheckpoint), fe, 0);
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> dir_bytes(const fs::path& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir))
    if (e.is_regular_file()) out[fs::relative(e.path(), dir).string()] = file_bytes(e.path());
  return out;
}

bool same(const Image& a, const Image& b) {
  return a.same_shape(b) && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

DatasetManifest small_manifest(const fs::path& root, int n_test) {
  DatasetManifest m;
  m.root = root;
  fs::create_directories(root / "gt");
  fs::create_directories(root / "lq");
  const auto pairs = synthetic_pairs(n_test, 32, 32, 3);
  for (int i = 0; i < n_test; ++i) {
    SceneRecord r;
    r.scene_id = "s" + std::to_string(i);
    r.gt = fs::path("gt") / (r.scene_id + ".png");
    r.lq = {fs::path("lq") / (r.scene_id + ".png")};
    r.split = Split::kTest;
    write_png(root / r.gt, pairs[i].clean);
    write_png(root / r.lq.front(), pairs[i].degraded);
    m.scenes.push_back(r);
  }
  return m;
}

}  // namespace

TEST_CASE("config json round trip and partial overrides") {
  auto cfg = PipelineConfig::desk();
  cfg.seed = 77;
  cfg.sampler_steps = 20;
  cfg.color.method = ColorMethod::kWavelet;
  cfg.stage1_backend = Stage1Backend::kExternal;
  cfg.external_stage1_dirs = {"a", "b"};
  cfg.training.control.total_iters = 123;
  const auto j = to_json(cfg);
  const auto back = config_from_json(j);
  CHECK(to_json(back) == j);
  CHECK(back.condition_arity() == 3);

  const auto partial = config_from_json(nlohmann::json{{"seed", 5}, {"sampler_steps", 10}});
  CHECK(partial.seed == 5);
  CHECK(partial.sampler_steps == 10);
  CHECK(partial.models.codec.base_channels == PipelineConfig::desk().models.codec.base_channels);

  TempDir tmp("cfg");
  save_config(tmp.path / "c.json", cfg);
  CHECK(to_json(load_config(tmp.path / "c.json")) == j);

  auto bad = PipelineConfig::desk();
  bad.sampler_steps = 0;
  CHECK_THROWS(bad.validate());
  bad = PipelineConfig::desk();
  bad.stage1_backend = Stage1Backend::kExternal;
  CHECK_THROWS(bad.validate());
  CHECK_THROWS(parse_stage1_backend("nope"));
}

TEST_CASE("environment variables override paths") {
  auto cfg = PipelineConfig::desk();
  ::setenv("UR3_DATASET_ROOT", "/tmp/ds", 1);
  ::setenv("UR3_CHECKPOINT_DIR", "/tmp/ck", 1);
  ::setenv("UR3_OUTPUT_DIR", "/tmp/out", 1);
  apply_env_overrides(cfg);
  CHECK(cfg.paths.dataset_root == fs::path("/tmp/ds"));
  CHECK(cfg.paths.checkpoint_dir == fs::path("/tmp/ck"));
  CHECK(cfg.paths.output_dir == fs::path("/tmp/out"));
  ::unsetenv("UR3_DATASET_ROOT");
  ::unsetenv("UR3_CHECKPOINT_DIR");
  ::unsetenv("UR3_OUTPUT_DIR");
  auto untouched = PipelineConfig::desk();
  apply_env_overrides(untouched);
  CHECK(untouched.paths.dataset_root == fs::path("data"));
}

TEST_CASE("manifest splits must be disjoint") {
  auto scene = [](std::string id, std::string gt, std::string lq, Split s) {
    SceneRecord r;
    r.scene_id = std::move(id);
    r.gt = gt;
    r.lq = {lq};
    r.split = s;
    return r;
  };
  DatasetManifest ok;
  ok.scenes = {scene("a", "gt/a.png", "lq/a.png", Split::kTrain), scene("b", "gt/b.png", "lq/b.png", Split::kTest)};
  CHECK_NOTHROW(ok.validate());
  CHECK(ok.split(Split::kTrain).size() == 1);

  auto dup = ok;
  dup.scenes[1].scene_id = "a";
  CHECK_THROWS_AS(dup.validate(), ManifestError);
  auto shared_gt = ok;
  shared_gt.scenes[1].gt = "gt/a.png";
  CHECK_THROWS_AS(shared_gt.validate(), ManifestError);
  auto shared_lq = ok;
  shared_lq.scenes[1].lq = {"lq/a.png"};
  CHECK_THROWS_AS(shared_lq.validate(), ManifestError);

  TempDir tmp("manifest");
  save_manifest(tmp.path / "m.json", ok);
  const auto loaded = load_manifest(tmp.path / "m.json");
  CHECK(loaded.root == tmp.path);
  CHECK(loaded.scenes.size() == 2);
  CHECK(loaded.resolve("gt/a.png") == tmp.path / "gt/a.png");
  auto j = to_json(dup);
  CHECK_THROWS_AS(manifest_from_json(j, tmp.path), ManifestError);
}

TEST_CASE("evaluation report: headers, oracles, means and absent outputs") {
  TempDir tmp("eval");
  const auto m = small_manifest(tmp.path / "data", 3);
  const fs::path partial = tmp.path / "partial";
  fs::create_directories(partial);
  fs::copy_file(m.root / "lq/s0.png", partial / "s0.png");
  // a half-size output is resized to the ground truth
  write_png(partial / "s1.png", resize_bilinear(read_png(m.root / "gt/s1.png"), 16, 16));

  std::vector<MethodOutputs> methods{{"gt", m.root / "gt"}, {"lq", m.root / "lq"}, {"partial", partial}};
  std::vector<MetricPlugin> plugins{{"half", "echo 0.5 #"}, {"broken", "false"}};
  const auto rep = evaluate(m, Split::kTest, methods, plugins);
  CHECK(rep.rows.size() == 9);

  std::istringstream rows(rep.rows_csv()), summary(rep.summary_csv());
  std::string line;
  std::getline(rows, line);
  CHECK(line == "scene_id,image,method,psnr,ssim,half,broken,status,note");
  std::getline(summary, line);
  CHECK(line == "method,psnr,ssim,half,broken,evaluated,absent");
  CHECK(rep.markdown().rfind("| Method | PSNR | SSIM | half | broken | Evaluated | Absent |", 0) == 0);
  CHECK(rep.markdown().find("Absent outputs:") != std::string::npos);

  const auto sums = rep.summary();
  REQUIRE(sums.size() == 3);
  CHECK(sums[0].mean_psnr == doctest::Approx(100.0));
  CHECK(sums[0].mean_ssim == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(*sums[0].plugin_means[0] == doctest::Approx(0.5));
  CHECK_FALSE(sums[0].plugin_means[1].has_value());

  double mean = 0;
  for (const auto& r : rep.rows)
    if (r.method == "lq") {
      const auto out = read_png(m.root / "lq" / r.image);
      const auto gt = read_png(m.root / "gt" / r.image);
      CHECK(r.psnr == doctest::Approx(psnr(out, gt)).epsilon(1e-12));
      mean += r.psnr / 3;
    }
  CHECK(std::abs(sums[1].mean_psnr - mean) < 1e-9);

  CHECK(sums[2].evaluated == 2);
  CHECK(sums[2].absent == 1);
  int resized = 0;
  for (const auto& r : rep.rows) {
    if (r.method != "partial") continue;
    if (r.image == "s2.png") CHECK(r.note.rfind("absent", 0) == 0);
    if (r.note.rfind("resized", 0) == 0) ++resized;
  }
  CHECK(resized == 1);

  EvalOptions small;
  small.resize_height = 16;
  small.resize_width = 16;
  const auto resized_rep = evaluate(m, Split::kTest, {methods[1]}, {}, small);
  const auto gt0 = resize_bilinear(read_png(m.root / "gt/s0.png"), 16, 16);
  const auto lq0 = resize_bilinear(read_png(m.root / "lq/s0.png"), 16, 16);
  CHECK(resized_rep.rows[0].psnr == doctest::Approx(psnr(lq0, gt0)).epsilon(1e-12));
  small.resize_width = 0;
  CHECK_THROWS(evaluate(m, Split::kTest, {methods[1]}, {}, small));

  write_report(tmp.path / "report", rep);
  for (const char* f : {"rows.csv", "summary.csv", "report.md"}) CHECK(fs::exists(tmp.path / "report" / f));
}

TEST_CASE("missing checkpoints give an actionable error") {
  TempDir tmp("missing");
  auto cfg = tiny_config(tmp.path / "none");
  try {
    load_models(cfg);
    FAIL("expected MissingCheckpointError");
  } catch (const MissingCheckpointError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("stage1.pt") != std::string::npos);
    CHECK(msg.find("ur3 train-stage1") != std::string::npos);
  }
  write_models(cfg);
  fs::remove(cfg.checkpoint(kFidelityCheckpoint));
  CHECK_THROWS_WITH_AS(load_models(cfg), doctest::Contains("ur3 train-fe"), MissingCheckpointError);
  RestoreOptions no_fe;
  no_fe.use_fidelity = false;
  CHECK_NOTHROW(load_models(cfg, no_fe));
}

TEST_CASE("restore wiring: skip-stage2, determinism, shapes and untouched inputs") {
  TempDir tmp("restore");
  auto cfg = tiny_config(tmp.path / "ck");
  write_models(cfg);
  const fs::path in_dir = tmp.path / "in";
  fs::create_directories(in_dir);
  write_png(in_dir / "x.png", testing::random_image(44, 60, 1));
  const auto before_inputs = dir_bytes(in_dir);
  const auto before_ckpt = dir_bytes(cfg.paths.checkpoint_dir);

  auto models = load_models(cfg);
  RestoreOptions skip;
  skip.skip_stage2 = true;
  const auto s1 = restore_pipeline(cfg, models, in_dir / "x.png", skip);
  CHECK(same(s1.output, s1.stage1.front()));
  CHECK(same(s1.output, quantize8(nn::restore(models.restorer, read_png(in_dir / "x.png")))));

  const auto a = restore_pipeline(cfg, models, in_dir / "x.png");
  const auto b = restore_pipeline(cfg, models, in_dir / "x.png");
  CHECK(a.output.height() == 44);
  CHECK(a.output.width() == 60);
  CHECK(same(a.output, b.output));
  CHECK(a.report.arity == 2);
  CHECK(to_json(a.report)["timings_ms"].contains("total"));
  for (double v : a.output.data()) REQUIRE((v >= 0.0 && v <= 1.0));

  auto other_seed = cfg;
  other_seed.seed = cfg.seed + 1;
  CHECK_FALSE(same(restore_pipeline(other_seed, models, in_dir / "x.png").output, a.output));

  RestoreOptions no_fe;
  no_fe.use_fidelity = false;
  CHECK(restore_pipeline(cfg, models, in_dir / "x.png", no_fe).output.same_shape(a.output));

  for (int size : {64, 128}) {
    const auto out = restore_pipeline(cfg, models, testing::random_image(size, size, size)).output;
    CHECK(out.height() == size);
    CHECK(out.width() == size);
  }
  auto one_step = cfg;
  one_step.sampler_steps = 1;
  const auto big = restore_pipeline(one_step, models, testing::random_image(640, 640, 640)).output;
  CHECK(big.height() == 640);
  CHECK(big.width() == 640);

  CHECK(dir_bytes(in_dir) == before_inputs);
  CHECK(dir_bytes(cfg.paths.checkpoint_dir) == before_ckpt);
}

TEST_CASE("external stage-I results match the internal path bit for bit") {
  TempDir tmp("external");
  auto cfg = tiny_config(tmp.path / "ck");
  write_models(cfg);
  const fs::path in_dir = tmp.path / "in", ext = tmp.path / "ext";
  fs::create_directories(in_dir);
  fs::create_directories(ext);
  write_png(in_dir / "y.png", testing::random_image(32, 40, 2));

  auto models = load_models(cfg);
  const auto internal = restore_pipeline(cfg, models, in_dir / "y.png");
  write_png(ext / "y.png", internal.stage1.front());

  auto ext_cfg = cfg;
  ext_cfg.stage1_backend = Stage1Backend::kExternal;
  ext_cfg.external_stage1_dirs = {ext};
  auto ext_models = load_models(ext_cfg);
  CHECK_FALSE(ext_models.restorer);
  const auto external = restore_pipeline(ext_cfg, ext_models, in_dir / "y.png");
  CHECK(same(external.stage1.front(), internal.stage1.front()));
  CHECK(same(external.output, internal.output));
  CHECK(external.report.stage1_backend == "external");

  CHECK_THROWS_AS(restore_pipeline(ext_cfg, ext_models, testing::random_image(32, 40, 3), {},
                                   std::vector<Image>{testing::random_image(16, 16, 4)}),
                  DimensionError);
  fs::remove(ext / "y.png");
  CHECK_THROWS_AS(restore_pipeline(ext_cfg, ext_models, in_dir / "y.png"), MissingStage1Error);
}

TEST_CASE("two external sources use a three-way softmax gate") {
  TempDir tmp("arity3");
  auto cfg = tiny_config(tmp.path / "ck");
  cfg.stage1_backend = Stage1Backend::kExternal;
  const fs::path in_dir = tmp.path / "in", e1 = tmp.path / "e1", e2 = tmp.path / "e2";
  cfg.external_stage1_dirs = {e1, e2};
  write_models(cfg, false);
  for (const auto& d : {in_dir, e1, e2}) fs::create_directories(d);
  write_png(in_dir / "z.png", testing::random_image(24, 32, 5));
  write_png(e1 / "z.png", testing::random_image(24, 32, 6));
  write_png(e2 / "z.png", testing::random_image(12, 16, 7));

  auto models = load_models(cfg);
  CHECK(models.control->cfg.arity == 3);
  CHECK(models.control->gate->use_softmax);
  const auto res = restore_pipeline(cfg, models, in_dir / "z.png");
  CHECK(res.report.arity == 3);
  CHECK(res.stage1.size() == 2);
  REQUIRE(res.report.notes.size() == 1);
  CHECK(res.report.notes.front().find("resized") != std::string::npos);
  CHECK(res.output.height() == 24);
  CHECK(res.output.width() == 32);

  auto pair_cfg = cfg;
  pair_cfg.external_stage1_dirs = {e1};
  CHECK_THROWS_AS(load_models(pair_cfg), nn::CheckpointError);
}
