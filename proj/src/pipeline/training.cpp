#include "ur3/pipeline/training.hpp"

#include <stdexcept>

#include "ur3/degradation.hpp"
#include "ur3/pipeline/restore.hpp"

namespace ur3::pipeline {

namespace {

nn::TrainLog stage_log(const StageLog& log, const std::string& stage) {
  if (!log) return {};
  return [log, stage](int64_t it, double loss, double lr) { log(stage, it, loss, lr); };
}

void require_nonempty(const TrainingSet& data, const char* what) {
  if (data.lq.empty()) throw std::invalid_argument(std::string(what) + ": the training split is empty");
}

torch::Tensor encode_all(nn::CodecEncoder& enc, const std::vector<Image>& images, int multiple) {
  std::vector<torch::Tensor> zs;
  for (const auto& img : images) {
    if (!img.same_shape(images.front()))
      throw DimensionError("stage-II training needs equally sized images; set image_resize.training "
                           "or resize the dataset");
    zs.push_back(nn::encode(enc, pad_to_multiple(img, multiple)));
  }
  return torch::cat(zs, 0);
}

}  // namespace

TrainingSet load_training_set(const DatasetManifest& manifest, const PipelineConfig& cfg) {
  TrainingSet set;
  for (const auto* scene : manifest.split(Split::kTrain)) {
    Image gt = read_png(manifest.resolve(scene->gt));
    if (cfg.resize_training) gt = resize_bilinear(gt, cfg.resize_height, cfg.resize_width);
    for (const auto& lq_path : scene->lq) {
      Image lq = read_png(manifest.resolve(lq_path));
      if (cfg.resize_training) lq = resize_bilinear(lq, cfg.resize_height, cfg.resize_width);
      require_same_shape(lq, gt, ("training pair " + scene->scene_id).c_str());
      set.names.push_back(lq_path.filename().string());
      set.lq.push_back(std::move(lq));
      set.gt.push_back(gt);
    }
  }
  return set;
}

std::vector<double> train_stage1(const PipelineConfig& cfg, const TrainingSet& data, const StageLog& log) {
  require_nonempty(data, "train-stage1");
  std::filesystem::create_directories(cfg.paths.checkpoint_dir);
  torch::manual_seed(cfg.training.stage1.seed);
  nn::Restorer model(cfg.models.restorer);
  std::vector<std::pair<Image, Image>> pairs;
  for (std::size_t i = 0; i < data.lq.size(); ++i) pairs.emplace_back(data.lq[i], data.gt[i]);
  auto sched = cfg.training.stage1;
  if (sched.checkpoint_every > 0 && sched.checkpoint_path.empty())
    sched.checkpoint_path = cfg.checkpoint(kStage1Checkpoint);
  nn::RestorerTrainOptions opts;
  opts.patch = cfg.training.stage1_patch;
  opts.log = stage_log(log, "stage1");
  auto res = nn::train_restorer(model, pairs, sched, opts);
  nn::save_restorer(cfg.checkpoint(kStage1Checkpoint), model, sched.total_iters);
  return res.losses;
}

std::vector<double> train_vae(const PipelineConfig& cfg, const TrainingSet& data, const StageLog& log) {
  require_nonempty(data, "train-vae");
  std::filesystem::create_directories(cfg.paths.checkpoint_dir);
  torch::manual_seed(cfg.training.codec.seed);
  nn::CodecEncoder enc(cfg.models.codec);
  nn::CodecDecoder dec(cfg.models.codec);
  // the codec learns clean images only; each gt counts once
  std::vector<Image> images;
  for (const auto& g : data.gt)
    if (images.empty() || !(images.back() == g)) images.push_back(g);
  nn::CodecTrainOptions opts;
  opts.patch = cfg.training.codec_patch;
  opts.log = stage_log(log, "vae");
  opts.encoder_path = cfg.checkpoint(kEncoderCheckpoint);
  opts.decoder_path = cfg.checkpoint(kDecoderCheckpoint);
  auto res = nn::train_codec(enc, dec, images, cfg.training.codec, opts);
  nn::save_codec_encoder(cfg.checkpoint(kEncoderCheckpoint), enc, cfg.training.codec.total_iters);
  nn::save_codec_decoder(cfg.checkpoint(kDecoderCheckpoint), dec, cfg.training.codec.total_iters);
  return res.losses;
}

std::vector<std::vector<Image>> stage1_results(const PipelineConfig& cfg, const TrainingSet& data) {
  std::vector<std::vector<Image>> out;
  if (cfg.stage1_backend == Stage1Backend::kExternal) {
    const auto ext = ingest_external_stage1(cfg.external_stage1_dirs);
    std::vector<std::string> notes;
    for (std::size_t i = 0; i < data.lq.size(); ++i)
      out.push_back(ext.lookup(data.names[i], data.lq[i].height(), data.lq[i].width(), notes));
    return out;
  }
  RestoreOptions opts;
  opts.skip_stage2 = true;
  auto models = load_models(cfg, opts);
  torch::NoGradGuard ng;
  for (const auto& lq : data.lq) out.push_back({quantize8(nn::restore(models.restorer, lq))});
  return out;
}

ControlTrainReport train_control_stage(const PipelineConfig& cfg, const TrainingSet& data,
                                       const StageLog& log, bool retrain_base) {
  require_nonempty(data, "train-control");
  std::filesystem::create_directories(cfg.paths.checkpoint_dir);
  ControlTrainReport report;
  auto enc = nn::load_codec_encoder(cfg.checkpoint(kEncoderCheckpoint));
  const auto s_all = stage1_results(cfg, data);

  const int multiple = static_cast<int>(8 * cfg.models.denoiser.size_multiple());
  torch::Tensor z0, c_lq;
  std::vector<torch::Tensor> c_s(s_all.front().size());
  {
    torch::NoGradGuard ng;
    z0 = encode_all(enc, data.gt, multiple);
    c_lq = encode_all(enc, data.lq, multiple);
    for (std::size_t k = 0; k < c_s.size(); ++k) {
      std::vector<Image> src;
      for (const auto& s : s_all) src.push_back(s[k]);
      c_s[k] = encode_all(enc, src, multiple);
    }
  }
  const int64_t latent_patch = cfg.stage2_patch / 8;

  const auto base_path = cfg.checkpoint(kDenoiserCheckpoint);
  nn::LoadedDenoiser base;
  if (retrain_base || !std::filesystem::exists(base_path)) {
    torch::manual_seed(cfg.training.denoiser.seed);
    base.unet = nn::Denoiser(cfg.models.denoiser);
    base.schedule = cfg.noise_schedule();
    nn::DenoiserTrainOptions opts;
    opts.latent_patch = latent_patch;
    opts.log = stage_log(log, "denoiser");
    torch::Tensor prior = z0;
    if (cfg.training.base_prior_scenes > 0) {
      torch::NoGradGuard ng;
      std::vector<Image> scenes;
      const auto& ref = data.gt.front();
      for (int i = 0; i < cfg.training.base_prior_scenes; ++i)
        scenes.push_back(procedural_scene(ref.height(), ref.width(), cfg.training.denoiser.seed + 7919 * (i + 1)));
      prior = torch::cat({z0, encode_all(enc, scenes, multiple)}, 0);
    }
    report.base_losses = nn::train_denoiser(base.unet, prior, base.schedule, cfg.training.denoiser, opts);
    nn::save_denoiser(base_path, base.unet, base.schedule, cfg.training.denoiser.total_iters);
    report.pretrained_base = true;
  }
  base = nn::load_denoiser(base_path);

  auto ccfg = cfg.control_config();
  ccfg.denoiser = base.unet->cfg;
  torch::manual_seed(cfg.training.control.seed);
  nn::ControlBranch branch(ccfg);
  branch->init_from(base.unet, base.arch_hash);
  std::vector<torch::Tensor> conditions = c_s;
  conditions.push_back(c_lq);
  nn::ControlTrainOptions opts;
  opts.latent_patch = latent_patch;
  opts.finetune_base = cfg.training.finetune_base;
  opts.log = stage_log(log, "control");
  auto sched = cfg.training.control;
  if (sched.checkpoint_every > 0 && sched.checkpoint_path.empty())
    sched.checkpoint_path = cfg.checkpoint(kControlCheckpoint);
  report.control_losses = nn::train_control(base.unet, branch, z0, conditions, base.schedule, sched, opts);
  nn::save_control_branch(cfg.checkpoint(kControlCheckpoint), branch, sched.total_iters);
  if (cfg.training.finetune_base) nn::save_denoiser(base_path, base.unet, base.schedule, sched.total_iters);
  return report;
}

std::vector<double> train_fe_stage(const PipelineConfig& cfg, const TrainingSet& data, const StageLog& log) {
  require_nonempty(data, "train-fe");
  std::filesystem::create_directories(cfg.paths.checkpoint_dir);
  auto enc = nn::load_codec_encoder(cfg.checkpoint(kEncoderCheckpoint));
  auto dec = nn::load_codec_decoder(cfg.checkpoint(kDecoderCheckpoint));
  nn::freeze(*enc);
  nn::freeze(*dec);
  const auto s_all = stage1_results(cfg, data);
  std::vector<nn::FidelityTriple> triples;
  for (std::size_t i = 0; i < data.lq.size(); ++i)
    triples.push_back({pad_to_multiple(data.lq[i], 8), pad_to_multiple(s_all[i].front(), 8),
                       pad_to_multiple(data.gt[i], 8)});
  auto fe_cfg = cfg.fe_config();
  fe_cfg.codec = dec->cfg;
  torch::manual_seed(cfg.training.fidelity.seed);
  nn::FidelityEncoder fe(fe_cfg);
  auto sched = cfg.training.fidelity;
  if (sched.checkpoint_every > 0 && sched.checkpoint_path.empty())
    sched.checkpoint_path = cfg.checkpoint(kFidelityCheckpoint);
  nn::FETrainOptions opts;
  opts.patch = cfg.training.fidelity_patch;
  opts.log = stage_log(log, "fidelity");
  auto losses = nn::train_fe(fe, dec, enc, triples, sched, opts);
  nn::save_fidelity_encoder(cfg.checkpoint(kFidelityCheckpoint), fe, sched.total_iters);
  return losses;
}

}  // namespace ur3::pipeline
