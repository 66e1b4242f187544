#include "ur3/pipeline/restore.hpp"

#include <chrono>
#include <cmath>

#include "ur3/nn/checkpoint.hpp"

namespace ur3::pipeline {

namespace {

std::filesystem::path require(const PipelineConfig& cfg, const char* file, const std::string& stage,
                              const std::string& command) {
  auto p = cfg.checkpoint(file);
  if (!std::filesystem::exists(p))
    throw MissingCheckpointError("missing " + stage + " checkpoint " + p.string() + "; run `ur3 " +
                                 command + "` first or point paths.checkpoint_dir (UR3_CHECKPOINT_DIR) at "
                                 "a directory that has it");
  return p;
}

class Timer {
 public:
  Timer() : start_(std::chrono::steady_clock::now()) {}
  double ms() const {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start_).count();
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

}  // namespace

Models load_models(const PipelineConfig& cfg, const RestoreOptions& opts) {
  Models m;
  if (cfg.stage1_backend == Stage1Backend::kInternal)
    m.restorer = nn::load_restorer(require(cfg, kStage1Checkpoint, "stage-I restorer", "train-stage1"));
  if (opts.skip_stage2) return m;
  m.encoder = nn::load_codec_encoder(require(cfg, kEncoderCheckpoint, "codec encoder", "train-vae"));
  m.decoder = nn::load_codec_decoder(require(cfg, kDecoderCheckpoint, "codec decoder", "train-vae"));
  auto base = nn::load_denoiser(require(cfg, kDenoiserCheckpoint, "base denoiser", "train-control"));
  m.denoiser = base.unet;
  m.schedule = base.schedule;
  m.control = nn::load_control_branch(require(cfg, kControlCheckpoint, "control branch", "train-control"),
                                      base.arch_hash);
  if (m.control->cfg.arity != cfg.condition_arity())
    throw nn::CheckpointError("control branch was trained with " + std::to_string(m.control->cfg.arity) +
                              " conditions but the configuration supplies " +
                              std::to_string(cfg.condition_arity()));
  if (opts.use_fidelity)
    m.fidelity = nn::load_fidelity_encoder(require(cfg, kFidelityCheckpoint, "fidelity encoder", "train-fe"));
  return m;
}

Image quantize8(const Image& img) {
  Image out = img;
  for (double& v : out.data()) v = std::lround(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return out;
}

ExternalStage1::ExternalStage1(std::vector<std::filesystem::path> dirs) : dirs_(std::move(dirs)) {
  for (const auto& d : dirs_)
    if (!std::filesystem::is_directory(d))
      throw MissingStage1Error("external stage-I directory " + d.string() + " does not exist");
}

std::vector<Image> ExternalStage1::lookup(const std::string& file_name, int height, int width,
                                          std::vector<std::string>& notes) const {
  std::vector<Image> out;
  for (const auto& d : dirs_) {
    auto p = d / file_name;
    if (!std::filesystem::exists(p)) p = d / (std::filesystem::path(file_name).stem().string() + ".png");
    if (!std::filesystem::exists(p))
      throw MissingStage1Error("no stage-I image for " + file_name + " in " + d.string());
    Image img = read_png(p);
    if (img.height() != height || img.width() != width) {
      notes.push_back("resized " + p.string() + " from " + std::to_string(img.width()) + "x" +
                      std::to_string(img.height()) + " to " + std::to_string(width) + "x" +
                      std::to_string(height));
      img = resize_bilinear(img, height, width);
    }
    out.push_back(std::move(img));
  }
  return out;
}

ExternalStage1 ingest_external_stage1(const std::vector<std::filesystem::path>& dirs) {
  if (dirs.empty()) throw std::invalid_argument("ingest_external_stage1: no directories");
  return ExternalStage1(dirs);
}

nlohmann::json to_json(const RestoreReport& r) {
  nlohmann::json timings = nlohmann::json::object();
  double total = 0;
  for (const auto& t : r.timings) {
    timings[t.stage] = t.milliseconds;
    total += t.milliseconds;
  }
  timings["total"] = total;
  return {{"input", r.input},
          {"seed", r.seed},
          {"sampler_steps", r.sampler_steps},
          {"arity", r.arity},
          {"skip_stage2", r.skip_stage2},
          {"fidelity", r.fidelity},
          {"color_method", r.color_method},
          {"stage1_backend", r.stage1_backend},
          {"timings_ms", timings},
          {"notes", r.notes}};
}

RestoreResult restore_pipeline(const PipelineConfig& cfg, Models& m, const Image& lq,
                               const RestoreOptions& opts, const std::vector<Image>& external_s) {
  if (lq.empty()) throw DimensionError("restore_pipeline: empty input");
  RestoreResult res;
  auto& rep = res.report;
  rep.seed = cfg.seed;
  rep.sampler_steps = opts.skip_stage2 ? 0 : cfg.sampler_steps;
  rep.skip_stage2 = opts.skip_stage2;
  rep.fidelity = opts.use_fidelity && !opts.skip_stage2;
  rep.color_method = opts.skip_stage2 ? "none" : to_string(cfg.color.method);
  rep.stage1_backend = external_s.empty() ? "internal" : "external";
  torch::NoGradGuard ng;

  Timer t1;
  if (external_s.empty()) {
    if (!m.restorer) throw MissingCheckpointError("stage-I restorer is not loaded");
    res.stage1.push_back(quantize8(nn::restore(m.restorer, lq)));
  } else {
    for (const auto& s : external_s) {
      require_same_shape(s, lq, "restore_pipeline external stage-I");
      res.stage1.push_back(s);
    }
  }
  rep.arity = static_cast<int64_t>(res.stage1.size()) + 1;
  rep.timings.push_back({"stage1", t1.ms()});
  if (opts.skip_stage2) {
    res.output = res.stage1.front();
    return res;
  }
  if (!m.encoder || !m.decoder || !m.denoiser || !m.control)
    throw MissingCheckpointError("stage-II models are not loaded");
  if (m.control->cfg.arity != rep.arity)
    throw std::invalid_argument("restore_pipeline: control branch expects " +
                                std::to_string(m.control->cfg.arity) + " conditions, got " +
                                std::to_string(rep.arity));
  if (opts.use_fidelity && !m.fidelity) throw MissingCheckpointError("fidelity encoder is not loaded");

  Timer t2;
  const int multiple = static_cast<int>(8 * m.denoiser->cfg.size_multiple());
  const Image lq_pad = pad_to_multiple(lq, multiple);
  std::vector<torch::Tensor> conditions;
  std::vector<Image> s_pad;
  for (const auto& s : res.stage1) {
    s_pad.push_back(pad_to_multiple(s, multiple));
    conditions.push_back(nn::encode(m.encoder, s_pad.back()));
  }
  conditions.push_back(nn::encode(m.encoder, lq_pad));
  rep.timings.push_back({"encode", t2.ms()});

  Timer t3;
  const auto spaced = nn::respace(m.schedule, cfg.sampler_steps);
  m.denoiser->eval();
  m.control->eval();
  nn::EpsFn eps = [&](const torch::Tensor& z, int64_t t) {
    nn::ConditionSet cond{conditions, z};
    return nn::controlled_eps(m.denoiser, m.control, cond, torch::full({z.size(0)}, t, torch::kLong));
  };
  const auto z0 = nn::ddpm_sample(eps, spaced, conditions.back().sizes().vec(), cfg.seed);
  rep.timings.push_back({"sample", t3.ms()});

  Timer t4;
  Image decoded;
  if (opts.use_fidelity) {
    decoded = nn::decode_with_fidelity(m.decoder, z0, m.fidelity, lq_pad, s_pad.front());
  } else {
    decoded = nn::decode(m.decoder, z0);
  }
  decoded = crop_region(decoded, 0, 0, lq.height(), lq.width());
  rep.timings.push_back({"decode", t4.ms()});

  Timer t5;
  res.output = color_correct(decoded, res.stage1.front(), cfg.color);
  rep.timings.push_back({"color", t5.ms()});
  return res;
}

RestoreResult restore_pipeline(const PipelineConfig& cfg, Models& models,
                               const std::filesystem::path& lq_path, const RestoreOptions& opts) {
  const Image lq = read_png(lq_path);
  std::vector<Image> external;
  std::vector<std::string> notes;
  if (cfg.stage1_backend == Stage1Backend::kExternal)
    external = ingest_external_stage1(cfg.external_stage1_dirs)
                   .lookup(lq_path.filename().string(), lq.height(), lq.width(), notes);
  auto res = restore_pipeline(cfg, models, lq, opts, external);
  res.report.input = lq_path.string();
  res.report.notes.insert(res.report.notes.end(), notes.begin(), notes.end());
  return res;
}

}  // namespace ur3::pipeline
