#include "ur3/pipeline/config.hpp"

#include <cstdlib>
#include <fstream>
#include <stdexcept>

namespace ur3::pipeline {

PipelineConfig PipelineConfig::desk() {
  PipelineConfig c;
  c.profile = "desk";
  c.resize_training = false;
  c.stage2_patch = 128;

  c.models.restorer.base_channels = 8;
  c.models.restorer.blocks_per_level = {1, 1, 1, 1, 1};
  c.models.restorer.heads_per_level = {1, 2, 2, 4};
  c.models.codec.base_channels = 16;
  c.models.codec.channel_mults = {1, 2, 2, 4};
  c.models.denoiser.base_channels = 32;
  c.models.denoiser.channel_mults = {1, 2, 2};
  c.models.modulate.channels = 16;
  c.models.modulate.heads = 2;
  c.models.modulate.layers = 1;
  c.models.gate_hidden = 8;

  auto& t = c.training;
  t.stage1.initial_lr = 2e-3;
  t.stage1.final_lr = 1e-5;
  t.stage1.total_iters = 800;
  t.stage1.batch_size = 4;
  t.codec.initial_lr = 1e-3;
  t.codec.final_lr = 1e-5;
  t.codec.total_iters = 3000;
  t.codec.batch_size = 4;
  t.denoiser.initial_lr = 1e-3;
  t.denoiser.final_lr = 1e-5;
  t.denoiser.total_iters = 2000;
  t.denoiser.batch_size = 8;
  t.control.initial_lr = 1e-3;
  t.control.final_lr = 1e-5;
  t.control.total_iters = 2000;
  t.control.batch_size = 8;
  t.fidelity.initial_lr = 1e-3;
  t.fidelity.final_lr = 1e-5;
  t.fidelity.total_iters = 1500;
  t.fidelity.batch_size = 4;
  t.base_prior_scenes = 56;
  return c;
}

void PipelineConfig::validate() const {
  if (resize_height <= 0 || resize_width <= 0 || resize_height % 8 != 0 || resize_width % 8 != 0)
    throw std::invalid_argument("config: image_resize dims must be positive multiples of 8");
  if (stage2_patch <= 0 || stage2_patch % 8 != 0)
    throw std::invalid_argument("config: stage2_patch must be a positive multiple of 8");
  if (sampler_steps < 1) throw std::invalid_argument("config: sampler_steps must be >= 1");
  if (sampler_steps > models.diffusion_steps)
    throw std::invalid_argument("config: sampler_steps exceeds diffusion_steps");
  if (stage1_backend == Stage1Backend::kExternal && external_stage1_dirs.empty())
    throw std::invalid_argument("config: external stage-I backend needs at least one directory");
  color.validate();
  models.restorer.validate();
  models.codec.validate();
  models.denoiser.validate();
  models.modulate.validate();
  if (models.codec.factor() != 8) throw std::invalid_argument("config: the codec must downsample by 8");
  if (models.codec.latent_channels != models.denoiser.in_channels ||
      models.modulate.latent_channels != models.denoiser.in_channels)
    throw std::invalid_argument("config: latent channel counts disagree");
  for (const auto* s : {&training.stage1, &training.codec, &training.denoiser, &training.control,
                        &training.fidelity})
    s->validate();
}

int64_t PipelineConfig::condition_arity() const {
  return stage1_backend == Stage1Backend::kExternal
             ? static_cast<int64_t>(external_stage1_dirs.size()) + 1
             : 2;
}

nn::ControlBranchConfig PipelineConfig::control_config() const {
  nn::ControlBranchConfig c;
  c.modulate = models.modulate;
  c.denoiser = models.denoiser;
  c.arity = condition_arity();
  c.gate_hidden = models.gate_hidden;
  return c;
}

nn::FEConfig PipelineConfig::fe_config() const {
  nn::FEConfig c;
  c.codec = models.codec;
  c.gate_hidden = models.gate_hidden;
  return c;
}

nn::NoiseSchedule PipelineConfig::noise_schedule() const {
  return nn::NoiseSchedule::linear(models.diffusion_steps, models.beta_start, models.beta_end);
}

std::string to_string(Stage1Backend b) { return b == Stage1Backend::kInternal ? "internal" : "external"; }

Stage1Backend parse_stage1_backend(const std::string& s) {
  if (s == "internal") return Stage1Backend::kInternal;
  if (s == "external" || s == "external-directory") return Stage1Backend::kExternal;
  throw std::invalid_argument("unknown stage1_backend '" + s + "' (internal|external)");
}

nlohmann::json to_json(const PipelineConfig& c) {
  std::vector<std::string> dirs;
  for (const auto& d : c.external_stage1_dirs) dirs.push_back(d.string());
  const auto& m = c.models;
  const auto& t = c.training;
  return {
      {"profile", c.profile},
      {"paths",
       {{"dataset_root", c.paths.dataset_root.string()},
        {"checkpoint_dir", c.paths.checkpoint_dir.string()},
        {"output_dir", c.paths.output_dir.string()}}},
      {"image_resize", {{"height", c.resize_height}, {"width", c.resize_width}, {"training", c.resize_training}}},
      {"stage2_patch", c.stage2_patch},
      {"sampler_steps", c.sampler_steps},
      {"seed", c.seed},
      {"color_correct",
       {{"method", to_string(c.color.method)},
        {"patch", c.color.patch},
        {"eps", c.color.eps},
        {"wavelet_levels", c.color.wavelet_levels}}},
      {"stage1_backend", to_string(c.stage1_backend)},
      {"external_stage1_dirs", dirs},
      {"models",
       {{"restorer", nn::to_json(m.restorer)},
        {"codec", nn::to_json(m.codec)},
        {"denoiser", nn::to_json(m.denoiser)},
        {"modulate", nn::to_json(m.modulate)},
        {"gate_hidden", m.gate_hidden},
        {"diffusion", {{"T", m.diffusion_steps}, {"beta_start", m.beta_start}, {"beta_end", m.beta_end}}}}},
      {"training",
       {{"stage1", nn::to_json(t.stage1)},
        {"codec", nn::to_json(t.codec)},
        {"denoiser", nn::to_json(t.denoiser)},
        {"control", nn::to_json(t.control)},
        {"fidelity", nn::to_json(t.fidelity)},
        {"stage1_patch", t.stage1_patch},
        {"codec_patch", t.codec_patch},
        {"fidelity_patch", t.fidelity_patch},
        {"finetune_base", t.finetune_base},
        {"base_prior_scenes", t.base_prior_scenes}}},
  };
}

PipelineConfig config_from_json(const nlohmann::json& patch, const PipelineConfig& base) {
  auto j = to_json(base);
  j.merge_patch(patch);
  PipelineConfig c;
  c.profile = j.at("profile").get<std::string>();
  const auto& p = j.at("paths");
  c.paths.dataset_root = p.at("dataset_root").get<std::string>();
  c.paths.checkpoint_dir = p.at("checkpoint_dir").get<std::string>();
  c.paths.output_dir = p.at("output_dir").get<std::string>();
  const auto& r = j.at("image_resize");
  c.resize_height = r.at("height").get<int>();
  c.resize_width = r.at("width").get<int>();
  c.resize_training = r.at("training").get<bool>();
  c.stage2_patch = j.at("stage2_patch").get<int>();
  c.sampler_steps = j.at("sampler_steps").get<int64_t>();
  c.seed = j.at("seed").get<std::uint64_t>();
  const auto& cc = j.at("color_correct");
  c.color.method = parse_color_method(cc.at("method").get<std::string>());
  c.color.patch = cc.at("patch").get<int>();
  c.color.eps = cc.at("eps").get<double>();
  c.color.wavelet_levels = cc.at("wavelet_levels").get<int>();
  c.stage1_backend = parse_stage1_backend(j.at("stage1_backend").get<std::string>());
  for (const auto& d : j.at("external_stage1_dirs")) c.external_stage1_dirs.emplace_back(d.get<std::string>());
  const auto& m = j.at("models");
  c.models.restorer = nn::restorer_config_from_json(m.at("restorer"));
  c.models.codec = nn::codec_config_from_json(m.at("codec"));
  c.models.denoiser = nn::denoiser_config_from_json(m.at("denoiser"));
  c.models.modulate = nn::modulate_config_from_json(m.at("modulate"));
  c.models.gate_hidden = m.at("gate_hidden").get<int64_t>();
  c.models.diffusion_steps = m.at("diffusion").at("T").get<int64_t>();
  c.models.beta_start = m.at("diffusion").at("beta_start").get<double>();
  c.models.beta_end = m.at("diffusion").at("beta_end").get<double>();
  const auto& t = j.at("training");
  c.training.stage1 = nn::train_schedule_from_json(t.at("stage1"));
  c.training.codec = nn::train_schedule_from_json(t.at("codec"));
  c.training.denoiser = nn::train_schedule_from_json(t.at("denoiser"));
  c.training.control = nn::train_schedule_from_json(t.at("control"));
  c.training.fidelity = nn::train_schedule_from_json(t.at("fidelity"));
  c.training.stage1_patch = t.at("stage1_patch").get<int>();
  c.training.codec_patch = t.at("codec_patch").get<int>();
  c.training.fidelity_patch = t.at("fidelity_patch").get<int>();
  c.training.finetune_base = t.at("finetune_base").get<bool>();
  c.training.base_prior_scenes = t.at("base_prior_scenes").get<int>();
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
  PipelineConfig base = j.value("profile", std::string("desk")) == "full" ? PipelineConfig{}
                                                                            : PipelineConfig::desk();
  return config_from_json(j, base);
}

void save_config(const std::filesystem::path& path, const PipelineConfig& c) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << to_json(c).dump(2) << "\n";
}

void apply_env_overrides(PipelineConfig& c) {
  auto env = [](const char* name, std::filesystem::path& target) {
    if (const char* v = std::getenv(name); v && *v) target = v;
  };
  env("UR3_DATASET_ROOT", c.paths.dataset_root);
  env("UR3_CHECKPOINT_DIR", c.paths.checkpoint_dir);
  env("UR3_OUTPUT_DIR", c.paths.output_dir);
}

}  // namespace ur3::pipeline
