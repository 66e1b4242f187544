#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/color.hpp"
#include "ur3/nn/codec.hpp"
#include "ur3/nn/control.hpp"
#include "ur3/nn/diffusion.hpp"
#include "ur3/nn/fidelity.hpp"
#include "ur3/nn/restorer.hpp"
#include "ur3/nn/train.hpp"

namespace ur3::pipeline {

enum class Stage1Backend { kInternal, kExternal };

struct Paths {
  std::filesystem::path dataset_root = "data";
  std::filesystem::path checkpoint_dir = "checkpoints";
  std::filesystem::path output_dir = "outputs";
};

struct ModelConfigs {
  nn::RestorerConfig restorer;
  nn::CodecConfig codec;
  nn::DenoiserConfig denoiser;
  nn::ModulateConfig modulate;
  int64_t gate_hidden = 16;
  int64_t diffusion_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
};

struct TrainingConfigs {
  nn::TrainSchedule stage1, codec, denoiser, control, fidelity;
  int stage1_patch = 64;
  int codec_patch = 64;
  int fidelity_patch = 64;
  bool finetune_base = false;
  /// Extra procedural clean scenes mixed into base-denoiser pretraining.
  int base_prior_scenes = 0;
};

struct PipelineConfig {
  Paths paths;
  std::string profile = "full";
  int resize_height = 720;
  int resize_width = 1080;
  /// Training images are resized to resize_height x resize_width first.
  bool resize_training = true;
  int stage2_patch = 640;
  int64_t sampler_steps = 50;
  std::uint64_t seed = 0;
  ColorCorrectConfig color;
  Stage1Backend stage1_backend = Stage1Backend::kInternal;
  std::vector<std::filesystem::path> external_stage1_dirs;
  ModelConfigs models;
  TrainingConfigs training;

  /// Small models, short schedules, 128 px stage-II crops and no training resize.
  static PipelineConfig desk();
  void validate() const;

  /// 1 + number of stage-I sources.
  int64_t condition_arity() const;
  nn::ControlBranchConfig control_config() const;
  nn::FEConfig fe_config() const;
  nn::NoiseSchedule noise_schedule() const;

  std::filesystem::path checkpoint(const std::string& name) const { return paths.checkpoint_dir / name; }
};

inline constexpr const char* kStage1Checkpoint = "stage1.pt";
inline constexpr const char* kEncoderCheckpoint = "codec_encoder.pt";
inline constexpr const char* kDecoderCheckpoint = "codec_decoder.pt";
inline constexpr const char* kDenoiserCheckpoint = "denoiser.pt";
inline constexpr const char* kControlCheckpoint = "control.pt";
inline constexpr const char* kFidelityCheckpoint = "fidelity.pt";

nlohmann::json to_json(const PipelineConfig& c);
/// Keys absent from `j` keep the values of `base`.
PipelineConfig config_from_json(const nlohmann::json& j, const PipelineConfig& base = PipelineConfig::desk());
PipelineConfig load_config(const std::filesystem::path& path);
void save_config(const std::filesystem::path& path, const PipelineConfig& c);

/// UR3_DATASET_ROOT, UR3_CHECKPOINT_DIR and UR3_OUTPUT_DIR replace the matching paths.
void apply_env_overrides(PipelineConfig& c);

std::string to_string(Stage1Backend b);
Stage1Backend parse_stage1_backend(const std::string& s);

}  // namespace ur3::pipeline
