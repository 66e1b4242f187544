#pragma once

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/image.hpp"
#include "ur3/pipeline/config.hpp"

namespace ur3::pipeline {

/// A stage needed for the requested run has no checkpoint on disk.
struct MissingCheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// An external stage-I directory has no image for the requested input.
struct MissingStage1Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct RestoreOptions {
  bool skip_stage2 = false;
  bool use_fidelity = true;
};

struct Models {
  nn::Restorer restorer{nullptr};
  nn::CodecEncoder encoder{nullptr};
  nn::CodecDecoder decoder{nullptr};
  nn::Denoiser denoiser{nullptr};
  nn::NoiseSchedule schedule;
  nn::ControlBranch control{nullptr};
  nn::FidelityEncoder fidelity{nullptr};
};

/// Loads the checkpoints the run needs from cfg.paths.checkpoint_dir.
Models load_models(const PipelineConfig& cfg, const RestoreOptions& opts = {});

/// Rounds to the 8-bit grid so in-memory and on-disk stage-I results agree exactly.
Image quantize8(const Image& img);

/// Stage-I images supplied by other models, one directory per source, keyed by input file name.
class ExternalStage1 {
 public:
  explicit ExternalStage1(std::vector<std::filesystem::path> dirs);
  std::size_t size() const { return dirs_.size(); }
  /// One image per source, resized to height x width when needed (noted in `notes`).
  std::vector<Image> lookup(const std::string& file_name, int height, int width,
                            std::vector<std::string>& notes) const;

 private:
  std::vector<std::filesystem::path> dirs_;
};

ExternalStage1 ingest_external_stage1(const std::vector<std::filesystem::path>& dirs);

struct StageTiming {
  std::string stage;
  double milliseconds = 0;
};

struct RestoreReport {
  std::string input;
  std::uint64_t seed = 0;
  int64_t sampler_steps = 0;
  int64_t arity = 0;
  bool skip_stage2 = false;
  bool fidelity = true;
  std::string color_method;
  std::string stage1_backend;
  std::vector<StageTiming> timings;
  std::vector<std::string> notes;
};

nlohmann::json to_json(const RestoreReport& r);

struct RestoreResult {
  Image output;
  std::vector<Image> stage1;  // I_s per source
  RestoreReport report;
};

/// stage1 -> encode conditions -> controlled sampling -> fidelity decode -> color correction.
/// `external_s`, when non-empty, replaces the internal restorer.
RestoreResult restore_pipeline(const PipelineConfig& cfg, Models& models, const Image& lq,
                               const RestoreOptions& opts = {},
                               const std::vector<Image>& external_s = {});

/// Reads `lq_path`, resolves external stage-I images by its file name when configured.
RestoreResult restore_pipeline(const PipelineConfig& cfg, Models& models,
                               const std::filesystem::path& lq_path, const RestoreOptions& opts = {});

}  // namespace ur3::pipeline
