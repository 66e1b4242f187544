#pragma once

#include <functional>
#include <string>
#include <vector>

#include "ur3/image.hpp"
#include "ur3/pipeline/config.hpp"
#include "ur3/pipeline/manifest.hpp"

namespace ur3::pipeline {

/// (stage, iteration, loss, learning rate).
using StageLog = std::function<void(const std::string&, int64_t, double, double)>;

/// One entry per lq image of the training split.
struct TrainingSet {
  std::vector<std::string> names;  // lq file names
  std::vector<Image> lq, gt;
};

/// Train split of `manifest`, resized to the configured size when resize_training is set.
TrainingSet load_training_set(const DatasetManifest& manifest, const PipelineConfig& cfg);

/// Each stage writes its checkpoint(s) into cfg.paths.checkpoint_dir and returns the loss trace.
std::vector<double> train_stage1(const PipelineConfig& cfg, const TrainingSet& data, const StageLog& log = {});
std::vector<double> train_vae(const PipelineConfig& cfg, const TrainingSet& data, const StageLog& log = {});

/// Stage-I results per training image: the internal restorer's output, or one image per external source.
std::vector<std::vector<Image>> stage1_results(const PipelineConfig& cfg, const TrainingSet& data);

struct ControlTrainReport {
  bool pretrained_base = false;
  std::vector<double> base_losses;
  std::vector<double> control_losses;
};

/// Pretrains the base denoiser on ground-truth latents when its checkpoint is absent
/// (or `retrain_base`), then trains the control branch on the frozen base.
ControlTrainReport train_control_stage(const PipelineConfig& cfg, const TrainingSet& data,
                                       const StageLog& log = {}, bool retrain_base = false);

std::vector<double> train_fe_stage(const PipelineConfig& cfg, const TrainingSet& data, const StageLog& log = {});

}  // namespace ur3::pipeline
