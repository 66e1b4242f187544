#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/nn/diffusion.hpp"
#include "ur3/nn/train.hpp"

namespace ur3::nn {

struct ModulateConfig {
  int64_t channels = 32;
  int64_t layers = 2;
  int64_t heads = 4;
  int64_t ffn_expansion = 2;
  int64_t latent_channels = 4;

  void validate() const;
};

nlohmann::json to_json(const ModulateConfig& c);
ModulateConfig modulate_config_from_json(const nlohmann::json& j);

/// Pre-norm transformer layer: queries from the stream, keys/values from a context.
struct CrossAttentionLayerImpl : torch::nn::Module {
  CrossAttentionLayerImpl(int64_t channels, int64_t heads, int64_t ffn_expansion);
  /// x, context: [B, N, C].
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& context);

  int64_t heads;
  torch::nn::LayerNorm norm_q{nullptr}, norm_kv{nullptr}, norm_ffn{nullptr};
  torch::nn::Linear to_q{nullptr}, to_k{nullptr}, to_v{nullptr}, to_out{nullptr};
  torch::nn::Linear ffn1{nullptr}, ffn2{nullptr};
};
TORCH_MODULE(CrossAttentionLayer);

/// Aligns a condition latent with the noisy latent. Output has the latent's shape.
struct ModulateImpl : torch::nn::Module {
  explicit ModulateImpl(ModulateConfig cfg);
  torch::Tensor forward(const torch::Tensor& c, const torch::Tensor& z_t);

  ModulateConfig cfg;
  torch::nn::Conv2d conv_c{nullptr}, conv_z{nullptr}, conv_out{nullptr};
  torch::nn::ModuleList layers;
};
TORCH_MODULE(Modulate);

torch::Tensor modulate(Modulate& block, const torch::Tensor& c, const torch::Tensor& z_t);

/// Spatial attention: conv3x3 -> ReLU -> conv3x3 -> sigmoid (one map) or softmax (one map per input).
struct GateImpl : torch::nn::Module {
  GateImpl(int64_t arity, int64_t channels_per_input, int64_t hidden = 16, bool softmax = false);
  /// Pre-activation logits, [B, 1 or arity, H, W].
  torch::Tensor logits(const std::vector<torch::Tensor>& inputs);

  struct Output {
    std::vector<torch::Tensor> gated;
    torch::Tensor weights;  // [B, arity, H, W], summing to one per pixel
  };
  Output forward(const std::vector<torch::Tensor>& inputs);

  int64_t arity, channels;
  bool use_softmax;
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
};
TORCH_MODULE(Gate);

/// Two-way gate: (alpha * a, (1 - alpha) * b, alpha) with alpha of shape [B,1,H,W].
struct Gate2Result {
  torch::Tensor gated_s, gated_lq, alpha;
};
Gate2Result gate2(Gate& gate, const torch::Tensor& c_hat_s, const torch::Tensor& c_hat_lq);
GateImpl::Output gate_n(Gate& gate, const std::vector<torch::Tensor>& c_hats);

struct ControlBranchConfig {
  ModulateConfig modulate;
  DenoiserConfig denoiser;
  /// Number of condition latents, including c_lq (2 for the standard pair).
  int64_t arity = 2;
  int64_t gate_hidden = 16;

  void validate() const;
};

nlohmann::json to_json(const ControlBranchConfig& c);
ControlBranchConfig control_config_from_json(const nlohmann::json& j);

struct ConditionSet {
  /// c_s1 .. c_sk followed by c_lq.
  std::vector<torch::Tensor> conditions;
  torch::Tensor z_t;
};

struct ControlBranchImpl : torch::nn::Module {
  explicit ControlBranchImpl(ControlBranchConfig cfg);
  ControlSignals forward(const ConditionSet& cond, const torch::Tensor& t);
  /// Copies the base encoder weights; new input channels of the first conv start at zero.
  void init_from(Denoiser& base, std::string base_arch_hash = {});

  ControlBranchConfig cfg;
  torch::nn::ModuleList modulators;
  Gate gate{nullptr};
  DenoiserEncoder copy{nullptr};
  torch::nn::ModuleList zero_convs;
  torch::nn::Conv2d zero_middle{nullptr};
  std::string base_hash;
};
TORCH_MODULE(ControlBranch);

ControlSignals control_forward(ControlBranch& branch, const ConditionSet& cond, const torch::Tensor& t);
ControlSignals control_forward(ControlBranch& branch, const ConditionSet& cond, int64_t t);

/// Noise prediction of the base denoiser steered by the branch.
torch::Tensor controlled_eps(Denoiser& unet, ControlBranch& branch, const ConditionSet& cond,
                             const torch::Tensor& t);

/// Noise-prediction loss of the base denoiser steered by `branch` (plain denoiser when null).
torch::Tensor training_step(Denoiser& unet, ControlBranch* branch, const LatentBatch& batch,
                            const NoiseSchedule& sched, at::Generator& gen);

struct ControlTrainOptions {
  int64_t latent_patch = 0;
  bool finetune_base = false;
  TrainLog log;
};

/// Trains the branch on (z0, conditions) latents; the base stays frozen unless finetune_base.
std::vector<double> train_control(Denoiser& unet, ControlBranch& branch, const torch::Tensor& z0,
                                  const std::vector<torch::Tensor>& conditions,
                                  const NoiseSchedule& sched, const TrainSchedule& train,
                                  const ControlTrainOptions& opts = {});

void save_control_branch(const std::filesystem::path& path, ControlBranch& branch,
                         int64_t iteration = 0);
/// Refuses checkpoints whose recorded base hash differs from `base_hash`.
ControlBranch load_control_branch(const std::filesystem::path& path, const std::string& base_hash);

}  // namespace ur3::nn
