#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <random>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/nn/common.hpp"
#include "ur3/nn/train.hpp"

namespace ur3::nn {

struct NoiseSchedule {
  int64_t T = 0;
  std::vector<double> betas, alphas, alpha_bars;
  double beta_start = 0, beta_end = 0;

  /// Linear betas from beta_start to beta_end.
  static NoiseSchedule linear(int64_t T = 1000, double beta_start = 1e-4, double beta_end = 0.02);
  static NoiseSchedule from_betas(std::vector<double> betas);
  void validate() const;
  /// alpha_bar at t, with alpha_bar(-1) = 1.
  double alpha_bar(int64_t t) const { return t < 0 ? 1.0 : alpha_bars.at(t); }
};

struct SpacedSchedule {
  NoiseSchedule parent;
  std::vector<int64_t> steps;      // strictly increasing parent timesteps
  std::vector<double> betas;       // respaced
  std::vector<double> alpha_bars;  // parent alpha_bar at each selected step

  std::size_t size() const { return steps.size(); }
  double alpha_bar_prev(std::size_t i) const { return i == 0 ? 1.0 : alpha_bars[i - 1]; }
  /// (1 - abar_prev) / (1 - abar) * beta at chain position i.
  double posterior_variance(std::size_t i) const;
};

/// `n` evenly spaced steps including 0 (for n > 1) and T-1.
SpacedSchedule respace(const NoiseSchedule& sched, int64_t n);

/// sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
torch::Tensor add_noise(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                        const NoiseSchedule& sched);
/// Per-sample timesteps ([B] int64).
torch::Tensor add_noise(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                        const NoiseSchedule& sched);
/// Direct form for a given abar.
torch::Tensor add_noise(const torch::Tensor& z0, double alpha_bar, const torch::Tensor& eps);

struct DenoiserConfig {
  int64_t in_channels = 4;
  int64_t base_channels = 64;
  std::vector<int64_t> channel_mults{1, 2, 4};
  int64_t time_embed_dim = 0;  // 0 -> 4 * base_channels
  int64_t res_blocks = 1;
  bool attention_at_lowest = true;

  void validate() const;
  int64_t temb_dim() const { return time_embed_dim > 0 ? time_embed_dim : 4 * base_channels; }
  int64_t size_multiple() const { return int64_t{1} << (channel_mults.size() - 1); }
};

nlohmann::json to_json(const DenoiserConfig& c);
DenoiserConfig denoiser_config_from_json(const nlohmann::json& j);

/// Additive signals for every skip connection and the middle-block output.
struct ControlSignals {
  std::vector<torch::Tensor> skips;
  torch::Tensor middle;
};

/// Timestep MLP, input conv, downsampling path and middle block. The control
/// branch instantiates a second copy of this with a wider input conv.
struct DenoiserEncoderImpl : torch::nn::Module {
  DenoiserEncoderImpl(DenoiserConfig cfg, int64_t input_channels);

  struct Output {
    std::vector<torch::Tensor> skips;
    torch::Tensor middle;
    torch::Tensor temb;
  };
  Output forward(const torch::Tensor& x, const torch::Tensor& t);
  torch::Tensor time_embedding(const torch::Tensor& t);
  /// Channel count of each skip, in push order.
  const std::vector<int64_t>& skip_channels() const { return skip_ch; }
  int64_t middle_channels() const;

  DenoiserConfig cfg;
  torch::nn::Linear time1{nullptr}, time2{nullptr};
  torch::nn::Conv2d conv_in{nullptr};
  torch::nn::ModuleList input_blocks;
  ResBlock mid1{nullptr}, mid2{nullptr};
  AttnBlock mid_attn{nullptr};
  std::vector<int64_t> skip_ch;
};
TORCH_MODULE(DenoiserEncoder);

struct DenoiserImpl : torch::nn::Module {
  explicit DenoiserImpl(DenoiserConfig cfg);
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& t,
                        const ControlSignals* control = nullptr);

  DenoiserConfig cfg;
  DenoiserEncoder encoder{nullptr};
  torch::nn::ModuleList output_blocks;
  torch::nn::GroupNorm norm_out{nullptr};
  torch::nn::Conv2d conv_out{nullptr};
};
TORCH_MODULE(Denoiser);

/// Noise prediction; `control` must match the skip and middle shapes.
torch::Tensor predict_noise(Denoiser& unet, const torch::Tensor& z_t, const torch::Tensor& t,
                            const ControlSignals* control = nullptr);
torch::Tensor predict_noise(Denoiser& unet, const torch::Tensor& z_t, int64_t t,
                            const ControlSignals* control = nullptr);

/// (z_t, parent timestep) -> predicted noise.
using EpsFn = std::function<torch::Tensor(const torch::Tensor&, int64_t)>;

/// Ancestral sampling over the spaced chain from N(0, I).
torch::Tensor ddpm_sample(const EpsFn& eps_fn, const SpacedSchedule& sched,
                          const std::vector<int64_t>& shape, std::uint64_t seed,
                          torch::Dtype dtype = torch::kFloat32);

struct LatentBatch {
  torch::Tensor z0;                       // [B,4,h,w]
  std::vector<torch::Tensor> conditions;  // each [B,4,h,w]; used by the control branch
};

/// MSE between predicted and true noise for uniformly drawn timesteps.
/// `eps_model` receives (z_t, t) and returns the prediction.
using BatchEpsModel = std::function<torch::Tensor(const torch::Tensor&, const torch::Tensor&,
                                                  const LatentBatch&)>;
torch::Tensor epsilon_loss(const BatchEpsModel& eps_model, const LatentBatch& batch,
                           const NoiseSchedule& sched, at::Generator& gen);
/// Unconditional objective on the denoiser alone.
torch::Tensor training_step(Denoiser& unet, const LatentBatch& batch, const NoiseSchedule& sched,
                            at::Generator& gen);

/// Crops a random latent patch per sample (patch <= 0 keeps the full size).
LatentBatch sample_latent_batch(const torch::Tensor& z0, const std::vector<torch::Tensor>& conds,
                                int64_t batch_size, int64_t patch, std::mt19937_64& rng);

struct DenoiserTrainOptions {
  int64_t latent_patch = 0;
  TrainLog log;
};

/// Unconditional pretraining on a set of latents [N,4,h,w].
std::vector<double> train_denoiser(Denoiser& unet, const torch::Tensor& latents,
                                   const NoiseSchedule& sched, const TrainSchedule& train,
                                   const DenoiserTrainOptions& opts = {});

/// Architecture hash recorded in denoiser checkpoints (config plus schedule).
std::string denoiser_arch_hash(const DenoiserConfig& cfg, const NoiseSchedule& sched);

void save_denoiser(const std::filesystem::path& path, Denoiser& unet, const NoiseSchedule& sched,
                   int64_t iteration = 0);
struct LoadedDenoiser {
  Denoiser unet{nullptr};
  NoiseSchedule schedule;
  std::string arch_hash;
};
LoadedDenoiser load_denoiser(const std::filesystem::path& path);

}  // namespace ur3::nn
