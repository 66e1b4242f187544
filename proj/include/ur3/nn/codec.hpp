#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/image.hpp"
#include "ur3/nn/common.hpp"
#include "ur3/nn/train.hpp"

namespace ur3::nn {

struct CodecConfig {
  int64_t base_channels = 32;
  std::vector<int64_t> channel_mults{1, 2, 4, 4};
  int64_t downsample_stages = 3;
  int64_t latent_channels = 4;
  int64_t blocks_per_level = 1;
  double kl_weight = 1e-6;

  void validate() const;
  int64_t level_channels(int64_t level) const { return base_channels * channel_mults.at(level); }
  int64_t factor() const { return int64_t{1} << downsample_stages; }
};

nlohmann::json to_json(const CodecConfig& c);
CodecConfig codec_config_from_json(const nlohmann::json& j);

/// Residual levels with downsampling between them. Emits the activation at the
/// end of every level (full, 1/2, 1/4, ... resolution). Shared with the fidelity encoder.
struct EncoderBodyImpl : torch::nn::Module {
  explicit EncoderBodyImpl(const CodecConfig& cfg);
  /// Returns one tensor per level; the last one is also the input to the mid block.
  std::vector<torch::Tensor> forward(torch::Tensor h);

  CodecConfig cfg;
  torch::nn::ModuleList levels, downs;
};
TORCH_MODULE(EncoderBody);

struct CodecEncoderImpl : torch::nn::Module {
  explicit CodecEncoderImpl(CodecConfig cfg);
  /// Posterior moments (mean, logvar) of an image batch with values in [0,1].
  std::pair<torch::Tensor, torch::Tensor> forward(const torch::Tensor& x);

  CodecConfig cfg;
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  EncoderBody body{nullptr};
  ResBlock mid1{nullptr}, mid2{nullptr};
  AttnBlock mid_attn{nullptr};
  torch::nn::GroupNorm norm_out{nullptr};
  torch::Tensor latent_scale;
};
TORCH_MODULE(CodecEncoder);

struct CodecDecoderImpl : torch::nn::Module {
  explicit CodecDecoderImpl(CodecConfig cfg);
  /// Unscaled latent -> image batch in the [0,1] convention (not clamped).
  /// `feats[l]`, when given, is added right before the level-l block (l = 0 is full resolution).
  torch::Tensor forward(const torch::Tensor& z, const std::vector<torch::Tensor>* feats = nullptr);
  /// Channel count of the activation entering the level-l block.
  int64_t injection_channels(int64_t level) const;

  CodecConfig cfg;
  torch::nn::Conv2d conv_in{nullptr}, conv_out{nullptr};
  ResBlock mid1{nullptr}, mid2{nullptr};
  AttnBlock mid_attn{nullptr};
  torch::nn::ModuleList levels, ups;
  torch::nn::GroupNorm norm_out{nullptr};
  torch::Tensor latent_scale;
};
TORCH_MODULE(CodecDecoder);

/// Scaled posterior mean, [N,4,H/8,W/8].
torch::Tensor encode_tensor(CodecEncoder& enc, const torch::Tensor& x);
torch::Tensor encode(CodecEncoder& enc, const Image& img);
/// Scaled latent -> image batch; clamped to [0,1] when `clamp`.
torch::Tensor decode_tensor(CodecDecoder& dec, const torch::Tensor& z,
                            const std::vector<torch::Tensor>* feats = nullptr, bool clamp = true);
Image decode(CodecDecoder& dec, const torch::Tensor& z,
             const std::vector<torch::Tensor>* feats = nullptr);

/// Closed-form KL(N(mean, exp(logvar)) || N(0, I)), summed per sample and averaged over the batch.
torch::Tensor kl_divergence(const torch::Tensor& mean, const torch::Tensor& logvar);

struct CodecTrainOptions {
  int patch = 64;
  TrainLog log;
  std::filesystem::path encoder_path, decoder_path;
};

struct CodecTrainResult {
  std::vector<double> losses;
  double latent_scale = 1.0;
};

/// Trains both halves, then sets the latent scale to 1/std of the training-set posterior means.
CodecTrainResult train_codec(CodecEncoder& enc, CodecDecoder& dec, const std::vector<Image>& images,
                             const TrainSchedule& sched, const CodecTrainOptions& opts = {});

/// 1/std of the unscaled posterior means over `images`.
double estimate_latent_scale(CodecEncoder& enc, const std::vector<Image>& images);
void set_latent_scale(CodecEncoder& enc, CodecDecoder& dec, double scale);

void save_codec_encoder(const std::filesystem::path& path, CodecEncoder& enc, int64_t iteration = 0);
void save_codec_decoder(const std::filesystem::path& path, CodecDecoder& dec, int64_t iteration = 0);
CodecEncoder load_codec_encoder(const std::filesystem::path& path);
CodecDecoder load_codec_decoder(const std::filesystem::path& path);

}  // namespace ur3::nn
