#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "ur3/image.hpp"
#include "ur3/nn/train.hpp"

namespace ur3::nn {

struct RestorerConfig {
  int64_t base_channels = 16;
  /// N0 is the refinement depth at full resolution; N1..N4 are per level.
  std::vector<int64_t> blocks_per_level{0, 2, 4, 4, 8};
  std::vector<int64_t> heads_per_level{1, 2, 4, 8};
  int64_t levels = 4;
  double ffn_expansion = 2.66;

  void validate() const;
  /// Spatial dims must be divisible by this.
  int64_t size_multiple() const { return int64_t{1} << (levels - 1); }
};

nlohmann::json to_json(const RestorerConfig& c);
RestorerConfig restorer_config_from_json(const nlohmann::json& j);

/// Per-pixel LayerNorm over channels.
struct ChannelNormImpl : torch::nn::Module {
  explicit ChannelNormImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::Tensor weight, bias;
};
TORCH_MODULE(ChannelNorm);

/// Multi-head transposed (channel) attention followed by a gated depthwise FFN.
struct ChannelTransformerImpl : torch::nn::Module {
  ChannelTransformerImpl(int64_t channels, int64_t heads, double ffn_expansion);
  torch::Tensor forward(const torch::Tensor& x);

  int64_t heads;
  ChannelNorm norm1{nullptr}, norm2{nullptr};
  torch::Tensor temperature;
  torch::nn::Conv2d qkv{nullptr}, qkv_dw{nullptr}, attn_out{nullptr};
  torch::nn::Conv2d ffn_in{nullptr}, ffn_dw{nullptr}, ffn_out{nullptr};
};
TORCH_MODULE(ChannelTransformer);

struct RestorerImpl : torch::nn::Module {
  explicit RestorerImpl(RestorerConfig cfg);
  /// Predicted correction for an input whose dims are multiples of size_multiple().
  torch::Tensor forward(const torch::Tensor& x);

  RestorerConfig cfg;
  torch::nn::Conv2d embed{nullptr}, head{nullptr};
  torch::nn::ModuleList encoders, downs, ups, reduces, decoders, refine;
};
TORCH_MODULE(Restorer);

/// x + correction, computed with pad-to-multiple and crop; returns unclipped values.
torch::Tensor restore_tensor(Restorer& model, const torch::Tensor& x);
/// Single-image inference; output clipped to [0,1].
Image restore(Restorer& model, const Image& lq);

struct RestorerTrainOptions {
  int patch = 64;  // crop side; full image when larger than the image
  bool augment = true;
  TrainLog log;
};

struct TrainResult {
  std::vector<double> losses;
};

TrainResult train_restorer(Restorer& model, const std::vector<std::pair<Image, Image>>& pairs,
                           const TrainSchedule& sched, const RestorerTrainOptions& opts = {});

void save_restorer(const std::filesystem::path& path, Restorer& model, int64_t iteration);
Restorer load_restorer(const std::filesystem::path& path);

}  // namespace ur3::nn
