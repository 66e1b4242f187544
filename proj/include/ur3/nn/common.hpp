#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <vector>

#include "ur3/image.hpp"

namespace ur3::nn {

/// [1,3,H,W] tensor from an image, values as stored (no rescaling).
torch::Tensor image_to_tensor(const Image& img, torch::Dtype dtype = torch::kFloat32);
/// Stacks same-sized images into [N,3,H,W].
torch::Tensor images_to_batch(const std::vector<Image>& imgs, torch::Dtype dtype = torch::kFloat32);
/// Takes sample `index` of a [N,3,H,W] tensor; values are copied as-is (no clipping).
Image tensor_to_image(const torch::Tensor& t, int64_t index = 0);

/// Largest group count in {32,16,8,4,2,1} that divides `channels`.
int64_t group_count(int64_t channels);

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride = 1);
torch::nn::Conv2d conv1x1(int64_t in, int64_t out);
/// 1x1 convolution with weight and bias initialized to exactly zero.
torch::nn::Conv2d zero_conv(int64_t in, int64_t out);
void zero_module(torch::nn::Module& m);

/// Sinusoidal embedding of integer timesteps: [B] -> [B, dim].
torch::Tensor timestep_embedding(const torch::Tensor& timesteps, int64_t dim,
                                 torch::Dtype dtype = torch::kFloat32);

/// GroupNorm -> SiLU -> conv -> (+ time) -> GroupNorm -> SiLU -> conv, plus skip.
struct ResBlockImpl : torch::nn::Module {
  ResBlockImpl(int64_t in, int64_t out, int64_t time_dim = 0);
  torch::Tensor forward(const torch::Tensor& x, const torch::Tensor& temb = {});

  int64_t in_channels, out_channels;
  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr}, skip{nullptr};
  torch::nn::Linear time_proj{nullptr};
};
TORCH_MODULE(ResBlock);

/// Single-head spatial self-attention with a residual connection.
struct AttnBlockImpl : torch::nn::Module {
  explicit AttnBlockImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);

  torch::nn::GroupNorm norm{nullptr};
  torch::nn::Conv2d qkv{nullptr}, proj{nullptr};
};
TORCH_MODULE(AttnBlock);

struct DownsampleImpl : torch::nn::Module {
  explicit DownsampleImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x) { return conv->forward(x); }
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Downsample);

/// Nearest x2 followed by a 3x3 conv.
struct UpsampleImpl : torch::nn::Module {
  explicit UpsampleImpl(int64_t channels);
  torch::Tensor forward(const torch::Tensor& x);
  torch::nn::Conv2d conv{nullptr};
};
TORCH_MODULE(Upsample);

/// Flattened copy of every parameter and buffer; used for freeze checks.
std::vector<torch::Tensor> snapshot(const torch::nn::Module& m);
bool identical(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b);
void set_requires_grad(torch::nn::Module& m, bool flag);

/// CPU generator seeded independently of the global torch RNG.
at::Generator make_generator(std::uint64_t seed);

}  // namespace ur3::nn
