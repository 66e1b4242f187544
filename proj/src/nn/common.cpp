#include "ur3/nn/common.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cmath>

namespace ur3::nn {

torch::Tensor image_to_tensor(const Image& img, torch::Dtype dtype) {
  auto d = img.data();
  auto t = torch::from_blob(const_cast<double*>(d.data()), {img.height(), img.width(), 3},
                            torch::kFloat64);
  return t.permute({2, 0, 1}).unsqueeze(0).to(dtype).contiguous();
}

torch::Tensor images_to_batch(const std::vector<Image>& imgs, torch::Dtype dtype) {
  std::vector<torch::Tensor> ts;
  ts.reserve(imgs.size());
  for (const auto& img : imgs) ts.push_back(image_to_tensor(img, dtype));
  return torch::cat(ts, 0);
}

Image tensor_to_image(const torch::Tensor& t, int64_t index) {
  TORCH_CHECK(t.dim() == 4 && t.size(1) == 3, "tensor_to_image expects [N,3,H,W]");
  auto hwc = t[index].detach().to(torch::kFloat64).permute({1, 2, 0}).contiguous();
  Image img(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)));
  std::memcpy(img.data().data(), hwc.data_ptr<double>(), img.size() * sizeof(double));
  return img;
}

int64_t group_count(int64_t channels) {
  for (int64_t g : {32, 16, 8, 4, 2}) {
    if (channels % g == 0 && channels / g >= 2) return g;
  }
  return 1;
}

torch::nn::Conv2d conv3x3(int64_t in, int64_t out, int64_t stride) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 3).stride(stride).padding(1));
}

torch::nn::Conv2d conv1x1(int64_t in, int64_t out) {
  return torch::nn::Conv2d(torch::nn::Conv2dOptions(in, out, 1));
}

torch::nn::Conv2d zero_conv(int64_t in, int64_t out) {
  auto c = conv1x1(in, out);
  zero_module(*c);
  return c;
}

void zero_module(torch::nn::Module& m) {
  torch::NoGradGuard ng;
  for (auto& p : m.parameters()) p.zero_();
}

torch::Tensor timestep_embedding(const torch::Tensor& timesteps, int64_t dim, torch::Dtype dtype) {
  const int64_t half = dim / 2;
  auto freqs = torch::exp(-std::log(10000.0) *
                          torch::arange(half, torch::TensorOptions().dtype(torch::kFloat64)) /
                          static_cast<double>(half));
  auto args = timesteps.to(torch::kFloat64).unsqueeze(1) * freqs.unsqueeze(0);
  auto emb = torch::cat({torch::cos(args), torch::sin(args)}, 1);
  if (dim % 2) emb = torch::cat({emb, torch::zeros({emb.size(0), 1}, emb.options())}, 1);
  return emb.to(dtype);
}

ResBlockImpl::ResBlockImpl(int64_t in, int64_t out, int64_t time_dim)
    : in_channels(in), out_channels(out) {
  norm1 = register_module("norm1", torch::nn::GroupNorm(group_count(in), in));
  conv1 = register_module("conv1", conv3x3(in, out));
  norm2 = register_module("norm2", torch::nn::GroupNorm(group_count(out), out));
  conv2 = register_module("conv2", conv3x3(out, out));
  if (time_dim > 0) time_proj = register_module("time_proj", torch::nn::Linear(time_dim, out));
  if (in != out) skip = register_module("skip", conv1x1(in, out));
}

torch::Tensor ResBlockImpl::forward(const torch::Tensor& x, const torch::Tensor& temb) {
  auto h = conv1->forward(torch::silu(norm1->forward(x)));
  if (time_proj && temb.defined()) {
    h = h + time_proj->forward(torch::silu(temb)).unsqueeze(-1).unsqueeze(-1);
  }
  h = conv2->forward(torch::silu(norm2->forward(h)));
  return (skip ? skip->forward(x) : x) + h;
}

AttnBlockImpl::AttnBlockImpl(int64_t channels) {
  norm = register_module("norm", torch::nn::GroupNorm(group_count(channels), channels));
  qkv = register_module("qkv", conv1x1(channels, 3 * channels));
  proj = register_module("proj", conv1x1(channels, channels));
}

torch::Tensor AttnBlockImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto parts = qkv->forward(norm->forward(x)).reshape({b, 3, c, h * w}).unbind(1);
  auto q = parts[0].transpose(1, 2);  // [B, HW, C]
  auto k = parts[1];                  // [B, C, HW]
  auto v = parts[2].transpose(1, 2);  // [B, HW, C]
  auto attn = torch::softmax(torch::bmm(q, k) / std::sqrt(static_cast<double>(c)), -1);
  auto out = torch::bmm(attn, v).transpose(1, 2).reshape({b, c, h, w});
  return x + proj->forward(out);
}

DownsampleImpl::DownsampleImpl(int64_t channels) {
  conv = register_module("conv", conv3x3(channels, channels, 2));
}

UpsampleImpl::UpsampleImpl(int64_t channels) {
  conv = register_module("conv", conv3x3(channels, channels));
}

torch::Tensor UpsampleImpl::forward(const torch::Tensor& x) {
  auto up = torch::nn::functional::interpolate(
      x, torch::nn::functional::InterpolateFuncOptions()
             .scale_factor(std::vector<double>{2.0, 2.0})
             .mode(torch::kNearest));
  return conv->forward(up);
}

std::vector<torch::Tensor> snapshot(const torch::nn::Module& m) {
  std::vector<torch::Tensor> out;
  for (const auto& p : m.parameters()) out.push_back(p.detach().clone());
  for (const auto& b : m.buffers()) out.push_back(b.detach().clone());
  return out;
}

bool identical(const std::vector<torch::Tensor>& a, const std::vector<torch::Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!a[i].sizes().equals(b[i].sizes()) || !torch::equal(a[i], b[i])) return false;
  }
  return true;
}

void set_requires_grad(torch::nn::Module& m, bool flag) {
  for (auto& p : m.parameters()) p.set_requires_grad(flag);
}

at::Generator make_generator(std::uint64_t seed) {
  return at::make_generator<at::CPUGeneratorImpl>(seed);
}

}  // namespace ur3::nn
