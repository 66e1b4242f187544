#include "ur3/nn/restorer.hpp"

#include <algorithm>
#include <random>
#include <stdexcept>

#include "ur3/nn/checkpoint.hpp"
#include "ur3/nn/common.hpp"

namespace ur3::nn {

namespace F = torch::nn::functional;

void RestorerConfig::validate() const {
  if (levels < 1) throw std::invalid_argument("RestorerConfig: levels must be >= 1");
  if (base_channels < 2 || base_channels % 2)
    throw std::invalid_argument("RestorerConfig: base_channels must be even and >= 2");
  if (static_cast<int64_t>(blocks_per_level.size()) != levels + 1)
    throw std::invalid_argument("RestorerConfig: blocks_per_level needs levels + 1 entries");
  if (static_cast<int64_t>(heads_per_level.size()) != levels)
    throw std::invalid_argument("RestorerConfig: heads_per_level needs one entry per level");
  for (auto n : blocks_per_level)
    if (n < 0) throw std::invalid_argument("RestorerConfig: negative block count");
  for (int64_t i = 0; i < levels; ++i) {
    const int64_t ch = base_channels << i;
    if (heads_per_level[i] < 1 || ch % heads_per_level[i] != 0)
      throw std::invalid_argument("RestorerConfig: heads must divide level channels");
  }
  if (ffn_expansion <= 0) throw std::invalid_argument("RestorerConfig: ffn_expansion must be > 0");
}

nlohmann::json to_json(const RestorerConfig& c) {
  return {{"base_channels", c.base_channels},
          {"blocks_per_level", c.blocks_per_level},
          {"heads_per_level", c.heads_per_level},
          {"levels", c.levels},
          {"ffn_expansion", c.ffn_expansion}};
}

RestorerConfig restorer_config_from_json(const nlohmann::json& j) {
  RestorerConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.blocks_per_level = j.value("blocks_per_level", c.blocks_per_level);
  c.heads_per_level = j.value("heads_per_level", c.heads_per_level);
  c.levels = j.value("levels", c.levels);
  c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
  c.validate();
  return c;
}

ChannelNormImpl::ChannelNormImpl(int64_t channels) {
  weight = register_parameter("weight", torch::ones({channels}));
  bias = register_parameter("bias", torch::zeros({channels}));
}

torch::Tensor ChannelNormImpl::forward(const torch::Tensor& x) {
  auto mu = x.mean(1, true);
  auto var = (x - mu).pow(2).mean(1, true);
  auto y = (x - mu) / torch::sqrt(var + 1e-5);
  return y * weight.view({1, -1, 1, 1}) + bias.view({1, -1, 1, 1});
}

ChannelTransformerImpl::ChannelTransformerImpl(int64_t c, int64_t heads_, double ffn_expansion)
    : heads(heads_) {
  const int64_t hidden = std::max<int64_t>(1, static_cast<int64_t>(c * ffn_expansion));
  norm1 = register_module("norm1", ChannelNorm(c));
  norm2 = register_module("norm2", ChannelNorm(c));
  temperature = register_parameter("temperature", torch::ones({heads, 1, 1}));
  qkv = register_module("qkv", conv1x1(c, 3 * c));
  qkv_dw = register_module(
      "qkv_dw", torch::nn::Conv2d(torch::nn::Conv2dOptions(3 * c, 3 * c, 3).padding(1).groups(3 * c)));
  attn_out = register_module("attn_out", conv1x1(c, c));
  ffn_in = register_module("ffn_in", conv1x1(c, 2 * hidden));
  ffn_dw = register_module(
      "ffn_dw", torch::nn::Conv2d(torch::nn::Conv2dOptions(2 * hidden, 2 * hidden, 3)
                                      .padding(1)
                                      .groups(2 * hidden)));
  ffn_out = register_module("ffn_out", conv1x1(hidden, c));
}

torch::Tensor ChannelTransformerImpl::forward(const torch::Tensor& x) {
  const auto b = x.size(0), c = x.size(1), h = x.size(2), w = x.size(3);
  auto parts = qkv_dw->forward(qkv->forward(norm1->forward(x))).chunk(3, 1);
  auto shape = std::vector<int64_t>{b, heads, c / heads, h * w};
  auto q = F::normalize(parts[0].reshape(shape), F::NormalizeFuncOptions().dim(-1));
  auto k = F::normalize(parts[1].reshape(shape), F::NormalizeFuncOptions().dim(-1));
  auto v = parts[2].reshape(shape);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) * temperature, -1);
  auto out = torch::matmul(attn, v).reshape({b, c, h, w});
  auto y = x + attn_out->forward(out);

  auto g = ffn_dw->forward(ffn_in->forward(norm2->forward(y))).chunk(2, 1);
  return y + ffn_out->forward(F::gelu(g[0]) * g[1]);
}

namespace {

torch::nn::ModuleList make_stage(int64_t n, int64_t ch, int64_t heads, double expansion) {
  torch::nn::ModuleList list;
  for (int64_t i = 0; i < n; ++i) list->push_back(ChannelTransformer(ch, heads, expansion));
  return list;
}

torch::Tensor run_stage(torch::nn::ModuleListImpl& stage, torch::Tensor x) {
  for (const auto& m : stage) x = m->as<ChannelTransformer>()->forward(x);
  return x;
}

}  // namespace

RestorerImpl::RestorerImpl(RestorerConfig c) : cfg(std::move(c)) {
  cfg.validate();
  const int64_t C = cfg.base_channels;
  embed = register_module("embed", conv3x3(3, C));
  encoders = register_module("encoders", torch::nn::ModuleList());
  downs = register_module("downs", torch::nn::ModuleList());
  ups = register_module("ups", torch::nn::ModuleList());
  reduces = register_module("reduces", torch::nn::ModuleList());
  decoders = register_module("decoders", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.levels; ++i) {
    const int64_t ch = C << i;
    encoders->push_back(make_stage(cfg.blocks_per_level[i + 1], ch, cfg.heads_per_level[i],
                                   cfg.ffn_expansion));
    if (i + 1 < cfg.levels) {
      downs->push_back(torch::nn::Sequential(conv3x3(ch, ch / 2), torch::nn::PixelUnshuffle(2)));
    }
  }
  // decoder index i runs at level i, for i = levels-2 .. 0
  for (int64_t i = 0; i + 1 < cfg.levels; ++i) {
    const int64_t ch = C << i;
    ups->push_back(torch::nn::Sequential(conv3x3(2 * ch, 4 * ch), torch::nn::PixelShuffle(2)));
    reduces->push_back(conv1x1(2 * ch, ch));
    decoders->push_back(make_stage(cfg.blocks_per_level[i + 1], ch, cfg.heads_per_level[i],
                                   cfg.ffn_expansion));
  }
  refine = register_module(
      "refine", make_stage(cfg.blocks_per_level[0], C, cfg.heads_per_level[0], cfg.ffn_expansion));
  head = register_module("head", conv3x3(C, 3));
  zero_module(*head);
}

torch::Tensor RestorerImpl::forward(const torch::Tensor& x) {
  const int64_t m = cfg.size_multiple();
  if (x.dim() != 4 || x.size(1) != 3 || x.size(2) % m != 0 || x.size(3) % m != 0)
    throw DimensionError("Restorer: input must be [N,3,H,W] with H, W divisible by " +
                         std::to_string(m));
  std::vector<torch::Tensor> skips;
  auto h = embed->forward(x);
  for (int64_t i = 0; i < cfg.levels; ++i) {
    h = run_stage(*encoders[i]->as<torch::nn::ModuleList>(), h);
    if (i + 1 < cfg.levels) {
      skips.push_back(h);
      h = downs[i]->as<torch::nn::Sequential>()->forward(h);
    }
  }
  for (int64_t i = cfg.levels - 2; i >= 0; --i) {
    h = ups[i]->as<torch::nn::Sequential>()->forward(h);
    h = reduces[i]->as<torch::nn::Conv2d>()->forward(torch::cat({h, skips[i]}, 1));
    h = run_stage(*decoders[i]->as<torch::nn::ModuleList>(), h);
  }
  h = run_stage(*refine, h);
  return head->forward(h);
}

torch::Tensor restore_tensor(Restorer& model, const torch::Tensor& x) {
  if (!model) throw std::logic_error("restore: model is not initialized");
  const int64_t m = model->cfg.size_multiple();
  const int64_t H = x.size(2), W = x.size(3);
  const int64_t ph = (m - H % m) % m, pw = (m - W % m) % m;
  auto param = model->parameters().front();
  auto in = x.to(param.dtype());
  if (ph || pw) in = F::pad(in, F::PadFuncOptions({0, pw, 0, ph}).mode(torch::kReplicate));
  auto corr = model->forward(in);
  if (ph || pw) corr = corr.narrow(2, 0, H).narrow(3, 0, W);
  return x.to(torch::kFloat64) + corr.to(torch::kFloat64);
}

Image restore(Restorer& model, const Image& lq) {
  if (!model) throw std::logic_error("restore: model is not initialized");
  torch::NoGradGuard ng;
  const bool was_training = model->is_training();
  model->eval();
  Image out = tensor_to_image(restore_tensor(model, image_to_tensor(lq, torch::kFloat64)));
  if (was_training) model->train();
  return out.clipped();
}

TrainResult train_restorer(Restorer& model, const std::vector<std::pair<Image, Image>>& pairs,
                           const TrainSchedule& sched, const RestorerTrainOptions& opts) {
  if (pairs.empty()) throw std::invalid_argument("train_restorer: empty dataset");
  sched.validate();
  const int64_t mult = model->cfg.size_multiple();
  int patch = opts.patch;
  std::vector<torch::Tensor> lq, gt;
  for (const auto& [a, b] : pairs) {
    require_same_shape(a, b, "train_restorer pair");
    patch = std::min({patch, a.height(), a.width()});
    lq.push_back(image_to_tensor(a));
    gt.push_back(image_to_tensor(b));
  }
  patch = static_cast<int>(patch / mult * mult);
  if (patch < mult) throw DimensionError("train_restorer: images smaller than the size multiple");

  std::mt19937_64 rng(sched.seed);
  torch::manual_seed(sched.seed);
  model->train();
  torch::optim::AdamW opt(model->parameters(), torch::optim::AdamWOptions(sched.initial_lr)
                                                   .weight_decay(sched.weight_decay));
  TrainResult result;
  for (int64_t it = 0; it < sched.total_iters; ++it) {
    const double lr = lr_at(sched, it);
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    std::vector<torch::Tensor> xb, yb;
    for (int64_t b = 0; b < sched.batch_size; ++b) {
      const std::size_t idx = rng() % pairs.size();
      const auto& x = lq[idx];
      const int64_t top = rng() % (x.size(2) - patch + 1);
      const int64_t left = rng() % (x.size(3) - patch + 1);
      auto xc = x.narrow(2, top, patch).narrow(3, left, patch);
      auto yc = gt[idx].narrow(2, top, patch).narrow(3, left, patch);
      if (opts.augment) {
        const auto flags = rng();
        if (flags & 1) {
          xc = xc.flip({3});
          yc = yc.flip({3});
        }
        if (flags & 2) {
          xc = xc.flip({2});
          yc = yc.flip({2});
        }
      }
      xb.push_back(xc);
      yb.push_back(yc);
    }
    auto x = torch::cat(xb, 0), y = torch::cat(yb, 0);
    opt.zero_grad();
    auto loss = torch::l1_loss(x + model->forward(x), y);
    loss.backward();
    opt.step();
    const double l = loss.item<double>();
    result.losses.push_back(l);
    if (opts.log) opts.log(it, l, lr);
    if (sched.checkpoint_every > 0 && !sched.checkpoint_path.empty() &&
        (it + 1) % sched.checkpoint_every == 0) {
      save_restorer(sched.checkpoint_path, model, it + 1);
    }
  }
  model->eval();
  return result;
}

void save_restorer(const std::filesystem::path& path, Restorer& model, int64_t iteration) {
  CheckpointHeader h;
  h.kind = "restorer";
  h.config = to_json(model->cfg);
  h.iteration = iteration;
  save_checkpoint(path, *model, h);
}

Restorer load_restorer(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  Restorer model(restorer_config_from_json(header.config));
  load_checkpoint(path, *model, "restorer");
  model->eval();
  return model;
}

}  // namespace ur3::nn
