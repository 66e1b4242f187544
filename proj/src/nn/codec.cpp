#include "ur3/nn/codec.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "ur3/nn/checkpoint.hpp"

namespace ur3::nn {

void CodecConfig::validate() const {
  if (downsample_stages != 3) throw std::invalid_argument("CodecConfig: downsample_stages must be 3");
  if (static_cast<int64_t>(channel_mults.size()) != downsample_stages + 1)
    throw std::invalid_argument("CodecConfig: channel_mults needs downsample_stages + 1 entries");
  if (base_channels < 1 || latent_channels < 1 || blocks_per_level < 1)
    throw std::invalid_argument("CodecConfig: counts must be positive");
  for (auto m : channel_mults)
    if (m < 1) throw std::invalid_argument("CodecConfig: channel multipliers must be positive");
  if (kl_weight < 0) throw std::invalid_argument("CodecConfig: kl_weight must be >= 0");
}

nlohmann::json to_json(const CodecConfig& c) {
  return {{"base_channels", c.base_channels},       {"channel_mults", c.channel_mults},
          {"downsample_stages", c.downsample_stages}, {"latent_channels", c.latent_channels},
          {"blocks_per_level", c.blocks_per_level},   {"kl_weight", c.kl_weight}};
}

CodecConfig codec_config_from_json(const nlohmann::json& j) {
  CodecConfig c;
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.downsample_stages = j.value("downsample_stages", c.downsample_stages);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.blocks_per_level = j.value("blocks_per_level", c.blocks_per_level);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.validate();
  return c;
}

EncoderBodyImpl::EncoderBodyImpl(const CodecConfig& c) : cfg(c) {
  cfg.validate();
  levels = register_module("levels", torch::nn::ModuleList());
  downs = register_module("downs", torch::nn::ModuleList());
  int64_t ch = cfg.level_channels(0);
  for (int64_t l = 0; l <= cfg.downsample_stages; ++l) {
    torch::nn::ModuleList blocks;
    for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
      blocks->push_back(ResBlock(ch, cfg.level_channels(l)));
      ch = cfg.level_channels(l);
    }
    levels->push_back(blocks);
    if (l < cfg.downsample_stages) downs->push_back(Downsample(ch));
  }
}

std::vector<torch::Tensor> EncoderBodyImpl::forward(torch::Tensor h) {
  std::vector<torch::Tensor> out;
  for (int64_t l = 0; l <= cfg.downsample_stages; ++l) {
    for (const auto& b : *levels[l]->as<torch::nn::ModuleList>()) h = b->as<ResBlock>()->forward(h);
    out.push_back(h);
    if (l < cfg.downsample_stages) h = downs[l]->as<Downsample>()->forward(h);
  }
  return out;
}

CodecEncoderImpl::CodecEncoderImpl(CodecConfig c) : cfg(std::move(c)) {
  cfg.validate();
  const int64_t top = cfg.level_channels(cfg.downsample_stages);
  conv_in = register_module("conv_in", conv3x3(3, cfg.level_channels(0)));
  body = register_module("body", EncoderBody(cfg));
  mid1 = register_module("mid1", ResBlock(top, top));
  mid_attn = register_module("mid_attn", AttnBlock(top));
  mid2 = register_module("mid2", ResBlock(top, top));
  norm_out = register_module("norm_out", torch::nn::GroupNorm(group_count(top), top));
  conv_out = register_module("conv_out", conv3x3(top, 2 * cfg.latent_channels));
  latent_scale = register_buffer("latent_scale", torch::ones({1}));
}

std::pair<torch::Tensor, torch::Tensor> CodecEncoderImpl::forward(const torch::Tensor& x) {
  auto h = body->forward(conv_in->forward(x * 2.0 - 1.0)).back();
  h = mid2->forward(mid_attn->forward(mid1->forward(h)));
  auto moments = conv_out->forward(torch::silu(norm_out->forward(h)));
  auto parts = moments.chunk(2, 1);
  return {parts[0], parts[1].clamp(-30.0, 20.0)};
}

CodecDecoderImpl::CodecDecoderImpl(CodecConfig c) : cfg(std::move(c)) {
  cfg.validate();
  const int64_t L = cfg.downsample_stages;
  const int64_t top = cfg.level_channels(L);
  conv_in = register_module("conv_in", conv3x3(cfg.latent_channels, top));
  mid1 = register_module("mid1", ResBlock(top, top));
  mid_attn = register_module("mid_attn", AttnBlock(top));
  mid2 = register_module("mid2", ResBlock(top, top));
  levels = register_module("levels", torch::nn::ModuleList());
  ups = register_module("ups", torch::nn::ModuleList());
  // stored from the coarsest level (index 0) to full resolution (index L)
  int64_t ch = top;
  for (int64_t l = L; l >= 0; --l) {
    torch::nn::ModuleList blocks;
    for (int64_t b = 0; b < cfg.blocks_per_level; ++b) {
      blocks->push_back(ResBlock(ch, cfg.level_channels(l)));
      ch = cfg.level_channels(l);
    }
    levels->push_back(blocks);
    if (l > 0) ups->push_back(Upsample(ch));
  }
  norm_out = register_module("norm_out", torch::nn::GroupNorm(group_count(ch), ch));
  conv_out = register_module("conv_out", conv3x3(ch, 3));
  latent_scale = register_buffer("latent_scale", torch::ones({1}));
}

int64_t CodecDecoderImpl::injection_channels(int64_t level) const {
  if (level < 0 || level > cfg.downsample_stages) throw std::out_of_range("decoder level");
  return level == cfg.downsample_stages ? cfg.level_channels(level) : cfg.level_channels(level + 1);
}

torch::Tensor CodecDecoderImpl::forward(const torch::Tensor& z, const std::vector<torch::Tensor>* feats) {
  const int64_t L = cfg.downsample_stages;
  if (z.dim() != 4 || z.size(1) != cfg.latent_channels)
    throw DimensionError("decode: latent must be [N," + std::to_string(cfg.latent_channels) + ",h,w]");
  if (feats && static_cast<int64_t>(feats->size()) != L + 1)
    throw DimensionError("decode: expected one fidelity feature per decoder level");
  auto h = mid2->forward(mid_attn->forward(mid1->forward(conv_in->forward(z))));
  for (int64_t i = 0; i <= L; ++i) {
    const int64_t l = L - i;
    if (feats) {
      const auto& f = (*feats)[l];
      if (!f.sizes().equals(h.sizes()))
        throw DimensionError("decode: fidelity feature at level " + std::to_string(l) +
                             " does not match the decoder activation");
      h = h + f;
    }
    for (const auto& b : *levels[i]->as<torch::nn::ModuleList>()) h = b->as<ResBlock>()->forward(h);
    if (l > 0) h = ups[i]->as<Upsample>()->forward(h);
  }
  auto y = conv_out->forward(torch::silu(norm_out->forward(h)));
  return (y + 1.0) * 0.5;
}

namespace {

void require_divisible(int64_t h, int64_t w, int64_t f) {
  if (h % f != 0 || w % f != 0)
    throw DimensionError("encode: image dims " + std::to_string(h) + "x" + std::to_string(w) +
                         " are not divisible by " + std::to_string(f));
}

}  // namespace

torch::Tensor encode_tensor(CodecEncoder& enc, const torch::Tensor& x) {
  require_divisible(x.size(2), x.size(3), enc->cfg.factor());
  auto dtype = enc->conv_in->weight.dtype();
  return enc->forward(x.to(dtype)).first * enc->latent_scale.to(dtype);
}

torch::Tensor encode(CodecEncoder& enc, const Image& img) {
  torch::NoGradGuard ng;
  return encode_tensor(enc, image_to_tensor(img, enc->conv_in->weight.scalar_type()));
}

torch::Tensor decode_tensor(CodecDecoder& dec, const torch::Tensor& z,
                            const std::vector<torch::Tensor>* feats, bool clamp) {
  auto dtype = dec->conv_in->weight.dtype();
  auto y = dec->forward(z.to(dtype) / dec->latent_scale.to(dtype), feats);
  return clamp ? y.clamp(0.0, 1.0) : y;
}

Image decode(CodecDecoder& dec, const torch::Tensor& z, const std::vector<torch::Tensor>* feats) {
  torch::NoGradGuard ng;
  return tensor_to_image(decode_tensor(dec, z, feats)).clipped();
}

torch::Tensor kl_divergence(const torch::Tensor& mean, const torch::Tensor& logvar) {
  auto per = 0.5 * (mean.pow(2) + logvar.exp() - 1.0 - logvar);
  return per.flatten(1).sum(1).mean();
}

double estimate_latent_scale(CodecEncoder& enc, const std::vector<Image>& images) {
  torch::NoGradGuard ng;
  std::vector<torch::Tensor> means;
  for (const auto& img : images) {
    auto x = image_to_tensor(img, enc->conv_in->weight.scalar_type());
    require_divisible(x.size(2), x.size(3), enc->cfg.factor());
    means.push_back(enc->forward(x).first.flatten());
  }
  const double sd = torch::cat(means).to(torch::kFloat64).std().item<double>();
  if (!(sd > 0) || !std::isfinite(sd)) throw std::runtime_error("latent scale: degenerate latents");
  return 1.0 / sd;
}

void set_latent_scale(CodecEncoder& enc, CodecDecoder& dec, double scale) {
  torch::NoGradGuard ng;
  enc->latent_scale.fill_(scale);
  dec->latent_scale.fill_(scale);
}

CodecTrainResult train_codec(CodecEncoder& enc, CodecDecoder& dec, const std::vector<Image>& images,
                             const TrainSchedule& sched, const CodecTrainOptions& opts) {
  if (images.empty()) throw std::invalid_argument("train_codec: empty dataset");
  sched.validate();
  const int64_t f = enc->cfg.factor();
  int patch = opts.patch;
  std::vector<torch::Tensor> data;
  for (const auto& img : images) {
    patch = std::min({patch, img.height(), img.width()});
    data.push_back(image_to_tensor(img));
  }
  patch = static_cast<int>(patch / f * f);
  if (patch < f) throw DimensionError("train_codec: images smaller than the latent factor");

  std::mt19937_64 rng(sched.seed);
  auto gen = make_generator(sched.seed ^ 0x9e3779b97f4a7c15ULL);
  enc->train();
  dec->train();
  std::vector<torch::Tensor> params = enc->parameters();
  for (auto& p : dec->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(sched.initial_lr)
                                      .weight_decay(sched.weight_decay));
  CodecTrainResult res;
  for (int64_t it = 0; it < sched.total_iters; ++it) {
    const double lr = lr_at(sched, it);
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    std::vector<torch::Tensor> xb;
    for (int64_t b = 0; b < sched.batch_size; ++b) {
      const auto& x = data[rng() % data.size()];
      const int64_t top = rng() % (x.size(2) - patch + 1);
      const int64_t left = rng() % (x.size(3) - patch + 1);
      xb.push_back(x.narrow(2, top, patch).narrow(3, left, patch));
    }
    auto x = torch::cat(xb, 0);
    opt.zero_grad();
    auto [mean, logvar] = enc->forward(x);
    auto z = mean + torch::exp(0.5 * logvar) * torch::randn(mean.sizes(), gen, mean.options());
    auto recon = dec->forward(z);
    auto loss = torch::l1_loss(recon, x) + enc->cfg.kl_weight * kl_divergence(mean, logvar);
    loss.backward();
    opt.step();
    const double l = loss.item<double>();
    res.losses.push_back(l);
    if (opts.log) opts.log(it, l, lr);
    if (sched.checkpoint_every > 0 && (it + 1) % sched.checkpoint_every == 0) {
      if (!opts.encoder_path.empty()) save_codec_encoder(opts.encoder_path, enc, it + 1);
      if (!opts.decoder_path.empty()) save_codec_decoder(opts.decoder_path, dec, it + 1);
    }
  }
  enc->eval();
  dec->eval();
  res.latent_scale = estimate_latent_scale(enc, images);
  set_latent_scale(enc, dec, res.latent_scale);
  if (!opts.encoder_path.empty()) save_codec_encoder(opts.encoder_path, enc, sched.total_iters);
  if (!opts.decoder_path.empty()) save_codec_decoder(opts.decoder_path, dec, sched.total_iters);
  return res;
}

namespace {

template <class M>
void save_half(const std::filesystem::path& path, M& m, const char* kind, int64_t iteration) {
  CheckpointHeader h;
  h.kind = kind;
  h.config = to_json(m->cfg);
  h.iteration = iteration;
  h.extra = {{"latent_scale", m->latent_scale.template item<double>()}};
  save_checkpoint(path, *m, h);
}

}  // namespace

void save_codec_encoder(const std::filesystem::path& path, CodecEncoder& enc, int64_t iteration) {
  save_half(path, enc, "codec_encoder", iteration);
}

void save_codec_decoder(const std::filesystem::path& path, CodecDecoder& dec, int64_t iteration) {
  save_half(path, dec, "codec_decoder", iteration);
}

CodecEncoder load_codec_encoder(const std::filesystem::path& path) {
  CodecEncoder enc(codec_config_from_json(read_checkpoint_header(path).config));
  load_checkpoint(path, *enc, "codec_encoder");
  enc->eval();
  return enc;
}

CodecDecoder load_codec_decoder(const std::filesystem::path& path) {
  CodecDecoder dec(codec_config_from_json(read_checkpoint_header(path).config));
  load_checkpoint(path, *dec, "codec_decoder");
  dec->eval();
  return dec;
}

}  // namespace ur3::nn
