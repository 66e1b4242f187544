#include "ur3/nn/diffusion.hpp"

#include <cmath>
#include <stdexcept>

#include "ur3/image.hpp"
#include "ur3/nn/checkpoint.hpp"

namespace ur3::nn {

NoiseSchedule NoiseSchedule::linear(int64_t T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("NoiseSchedule: T must be >= 1");
  std::vector<double> betas(T);
  for (int64_t t = 0; t < T; ++t)
    betas[t] = T == 1 ? beta_start
                      : beta_start + (beta_end - beta_start) * static_cast<double>(t) / (T - 1);
  auto s = from_betas(std::move(betas));
  s.beta_start = beta_start;
  s.beta_end = beta_end;
  return s;
}

NoiseSchedule NoiseSchedule::from_betas(std::vector<double> betas) {
  NoiseSchedule s;
  s.T = static_cast<int64_t>(betas.size());
  s.betas = std::move(betas);
  double prod = 1.0;
  for (double b : s.betas) {
    s.alphas.push_back(1.0 - b);
    prod *= 1.0 - b;
    s.alpha_bars.push_back(prod);
  }
  if (s.T > 0) {
    s.beta_start = s.betas.front();
    s.beta_end = s.betas.back();
  }
  s.validate();
  return s;
}

void NoiseSchedule::validate() const {
  if (T < 1 || static_cast<int64_t>(betas.size()) != T)
    throw std::invalid_argument("NoiseSchedule: empty or inconsistent");
  for (double b : betas)
    if (!(b > 0.0 && b < 1.0)) throw std::invalid_argument("NoiseSchedule: betas must lie in (0,1)");
  for (int64_t t = 1; t < T; ++t)
    if (!(alpha_bars[t] < alpha_bars[t - 1]))
      throw std::invalid_argument("NoiseSchedule: alpha_bars must strictly decrease");
}

double SpacedSchedule::posterior_variance(std::size_t i) const {
  return (1.0 - alpha_bar_prev(i)) / (1.0 - alpha_bars.at(i)) * betas.at(i);
}

SpacedSchedule respace(const NoiseSchedule& sched, int64_t n) {
  sched.validate();
  if (n < 1 || n > sched.T)
    throw std::out_of_range("respace: n must lie in [1, " + std::to_string(sched.T) + "]");
  SpacedSchedule s;
  s.parent = sched;
  if (n == 1) {
    s.steps = {sched.T - 1};
  } else {
    for (int64_t i = 0; i < n; ++i)
      s.steps.push_back(static_cast<int64_t>(
          std::llround(static_cast<double>(i) * (sched.T - 1) / static_cast<double>(n - 1))));
  }
  double prev = 1.0;
  for (int64_t t : s.steps) {
    const double ab = sched.alpha_bars[t];
    s.alpha_bars.push_back(ab);
    s.betas.push_back(1.0 - ab / prev);
    prev = ab;
  }
  return s;
}

torch::Tensor add_noise(const torch::Tensor& z0, double alpha_bar, const torch::Tensor& eps) {
  if (!z0.sizes().equals(eps.sizes())) throw DimensionError("add_noise: eps shape mismatch");
  return std::sqrt(alpha_bar) * z0 + std::sqrt(1.0 - alpha_bar) * eps;
}

torch::Tensor add_noise(const torch::Tensor& z0, int64_t t, const torch::Tensor& eps,
                        const NoiseSchedule& sched) {
  if (t < 0 || t >= sched.T) throw std::out_of_range("add_noise: timestep out of range");
  return add_noise(z0, sched.alpha_bars[t], eps);
}

torch::Tensor add_noise(const torch::Tensor& z0, const torch::Tensor& t, const torch::Tensor& eps,
                        const NoiseSchedule& sched) {
  if (!z0.sizes().equals(eps.sizes())) throw DimensionError("add_noise: eps shape mismatch");
  if (t.dim() != 1 || t.size(0) != z0.size(0))
    throw DimensionError("add_noise: need one timestep per sample");
  if (t.min().item<int64_t>() < 0 || t.max().item<int64_t>() >= sched.T)
    throw std::out_of_range("add_noise: timestep out of range");
  auto ab = torch::tensor(sched.alpha_bars, torch::kFloat64).index_select(0, t.to(torch::kLong));
  ab = ab.to(z0.dtype()).view({-1, 1, 1, 1});
  return torch::sqrt(ab) * z0 + torch::sqrt(1.0 - ab) * eps;
}

void DenoiserConfig::validate() const {
  if (in_channels < 1 || base_channels < 1 || res_blocks < 1)
    throw std::invalid_argument("DenoiserConfig: counts must be positive");
  if (channel_mults.empty()) throw std::invalid_argument("DenoiserConfig: no levels");
  for (auto m : channel_mults)
    if (m < 1) throw std::invalid_argument("DenoiserConfig: channel multipliers must be positive");
  if (temb_dim() < 2) throw std::invalid_argument("DenoiserConfig: time embedding too small");
}

nlohmann::json to_json(const DenoiserConfig& c) {
  return {{"in_channels", c.in_channels},     {"base_channels", c.base_channels},
          {"channel_mults", c.channel_mults}, {"time_embed_dim", c.time_embed_dim},
          {"res_blocks", c.res_blocks},       {"attention_at_lowest", c.attention_at_lowest}};
}

DenoiserConfig denoiser_config_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.base_channels = j.value("base_channels", c.base_channels);
  c.channel_mults = j.value("channel_mults", c.channel_mults);
  c.time_embed_dim = j.value("time_embed_dim", c.time_embed_dim);
  c.res_blocks = j.value("res_blocks", c.res_blocks);
  c.attention_at_lowest = j.value("attention_at_lowest", c.attention_at_lowest);
  c.validate();
  return c;
}

/// One U-Net stage: optional residual block (+ attention) and optional resampler.
struct UNetBlockImpl : torch::nn::Module {
  UNetBlockImpl(int64_t in, int64_t out, int64_t temb, bool attn, int resample) {
    if (out > 0) res = register_module("res", ResBlock(in, out, temb));
    if (attn) this->attn = register_module("attn", AttnBlock(out));
    const int64_t ch = out > 0 ? out : in;
    if (resample < 0) down = register_module("down", Downsample(ch));
    if (resample > 0) up = register_module("up", Upsample(ch));
  }
  torch::Tensor forward(torch::Tensor h, const torch::Tensor& temb) {
    if (res) h = res->forward(h, temb);
    if (attn) h = attn->forward(h);
    if (down) h = down->forward(h);
    if (up) h = up->forward(h);
    return h;
  }
  ResBlock res{nullptr};
  AttnBlock attn{nullptr};
  Downsample down{nullptr};
  Upsample up{nullptr};
};
TORCH_MODULE(UNetBlock);

DenoiserEncoderImpl::DenoiserEncoderImpl(DenoiserConfig c, int64_t input_channels)
    : cfg(std::move(c)) {
  cfg.validate();
  const int64_t B = cfg.base_channels, E = cfg.temb_dim();
  const int64_t levels = static_cast<int64_t>(cfg.channel_mults.size());
  time1 = register_module("time1", torch::nn::Linear(B, E));
  time2 = register_module("time2", torch::nn::Linear(E, E));
  conv_in = register_module("conv_in", conv3x3(input_channels, B));
  input_blocks = register_module("input_blocks", torch::nn::ModuleList());
  skip_ch.push_back(B);
  int64_t ch = B;
  for (int64_t l = 0; l < levels; ++l) {
    const bool attn = cfg.attention_at_lowest && l == levels - 1;
    for (int64_t r = 0; r < cfg.res_blocks; ++r) {
      input_blocks->push_back(UNetBlock(ch, B * cfg.channel_mults[l], E, attn, 0));
      ch = B * cfg.channel_mults[l];
      skip_ch.push_back(ch);
    }
    if (l + 1 < levels) {
      input_blocks->push_back(UNetBlock(ch, 0, E, false, -1));
      skip_ch.push_back(ch);
    }
  }
  mid1 = register_module("mid1", ResBlock(ch, ch, E));
  if (cfg.attention_at_lowest) mid_attn = register_module("mid_attn", AttnBlock(ch));
  mid2 = register_module("mid2", ResBlock(ch, ch, E));
}

int64_t DenoiserEncoderImpl::middle_channels() const {
  return cfg.base_channels * cfg.channel_mults.back();
}

torch::Tensor DenoiserEncoderImpl::time_embedding(const torch::Tensor& t) {
  auto e = timestep_embedding(t, cfg.base_channels, time1->weight.scalar_type());
  return time2->forward(torch::silu(time1->forward(e)));
}

DenoiserEncoderImpl::Output DenoiserEncoderImpl::forward(const torch::Tensor& x,
                                                         const torch::Tensor& t) {
  const int64_t m = cfg.size_multiple();
  if (x.dim() != 4 || x.size(2) % m != 0 || x.size(3) % m != 0)
    throw DimensionError("denoiser: latent dims must be divisible by " + std::to_string(m));
  if (t.dim() != 1 || t.size(0) != x.size(0))
    throw DimensionError("denoiser: need one timestep per sample");
  Output out;
  out.temb = time_embedding(t);
  auto h = conv_in->forward(x);
  out.skips.push_back(h);
  for (const auto& b : *input_blocks) {
    h = b->as<UNetBlock>()->forward(h, out.temb);
    out.skips.push_back(h);
  }
  h = mid1->forward(h, out.temb);
  if (mid_attn) h = mid_attn->forward(h);
  out.middle = mid2->forward(h, out.temb);
  return out;
}

DenoiserImpl::DenoiserImpl(DenoiserConfig c) : cfg(std::move(c)) {
  cfg.validate();
  encoder = register_module("encoder", DenoiserEncoder(cfg, cfg.in_channels));
  output_blocks = register_module("output_blocks", torch::nn::ModuleList());
  const int64_t B = cfg.base_channels, E = cfg.temb_dim();
  const int64_t levels = static_cast<int64_t>(cfg.channel_mults.size());
  std::vector<int64_t> skips = encoder->skip_channels();
  int64_t ch = encoder->middle_channels();
  for (int64_t l = levels - 1; l >= 0; --l) {
    const bool attn = cfg.attention_at_lowest && l == levels - 1;
    for (int64_t r = 0; r <= cfg.res_blocks; ++r) {
      const int64_t skip = skips.back();
      skips.pop_back();
      const int64_t out = B * cfg.channel_mults[l];
      const bool upsample = l > 0 && r == cfg.res_blocks;
      output_blocks->push_back(UNetBlock(ch + skip, out, E, attn, upsample ? 1 : 0));
      ch = out;
    }
  }
  norm_out = register_module("norm_out", torch::nn::GroupNorm(group_count(ch), ch));
  conv_out = register_module("conv_out", conv3x3(ch, cfg.in_channels));
  zero_module(*conv_out);
}

torch::Tensor DenoiserImpl::forward(const torch::Tensor& z, const torch::Tensor& t,
                                    const ControlSignals* control) {
  auto enc = encoder->forward(z, t);
  auto h = enc.middle;
  if (control) {
    if (control->skips.size() != enc.skips.size())
      throw DimensionError("predict_noise: control has the wrong number of skip signals");
    for (std::size_t i = 0; i < enc.skips.size(); ++i) {
      if (!control->skips[i].sizes().equals(enc.skips[i].sizes()))
        throw DimensionError("predict_noise: control skip " + std::to_string(i) + " shape mismatch");
    }
    if (!control->middle.sizes().equals(h.sizes()))
      throw DimensionError("predict_noise: control middle shape mismatch");
    h = h + control->middle;
  }
  for (const auto& b : *output_blocks) {
    auto skip = enc.skips.back();
    if (control) skip = skip + control->skips[enc.skips.size() - 1];
    enc.skips.pop_back();
    h = b->as<UNetBlock>()->forward(torch::cat({h, skip}, 1), enc.temb);
  }
  return conv_out->forward(torch::silu(norm_out->forward(h)));
}

torch::Tensor predict_noise(Denoiser& unet, const torch::Tensor& z_t, const torch::Tensor& t,
                            const ControlSignals* control) {
  if (!unet) throw std::logic_error("predict_noise: model is not initialized");
  if (z_t.dim() != 4 || z_t.size(1) != unet->cfg.in_channels)
    throw DimensionError("predict_noise: latent channel mismatch");
  return unet->forward(z_t, t, control);
}

torch::Tensor predict_noise(Denoiser& unet, const torch::Tensor& z_t, int64_t t,
                            const ControlSignals* control) {
  return predict_noise(unet, z_t, torch::full({z_t.size(0)}, t, torch::kLong), control);
}

torch::Tensor ddpm_sample(const EpsFn& eps_fn, const SpacedSchedule& sched,
                          const std::vector<int64_t>& shape, std::uint64_t seed, torch::Dtype dtype) {
  if (sched.size() == 0) throw std::invalid_argument("ddpm_sample: empty schedule");
  torch::NoGradGuard ng;
  auto gen = make_generator(seed);
  const auto opts = torch::TensorOptions().dtype(dtype);
  auto x = torch::randn(shape, gen, opts);
  for (std::size_t k = sched.size(); k-- > 0;) {
    const double ab = sched.alpha_bars[k];
    const double ab_prev = sched.alpha_bar_prev(k);
    const double beta = sched.betas[k];
    const auto eps = eps_fn(x, sched.steps[k]).to(dtype);
    const auto x0 = (x - std::sqrt(1.0 - ab) * eps) / std::sqrt(ab);
    const double c1 = beta * std::sqrt(ab_prev) / (1.0 - ab);
    const double c2 = (1.0 - ab_prev) * std::sqrt(1.0 - beta) / (1.0 - ab);
    x = c1 * x0 + c2 * x;
    if (k > 0) x = x + std::sqrt(sched.posterior_variance(k)) * torch::randn(shape, gen, opts);
  }
  return x;
}

torch::Tensor epsilon_loss(const BatchEpsModel& eps_model, const LatentBatch& batch,
                           const NoiseSchedule& sched, at::Generator& gen) {
  if (!batch.z0.defined() || batch.z0.size(0) == 0)
    throw std::invalid_argument("training_step: empty batch");
  const auto B = batch.z0.size(0);
  auto t = torch::randint(sched.T, {B}, gen, torch::kLong);
  auto eps = torch::randn(batch.z0.sizes(), gen, batch.z0.options());
  auto z_t = add_noise(batch.z0, t, eps, sched);
  return torch::mse_loss(eps_model(z_t, t, batch), eps);
}

torch::Tensor training_step(Denoiser& unet, const LatentBatch& batch, const NoiseSchedule& sched,
                            at::Generator& gen) {
  return epsilon_loss(
      [&](const torch::Tensor& z, const torch::Tensor& t, const LatentBatch&) {
        return predict_noise(unet, z, t);
      },
      batch, sched, gen);
}

LatentBatch sample_latent_batch(const torch::Tensor& z0, const std::vector<torch::Tensor>& conds,
                                int64_t batch_size, int64_t patch, std::mt19937_64& rng) {
  if (z0.size(0) == 0) throw std::invalid_argument("sample_latent_batch: no latents");
  const int64_t H = z0.size(2), W = z0.size(3);
  const int64_t ph = patch > 0 ? std::min(patch, H) : H;
  const int64_t pw = patch > 0 ? std::min(patch, W) : W;
  std::vector<torch::Tensor> zs;
  std::vector<std::vector<torch::Tensor>> cs(conds.size());
  for (int64_t b = 0; b < batch_size; ++b) {
    const int64_t i = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(z0.size(0)));
    const int64_t top = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(H - ph + 1));
    const int64_t left = static_cast<int64_t>(rng() % static_cast<std::uint64_t>(W - pw + 1));
    auto crop = [&](const torch::Tensor& x) {
      return x.narrow(0, i, 1).narrow(2, top, ph).narrow(3, left, pw);
    };
    zs.push_back(crop(z0));
    for (std::size_t c = 0; c < conds.size(); ++c) cs[c].push_back(crop(conds[c]));
  }
  LatentBatch out;
  out.z0 = torch::cat(zs, 0);
  for (auto& c : cs) out.conditions.push_back(torch::cat(c, 0));
  return out;
}

std::vector<double> train_denoiser(Denoiser& unet, const torch::Tensor& latents,
                                   const NoiseSchedule& sched, const TrainSchedule& train,
                                   const DenoiserTrainOptions& opts) {
  if (!latents.defined() || latents.size(0) == 0)
    throw std::invalid_argument("train_denoiser: empty dataset");
  train.validate();
  std::mt19937_64 rng(train.seed);
  auto gen = make_generator(train.seed ^ 0x5bd1e995ULL);
  unet->train();
  torch::optim::AdamW opt(unet->parameters(), torch::optim::AdamWOptions(train.initial_lr)
                                                  .weight_decay(train.weight_decay));
  std::vector<double> losses;
  for (int64_t it = 0; it < train.total_iters; ++it) {
    const double lr = lr_at(train, it);
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    auto batch = sample_latent_batch(latents, {}, train.batch_size, opts.latent_patch, rng);
    opt.zero_grad();
    auto loss = training_step(unet, batch, sched, gen);
    loss.backward();
    opt.step();
    losses.push_back(loss.item<double>());
    if (opts.log) opts.log(it, losses.back(), lr);
    if (train.checkpoint_every > 0 && !train.checkpoint_path.empty() &&
        (it + 1) % train.checkpoint_every == 0)
      save_denoiser(train.checkpoint_path, unet, sched, it + 1);
  }
  unet->eval();
  return losses;
}

namespace {

nlohmann::json denoiser_header_config(const DenoiserConfig& cfg, const NoiseSchedule& s) {
  return {{"unet", to_json(cfg)},
          {"schedule", {{"T", s.T}, {"beta_start", s.beta_start}, {"beta_end", s.beta_end}}}};
}

}  // namespace

std::string denoiser_arch_hash(const DenoiserConfig& cfg, const NoiseSchedule& sched) {
  return config_hash(denoiser_header_config(cfg, sched));
}

void save_denoiser(const std::filesystem::path& path, Denoiser& unet, const NoiseSchedule& sched,
                   int64_t iteration) {
  CheckpointHeader h;
  h.kind = "denoiser";
  h.config = denoiser_header_config(unet->cfg, sched);
  h.iteration = iteration;
  save_checkpoint(path, *unet, h);
}

LoadedDenoiser load_denoiser(const std::filesystem::path& path) {
  const auto header = read_checkpoint_header(path);
  LoadedDenoiser out;
  out.unet = Denoiser(denoiser_config_from_json(header.config.at("unet")));
  const auto& s = header.config.at("schedule");
  out.schedule = NoiseSchedule::linear(s.at("T").get<int64_t>(), s.at("beta_start").get<double>(),
                                       s.at("beta_end").get<double>());
  out.arch_hash = load_checkpoint(path, *out.unet, "denoiser").arch_hash;
  out.unet->eval();
  return out;
}

}  // namespace ur3::nn
