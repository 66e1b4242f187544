#include "ur3/nn/control.hpp"

#include <cmath>
#include <random>
#include <stdexcept>

#include "ur3/image.hpp"
#include "ur3/nn/checkpoint.hpp"

namespace ur3::nn {

void ModulateConfig::validate() const {
  if (channels < 1 || layers < 0 || heads < 1 || ffn_expansion < 1 || latent_channels < 1)
    throw std::invalid_argument("ModulateConfig: counts must be positive");
  if (channels % heads != 0) throw std::invalid_argument("ModulateConfig: heads must divide channels");
}

nlohmann::json to_json(const ModulateConfig& c) {
  return {{"channels", c.channels},
          {"layers", c.layers},
          {"heads", c.heads},
          {"ffn_expansion", c.ffn_expansion},
          {"latent_channels", c.latent_channels}};
}

ModulateConfig modulate_config_from_json(const nlohmann::json& j) {
  ModulateConfig c;
  c.channels = j.value("channels", c.channels);
  c.layers = j.value("layers", c.layers);
  c.heads = j.value("heads", c.heads);
  c.ffn_expansion = j.value("ffn_expansion", c.ffn_expansion);
  c.latent_channels = j.value("latent_channels", c.latent_channels);
  c.validate();
  return c;
}

CrossAttentionLayerImpl::CrossAttentionLayerImpl(int64_t c, int64_t heads_, int64_t expansion)
    : heads(heads_) {
  norm_q = register_module("norm_q", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  norm_kv = register_module("norm_kv", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  norm_ffn = register_module("norm_ffn", torch::nn::LayerNorm(torch::nn::LayerNormOptions({c})));
  to_q = register_module("to_q", torch::nn::Linear(c, c));
  to_k = register_module("to_k", torch::nn::Linear(c, c));
  to_v = register_module("to_v", torch::nn::Linear(c, c));
  to_out = register_module("to_out", torch::nn::Linear(c, c));
  ffn1 = register_module("ffn1", torch::nn::Linear(c, c * expansion));
  ffn2 = register_module("ffn2", torch::nn::Linear(c * expansion, c));
}

torch::Tensor CrossAttentionLayerImpl::forward(const torch::Tensor& x, const torch::Tensor& context) {
  const auto B = x.size(0), N = x.size(1), C = x.size(2), M = context.size(1);
  const int64_t d = C / heads;
  auto split = [&](const torch::Tensor& t, int64_t n) {
    return t.view({B, n, heads, d}).transpose(1, 2);
  };
  auto kv = norm_kv->forward(context);
  auto q = split(to_q->forward(norm_q->forward(x)), N);
  auto k = split(to_k->forward(kv), M);
  auto v = split(to_v->forward(kv), M);
  auto attn = torch::softmax(torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(d)), -1);
  auto out = torch::matmul(attn, v).transpose(1, 2).reshape({B, N, C});
  auto h = x + to_out->forward(out);
  return h + ffn2->forward(torch::gelu(ffn1->forward(norm_ffn->forward(h))));
}

ModulateImpl::ModulateImpl(ModulateConfig c) : cfg(std::move(c)) {
  cfg.validate();
  conv_c = register_module("conv_c", conv3x3(cfg.latent_channels, cfg.channels));
  conv_z = register_module("conv_z", conv3x3(cfg.latent_channels, cfg.channels));
  layers = register_module("layers", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.layers; ++i)
    layers->push_back(CrossAttentionLayer(cfg.channels, cfg.heads, cfg.ffn_expansion));
  conv_out = register_module("conv_out", conv3x3(cfg.channels, cfg.latent_channels));
}

torch::Tensor ModulateImpl::forward(const torch::Tensor& c, const torch::Tensor& z_t) {
  if (!c.sizes().equals(z_t.sizes()) || c.dim() != 4 || c.size(1) != cfg.latent_channels)
    throw DimensionError("modulate: condition and noisy latent must share a [B," +
                         std::to_string(cfg.latent_channels) + ",h,w] shape");
  const auto B = c.size(0), H = c.size(2), W = c.size(3);
  auto f_c = conv_c->forward(c);
  auto f_z = conv_z->forward(z_t);
  auto ctx = f_c.flatten(2).transpose(1, 2);
  auto x = f_z.flatten(2).transpose(1, 2);
  for (const auto& l : *layers) x = l->as<CrossAttentionLayer>()->forward(x, ctx);
  auto f_cross = x.transpose(1, 2).reshape({B, cfg.channels, H, W});
  return conv_out->forward(f_cross + f_z);
}

torch::Tensor modulate(Modulate& block, const torch::Tensor& c, const torch::Tensor& z_t) {
  return block->forward(c, z_t);
}

GateImpl::GateImpl(int64_t arity_, int64_t channels_per_input, int64_t hidden, bool softmax)
    : arity(arity_), channels(channels_per_input), use_softmax(softmax) {
  if (arity < 2) throw std::invalid_argument("Gate: needs at least two inputs");
  if (!use_softmax && arity != 2) throw std::invalid_argument("Gate: sigmoid form is two-way only");
  conv1 = register_module("conv1", conv3x3(arity * channels, hidden));
  conv2 = register_module("conv2", conv3x3(hidden, use_softmax ? arity : 1));
}

torch::Tensor GateImpl::logits(const std::vector<torch::Tensor>& inputs) {
  if (static_cast<int64_t>(inputs.size()) != arity)
    throw std::invalid_argument("gate: expected " + std::to_string(arity) + " inputs, got " +
                                std::to_string(inputs.size()));
  for (const auto& x : inputs) {
    if (!x.sizes().equals(inputs[0].sizes()) || x.dim() != 4 || x.size(1) != channels)
      throw DimensionError("gate: inputs must be shape-identical with " + std::to_string(channels) +
                           " channels");
  }
  return conv2->forward(torch::relu(conv1->forward(torch::cat(inputs, 1))));
}

GateImpl::Output GateImpl::forward(const std::vector<torch::Tensor>& inputs) {
  auto a = logits(inputs);
  Output out;
  if (use_softmax) {
    out.weights = torch::softmax(a, 1);
    for (int64_t i = 0; i < arity; ++i) out.gated.push_back(out.weights.narrow(1, i, 1) * inputs[i]);
  } else {
    auto alpha = torch::sigmoid(a);
    auto rest = 1.0 - alpha;
    out.weights = torch::cat({alpha, rest}, 1);
    out.gated = {alpha * inputs[0], rest * inputs[1]};
  }
  return out;
}

Gate2Result gate2(Gate& gate, const torch::Tensor& c_hat_s, const torch::Tensor& c_hat_lq) {
  if (gate->arity != 2 || gate->use_softmax) throw std::invalid_argument("gate2: needs a two-way sigmoid gate");
  auto out = gate->forward({c_hat_s, c_hat_lq});
  return {out.gated[0], out.gated[1], out.weights.narrow(1, 0, 1)};
}

GateImpl::Output gate_n(Gate& gate, const std::vector<torch::Tensor>& c_hats) {
  if (c_hats.size() < 2) throw std::invalid_argument("gate_n: needs at least two inputs");
  return gate->forward(c_hats);
}

void ControlBranchConfig::validate() const {
  modulate.validate();
  denoiser.validate();
  if (arity < 2) throw std::invalid_argument("ControlBranchConfig: arity must be >= 2");
  if (gate_hidden < 1) throw std::invalid_argument("ControlBranchConfig: gate_hidden must be >= 1");
  if (modulate.latent_channels != denoiser.in_channels)
    throw std::invalid_argument("ControlBranchConfig: latent channels disagree");
}

nlohmann::json to_json(const ControlBranchConfig& c) {
  return {{"modulate", to_json(c.modulate)},
          {"denoiser", to_json(c.denoiser)},
          {"arity", c.arity},
          {"gate_hidden", c.gate_hidden}};
}

ControlBranchConfig control_config_from_json(const nlohmann::json& j) {
  ControlBranchConfig c;
  if (j.contains("modulate")) c.modulate = modulate_config_from_json(j["modulate"]);
  if (j.contains("denoiser")) c.denoiser = denoiser_config_from_json(j["denoiser"]);
  c.arity = j.value("arity", c.arity);
  c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
  c.validate();
  return c;
}

ControlBranchImpl::ControlBranchImpl(ControlBranchConfig c) : cfg(std::move(c)) {
  cfg.validate();
  const int64_t lc = cfg.denoiser.in_channels;
  modulators = register_module("modulators", torch::nn::ModuleList());
  for (int64_t i = 0; i < cfg.arity; ++i) modulators->push_back(Modulate(cfg.modulate));
  gate = register_module("gate", Gate(cfg.arity, lc, cfg.gate_hidden, cfg.arity > 2));
  copy = register_module("copy", DenoiserEncoder(cfg.denoiser, lc * (cfg.arity + 1)));
  zero_convs = register_module("zero_convs", torch::nn::ModuleList());
  for (int64_t ch : copy->skip_channels()) zero_convs->push_back(zero_conv(ch, ch));
  const int64_t mid = copy->middle_channels();
  zero_middle = register_module("zero_middle", zero_conv(mid, mid));
}

void ControlBranchImpl::init_from(Denoiser& base, std::string base_arch_hash) {
  if (to_json(base->cfg) != to_json(cfg.denoiser))
    throw std::invalid_argument("control branch: base denoiser config differs from the branch's");
  torch::NoGradGuard ng;
  auto src = base->encoder->named_parameters(true);
  for (auto& item : copy->named_parameters(true)) {
    const auto& name = item.key();
    auto& dst = item.value();
    const auto& from = src[name];
    if (name == "conv_in.weight") {
      dst.zero_();
      const int64_t lc = cfg.denoiser.in_channels;
      dst.narrow(1, dst.size(1) - lc, lc).copy_(from);
    } else {
      dst.copy_(from);
    }
  }
  base_hash = std::move(base_arch_hash);
}

ControlSignals ControlBranchImpl::forward(const ConditionSet& cond, const torch::Tensor& t) {
  if (static_cast<int64_t>(cond.conditions.size()) != cfg.arity)
    throw std::invalid_argument("control_forward: branch expects " + std::to_string(cfg.arity) +
                                " conditions, got " + std::to_string(cond.conditions.size()));
  std::vector<torch::Tensor> c_hat;
  for (int64_t i = 0; i < cfg.arity; ++i) {
    const auto& c = cond.conditions[i];
    if (!c.sizes().equals(cond.z_t.sizes()))
      throw DimensionError("control_forward: condition " + std::to_string(i) +
                           " does not match the noisy latent");
    c_hat.push_back(modulators[i]->as<Modulate>()->forward(c, cond.z_t));
  }
  auto gated = gate->forward(c_hat).gated;
  gated.push_back(cond.z_t);
  auto enc = copy->forward(torch::cat(gated, 1), t);
  ControlSignals out;
  for (std::size_t i = 0; i < enc.skips.size(); ++i)
    out.skips.push_back(zero_convs[i]->as<torch::nn::Conv2d>()->forward(enc.skips[i]));
  out.middle = zero_middle->forward(enc.middle);
  return out;
}

ControlSignals control_forward(ControlBranch& branch, const ConditionSet& cond, const torch::Tensor& t) {
  if (!branch) throw std::logic_error("control_forward: branch is not initialized");
  return branch->forward(cond, t);
}

ControlSignals control_forward(ControlBranch& branch, const ConditionSet& cond, int64_t t) {
  return control_forward(branch, cond, torch::full({cond.z_t.size(0)}, t, torch::kLong));
}

torch::Tensor controlled_eps(Denoiser& unet, ControlBranch& branch, const ConditionSet& cond,
                             const torch::Tensor& t) {
  const auto signals = control_forward(branch, cond, t);
  return predict_noise(unet, cond.z_t, t, &signals);
}

torch::Tensor training_step(Denoiser& unet, ControlBranch* branch, const LatentBatch& batch,
                            const NoiseSchedule& sched, at::Generator& gen) {
  if (!branch || !*branch) return training_step(unet, batch, sched, gen);
  return epsilon_loss(
      [&](const torch::Tensor& z_t, const torch::Tensor& t, const LatentBatch& b) {
        return controlled_eps(unet, *branch, ConditionSet{b.conditions, z_t}, t);
      },
      batch, sched, gen);
}

std::vector<double> train_control(Denoiser& unet, ControlBranch& branch, const torch::Tensor& z0,
                                  const std::vector<torch::Tensor>& conditions,
                                  const NoiseSchedule& sched, const TrainSchedule& train,
                                  const ControlTrainOptions& opts) {
  if (!z0.defined() || z0.size(0) == 0) throw std::invalid_argument("train_control: empty dataset");
  if (static_cast<int64_t>(conditions.size()) != branch->cfg.arity)
    throw std::invalid_argument("train_control: condition count differs from the branch arity");
  train.validate();
  std::mt19937_64 rng(train.seed);
  auto gen = make_generator(train.seed ^ 0x2545f4914f6cdd1dULL);
  set_requires_grad(*unet, opts.finetune_base);
  unet->train();
  branch->train();
  auto params = branch->parameters();
  if (opts.finetune_base)
    for (auto& p : unet->parameters()) params.push_back(p);
  torch::optim::AdamW opt(params, torch::optim::AdamWOptions(train.initial_lr)
                                      .weight_decay(train.weight_decay));
  std::vector<double> losses;
  for (int64_t it = 0; it < train.total_iters; ++it) {
    const double lr = lr_at(train, it);
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    auto batch = sample_latent_batch(z0, conditions, train.batch_size, opts.latent_patch, rng);
    opt.zero_grad();
    auto loss = training_step(unet, &branch, batch, sched, gen);
    loss.backward();
    opt.step();
    losses.push_back(loss.item<double>());
    if (opts.log) opts.log(it, losses.back(), lr);
    if (train.checkpoint_every > 0 && !train.checkpoint_path.empty() &&
        (it + 1) % train.checkpoint_every == 0)
      save_control_branch(train.checkpoint_path, branch, it + 1);
  }
  unet->eval();
  branch->eval();
  return losses;
}

void save_control_branch(const std::filesystem::path& path, ControlBranch& branch, int64_t iteration) {
  CheckpointHeader h;
  h.kind = "control_branch";
  h.config = to_json(branch->cfg);
  h.iteration = iteration;
  h.extra = {{"base_hash", branch->base_hash}};
  save_checkpoint(path, *branch, h);
}

ControlBranch load_control_branch(const std::filesystem::path& path, const std::string& base_hash) {
  const auto header = read_checkpoint_header(path);
  const std::string recorded = header.extra.value("base_hash", std::string{});
  if (recorded != base_hash)
    throw CheckpointError(path.string() + " was trained against denoiser " + recorded +
                          ", but the loaded denoiser is " + base_hash);
  ControlBranch branch(control_config_from_json(header.config));
  load_checkpoint(path, *branch, "control_branch");
  branch->base_hash = recorded;
  branch->eval();
  return branch;
}

}  // namespace ur3::nn
