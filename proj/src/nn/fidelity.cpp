#include "ur3/nn/fidelity.hpp"

#include <random>

#include "ur3/nn/checkpoint.hpp"

namespace ur3::nn {

nlohmann::json to_json(const FEConfig& c) {
  return {{"codec", to_json(c.codec)}, {"gate_hidden", c.gate_hidden}};
}

FEConfig fe_config_from_json(const nlohmann::json& j) {
  FEConfig c;
  c.codec = codec_config_from_json(j.at("codec"));
  c.gate_hidden = j.value("gate_hidden", c.gate_hidden);
  c.validate();
  return c;
}

FidelityEncoderImpl::FidelityEncoderImpl(FEConfig c) : cfg(std::move(c)) {
  cfg.validate();
  const auto& cc = cfg.codec;
  const int64_t L = cc.downsample_stages;
  stem = register_module("stem", conv3x3(3, cc.level_channels(0)));
  gate = register_module("gate", Gate(2, cc.level_channels(0), cfg.gate_hidden, false));
  body = register_module("body", EncoderBody(cc));
  zero_convs = register_module("zero_convs", torch::nn::ModuleList());
  for (int64_t l = 0; l <= L; ++l) {
    const int64_t inject = l == L ? cc.level_channels(l) : cc.level_channels(l + 1);
    zero_convs->push_back(zero_conv(cc.level_channels(l), inject));
  }
}

std::vector<torch::Tensor> FidelityEncoderImpl::raw_features(const torch::Tensor& fused) {
  return body->forward(fused);
}

namespace {

FidelityFeatures project(torch::nn::ModuleList& convs, const std::vector<torch::Tensor>& raw) {
  FidelityFeatures out;
  for (std::size_t l = 0; l < raw.size(); ++l)
    out.push_back(convs[l]->as<torch::nn::Conv2d>()->forward(raw[l]));
  return out;
}

void check_pair(const torch::Tensor& lq, const torch::Tensor& s, int64_t f) {
  if (!lq.sizes().equals(s.sizes()) || lq.dim() != 4 || lq.size(1) != 3)
    throw DimensionError("extract_fidelity: lq and s must be shape-identical [N,3,H,W]");
  if (lq.size(2) % f != 0 || lq.size(3) % f != 0)
    throw DimensionError("extract_fidelity: dims must be divisible by " + std::to_string(f));
}

}  // namespace

FidelityFeatures FidelityEncoderImpl::forward(const torch::Tensor& lq, const torch::Tensor& s) {
  check_pair(lq, s, cfg.codec.factor());
  auto f_lq = stem->forward(lq * 2.0 - 1.0);
  auto f_s = stem->forward(s * 2.0 - 1.0);
  auto g = gate->forward({f_s, f_lq});
  return project(zero_convs, raw_features(g.gated[0] + g.gated[1]));
}

FidelityFeatures FidelityEncoderImpl::forward_single(const torch::Tensor& x) {
  check_pair(x, x, cfg.codec.factor());
  return project(zero_convs, raw_features(stem->forward(x * 2.0 - 1.0)));
}

FidelityFeatures extract_fidelity(FidelityEncoder& fe, const torch::Tensor& lq, const torch::Tensor& s) {
  if (!fe) throw std::logic_error("extract_fidelity: encoder is not initialized");
  auto dtype = fe->stem->weight.dtype();
  return fe->forward(lq.to(dtype), s.to(dtype));
}

FidelityFeatures extract_fidelity(FidelityEncoder& fe, const Image& lq, const Image& s) {
  require_same_shape(lq, s, "extract_fidelity");
  torch::NoGradGuard ng;
  return extract_fidelity(fe, image_to_tensor(lq), image_to_tensor(s));
}

Image decode_with_fidelity(CodecDecoder& dec, const torch::Tensor& z, FidelityEncoder& fe,
                           const Image& lq, const Image& s) {
  torch::NoGradGuard ng;
  const auto feats = extract_fidelity(fe, lq, s);
  return decode(dec, z, &feats);
}

void freeze(torch::nn::Module& m) {
  set_requires_grad(m, false);
  m.eval();
}

std::vector<double> train_fe(FidelityEncoder& fe, CodecDecoder& dec, CodecEncoder& enc,
                             const std::vector<FidelityTriple>& triples, const TrainSchedule& sched,
                             const FETrainOptions& opts) {
  for (const auto& p : enc->parameters())
    if (p.requires_grad()) throw ConfigurationError("train_fe: codec encoder is not frozen");
  for (const auto& p : dec->parameters())
    if (p.requires_grad()) throw ConfigurationError("train_fe: codec decoder is not frozen");
  if (triples.empty()) throw std::invalid_argument("train_fe: empty dataset");
  if (to_json(fe->cfg.codec) != to_json(dec->cfg))
    throw ConfigurationError("train_fe: fidelity encoder and decoder configs differ");
  sched.validate();

  const int64_t f = dec->cfg.factor();
  int patch = opts.patch;
  std::vector<torch::Tensor> lq, s, gt;
  for (const auto& t : triples) {
    require_same_shape(t.lq, t.gt, "train_fe triple");
    require_same_shape(t.s, t.gt, "train_fe triple");
    patch = std::min({patch, t.gt.height(), t.gt.width()});
    lq.push_back(image_to_tensor(t.lq));
    s.push_back(image_to_tensor(t.s));
    gt.push_back(image_to_tensor(t.gt));
  }
  patch = static_cast<int>(patch / f * f);
  if (patch < f) throw DimensionError("train_fe: images smaller than the latent factor");

  std::mt19937_64 rng(sched.seed);
  enc->eval();
  dec->eval();
  fe->train();
  torch::optim::AdamW opt(fe->parameters(), torch::optim::AdamWOptions(sched.initial_lr)
                                                .weight_decay(sched.weight_decay));
  std::vector<double> losses;
  for (int64_t it = 0; it < sched.total_iters; ++it) {
    const double lr = lr_at(sched, it);
    for (auto& g : opt.param_groups()) static_cast<torch::optim::AdamWOptions&>(g.options()).lr(lr);
    std::vector<torch::Tensor> lb, sb, gb;
    for (int64_t b = 0; b < sched.batch_size; ++b) {
      const std::size_t i = rng() % triples.size();
      const int64_t top = rng() % (gt[i].size(2) - patch + 1);
      const int64_t left = rng() % (gt[i].size(3) - patch + 1);
      auto crop = [&](const torch::Tensor& x) { return x.narrow(2, top, patch).narrow(3, left, patch); };
      lb.push_back(crop(lq[i]));
      sb.push_back(crop(s[i]));
      gb.push_back(crop(gt[i]));
    }
    auto target = torch::cat(gb, 0);
    torch::Tensor z0;
    {
      torch::NoGradGuard ng;
      z0 = encode_tensor(enc, target);
    }
    opt.zero_grad();
    const auto feats = fe->forward(torch::cat(lb, 0), torch::cat(sb, 0));
    auto loss = torch::l1_loss(decode_tensor(dec, z0, &feats, false), target);
    loss.backward();
    opt.step();
    losses.push_back(loss.item<double>());
    if (opts.log) opts.log(it, losses.back(), lr);
    if (sched.checkpoint_every > 0 && !sched.checkpoint_path.empty() &&
        (it + 1) % sched.checkpoint_every == 0)
      save_fidelity_encoder(sched.checkpoint_path, fe, it + 1);
  }
  fe->eval();
  return losses;
}

void save_fidelity_encoder(const std::filesystem::path& path, FidelityEncoder& fe, int64_t iteration) {
  CheckpointHeader h;
  h.kind = "fidelity_encoder";
  h.config = to_json(fe->cfg);
  h.iteration = iteration;
  save_checkpoint(path, *fe, h);
}

FidelityEncoder load_fidelity_encoder(const std::filesystem::path& path) {
  FidelityEncoder fe(fe_config_from_json(read_checkpoint_header(path).config));
  load_checkpoint(path, *fe, "fidelity_encoder");
  fe->eval();
  return fe;
}

}  // namespace ur3::nn
