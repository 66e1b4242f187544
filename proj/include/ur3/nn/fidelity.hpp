#pragma once

#include <torch/torch.h>

#include <filesystem>
#include <stdexcept>
#include <vector>

#include "ur3/image.hpp"
#include "ur3/nn/codec.hpp"
#include "ur3/nn/control.hpp"

namespace ur3::nn {

struct ConfigurationError : std::logic_error {
  using std::logic_error::logic_error;
};

struct FEConfig {
  CodecConfig codec;  // must equal the paired codec's config
  int64_t gate_hidden = 16;
  void validate() const { codec.validate(); }
};

nlohmann::json to_json(const FEConfig& c);
FEConfig fe_config_from_json(const nlohmann::json& j);

/// One feature map per decoder level, index 0 at full resolution.
using FidelityFeatures = std::vector<torch::Tensor>;

struct FidelityEncoderImpl : torch::nn::Module {
  explicit FidelityEncoderImpl(FEConfig cfg);
  /// Gated pair; images in [0,1], [N,3,H,W].
  FidelityFeatures forward(const torch::Tensor& lq, const torch::Tensor& s);
  /// The same path without the gate, for a single image.
  FidelityFeatures forward_single(const torch::Tensor& x);
  /// Body activations before the zero convolutions.
  std::vector<torch::Tensor> raw_features(const torch::Tensor& fused_stem);

  FEConfig cfg;
  torch::nn::Conv2d stem{nullptr};
  Gate gate{nullptr};
  EncoderBody body{nullptr};
  torch::nn::ModuleList zero_convs;
};
TORCH_MODULE(FidelityEncoder);

FidelityFeatures extract_fidelity(FidelityEncoder& fe, const Image& lq, const Image& s);
FidelityFeatures extract_fidelity(FidelityEncoder& fe, const torch::Tensor& lq, const torch::Tensor& s);

/// decode(z, extract_fidelity(lq, s)), clamped to [0,1].
Image decode_with_fidelity(CodecDecoder& dec, const torch::Tensor& z, FidelityEncoder& fe,
                           const Image& lq, const Image& s);

/// Disables gradients on every codec parameter.
void freeze(torch::nn::Module& m);

struct FidelityTriple {
  Image lq, s, gt;
};

struct FETrainOptions {
  int patch = 64;
  TrainLog log;
};

/// L1 between decode(encode(gt), features(lq, s)) and gt; only the encoder learns.
/// Throws ConfigurationError when any codec parameter still requires gradients.
std::vector<double> train_fe(FidelityEncoder& fe, CodecDecoder& dec, CodecEncoder& enc,
                             const std::vector<FidelityTriple>& triples, const TrainSchedule& sched,
                             const FETrainOptions& opts = {});

void save_fidelity_encoder(const std::filesystem::path& path, FidelityEncoder& fe,
                           int64_t iteration = 0);
FidelityEncoder load_fidelity_encoder(const std::filesystem::path& path);

}  // namespace ur3::nn
