#pragma once

#include <ATen/CPUGeneratorImpl.h>
#include <torch/torch.h>

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace ur3::testing {

struct ProbeResult {
  std::string name;
  int64_t index;
  double analytic;
  double numeric;
  double rel_error;
};

/// Compares autograd gradients of `loss_fn` against central differences for
/// `per_param` entries of each named parameter. Parameters must be double.
inline std::vector<ProbeResult> finite_difference_probe(
    torch::nn::Module& module, const std::function<torch::Tensor()>& loss_fn,
    const std::vector<std::string>& names, int per_param, std::uint64_t seed, double h = 1e-6) {
  auto params = module.named_parameters(true);
  for (auto& p : module.parameters()) p.mutable_grad() = torch::Tensor();
  auto loss = loss_fn();
  loss.backward();

  std::mt19937_64 rng(seed);
  std::vector<ProbeResult> out;
  for (const auto& name : names) {
    auto* found = params.find(name);
    if (!found) throw std::runtime_error("no parameter named " + name);
    torch::Tensor p = *found;
    auto flat_grad = p.grad().reshape({-1});
    // prefer entries whose gradient is clearly nonzero
    std::vector<int64_t> order(p.numel());
    for (int64_t i = 0; i < p.numel(); ++i) order[i] = i;
    std::shuffle(order.begin(), order.end(), rng);
    std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
      return (std::abs(flat_grad[a].item<double>()) > 1e-7) >
             (std::abs(flat_grad[b].item<double>()) > 1e-7);
    });
    for (int k = 0; k < per_param && k < static_cast<int>(order.size()); ++k) {
      const int64_t idx = order[k];
      const double analytic = flat_grad[idx].item<double>();
      auto flat = p.data().view({-1});
      const double orig = flat[idx].item<double>();
      double lp, lm;
      {
        torch::NoGradGuard ng;
        flat[idx] = orig + h;
        lp = loss_fn().item<double>();
        flat[idx] = orig - h;
        lm = loss_fn().item<double>();
        flat[idx] = orig;
      }
      const double numeric = (lp - lm) / (2 * h);
      const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-12});
      out.push_back({name, idx, analytic, numeric, std::abs(analytic - numeric) / denom});
    }
  }
  return out;
}

/// Randomizes every parameter of `m` with small normal values (for probes through zero-init layers).
inline void randomize(torch::nn::Module& m, double scale, std::uint64_t seed) {
  torch::NoGradGuard ng;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  for (auto& p : m.parameters()) p.copy_(torch::randn(p.sizes(), gen, p.options()) * scale);
}

}  // namespace ur3::testing
