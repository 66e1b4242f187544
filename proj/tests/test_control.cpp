#include "torch_doctest.hpp"

#include <filesystem>

#include "grad_check.hpp"
#include "ur3/nn/checkpoint.hpp"
#include "ur3/nn/control.hpp"

using namespace ur3;
using namespace ur3::nn;

namespace {

ControlBranchConfig tiny_branch(int64_t arity = 2) {
  ControlBranchConfig c;
  c.denoiser.base_channels = 8;
  c.denoiser.channel_mults = {1, 2};
  c.modulate.channels = 8;
  c.modulate.heads = 2;
  c.modulate.layers = 1;
  c.arity = arity;
  c.gate_hidden = 8;
  return c;
}

ModulateConfig tiny_modulate() {
  ModulateConfig c;
  c.channels = 8;
  c.heads = 2;
  return c;
}

double l2(const torch::Tensor& a, const torch::Tensor& b) {
  return (a - b).pow(2).sum().item<double>();
}

double signal_distance(const ControlSignals& a, const ControlSignals& b) {
  double d = l2(a.middle, b.middle);
  for (std::size_t i = 0; i < a.skips.size(); ++i) d += l2(a.skips[i], b.skips[i]);
  return d;
}

bool all_zero(const ControlSignals& s) {
  bool z = s.middle.eq(0).all().item<bool>();
  for (const auto& t : s.skips) z = z && t.eq(0).all().item<bool>();
  return z;
}

struct Pair : torch::nn::Module {
  Pair(Denoiser u, ControlBranch b) {
    unet = register_module("unet", u);
    branch = register_module("branch", b);
  }
  Denoiser unet{nullptr};
  ControlBranch branch{nullptr};
};

}  // namespace

TEST_CASE("modulate preserves the latent shape") {
  torch::manual_seed(1);
  Modulate m(tiny_modulate());
  torch::NoGradGuard ng;
  for (int64_t s : {1, 8, 80}) {
    const auto z = torch::randn({2, 4, s, s});
    CHECK(modulate(m, torch::randn({2, 4, s, s}), z).sizes() == z.sizes());
  }
  CHECK_THROWS_AS(modulate(m, torch::randn({1, 4, 8, 8}), torch::randn({1, 4, 8, 9})), DimensionError);
  CHECK_THROWS_AS(modulate(m, torch::randn({1, 3, 8, 8}), torch::randn({1, 3, 8, 8})), DimensionError);
  ModulateConfig bad = tiny_modulate();
  bad.heads = 3;
  CHECK_THROWS(Modulate{bad});
}

TEST_CASE("modulate linear-path probe") {
  torch::manual_seed(2);
  Modulate m(tiny_modulate());
  m->to(torch::kFloat64);
  {
    torch::NoGradGuard ng;
    m->conv_c->weight.zero_();
    m->conv_c->bias.zero_();
    for (const auto& l : *m->layers) {
      auto layer = l->as<CrossAttentionLayer>();
      layer->to_out->weight.zero_();
      layer->to_out->bias.zero_();
      layer->ffn2->weight.zero_();
      layer->ffn2->bias.zero_();
    }
    // conv_z embeds the 4 latent channels into the first 4 feature channels; conv_out reads them back
    m->conv_z->weight.zero_();
    m->conv_z->bias.zero_();
    m->conv_out->weight.zero_();
    m->conv_out->bias.zero_();
    for (int64_t c = 0; c < 4; ++c) {
      m->conv_z->weight[c][c][1][1] = 1.0;
      m->conv_out->weight[c][c][1][1] = 1.0;
    }
  }
  auto gen = make_generator(3);
  const auto z = torch::randn({2, 4, 6, 5}, gen, torch::kFloat64);
  torch::NoGradGuard ng;
  const auto a = modulate(m, torch::randn({2, 4, 6, 5}, gen, torch::kFloat64), z);
  const auto b = modulate(m, torch::randn({2, 4, 6, 5}, gen, torch::kFloat64), z);
  CHECK(torch::allclose(a, 2.0 * z, 0, 1e-12));
  CHECK(torch::equal(a, b));
}

TEST_CASE("modulate gradients wrt condition and noisy latent") {
  torch::manual_seed(4);
  Modulate m(tiny_modulate());
  m->to(torch::kFloat64);
  auto gen = make_generator(5);
  auto c = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64).requires_grad_(true);
  auto z = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64).requires_grad_(true);
  const auto target = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64);
  auto loss_fn = [&] { return (modulate(m, c, z) - target).pow(2).mean(); };
  loss_fn().backward();
  CHECK(c.grad().abs().sum().item<double>() > 0);
  CHECK(z.grad().abs().sum().item<double>() > 0);
  const double h = 1e-6;
  for (auto* x : {&c, &z}) {
    auto flat_grad = x->grad().reshape({-1});
    for (int64_t idx : {0, 17, 45}) {
      double lp, lm;
      {
        torch::NoGradGuard ng;
        auto flat = x->data().view({-1});
        const double orig = flat[idx].item<double>();
        flat[idx] = orig + h;
        lp = loss_fn().item<double>();
        flat[idx] = orig - h;
        lm = loss_fn().item<double>();
        flat[idx] = orig;
      }
      const double numeric = (lp - lm) / (2 * h);
      const double analytic = flat_grad[idx].item<double>();
      const double rel = std::abs(numeric - analytic) / std::max(1e-8, std::abs(numeric) + std::abs(analytic));
      INFO("analytic=" << analytic << " numeric=" << numeric);
      CHECK(rel < 1e-4);
    }
  }
}

TEST_CASE("two-way gate algebra") {
  torch::manual_seed(6);
  Gate g(2, 4, 8);
  g->to(torch::kFloat64);
  auto gen = make_generator(7);
  const auto s = torch::randn({2, 4, 5, 5}, gen, torch::kFloat64);
  const auto lq = torch::randn({2, 4, 5, 5}, gen, torch::kFloat64);
  torch::NoGradGuard ng;
  auto r = gate2(g, s, lq);
  CHECK(r.alpha.sizes() == std::vector<int64_t>{2, 1, 5, 5});
  CHECK(r.alpha.gt(0).all().item<bool>());
  CHECK(r.alpha.lt(1).all().item<bool>());
  CHECK(torch::allclose(r.gated_s / r.alpha, s, 1e-12, 1e-12));
  CHECK(torch::allclose(r.gated_lq / (1.0 - r.alpha), lq, 1e-12, 1e-12));

  const auto mix = r.gated_s + r.gated_lq;
  CHECK(mix.ge(torch::minimum(s, lq) - 1e-12).all().item<bool>());
  CHECK(mix.le(torch::maximum(s, lq) + 1e-12).all().item<bool>());

  g->conv2->weight.zero_();
  g->conv2->bias.fill_(20.0);
  r = gate2(g, s, lq);
  CHECK((1.0 - r.alpha).abs().max().item<double>() < 1e-8);
  CHECK(r.gated_lq.abs().max().item<double>() < 1e-7);

  CHECK_THROWS_AS(gate2(g, s, lq.narrow(2, 0, 4)), DimensionError);
  Gate soft(3, 4, 8, true);
  CHECK_THROWS(gate2(soft, s, lq));
  CHECK_THROWS(Gate(1, 4));
}

TEST_CASE("softmax gate reduces to the sigmoid gate at arity two") {
  torch::manual_seed(8);
  Gate soft(2, 4, 8, true);
  Gate sig(2, 4, 8, false);
  soft->to(torch::kFloat64);
  sig->to(torch::kFloat64);
  {
    torch::NoGradGuard ng;
    sig->conv1->weight.copy_(soft->conv1->weight);
    sig->conv1->bias.copy_(soft->conv1->bias);
    sig->conv2->weight.copy_(soft->conv2->weight[0] - soft->conv2->weight[1]);
    sig->conv2->bias.copy_((soft->conv2->bias[0] - soft->conv2->bias[1]).view({1}));
  }
  auto gen = make_generator(9);
  const auto a = torch::randn({1, 4, 6, 6}, gen, torch::kFloat64);
  const auto b = torch::randn({1, 4, 6, 6}, gen, torch::kFloat64);
  torch::NoGradGuard ng;
  const auto w = gate_n(soft, {a, b}).weights;
  const auto logits = soft->logits({a, b});
  CHECK(torch::allclose(w.narrow(1, 0, 1), torch::sigmoid(logits.narrow(1, 0, 1) - logits.narrow(1, 1, 1)),
                        1e-12, 1e-12));
  CHECK(torch::allclose(w.narrow(1, 0, 1), gate2(sig, a, b).alpha, 1e-10, 1e-10));
  CHECK_THROWS(gate_n(soft, {a}));
}

TEST_CASE("N-ary gate weights") {
  auto gen = make_generator(10);
  for (int64_t k : {2, 3, 5}) {
    torch::manual_seed(11 + k);
    Gate g(k, 4, 8, true);
    std::vector<torch::Tensor> in;
    for (int64_t i = 0; i < k; ++i) in.push_back(torch::randn({2, 4, 7, 7}, gen));
    torch::NoGradGuard ng;
    auto out = gate_n(g, in);
    CHECK(out.weights.size(1) == k);
    CHECK((out.weights.sum(1) - 1.0).abs().max().item<double>() < 1e-6);
    CHECK(out.gated.size() == static_cast<std::size_t>(k));
    g->conv2->weight.zero_();
    g->conv2->bias.zero_();
    out = gate_n(g, in);
    CHECK((out.weights - 1.0 / static_cast<double>(k)).abs().max().item<double>() < 1e-7);
  }
}

TEST_CASE("fresh branch emits exactly zero control") {
  torch::manual_seed(12);
  const auto cfg = tiny_branch();
  Denoiser unet(cfg.denoiser);
  ur3::testing::randomize(*unet->conv_out, 0.1, 13);
  ControlBranch branch(cfg);
  branch->init_from(unet);
  unet->eval();
  auto gen = make_generator(14);
  ConditionSet cond;
  cond.z_t = torch::randn({2, 4, 8, 8}, gen);
  cond.conditions = {torch::randn({2, 4, 8, 8}, gen), torch::randn({2, 4, 8, 8}, gen)};
  const auto t = torch::tensor({int64_t{5}, int64_t{900}});
  torch::NoGradGuard ng;
  const auto sig = control_forward(branch, cond, t);
  CHECK(all_zero(sig));
  REQUIRE(sig.skips.size() == unet->encoder->skip_channels().size());
  CHECK(torch::equal(controlled_eps(unet, branch, cond, t), predict_noise(unet, cond.z_t, t)));

  // the widened copy sees only z_t at initialization
  const auto from_copy = branch->copy->forward(
      torch::cat({cond.conditions[0], cond.conditions[1], cond.z_t}, 1), t);
  const auto from_base = unet->encoder->forward(cond.z_t, t);
  for (std::size_t i = 0; i < from_base.skips.size(); ++i)
    CHECK(torch::allclose(from_copy.skips[i], from_base.skips[i], 1e-5, 1e-6));
  CHECK(torch::allclose(from_copy.middle, from_base.middle, 1e-5, 1e-6));

  cond.conditions.pop_back();
  CHECK_THROWS(control_forward(branch, cond, t));
  cond.conditions = {torch::randn({2, 4, 8, 8}), torch::randn({2, 4, 4, 4})};
  CHECK_THROWS_AS(control_forward(branch, cond, t), DimensionError);
}

TEST_CASE("end-to-end gradient check through modulate, gate, branch and denoiser") {
  torch::manual_seed(15);
  const auto cfg = tiny_branch();
  Denoiser unet(cfg.denoiser);
  ControlBranch branch(cfg);
  branch->init_from(unet);
  ur3::testing::randomize(*unet->conv_out, 0.1, 16);
  for (const auto& z : *branch->zero_convs) ur3::testing::randomize(*z, 0.1, 17);
  ur3::testing::randomize(*branch->zero_middle, 0.1, 18);
  Pair both(unet, branch);
  both.to(torch::kFloat64);
  auto gen = make_generator(19);
  ConditionSet cond;
  cond.z_t = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64);
  cond.conditions = {torch::randn({1, 4, 4, 4}, gen, torch::kFloat64),
                     torch::randn({1, 4, 4, 4}, gen, torch::kFloat64)};
  const auto eps = torch::randn({1, 4, 4, 4}, gen, torch::kFloat64);
  const auto t = torch::tensor({int64_t{250}});
  auto loss = [&] { return torch::mse_loss(controlled_eps(unet, branch, cond, t), eps); };
  const auto probes = ur3::testing::finite_difference_probe(
      both, loss,
      {"branch.modulators.0.conv_c.weight", "branch.modulators.1.layers.0.to_k.weight",
       "branch.gate.conv1.weight", "branch.copy.conv_in.weight", "branch.zero_convs.1.weight",
       "branch.zero_middle.weight", "unet.conv_out.weight"},
      1, 20);
  for (const auto& p : probes) {
    INFO(p.name << " analytic=" << p.analytic << " numeric=" << p.numeric);
    CHECK(p.rel_error < 1e-4);
  }
}

TEST_CASE("control training freezes the base, is reproducible and distinguishes conditions") {
  const auto cfg = tiny_branch();
  auto gen = make_generator(21);
  const auto z0 = torch::randn({4, 4, 8, 8}, gen);
  const auto c_lq = z0 + 0.5 * torch::randn({4, 4, 8, 8}, gen);
  const auto c_s = z0 + 0.1 * torch::randn({4, 4, 8, 8}, gen);
  const auto sched = NoiseSchedule::linear();
  TrainSchedule train;
  train.initial_lr = 1e-3;
  train.final_lr = 1e-4;
  train.total_iters = 150;
  train.batch_size = 4;
  train.seed = 22;

  auto run = [&](Denoiser& unet) {
    torch::manual_seed(23);
    ControlBranch branch(cfg);
    branch->init_from(unet, "base");
    auto losses = train_control(unet, branch, z0, {c_s, c_lq}, sched, train);
    return std::make_pair(branch, losses);
  };
  torch::manual_seed(24);
  Denoiser unet(cfg.denoiser);
  ur3::testing::randomize(*unet->conv_out, 0.1, 25);
  const auto before = snapshot(*unet);
  auto [branch, losses] = run(unet);
  auto [branch2, losses2] = run(unet);
  CHECK(identical(before, snapshot(*unet)));
  for (const auto& p : unet->parameters())
    CHECK((!p.grad().defined() || p.grad().eq(0).all().item<bool>()));
  CHECK(losses == losses2);
  CHECK(identical(snapshot(*branch), snapshot(*branch2)));

  torch::NoGradGuard ng;
  ConditionSet cond;
  cond.z_t = add_noise(z0.narrow(0, 0, 2), int64_t{300}, torch::randn({2, 4, 8, 8}, gen), sched);
  cond.conditions = {c_s.narrow(0, 0, 2), c_lq.narrow(0, 0, 2)};
  const auto sig = control_forward(branch, cond, int64_t{300});
  CHECK_FALSE(all_zero(sig));
  std::swap(cond.conditions[0], cond.conditions[1]);
  const auto swapped = control_forward(branch, cond, int64_t{300});
  const double d = signal_distance(sig, swapped);
  MESSAGE("swap L2 " << d);
  CHECK(d > 0);

  CHECK_THROWS(train_control(unet, branch, z0, {c_s}, sched, train));
  CHECK_THROWS(train_control(unet, branch, torch::zeros({0, 4, 8, 8}), {c_s, c_lq}, sched, train));
}

TEST_CASE("N-ary branch runs with a softmax gate") {
  torch::manual_seed(26);
  const auto cfg = tiny_branch(3);
  Denoiser unet(cfg.denoiser);
  ControlBranch branch(cfg);
  branch->init_from(unet);
  CHECK(branch->gate->use_softmax);
  CHECK(branch->copy->conv_in->weight.size(1) == 16);
  ConditionSet cond;
  cond.z_t = torch::randn({1, 4, 8, 8});
  cond.conditions = {torch::randn({1, 4, 8, 8}), torch::randn({1, 4, 8, 8}), torch::randn({1, 4, 8, 8})};
  torch::NoGradGuard ng;
  CHECK(all_zero(control_forward(branch, cond, int64_t{10})));
}

TEST_CASE("branch checkpoints are tied to their base denoiser") {
  torch::manual_seed(27);
  const auto cfg = tiny_branch();
  Denoiser unet(cfg.denoiser);
  const auto sched = NoiseSchedule::linear();
  const auto hash = denoiser_arch_hash(unet->cfg, sched);
  ControlBranch branch(cfg);
  branch->init_from(unet, hash);
  ur3::testing::randomize(*branch->zero_middle, 0.1, 28);
  const auto path = std::filesystem::temp_directory_path() / "ur3_branch_test.pt";
  save_control_branch(path, branch, 3);
  auto back = load_control_branch(path, hash);
  CHECK(back->base_hash == hash);
  CHECK(identical(snapshot(*back), snapshot(*branch)));
  CHECK_THROWS_AS(load_control_branch(path, "0000000000000000"), CheckpointError);
  DenoiserConfig other = cfg.denoiser;
  other.base_channels = 16;
  CHECK_THROWS_AS(load_control_branch(path, denoiser_arch_hash(other, sched)), CheckpointError);
  std::filesystem::remove(path);

  Denoiser wrong(other);
  CHECK_THROWS(branch->init_from(wrong));
}
