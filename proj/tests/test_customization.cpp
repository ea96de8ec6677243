// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedcustom/customization.hpp"

using namespace fedcustom;

namespace {

BackboneConfig toy_config() {
  BackboneConfig cfg;
  cfg.n_layers = 1;
  cfg.n_heads = 2;
  cfg.model_dim = 8;
  cfg.ff_dim = 16;
  cfg.vocab_size = 12;
  cfg.max_seq_len = 16;
  return cfg;
}

}  // namespace

TEST_CASE("prefix length defaults to ten") {
  PrefixOptimizerConfig cfg;
  CHECK(cfg.prefix_len == 10);
}

TEST_CASE("zero optimizer parameters produce the final-layer bias pattern") {
  BackboneConfig bcfg = toy_config();
  PrefixOptimizerConfig pcfg;
  pcfg.prefix_len = 3;
  pcfg.embed_dim = 4;
  pcfg.hidden_dim = 6;
  PrefixOptimizer opt(pcfg, bcfg);
  Rng rng(3);
  ParameterSet params = opt.init_params(rng);
  for (auto name : params.names()) {
    for (double& v : params.at(name).values()) v = 0.0;
  }
  Graph g(false);
  KVPrefix prefix = opt.generate(g, params);
  for (double v : prefix.flatten()) CHECK(v == 0.0);

  // a nonzero final bias shows through verbatim
  params.at("prefix.mlp.b3").values()[0] = 2.5;
  Graph g2(false);
  KVPrefix p2 = opt.generate(g2, params);
  CHECK(p2.keys[0][0](0, 0) == 2.5);   // slot 0, first output column
  CHECK(p2.keys[0][0](1, 0) == 2.5);   // bias is shared across slots
  CHECK(p2.values[0][0](0, 0) == 0.0);
}

TEST_CASE("prefix parameter count matches the closed form") {
  BackboneConfig bcfg = toy_config();
  PrefixOptimizerConfig pcfg;
  pcfg.prefix_len = 5;
  pcfg.embed_dim = 4;
  pcfg.hidden_dim = 6;
  PrefixOptimizer opt(pcfg, bcfg);
  Rng rng(5);
  ParameterSet params = opt.init_params(rng);
  CHECK(params.total_scalars() == opt.param_count());
  const int64_t out = 2ll * bcfg.n_layers * bcfg.model_dim;
  CHECK(opt.param_count() == 5 * 4 + (4 * 6 + 6) + (6 * 6 + 6) + (6 * out + out));
}

TEST_CASE("generate_prefix is pure: identical parameters give identical bits") {
  BackboneConfig bcfg = toy_config();
  PrefixOptimizer opt(PrefixOptimizerConfig{2, 4, 6}, bcfg);
  Rng rng(7);
  ParameterSet params = opt.init_params(rng);
  Graph g1(false), g2(false);
  auto a = opt.generate(g1, params).flatten();
  auto b = opt.generate(g2, params).flatten();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("gradients flow from lm_loss into prefix optimizer parameters only") {
  BackboneConfig bcfg = toy_config();
  Backbone model(bcfg);
  Rng rng(11);
  ParameterSet base = model.init_params(rng);
  base.set_trainable({});  // frozen backbone

  PrefixOptimizer opt(PrefixOptimizerConfig{3, 4, 6}, bcfg);
  ParameterSet pparams = opt.init_params(rng);

  std::vector<TokenSequence> batch{{{7, 4, 2, 9, 5, 3}, 2}, {{1, 2, 6, 3}, 1}};
  auto build = [&](Graph& g) {
    KVPrefix prefix = opt.generate(g, pparams);
    return model.lm_loss(g, base, batch, &prefix);
  };

  std::vector<Tensor> leaves;
  for (auto name : pparams.names()) leaves.push_back(pparams.at(name));
  // h = 1e-4 keeps the difference quotient above the roundoff floor of the
  // ~1e-6 magnitude gradients that reach the optimizer through the frozen
  // backbone
  const double err = grad_check(build, leaves, 1e-4, 48, 11);
  CHECK(err < 1e-5);

  // backbone entries carry no gradient buffers at all
  for (const auto& [name, e] : base.entries()) CHECK(!e.tensor.requires_grad());
  // and at least one optimizer gradient is nonzero on generic data
  pparams.zero_grads();
  Graph g;
  Tensor loss = build(g);
  g.backward(loss);
  double norm = 0.0;
  for (auto name : pparams.names()) {
    for (double gv : pparams.at(name).grad()) norm += gv * gv;
  }
  CHECK(norm > 0.0);
}

TEST_CASE("zero-initialized adapters leave the forward pass unchanged") {
  BackboneConfig cfg = toy_config();
  cfg.adapter_bottleneck = 4;
  Backbone model(cfg);
  Rng rng(13);
  ParameterSet params = model.init_params(rng);
  ParameterSet aparams = make_adapter_params(cfg, 4, rng);
  AdapterSet adapters = adapter_view(cfg, aparams);

  std::vector<int> toks{1, 5, 9, 2};
  Graph g(false);
  Tensor plain = model.forward(g, params, toks).logits;
  Tensor adapted = model.forward(g, params, toks, nullptr, &adapters).logits;
  CHECK(max_abs_diff(plain, adapted) < 1e-12);
}

TEST_CASE("self-distillation has near-zero soft and hidden components") {
  BackboneConfig cfg = toy_config();
  Backbone model(cfg);
  Rng rng(17);
  ParameterSet teacher_params = model.init_params(rng);
  ParameterSet student_params = teacher_params.clone();
  student_params.set_trainable({ParamGroup::backbone, ParamGroup::head});
  Tensor align = Tensor::zeros({cfg.model_dim, cfg.model_dim});
  for (int i = 0; i < cfg.model_dim; ++i) align.at(i, i) = 1.0;

  std::vector<int> toks{7, 4, 2, 9, 5};
  std::vector<int> targets{-1, -1, 9, 5, 3};
  Graph tg(false);
  ForwardResult tout = model.forward(tg, teacher_params, toks, nullptr, nullptr, true);
  Graph g;
  ForwardResult sout = model.forward(g, student_params, toks, nullptr, nullptr, true);

  DistillLossWeights w;
  w.w_task = 0.0;
  DistillResult res = distill_losses(g, tout, sout, targets, -1, align, w);
  CHECK(std::abs(res.soft) < 1e-12);
  CHECK(std::abs(res.hidden) < 1e-12);
  CHECK(res.total.item() < 1e-12);
}

TEST_CASE("temperature one with only the soft weight equals plain KL") {
  Tensor tlogits = Tensor::of({1, 3}, {0.2, -1.0, 0.7});
  Tensor slogits = Tensor::of({1, 3}, {1.1, 0.3, -0.4}, true);
  ForwardResult teacher{tlogits, {}};
  ForwardResult student{slogits, {}};
  std::vector<int> targets{1};

  DistillLossWeights w;
  w.w_task = 0.0;
  w.w_soft = 1.0;
  w.w_hidden = 0.0;
  w.temperature = 1.0;
  Graph g;
  DistillResult res = distill_losses(g, teacher, student, targets, -1, Tensor{}, w);

  auto softmax3 = [](const Tensor& t) {
    std::array<double, 3> p{};
    double denom = 0.0;
    for (int j = 0; j < 3; ++j) denom += std::exp(t(0, j));
    for (int j = 0; j < 3; ++j) p[static_cast<size_t>(j)] = std::exp(t(0, j)) / denom;
    return p;
  };
  auto pt = softmax3(tlogits), ps = softmax3(slogits);
  double want = 0.0;
  for (int j = 0; j < 3; ++j) {
    want += pt[static_cast<size_t>(j)] * (std::log(pt[static_cast<size_t>(j)]) -
                                          std::log(ps[static_cast<size_t>(j)]));
  }
  CHECK(res.soft == doctest::Approx(want).epsilon(1e-12));
  CHECK(res.total.item() == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("one-position distillation components match hand formulas") {
  Tensor tlogits = Tensor::of({1, 2}, {0.5, -0.5});
  Tensor slogits = Tensor::of({1, 2}, {0.1, 0.4}, true);
  Tensor th = Tensor::of({1, 2}, {1.0, -2.0});
  Tensor sh = Tensor::of({1, 2}, {0.5, 0.25}, true);
  Tensor align = Tensor::of({2, 2}, {1, 0, 0, 1});
  ForwardResult teacher{tlogits, {th}};
  ForwardResult student{slogits, {sh}};
  std::vector<int> targets{0};

  DistillLossWeights w;
  w.w_task = 0.5;
  w.w_soft = 2.0;
  w.w_hidden = 3.0;
  w.temperature = 2.0;
  Graph g;
  DistillResult res = distill_losses(g, teacher, student, targets, -1, align, w);

  const double ce = std::log(std::exp(0.1) + std::exp(0.4)) - 0.1;
  auto soft2 = [](double a, double b, double T) {
    const double ea = std::exp(a / T), eb = std::exp(b / T);
    return std::array<double, 2>{ea / (ea + eb), eb / (ea + eb)};
  };
  auto pt = soft2(0.5, -0.5, 2.0), ps = soft2(0.1, 0.4, 2.0);
  double kl = 0.0;
  for (int j = 0; j < 2; ++j) {
    kl += pt[static_cast<size_t>(j)] * (std::log(pt[static_cast<size_t>(j)]) -
                                        std::log(ps[static_cast<size_t>(j)]));
  }
  const double soft = 4.0 * kl;  // T^2
  const double mse = ((0.5 - 1.0) * (0.5 - 1.0) + (0.25 + 2.0) * (0.25 + 2.0)) / 2.0;

  CHECK(res.task == doctest::Approx(ce).epsilon(1e-12));
  CHECK(res.soft == doctest::Approx(soft).epsilon(1e-12));
  CHECK(res.hidden == doctest::Approx(mse).epsilon(1e-12));
  CHECK(res.total.item() ==
        doctest::Approx(0.5 * ce + 2.0 * soft + 3.0 * mse).epsilon(1e-12));

  CHECK(res.task >= 0.0);
  CHECK(res.soft >= 0.0);
  CHECK(res.hidden >= 0.0);

  // total is monotone in each weight, holding outputs fixed
  DistillLossWeights heavier = w;
  heavier.w_soft = 4.0;
  Graph g2;
  ForwardResult student2{slogits, {sh}};
  DistillResult res2 = distill_losses(g2, teacher, student2, targets, -1, align, heavier);
  CHECK(res2.total.item() > res.total.item());
}

TEST_CASE("hidden weight without aligned layers is a configuration error") {
  Tensor tlogits = Tensor::of({1, 2}, {0.5, -0.5});
  Tensor slogits = Tensor::of({1, 2}, {0.1, 0.4}, true);
  ForwardResult teacher{tlogits, {}};
  ForwardResult student{slogits, {}};
  std::vector<int> targets{0};
  DistillLossWeights w;  // w_hidden defaults positive
  Graph g;
  CHECK_THROWS_AS(distill_losses(g, teacher, student, targets, -1, Tensor{}, w), ConfigError);

  DistillLossWeights bad;
  bad.w_task = bad.w_soft = bad.w_hidden = 0.0;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
  DistillLossWeights neg;
  neg.w_soft = -1.0;
  CHECK_THROWS_AS(neg.validate(), ConfigError);
}

TEST_CASE("student stays smaller than its teacher") {
  BackboneConfig teacher;  // desk defaults L=2 d=64
  teacher.vocab_size = 250;
  Rng rng(19);
  StudentConfig scfg;
  ParameterSet student = init_student_params(scfg, teacher, rng);
  ParameterSet tparams = Backbone(teacher).init_params(rng);
  CHECK(student.total_scalars() < tparams.total_scalars());
  CHECK(student.contains("align.w"));
  CHECK(student.at("align.w").shape() == Shape{32, 64});
}

TEST_CASE("trainable views order as the reference costs do") {
  BackboneConfig desk;  // L=2, H=4, d=64, ff=256
  desk.vocab_size = 250;
  Rng rng(23);
  Backbone model(desk);
  ParameterSet backbone_params = model.init_params(rng);

  PrefixOptimizer popt(PrefixOptimizerConfig{}, desk);
  ParameterSet fpt = popt.init_params(rng);
  ParameterSet fat = make_adapter_params(desk, 48, rng);
  ParameterSet fkd = init_student_params(StudentConfig{}, desk, rng);

  TrainableView v_fpt = trainable_view(Method::FPT, backbone_params, &fpt);
  TrainableView v_ffft = trainable_view(Method::FFFT, backbone_params, nullptr);
  TrainableView v_fat = trainable_view(Method::FAT, backbone_params, &fat);
  TrainableView v_fkd = trainable_view(Method::FKD, backbone_params, &fkd);

  CHECK(v_ffft.scalar_count == backbone_params.total_scalars());
  CHECK(v_fpt.scalar_count < v_ffft.scalar_count);
  CHECK(v_fat.scalar_count < v_ffft.scalar_count);
  CHECK(v_fkd.scalar_count < v_ffft.scalar_count);
  // FPT and FAT sit within a factor of two of each other, below FKD
  const double ratio = static_cast<double>(v_fpt.scalar_count) / static_cast<double>(v_fat.scalar_count);
  CHECK(ratio > 0.5);
  CHECK(ratio < 2.0);
  CHECK(v_fat.scalar_count < v_fkd.scalar_count);
  CHECK(v_fpt.byte_size == 8 * v_fpt.scalar_count);

  CHECK(kReferenceFfftOverFptRatio == doctest::Approx(13.8).epsilon(1e-12));
}
