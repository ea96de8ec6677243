// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fedcustom/datagen.hpp"
#include "fedcustom/federation.hpp"

using namespace fedcustom;

namespace {

struct Fixture {
  BackboneConfig bcfg;
  std::shared_ptr<Backbone> model;
  std::shared_ptr<const ParameterSet> base;
  Tokenizer tk;
  Corpus corpus;

  SessionData make_data(int n_clients, uint64_t seed, double noniid_x = -1.0) const {
    SessionData data;
    std::vector<Shard> shards =
        noniid_x < 0.0 ? partition_iid(corpus.train, n_clients, seed)
                       : partition_noniid(corpus.train, n_clients, "food", noniid_x, seed);
    for (const auto& s : shards) {
      std::vector<TokenSequence> encoded;
      for (const auto& ex : s.examples) encoded.push_back(tk.encode_example(ex));
      data.shards.push_back(std::move(encoded));
    }
    for (const auto& ex : corpus.val) data.val.push_back(tk.encode_example(ex));
    for (size_t i = 0; i < corpus.test.size() && i < 6; ++i) {
      EvalItem item;
      item.mr = tk.linearize_mr(corpus.test[i].mr);
      item.ref = tk.tokenize_text(corpus.test[i].text);
      data.round_eval.push_back(std::move(item));
    }
    data.eos_id = Tokenizer::kEos;
    data.max_new = 12;
    return data;
  }
};

Fixture make_fixture() {
  Fixture f;
  CorpusConfig ccfg;
  ccfg.size = 120;
  ccfg.seed = 99;
  f.corpus = generate_corpus(ccfg);
  f.tk = Tokenizer::build(f.corpus.train);
  f.bcfg.n_layers = 1;
  f.bcfg.n_heads = 2;
  f.bcfg.model_dim = 16;
  f.bcfg.ff_dim = 32;
  f.bcfg.vocab_size = f.tk.vocab_size();
  f.bcfg.max_seq_len = 96;
  f.model = std::make_shared<Backbone>(f.bcfg);
  Rng rng(7);
  auto params = std::make_shared<ParameterSet>(f.model->init_params(rng));
  params->set_trainable({});
  f.base = params;
  return f;
}

StrategySettings small_settings() {
  StrategySettings s;
  s.prefix = PrefixOptimizerConfig{4, 8, 12};
  s.adapter_bottleneck = 4;
  s.student = StudentConfig{1, 2, 8, 16};
  return s;
}

bool records_identical(const RoundRecord& a, const RoundRecord& b) {
  if (a.round != b.round || a.per_client_loss != b.per_client_loss) return false;
  if (a.val_loss != b.val_loss || a.bleu != b.bleu || a.rouge_l != b.rouge_l) return false;
  if (a.bytes_up != b.bytes_up || a.bytes_down != b.bytes_down) return false;
  if (a.seconds != b.seconds) return false;
  if (a.prefix_cosine.has_value() != b.prefix_cosine.has_value()) return false;
  if (a.prefix_cosine && *a.prefix_cosine != *b.prefix_cosine) return false;
  if (a.client_distance.has_value() != b.client_distance.has_value()) return false;
  if (a.client_distance && *a.client_distance != *b.client_distance) return false;
  return true;
}

// loss explodes to infinity on the very first batch
class ExplodingStrategy final : public Strategy {
 public:
  Method method() const override { return Method::FPT; }
  ParameterSet init_trainable(Rng&) const override {
    ParameterSet p;
    p.insert("w", ParamGroup::prefix, Tensor::of({1}, {1.0}, true));
    return p;
  }
  Tensor batch_loss(Graph& g, const ParameterSet& trainable,
                    std::span<const TokenSequence>) const override {
    Tensor big = g.scale(trainable.at("w"), 1e308);
    return g.sum(g.mul(big, big));
  }
  std::vector<int> decode(const ParameterSet&, std::span<const int>, int, int,
                          uint64_t*) const override {
    return {};
  }
};

}  // namespace

TEST_CASE("aggregation: weighted mean, exactness, permutation invariance") {
  auto make_client = [](int id, int64_t samples, std::vector<double> w) {
    ClientState c;
    c.client_id = id;
    c.samples_count = samples;
    c.data.emplace_back();
    const int64_t n = static_cast<int64_t>(w.size());
    c.trainable.insert("w", ParamGroup::prefix, Tensor::of({n}, std::move(w), true));
    return c;
  };

  // identical uploads aggregate to exactly that value
  std::vector<ClientState> same;
  for (int k = 0; k < 10; ++k) same.push_back(make_client(k, 100, {0.1, -3.7, 2.5}));
  std::vector<const ClientState*> ptrs;
  for (const auto& c : same) ptrs.push_back(&c);
  ParameterSet agg = aggregate_uploads(ptrs);
  CHECK(agg.at("w").values()[0] == 0.1);
  CHECK(agg.at("w").values()[1] == -3.7);
  CHECK(agg.at("w").values()[2] == 2.5);

  // two clients, weights 1:3
  ClientState a = make_client(0, 1, {2.0});
  ClientState b = make_client(1, 3, {4.0});
  std::vector<const ClientState*> two{&a, &b};
  CHECK(aggregate_uploads(two).at("w").values()[0] ==
        doctest::Approx(0.25 * 2.0 + 0.75 * 4.0).epsilon(1e-15));

  // permutation invariance: ordering in the call never matters
  ClientState c = make_client(2, 2, {-1.5});
  std::vector<const ClientState*> abc{&a, &b, &c};
  std::vector<const ClientState*> cba{&c, &b, &a};
  CHECK(aggregate_uploads(abc).at("w").values()[0] == aggregate_uploads(cba).at("w").values()[0]);

  // equal weights equal the unweighted mean by construction (same code path)
  ClientState d = make_client(3, 3, {8.0});
  ClientState e = make_client(4, 3, {9.0});
  std::vector<const ClientState*> de{&d, &e};
  CHECK(aggregate_uploads(de).at("w").values()[0] ==
        doctest::Approx(8.5).epsilon(1e-15));
}

TEST_CASE("one-step FedAvg equals the centralized pooled gradient step") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());

  SessionData data = f.make_data(2, 3);
  REQUIRE(data.shards[0].size() == data.shards[1].size());

  OptimizerConfig opt;
  opt.kind = OptimizerConfig::Kind::sgd;
  opt.lr = 0.05;
  opt.batch_size = 1000;  // one full batch per client
  AggregationRule rule;

  Rng init(11);
  ParameterSet federated = strategy->init_trainable(init);
  ParameterSet centralized = federated.clone();

  std::vector<ClientState> clients;
  for (int k = 0; k < 2; ++k) {
    ClientState c;
    c.client_id = k;
    c.data = data.shards[static_cast<size_t>(k)];
    c.samples_count = static_cast<int64_t>(c.data.size());
    c.trainable = federated.clone();
    clients.push_back(std::move(c));
  }
  run_round(*strategy, federated, clients, rule, opt, 1, 5);

  // centralized step over the pooled batch: a single mean-of-means loss
  {
    std::vector<TokenSequence> pooled = data.shards[0];
    pooled.insert(pooled.end(), data.shards[1].begin(), data.shards[1].end());
    Graph g;
    std::vector<Tensor> halves;
    std::span<const TokenSequence> first(pooled.data(), pooled.size() / 2);
    std::span<const TokenSequence> second(pooled.data() + pooled.size() / 2, pooled.size() / 2);
    halves.push_back(strategy->batch_loss(g, centralized, first));
    halves.push_back(strategy->batch_loss(g, centralized, second));
    Tensor loss = g.mean_of(halves);
    g.backward(loss);
    for (const auto& name : centralized.names()) {
      auto w = centralized.at(name).values();
      auto gr = centralized.at(name).grad();
      for (size_t i = 0; i < w.size(); ++i) w[i] -= opt.lr * gr[i];
    }
  }

  double worst = 0.0;
  for (const auto& name : federated.names()) {
    worst = std::max(worst, max_abs_diff(federated.at(name), centralized.at(name)));
  }
  CHECK(worst < 1e-10);
}

TEST_CASE("early stopper semantics") {
  EarlyStopper plateau(3);
  CHECK(!plateau.observe(1.0));  // first observation improves over +inf
  CHECK(!plateau.observe(1.0));
  CHECK(!plateau.observe(1.0));
  CHECK(plateau.observe(1.0));  // stops after round 4
  CHECK(plateau.best_round() == 1);

  EarlyStopper improving(3);
  for (int i = 0; i < 50; ++i) CHECK(!improving.observe(1.0 / (i + 1)));

  CHECK_THROWS_AS(EarlyStopper(0), ConfigError);
}

TEST_CASE("sessions are deterministic, even across thread counts") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  SessionData data = f.make_data(3, 21);
  SessionConfig cfg;
  cfg.seed = 17;
  cfg.max_rounds = 3;

  ThreadPool serial(1), wide(4);
  SessionResult a = train_session(*strategy, data, cfg, serial);
  SessionResult b = train_session(*strategy, data, cfg, wide);
  SessionResult c = train_session(*strategy, data, cfg, wide);
  REQUIRE(a.records.size() == b.records.size());
  for (size_t i = 0; i < a.records.size(); ++i) {
    CHECK(records_identical(a.records[i], b.records[i]));
    CHECK(records_identical(a.records[i], c.records[i]));
  }
  for (const auto& name : a.best_trainable.names()) {
    CHECK(max_abs_diff(a.best_trainable.at(name), b.best_trainable.at(name)) == 0.0);
  }
}

TEST_CASE("uploads carry exactly the trainable names and prefix cosine is logged") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  SessionData data = f.make_data(2, 5);
  SessionConfig cfg;
  cfg.seed = 23;
  cfg.max_rounds = 2;
  SessionResult res = train_session(*strategy, data, cfg);

  Rng probe(1);
  const std::vector<std::string> expected = strategy->init_trainable(probe).names();
  REQUIRE(res.round_upload_names.size() == res.records.size());
  for (const auto& names : res.round_upload_names) CHECK(names == expected);
  for (const auto& rec : res.records) {
    CHECK(rec.prefix_cosine.has_value());
    CHECK(*rec.prefix_cosine >= -1.0);
    CHECK(*rec.prefix_cosine <= 1.0);
    CHECK(rec.bytes_up == 2 * 8 * strategy->init_trainable(probe).total_scalars());
  }
}

TEST_CASE("fedprox with zero mu is bit-identical to fedavg") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  SessionData data = f.make_data(8, 31, 60.0);
  SessionConfig cfg;
  cfg.seed = 29;
  cfg.max_rounds = 3;

  SessionConfig prox_cfg = cfg;
  prox_cfg.agg.kind = AggregationRule::Kind::fedprox;
  prox_cfg.agg.prox_mu = 0.0;

  SessionResult avg = train_session(*strategy, data, cfg);
  SessionResult prox = train_session(*strategy, data, prox_cfg);
  REQUIRE(avg.records.size() == prox.records.size());
  for (size_t i = 0; i < avg.records.size(); ++i) {
    CHECK(records_identical(avg.records[i], prox.records[i]));
  }
}

TEST_CASE("positive mu pulls clients toward the broadcast model") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  SessionData data = f.make_data(8, 31, 60.0);
  SessionConfig cfg;
  cfg.seed = 29;
  cfg.max_rounds = 3;

  SessionConfig prox_cfg = cfg;
  prox_cfg.agg.kind = AggregationRule::Kind::fedprox;
  prox_cfg.agg.prox_mu = 1.0;

  SessionResult avg = train_session(*strategy, data, cfg);
  SessionResult prox = train_session(*strategy, data, prox_cfg);
  double avg_dist = 0.0, prox_dist = 0.0;
  for (const auto& r : avg.records) avg_dist += *r.client_distance;
  for (const auto& r : prox.records) prox_dist += *r.client_distance;
  avg_dist /= static_cast<double>(avg.records.size());
  prox_dist /= static_cast<double>(prox.records.size());
  CHECK(prox_dist < avg_dist);
}

TEST_CASE("best checkpoint is at least as good as every recorded round") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  SessionData data = f.make_data(2, 41);
  SessionConfig cfg;
  cfg.seed = 43;
  cfg.max_rounds = 4;
  SessionResult res = train_session(*strategy, data, cfg);
  for (const auto& rec : res.records) CHECK(res.best_val <= rec.val_loss);
  CHECK(res.best_round >= 1);
  CHECK(res.best_round <= res.rounds_run);
}

TEST_CASE("divergence and configuration errors") {
  ExplodingStrategy bad;
  Rng rng(1);
  ParameterSet global = bad.init_trainable(rng);
  std::vector<ClientState> clients(1);
  clients[0].client_id = 0;
  clients[0].data.push_back(TokenSequence{{1, 2, 3}, 0});
  clients[0].samples_count = 1;
  clients[0].trainable = global.clone();
  OptimizerConfig opt;
  AggregationRule rule;
  CHECK_THROWS_WITH_AS(run_round(bad, global, clients, rule, opt, 1, 1),
                       doctest::Contains("client 0"), DivergenceError);

  clients[0].data.clear();
  CHECK_THROWS_AS(run_round(bad, global, clients, rule, opt, 1, 1), ConfigError);

  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  SessionData data = f.make_data(2, 41);
  SessionConfig cfg;
  cfg.max_rounds = 0;
  CHECK_THROWS_AS(train_session(*strategy, data, cfg), ConfigError);
}

TEST_CASE("frozen backbone stays bit-identical through a session") {
  Fixture f = make_fixture();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, small_settings());
  std::vector<std::vector<double>> before;
  for (const auto& [name, e] : f.base->entries()) {
    before.emplace_back(e.tensor.values().begin(), e.tensor.values().end());
  }
  SessionData data = f.make_data(2, 51);
  SessionConfig cfg;
  cfg.seed = 53;
  cfg.max_rounds = 3;
  train_session(*strategy, data, cfg);
  size_t i = 0;
  for (const auto& [name, e] : f.base->entries()) {
    auto now = e.tensor.values();
    REQUIRE(now.size() == before[i].size());
    for (size_t j = 0; j < now.size(); ++j) CHECK(now[j] == before[i][j]);
    ++i;
  }
}

TEST_CASE("cost accounting follows the trainable view") {
  Fixture f = make_fixture();
  StrategySettings settings = small_settings();
  auto strategy = make_strategy(Method::FPT, *f.model, f.base, settings);
  SessionData data = f.make_data(2, 61);
  SessionConfig cfg;
  cfg.seed = 67;
  cfg.max_rounds = 2;
  SessionResult res = train_session(*strategy, data, cfg);

  Rng probe(1);
  ParameterSet fpt_params = strategy->init_trainable(probe);
  TrainableView fpt_view = trainable_view(Method::FPT, *f.base, &fpt_params);
  CostReport report = account_costs(fpt_view, 2, res);
  CHECK(report.bytes_up_per_round == 2 * 8 * fpt_params.total_scalars());
  CHECK(report.rounds_to_stop == res.rounds_run);
  CHECK(report.trainable_count == fpt_params.total_scalars());

  TrainableView ffft_view = trainable_view(Method::FFFT, *f.base, nullptr);
  CHECK(fpt_view.byte_size < ffft_view.byte_size);
}

TEST_CASE("all four strategies run a federated session end to end") {
  Fixture f = make_fixture();
  SessionData data = f.make_data(2, 71);
  SessionConfig cfg;
  cfg.seed = 73;
  cfg.max_rounds = 2;
  for (Method m : {Method::FPT, Method::FFFT, Method::FAT, Method::FKD}) {
    auto strategy = make_strategy(m, *f.model, f.base, small_settings());
    SessionResult res = train_session(*strategy, data, cfg);
    INFO("method " << to_string(m));
    CHECK(res.rounds_run == 2);
    for (const auto& rec : res.records) {
      CHECK(std::isfinite(rec.val_loss));
      CHECK(rec.seconds > 0.0);
      CHECK(rec.per_client_loss.size() == 2);
    }
    CHECK((m == Method::FPT) == res.records[0].prefix_cosine.has_value());
  }
}
