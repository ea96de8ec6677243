// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/federation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fedcustom {

// ---------------------------------------------------------------------------
// Optimizer

void LocalOptimizer::step(ParameterSet& params) {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (const auto& name : params.names()) {
    Tensor& tensor = params.at(name);
    if (!tensor.requires_grad()) continue;
    auto w = tensor.values();
    auto g = tensor.grad();
    if (cfg_.kind == OptimizerConfig::Kind::sgd) {
      for (size_t i = 0; i < w.size(); ++i) w[i] -= cfg_.lr * g[i];
      continue;
    }
    auto& [m, v] = moments_[name];
    if (m.size() != w.size()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    for (size_t i = 0; i < w.size(); ++i) {
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g[i];
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
    }
  }
}

// ---------------------------------------------------------------------------
// Strategies

namespace {

class PrefixStrategy final : public Strategy {
 public:
  PrefixStrategy(Method method, Backbone model, std::shared_ptr<const ParameterSet> base,
                 PrefixOptimizerConfig cfg)
      : method_(method), model_(std::move(model)), base_(std::move(base)),
        opt_(cfg, model_.config()) {}

  Method method() const override { return method_; }

  ParameterSet init_trainable(Rng& rng) const override { return opt_.init_params(rng); }

  Tensor batch_loss(Graph& g, const ParameterSet& trainable,
                    std::span<const TokenSequence> batch) const override {
    KVPrefix prefix = opt_.generate(g, trainable);
    return model_.lm_loss(g, *base_, batch, &prefix);
  }

  std::vector<int> decode(const ParameterSet& trainable, std::span<const int> mr, int max_new,
                          int eos_id, uint64_t* macs) const override {
    Graph g(false);
    KVPrefix prefix = opt_.generate(g, trainable);
    if (macs) *macs += g.mac_count();
    return model_.greedy_decode(*base_, mr, &prefix, nullptr, max_new, eos_id, macs);
  }

  std::optional<KVPrefix> prefix_of(const ParameterSet& trainable) const override {
    Graph g(false);
    return opt_.generate(g, trainable);
  }

 private:
  Method method_;
  Backbone model_;
  std::shared_ptr<const ParameterSet> base_;
  PrefixOptimizer opt_;
};

class FullTuneStrategy final : public Strategy {
 public:
  FullTuneStrategy(Backbone model, std::shared_ptr<const ParameterSet> base)
      : model_(std::move(model)), base_(std::move(base)) {}

  Method method() const override { return Method::FFFT; }

  ParameterSet init_trainable(Rng&) const override {
    ParameterSet p = base_->clone();
    p.set_trainable({ParamGroup::backbone, ParamGroup::head});
    return p;
  }

  Tensor batch_loss(Graph& g, const ParameterSet& trainable,
                    std::span<const TokenSequence> batch) const override {
    return model_.lm_loss(g, trainable, batch);
  }

  std::vector<int> decode(const ParameterSet& trainable, std::span<const int> mr, int max_new,
                          int eos_id, uint64_t* macs) const override {
    return model_.greedy_decode(trainable, mr, nullptr, nullptr, max_new, eos_id, macs);
  }

 private:
  Backbone model_;
  std::shared_ptr<const ParameterSet> base_;
};

class AdapterStrategy final : public Strategy {
 public:
  AdapterStrategy(Backbone model, std::shared_ptr<const ParameterSet> base, int bottleneck)
      : model_(std::move(model)), base_(std::move(base)), bottleneck_(bottleneck) {}

  Method method() const override { return Method::FAT; }

  ParameterSet init_trainable(Rng& rng) const override {
    return make_adapter_params(model_.config(), bottleneck_, rng);
  }

  Tensor batch_loss(Graph& g, const ParameterSet& trainable,
                    std::span<const TokenSequence> batch) const override {
    AdapterSet adapters = adapter_view(model_.config(), trainable);
    return model_.lm_loss(g, *base_, batch, nullptr, &adapters);
  }

  std::vector<int> decode(const ParameterSet& trainable, std::span<const int> mr, int max_new,
                          int eos_id, uint64_t* macs) const override {
    AdapterSet adapters = adapter_view(model_.config(), trainable);
    return model_.greedy_decode(*base_, mr, nullptr, &adapters, max_new, eos_id, macs);
  }

 private:
  Backbone model_;
  std::shared_ptr<const ParameterSet> base_;
  int bottleneck_;
};

class DistillStrategy final : public Strategy {
 public:
  DistillStrategy(Backbone teacher_model, std::shared_ptr<const ParameterSet> base,
                  StudentConfig student, DistillLossWeights weights)
      : teacher_(std::move(teacher_model)), base_(std::move(base)), student_cfg_(student),
        student_model_(student_backbone_config(student, teacher_.config())), weights_(weights) {}

  Method method() const override { return Method::FKD; }

  ParameterSet init_trainable(Rng& rng) const override {
    return init_student_params(student_cfg_, teacher_.config(), rng);
  }

  Tensor batch_loss(Graph& g, const ParameterSet& trainable,
                    std::span<const TokenSequence> batch) const override {
    if (batch.empty()) throw InputError("batch_loss: empty batch");
    std::vector<Tensor> totals;
    totals.reserve(batch.size());
    for (const auto& seq : batch) {
      const int64_t t = static_cast<int64_t>(seq.tokens.size());
      std::span<const int> inputs(seq.tokens.data(), static_cast<size_t>(t - 1));
      std::vector<int> targets(static_cast<size_t>(t - 1));
      for (int64_t i = 0; i + 1 < t; ++i) {
        targets[static_cast<size_t>(i)] = (i + 1 <= seq.sep_index)
                                              ? Backbone::kIgnoreIndex
                                              : seq.tokens[static_cast<size_t>(i + 1)];
      }
      Graph teacher_graph(false);
      ForwardResult tout = teacher_.forward(teacher_graph, *base_, inputs, nullptr, nullptr, true);
      ForwardResult sout = student_model_.forward(g, trainable, inputs, nullptr, nullptr, true);
      DistillResult res = distill_losses(g, tout, sout, targets, Backbone::kIgnoreIndex,
                                         trainable.at("align.w"), weights_);
      totals.push_back(res.total);
    }
    return g.mean_of(totals);
  }

  std::vector<int> decode(const ParameterSet& trainable, std::span<const int> mr, int max_new,
                          int eos_id, uint64_t* macs) const override {
    return student_model_.greedy_decode(trainable, mr, nullptr, nullptr, max_new, eos_id, macs);
  }

 private:
  Backbone teacher_;
  std::shared_ptr<const ParameterSet> base_;
  StudentConfig student_cfg_;
  Backbone student_model_;
  DistillLossWeights weights_;
};

}  // namespace

std::unique_ptr<Strategy> make_strategy(Method method, const Backbone& model,
                                        std::shared_ptr<const ParameterSet> frozen_base,
                                        const StrategySettings& settings) {
  switch (method) {
    case Method::FPT:
    case Method::CPT:
    case Method::ClientOnly:
      return std::make_unique<PrefixStrategy>(method, model, std::move(frozen_base),
                                              settings.prefix);
    case Method::FFFT:
      return std::make_unique<FullTuneStrategy>(model, std::move(frozen_base));
    case Method::FAT:
      return std::make_unique<AdapterStrategy>(model, std::move(frozen_base),
                                               settings.adapter_bottleneck);
    case Method::FKD:
      return std::make_unique<DistillStrategy>(model, std::move(frozen_base), settings.student,
                                               settings.distill);
  }
  throw ConfigError("make_strategy: unknown method");
}

// ---------------------------------------------------------------------------
// Aggregation

ParameterSet aggregate_uploads(const std::vector<const ClientState*>& clients) {
  if (clients.empty()) throw ConfigError("aggregate: no clients");
  std::vector<const ClientState*> order = clients;
  std::sort(order.begin(), order.end(),
            [](const ClientState* a, const ClientState* b) { return a->client_id < b->client_id; });

  int64_t total = 0;
  for (const auto* c : order) total += c->samples_count;
  if (total <= 0) throw ConfigError("aggregate: zero total samples");

  // anchored weighted mean: w = w_0 + sum_k (n_k/n) (w_k - w_0); identical
  // uploads aggregate to themselves bit-for-bit
  ParameterSet agg = order[0]->trainable.clone();
  for (const auto& name : agg.names()) {
    auto out = agg.at(name).values();
    const auto anchor = order[0]->trainable.at(name).values();
    std::vector<double> delta(out.size(), 0.0);
    for (const auto* c : order) {
      const double coeff =
          static_cast<double>(c->samples_count) / static_cast<double>(total);
      const auto w = c->trainable.at(name).values();
      if (w.size() != out.size()) throw ConfigError("aggregate: shape mismatch at '" + name + "'");
      for (size_t i = 0; i < out.size(); ++i) delta[i] += coeff * (w[i] - anchor[i]);
    }
    for (size_t i = 0; i < out.size(); ++i) out[i] = anchor[i] + delta[i];
  }
  return agg;
}

// ---------------------------------------------------------------------------
// Rounds

namespace {

double l2_distance(const ParameterSet& a, const ParameterSet& b) {
  double acc = 0.0;
  for (const auto& name : a.names()) {
    const auto av = a.at(name).values();
    const auto bv = b.at(name).values();
    for (size_t i = 0; i < av.size(); ++i) {
      const double d = av[i] - bv[i];
      acc += d * d;
    }
  }
  return std::sqrt(acc);
}

struct ClientRun {
  double mean_loss = 0.0;
  uint64_t macs = 0;
  std::exception_ptr error;
};

}  // namespace

RoundOutcome run_round(const Strategy& strategy, ParameterSet& global,
                       std::vector<ClientState>& clients, const AggregationRule& rule,
                       const OptimizerConfig& opt, int round_index, uint64_t session_seed,
                       const ThreadPool& pool) {
  if (clients.empty()) throw ConfigError("run_round: no clients");
  for (const auto& c : clients) {
    if (c.data.empty()) {
      throw ConfigError("run_round: client " + std::to_string(c.client_id) + " has an empty shard");
    }
  }
  const double mu = rule.kind == AggregationRule::Kind::fedprox ? rule.prox_mu : 0.0;
  const ParameterSet anchor = global.clone();  // broadcast snapshot

  std::vector<ClientRun> runs(clients.size());
  pool.parallel_for(static_cast<int64_t>(clients.size()), [&](int64_t idx) {
    ClientState& client = clients[static_cast<size_t>(idx)];
    ClientRun& run = runs[static_cast<size_t>(idx)];
    try {
      client.trainable.copy_values_from(global);
      client.trainable.zero_grads();
      LocalOptimizer optimizer(opt);  // optimizer state resets at broadcast

      Rng rng = Rng(session_seed)
                    .fork("round." + std::to_string(round_index))
                    .fork("client." + std::to_string(client.client_id));
      std::vector<size_t> order(client.data.size());
      for (size_t i = 0; i < order.size(); ++i) order[i] = i;
      rng.shuffle(order);

      double loss_sum = 0.0;
      int batches = 0;
      const size_t bs = static_cast<size_t>(std::max(1, opt.batch_size));
      for (size_t start = 0; start < order.size(); start += bs) {
        std::vector<TokenSequence> batch;
        for (size_t i = start; i < std::min(order.size(), start + bs); ++i) {
          batch.push_back(client.data[order[i]]);
        }
        Graph g;
        Tensor loss = strategy.batch_loss(g, client.trainable, batch);
        g.backward(loss);
        double loss_value = loss.item();
        if (mu != 0.0) {
          // proximal term (mu/2) ||w - w_global||^2, folded straight into
          // the gradients
          double penalty = 0.0;
          for (const auto& name : client.trainable.names()) {
            auto w = client.trainable.at(name).values();
            auto wg = anchor.at(name).values();
            auto grad = client.trainable.at(name).grad();
            for (size_t i = 0; i < w.size(); ++i) {
              const double diff = w[i] - wg[i];
              grad[i] += mu * diff;
              penalty += diff * diff;
            }
          }
          loss_value += 0.5 * mu * penalty;
        }
        optimizer.step(client.trainable);
        client.trainable.zero_grads();
        loss_sum += loss_value;
        ++batches;
        run.macs += g.mac_count();
      }
      run.mean_loss = loss_sum / std::max(1, batches);
      if (!client.trainable.all_finite()) {
        throw DivergenceError("client " + std::to_string(client.client_id) +
                              " uploaded non-finite parameters");
      }
    } catch (const NumericError& e) {
      run.error = std::make_exception_ptr(
          DivergenceError("client " + std::to_string(client.client_id) + " diverged: " + e.what()));
    } catch (...) {
      run.error = std::current_exception();
    }
  });
  for (const auto& run : runs) {
    if (run.error) std::rethrow_exception(run.error);
  }

  std::vector<const ClientState*> uploads;
  uploads.reserve(clients.size());
  for (const auto& c : clients) uploads.push_back(&c);
  ParameterSet aggregate = aggregate_uploads(uploads);

  RoundOutcome outcome;
  outcome.record.round = round_index;
  for (const auto& run : runs) outcome.record.per_client_loss.push_back(run.mean_loss);
  const int64_t bytes_per_client = 8 * global.total_scalars();
  outcome.record.bytes_up = static_cast<int64_t>(clients.size()) * bytes_per_client;
  outcome.record.bytes_down = static_cast<int64_t>(clients.size()) * bytes_per_client;
  for (const auto& run : runs) outcome.macs += run.macs;

  double dist = 0.0;
  for (const auto& c : clients) dist += l2_distance(c.trainable, anchor);
  outcome.record.client_distance = dist / static_cast<double>(clients.size());

  if (auto agg_prefix = strategy.prefix_of(aggregate)) {
    std::vector<KVPrefix> locals;
    locals.reserve(clients.size());
    for (const auto& c : clients) locals.push_back(*strategy.prefix_of(c.trainable));
    outcome.record.prefix_cosine = prefix_cosine(locals, *agg_prefix).mean;
  }

  outcome.upload_names = clients.front().trainable.names();
  global = std::move(aggregate);
  return outcome;
}

// ---------------------------------------------------------------------------
// Early stopping

EarlyStopper::EarlyStopper(int patience)
    : patience_(patience), best_(std::numeric_limits<double>::infinity()) {
  if (patience < 1) throw ConfigError("early stopping patience must be at least 1");
}

bool EarlyStopper::observe(double val_loss) {
  ++rounds_seen_;
  if (val_loss < best_) {  // equality counts as no improvement
    best_ = val_loss;
    best_round_ = rounds_seen_;
    since_ = 0;
    improved_ = true;
  } else {
    ++since_;
    improved_ = false;
  }
  return since_ >= patience_;
}

// ---------------------------------------------------------------------------
// Sessions

namespace {

double validation_loss(const Strategy& strategy, const ParameterSet& trainable,
                       const std::vector<TokenSequence>& val, const ThreadPool& pool,
                       uint64_t* macs) {
  if (val.empty()) throw ConfigError("session: empty validation set");
  std::vector<double> losses(val.size(), 0.0);
  std::vector<uint64_t> counts(val.size(), 0);
  std::vector<std::exception_ptr> errors(val.size());
  pool.parallel_for(static_cast<int64_t>(val.size()), [&](int64_t i) {
    try {
      Graph g(false);
      std::span<const TokenSequence> one(&val[static_cast<size_t>(i)], 1);
      losses[static_cast<size_t>(i)] = strategy.batch_loss(g, trainable, one).item();
      counts[static_cast<size_t>(i)] = g.mac_count();
    } catch (...) {
      errors[static_cast<size_t>(i)] = std::current_exception();
    }
  });
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  double acc = 0.0;
  for (double l : losses) acc += l;
  for (uint64_t c : counts) *macs += c;
  return acc / static_cast<double>(val.size());
}

}  // namespace

SessionResult train_session(const Strategy& strategy, const SessionData& data,
                            const SessionConfig& cfg, const ThreadPool& pool) {
  if (cfg.max_rounds < 1) throw ConfigError("session: max_rounds must be at least 1");
  if (data.shards.empty()) throw ConfigError("session: no client shards");
  for (size_t k = 0; k < data.shards.size(); ++k) {
    if (data.shards[k].empty()) {
      throw ConfigError("session: client " + std::to_string(k) + " has an empty shard");
    }
  }

  Rng rng(cfg.seed);
  Rng init_rng = rng.fork("init");
  ParameterSet global = strategy.init_trainable(init_rng);

  std::vector<ClientState> clients;
  clients.reserve(data.shards.size());
  for (size_t k = 0; k < data.shards.size(); ++k) {
    ClientState c;
    c.client_id = static_cast<int>(k);
    c.data = data.shards[k];
    c.samples_count = static_cast<int64_t>(c.data.size());
    c.trainable = global.clone();
    clients.push_back(std::move(c));
  }

  SessionResult result;
  EarlyStopper stopper(cfg.patience);
  for (int round = 1; round <= cfg.max_rounds; ++round) {
    RoundOutcome outcome =
        run_round(strategy, global, clients, cfg.agg, cfg.opt, round, cfg.seed, pool);
    uint64_t macs = outcome.macs;
    outcome.record.val_loss = validation_loss(strategy, global, data.val, pool, &macs);

    if (cfg.eval_metrics && !data.round_eval.empty()) {
      std::vector<std::vector<int>> hyps(data.round_eval.size());
      std::vector<uint64_t> counts(data.round_eval.size(), 0);
      std::vector<std::exception_ptr> errors(data.round_eval.size());
      pool.parallel_for(static_cast<int64_t>(data.round_eval.size()), [&](int64_t i) {
        try {
          hyps[static_cast<size_t>(i)] =
              strategy.decode(global, data.round_eval[static_cast<size_t>(i)].mr, data.max_new,
                              data.eos_id, &counts[static_cast<size_t>(i)]);
        } catch (...) {
          errors[static_cast<size_t>(i)] = std::current_exception();
        }
      });
      for (const auto& e : errors) {
        if (e) std::rethrow_exception(e);
      }
      std::vector<std::vector<int>> refs;
      refs.reserve(data.round_eval.size());
      for (const auto& item : data.round_eval) refs.push_back(item.ref);
      // plus-one smoothing: round subsets are small enough to zero out
      // unsmoothed 4-gram precisions early in training
      MetricReport mr = text_metrics(hyps, refs, 4, BleuSmoothing::plus_one);
      outcome.record.bleu = mr.bleu;
      outcome.record.rouge_l = mr.rouge_l;
      for (uint64_t c : counts) macs += c;
    }

    outcome.record.seconds = static_cast<double>(macs) / 1e9;
    result.total_macs += macs;
    result.records.push_back(outcome.record);
    result.round_upload_names.push_back(outcome.upload_names);

    const bool stop = stopper.observe(outcome.record.val_loss);
    if (stopper.improved()) {
      result.best_trainable = global.clone();
      result.best_round = round;
      result.best_val = stopper.best();
    }
    if (stop) break;
  }
  result.rounds_run = static_cast<int>(result.records.size());
  if (result.best_round == 0) {
    result.best_trainable = global.clone();
    result.best_round = result.rounds_run;
    result.best_val = result.records.empty() ? 0.0 : result.records.back().val_loss;
  }
  return result;
}

CostReport account_costs(const TrainableView& view, int n_clients, const SessionResult& result) {
  CostReport report;
  report.trainable_count = view.scalar_count;
  report.bytes_up_per_round = static_cast<int64_t>(n_clients) * view.byte_size;
  report.bytes_down_per_round = report.bytes_up_per_round;
  report.rounds_to_stop = result.rounds_run;
  return report;
}

}  // namespace fedcustom
