// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <memory>
#include <optional>

#include "fedcustom/customization.hpp"
#include "fedcustom/evalmetrics.hpp"
#include "fedcustom/threadpool.hpp"

namespace fedcustom {

struct OptimizerConfig {
  enum class Kind { adam, sgd };
  Kind kind = Kind::adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int batch_size = 8;
};

struct AggregationRule {
  enum class Kind { fedavg, fedprox };
  Kind kind = Kind::fedavg;
  double prox_mu = 0.0;  // used iff fedprox; zero degenerates to fedavg
};

// Adam or plain gradient descent over the trainable entries of a parameter
// set. Moment buffers key off entry names; iteration order is the sorted
// name order.
class LocalOptimizer {
 public:
  explicit LocalOptimizer(OptimizerConfig cfg) : cfg_(cfg) {}
  void step(ParameterSet& params);

 private:
  OptimizerConfig cfg_;
  int64_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// A customization method as the federation engine sees it: how to create the
// trainable set, score a batch, and decode with it.
class Strategy {
 public:
  virtual ~Strategy() = default;
  virtual Method method() const = 0;
  virtual ParameterSet init_trainable(Rng& rng) const = 0;
  virtual Tensor batch_loss(Graph& g, const ParameterSet& trainable,
                            std::span<const TokenSequence> batch) const = 0;
  virtual std::vector<int> decode(const ParameterSet& trainable, std::span<const int> mr,
                                  int max_new, int eos_id, uint64_t* macs = nullptr) const = 0;
  // Present only for prefix-based methods.
  virtual std::optional<KVPrefix> prefix_of(const ParameterSet& trainable) const {
    return std::nullopt;
  }
};

struct StrategySettings {
  PrefixOptimizerConfig prefix;
  int adapter_bottleneck = 48;
  StudentConfig student;
  DistillLossWeights distill;
};

// frozen_base is the shared pretrained backbone; strategies never mutate it.
std::unique_ptr<Strategy> make_strategy(Method method, const Backbone& model,
                                        std::shared_ptr<const ParameterSet> frozen_base,
                                        const StrategySettings& settings);

struct ClientState {
  int client_id = 0;
  std::vector<TokenSequence> data;
  int64_t samples_count = 0;
  ParameterSet trainable;
};

struct RoundRecord {
  int round = 0;
  std::vector<double> per_client_loss;
  double val_loss = 0.0;
  double bleu = 0.0;
  double rouge_l = 0.0;
  int64_t bytes_up = 0;
  int64_t bytes_down = 0;
  double seconds = 0.0;  // simulated: counted multiply-accumulates / 1e9
  std::optional<double> prefix_cosine;     // prefix methods only
  std::optional<double> client_distance;   // mean L2 upload-to-broadcast distance
};

// Fires exactly when the validation loss has not strictly decreased for
// `patience` consecutive observations.
class EarlyStopper {
 public:
  explicit EarlyStopper(int patience);
  bool observe(double val_loss);  // true: stop now
  bool improved() const { return improved_; }
  double best() const { return best_; }
  int best_round() const { return best_round_; }
  int rounds_seen() const { return rounds_seen_; }

 private:
  int patience_;
  double best_;
  int since_ = 0;
  int rounds_seen_ = 0;
  int best_round_ = 0;
  bool improved_ = false;
};

struct EvalItem {
  std::vector<int> mr;   // ends with SEP
  std::vector<int> ref;  // reference text tokens
};

struct SessionData {
  std::vector<std::vector<TokenSequence>> shards;  // one per client, in id order
  std::vector<TokenSequence> val;
  std::vector<EvalItem> round_eval;  // subset scored every round
  int eos_id = 3;
  int max_new = 48;
};

struct SessionConfig {
  uint64_t seed = 1;
  int max_rounds = 25;
  int patience = 3;
  OptimizerConfig opt;
  AggregationRule agg;
  bool eval_metrics = true;  // decode round_eval each round
};

struct SessionResult {
  std::vector<RoundRecord> records;
  ParameterSet best_trainable;
  int best_round = 0;
  double best_val = 0.0;
  int rounds_run = 0;
  std::vector<std::vector<std::string>> round_upload_names;  // per round
  uint64_t total_macs = 0;
};

struct RoundOutcome {
  RoundRecord record;  // val/bleu/rouge left for the caller
  std::vector<std::string> upload_names;
  uint64_t macs = 0;
};

// One synchronous round: broadcast `global` to every client, run one local
// epoch each (FedProx adds its proximal term), then replace `global` with
// the samples-weighted mean of the uploads. Clients may run in parallel;
// aggregation always folds in ascending client id, so results are
// bit-identical either way.
RoundOutcome run_round(const Strategy& strategy, ParameterSet& global,
                       std::vector<ClientState>& clients, const AggregationRule& rule,
                       const OptimizerConfig& opt, int round_index, uint64_t session_seed,
                       const ThreadPool& pool = ThreadPool::global());

// Full training session: rounds until early stopping or max_rounds, tracking
// the best-validation trainable set. With a single shard this is centralized
// training.
SessionResult train_session(const Strategy& strategy, const SessionData& data,
                            const SessionConfig& cfg,
                            const ThreadPool& pool = ThreadPool::global());

// Samples-weighted anchored mean of the uploads listed in `clients`,
// folding in ascending client id.
ParameterSet aggregate_uploads(const std::vector<const ClientState*>& clients);

struct CostReport {
  int64_t trainable_count = 0;
  int64_t bytes_up_per_round = 0;
  int64_t bytes_down_per_round = 0;
  int rounds_to_stop = 0;
};
CostReport account_costs(const TrainableView& view, int n_clients, const SessionResult& result);

}  // namespace fedcustom
