// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "fedcustom/datagen.hpp"
#include "fedcustom/federation.hpp"

namespace fedcustom {

// Flat "key = value" configuration text with dotted section names and '#'
// comments. Canonical form is the sorted key list, which also defines the
// config hash embedded into every artifact.
class KeyValueConfig {
 public:
  static KeyValueConfig parse_file(const std::filesystem::path& path);
  static KeyValueConfig parse_string(const std::string& text);

  bool has(const std::string& key) const { return items_.count(key) > 0; }
  void set(const std::string& key, const std::string& value) { items_[key] = value; }
  void apply_override(const std::string& key_equals_value);

  std::string get_string(const std::string& key, const std::string& fallback) const;
  int get_int(const std::string& key, int fallback) const;
  int64_t get_int64(const std::string& key, int64_t fallback) const;
  uint64_t get_uint64(const std::string& key, uint64_t fallback) const;
  double get_double(const std::string& key, double fallback) const;
  std::vector<int> get_int_list(const std::string& key, std::vector<int> fallback) const;

  const std::map<std::string, std::string>& items() const { return items_; }
  std::string canonical_text() const;
  std::string hash_hex() const;

 private:
  std::map<std::string, std::string> items_;
};

struct ExperimentConfig {
  uint64_t seed = 1;
  Method method = Method::FPT;
  std::string name;
  int clients = 10;

  struct Partition {
    std::string kind = "iid";  // iid | noniid
    std::string attribute = "food";
    double x = 80.0;
  } partition;

  AggregationRule agg;
  OptimizerConfig opt;
  int max_rounds = 30;
  int patience = 3;

  CorpusConfig corpus;  // target corpus (template_families empty = all)

  struct Pretrain {
    int size = 1500;
    uint64_t seed = 11;
    std::vector<int> families = {0, 1, 2, 3, 4, 5};
    int max_epochs = 40;
    int patience = 3;
    double lr = 2e-3;
    int batch_size = 16;
  } pretrain;

  BackboneConfig backbone;  // vocab_size resolved from the tokenizer at run time
  PrefixOptimizerConfig prefix;
  int adapter_bottleneck = 48;
  StudentConfig student;
  DistillLossWeights distill;

  int eval_round_subset = 64;
  int eval_max_new = 48;

  std::filesystem::path out_root;
  KeyValueConfig raw;

  // Parses and validates; throws ConfigError listing every offending field.
  static ExperimentConfig from_kv(const KeyValueConfig& kv);
  std::string config_hash() const { return raw.hash_hex(); }
  std::string default_name() const;
};

struct RunSummary {
  std::string method;
  std::string setting;  // e.g. "iid-c10", "noniid80-c10", "client3"
  uint64_t seed = 0;
  std::string config_hash;
  std::string corpus_hash;
  double bleu = 0.0;     // final full-test score of the best checkpoint
  double rouge_l = 0.0;
  int64_t trainable_params = 0;
  int64_t bytes_per_round = 0;
  int rounds_to_stop = 0;
  int best_round = 0;
  double best_val = 0.0;
  bool has_prefix_cosine = false;
  double prefix_cosine_mean = 0.0;  // mean over rounds
  double seconds_total = 0.0;       // simulated
  std::vector<RoundRecord> records;
  std::filesystem::path run_dir;
  bool failed = false;
  std::string error;
};

struct RunResult {
  std::vector<RunSummary> summaries;  // one, or one per client for client_only
  std::filesystem::path run_dir;
};

struct RunOptions {
  bool reuse_existing = false;  // load a finished identical run instead of recomputing
  const ThreadPool* pool = nullptr;
};

// Runs one experiment end to end: corpus, tokenizer, pretrained backbone
// (cached per configuration and seed), partition, federated session, final
// test evaluation, artifacts on disk. Rerunning with the same config and
// seed overwrites the artifacts with identical bytes.
RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {});

// The corpus the backbone is pretrained on (its own template families and
// seed, disjoint in style from the customization target by default).
Corpus pretrain_corpus_of(const ExperimentConfig& cfg);

// Tokenizer over both training splits; the pretrained model must be able to
// read its own pretraining text, evaluation splits contribute nothing.
Tokenizer build_tokenizer(const Corpus& target, const Corpus& pretrain);

// The pretrained frozen backbone for a configuration, built on demand and
// cached under <out_root>/cache.
ParameterSet pretrained_backbone(const ExperimentConfig& cfg, const Tokenizer& tk,
                                 const Corpus& pretrain_corpus, const ThreadPool& pool);

// Round-log (de)serialization: one json object per line, fixed field order
// round, per_client_loss, val_loss, bleu, rouge_l, bytes_up, bytes_down,
// seconds, then optional prefix_cosine / client_distance, then config_hash
// and seed.
std::string round_record_line(const RoundRecord& rec, const std::string& config_hash,
                              uint64_t seed);
std::vector<RoundRecord> parse_round_log(const std::filesystem::path& file,
                                         std::string* config_hash = nullptr,
                                         uint64_t* seed = nullptr);

// Named experiment suites. Each recipe is a (label, config) pair; seeds are
// fixed at {1, 2, 3} so repeated suite runs emit identical tables.
std::vector<std::pair<std::string, KeyValueConfig>> suite_recipes(const std::string& suite);
inline const std::vector<uint64_t> kSuiteSeeds = {1, 2, 3};

struct SuiteOutcome {
  std::filesystem::path csv_path;
  std::string csv_text;
  bool all_ok = true;
};
SuiteOutcome run_suite(const std::string& suite, const std::filesystem::path& out_root,
                       const std::vector<std::string>& overrides = {},
                       const RunOptions& opts = {});

// CSV of (series, round, val_loss, bleu) over every rounds.jsonl below dir.
std::string emit_plotdata(const std::filesystem::path& dir);

}  // namespace fedcustom
