// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/harness.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>

namespace fedcustom {

using nlohmann::json;
using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// KeyValueConfig

namespace {

std::string trim(const std::string& s) {
  size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

uint64_t fnv1a_hash(const std::string& s) {
  uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

}  // namespace

KeyValueConfig KeyValueConfig::parse_string(const std::string& text) {
  KeyValueConfig kv;
  std::istringstream in(text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const size_t hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + " has no '=': '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ConfigError("config line " + std::to_string(line_no) + ": empty key");
    kv.items_[key] = value;
  }
  return kv;
}

KeyValueConfig KeyValueConfig::parse_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config file: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

void KeyValueConfig::apply_override(const std::string& key_equals_value) {
  const size_t eq = key_equals_value.find('=');
  if (eq == std::string::npos) {
    throw ConfigError("override must look like key=value, got '" + key_equals_value + "'");
  }
  items_[trim(key_equals_value.substr(0, eq))] = trim(key_equals_value.substr(eq + 1));
}

std::string KeyValueConfig::get_string(const std::string& key, const std::string& fallback) const {
  auto it = items_.find(key);
  return it == items_.end() ? fallback : it->second;
}

int KeyValueConfig::get_int(const std::string& key, int fallback) const {
  return static_cast<int>(get_int64(key, fallback));
}

int64_t KeyValueConfig::get_int64(const std::string& key, int64_t fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  try {
    return std::stoll(it->second);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an integer: '" + it->second + "'");
  }
}

uint64_t KeyValueConfig::get_uint64(const std::string& key, uint64_t fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  try {
    return std::stoull(it->second);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not an unsigned integer: '" + it->second + "'");
  }
}

double KeyValueConfig::get_double(const std::string& key, double fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  try {
    return std::stod(it->second);
  } catch (...) {
    throw ConfigError("config key '" + key + "' is not a number: '" + it->second + "'");
  }
}

std::vector<int> KeyValueConfig::get_int_list(const std::string& key,
                                              std::vector<int> fallback) const {
  auto it = items_.find(key);
  if (it == items_.end()) return fallback;
  if (it->second == "all") return {};
  std::vector<int> out;
  std::stringstream ss(it->second);
  std::string piece;
  while (std::getline(ss, piece, ',')) {
    piece = trim(piece);
    if (piece.empty()) continue;
    try {
      out.push_back(std::stoi(piece));
    } catch (...) {
      throw ConfigError("config key '" + key + "' is not an integer list: '" + it->second + "'");
    }
  }
  return out;
}

std::string KeyValueConfig::canonical_text() const {
  std::string out;
  for (const auto& [k, v] : items_) out += k + " = " + v + "\n";
  return out;
}

std::string KeyValueConfig::hash_hex() const { return hex64(fnv1a_hash(canonical_text())); }

// ---------------------------------------------------------------------------
// ExperimentConfig

namespace {

const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys = {
      "seed", "method", "name", "out", "clients",
      "partition.kind", "partition.attribute", "partition.x",
      "agg.kind", "agg.prox_mu",
      "opt.kind", "opt.lr", "opt.beta1", "opt.beta2", "opt.eps", "opt.batch_size",
      "rounds.max", "rounds.patience",
      "corpus.seed", "corpus.size", "corpus.families",
      "backbone.layers", "backbone.heads", "backbone.dim", "backbone.ff", "backbone.max_seq",
      "prefix.len", "prefix.embed", "prefix.hidden",
      "adapter.bottleneck",
      "student.layers", "student.heads", "student.dim", "student.ff",
      "distill.w_task", "distill.w_soft", "distill.w_hidden", "distill.temperature",
      "pretrain.size", "pretrain.seed", "pretrain.families", "pretrain.epochs",
      "pretrain.patience", "pretrain.lr", "pretrain.batch_size",
      "eval.round_subset", "eval.max_new",
  };
  return keys;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_kv(const KeyValueConfig& kv) {
  std::vector<std::string> problems;
  for (const auto& [k, v] : kv.items()) {
    if (!known_keys().count(k)) problems.push_back("unknown key '" + k + "'");
  }

  ExperimentConfig cfg;
  cfg.raw = kv;
  cfg.seed = kv.get_uint64("seed", 1);
  try {
    cfg.method = method_from_string(kv.get_string("method", "fpt"));
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }
  cfg.name = kv.get_string("name", "");
  cfg.clients = kv.get_int("clients", 10);
  if (cfg.method == Method::CPT && kv.has("clients")) {
    problems.push_back("'clients' cannot be set when method = cpt (it trains on pooled data)");
  }
  if (cfg.method == Method::CPT) cfg.clients = 1;
  if (cfg.clients < 1) problems.push_back("'clients' must be at least 1");

  cfg.partition.kind = kv.get_string("partition.kind", "iid");
  cfg.partition.attribute = kv.get_string("partition.attribute", "food");
  cfg.partition.x = kv.get_double("partition.x", 80.0);
  if (cfg.partition.kind != "iid" && cfg.partition.kind != "noniid") {
    problems.push_back("'partition.kind' must be iid or noniid");
  }
  if (cfg.partition.kind == "noniid" && (cfg.partition.x < 0.0 || cfg.partition.x > 100.0)) {
    problems.push_back("'partition.x' must lie in [0, 100]");
  }

  const std::string agg_kind = kv.get_string("agg.kind", "fedavg");
  if (agg_kind == "fedavg") {
    cfg.agg.kind = AggregationRule::Kind::fedavg;
  } else if (agg_kind == "fedprox") {
    cfg.agg.kind = AggregationRule::Kind::fedprox;
  } else {
    problems.push_back("'agg.kind' must be fedavg or fedprox");
  }
  cfg.agg.prox_mu = kv.get_double("agg.prox_mu", 0.0);
  if (cfg.agg.prox_mu < 0.0) problems.push_back("'agg.prox_mu' must be nonnegative");

  const std::string opt_kind = kv.get_string("opt.kind", "adam");
  if (opt_kind == "adam") {
    cfg.opt.kind = OptimizerConfig::Kind::adam;
  } else if (opt_kind == "sgd") {
    cfg.opt.kind = OptimizerConfig::Kind::sgd;
  } else {
    problems.push_back("'opt.kind' must be adam or sgd");
  }
  cfg.opt.lr = kv.get_double("opt.lr", 1e-3);
  cfg.opt.beta1 = kv.get_double("opt.beta1", 0.9);
  cfg.opt.beta2 = kv.get_double("opt.beta2", 0.999);
  cfg.opt.eps = kv.get_double("opt.eps", 1e-8);
  cfg.opt.batch_size = kv.get_int("opt.batch_size", 8);
  if (cfg.opt.lr <= 0.0) problems.push_back("'opt.lr' must be positive");
  if (cfg.opt.batch_size < 1) problems.push_back("'opt.batch_size' must be at least 1");

  cfg.max_rounds = kv.get_int("rounds.max", 30);
  cfg.patience = kv.get_int("rounds.patience", 3);
  if (cfg.max_rounds < 1) problems.push_back("'rounds.max' must be at least 1");
  if (cfg.patience < 1) problems.push_back("'rounds.patience' must be at least 1");

  cfg.corpus.seed = kv.get_uint64("corpus.seed", 7);
  cfg.corpus.size = kv.get_int("corpus.size", 1000);
  cfg.corpus.template_families = kv.get_int_list("corpus.families", {6, 7, 8, 9});
  if (cfg.corpus.size < 100) problems.push_back("'corpus.size' must be at least 100");

  cfg.pretrain.size = kv.get_int("pretrain.size", 1500);
  cfg.pretrain.seed = kv.get_uint64("pretrain.seed", 11);
  cfg.pretrain.families = kv.get_int_list("pretrain.families", {0, 1, 2, 3, 4, 5});
  cfg.pretrain.max_epochs = kv.get_int("pretrain.epochs", 40);
  cfg.pretrain.patience = kv.get_int("pretrain.patience", 3);
  cfg.pretrain.lr = kv.get_double("pretrain.lr", 2e-3);
  cfg.pretrain.batch_size = kv.get_int("pretrain.batch_size", 16);
  if (cfg.pretrain.size < 100) problems.push_back("'pretrain.size' must be at least 100");
  if (cfg.pretrain.max_epochs < 1) problems.push_back("'pretrain.epochs' must be at least 1");

  cfg.backbone.n_layers = kv.get_int("backbone.layers", 2);
  cfg.backbone.n_heads = kv.get_int("backbone.heads", 4);
  cfg.backbone.model_dim = kv.get_int("backbone.dim", 64);
  cfg.backbone.ff_dim = kv.get_int("backbone.ff", 256);
  cfg.backbone.max_seq_len = kv.get_int("backbone.max_seq", 96);
  cfg.backbone.vocab_size = 300;  // placeholder until the tokenizer exists
  try {
    cfg.backbone.validate();
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }

  cfg.prefix.prefix_len = kv.get_int("prefix.len", 10);
  cfg.prefix.embed_dim = kv.get_int("prefix.embed", 32);
  cfg.prefix.hidden_dim = kv.get_int("prefix.hidden", 64);
  if (cfg.prefix.prefix_len < 1) problems.push_back("'prefix.len' must be at least 1");

  cfg.adapter_bottleneck = kv.get_int("adapter.bottleneck", 48);
  if (cfg.adapter_bottleneck < 1) problems.push_back("'adapter.bottleneck' must be at least 1");

  cfg.student.n_layers = kv.get_int("student.layers", 1);
  cfg.student.n_heads = kv.get_int("student.heads", 4);
  cfg.student.model_dim = kv.get_int("student.dim", 32);
  cfg.student.ff_dim = kv.get_int("student.ff", 128);

  cfg.distill.w_task = kv.get_double("distill.w_task", 1.0);
  cfg.distill.w_soft = kv.get_double("distill.w_soft", 1.0);
  cfg.distill.w_hidden = kv.get_double("distill.w_hidden", 0.1);
  cfg.distill.temperature = kv.get_double("distill.temperature", 2.0);
  try {
    cfg.distill.validate();
  } catch (const ConfigError& e) {
    problems.emplace_back(e.what());
  }

  cfg.eval_round_subset = kv.get_int("eval.round_subset", 64);
  cfg.eval_max_new = kv.get_int("eval.max_new", 48);
  if (cfg.eval_max_new < 1) problems.push_back("'eval.max_new' must be at least 1");

  std::string out = kv.get_string("out", "");
  if (out.empty()) {
    if (const char* env = std::getenv("FEDCUSTOM_OUT")) out = env;
  }
  if (out.empty()) out = "runs";
  cfg.out_root = out;

  if (!problems.empty()) {
    std::string msg = "invalid configuration:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
  return cfg;
}

std::string ExperimentConfig::default_name() const {
  std::string setting;
  if (method == Method::CPT) {
    setting = "pooled";
  } else if (partition.kind == "noniid") {
    setting = "noniid" + std::to_string(static_cast<int>(partition.x)) + "-c" +
              std::to_string(clients);
  } else {
    setting = "iid-c" + std::to_string(clients);
  }
  std::string base = to_string(method);
  if (agg.kind == AggregationRule::Kind::fedprox) base += "-prox";
  return base + "-" + setting;
}

// ---------------------------------------------------------------------------
// Corpus helpers

namespace {

std::string corpus_hash_of(const Corpus& corpus) {
  std::string text;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& ex : *split) {
      text += ex.mr.linearize();
      text += '\t';
      text += ex.text;
      text += '\t';
      text += std::to_string(ex.source_tag);
      text += '\n';
    }
  }
  return hex64(fnv1a_hash(text));
}

std::string setting_of(const ExperimentConfig& cfg) {
  if (cfg.method == Method::CPT) return "pooled";
  if (cfg.partition.kind == "noniid") {
    return "noniid" + std::to_string(static_cast<int>(cfg.partition.x)) + "-c" +
           std::to_string(cfg.clients);
  }
  return "iid-c" + std::to_string(cfg.clients);
}

std::vector<EvalItem> encode_eval(const Tokenizer& tk, std::span<const Example> examples,
                                  size_t limit) {
  std::vector<EvalItem> out;
  for (size_t i = 0; i < examples.size() && i < limit; ++i) {
    EvalItem item;
    item.mr = tk.linearize_mr(examples[i].mr);
    item.ref = tk.tokenize_text(examples[i].text);
    out.push_back(std::move(item));
  }
  return out;
}

void check_sequence_lengths(const Tokenizer& tk, const Corpus& corpus, int max_seq) {
  size_t longest = 0;
  for (const auto* split : {&corpus.train, &corpus.val, &corpus.test}) {
    for (const auto& ex : *split) {
      longest = std::max(longest, tk.encode_example(ex).tokens.size());
    }
  }
  if (longest > static_cast<size_t>(max_seq)) {
    throw ConfigError("longest linearized example (" + std::to_string(longest) +
                      " tokens) exceeds backbone.max_seq " + std::to_string(max_seq));
  }
}

std::pair<double, double> final_test_metrics(const Strategy& strategy,
                                             const ParameterSet& trainable,
                                             const std::vector<EvalItem>& items, int max_new,
                                             int eos_id, const ThreadPool& pool) {
  std::vector<std::vector<int>> hyps(items.size());
  std::vector<std::exception_ptr> errors(items.size());
  pool.parallel_for(static_cast<int64_t>(items.size()), [&](int64_t i) {
    try {
      hyps[static_cast<size_t>(i)] =
          strategy.decode(trainable, items[static_cast<size_t>(i)].mr, max_new, eos_id);
    } catch (...) {
      errors[static_cast<size_t>(i)] = std::current_exception();
    }
  });
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  std::vector<std::vector<int>> refs;
  refs.reserve(items.size());
  for (const auto& item : items) refs.push_back(item.ref);
  MetricReport report = text_metrics(hyps, refs, 4, BleuSmoothing::off);
  return {report.bleu, report.rouge_l};
}

}  // namespace

// ---------------------------------------------------------------------------
// Pretraining

Corpus pretrain_corpus_of(const ExperimentConfig& cfg) {
  CorpusConfig pcfg;
  pcfg.seed = cfg.pretrain.seed;
  pcfg.size = cfg.pretrain.size;
  pcfg.template_families = cfg.pretrain.families;
  return generate_corpus(pcfg);
}

Tokenizer build_tokenizer(const Corpus& target, const Corpus& pretrain) {
  std::vector<Example> train = target.train;
  train.insert(train.end(), pretrain.train.begin(), pretrain.train.end());
  return Tokenizer::build(train);
}

ParameterSet pretrained_backbone(const ExperimentConfig& cfg, const Tokenizer& tk,
                                 const Corpus& pretrain_corpus, const ThreadPool& pool) {
  BackboneConfig bcfg = cfg.backbone;
  bcfg.vocab_size = tk.vocab_size();

  // cache key from the resolved values that shape the pretrained model
  std::ostringstream key;
  key << "backbone " << bcfg.to_json().dump() << "\n";
  key << "corpus " << cfg.corpus.seed << " " << cfg.corpus.size;
  for (int f : cfg.corpus.template_families) key << "," << f;
  key << "\npretrain " << cfg.pretrain.size << " " << cfg.pretrain.seed << " "
      << cfg.pretrain.max_epochs << " " << cfg.pretrain.patience << " " << cfg.pretrain.lr << " "
      << cfg.pretrain.batch_size;
  for (int f : cfg.pretrain.families) key << "," << f;
  key << "\nseed " << cfg.seed << "\n";
  const std::string cache_hash = hex64(fnv1a_hash(key.str()));

  const auto cache_dir = cfg.out_root / "cache";
  std::filesystem::create_directories(cache_dir);
  const auto cache_file = cache_dir / ("base-" + cache_hash + ".ckpt");
  if (std::filesystem::exists(cache_file)) {
    ParameterSet cached = ParameterSet::load(cache_file);
    cached.set_trainable({});
    return cached;
  }

  Backbone model(bcfg);
  Rng init_rng = Rng(cfg.seed).fork("backbone-init");
  auto base = std::make_shared<ParameterSet>(model.init_params(init_rng));
  base->set_trainable({});

  auto strategy = make_strategy(Method::FFFT, model, base, StrategySettings{});

  SessionData data;
  data.shards.emplace_back();
  for (const auto& ex : pretrain_corpus.train) {
    data.shards[0].push_back(tk.encode_example(ex));
  }
  for (const auto& ex : pretrain_corpus.val) data.val.push_back(tk.encode_example(ex));
  data.eos_id = Tokenizer::kEos;

  SessionConfig scfg;
  scfg.seed = cfg.seed;
  scfg.max_rounds = cfg.pretrain.max_epochs;
  scfg.patience = cfg.pretrain.patience;
  scfg.opt.kind = OptimizerConfig::Kind::adam;
  scfg.opt.lr = cfg.pretrain.lr;
  scfg.opt.batch_size = cfg.pretrain.batch_size;
  scfg.eval_metrics = false;

  SessionResult result = train_session(*strategy, data, scfg, pool);
  ParameterSet best = result.best_trainable.clone();
  best.set_trainable({});
  ordered_json extra;
  extra["kind"] = "pretrained-backbone";
  extra["cache_hash"] = cache_hash;
  extra["seed"] = cfg.seed;
  extra["best_round"] = result.best_round;
  extra["best_val"] = result.best_val;
  extra["config"] = bcfg.to_json();
  best.save(cache_file, extra);
  return best;
}

// ---------------------------------------------------------------------------
// Round-log serialization

std::string round_record_line(const RoundRecord& rec, const std::string& config_hash,
                              uint64_t seed) {
  ordered_json j;
  j["round"] = rec.round;
  j["per_client_loss"] = rec.per_client_loss;
  j["val_loss"] = rec.val_loss;
  j["bleu"] = rec.bleu;
  j["rouge_l"] = rec.rouge_l;
  j["bytes_up"] = rec.bytes_up;
  j["bytes_down"] = rec.bytes_down;
  j["seconds"] = rec.seconds;
  if (rec.prefix_cosine) j["prefix_cosine"] = *rec.prefix_cosine;
  if (rec.client_distance) j["client_distance"] = *rec.client_distance;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  return j.dump();
}

std::vector<RoundRecord> parse_round_log(const std::filesystem::path& file,
                                         std::string* config_hash, uint64_t* seed) {
  std::ifstream in(file);
  if (!in) throw InputError("cannot open round log: " + file.string());
  std::vector<RoundRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    json j = json::parse(line);
    if (j.contains("error")) break;
    RoundRecord rec;
    rec.round = j.at("round").get<int>();
    rec.per_client_loss = j.at("per_client_loss").get<std::vector<double>>();
    rec.val_loss = j.at("val_loss").get<double>();
    rec.bleu = j.at("bleu").get<double>();
    rec.rouge_l = j.at("rouge_l").get<double>();
    rec.bytes_up = j.at("bytes_up").get<int64_t>();
    rec.bytes_down = j.at("bytes_down").get<int64_t>();
    rec.seconds = j.at("seconds").get<double>();
    if (j.contains("prefix_cosine")) rec.prefix_cosine = j.at("prefix_cosine").get<double>();
    if (j.contains("client_distance")) rec.client_distance = j.at("client_distance").get<double>();
    if (config_hash) *config_hash = j.value("config_hash", "");
    if (seed) *seed = j.value("seed", 0ull);
    out.push_back(std::move(rec));
  }
  return out;
}

// ---------------------------------------------------------------------------
// run_experiment

namespace {

ordered_json summary_to_json(const RunSummary& s) {
  ordered_json j;
  j["method"] = s.method;
  j["setting"] = s.setting;
  j["seed"] = s.seed;
  j["config_hash"] = s.config_hash;
  j["corpus_hash"] = s.corpus_hash;
  j["bleu"] = s.bleu;
  j["rouge_l"] = s.rouge_l;
  j["trainable_params"] = s.trainable_params;
  j["bytes_per_round"] = s.bytes_per_round;
  j["rounds_to_stop"] = s.rounds_to_stop;
  j["best_round"] = s.best_round;
  j["best_val"] = s.best_val;
  if (s.has_prefix_cosine) j["prefix_cosine_mean"] = s.prefix_cosine_mean;
  j["seconds_total"] = s.seconds_total;
  j["failed"] = s.failed;
  if (s.failed) j["error"] = s.error;
  return j;
}

RunSummary summary_from_json(const json& j, const std::filesystem::path& dir) {
  RunSummary s;
  s.method = j.at("method").get<std::string>();
  s.setting = j.at("setting").get<std::string>();
  s.seed = j.at("seed").get<uint64_t>();
  s.config_hash = j.at("config_hash").get<std::string>();
  s.corpus_hash = j.at("corpus_hash").get<std::string>();
  s.bleu = j.at("bleu").get<double>();
  s.rouge_l = j.at("rouge_l").get<double>();
  s.trainable_params = j.at("trainable_params").get<int64_t>();
  s.bytes_per_round = j.at("bytes_per_round").get<int64_t>();
  s.rounds_to_stop = j.at("rounds_to_stop").get<int>();
  s.best_round = j.at("best_round").get<int>();
  s.best_val = j.at("best_val").get<double>();
  if (j.contains("prefix_cosine_mean")) {
    s.has_prefix_cosine = true;
    s.prefix_cosine_mean = j.at("prefix_cosine_mean").get<double>();
  }
  s.seconds_total = j.value("seconds_total", 0.0);
  s.failed = j.value("failed", false);
  s.error = j.value("error", "");
  s.run_dir = dir;
  const auto log = dir / "rounds.jsonl";
  if (std::filesystem::exists(log)) s.records = parse_round_log(log);
  return s;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  out << text;
}

struct SessionArtifacts {
  RunSummary summary;
};

// Runs one federated session and writes rounds.jsonl, best.ckpt and
// summary.json into `dir`.
SessionArtifacts run_one_session(const ExperimentConfig& cfg, const Strategy& strategy,
                                 const SessionData& data, const std::string& setting,
                                 const std::filesystem::path& dir,
                                 const std::vector<EvalItem>& full_eval,
                                 const std::string& corpus_hash, const ThreadPool& pool) {
  std::filesystem::create_directories(dir);
  SessionConfig scfg;
  scfg.seed = cfg.seed;
  scfg.max_rounds = cfg.max_rounds;
  scfg.patience = cfg.patience;
  scfg.opt = cfg.opt;
  scfg.agg = cfg.agg;

  RunSummary summary;
  summary.method = to_string(cfg.method);
  summary.setting = setting;
  summary.seed = cfg.seed;
  summary.config_hash = cfg.config_hash();
  summary.corpus_hash = corpus_hash;
  summary.run_dir = dir;

  std::string log_text;
  try {
    SessionResult result = train_session(strategy, data, scfg, pool);
    for (const auto& rec : result.records) {
      log_text += round_record_line(rec, summary.config_hash, cfg.seed);
      log_text += "\n";
    }
    write_text(dir / "rounds.jsonl", log_text);

    ordered_json extra;
    extra["config_hash"] = summary.config_hash;
    extra["seed"] = cfg.seed;
    extra["best_round"] = result.best_round;
    result.best_trainable.save(dir / "best.ckpt", extra);

    auto [bleu, rouge] = final_test_metrics(strategy, result.best_trainable, full_eval,
                                            cfg.eval_max_new, data.eos_id, pool);
    summary.bleu = bleu;
    summary.rouge_l = rouge;
    summary.rounds_to_stop = result.rounds_run;
    summary.best_round = result.best_round;
    summary.best_val = result.best_val;
    summary.records = result.records;
    summary.trainable_params = result.best_trainable.total_scalars();
    summary.bytes_per_round =
        static_cast<int64_t>(data.shards.size()) * 8 * summary.trainable_params;
    summary.seconds_total = static_cast<double>(result.total_macs) / 1e9;
    double cosine_acc = 0.0;
    int cosine_n = 0;
    for (const auto& rec : result.records) {
      if (rec.prefix_cosine) {
        cosine_acc += *rec.prefix_cosine;
        ++cosine_n;
      }
    }
    if (cosine_n > 0) {
      summary.has_prefix_cosine = true;
      summary.prefix_cosine_mean = cosine_acc / cosine_n;
    }
  } catch (const DivergenceError& e) {
    ordered_json err;
    err["error"] = e.what();
    err["config_hash"] = summary.config_hash;
    err["seed"] = cfg.seed;
    log_text += err.dump();
    log_text += "\n";
    write_text(dir / "rounds.jsonl", log_text);
    summary.failed = true;
    summary.error = e.what();
  }

  write_text(dir / "summary.json", summary_to_json(summary).dump(2) + "\n");
  return {summary};
}

}  // namespace

RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts) {
  const ThreadPool& pool = opts.pool ? *opts.pool : ThreadPool::global();
  const std::string name = cfg.name.empty() ? cfg.default_name() : cfg.name;
  const auto run_dir = cfg.out_root / name / ("s" + std::to_string(cfg.seed));

  RunResult result;
  result.run_dir = run_dir;

  if (opts.reuse_existing) {
    const auto top = run_dir / "summary.json";
    if (std::filesystem::exists(top)) {
      try {
        std::ifstream in(top);
        json j = json::parse(in);
        bool ok = true;
        std::vector<RunSummary> loaded;
        if (j.is_array()) {
          for (const auto& row : j) {
            RunSummary s = summary_from_json(
                row, run_dir / ("client" + std::to_string(loaded.size())));
            ok = ok && s.config_hash == cfg.config_hash() && !s.failed;
            loaded.push_back(std::move(s));
          }
        } else {
          RunSummary s = summary_from_json(j, run_dir);
          ok = s.config_hash == cfg.config_hash() && !s.failed;
          loaded.push_back(std::move(s));
        }
        if (ok && !loaded.empty()) {
          result.summaries = std::move(loaded);
          return result;
        }
      } catch (...) {
        // fall through and recompute
      }
    }
  }

  std::filesystem::create_directories(run_dir);

  Corpus target = generate_corpus(cfg.corpus);
  Corpus pretrain_corpus = pretrain_corpus_of(cfg);
  const std::string corpus_hash = corpus_hash_of(target);
  Tokenizer tk = build_tokenizer(target, pretrain_corpus);
  BackboneConfig bcfg = cfg.backbone;
  bcfg.vocab_size = tk.vocab_size();
  if (cfg.method == Method::FAT) bcfg.adapter_bottleneck = cfg.adapter_bottleneck;
  check_sequence_lengths(tk, target, bcfg.max_seq_len);
  check_sequence_lengths(tk, pretrain_corpus, bcfg.max_seq_len);

  Backbone model(bcfg);
  auto base = std::make_shared<ParameterSet>(pretrained_backbone(cfg, tk, pretrain_corpus, pool));
  base->set_trainable({});

  StrategySettings settings;
  settings.prefix = cfg.prefix;
  settings.adapter_bottleneck = cfg.adapter_bottleneck;
  settings.student = cfg.student;
  settings.distill = cfg.distill;
  auto strategy = make_strategy(cfg.method, model, base, settings);

  std::vector<TokenSequence> val;
  for (const auto& ex : target.val) val.push_back(tk.encode_example(ex));
  std::vector<EvalItem> round_eval =
      encode_eval(tk, target.test, static_cast<size_t>(cfg.eval_round_subset));
  std::vector<EvalItem> full_eval = encode_eval(tk, target.test, target.test.size());

  auto make_session_data = [&](std::vector<std::vector<TokenSequence>> shards) {
    SessionData data;
    data.shards = std::move(shards);
    data.val = val;
    data.round_eval = round_eval;
    data.eos_id = Tokenizer::kEos;
    data.max_new = cfg.eval_max_new;
    return data;
  };

  auto encode_shards = [&](const std::vector<Shard>& shards) {
    std::vector<std::vector<TokenSequence>> out;
    for (const auto& s : shards) {
      std::vector<TokenSequence> seqs;
      for (const auto& ex : s.examples) seqs.push_back(tk.encode_example(ex));
      out.push_back(std::move(seqs));
    }
    return out;
  };

  write_text(run_dir / "config.txt", cfg.raw.canonical_text());

  if (cfg.method == Method::CPT) {
    std::vector<TokenSequence> pooled;
    for (const auto& ex : target.train) pooled.push_back(tk.encode_example(ex));
    SessionData data = make_session_data({std::move(pooled)});
    auto art = run_one_session(cfg, *strategy, data, setting_of(cfg), run_dir, full_eval,
                               corpus_hash, pool);
    result.summaries.push_back(std::move(art.summary));
  } else if (cfg.method == Method::ClientOnly) {
    // one independent single-client session per shard, all evaluated on the
    // shared validation and test sets
    std::vector<Shard> shards =
        cfg.partition.kind == "noniid"
            ? partition_noniid(target.train, cfg.clients, cfg.partition.attribute,
                               cfg.partition.x, cfg.corpus.seed)
            : partition_iid(target.train, cfg.clients, cfg.corpus.seed, cfg.partition.attribute);
    auto encoded = encode_shards(shards);
    ordered_json rows = ordered_json::array();
    for (int k = 0; k < cfg.clients; ++k) {
      SessionData data = make_session_data({encoded[static_cast<size_t>(k)]});
      auto art = run_one_session(cfg, *strategy, data, "client" + std::to_string(k),
                                 run_dir / ("client" + std::to_string(k)), full_eval, corpus_hash,
                                 pool);
      rows.push_back(summary_to_json(art.summary));
      result.summaries.push_back(std::move(art.summary));
    }
    write_text(run_dir / "summary.json", rows.dump(2) + "\n");
  } else {
    std::vector<Shard> shards =
        cfg.partition.kind == "noniid"
            ? partition_noniid(target.train, cfg.clients, cfg.partition.attribute,
                               cfg.partition.x, cfg.corpus.seed)
            : partition_iid(target.train, cfg.clients, cfg.corpus.seed, cfg.partition.attribute);
    SessionData data = make_session_data(encode_shards(shards));
    auto art = run_one_session(cfg, *strategy, data, setting_of(cfg), run_dir, full_eval,
                               corpus_hash, pool);
    result.summaries.push_back(std::move(art.summary));
  }

  return result;
}

// ---------------------------------------------------------------------------
// Suites

namespace {

KeyValueConfig suite_base_config() {
  KeyValueConfig kv;
  kv.set("corpus.size", "1000");
  kv.set("corpus.seed", "7");
  kv.set("clients", "10");
  kv.set("rounds.max", "30");
  kv.set("rounds.patience", "3");
  kv.set("opt.batch_size", "8");
  kv.set("eval.round_subset", "48");
  return kv;
}

void set_method_defaults(KeyValueConfig& kv, const std::string& method) {
  kv.set("method", method);
  if (method == "fpt" || method == "cpt" || method == "client_only") {
    kv.set("opt.lr", "0.003");
  } else if (method == "ffft") {
    kv.set("opt.lr", "0.001");
  } else if (method == "fat") {
    kv.set("opt.lr", "0.003");
  } else if (method == "fkd") {
    kv.set("opt.lr", "0.002");
  }
}

}  // namespace

std::vector<std::pair<std::string, KeyValueConfig>> suite_recipes(const std::string& suite) {
  std::vector<std::pair<std::string, KeyValueConfig>> out;
  if (suite == "table2") {
    for (const std::string m : {"fpt", "cpt", "client_only"}) {
      KeyValueConfig kv = suite_base_config();
      set_method_defaults(kv, m);
      if (m == "cpt") {
        KeyValueConfig rebuilt;
        for (const auto& [k, v] : kv.items()) {
          if (k != "clients") rebuilt.set(k, v);
        }
        kv = rebuilt;
      }
      out.emplace_back(m, kv);
    }
  } else if (suite == "table3") {
    for (const std::string m : {"fpt", "ffft", "fat", "fkd"}) {
      KeyValueConfig kv = suite_base_config();
      set_method_defaults(kv, m);
      out.emplace_back(m, kv);
    }
  } else if (suite == "table4") {
    for (int clients : {10, 20, 30, 50}) {
      for (const std::string m : {"fpt", "fat", "fkd"}) {
        KeyValueConfig kv = suite_base_config();
        set_method_defaults(kv, m);
        kv.set("clients", std::to_string(clients));
        out.emplace_back(m + "-c" + std::to_string(clients), kv);
      }
    }
  } else if (suite == "table5") {
    for (int x : {40, 60, 80}) {
      for (const std::string m : {"fpt", "fat", "fkd"}) {
        KeyValueConfig kv = suite_base_config();
        set_method_defaults(kv, m);
        kv.set("partition.kind", "noniid");
        kv.set("partition.attribute", "food");
        kv.set("partition.x", std::to_string(x));
        out.emplace_back(m + "-x" + std::to_string(x), kv);
      }
    }
  } else {
    throw ConfigError("unknown suite '" + suite + "' (expected table2..table5)");
  }
  return out;
}

namespace {

struct CellStats {
  double mean = 0.0;
  double stddev = 0.0;
};

CellStats mean_std(const std::vector<double>& xs) {
  CellStats out;
  if (xs.empty()) return out;
  for (double x : xs) out.mean += x;
  out.mean /= static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double acc = 0.0;
    for (double x : xs) acc += (x - out.mean) * (x - out.mean);
    out.stddev = std::sqrt(acc / static_cast<double>(xs.size() - 1));
  }
  return out;
}

std::string fmt(double v, const char* spec = "%.3f") {
  char buf[64];
  std::snprintf(buf, sizeof(buf), spec, v);
  return buf;
}

}  // namespace

SuiteOutcome run_suite(const std::string& suite, const std::filesystem::path& out_root,
                       const std::vector<std::string>& overrides, const RunOptions& opts) {
  auto recipes = suite_recipes(suite);
  SuiteOutcome outcome;

  struct RowKey {
    std::string label;
    std::string setting;
    bool operator<(const RowKey& o) const {
      return std::tie(label, setting) < std::tie(o.label, o.setting);
    }
  };
  std::map<RowKey, std::vector<RunSummary>> rows;
  std::vector<RowKey> row_order;

  for (auto& [label, kv_base] : recipes) {
    for (uint64_t seed : kSuiteSeeds) {
      KeyValueConfig kv = kv_base;
      for (const auto& ov : overrides) kv.apply_override(ov);
      kv.set("seed", std::to_string(seed));
      kv.set("out", (out_root / suite).string());
      ExperimentConfig cfg = ExperimentConfig::from_kv(kv);
      try {
        RunResult run = run_experiment(cfg, opts);
        for (auto& summary : run.summaries) {
          RowKey key{label, summary.setting};
          if (!rows.count(key)) row_order.push_back(key);
          rows[key].push_back(summary);
          if (summary.failed) outcome.all_ok = false;
        }
      } catch (const std::exception& e) {
        RunSummary failed;
        failed.method = kv.get_string("method", "?");
        failed.setting = "seed" + std::to_string(seed);
        failed.seed = seed;
        failed.failed = true;
        failed.error = e.what();
        RowKey key{label, failed.setting};
        if (!rows.count(key)) row_order.push_back(key);
        rows[key].push_back(failed);
        outcome.all_ok = false;
      }
    }
  }

  // one corpus per table: refuse to mix rows over different corpora
  std::string corpus_hash;
  for (const auto& key : row_order) {
    for (const auto& s : rows[key]) {
      if (s.failed) continue;
      if (corpus_hash.empty()) corpus_hash = s.corpus_hash;
      if (s.corpus_hash != corpus_hash) {
        throw ConfigError("suite '" + suite + "' mixes corpus hashes " + corpus_hash + " and " +
                          s.corpus_hash);
      }
    }
  }

  std::string csv =
      "label,method,setting,seeds,bleu_mean,bleu_std,rouge_mean,rouge_std,trainable_params,"
      "bytes_per_round,rounds_mean,prefix_cosine_mean,config_hash,corpus_hash\n";
  for (const auto& key : row_order) {
    const auto& group = rows[key];
    bool any_failed = false;
    std::vector<double> bleus, rouges, rounds, cosines;
    for (const auto& s : group) {
      if (s.failed) {
        any_failed = true;
        continue;
      }
      bleus.push_back(s.bleu);
      rouges.push_back(s.rouge_l);
      rounds.push_back(s.rounds_to_stop);
      if (s.has_prefix_cosine) cosines.push_back(s.prefix_cosine_mean);
    }
    const RunSummary& first = group.front();
    csv += key.label + "," + first.method + "," + key.setting + "," +
           std::to_string(group.size()) + ",";
    if (any_failed || bleus.empty()) {
      csv += "FAIL,FAIL,FAIL,FAIL,";
      outcome.all_ok = false;
    } else {
      CellStats b = mean_std(bleus), r = mean_std(rouges);
      csv += fmt(b.mean) + "," + fmt(b.stddev) + "," + fmt(r.mean) + "," + fmt(r.stddev) + ",";
    }
    csv += std::to_string(first.trainable_params) + "," + std::to_string(first.bytes_per_round) +
           ",";
    csv += (rounds.empty() ? "FAIL" : fmt(mean_std(rounds).mean, "%.2f")) + ",";
    csv += (cosines.empty() ? "" : fmt(mean_std(cosines).mean, "%.6f")) + ",";
    csv += first.config_hash + "," + (first.failed ? "" : first.corpus_hash) + "\n";
  }

  std::filesystem::create_directories(out_root);
  outcome.csv_path = out_root / (suite + ".csv");
  write_text(outcome.csv_path, csv);
  outcome.csv_text = csv;
  return outcome;
}

// ---------------------------------------------------------------------------
// Plot data

std::string emit_plotdata(const std::filesystem::path& dir) {
  std::string csv = "series,round,val_loss,bleu\n";
  std::vector<std::filesystem::path> logs;
  if (std::filesystem::exists(dir)) {
    for (const auto& entry : std::filesystem::recursive_directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().filename() == "rounds.jsonl") {
        logs.push_back(entry.path());
      }
    }
  }
  std::sort(logs.begin(), logs.end());
  for (const auto& log : logs) {
    std::string config_hash;
    uint64_t seed = 0;
    std::vector<RoundRecord> records;
    try {
      records = parse_round_log(log, &config_hash, &seed);
    } catch (...) {
      continue;
    }
    const std::string series = config_hash + "-s" + std::to_string(seed);
    for (const auto& rec : records) {
      csv += series + "," + std::to_string(rec.round) + "," + fmt(rec.val_loss, "%.6f") + "," +
             fmt(rec.bleu, "%.3f") + "\n";
    }
  }
  return csv;
}

}  // namespace fedcustom
