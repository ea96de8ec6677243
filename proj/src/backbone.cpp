// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace fedcustom {

void BackboneConfig::validate() const {
  if (n_layers < 1 || n_heads < 1 || model_dim < 1 || ff_dim < 1 || vocab_size < 2 ||
      max_seq_len < 2) {
    throw ConfigError("backbone config: extents must be positive");
  }
  if (model_dim % n_heads != 0) {
    throw ConfigError("backbone config: model_dim " + std::to_string(model_dim) +
                      " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (adapter_bottleneck && *adapter_bottleneck < 1) {
    throw ConfigError("backbone config: adapter_bottleneck must be positive");
  }
}

nlohmann::json BackboneConfig::to_json() const {
  nlohmann::json j{{"n_layers", n_layers},   {"n_heads", n_heads},
                   {"model_dim", model_dim}, {"ff_dim", ff_dim},
                   {"vocab_size", vocab_size}, {"max_seq_len", max_seq_len}};
  if (adapter_bottleneck) j["adapter_bottleneck"] = *adapter_bottleneck;
  return j;
}

BackboneConfig BackboneConfig::from_json(const nlohmann::json& j) {
  BackboneConfig c;
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.model_dim = j.at("model_dim").get<int>();
  c.ff_dim = j.at("ff_dim").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  if (j.contains("adapter_bottleneck")) c.adapter_bottleneck = j.at("adapter_bottleneck").get<int>();
  return c;
}

const char* to_string(ParamGroup g) {
  switch (g) {
    case ParamGroup::backbone: return "backbone";
    case ParamGroup::adapter: return "adapter";
    case ParamGroup::head: return "head";
    case ParamGroup::prefix: return "prefix";
  }
  return "?";
}

ParamGroup param_group_from_string(const std::string& s) {
  if (s == "backbone") return ParamGroup::backbone;
  if (s == "adapter") return ParamGroup::adapter;
  if (s == "head") return ParamGroup::head;
  if (s == "prefix") return ParamGroup::prefix;
  throw ConfigError("unknown parameter group '" + s + "'");
}

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::insert(const std::string& name, ParamGroup group, Tensor t) {
  if (entries_.count(name)) throw ConfigError("parameter '" + name + "' inserted twice");
  entries_.emplace(name, Entry{group, std::move(t)});
}

const Tensor& ParameterSet::at(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("no parameter named '" + name + "'");
  return it->second.tensor;
}

Tensor& ParameterSet::at(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("no parameter named '" + name + "'");
  return it->second.tensor;
}

ParamGroup ParameterSet::group_of(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw ConfigError("no parameter named '" + name + "'");
  return it->second.group;
}

std::vector<std::string> ParameterSet::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

int64_t ParameterSet::total_scalars() const {
  int64_t n = 0;
  for (const auto& [name, e] : entries_) n += e.tensor.numel();
  return n;
}

int64_t ParameterSet::trainable_scalars() const {
  int64_t n = 0;
  for (const auto& [name, e] : entries_) {
    if (e.tensor.requires_grad()) n += e.tensor.numel();
  }
  return n;
}

std::vector<std::string> ParameterSet::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) {
    if (e.tensor.requires_grad()) out.push_back(name);
  }
  return out;
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& [name, e] : entries_) out.insert(name, e.group, e.tensor.clone());
  return out;
}

void ParameterSet::copy_values_from(const ParameterSet& other) {
  if (other.entries_.size() != entries_.size()) {
    throw ConfigError("copy_values_from: entry count mismatch");
  }
  auto it = entries_.begin();
  auto ot = other.entries_.begin();
  for (; it != entries_.end(); ++it, ++ot) {
    if (it->first != ot->first) {
      throw ConfigError("copy_values_from: name mismatch at '" + it->first + "'");
    }
    it->second.tensor.copy_values_from(ot->second.tensor);
  }
}

void ParameterSet::set_trainable(const std::set<ParamGroup>& groups) {
  for (auto& [name, e] : entries_) e.tensor.set_requires_grad(groups.count(e.group) > 0);
}

void ParameterSet::zero_grads() {
  for (auto& [name, e] : entries_) e.tensor.zero_grad();
}

bool ParameterSet::all_finite() const {
  for (const auto& [name, e] : entries_) {
    if (!e.tensor.all_finite()) return false;
  }
  return true;
}

namespace {
constexpr char kCheckpointMagic[4] = {'F', 'C', 'P', 'K'};
constexpr uint32_t kCheckpointVersion = 1;
}  // namespace

void ParameterSet::save(const std::filesystem::path& path, const nlohmann::json& extra) const {
  nlohmann::json header;
  header["extra"] = extra;
  auto& table = header["entries"] = nlohmann::json::array();
  for (const auto& [name, e] : entries_) {
    table.push_back({{"name", name},
                     {"group", to_string(e.group)},
                     {"shape", e.tensor.shape()},
                     {"trainable", e.tensor.requires_grad()}});
  }
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw InputError("cannot open checkpoint for writing: " + path.string());
  out.write(kCheckpointMagic, 4);
  const uint32_t ver = kCheckpointVersion;
  out.write(reinterpret_cast<const char*>(&ver), sizeof(ver));
  const uint64_t hlen = hs.size();
  out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  // values are raw 64-bit little-endian; this targets little-endian hosts
  for (const auto& [name, e] : entries_) {
    auto v = e.tensor.values();
    out.write(reinterpret_cast<const char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(double)));
  }
  if (!out) throw InputError("short write to checkpoint: " + path.string());
}

ParameterSet ParameterSet::load(const std::filesystem::path& path, nlohmann::json* extra_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open checkpoint: " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw InputError("not a parameter checkpoint: " + path.string());
  }
  uint32_t ver = 0;
  in.read(reinterpret_cast<char*>(&ver), sizeof(ver));
  if (ver != kCheckpointVersion) throw InputError("unsupported checkpoint version");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
  std::string hs(hlen, '\0');
  in.read(hs.data(), static_cast<std::streamsize>(hlen));
  nlohmann::json header = nlohmann::json::parse(hs);
  if (extra_out) *extra_out = header.value("extra", nlohmann::json{});
  ParameterSet out;
  for (const auto& row : header.at("entries")) {
    Shape shape = row.at("shape").get<Shape>();
    Tensor t = Tensor::zeros(shape, false);
    auto v = t.values();
    in.read(reinterpret_cast<char*>(v.data()),
            static_cast<std::streamsize>(v.size() * sizeof(double)));
    if (!in) throw InputError("truncated checkpoint: " + path.string());
    if (row.value("trainable", false)) t.set_requires_grad(true);
    out.insert(row.at("name").get<std::string>(),
               param_group_from_string(row.at("group").get<std::string>()), std::move(t));
  }
  return out;
}

// ---------------------------------------------------------------------------
// KVPrefix

KVPrefix::KVPrefix(int p, const BackboneConfig& cfg) {
  if (p < 1) throw ConfigError("prefix length must be at least 1, got " + std::to_string(p));
  cfg.validate();
  prefix_len = p;
  keys.resize(static_cast<size_t>(cfg.n_layers));
  values.resize(static_cast<size_t>(cfg.n_layers));
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (int h = 0; h < cfg.n_heads; ++h) {
      keys[static_cast<size_t>(l)].push_back(Tensor::zeros({p, cfg.head_dim()}));
      values[static_cast<size_t>(l)].push_back(Tensor::zeros({p, cfg.head_dim()}));
    }
  }
}

std::vector<double> KVPrefix::flatten() const {
  std::vector<double> out;
  for (const auto& per_layer : keys) {
    for (const auto& t : per_layer) out.insert(out.end(), t.values().begin(), t.values().end());
  }
  for (const auto& per_layer : values) {
    for (const auto& t : per_layer) out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Backbone

Backbone::Backbone(BackboneConfig cfg) : cfg_(cfg) { cfg_.validate(); }

ParameterSet Backbone::init_params(Rng& rng) const {
  const double std = 0.05;
  const int d = cfg_.model_dim;
  ParameterSet p;
  p.insert("embed.tok", ParamGroup::backbone, Tensor::randn({cfg_.vocab_size, d}, rng, std));
  p.insert("embed.pos", ParamGroup::backbone, Tensor::randn({cfg_.max_seq_len, d}, rng, std));
  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    p.insert(pre + "ln1.g", ParamGroup::backbone, Tensor::full({d}, 1.0));
    p.insert(pre + "ln1.b", ParamGroup::backbone, Tensor::zeros({d}));
    for (const char* w : {"wq", "wk", "wv", "wo"}) {
      p.insert(pre + "attn." + w, ParamGroup::backbone, Tensor::randn({d, d}, rng, std));
    }
    for (const char* b : {"bq", "bk", "bv", "bo"}) {
      p.insert(pre + "attn." + b, ParamGroup::backbone, Tensor::zeros({d}));
    }
    p.insert(pre + "ln2.g", ParamGroup::backbone, Tensor::full({d}, 1.0));
    p.insert(pre + "ln2.b", ParamGroup::backbone, Tensor::zeros({d}));
    p.insert(pre + "ff.w1", ParamGroup::backbone, Tensor::randn({d, cfg_.ff_dim}, rng, std));
    p.insert(pre + "ff.b1", ParamGroup::backbone, Tensor::zeros({cfg_.ff_dim}));
    p.insert(pre + "ff.w2", ParamGroup::backbone, Tensor::randn({cfg_.ff_dim, d}, rng, std));
    p.insert(pre + "ff.b2", ParamGroup::backbone, Tensor::zeros({d}));
  }
  p.insert("final.ln.g", ParamGroup::backbone, Tensor::full({d}, 1.0));
  p.insert("final.ln.b", ParamGroup::backbone, Tensor::zeros({d}));
  p.insert("head.w", ParamGroup::head, Tensor::randn({d, cfg_.vocab_size}, rng, std));
  p.insert("head.b", ParamGroup::head, Tensor::zeros({cfg_.vocab_size}));
  return p;
}

Tensor Backbone::causal_mask(int64_t t, int64_t p) const {
  // 0 where attention is allowed, -1e30 where it is not. Every query sees
  // all p prefix slots; among real positions the mask is lower-triangular.
  Tensor m = Tensor::zeros({t, p + t});
  auto mv = m.values();
  for (int64_t i = 0; i < t; ++i) {
    for (int64_t j = p + i + 1; j < p + t; ++j) mv[static_cast<size_t>(i * (p + t) + j)] = -1e30;
  }
  return m;
}

ForwardResult Backbone::forward(Graph& g, const ParameterSet& params, std::span<const int> tokens,
                                const KVPrefix* prefix, const AdapterSet* adapters,
                                bool want_hidden) const {
  if (tokens.empty()) throw InputError("forward: empty token sequence");
  const int64_t t = static_cast<int64_t>(tokens.size());
  if (t > cfg_.max_seq_len) {
    throw InputError("forward: sequence of " + std::to_string(t) + " tokens exceeds max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  }
  for (int tok : tokens) {
    if (tok < 0 || tok >= cfg_.vocab_size) {
      throw InputError("forward: token " + std::to_string(tok) + " outside vocab of " +
                       std::to_string(cfg_.vocab_size));
    }
  }
  if (prefix) {
    if (static_cast<int>(prefix->keys.size()) != cfg_.n_layers ||
        prefix->keys.at(0).size() != static_cast<size_t>(cfg_.n_heads) ||
        prefix->keys.at(0).at(0).cols() != cfg_.head_dim()) {
      throw ConfigError("forward: prefix shape does not match backbone config");
    }
  }
  if (adapters && (static_cast<int>(adapters->attn.size()) != cfg_.n_layers ||
                   static_cast<int>(adapters->ff.size()) != cfg_.n_layers)) {
    throw ConfigError("forward: adapter set does not match layer count");
  }

  const int64_t p = prefix ? prefix->prefix_len : 0;
  const int dh = cfg_.head_dim();

  std::vector<int> positions(tokens.size());
  for (size_t i = 0; i < tokens.size(); ++i) positions[i] = static_cast<int>(i);

  ForwardResult res;
  Tensor x = g.add(g.embedding(params.at("embed.tok"), tokens),
                   g.embedding(params.at("embed.pos"), positions));
  Tensor mask = causal_mask(t, p);

  auto apply_adapter = [&](const AdapterSet::Adapter& a, const Tensor& h) {
    Tensor mid = g.relu(g.add_rowwise(g.matmul(h, a.down_w), a.down_b));
    return g.add(h, g.add_rowwise(g.matmul(mid, a.up_w), a.up_b));
  };

  for (int l = 0; l < cfg_.n_layers; ++l) {
    const std::string pre = "layer" + std::to_string(l) + ".";
    Tensor h = g.layer_norm(x, params.at(pre + "ln1.g"), params.at(pre + "ln1.b"), kLayerNormEps);
    Tensor q = g.add_rowwise(g.matmul(h, params.at(pre + "attn.wq")), params.at(pre + "attn.bq"));
    Tensor k = g.add_rowwise(g.matmul(h, params.at(pre + "attn.wk")), params.at(pre + "attn.bk"));
    Tensor v = g.add_rowwise(g.matmul(h, params.at(pre + "attn.wv")), params.at(pre + "attn.bv"));

    std::vector<Tensor> head_out;
    head_out.reserve(static_cast<size_t>(cfg_.n_heads));
    for (int hd = 0; hd < cfg_.n_heads; ++hd) {
      Tensor qh = g.slice_cols(q, hd * dh, dh);
      Tensor kh = g.slice_cols(k, hd * dh, dh);
      Tensor vh = g.slice_cols(v, hd * dh, dh);
      if (prefix) {
        kh = g.concat_rows(prefix->keys[static_cast<size_t>(l)][static_cast<size_t>(hd)], kh);
        vh = g.concat_rows(prefix->values[static_cast<size_t>(l)][static_cast<size_t>(hd)], vh);
      }
      Tensor scores =
          g.scale(g.matmul(qh, g.transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
      scores = g.add(scores, mask);
      Tensor probs = g.softmax_rows(scores);
      head_out.push_back(g.matmul(probs, vh));
    }
    Tensor att = g.concat_cols(head_out);
    att = g.add_rowwise(g.matmul(att, params.at(pre + "attn.wo")), params.at(pre + "attn.bo"));
    if (adapters) att = apply_adapter(adapters->attn[static_cast<size_t>(l)], att);
    x = g.add(x, att);

    Tensor h2 = g.layer_norm(x, params.at(pre + "ln2.g"), params.at(pre + "ln2.b"), kLayerNormEps);
    Tensor ff = g.add_rowwise(
        g.matmul(g.gelu(g.add_rowwise(g.matmul(h2, params.at(pre + "ff.w1")),
                                      params.at(pre + "ff.b1"))),
                 params.at(pre + "ff.w2")),
        params.at(pre + "ff.b2"));
    if (adapters) ff = apply_adapter(adapters->ff[static_cast<size_t>(l)], ff);
    x = g.add(x, ff);
    if (want_hidden) res.hidden.push_back(x);
  }

  Tensor fin = g.layer_norm(x, params.at("final.ln.g"), params.at("final.ln.b"), kLayerNormEps);
  if (want_hidden) res.hidden.push_back(fin);
  res.logits = g.add_rowwise(g.matmul(fin, params.at("head.w")), params.at("head.b"));
  return res;
}

Tensor Backbone::lm_loss(Graph& g, const ParameterSet& params,
                         std::span<const TokenSequence> batch, const KVPrefix* prefix,
                         const AdapterSet* adapters) const {
  if (batch.empty()) throw InputError("lm_loss: empty batch");
  std::vector<Tensor> losses;
  losses.reserve(batch.size());
  for (const auto& seq : batch) {
    const int64_t t = static_cast<int64_t>(seq.tokens.size());
    if (t < 2 || seq.sep_index < 0 || seq.sep_index >= t - 1) {
      throw InputError("lm_loss: sequence must hold MR + SEP + text + EOS");
    }
    std::span<const int> inputs(seq.tokens.data(), static_cast<size_t>(t - 1));
    std::vector<int> targets(static_cast<size_t>(t - 1));
    for (int64_t i = 0; i + 1 < t; ++i) {
      // positions whose target is SEP or earlier belong to the MR portion
      targets[static_cast<size_t>(i)] =
          (i + 1 <= seq.sep_index) ? kIgnoreIndex : seq.tokens[static_cast<size_t>(i + 1)];
    }
    ForwardResult out = forward(g, params, inputs, prefix, adapters);
    losses.push_back(g.cross_entropy(out.logits, targets, kIgnoreIndex));
  }
  return g.mean_of(losses);
}

std::vector<int> Backbone::greedy_decode(const ParameterSet& params,
                                         std::span<const int> mr_tokens, const KVPrefix* prefix,
                                         const AdapterSet* adapters, int max_new, int eos_id,
                                         uint64_t* macs) const {
  if (mr_tokens.empty()) throw InputError("greedy_decode: empty context");
  std::vector<int> ctx(mr_tokens.begin(), mr_tokens.end());
  std::vector<int> out;
  for (int step = 0; step < max_new; ++step) {
    if (static_cast<int>(ctx.size()) >= cfg_.max_seq_len) break;
    Graph g(false);
    ForwardResult fr = forward(g, params, ctx, prefix, adapters);
    if (macs) *macs += g.mac_count();
    const int64_t last = fr.logits.rows() - 1;
    int best = 0;
    double best_val = fr.logits(last, 0);
    for (int64_t j = 1; j < fr.logits.cols(); ++j) {
      const double v = fr.logits(last, j);
      if (v > best_val) {
        best_val = v;
        best = static_cast<int>(j);
      }
    }
    if (best == eos_id) break;
    out.push_back(best);
    ctx.push_back(best);
  }
  return out;
}

}  // namespace fedcustom
