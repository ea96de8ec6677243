// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedcustom/tensor.hpp"

namespace fedcustom {

struct BackboneConfig {
  int n_layers = 2;
  int n_heads = 4;
  int model_dim = 64;
  int ff_dim = 256;
  int vocab_size = 300;
  int max_seq_len = 96;
  std::optional<int> adapter_bottleneck;

  int head_dim() const { return model_dim / n_heads; }
  void validate() const;
  nlohmann::json to_json() const;
  static BackboneConfig from_json(const nlohmann::json& j);
};

enum class ParamGroup { backbone, adapter, head, prefix };
const char* to_string(ParamGroup g);
ParamGroup param_group_from_string(const std::string& s);

// Named map of tensors with group tags. Iteration is always in sorted name
// order, which fixes every reduction order downstream.
class ParameterSet {
 public:
  struct Entry {
    ParamGroup group;
    Tensor tensor;
  };

  void insert(const std::string& name, ParamGroup group, Tensor t);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const { return entries_.count(name) > 0; }
  ParamGroup group_of(const std::string& name) const;

  const std::map<std::string, Entry>& entries() const { return entries_; }
  size_t size() const { return entries_.size(); }
  std::vector<std::string> names() const;

  int64_t total_scalars() const;
  int64_t trainable_scalars() const;
  std::vector<std::string> trainable_names() const;

  // Deep copy; value buffers are independent afterwards.
  ParameterSet clone() const;
  // Copies values entrywise; name sets must match exactly.
  void copy_values_from(const ParameterSet& other);

  // Marks entries in `groups` trainable and everything else frozen.
  // Gradients then flow only into the trainable entries.
  void set_trainable(const std::set<ParamGroup>& groups);
  void zero_grads();
  bool all_finite() const;

  // Self-describing binary container: json header (entry table + extra),
  // then raw little-endian 64-bit values. Round-trips bit-exactly.
  void save(const std::filesystem::path& path, const nlohmann::json& extra = {}) const;
  static ParameterSet load(const std::filesystem::path& path, nlohmann::json* extra_out = nullptr);

 private:
  std::map<std::string, Entry> entries_;
};

// Per-layer, per-head key/value rows injected ahead of the real sequence in
// attention. Prefix slots carry no positional embedding and are visible to
// every query position.
struct KVPrefix {
  int prefix_len = 0;
  std::vector<std::vector<Tensor>> keys;    // [layer][head], each [p x head_dim]
  std::vector<std::vector<Tensor>> values;  // [layer][head], each [p x head_dim]

  KVPrefix() = default;
  KVPrefix(int p, const BackboneConfig& cfg);
  // Flattened keys-then-values concatenation, layer-major then head-major.
  std::vector<double> flatten() const;
};

// Bottleneck adapters, one after the attention sublayer and one after the
// feed-forward sublayer of each layer. Tensors are views into the owning
// ParameterSet.
struct AdapterSet {
  struct Adapter {
    Tensor down_w, down_b, up_w, up_b;
  };
  int bottleneck = 0;
  std::vector<Adapter> attn;  // size n_layers
  std::vector<Adapter> ff;    // size n_layers
};

// One linearized training sequence: MR tokens then SEP at sep_index, then
// text tokens, then EOS.
struct TokenSequence {
  std::vector<int> tokens;
  int sep_index = 0;
};

struct ForwardResult {
  Tensor logits;                // [T x vocab]
  std::vector<Tensor> hidden;   // per-layer block outputs + final normed state
};

// Decoder-only transformer with causal self-attention, pre-norm residual
// blocks, learned absolute positions over real tokens only, optional KV
// prefix injection and optional adapters. The output head is untied.
class Backbone {
 public:
  explicit Backbone(BackboneConfig cfg);

  const BackboneConfig& config() const { return cfg_; }

  // Fresh backbone+head parameters (groups: backbone, head).
  ParameterSet init_params(Rng& rng) const;

  ForwardResult forward(Graph& g, const ParameterSet& params, std::span<const int> tokens,
                        const KVPrefix* prefix = nullptr, const AdapterSet* adapters = nullptr,
                        bool want_hidden = false) const;

  // Mean over sequences of the per-sequence mean next-token cross-entropy,
  // counting only positions whose target lies after SEP.
  Tensor lm_loss(Graph& g, const ParameterSet& params, std::span<const TokenSequence> batch,
                 const KVPrefix* prefix = nullptr, const AdapterSet* adapters = nullptr) const;

  // Deterministic argmax decoding; ties break toward the lowest token id.
  // Stops at eos_id, max_new tokens, or the context limit. `macs`, when
  // given, accumulates the multiply-accumulate count of the decode.
  std::vector<int> greedy_decode(const ParameterSet& params, std::span<const int> mr_tokens,
                                 const KVPrefix* prefix, const AdapterSet* adapters, int max_new,
                                 int eos_id, uint64_t* macs = nullptr) const;

  static constexpr double kLayerNormEps = 1e-5;
  static constexpr int kIgnoreIndex = -1;

 private:
  Tensor causal_mask(int64_t t, int64_t p) const;
  BackboneConfig cfg_;
};

}  // namespace fedcustom
