// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedcustom/backbone.hpp"
#include "fedcustom/rng.hpp"

namespace fedcustom {

// Restaurant-domain meaning representation with eight slots. The generator
// only emits values from the closed vocabularies below; the file loaders
// accept free-form values.
struct MeaningRepresentation {
  std::optional<std::string> name, eat_type, food, price_range, customer_rating, area,
      family_friendly, near;

  static constexpr int kSlotCount = 8;
  static const std::array<std::string, kSlotCount>& slot_keys();
  const std::optional<std::string>& slot(int i) const;
  std::optional<std::string>& slot(int i);
  const std::optional<std::string>& slot(const std::string& key) const;
  std::optional<std::string>& slot(const std::string& key);

  // "name[ Alimentum ] food[ Italian ]" over present slots in canonical order
  std::string linearize() const;
};

// Closed slot vocabularies used by the generator.
const std::map<std::string, std::vector<std::string>>& slot_vocabularies();

struct Example {
  MeaningRepresentation mr;
  std::string text;      // space-delimited tokens, punctuation included
  int source_tag = 0;    // template-family id, the DART-style source marker
};

// One surface-form family; `requires_slot` (when set) restricts which MRs it
// can realize.
struct TemplateFamily {
  int id = 0;
  std::optional<std::string> requires_slot;
  std::function<std::string(const MeaningRepresentation&, Rng&)> realize;
};

struct TemplateBank {
  std::vector<TemplateFamily> families;
  static const TemplateBank& standard();
  int family_count() const { return static_cast<int>(families.size()); }
};

struct CorpusConfig {
  uint64_t seed = 7;
  int size = 1000;
  std::vector<int> template_families;                      // empty = all families
  std::map<std::string, std::vector<double>> slot_weights; // per-slot value weights
  std::map<std::string, double> slot_presence;             // optional-slot presence probability
};

struct Corpus {
  std::vector<Example> train, val, test;  // 80/10/10 split
};

// Deterministic under (config, bank); every generated text contains every
// present slot value verbatim.
Corpus generate_corpus(const CorpusConfig& cfg, const TemplateBank& bank = TemplateBank::standard());

// Word-level tokenizer over the training split plus the specials
// {PAD, BOS, SEP, EOS, UNK} and the slot-delimiter tokens "slot[" and "]".
class Tokenizer {
 public:
  static constexpr int kPad = 0, kBos = 1, kSep = 2, kEos = 3, kUnk = 4;

  static Tokenizer build(std::span<const Example> train_split);

  int vocab_size() const { return static_cast<int>(id_to_text_.size()); }
  int token_id(const std::string& word) const;  // kUnk when absent
  const std::string& token_text(int id) const;

  std::vector<int> tokenize_text(const std::string& text) const;
  std::string detokenize(std::span<const int> ids) const;

  // MR tokens in canonical slot order, ending with SEP.
  std::vector<int> linearize_mr(const MeaningRepresentation& mr) const;
  // mr-tokens + SEP + text-tokens + EOS, sep_index at the SEP position.
  TokenSequence encode_example(const Example& ex) const;

 private:
  std::map<std::string, int> text_to_id_;
  std::vector<std::string> id_to_text_;
};

struct Shard {
  int client_id = 0;
  std::vector<Example> examples;
  std::map<std::string, int> attribute_histogram;
  std::string assigned_value;  // non-IID only: the concentrated attribute value
};

// Attribute value used by the partitioners; `attribute` is a slot key or
// "source" (the template-family tag). Absent slots read as "-".
std::string attribute_value(const Example& ex, const std::string& attribute);

// Equal random split, stratified by `attribute` so per-shard histograms stay
// close to the global marginal. Shard sizes differ by at most one.
std::vector<Shard> partition_iid(std::span<const Example> train, int n_clients, uint64_t seed,
                                 const std::string& attribute = "food");

// Client k draws x% of its shard from its assigned attribute value (values
// assigned cyclically) and the rest uniformly from the remaining values.
// Requires equal shard sizes.
std::vector<Shard> partition_noniid(std::span<const Example> train, int n_clients,
                                    const std::string& attribute, double x_percent, uint64_t seed);

// Corpus files: one example per line, "linearized-MR \t reference-text".
void save_corpus(const std::filesystem::path& path, std::span<const Example> examples);
std::vector<Example> load_corpus(const std::filesystem::path& path);

// Loader for the original E2E csv form: mr,ref with quoted fields and
// "slot[value], slot[value]" meaning representations.
std::vector<Example> load_e2e_csv(const std::filesystem::path& path);
MeaningRepresentation parse_e2e_mr(const std::string& mr_field);

}  // namespace fedcustom
