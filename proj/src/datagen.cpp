// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/datagen.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

namespace fedcustom {

namespace {

const std::array<std::string, MeaningRepresentation::kSlotCount> kSlotKeys = {
    "name",           "eat_type", "food", "price_range",
    "customer_rating", "area",     "family_friendly", "near"};

std::vector<std::string> split_words(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  std::string w;
  while (is >> w) out.push_back(w);
  return out;
}

std::string article_for(const std::string& word) {
  if (word.empty()) return "a";
  switch (word[0]) {
    case 'A': case 'E': case 'I': case 'O': case 'U':
    case 'a': case 'e': case 'i': case 'o': case 'u':
      return "an";
    default:
      return "a";
  }
}

}  // namespace

const std::array<std::string, MeaningRepresentation::kSlotCount>&
MeaningRepresentation::slot_keys() {
  return kSlotKeys;
}

const std::optional<std::string>& MeaningRepresentation::slot(int i) const {
  switch (i) {
    case 0: return name;
    case 1: return eat_type;
    case 2: return food;
    case 3: return price_range;
    case 4: return customer_rating;
    case 5: return area;
    case 6: return family_friendly;
    case 7: return near;
  }
  throw ConfigError("slot index out of range");
}

std::optional<std::string>& MeaningRepresentation::slot(int i) {
  return const_cast<std::optional<std::string>&>(
      static_cast<const MeaningRepresentation*>(this)->slot(i));
}

const std::optional<std::string>& MeaningRepresentation::slot(const std::string& key) const {
  for (int i = 0; i < kSlotCount; ++i) {
    if (kSlotKeys[static_cast<size_t>(i)] == key) return slot(i);
  }
  throw ConfigError("unknown slot '" + key + "'");
}

std::optional<std::string>& MeaningRepresentation::slot(const std::string& key) {
  return const_cast<std::optional<std::string>&>(
      static_cast<const MeaningRepresentation*>(this)->slot(key));
}

std::string MeaningRepresentation::linearize() const {
  std::string out;
  for (int i = 0; i < kSlotCount; ++i) {
    const auto& v = slot(i);
    if (!v) continue;
    if (!out.empty()) out += " ";
    out += kSlotKeys[static_cast<size_t>(i)] + "[ " + *v + " ]";
  }
  return out;
}

const std::map<std::string, std::vector<std::string>>& slot_vocabularies() {
  static const std::map<std::string, std::vector<std::string>> vocab = {
      {"name",
       {"Alimentum", "Aromi", "Bibimbap", "Clowns", "Cocum", "Cotto", "Fitzbillies", "Giraffe",
        "Goldenrod", "Harborview", "Lanterns", "Midsummer", "Oakleaf", "Pearwood", "Quietwater",
        "Strada", "Taverna", "Thistle", "Vineyard", "Waterfront", "Wildwood", "Zizzi"}},
      {"eat_type", {"restaurant", "pub", "coffee shop"}},
      {"food", {"Italian", "French", "Chinese", "Indian", "English"}},
      {"price_range", {"cheap", "moderate", "expensive"}},
      {"customer_rating", {"low", "average", "high"}},
      {"area", {"city centre", "riverside"}},
      {"family_friendly", {"family friendly", "not family friendly"}},
      {"near", {"Raja", "Ranch", "Arena", "Harbour", "Museum", "Station", "Bakery", "Cinema"}},
  };
  return vocab;
}

// ---------------------------------------------------------------------------
// Template bank

namespace {

std::string et_or_place(const MeaningRepresentation& mr) {
  return mr.eat_type ? *mr.eat_type : "place";
}

// trailing clauses shared by most families
std::string rating_sentence(const MeaningRepresentation& mr, int variant) {
  if (!mr.customer_rating) return "";
  if (variant == 0) return "It has a " + *mr.customer_rating + " customer rating . ";
  return "Customers rate it " + *mr.customer_rating + " . ";
}

std::string price_sentence(const MeaningRepresentation& mr, int variant) {
  if (!mr.price_range) return "";
  if (variant == 0) return "It has a " + *mr.price_range + " price range . ";
  return "Prices are " + *mr.price_range + " . ";
}

std::string family_sentence(const MeaningRepresentation& mr) {
  if (!mr.family_friendly) return "";
  return "It is " + *mr.family_friendly + " . ";
}

std::string et_sentence(const MeaningRepresentation& mr) {
  if (!mr.eat_type) return "";
  return "It is " + article_for(*mr.eat_type) + " " + *mr.eat_type + " . ";
}

std::string place_clauses(const MeaningRepresentation& mr) {
  std::string out;
  if (mr.area) out += " in the " + *mr.area;
  if (mr.near) out += " near the " + *mr.near;
  return out;
}

std::string trim_spaces(std::string s) {
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

TemplateBank build_standard_bank() {
  TemplateBank bank;

  bank.families.push_back({0, std::nullopt, [](const MeaningRepresentation& mr, Rng& rng) {
    const int v1 = static_cast<int>(rng.uniform_int(2));
    const int v2 = static_cast<int>(rng.uniform_int(2));
    std::string s = *mr.name + " is " + article_for(*mr.food) + " " + *mr.food + " " +
                    et_or_place(mr) + place_clauses(mr) + " . ";
    if (mr.customer_rating && mr.price_range && v1 == 0) {
      s += "It has a " + *mr.customer_rating + " customer rating and a " + *mr.price_range +
           " price range . ";
    } else {
      s += rating_sentence(mr, v1);
      s += price_sentence(mr, v2);
    }
    s += family_sentence(mr);
    return trim_spaces(s);
  }});

  bank.families.push_back({1, std::nullopt, [](const MeaningRepresentation& mr, Rng& rng) {
    const int v1 = static_cast<int>(rng.uniform_int(2));
    std::string s = "There is " + article_for(*mr.food) + " " + *mr.food + " " + et_or_place(mr) +
                    " called " + *mr.name + place_clauses(mr) + " . ";
    s += rating_sentence(mr, v1);
    s += price_sentence(mr, 1 - v1);
    s += family_sentence(mr);
    return trim_spaces(s);
  }});

  bank.families.push_back({2, std::nullopt, [](const MeaningRepresentation& mr, Rng& rng) {
    const int v1 = static_cast<int>(rng.uniform_int(2));
    std::string s = *mr.name + " serves " + *mr.food + " food";
    if (mr.price_range && v1 == 0) s += " at a " + *mr.price_range + " price range";
    s += place_clauses(mr);
    s += " . ";
    s += et_sentence(mr);
    if (!(mr.price_range && v1 == 0)) s += price_sentence(mr, 1);
    s += rating_sentence(mr, static_cast<int>(rng.uniform_int(2)));
    s += family_sentence(mr);
    return trim_spaces(s);
  }});

  bank.families.push_back({3, "area", [](const MeaningRepresentation& mr, Rng& rng) {
    std::string s = "Located in the " + *mr.area;
    if (mr.near) s += " near the " + *mr.near;
    s += " , " + *mr.name + " is " + article_for(*mr.food) + " " + *mr.food + " " +
         et_or_place(mr) + " . ";
    s += rating_sentence(mr, static_cast<int>(rng.uniform_int(2)));
    s += price_sentence(mr, static_cast<int>(rng.uniform_int(2)));
    s += family_sentence(mr);
    return trim_spaces(s);
  }});

  bank.families.push_back({4, std::nullopt, [](const MeaningRepresentation& mr, Rng& rng) {
    const int v1 = static_cast<int>(rng.uniform_int(2));
    std::string s = "If you like " + *mr.food + " food , try " + *mr.name + place_clauses(mr) +
                    " . ";
    s += et_sentence(mr);
    s += rating_sentence(mr, v1);
    s += price_sentence(mr, v1);
    s += family_sentence(mr);
    return trim_spaces(s);
  }});

  bank.families.push_back({5, "customer_rating", [](const MeaningRepresentation& mr, Rng& rng) {
    std::string s = *mr.name + " is " + article_for(*mr.food) + " " + *mr.food + " " +
                    et_or_place(mr) + " with a " + *mr.customer_rating + " customer rating" +
                    place_clauses(mr) + " . ";
    s += price_sentence(mr, static_cast<int>(rng.uniform_int(2)));
    s += family_sentence(mr);
    return trim_spaces(s);
  }});

  // Families 6-9 carry their own clause renderings on top of distinct
  // skeletons, so each one is a bundle of surface patterns to learn rather
  // than a reshuffle of the shared clauses above.
  bank.families.push_back({6, std::nullopt, [](const MeaningRepresentation& mr, Rng&) {
    std::string s = "Looking for " + *mr.food + " food ? " + *mr.name + " is a good choice . ";
    if (mr.eat_type) s += "It is " + article_for(*mr.eat_type) + " " + *mr.eat_type + " . ";
    if (mr.area) s += "You can find it in the " + *mr.area + " . ";
    if (mr.near) s += "It sits near the " + *mr.near + " . ";
    if (mr.customer_rating) s += "Customers rate it " + *mr.customer_rating + " . ";
    if (mr.price_range) s += "Expect " + *mr.price_range + " prices . ";
    if (mr.family_friendly) s += "It is " + *mr.family_friendly + " . ";
    return trim_spaces(s);
  }});

  bank.families.push_back({7, "near", [](const MeaningRepresentation& mr, Rng&) {
    std::string s = "Near the " + *mr.near;
    if (mr.area) s += " in the " + *mr.area;
    s += " , " + *mr.name + " offers " + *mr.food + " food . ";
    if (mr.eat_type) s += "The place is " + article_for(*mr.eat_type) + " " + *mr.eat_type + " . ";
    if (mr.customer_rating) s += "The customer rating is " + *mr.customer_rating + " . ";
    if (mr.price_range) s += "Meals come at a " + *mr.price_range + " price range . ";
    if (mr.family_friendly) s += "The place is " + *mr.family_friendly + " . ";
    return trim_spaces(s);
  }});

  bank.families.push_back({8, "family_friendly", [](const MeaningRepresentation& mr, Rng&) {
    std::string s = *mr.name + " is a " + *mr.family_friendly + " " + *mr.food + " " +
                    et_or_place(mr) + place_clauses(mr) + " . ";
    if (mr.customer_rating) {
      s += "Diners give it a " + *mr.customer_rating + " customer rating . ";
    }
    if (mr.price_range) s += "Expect " + *mr.price_range + " prices . ";
    return trim_spaces(s);
  }});

  bank.families.push_back({9, "price_range", [](const MeaningRepresentation& mr, Rng&) {
    std::string s = "For a " + *mr.price_range + " price range , " + *mr.name + " serves " +
                    *mr.food + " food" + place_clauses(mr) + " . ";
    if (mr.eat_type) s += "The spot is " + article_for(*mr.eat_type) + " " + *mr.eat_type + " . ";
    if (mr.customer_rating) s += "It earns a " + *mr.customer_rating + " customer rating . ";
    if (mr.family_friendly) s += "Guests say it is " + *mr.family_friendly + " . ";
    return trim_spaces(s);
  }});

  return bank;
}

}  // namespace

const TemplateBank& TemplateBank::standard() {
  static const TemplateBank bank = build_standard_bank();
  return bank;
}

// ---------------------------------------------------------------------------
// Corpus generation

Corpus generate_corpus(const CorpusConfig& cfg, const TemplateBank& bank) {
  if (cfg.size < 100) throw ConfigError("corpus size must be at least 100");
  if (bank.families.empty()) throw DataError("template bank is empty");

  std::vector<int> allowed = cfg.template_families;
  if (allowed.empty()) {
    for (const auto& f : bank.families) allowed.push_back(f.id);
  }
  for (int id : allowed) {
    if (id < 0 || id >= bank.family_count()) {
      throw ConfigError("template family " + std::to_string(id) + " not in bank");
    }
  }

  std::map<std::string, double> presence = {{"eat_type", 0.7},        {"price_range", 0.6},
                                            {"customer_rating", 0.6}, {"area", 0.5},
                                            {"family_friendly", 0.45}, {"near", 0.4}};
  for (const auto& [k, v] : cfg.slot_presence) presence[k] = v;

  auto weights_for = [&](const std::string& slot) {
    const auto& values = slot_vocabularies().at(slot);
    auto it = cfg.slot_weights.find(slot);
    if (it == cfg.slot_weights.end()) return std::vector<double>(values.size(), 1.0);
    if (it->second.size() != values.size()) {
      throw ConfigError("slot_weights for '" + slot + "' must list " +
                        std::to_string(values.size()) + " weights");
    }
    return it->second;
  };

  Rng root(cfg.seed);
  Rng mr_rng = root.fork("mr");
  Rng tpl_rng = root.fork("template");

  std::vector<Example> all;
  all.reserve(static_cast<size_t>(cfg.size));
  for (int i = 0; i < cfg.size; ++i) {
    MeaningRepresentation mr;
    for (const auto& key : MeaningRepresentation::slot_keys()) {
      const bool required = (key == "name" || key == "food");
      if (!required && mr_rng.uniform() >= presence[key]) continue;
      const auto& values = slot_vocabularies().at(key);
      mr.slot(key) = values[static_cast<size_t>(mr_rng.categorical(weights_for(key)))];
    }

    std::vector<const TemplateFamily*> usable;
    for (int id : allowed) {
      const TemplateFamily& f = bank.families[static_cast<size_t>(id)];
      if (!f.requires_slot || mr.slot(*f.requires_slot)) usable.push_back(&f);
    }
    if (usable.empty()) {
      throw DataError("template bank covers no family for slot combination '" + mr.linearize() +
                      "'");
    }
    const TemplateFamily* fam = usable[static_cast<size_t>(tpl_rng.uniform_int(
        static_cast<int64_t>(usable.size())))];
    Example ex;
    ex.mr = mr;
    ex.text = fam->realize(mr, tpl_rng);
    ex.source_tag = fam->id;
    all.push_back(std::move(ex));
  }

  std::vector<size_t> order(all.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng split_rng = root.fork("split");
  split_rng.shuffle(order);

  const int n_train = cfg.size * 8 / 10;
  const int n_val = cfg.size / 10;
  Corpus corpus;
  for (size_t i = 0; i < order.size(); ++i) {
    const Example& ex = all[order[i]];
    if (static_cast<int>(i) < n_train) {
      corpus.train.push_back(ex);
    } else if (static_cast<int>(i) < n_train + n_val) {
      corpus.val.push_back(ex);
    } else {
      corpus.test.push_back(ex);
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------
// Tokenizer

Tokenizer Tokenizer::build(std::span<const Example> train_split) {
  Tokenizer tk;
  auto add = [&](const std::string& word) {
    if (tk.text_to_id_.count(word)) return;
    tk.text_to_id_[word] = static_cast<int>(tk.id_to_text_.size());
    tk.id_to_text_.push_back(word);
  };
  add("<pad>");
  add("<bos>");
  add("<sep>");
  add("<eos>");
  add("<unk>");
  for (const auto& key : MeaningRepresentation::slot_keys()) add(key + "[");
  add("]");

  std::vector<std::string> words;
  for (const auto& ex : train_split) {
    for (auto& w : split_words(ex.text)) words.push_back(std::move(w));
    for (int i = 0; i < MeaningRepresentation::kSlotCount; ++i) {
      if (ex.mr.slot(i)) {
        for (auto& w : split_words(*ex.mr.slot(i))) words.push_back(std::move(w));
      }
    }
  }
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  for (const auto& w : words) add(w);
  return tk;
}

int Tokenizer::token_id(const std::string& word) const {
  auto it = text_to_id_.find(word);
  return it == text_to_id_.end() ? kUnk : it->second;
}

const std::string& Tokenizer::token_text(int id) const {
  if (id < 0 || id >= vocab_size()) {
    throw InputError("token id " + std::to_string(id) + " outside vocabulary");
  }
  return id_to_text_[static_cast<size_t>(id)];
}

std::vector<int> Tokenizer::tokenize_text(const std::string& text) const {
  std::vector<int> out;
  for (const auto& w : split_words(text)) out.push_back(token_id(w));
  return out;
}

std::string Tokenizer::detokenize(std::span<const int> ids) const {
  std::string out;
  for (size_t i = 0; i < ids.size(); ++i) {
    if (i) out += " ";
    out += token_text(ids[i]);
  }
  return out;
}

std::vector<int> Tokenizer::linearize_mr(const MeaningRepresentation& mr) const {
  std::vector<int> out;
  for (int i = 0; i < MeaningRepresentation::kSlotCount; ++i) {
    const auto& v = mr.slot(i);
    if (!v) continue;
    out.push_back(token_id(MeaningRepresentation::slot_keys()[static_cast<size_t>(i)] + "["));
    for (const auto& w : split_words(*v)) out.push_back(token_id(w));
    out.push_back(token_id("]"));
  }
  out.push_back(kSep);
  return out;
}

TokenSequence Tokenizer::encode_example(const Example& ex) const {
  TokenSequence seq;
  seq.tokens = linearize_mr(ex.mr);
  seq.sep_index = static_cast<int>(seq.tokens.size()) - 1;
  for (int id : tokenize_text(ex.text)) seq.tokens.push_back(id);
  seq.tokens.push_back(kEos);
  return seq;
}

// ---------------------------------------------------------------------------
// Partitions

std::string attribute_value(const Example& ex, const std::string& attribute) {
  if (attribute == "source") return "f" + std::to_string(ex.source_tag);
  const auto& v = ex.mr.slot(attribute);
  return v ? *v : "-";
}

namespace {

std::map<std::string, int> histogram_of(const std::vector<Example>& examples,
                                        const std::string& attribute) {
  std::map<std::string, int> h;
  for (const auto& ex : examples) h[attribute_value(ex, attribute)]++;
  return h;
}

}  // namespace

std::vector<Shard> partition_iid(std::span<const Example> train, int n_clients, uint64_t seed,
                                 const std::string& attribute) {
  if (n_clients < 1) throw ConfigError("partition: need at least one client");
  if (n_clients > static_cast<int>(train.size())) {
    throw ConfigError("partition: " + std::to_string(n_clients) + " clients exceed " +
                      std::to_string(train.size()) + " examples");
  }
  // group indices by attribute value, shuffle within groups, then deal with a
  // cursor that runs across groups so shard sizes stay within one
  std::map<std::string, std::vector<size_t>> groups;
  for (size_t i = 0; i < train.size(); ++i) {
    groups[attribute_value(train[i], attribute)].push_back(i);
  }
  Rng root(seed);
  std::vector<Shard> shards(static_cast<size_t>(n_clients));
  for (int k = 0; k < n_clients; ++k) shards[static_cast<size_t>(k)].client_id = k;
  size_t cursor = 0;
  for (auto& [value, idx] : groups) {
    Rng g = root.fork("iid." + value);
    g.shuffle(idx);
    for (size_t i : idx) {
      shards[cursor % static_cast<size_t>(n_clients)].examples.push_back(train[i]);
      ++cursor;
    }
  }
  for (auto& s : shards) {
    Rng g = root.fork("shard." + std::to_string(s.client_id));
    g.shuffle(s.examples);
    s.attribute_histogram = histogram_of(s.examples, attribute);
  }
  return shards;
}

std::vector<Shard> partition_noniid(std::span<const Example> train, int n_clients,
                                    const std::string& attribute, double x_percent,
                                    uint64_t seed) {
  if (n_clients < 1) throw ConfigError("partition: need at least one client");
  if (x_percent < 0.0 || x_percent > 100.0) {
    throw ConfigError("partition: concentration x must lie in [0, 100]");
  }
  if (train.size() % static_cast<size_t>(n_clients) != 0) {
    throw ConfigError("partition: " + std::to_string(train.size()) +
                      " examples do not split evenly across " + std::to_string(n_clients) +
                      " clients");
  }
  const size_t shard_size = train.size() / static_cast<size_t>(n_clients);

  std::map<std::string, std::vector<size_t>> pools;
  for (size_t i = 0; i < train.size(); ++i) {
    pools[attribute_value(train[i], attribute)].push_back(i);
  }
  std::vector<std::string> values;
  for (const auto& [v, idx] : pools) values.push_back(v);
  if (values.size() < 2) {
    throw DataError("non-IID partition needs at least two values of '" + attribute + "'");
  }

  Rng root(seed);
  for (auto& [v, idx] : pools) {
    Rng g = root.fork("pool." + v);
    g.shuffle(idx);
  }

  const size_t confined =
      static_cast<size_t>(std::llround(x_percent / 100.0 * static_cast<double>(shard_size)));
  std::vector<Shard> shards(static_cast<size_t>(n_clients));
  for (int k = 0; k < n_clients; ++k) {
    shards[static_cast<size_t>(k)].client_id = k;
    shards[static_cast<size_t>(k)].assigned_value = values[static_cast<size_t>(k) % values.size()];
  }

  for (int k = 0; k < n_clients; ++k) {
    auto& shard = shards[static_cast<size_t>(k)];
    auto& pool = pools[shard.assigned_value];
    if (pool.size() < confined) {
      throw DataError("not enough '" + shard.assigned_value + "' examples for client " +
                      std::to_string(k) + ": need " + std::to_string(confined) + ", have " +
                      std::to_string(pool.size()));
    }
    for (size_t i = 0; i < confined; ++i) {
      shard.examples.push_back(train[pool.back()]);
      pool.pop_back();
    }
  }

  // The remainder fills shards round-robin with foreign values only, each
  // slot drawn uniformly from the remaining foreign examples (pools are
  // pre-shuffled, so popping the chosen pool's tail is a uniform draw).
  Rng fill_rng = root.fork("fill");
  size_t remaining = 0;
  for (const auto& v : values) remaining += pools[v].size();
  while (remaining > 0) {
    bool progress = false;
    for (int k = 0; k < n_clients && remaining > 0; ++k) {
      auto& shard = shards[static_cast<size_t>(k)];
      if (shard.examples.size() >= shard_size) continue;
      int64_t foreign = 0;
      for (const auto& v : values) {
        if (v != shard.assigned_value) foreign += static_cast<int64_t>(pools[v].size());
      }
      if (foreign == 0) continue;  // only own-value examples left for this client
      int64_t r = fill_rng.uniform_int(foreign);
      for (const auto& v : values) {
        if (v == shard.assigned_value) continue;
        auto& pool = pools[v];
        if (r < static_cast<int64_t>(pool.size())) {
          shard.examples.push_back(train[pool.back()]);
          pool.pop_back();
          break;
        }
        r -= static_cast<int64_t>(pool.size());
      }
      --remaining;
      progress = true;
    }
    if (!progress) {
      // Every unfilled client is assigned the value of everything that
      // remains. Repair by swapping: a donor shard with another assignment
      // absorbs the stranded example and hands over one of its foreign
      // examples instead. Counts stay exact on both sides.
      bool repaired = false;
      for (const auto& v : values) {
        auto& pool = pools[v];
        while (!pool.empty()) {
          Shard* stuck = nullptr;
          for (auto& s : shards) {
            if (s.examples.size() < shard_size && s.assigned_value == v) {
              stuck = &s;
              break;
            }
          }
          if (!stuck) break;
          bool swapped = false;
          for (auto& donor : shards) {
            if (donor.assigned_value == v) continue;
            for (auto& ex : donor.examples) {
              const std::string w = attribute_value(ex, attribute);
              if (w == v || w == donor.assigned_value) continue;
              stuck->examples.push_back(ex);
              ex = train[pool.back()];
              pool.pop_back();
              --remaining;
              swapped = true;
              break;
            }
            if (swapped) break;
          }
          if (!swapped) {
            throw DataError("cannot place remaining '" + v +
                            "' examples without violating the non-IID mixture");
          }
          repaired = true;
        }
      }
      if (!repaired) {
        std::string stuck_value;
        for (const auto& v : values) {
          if (!pools[v].empty()) stuck_value = v;
        }
        throw DataError("cannot place remaining '" + stuck_value +
                        "' examples without violating the non-IID mixture");
      }
    }
  }

  for (auto& s : shards) {
    Rng g = root.fork("shard." + std::to_string(s.client_id));
    g.shuffle(s.examples);
    s.attribute_histogram = histogram_of(s.examples, attribute);
  }
  return shards;
}

// ---------------------------------------------------------------------------
// Files

void save_corpus(const std::filesystem::path& path, std::span<const Example> examples) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw InputError("cannot open corpus file for writing: " + path.string());
  for (const auto& ex : examples) out << ex.mr.linearize() << "\t" << ex.text << "\n";
}

namespace {

MeaningRepresentation parse_linearized_mr(const std::string& s) {
  MeaningRepresentation mr;
  auto words = split_words(s);
  size_t i = 0;
  while (i < words.size()) {
    const std::string& open = words[i];
    if (open.empty() || open.back() != '[') throw DataError("bad linearized MR: '" + s + "'");
    const std::string key = open.substr(0, open.size() - 1);
    ++i;
    std::string value;
    while (i < words.size() && words[i] != "]") {
      if (!value.empty()) value += " ";
      value += words[i];
      ++i;
    }
    if (i == words.size()) throw DataError("unterminated slot in MR: '" + s + "'");
    ++i;  // consume "]"
    mr.slot(key) = value;
  }
  return mr;
}

}  // namespace

std::vector<Example> load_corpus(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open corpus file: " + path.string());
  std::vector<Example> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const size_t tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("corpus line without tab: '" + line + "'");
    Example ex;
    ex.mr = parse_linearized_mr(line.substr(0, tab));
    ex.text = line.substr(tab + 1);
    out.push_back(std::move(ex));
  }
  return out;
}

MeaningRepresentation parse_e2e_mr(const std::string& mr_field) {
  MeaningRepresentation mr;
  size_t i = 0;
  while (i < mr_field.size()) {
    const size_t open = mr_field.find('[', i);
    if (open == std::string::npos) break;
    size_t start = i;
    while (start < open && (mr_field[start] == ' ' || mr_field[start] == ',')) ++start;
    std::string key = mr_field.substr(start, open - start);
    const size_t close = mr_field.find(']', open);
    if (close == std::string::npos) throw DataError("unterminated E2E slot: '" + mr_field + "'");
    const std::string value = mr_field.substr(open + 1, close - open - 1);

    if (key == "eatType") key = "eat_type";
    else if (key == "priceRange") key = "price_range";
    else if (key == "customer rating") key = "customer_rating";
    else if (key == "familyFriendly") key = "family_friendly";
    mr.slot(key) = value;
    i = close + 1;
  }
  return mr;
}

std::vector<Example> load_e2e_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open E2E file: " + path.string());
  std::vector<Example> out;
  std::string line;
  bool first = true;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (first) {
      first = false;
      if (line == "mr,ref" || line == "\"mr\",\"ref\"") continue;
    }
    std::string mr_field, ref_field;
    if (line[0] == '"') {
      const size_t close = line.find('"', 1);
      if (close == std::string::npos) throw DataError("bad E2E csv line: '" + line + "'");
      mr_field = line.substr(1, close - 1);
      size_t rest = line.find(',', close);
      if (rest == std::string::npos) throw DataError("bad E2E csv line: '" + line + "'");
      ref_field = line.substr(rest + 1);
      if (ref_field.size() >= 2 && ref_field.front() == '"' && ref_field.back() == '"') {
        ref_field = ref_field.substr(1, ref_field.size() - 2);
      }
    } else {
      const size_t comma = line.find(',');
      if (comma == std::string::npos) throw DataError("bad E2E csv line: '" + line + "'");
      mr_field = line.substr(0, comma);
      ref_field = line.substr(comma + 1);
    }
    Example ex;
    ex.mr = parse_e2e_mr(mr_field);
    ex.text = ref_field;
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace fedcustom
