// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/evalmetrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <sstream>

namespace fedcustom {

namespace {

using Ngram = std::vector<int>;

std::map<Ngram, int> ngram_counts(const std::vector<int>& seq, int n) {
  std::map<Ngram, int> counts;
  if (static_cast<int>(seq.size()) < n) return counts;
  for (size_t i = 0; i + static_cast<size_t>(n) <= seq.size(); ++i) {
    counts[Ngram(seq.begin() + static_cast<int64_t>(i),
                 seq.begin() + static_cast<int64_t>(i) + n)]++;
  }
  return counts;
}

struct BleuCounts {
  std::vector<int64_t> match;  // clipped matches per order
  std::vector<int64_t> total;  // hypothesis n-gram totals per order
  int64_t hyp_len = 0;
  int64_t ref_len = 0;
};

void accumulate_pair(BleuCounts& acc, const std::vector<int>& hyp, const std::vector<int>& ref,
                     int max_n) {
  acc.hyp_len += static_cast<int64_t>(hyp.size());
  acc.ref_len += static_cast<int64_t>(ref.size());
  for (int n = 1; n <= max_n; ++n) {
    auto hc = ngram_counts(hyp, n);
    auto rc = ngram_counts(ref, n);
    for (const auto& [gram, count] : hc) {
      acc.total[static_cast<size_t>(n - 1)] += count;
      auto it = rc.find(gram);
      if (it != rc.end()) {
        acc.match[static_cast<size_t>(n - 1)] += std::min(count, it->second);
      }
    }
  }
}

double bleu_from_counts(const BleuCounts& acc, int max_n, BleuSmoothing smoothing,
                        std::vector<double>* precisions_out, double* bp_out) {
  std::vector<double> precisions(static_cast<size_t>(max_n), 0.0);
  bool zero = false;
  for (int n = 1; n <= max_n; ++n) {
    int64_t m = acc.match[static_cast<size_t>(n - 1)];
    int64_t t = acc.total[static_cast<size_t>(n - 1)];
    if (smoothing == BleuSmoothing::plus_one && n >= 2) {
      m += 1;
      t += 1;
    }
    if (t == 0 || m == 0) {
      zero = true;
      precisions[static_cast<size_t>(n - 1)] = 0.0;
    } else {
      precisions[static_cast<size_t>(n - 1)] =
          static_cast<double>(m) / static_cast<double>(t);
    }
  }
  const double bp = acc.hyp_len == 0
                        ? 0.0
                        : std::exp(1.0 - static_cast<double>(acc.ref_len) /
                                             static_cast<double>(acc.hyp_len));
  if (precisions_out) *precisions_out = precisions;
  if (bp_out) *bp_out = bp;
  if (acc.hyp_len == 0 || zero) return 0.0;
  double log_mean = 0.0;
  for (double p : precisions) log_mean += std::log(p);
  log_mean /= static_cast<double>(max_n);
  return std::min(100.0, 100.0 * bp * std::exp(log_mean));
}

void validate_pairs(const std::vector<std::vector<int>>& hyps,
                    const std::vector<std::vector<int>>& refs) {
  if (hyps.empty()) throw InputError("metrics: empty hypothesis list");
  if (hyps.size() != refs.size()) {
    throw InputError("metrics: " + std::to_string(hyps.size()) + " hypotheses vs " +
                     std::to_string(refs.size()) + " references");
  }
  for (const auto& r : refs) {
    if (r.empty()) throw InputError("metrics: empty reference");
  }
}

int64_t lcs_length(const std::vector<int>& a, const std::vector<int>& b) {
  const size_t n = a.size(), m = b.size();
  std::vector<int64_t> prev(m + 1, 0), cur(m + 1, 0);
  for (size_t i = 1; i <= n; ++i) {
    for (size_t j = 1; j <= m; ++j) {
      if (a[i - 1] == b[j - 1]) {
        cur[j] = prev[j - 1] + 1;
      } else {
        cur[j] = std::max(prev[j], cur[j - 1]);
      }
    }
    std::swap(prev, cur);
  }
  return prev[m];
}

double rouge_pair(const std::vector<int>& hyp, const std::vector<int>& ref) {
  if (hyp.empty()) return 0.0;
  const double lcs = static_cast<double>(lcs_length(hyp, ref));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(hyp.size());
  const double r = lcs / static_cast<double>(ref.size());
  const double beta2 = 1.2 * 1.2;
  return 100.0 * (1.0 + beta2) * r * p / (r + beta2 * p);
}

}  // namespace

MetricReport corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                         const std::vector<std::vector<int>>& references, int max_n,
                         BleuSmoothing smoothing) {
  if (max_n < 1) throw ConfigError("corpus_bleu: max_n must be at least 1");
  validate_pairs(hypotheses, references);

  MetricReport report;
  BleuCounts acc;
  acc.match.assign(static_cast<size_t>(max_n), 0);
  acc.total.assign(static_cast<size_t>(max_n), 0);
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    accumulate_pair(acc, hypotheses[i], references[i], max_n);

    BleuCounts one;
    one.match.assign(static_cast<size_t>(max_n), 0);
    one.total.assign(static_cast<size_t>(max_n), 0);
    accumulate_pair(one, hypotheses[i], references[i], max_n);
    report.sentence_bleu.push_back(
        bleu_from_counts(one, max_n, BleuSmoothing::plus_one, nullptr, nullptr));
  }
  report.bleu = bleu_from_counts(acc, max_n, smoothing, &report.ngram_precision,
                                 &report.brevity_penalty);
  return report;
}

double rouge_l(const std::vector<std::vector<int>>& hypotheses,
               const std::vector<std::vector<int>>& references) {
  validate_pairs(hypotheses, references);
  double acc = 0.0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    acc += rouge_pair(hypotheses[i], references[i]);
  }
  return acc / static_cast<double>(hypotheses.size());
}

MetricReport text_metrics(const std::vector<std::vector<int>>& hypotheses,
                          const std::vector<std::vector<int>>& references, int max_n,
                          BleuSmoothing smoothing) {
  MetricReport report = corpus_bleu(hypotheses, references, max_n, smoothing);
  double acc = 0.0;
  for (size_t i = 0; i < hypotheses.size(); ++i) {
    const double r = rouge_pair(hypotheses[i], references[i]);
    report.sentence_rouge.push_back(r);
    acc += r;
  }
  report.rouge_l = acc / static_cast<double>(hypotheses.size());
  return report;
}

std::vector<std::vector<int>> tokenize_lines(const std::vector<std::string>& lines) {
  // shared word table so identical words get identical ids across lines
  std::map<std::string, int> ids;
  std::vector<std::vector<int>> out;
  for (const auto& line : lines) {
    std::istringstream is(line);
    std::string w;
    std::vector<int> seq;
    while (is >> w) {
      auto [it, fresh] = ids.emplace(w, static_cast<int>(ids.size()));
      seq.push_back(it->second);
    }
    out.push_back(std::move(seq));
  }
  return out;
}

MetricReport corpus_bleu_text(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references, int max_n,
                              BleuSmoothing smoothing) {
  std::vector<std::string> all = hypotheses;
  all.insert(all.end(), references.begin(), references.end());
  auto seqs = tokenize_lines(all);
  std::vector<std::vector<int>> hyp(seqs.begin(), seqs.begin() + static_cast<int64_t>(hypotheses.size()));
  std::vector<std::vector<int>> ref(seqs.begin() + static_cast<int64_t>(hypotheses.size()), seqs.end());
  return corpus_bleu(hyp, ref, max_n, smoothing);
}

double rouge_l_text(const std::vector<std::string>& hypotheses,
                    const std::vector<std::string>& references) {
  std::vector<std::string> all = hypotheses;
  all.insert(all.end(), references.begin(), references.end());
  auto seqs = tokenize_lines(all);
  std::vector<std::vector<int>> hyp(seqs.begin(), seqs.begin() + static_cast<int64_t>(hypotheses.size()));
  std::vector<std::vector<int>> ref(seqs.begin() + static_cast<int64_t>(hypotheses.size()), seqs.end());
  return rouge_l(hyp, ref);
}

double prefix_cosine_single(const KVPrefix& local, const KVPrefix& global) {
  const std::vector<double> a = local.flatten();
  const std::vector<double> b = global.flatten();
  if (a.size() != b.size()) throw DimensionError("prefix_cosine: shape mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) {
    throw NumericError("prefix_cosine: similarity undefined for a zero-norm prefix");
  }
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

PrefixCosineReport prefix_cosine(std::span<const KVPrefix> locals, const KVPrefix& global) {
  if (locals.empty()) throw InputError("prefix_cosine: no local prefixes");
  PrefixCosineReport report;
  double acc = 0.0;
  for (const auto& local : locals) {
    report.per_client.push_back(prefix_cosine_single(local, global));
    acc += report.per_client.back();
  }
  report.mean = acc / static_cast<double>(locals.size());
  return report;
}

}  // namespace fedcustom
