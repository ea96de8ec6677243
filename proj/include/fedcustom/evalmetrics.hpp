// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

#include "fedcustom/backbone.hpp"

namespace fedcustom {

enum class BleuSmoothing { off, plus_one };

struct MetricReport {
  double bleu = 0.0;     // 0..100
  double rouge_l = 0.0;  // 0..100
  std::vector<double> sentence_bleu;   // per pair, plus-one smoothed
  std::vector<double> sentence_rouge;  // per pair
  std::vector<double> ngram_precision; // modified precisions p_1..p_max_n
  double brevity_penalty = 1.0;
};

// Corpus-level BLEU over token-id sequences: pooled clipped n-gram counts,
// geometric mean of modified precisions, exponential brevity penalty
// exp(1 - r/c). With smoothing off, any zero precision zeroes the score.
MetricReport corpus_bleu(const std::vector<std::vector<int>>& hypotheses,
                         const std::vector<std::vector<int>>& references, int max_n = 4,
                         BleuSmoothing smoothing = BleuSmoothing::off);

// Mean per-pair LCS F-measure with beta = 1.2, scaled to 0..100.
double rouge_l(const std::vector<std::vector<int>>& hypotheses,
               const std::vector<std::vector<int>>& references);

// Both metrics plus per-sentence scores in one report.
MetricReport text_metrics(const std::vector<std::vector<int>>& hypotheses,
                          const std::vector<std::vector<int>>& references, int max_n = 4,
                          BleuSmoothing smoothing = BleuSmoothing::off);

// Whitespace-tokenizing conveniences.
std::vector<std::vector<int>> tokenize_lines(const std::vector<std::string>& lines);
MetricReport corpus_bleu_text(const std::vector<std::string>& hypotheses,
                              const std::vector<std::string>& references, int max_n = 4,
                              BleuSmoothing smoothing = BleuSmoothing::off);
double rouge_l_text(const std::vector<std::string>& hypotheses,
                    const std::vector<std::string>& references);

// Cosine similarity between flattened key/value prefixes.
double prefix_cosine_single(const KVPrefix& local, const KVPrefix& global);

struct PrefixCosineReport {
  std::vector<double> per_client;
  double mean = 0.0;
};
PrefixCosineReport prefix_cosine(std::span<const KVPrefix> locals, const KVPrefix& global);

}  // namespace fedcustom
