// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <span>
#include <string>

#include "fedcustom/backbone.hpp"

namespace fedcustom {

enum class Method { FPT, FFFT, FAT, FKD, CPT, ClientOnly };
const char* to_string(Method m);
Method method_from_string(const std::string& s);

// Paper-scale trainable-parameter reference points (millions), kept as
// documentation constants; the desk-scale configs reproduce their ordering,
// not their magnitudes.
inline constexpr double kReferenceTrainableMillionsFpt = 25.0;
inline constexpr double kReferenceTrainableMillionsFfft = 345.0;
inline constexpr double kReferenceTrainableMillionsFat = 25.0;
inline constexpr double kReferenceTrainableMillionsFkd = 38.3;
inline constexpr double kReferenceFfftOverFptRatio =
    kReferenceTrainableMillionsFfft / kReferenceTrainableMillionsFpt;

// ---------------------------------------------------------------------------
// Prefix optimizer: a learned embedding over the p prefix slots followed by a
// three-layer perceptron whose output rows reshape into per-layer, per-head
// key/value prefix rows. Aggregating these parameters (not the prefixes) is
// what federates prefix-tuning.

struct PrefixOptimizerConfig {
  int prefix_len = 10;
  int embed_dim = 32;
  int hidden_dim = 64;
};

class PrefixOptimizer {
 public:
  PrefixOptimizer(PrefixOptimizerConfig cfg, BackboneConfig backbone);

  const PrefixOptimizerConfig& config() const { return cfg_; }
  int output_dim() const { return 2 * backbone_.n_layers * backbone_.model_dim; }
  int64_t param_count() const;

  // Fresh parameters, group `prefix`, all trainable.
  ParameterSet init_params(Rng& rng) const;

  // Deterministic, differentiable map from parameters to a KVPrefix; the
  // returned tensors stay linked to `params` through the graph.
  KVPrefix generate(Graph& g, const ParameterSet& params) const;

 private:
  PrefixOptimizerConfig cfg_;
  BackboneConfig backbone_;
};

// ---------------------------------------------------------------------------
// Adapters

// Adapter parameters for every insertion point; up-projections start at zero
// so the adapted forward equals the baseline forward at initialization.
ParameterSet make_adapter_params(const BackboneConfig& cfg, int bottleneck, Rng& rng);
AdapterSet adapter_view(const BackboneConfig& cfg, const ParameterSet& adapter_params);
int64_t adapter_param_count(const BackboneConfig& cfg, int bottleneck);

// ---------------------------------------------------------------------------
// Knowledge distillation

struct StudentConfig {
  int n_layers = 1;
  int n_heads = 4;
  int model_dim = 32;
  int ff_dim = 128;
};

// Student backbone config inherits vocab and context length from the teacher.
BackboneConfig student_backbone_config(const StudentConfig& s, const BackboneConfig& teacher);

// Student backbone+head parameters plus the hidden-alignment projection
// "align.w" [d_student x d_teacher] mapping the student's final hidden state
// onto the teacher's. The projection starts at identity when square.
ParameterSet init_student_params(const StudentConfig& s, const BackboneConfig& teacher, Rng& rng);

struct DistillLossWeights {
  double w_task = 1.0;
  double w_soft = 1.0;
  double w_hidden = 0.1;
  double temperature = 2.0;
  void validate() const;
};

struct DistillResult {
  Tensor total;   // scalar, differentiable w.r.t. student parameters
  double task = 0.0;
  double soft = 0.0;
  double hidden = 0.0;
};

// total = w_task * CE(student, targets)
//       + w_soft * T^2 * KL(softmax(teacher/T) || softmax(student/T))
//       + w_hidden * MSE(student_hidden * align, teacher_hidden)
// Teacher outputs must come from a gradient-disabled forward; KL averages
// over non-ignored positions, MSE over the aligned final hidden states.
DistillResult distill_losses(Graph& g, const ForwardResult& teacher, const ForwardResult& student,
                             std::span<const int> targets, int ignore_index, const Tensor& align_w,
                             const DistillLossWeights& w);

// ---------------------------------------------------------------------------
// Trainable views

struct TrainableView {
  std::vector<std::string> names;
  int64_t scalar_count = 0;
  int64_t byte_size = 0;  // 8 bytes per trainable scalar
};

// The set of entries a method trains and uploads. `method_params` carries the
// method-specific set (prefix optimizer, adapters, student) and may be null
// only for FFFT.
TrainableView trainable_view(Method method, const ParameterSet& backbone_params,
                             const ParameterSet* method_params);

}  // namespace fedcustom
