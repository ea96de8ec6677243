// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/customization.hpp"

#include <cmath>

namespace fedcustom {

const char* to_string(Method m) {
  switch (m) {
    case Method::FPT: return "fpt";
    case Method::FFFT: return "ffft";
    case Method::FAT: return "fat";
    case Method::FKD: return "fkd";
    case Method::CPT: return "cpt";
    case Method::ClientOnly: return "client_only";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "fpt") return Method::FPT;
  if (s == "ffft") return Method::FFFT;
  if (s == "fat") return Method::FAT;
  if (s == "fkd") return Method::FKD;
  if (s == "cpt") return Method::CPT;
  if (s == "client_only") return Method::ClientOnly;
  throw ConfigError("unknown method '" + s + "'");
}

// ---------------------------------------------------------------------------
// PrefixOptimizer

PrefixOptimizer::PrefixOptimizer(PrefixOptimizerConfig cfg, BackboneConfig backbone)
    : cfg_(cfg), backbone_(backbone) {
  backbone_.validate();
  if (cfg_.prefix_len < 1) throw ConfigError("prefix optimizer: prefix_len must be at least 1");
  if (cfg_.embed_dim < 1 || cfg_.hidden_dim < 1) {
    throw ConfigError("prefix optimizer: embed_dim and hidden_dim must be positive");
  }
}

int64_t PrefixOptimizer::param_count() const {
  const int64_t p = cfg_.prefix_len, e = cfg_.embed_dim, h = cfg_.hidden_dim;
  const int64_t out = output_dim();
  return p * e + (e * h + h) + (h * h + h) + (h * out + out);
}

ParameterSet PrefixOptimizer::init_params(Rng& rng) const {
  // Wider than the backbone init: keeps ReLU pre-activations away from the
  // kink and gives the prefix enough scale to steer a frozen backbone.
  const double std = 0.3;
  ParameterSet p;
  p.insert("prefix.embed", ParamGroup::prefix,
           Tensor::randn({cfg_.prefix_len, cfg_.embed_dim}, rng, std, true));
  p.insert("prefix.mlp.w1", ParamGroup::prefix,
           Tensor::randn({cfg_.embed_dim, cfg_.hidden_dim}, rng, std, true));
  p.insert("prefix.mlp.b1", ParamGroup::prefix, Tensor::zeros({cfg_.hidden_dim}, true));
  p.insert("prefix.mlp.w2", ParamGroup::prefix,
           Tensor::randn({cfg_.hidden_dim, cfg_.hidden_dim}, rng, std, true));
  p.insert("prefix.mlp.b2", ParamGroup::prefix, Tensor::zeros({cfg_.hidden_dim}, true));
  p.insert("prefix.mlp.w3", ParamGroup::prefix,
           Tensor::randn({cfg_.hidden_dim, output_dim()}, rng, std, true));
  p.insert("prefix.mlp.b3", ParamGroup::prefix, Tensor::zeros({output_dim()}, true));
  return p;
}

KVPrefix PrefixOptimizer::generate(Graph& g, const ParameterSet& params) const {
  const Tensor& emb = params.at("prefix.embed");
  if (emb.rows() != cfg_.prefix_len || emb.cols() != cfg_.embed_dim) {
    throw ConfigError("prefix optimizer: embedding table shape " + shape_str(emb.shape()) +
                      " does not match configuration");
  }
  if (params.at("prefix.mlp.w3").cols() != output_dim()) {
    throw ConfigError("prefix optimizer: output width does not match bound backbone");
  }
  Tensor h1 = g.relu(g.add_rowwise(g.matmul(emb, params.at("prefix.mlp.w1")),
                                   params.at("prefix.mlp.b1")));
  Tensor h2 = g.relu(g.add_rowwise(g.matmul(h1, params.at("prefix.mlp.w2")),
                                   params.at("prefix.mlp.b2")));
  Tensor out = g.add_rowwise(g.matmul(h2, params.at("prefix.mlp.w3")),
                             params.at("prefix.mlp.b3"));  // [p x 2*L*d]

  const int L = backbone_.n_layers, H = backbone_.n_heads, dh = backbone_.head_dim();
  KVPrefix prefix(cfg_.prefix_len, backbone_);
  for (int kv = 0; kv < 2; ++kv) {
    for (int l = 0; l < L; ++l) {
      for (int hd = 0; hd < H; ++hd) {
        const int64_t off = ((static_cast<int64_t>(kv) * L + l) * H + hd) * dh;
        Tensor rows = g.slice_cols(out, off, dh);  // [p x dh], one row per slot
        if (kv == 0) {
          prefix.keys[static_cast<size_t>(l)][static_cast<size_t>(hd)] = rows;
        } else {
          prefix.values[static_cast<size_t>(l)][static_cast<size_t>(hd)] = rows;
        }
      }
    }
  }
  return prefix;
}

// ---------------------------------------------------------------------------
// Adapters

ParameterSet make_adapter_params(const BackboneConfig& cfg, int bottleneck, Rng& rng) {
  cfg.validate();
  if (bottleneck < 1) throw ConfigError("adapter bottleneck must be positive");
  const int d = cfg.model_dim;
  ParameterSet p;
  for (int l = 0; l < cfg.n_layers; ++l) {
    for (const char* point : {"attn", "ff"}) {
      const std::string pre = "layer" + std::to_string(l) + ".adapter." + point + ".";
      p.insert(pre + "down_w", ParamGroup::adapter,
               Tensor::randn({d, bottleneck}, rng, 0.05, true));
      p.insert(pre + "down_b", ParamGroup::adapter, Tensor::zeros({bottleneck}, true));
      // zero up-projection makes the adapter an identity map at start
      p.insert(pre + "up_w", ParamGroup::adapter, Tensor::zeros({bottleneck, d}, true));
      p.insert(pre + "up_b", ParamGroup::adapter, Tensor::zeros({d}, true));
    }
  }
  return p;
}

AdapterSet adapter_view(const BackboneConfig& cfg, const ParameterSet& adapter_params) {
  AdapterSet set;
  set.bottleneck = static_cast<int>(adapter_params.at("layer0.adapter.attn.down_w").cols());
  for (int l = 0; l < cfg.n_layers; ++l) {
    const std::string base = "layer" + std::to_string(l) + ".adapter.";
    for (const char* point : {"attn", "ff"}) {
      AdapterSet::Adapter a;
      a.down_w = adapter_params.at(base + point + ".down_w");
      a.down_b = adapter_params.at(base + point + ".down_b");
      a.up_w = adapter_params.at(base + point + ".up_w");
      a.up_b = adapter_params.at(base + point + ".up_b");
      if (std::string(point) == "attn") {
        set.attn.push_back(a);
      } else {
        set.ff.push_back(a);
      }
    }
  }
  return set;
}

int64_t adapter_param_count(const BackboneConfig& cfg, int bottleneck) {
  const int64_t d = cfg.model_dim, b = bottleneck;
  return 2 * cfg.n_layers * (d * b + b * d + d + b);
}

// ---------------------------------------------------------------------------
// Knowledge distillation

BackboneConfig student_backbone_config(const StudentConfig& s, const BackboneConfig& teacher) {
  BackboneConfig c;
  c.n_layers = s.n_layers;
  c.n_heads = s.n_heads;
  c.model_dim = s.model_dim;
  c.ff_dim = s.ff_dim;
  c.vocab_size = teacher.vocab_size;
  c.max_seq_len = teacher.max_seq_len;
  c.validate();
  return c;
}

ParameterSet init_student_params(const StudentConfig& s, const BackboneConfig& teacher, Rng& rng) {
  const BackboneConfig scfg = student_backbone_config(s, teacher);
  ParameterSet params = Backbone(scfg).init_params(rng);
  Tensor align = Tensor::zeros({scfg.model_dim, teacher.model_dim});
  if (scfg.model_dim == teacher.model_dim) {
    for (int i = 0; i < scfg.model_dim; ++i) align.at(i, i) = 1.0;
  } else {
    for (double& x : align.values()) x = rng.normal(0.0, 0.05);
  }
  params.insert("align.w", ParamGroup::adapter, align);
  // the whole student bundle, alignment included, trains and aggregates
  params.set_trainable({ParamGroup::backbone, ParamGroup::adapter, ParamGroup::head});
  return params;
}

void DistillLossWeights::validate() const {
  if (w_task < 0.0 || w_soft < 0.0 || w_hidden < 0.0) {
    throw ConfigError("distillation weights must be nonnegative");
  }
  if (w_task + w_soft + w_hidden <= 0.0) {
    throw ConfigError("at least one distillation weight must be positive");
  }
  if (temperature <= 0.0) throw ConfigError("distillation temperature must be positive");
}

DistillResult distill_losses(Graph& g, const ForwardResult& teacher, const ForwardResult& student,
                             std::span<const int> targets, int ignore_index, const Tensor& align_w,
                             const DistillLossWeights& w) {
  w.validate();
  if (teacher.logits.requires_grad()) {
    throw ConfigError("distill_losses: teacher outputs must be gradient-free");
  }
  if (teacher.logits.rows() != student.logits.rows()) {
    throw DimensionError("distill_losses: teacher and student see different sequence lengths");
  }
  const int64_t t = student.logits.rows();
  const int64_t vs = student.logits.cols();
  if (teacher.logits.cols() != vs) throw DimensionError("distill_losses: vocabulary mismatch");

  DistillResult res;
  std::vector<Tensor> terms;

  Tensor task = g.cross_entropy(student.logits, targets, ignore_index);
  res.task = task.item();
  if (w.w_task > 0.0) terms.push_back(g.scale(task, w.w_task));

  // Soft-label alignment: T^2 * mean over valid rows of KL(p_T || p_S).
  {
    const double T = w.temperature;
    int64_t n_valid = 0;
    for (int y : targets) {
      if (y != ignore_index) ++n_valid;
    }
    if (n_valid == 0) throw NumericError("distill_losses: every position ignored");
    Tensor teacher_probs = Tensor::zeros({t, vs});  // masked to valid rows
    double entropy_part = 0.0;                      // sum over valid rows of p_T . log p_T
    for (int64_t i = 0; i < t; ++i) {
      if (targets[static_cast<size_t>(i)] == ignore_index) continue;
      double mx = -1e300;
      for (int64_t j = 0; j < vs; ++j) mx = std::max(mx, teacher.logits(i, j) / T);
      double denom = 0.0;
      for (int64_t j = 0; j < vs; ++j) denom += std::exp(teacher.logits(i, j) / T - mx);
      const double lden = std::log(denom);
      for (int64_t j = 0; j < vs; ++j) {
        const double lp = teacher.logits(i, j) / T - mx - lden;
        const double p = std::exp(lp);
        teacher_probs.at(i, j) = p;
        entropy_part += p * lp;
      }
    }
    Tensor student_logp = g.log_softmax_rows(g.scale(student.logits, 1.0 / T));
    Tensor cross = g.sum(g.mul(student_logp, teacher_probs));  // sum of p_T . log p_S
    const double coeff = T * T / static_cast<double>(n_valid);
    Tensor soft = g.add_scalar(g.scale(cross, -coeff), coeff * entropy_part);
    res.soft = soft.item();
    if (w.w_soft > 0.0) terms.push_back(g.scale(soft, w.w_soft));
  }

  // Hidden alignment on the final normed states.
  if (w.w_hidden > 0.0) {
    if (teacher.hidden.empty() || student.hidden.empty() || !align_w.defined()) {
      throw ConfigError("distill_losses: w_hidden > 0 but no aligned layers declared");
    }
    const Tensor& th = teacher.hidden.back();
    const Tensor& sh = student.hidden.back();
    Tensor proj = g.matmul(sh, align_w);
    if (proj.shape() != th.shape()) {
      throw DimensionError("distill_losses: aligned hidden shapes differ");
    }
    Tensor diff = g.sub(proj, th);
    Tensor hidden = g.scale(g.sum(g.mul(diff, diff)), 1.0 / static_cast<double>(th.numel()));
    res.hidden = hidden.item();
    terms.push_back(g.scale(hidden, w.w_hidden));
  } else if (!teacher.hidden.empty() && !student.hidden.empty() && align_w.defined()) {
    // inactive component, still reported when computable
    const Tensor& th = teacher.hidden.back();
    const Tensor& sh = student.hidden.back();
    if (sh.cols() == align_w.rows() && th.cols() == align_w.cols() && sh.rows() == th.rows()) {
      double acc = 0.0;
      for (int64_t i = 0; i < sh.rows(); ++i) {
        for (int64_t j = 0; j < th.cols(); ++j) {
          double proj = 0.0;
          for (int64_t k = 0; k < sh.cols(); ++k) proj += sh(i, k) * align_w(k, j);
          const double d = proj - th(i, j);
          acc += d * d;
        }
      }
      res.hidden = acc / static_cast<double>(th.numel());
    }
  }

  if (terms.empty()) throw ConfigError("distill_losses: no active loss components");
  Tensor total = terms[0];
  for (size_t i = 1; i < terms.size(); ++i) total = g.add(total, terms[i]);
  res.total = total;
  return res;
}

// ---------------------------------------------------------------------------
// Trainable views

TrainableView trainable_view(Method method, const ParameterSet& backbone_params,
                             const ParameterSet* method_params) {
  const ParameterSet* src = nullptr;
  switch (method) {
    case Method::FFFT:
      src = &backbone_params;
      break;
    case Method::FPT:
    case Method::CPT:
    case Method::ClientOnly:
    case Method::FAT:
    case Method::FKD:
      if (!method_params) throw ConfigError("trainable_view: method requires its parameter set");
      src = method_params;
      break;
  }
  TrainableView view;
  for (const auto& [name, e] : src->entries()) {
    view.names.push_back(name);
    view.scalar_count += e.tensor.numel();
  }
  view.byte_size = 8 * view.scalar_count;
  return view;
}

}  // namespace fedcustom
