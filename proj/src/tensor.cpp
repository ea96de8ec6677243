// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#include "fedcustom/tensor.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace fedcustom {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

std::atomic<uint64_t> g_backward_epoch{1};

std::vector<double>& scratch_of(detail::TensorImpl* t, uint64_t ep) {
  if (t->scratch_epoch != ep) {
    t->scratch.assign(t->v.size(), 0.0);
    t->scratch_epoch = ep;
  }
  return t->scratch;
}

constexpr double kGeluAlpha = 0.7978845608028653558798921198687;  // sqrt(2/pi)
constexpr double kGeluCubic = 0.044715;

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  for (int64_t d : shape) {
    if (d <= 0) throw DimensionError("tensor: non-positive extent in shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->v.assign(static_cast<size_t>(shape_numel(shape)), 0.0);
  impl->shape = std::move(shape);
  impl->requires_grad = requires_grad;
  if (requires_grad) impl->g.assign(impl->v.size(), 0.0);
  return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl_->v.begin(), t.impl_->v.end(), value);
  return t;
}

Tensor Tensor::of(Shape shape, std::vector<double> values, bool requires_grad) {
  if (shape_numel(shape) != static_cast<int64_t>(values.size())) {
    throw DimensionError("tensor: " + std::to_string(values.size()) +
                         " values do not fill shape " + shape_str(shape));
  }
  Tensor t = zeros(std::move(shape), requires_grad);
  t.impl_->v = std::move(values);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return of({1}, {value}, requires_grad);
}

Tensor Tensor::randn(Shape shape, Rng& rng, double stddev, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& x : t.impl_->v) x = rng.normal(0.0, stddev);
  return t;
}

int64_t Tensor::rows() const {
  if (ndim() == 1) return 1;
  if (ndim() == 2) return impl_->shape[0];
  throw DimensionError("rows: tensor is " + shape_str(impl_->shape));
}

int64_t Tensor::cols() const {
  if (ndim() == 1) return impl_->shape[0];
  if (ndim() == 2) return impl_->shape[1];
  throw DimensionError("cols: tensor is " + shape_str(impl_->shape));
}

void Tensor::set_requires_grad(bool rg) {
  impl_->requires_grad = rg;
  if (rg) {
    impl_->g.assign(impl_->v.size(), 0.0);
  } else {
    impl_->g.clear();
    impl_->g.shrink_to_fit();
  }
}

std::span<double> Tensor::grad() {
  if (!impl_->requires_grad) throw ConfigError("grad: tensor does not require grad");
  return impl_->g;
}

std::span<const double> Tensor::grad() const {
  if (!impl_->requires_grad) throw ConfigError("grad: tensor does not require grad");
  return impl_->g;
}

void Tensor::zero_grad() {
  if (impl_->requires_grad) std::fill(impl_->g.begin(), impl_->g.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw DimensionError("item: tensor is " + shape_str(impl_->shape));
  return impl_->v[0];
}

double Tensor::operator()(int64_t i, int64_t j) const {
  return impl_->v[static_cast<size_t>(i * cols() + j)];
}

double& Tensor::at(int64_t i, int64_t j) {
  return impl_->v[static_cast<size_t>(i * cols() + j)];
}

Tensor Tensor::clone() const {
  Tensor t = zeros(impl_->shape, impl_->requires_grad);
  t.impl_->v = impl_->v;
  return t;
}

void Tensor::copy_values_from(const Tensor& other) {
  if (other.impl_->shape != impl_->shape) {
    throw DimensionError("copy_values_from: " + shape_str(other.shape()) + " into " +
                         shape_str(impl_->shape));
  }
  impl_->v = other.impl_->v;
}

bool Tensor::all_finite() const {
  for (double x : impl_->v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("max_abs_diff: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  auto av = a.values(), bv = b.values();
  for (size_t i = 0; i < av.size(); ++i) m = std::max(m, std::abs(av[i] - bv[i]));
  return m;
}

// ---------------------------------------------------------------------------
// Graph

void Graph::clear() {
  nodes_.clear();
  macs_ = 0;
}

Tensor Graph::make(Shape shape, bool needs_grad) {
  return Tensor::zeros(std::move(shape), grad_enabled_ && needs_grad);
}

bool Graph::any_grad(std::initializer_list<Tensor> ts) {
  for (const auto& t : ts) {
    if (t.requires_grad()) return true;
  }
  return false;
}

void Graph::record(std::initializer_list<Tensor> ins, const Tensor& out,
                   std::function<void(uint64_t)> back) {
  if (!grad_enabled_ || !out.requires_grad()) return;
  Node n;
  n.out = out.impl_ptr();
  n.ins.reserve(ins.size());
  for (const auto& t : ins) n.ins.push_back(t.impl_ptr());
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
}

void Graph::backward(const Tensor& root) {
  if (!grad_enabled_) throw ConfigError("backward: graph was built with gradients disabled");
  if (root.numel() != 1) throw DimensionError("backward: root must be scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) throw ConfigError("backward: root does not require grad");
  if (!std::isfinite(root.item())) throw NumericError("backward: non-finite loss value");

  const uint64_t ep = g_backward_epoch.fetch_add(1) + 1;
  scratch_of(root.impl(), ep)[0] = 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->out->scratch_epoch != ep) continue;  // no gradient reached this node
    it->back(ep);
  }

  auto flush = [ep](detail::TensorImpl* t) {
    if (!t->requires_grad || t->scratch_epoch != ep || t->flush_epoch == ep) return;
    t->flush_epoch = ep;
    for (size_t i = 0; i < t->g.size(); ++i) t->g[i] += t->scratch[i];
  };
  flush(root.impl());
  for (auto& n : nodes_) {
    flush(n.out.get());
    for (auto& in : n.ins) flush(in.get());
  }
}

// ---------------------------------------------------------------------------
// Elementwise ops

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor c = make(a.shape(), any_grad({a, b}));
  auto av = a.values(), bv = b.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] + bv[i];
  macs_ += cv.size();
  record({a, b}, c, [ai = a.impl_ptr(), bi = b.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    const auto& go = ci->scratch;
    if (ai->requires_grad) {
      auto& ga = scratch_of(ai.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bi->requires_grad) {
      auto& gb = scratch_of(bi.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
    }
  });
  return c;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("sub: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor c = make(a.shape(), any_grad({a, b}));
  auto av = a.values(), bv = b.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] - bv[i];
  macs_ += cv.size();
  record({a, b}, c, [ai = a.impl_ptr(), bi = b.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    const auto& go = ci->scratch;
    if (ai->requires_grad) {
      auto& ga = scratch_of(ai.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    }
    if (bi->requires_grad) {
      auto& gb = scratch_of(bi.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
    }
  });
  return c;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  Tensor c = make(a.shape(), any_grad({a, b}));
  auto av = a.values(), bv = b.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] * bv[i];
  macs_ += cv.size();
  record({a, b}, c, [ai = a.impl_ptr(), bi = b.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    const auto& go = ci->scratch;
    if (ai->requires_grad) {
      auto& ga = scratch_of(ai.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bi->v[i];
    }
    if (bi->requires_grad) {
      auto& gb = scratch_of(bi.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ai->v[i];
    }
  });
  return c;
}

Tensor Graph::scale(const Tensor& a, double cst) {
  Tensor c = make(a.shape(), a.requires_grad());
  auto av = a.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] * cst;
  macs_ += cv.size();
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr(), cst](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * cst;
  });
  return c;
}

Tensor Graph::add_scalar(const Tensor& a, double cst) {
  Tensor c = make(a.shape(), a.requires_grad());
  auto av = a.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] + cst;
  macs_ += cv.size();
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return c;
}

Tensor Graph::relu(const Tensor& a) {
  Tensor c = make(a.shape(), a.requires_grad());
  auto av = a.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) cv[i] = av[i] > 0.0 ? av[i] : 0.0;
  macs_ += cv.size();
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < go.size(); ++i) ga[i] += ai->v[i] > 0.0 ? go[i] : 0.0;
  });
  return c;
}

Tensor Graph::gelu(const Tensor& a) {
  Tensor c = make(a.shape(), a.requires_grad());
  auto av = a.values();
  auto cv = c.values();
  for (size_t i = 0; i < cv.size(); ++i) {
    const double x = av[i];
    const double u = kGeluAlpha * (x + kGeluCubic * x * x * x);
    cv[i] = 0.5 * x * (1.0 + std::tanh(u));
  }
  macs_ += cv.size();
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < go.size(); ++i) {
      const double x = ai->v[i];
      const double u = kGeluAlpha * (x + kGeluCubic * x * x * x);
      const double t = std::tanh(u);
      const double du = kGeluAlpha * (1.0 + 3.0 * kGeluCubic * x * x);
      ga[i] += go[i] * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
    }
  });
  return c;
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows()) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const int64_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor c = make({m, n}, any_grad({a, b}));
  CMatMap ma(a.values().data(), m, k);
  CMatMap mb(b.values().data(), k, n);
  MatMap(c.values().data(), m, n).noalias() = ma * mb;
  macs_ += static_cast<uint64_t>(m) * static_cast<uint64_t>(k) * static_cast<uint64_t>(n);
  record({a, b}, c,
         [ai = a.impl_ptr(), bi = b.impl_ptr(), ci = c.impl_ptr(), m, k, n](uint64_t ep) {
           CMatMap go(ci->scratch.data(), m, n);
           if (ai->requires_grad) {
             auto& ga = scratch_of(ai.get(), ep);
             CMatMap w(bi->v.data(), k, n);
             MatMap(ga.data(), m, k).noalias() += go * w.transpose();
           }
           if (bi->requires_grad) {
             auto& gb = scratch_of(bi.get(), ep);
             CMatMap x(ai->v.data(), m, k);
             MatMap(gb.data(), k, n).noalias() += x.transpose() * go;
           }
         });
  return c;
}

Tensor Graph::transpose(const Tensor& a) {
  const int64_t m = a.rows(), n = a.cols();
  Tensor c = make({n, m}, a.requires_grad());
  CMatMap ma(a.values().data(), m, n);
  MatMap(c.values().data(), n, m) = ma.transpose();
  macs_ += c.values().size();
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr(), m, n](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    CMatMap go(ci->scratch.data(), n, m);
    MatMap(ga.data(), m, n).noalias() += go.transpose();
  });
  return c;
}

Tensor Graph::add_rowwise(const Tensor& x, const Tensor& bias) {
  const int64_t r = x.rows(), d = x.cols();
  if (bias.numel() != d) {
    throw DimensionError("add_rowwise: bias " + shape_str(bias.shape()) + " vs row width " +
                         std::to_string(d));
  }
  Tensor c = make(x.shape(), any_grad({x, bias}));
  auto xv = x.values(), bv = bias.values();
  auto cv = c.values();
  for (int64_t i = 0; i < r; ++i) {
    for (int64_t j = 0; j < d; ++j) {
      cv[static_cast<size_t>(i * d + j)] = xv[static_cast<size_t>(i * d + j)] + bv[static_cast<size_t>(j)];
    }
  }
  macs_ += cv.size();
  record({x, bias}, c, [xi = x.impl_ptr(), bi = bias.impl_ptr(), ci = c.impl_ptr(), r, d](uint64_t ep) {
    const auto& go = ci->scratch;
    if (xi->requires_grad) {
      auto& gx = scratch_of(xi.get(), ep);
      for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
    }
    if (bi->requires_grad) {
      auto& gb = scratch_of(bi.get(), ep);
      for (int64_t i = 0; i < r; ++i) {
        for (int64_t j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i * d + j)];
      }
    }
  });
  return c;
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor Graph::reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " into " + shape_str(shape));
  }
  Tensor c = make(std::move(shape), a.requires_grad());
  std::copy(a.values().begin(), a.values().end(), c.values().begin());
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
  });
  return c;
}

Tensor Graph::slice_rows(const Tensor& a, int64_t begin, int64_t len) {
  const int64_t m = a.rows(), n = a.cols();
  if (begin < 0 || len < 1 || begin + len > m) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + len) + ") of " + shape_str(a.shape()));
  }
  Tensor c = make({len, n}, a.requires_grad());
  auto av = a.values();
  auto cv = c.values();
  std::copy(av.begin() + begin * n, av.begin() + (begin + len) * n, cv.begin());
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr(), begin, n](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < go.size(); ++i) ga[static_cast<size_t>(begin * n) + i] += go[i];
  });
  return c;
}

Tensor Graph::slice_cols(const Tensor& a, int64_t begin, int64_t len) {
  const int64_t m = a.rows(), n = a.cols();
  if (begin < 0 || len < 1 || begin + len > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " +
                         std::to_string(begin + len) + ") of " + shape_str(a.shape()));
  }
  Tensor c = make({m, len}, a.requires_grad());
  auto av = a.values();
  auto cv = c.values();
  for (int64_t i = 0; i < m; ++i) {
    std::copy(av.begin() + i * n + begin, av.begin() + i * n + begin + len, cv.begin() + i * len);
  }
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr(), m, n, begin, len](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const auto& go = ci->scratch;
    for (int64_t i = 0; i < m; ++i) {
      for (int64_t j = 0; j < len; ++j) {
        ga[static_cast<size_t>(i * n + begin + j)] += go[static_cast<size_t>(i * len + j)];
      }
    }
  });
  return c;
}

Tensor Graph::concat_rows(const Tensor& a, const Tensor& b) {
  const int64_t n = a.cols();
  if (b.cols() != n) {
    throw DimensionError("concat_rows: " + shape_str(a.shape()) + " over " + shape_str(b.shape()));
  }
  const int64_t ra = a.rows(), rb = b.rows();
  Tensor c = make({ra + rb, n}, any_grad({a, b}));
  auto cv = c.values();
  std::copy(a.values().begin(), a.values().end(), cv.begin());
  std::copy(b.values().begin(), b.values().end(), cv.begin() + ra * n);
  record({a, b}, c, [ai = a.impl_ptr(), bi = b.impl_ptr(), ci = c.impl_ptr(), ra, n](uint64_t ep) {
    const auto& go = ci->scratch;
    if (ai->requires_grad) {
      auto& ga = scratch_of(ai.get(), ep);
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[i];
    }
    if (bi->requires_grad) {
      auto& gb = scratch_of(bi.get(), ep);
      const size_t off = static_cast<size_t>(ra * n);
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += go[off + i];
    }
  });
  return c;
}

Tensor Graph::concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no parts");
  const int64_t m = parts[0].rows();
  int64_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.rows() != m) {
      throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()));
    }
    total += p.cols();
    rg = rg || p.requires_grad();
  }
  Tensor c = make({m, total}, rg);
  auto cv = c.values();
  int64_t off = 0;
  for (const auto& p : parts) {
    const int64_t w = p.cols();
    auto pv = p.values();
    for (int64_t i = 0; i < m; ++i) {
      std::copy(pv.begin() + i * w, pv.begin() + (i + 1) * w, cv.begin() + i * total + off);
    }
    off += w;
  }
  if (grad_enabled_ && rg) {
    Node node;
    node.out = c.impl_ptr();
    std::vector<int64_t> widths;
    for (const auto& p : parts) {
      node.ins.push_back(p.impl_ptr());
      widths.push_back(p.cols());
    }
    auto ins = node.ins;
    auto ci = c.impl_ptr();
    node.back = [ins, widths, ci, m, total](uint64_t ep) {
      const auto& go = ci->scratch;
      int64_t off2 = 0;
      for (size_t k = 0; k < ins.size(); ++k) {
        const int64_t w = widths[k];
        if (ins[k]->requires_grad) {
          auto& g = scratch_of(ins[k].get(), ep);
          for (int64_t i = 0; i < m; ++i) {
            for (int64_t j = 0; j < w; ++j) {
              g[static_cast<size_t>(i * w + j)] += go[static_cast<size_t>(i * total + off2 + j)];
            }
          }
        }
        off2 += w;
      }
    };
    nodes_.push_back(std::move(node));
  }
  return c;
}

// ---------------------------------------------------------------------------
// Reductions and model ops

Tensor Graph::sum(const Tensor& a) {
  Tensor c = make({1}, a.requires_grad());
  double s = 0.0;
  for (double x : a.values()) s += x;
  c.values()[0] = s;
  macs_ += a.values().size();
  record({a}, c, [ai = a.impl_ptr(), ci = c.impl_ptr()](uint64_t ep) {
    if (!ai->requires_grad) return;
    auto& ga = scratch_of(ai.get(), ep);
    const double go = ci->scratch[0];
    for (double& g : ga) g += go;
  });
  return c;
}

Tensor Graph::mean_of(std::span<const Tensor> scalars) {
  if (scalars.empty()) throw InputError("mean_of: empty list");
  bool rg = false;
  double s = 0.0;
  for (const auto& t : scalars) {
    if (t.numel() != 1) throw DimensionError("mean_of: non-scalar input " + shape_str(t.shape()));
    s += t.values()[0];
    rg = rg || t.requires_grad();
  }
  const double inv = 1.0 / static_cast<double>(scalars.size());
  Tensor c = make({1}, rg);
  c.values()[0] = s * inv;
  if (grad_enabled_ && rg) {
    Node node;
    node.out = c.impl_ptr();
    for (const auto& t : scalars) node.ins.push_back(t.impl_ptr());
    auto ins = node.ins;
    auto ci = c.impl_ptr();
    node.back = [ins, ci, inv](uint64_t ep) {
      const double go = ci->scratch[0] * inv;
      for (const auto& in : ins) {
        if (in->requires_grad) scratch_of(in.get(), ep)[0] += go;
      }
    };
    nodes_.push_back(std::move(node));
  }
  return c;
}

Tensor Graph::softmax_rows(const Tensor& x) {
  const int64_t r = x.rows(), n = x.cols();
  if (n < 1) throw DimensionError("softmax_rows: empty rows");
  if (!x.all_finite()) throw NumericError("softmax_rows: non-finite input");
  Tensor c = make(x.shape(), x.requires_grad());
  auto xv = x.values();
  auto cv = c.values();
  for (int64_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * n;
    double* out = cv.data() + i * n;
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      out[j] = std::exp(row[j] - mx);
      denom += out[j];
    }
    const double inv = 1.0 / denom;
    for (int64_t j = 0; j < n; ++j) out[j] *= inv;
  }
  macs_ += cv.size() * 2;
  record({x}, c, [xi = x.impl_ptr(), ci = c.impl_ptr(), r, n](uint64_t ep) {
    if (!xi->requires_grad) return;
    auto& gx = scratch_of(xi.get(), ep);
    const auto& go = ci->scratch;
    const auto& s = ci->v;
    for (int64_t i = 0; i < r; ++i) {
      const size_t off = static_cast<size_t>(i * n);
      double dot = 0.0;
      for (int64_t j = 0; j < n; ++j) dot += go[off + j] * s[off + j];
      for (int64_t j = 0; j < n; ++j) gx[off + j] += s[off + j] * (go[off + j] - dot);
    }
  });
  return c;
}

Tensor Graph::log_softmax_rows(const Tensor& x) {
  const int64_t r = x.rows(), n = x.cols();
  if (n < 1) throw DimensionError("log_softmax_rows: empty rows");
  if (!x.all_finite()) throw NumericError("log_softmax_rows: non-finite input");
  Tensor c = make(x.shape(), x.requires_grad());
  auto xv = x.values();
  auto cv = c.values();
  for (int64_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * n;
    double* out = cv.data() + i * n;
    double mx = row[0];
    for (int64_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < n; ++j) denom += std::exp(row[j] - mx);
    const double lse = mx + std::log(denom);
    for (int64_t j = 0; j < n; ++j) out[j] = row[j] - lse;
  }
  macs_ += cv.size() * 2;
  record({x}, c, [xi = x.impl_ptr(), ci = c.impl_ptr(), r, n](uint64_t ep) {
    if (!xi->requires_grad) return;
    auto& gx = scratch_of(xi.get(), ep);
    const auto& go = ci->scratch;
    const auto& logp = ci->v;
    for (int64_t i = 0; i < r; ++i) {
      const size_t off = static_cast<size_t>(i * n);
      double gsum = 0.0;
      for (int64_t j = 0; j < n; ++j) gsum += go[off + j];
      for (int64_t j = 0; j < n; ++j) gx[off + j] += go[off + j] - std::exp(logp[off + j]) * gsum;
    }
  });
  return c;
}

Tensor Graph::layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const int64_t d = gain.numel();
  if (eps <= 0.0) throw ConfigError("layer_norm: eps must be positive");
  if (bias.numel() != d || x.cols() != d) {
    throw DimensionError("layer_norm: width mismatch x=" + shape_str(x.shape()) + " gain=" +
                         shape_str(gain.shape()) + " bias=" + shape_str(bias.shape()));
  }
  const int64_t r = x.rows();
  Tensor c = make(x.shape(), any_grad({x, gain, bias}));
  auto xv = x.values(), gv = gain.values(), bv = bias.values();
  auto cv = c.values();
  // Cache normalized rows and inverse stddevs for backward.
  auto xhat = std::make_shared<std::vector<double>>(static_cast<size_t>(r * d));
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<size_t>(r));
  for (int64_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * d;
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[static_cast<size_t>(i)] = istd;
    for (int64_t j = 0; j < d; ++j) {
      const double xh = (row[j] - mean) * istd;
      (*xhat)[static_cast<size_t>(i * d + j)] = xh;
      cv[static_cast<size_t>(i * d + j)] = xh * gv[static_cast<size_t>(j)] + bv[static_cast<size_t>(j)];
    }
  }
  macs_ += cv.size() * 3;
  record({x, gain, bias}, c,
         [xi = x.impl_ptr(), gi = gain.impl_ptr(), bi = bias.impl_ptr(), ci = c.impl_ptr(), xhat,
          inv_std, r, d](uint64_t ep) {
           const auto& go = ci->scratch;
           if (gi->requires_grad) {
             auto& gg = scratch_of(gi.get(), ep);
             for (int64_t i = 0; i < r; ++i) {
               for (int64_t j = 0; j < d; ++j) {
                 gg[static_cast<size_t>(j)] +=
                     go[static_cast<size_t>(i * d + j)] * (*xhat)[static_cast<size_t>(i * d + j)];
               }
             }
           }
           if (bi->requires_grad) {
             auto& gb = scratch_of(bi.get(), ep);
             for (int64_t i = 0; i < r; ++i) {
               for (int64_t j = 0; j < d; ++j) gb[static_cast<size_t>(j)] += go[static_cast<size_t>(i * d + j)];
             }
           }
           if (xi->requires_grad) {
             auto& gx = scratch_of(xi.get(), ep);
             for (int64_t i = 0; i < r; ++i) {
               const size_t off = static_cast<size_t>(i * d);
               double m1 = 0.0, m2 = 0.0;
               for (int64_t j = 0; j < d; ++j) {
                 const double t = go[off + j] * gi->v[static_cast<size_t>(j)];
                 m1 += t;
                 m2 += t * (*xhat)[off + j];
               }
               m1 /= static_cast<double>(d);
               m2 /= static_cast<double>(d);
               const double istd = (*inv_std)[static_cast<size_t>(i)];
               for (int64_t j = 0; j < d; ++j) {
                 const double t = go[off + j] * gi->v[static_cast<size_t>(j)];
                 gx[off + j] += istd * (t - m1 - (*xhat)[off + j] * m2);
               }
             }
           }
         });
  return c;
}

Tensor Graph::embedding(const Tensor& table, std::span<const int> ids) {
  const int64_t v = table.rows(), d = table.cols();
  if (ids.empty()) throw InputError("embedding: empty id list");
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw InputError("embedding: id " + std::to_string(id) + " outside table of " +
                       std::to_string(v) + " rows");
    }
  }
  const int64_t t = static_cast<int64_t>(ids.size());
  Tensor c = make({t, d}, table.requires_grad());
  auto tv = table.values();
  auto cv = c.values();
  for (int64_t i = 0; i < t; ++i) {
    std::copy(tv.begin() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
              tv.begin() + (static_cast<int64_t>(ids[static_cast<size_t>(i)]) + 1) * d,
              cv.begin() + i * d);
  }
  std::vector<int> ids_copy(ids.begin(), ids.end());
  record({table}, c, [ti = table.impl_ptr(), ci = c.impl_ptr(), ids_copy, d](uint64_t ep) {
    if (!ti->requires_grad) return;
    auto& gt = scratch_of(ti.get(), ep);
    const auto& go = ci->scratch;
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      const size_t dst = static_cast<size_t>(ids_copy[i]) * static_cast<size_t>(d);
      const size_t src = i * static_cast<size_t>(d);
      for (int64_t j = 0; j < d; ++j) gt[dst + static_cast<size_t>(j)] += go[src + static_cast<size_t>(j)];
    }
  });
  return c;
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index) {
  const int64_t t = logits.rows(), v = logits.cols();
  if (static_cast<int64_t>(targets.size()) != t) {
    throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(t) + " rows");
  }
  int64_t n_valid = 0;
  for (int y : targets) {
    if (y == ignore_index) continue;
    if (y < 0 || y >= v) {
      throw InputError("cross_entropy: target " + std::to_string(y) + " outside vocab of " +
                       std::to_string(v));
    }
    ++n_valid;
  }
  if (n_valid == 0) throw NumericError("cross_entropy: every position ignored, mean undefined");

  auto lse = std::make_shared<std::vector<double>>(static_cast<size_t>(t));
  auto xv = logits.values();
  double loss = 0.0;
  for (int64_t i = 0; i < t; ++i) {
    if (targets[static_cast<size_t>(i)] == ignore_index) continue;
    const double* row = xv.data() + i * v;
    double mx = row[0];
    for (int64_t j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < v; ++j) denom += std::exp(row[j] - mx);
    const double l = mx + std::log(denom);
    (*lse)[static_cast<size_t>(i)] = l;
    loss += l - row[targets[static_cast<size_t>(i)]];
  }
  loss /= static_cast<double>(n_valid);

  Tensor c = make({1}, logits.requires_grad());
  c.values()[0] = loss;
  macs_ += static_cast<uint64_t>(t) * static_cast<uint64_t>(v) * 2;
  std::vector<int> tg(targets.begin(), targets.end());
  record({logits}, c,
         [li = logits.impl_ptr(), ci = c.impl_ptr(), lse, tg, ignore_index, t, v, n_valid](uint64_t ep) {
           if (!li->requires_grad) return;
           auto& gl = scratch_of(li.get(), ep);
           const double go = ci->scratch[0] / static_cast<double>(n_valid);
           for (int64_t i = 0; i < t; ++i) {
             const int y = tg[static_cast<size_t>(i)];
             if (y == ignore_index) continue;
             const double* row = li->v.data() + i * v;
             const double l = (*lse)[static_cast<size_t>(i)];
             double* g = gl.data() + i * v;
             for (int64_t j = 0; j < v; ++j) g[j] += go * std::exp(row[j] - l);
             g[y] -= go;
           }
         });
  return c;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking

double grad_check(const std::function<Tensor(Graph&)>& build_loss, std::span<Tensor> params,
                  double h, int max_coords, uint64_t seed) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ConfigError("grad_check: h must lie in [1e-7, 1e-3]");
  for (auto& p : params) {
    if (!p.requires_grad()) throw ConfigError("grad_check: parameter without requires_grad");
    p.zero_grad();
  }

  Graph g;
  Tensor loss = build_loss(g);
  if (loss.numel() != 1) throw DimensionError("grad_check: loss must be scalar");
  g.backward(loss);
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  auto eval = [&]() {
    Graph ng(false);
    const double val = build_loss(ng).item();
    if (!std::isfinite(val)) throw NumericError("grad_check: non-finite loss during differencing");
    return val;
  };

  Rng rng(seed);
  double max_rel = 0.0;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    auto vals = params[pi].values();
    const int64_t n = params[pi].numel();
    std::vector<int64_t> coords;
    if (n <= max_coords) {
      for (int64_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::unordered_set<int64_t> seen;
      while (static_cast<int>(coords.size()) < max_coords) {
        const int64_t i = rng.uniform_int(n);
        if (seen.insert(i).second) coords.push_back(i);
      }
    }
    for (int64_t ci : coords) {
      const double old = vals[static_cast<size_t>(ci)];
      vals[static_cast<size_t>(ci)] = old + h;
      const double fp = eval();
      vals[static_cast<size_t>(ci)] = old - h;
      const double fm = eval();
      vals[static_cast<size_t>(ci)] = old;
      const double numeric = (fp - fm) / (2.0 * h);
      const double ana = analytic[pi][static_cast<size_t>(ci)];
      const double rel = std::abs(ana - numeric) / (std::abs(ana) + std::abs(numeric) + 1e-12);
      max_rel = std::max(max_rel, rel);
    }
  }
  return max_rel;
}

}  // namespace fedcustom
