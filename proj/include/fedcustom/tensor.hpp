// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The fedcustom Authors

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fedcustom/errors.hpp"
#include "fedcustom/rng.hpp"

namespace fedcustom {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> v;       // row-major values
  bool requires_grad = false;
  std::vector<double> g;       // persistent gradient, sized iff requires_grad
  std::vector<double> scratch; // per-backward-pass buffer
  uint64_t scratch_epoch = 0;
  uint64_t flush_epoch = 0;
};

}  // namespace detail

// Dense 64-bit tensor with value semantics over shared storage. A Tensor is
// a handle: copies alias the same buffer, clone() deep-copies. Gradients are
// held on the tensor itself and accumulate additively across backward passes
// until zero_grad().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor of(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  // Entries drawn i.i.d. normal(0, stddev).
  static Tensor randn(Shape shape, Rng& rng, double stddev, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t numel() const { return static_cast<int64_t>(impl_->v.size()); }
  int64_t dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(impl_->shape.size()); }
  // 2-D accessors; a 1-D tensor counts as one row.
  int64_t rows() const;
  int64_t cols() const;

  std::span<double> values() { return impl_->v; }
  std::span<const double> values() const { return impl_->v; }

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg);
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  double item() const;
  double operator()(int64_t i, int64_t j) const;
  double& at(int64_t i, int64_t j);

  // Deep copy of values and requires_grad; gradient starts at zero.
  Tensor clone() const;
  void copy_values_from(const Tensor& other);

  bool all_finite() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

// Reverse-mode tape. Operations record one node each; backward() walks the
// tape in exact reverse order, propagating through per-pass scratch buffers
// and then flushing into each requires_grad tensor's persistent gradient.
// Flushing (rather than propagating in place) is what makes repeated
// backward calls exactly additive.
//
// A Graph is single-threaded. Tensors that carry no graph linkage are plain
// value snapshots and may be shared across graphs and threads; anything a
// no-grad forward touches is left untouched.
class Graph {
 public:
  explicit Graph(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

  bool grad_enabled() const { return grad_enabled_; }
  size_t node_count() const { return nodes_.size(); }
  uint64_t mac_count() const { return macs_; }
  void clear();

  // --- elementwise ---
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double c);
  Tensor add_scalar(const Tensor& a, double c);
  Tensor relu(const Tensor& a);
  Tensor gelu(const Tensor& a);  // tanh approximation

  // --- linear algebra (2-D) ---
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  // x[R x d] + bias[d], broadcast over rows; the only implicit broadcast.
  Tensor add_rowwise(const Tensor& x, const Tensor& bias);

  // --- shape ---
  Tensor reshape(const Tensor& a, Shape shape);
  Tensor slice_rows(const Tensor& a, int64_t begin, int64_t len);
  Tensor slice_cols(const Tensor& a, int64_t begin, int64_t len);
  Tensor concat_rows(const Tensor& a, const Tensor& b);
  Tensor concat_cols(std::span<const Tensor> parts);

  // --- reductions & model ops ---
  Tensor sum(const Tensor& a);
  Tensor mean_of(std::span<const Tensor> scalars);
  Tensor softmax_rows(const Tensor& x);
  Tensor log_softmax_rows(const Tensor& x);
  Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
  Tensor embedding(const Tensor& table, std::span<const int> ids);
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets, int ignore_index);

  void backward(const Tensor& root);

 private:
  struct Node {
    std::vector<std::shared_ptr<detail::TensorImpl>> ins;
    std::shared_ptr<detail::TensorImpl> out;
    std::function<void(uint64_t)> back;
  };

  Tensor make(Shape shape, bool needs_grad);
  void record(std::initializer_list<Tensor> ins, const Tensor& out,
              std::function<void(uint64_t)> back);
  static bool any_grad(std::initializer_list<Tensor> ts);

  std::vector<Node> nodes_;
  uint64_t macs_ = 0;
  bool grad_enabled_;
};

// Maximum relative error between analytic gradients and central finite
// differences, sampled over at most `max_coords` coordinates per parameter.
// `build_loss` must rebuild the loss from current parameter values each call.
double grad_check(const std::function<Tensor(Graph&)>& build_loss,
                  std::span<Tensor> params, double h, int max_coords = 64,
                  uint64_t seed = 0x6a09e667f3bcc908ull);

}  // namespace fedcustom
