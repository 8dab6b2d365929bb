#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "msmamba/errors.hpp"

namespace msmamba {

/// Extents of a dense row-major array. All extents are positive.
using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);  // throws ShapeError on non-positive extents

class Tape;

/// Dense f64 array with shared storage. When a Tape is active on the current
/// thread, operations on Tensors are recorded so that Tape::backward can
/// produce gradients for every requires-grad leaf.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double v);
  static Tensor scalar(double v);
  /// Leaf with requires-grad set; the trainable-parameter constructor.
  static Tensor param(Shape shape, std::vector<double> values);

  bool defined() const { return static_cast<bool>(data_); }
  const Shape& shape() const { return shape_; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_ ? data_->size() : 0); }
  bool requires_grad() const { return requires_grad_; }

  std::span<const double> values() const { return {data_->data(), data_->size()}; }
  /// Mutable view for optimizers and finite-difference probes. Only valid
  /// between forward passes; recorded graphs keep their own value handles.
  std::span<double> values_mut() { return {data_->data(), data_->size()}; }

  double operator[](std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  /// Value of a one-element tensor.
  double item() const;

  /// Storage identity; two Tensors sharing storage are the same parameter.
  const void* id() const { return data_.get(); }
  /// Deep copy with fresh storage (used for checkpoints/best-epoch restore).
  Tensor clone() const;
  /// Overwrite this tensor's storage from another of identical shape.
  void copy_values_from(const Tensor& src);

 private:
  friend class Tape;
  friend struct OpAccess;

  std::shared_ptr<std::vector<double>> data_;
  Shape shape_;
  bool requires_grad_ = false;
  // Trace handle; valid only while the tape of matching generation lives.
  mutable std::uint64_t tape_gen_ = 0;
  mutable int node_ = -1;
};

/// Gradients keyed by parameter storage identity.
class GradientMap {
 public:
  bool contains(const Tensor& p) const { return grads_.count(p.id()) != 0; }
  /// Gradient of the loss w.r.t. p; zeros of p's shape when the loss never
  /// touched p.
  Tensor get(const Tensor& p) const;
  const Tensor& at(const Tensor& p) const;
  void set(const Tensor& p, Tensor grad);
  std::size_t size() const { return grads_.size(); }

 private:
  friend class Tape;
  std::unordered_map<const void*, Tensor> grads_;
};

/// Reverse-mode tape. Construct one per forward pass; it installs itself as
/// the current tape for this thread and records every Tensor op until
/// backward() consumes it. One active tape per thread; distinct threads may
/// each run their own.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();

  /// Gradients of a scalar traced loss w.r.t. every requires-grad leaf.
  /// Consumes the graph; a second call throws GraphError.
  GradientMap backward(const Tensor& loss);

  bool consumed() const { return consumed_; }
  std::size_t node_count() const;

 private:
  friend struct OpAccess;
  struct Node;

  int node_for(const Tensor& t);  // lazily registers leaves
  std::uint64_t gen_ = 0;
  bool consumed_ = false;
  std::vector<Node> nodes_;
  std::unordered_map<const void*, int> leaf_by_storage_;
};

// ---- differentiable operations -------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);

// Binary pointwise; the smaller operand may broadcast over the leading
// dimensions of the larger one (trailing-dimension broadcasting only).
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);

Tensor exp(const Tensor& x);
Tensor softplus(const Tensor& x);  // ln(1+e^x); returns x verbatim for x > 30
Tensor silu(const Tensor& x);
Tensor relu(const Tensor& x);

Tensor mean(const Tensor& x);  // scalar
Tensor sum(const Tensor& x);   // scalar

/// Normalize the last axis to mean 0 / variance 1, then apply gain and bias.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);
/// Scale the last axis by 1/sqrt(mean(x^2)+eps), then apply gain.
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);

/// Depthwise causal convolution over the row axis of x [seq x ch].
/// w has shape [width x ch] (row k multiplies the input k-(width-1) rows back),
/// b has shape [ch].
Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& b);

/// Diagonal selective-state-space recurrence (see ssm.hpp for the wrapper
/// that derives delta/B/C from the input). Shapes:
///   x [seq x d_inner], delta [seq x d_inner] (strictly positive),
///   b_seq, c_seq [seq x d_state], a_diag [d_inner x d_state], skip [d_inner].
Tensor selective_scan_node(const Tensor& x, const Tensor& delta, const Tensor& b_seq,
                           const Tensor& c_seq, const Tensor& a_diag, const Tensor& skip);

Tensor transpose(const Tensor& x);          // 2-D only
Tensor reshape(const Tensor& x, Shape s);   // same element count; shares storage
Tensor reverse_rows(const Tensor& x);       // flips the first axis
Tensor pick(const Tensor& x, int index);    // scalar element extraction

// ---- gradient verification -----------------------------------------------

/// Worst relative error between backward() gradients of f and central finite
/// differences over every coordinate of params. f must rebuild its graph on
/// each call and return a scalar; it is evaluated untraced during probing.
double grad_check(const std::function<Tensor()>& f, std::span<const Tensor> params,
                  double step);

}  // namespace msmamba
