#pragma once

// Reverse-mode differentiation over dense double tensors.
//
// A Tape records primitives in evaluation order; Var is a lightweight handle
// to one recorded node. Tapes are single-use: backward() consumes the tape.

#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fseb/tensor.hpp"

namespace fseb::ad {

enum class Primitive {
  kLeaf,
  kConstant,
  kMatMul,
  kAdd,
  kSub,
  kScalarMul,
  kMul,
  kTanh,
  kRelu,
  kLogSumExp,
  kLogSoftmax,
  kSum,
  kMean,
  kSquare,
  kQuadFormFixed,
};

const char* primitive_name(Primitive p);

/// Gradient of a scalar loss with respect to each named leaf. Leaves that
/// the loss does not depend on are reported with a zero tensor.
class Gradients {
 public:
  const Tensor& at(const std::string& name) const;
  bool contains(const std::string& name) const { return grads_.count(name) != 0; }
  void set(const std::string& name, Tensor g) { grads_[name] = std::move(g); }
  const std::map<std::string, Tensor>& entries() const { return grads_; }

 private:
  std::map<std::string, Tensor> grads_;
};

class Tape;

class Var {
 public:
  Var() = default;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  Tape* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Differentiable input. Names must be unique on a tape.
  Var leaf(std::string name, Tensor value);
  /// Non-differentiable input.
  Var constant(Tensor value);

  /// Records a primitive. Exposed for the free-function wrappers below.
  Var record(Primitive op, std::vector<std::size_t> inputs, Tensor value, Tensor saved = {},
             double scalar = 0.0, std::shared_ptr<const Tensor> factor = nullptr);

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Accumulates d loss / d leaf for every leaf. The loss must be a scalar
  /// recorded on this tape.
  Gradients backward(const Var& loss);

 private:
  struct Node {
    Primitive op;
    std::vector<std::size_t> inputs;
    Tensor value;
    Tensor saved;
    double scalar = 0.0;
    std::shared_ptr<const Tensor> factor;
    std::string leaf_name;
  };

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> leaf_ids_;
  bool consumed_ = false;
};

Var matmul(const Var& a, const Var& b);
/// Same shapes, or a rank-2 lhs plus a rank-1 (or 1-row) bias applied to
/// every row.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var scalar_mul(const Var& a, double s);
Var mul(const Var& a, const Var& b);
Var tanh(const Var& a);
Var relu(const Var& a);
/// Row-wise log-sum-exp: B x K -> [B]; a vector reduces to a scalar.
Var log_sum_exp(const Var& a);
/// Row-wise log-softmax; shape preserved.
Var log_softmax(const Var& a);
Var sum(const Var& a);
Var mean(const Var& a);
Var square(const Var& a);
/// sum_k v_k^T (L L^T)^{-1} v_k over the columns v_k of an M x K operand
/// (a length-M vector is a single column). L is a constant lower-triangular
/// factor; only v receives gradient, d/dv = 2 (L L^T)^{-1} v.
Var quad_form_fixed(const Var& v, std::shared_ptr<const Tensor> lower_factor);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double s, const Var& a) { return scalar_mul(a, s); }

/// Central-difference estimate of the gradient of a scalar function of a
/// set of named tensors.
using ScalarFn = std::function<double(const std::map<std::string, Tensor>&)>;
Gradients finite_difference_grad(const ScalarFn& fn, const std::map<std::string, Tensor>& params,
                                 double step = 1e-5);

/// Norm-wise relative error: max|a - b| / max(max|a|, max|b|, floor), with
/// maxima taken over every coordinate of every leaf.
double max_relative_error(const Gradients& a, const Gradients& b, double floor = 1e-8);

}  // namespace fseb::ad
