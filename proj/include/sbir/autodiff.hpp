#pragma once

#include <functional>
#include <string>
#include <vector>

#include "sbir/types.hpp"

namespace sbir::ad {

class Tape;

// Lightweight handle to a tape node. Copying a Var never copies values.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, Index id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  Index id_ = -1;

  friend Var make_op(Tape& t, const char* name, Matrix value,
                     std::initializer_list<Var> parents,
                     std::function<void(Tape&, Index)> backprop);
  friend Var make_op(Tape& t, const char* name, Matrix value,
                     const std::vector<Var>& parents,
                     std::function<void(Tape&, Index)> backprop);
  friend class TapeAccess;
};

// Reverse-mode tape over dense matrices. Every intermediate of a forward
// computation is one node; backward() walks the nodes once in reverse.
//
// A non-recording tape still evaluates all operations but skips closure
// construction, which makes it the single evaluation path for both training
// and plain (gradient-free) model evaluation.
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  // Differentiable input; gradient is tracked when the tape records.
  Var leaf(Matrix value);
  // Non-differentiable input.
  Var constant(Matrix value);

  // Runs reverse accumulation from a 1x1 loss node. Throws NumericError if
  // the loss is not finite, naming the first primitive whose output went
  // non-finite.
  void backward(const Var& loss);

  // Gradient of the last backward() target w.r.t. v (zeros if untouched).
  Matrix grad(const Var& v) const;

  const Matrix& value(const Var& v) const;
  Index size() const { return static_cast<Index>(nodes_.size()); }

 private:
  friend class Var;
  friend class TapeAccess;

  struct Node {
    Matrix value;
    Matrix grad;                 // lazily sized on first accumulation
    const char* op = "";
    bool needs_grad = false;
    std::function<void(Tape&, Index)> backprop;  // empty for leaves/constants
  };

  Var push(const char* op, Matrix value, bool needs_grad,
           std::function<void(Tape&, Index)> backprop);
  void accumulate(Index id, const Matrix& g);
  Node& node(Index id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(Index id) const { return nodes_[static_cast<std::size_t>(id)]; }

  std::vector<Node> nodes_;
  bool record_ = true;
  bool ran_backward_ = false;

  friend Var make_op(Tape& t, const char* name, Matrix value,
                     std::initializer_list<Var> parents,
                     std::function<void(Tape&, Index)> backprop);
  friend Var make_op(Tape& t, const char* name, Matrix value,
                     const std::vector<Var>& parents,
                     std::function<void(Tape&, Index)> backprop);
};

// ---- primitive operations -------------------------------------------------
// Shapes are validated eagerly; mismatches throw sbir::Error.

Var operator+(const Var& a, const Var& b);  // elementwise
Var operator-(const Var& a, const Var& b);
Var operator*(const Var& a, const Var& b);  // elementwise (Hadamard)
Var operator-(const Var& a);

Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);

Var matmul(const Var& a, const Var& b);

// x (B x in) -> x * W^T + b broadcast over rows; W is (out x in), b (out).
// When mask is non-null the effective weight is W .* mask; the mask must
// outlive the tape.
Var linear(const Var& x, const Var& w, const Var& b, const Matrix* mask = nullptr);

Var tanh(const Var& a);
Var relu(const Var& a);
Var softplus(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var square(const Var& a);

Var sum(const Var& a);       // 1x1
Var mean_all(const Var& a);  // 1x1
Var row_sum(const Var& a);   // B x 1
Var logsumexp_rows(const Var& a);  // B x 1, max-shifted

Var slice_cols(const Var& a, Index first, Index n);
Var hstack(const std::vector<Var>& parts);
Var sub_col(const Var& a, const Var& col);  // a - col * ones^T
Var tile_rows(const Var& a, Index times);
Var permute_cols(const Var& a, const IndexVec& perm);  // out.col(j) = a.col(perm[j])
Var reshape_colmajor(const Var& a, Index rows, Index cols);

double scalar_value(const Var& a);

// Gradient of a scalar loss with respect to an ordered set of parameter
// leaves, flattened column-major per leaf and concatenated.
Vector collect_gradient(Tape& tape, const Var& loss, const std::vector<Var>& params);

// ---- flat parameter plumbing ----------------------------------------------

using ParamRefs = std::vector<Matrix*>;
using ConstParamRefs = std::vector<const Matrix*>;

Index param_count(const ConstParamRefs& params);
Vector flatten(const ConstParamRefs& params);
void unflatten(const Vector& flat, const ParamRefs& params);

}  // namespace sbir::ad
