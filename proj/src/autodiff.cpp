#include "sbir/autodiff.hpp"

#include <cmath>
#include <utility>

#include "sbir/errors.hpp"

namespace sbir::ad {

namespace {

void require(bool cond, const std::string& msg) {
  if (!cond) throw Error("autodiff: " + msg);
}

void require_same_tape(const Tape* a, const Tape* b) {
  require(a == b, "operands belong to different tapes");
}

}  // namespace

// Accessor used by free functions; keeps Tape internals out of the header.
class TapeAccess {
 public:
  static Tape* tape(const Var& v) { return v.tape_; }
  static Index id(const Var& v) { return v.id_; }
  static const Matrix& node_grad(Tape& t, Index id) { return t.node(id).grad; }
  static const Matrix& value(const Var& v) {
    require(v.tape_ != nullptr, "use of default-constructed Var");
    return v.tape_->node(v.id_).value;
  }
  static bool needs_grad(const Var& v) { return v.tape_->node(v.id_).needs_grad; }
  static void accumulate(Tape& t, Index id, const Matrix& g) { t.accumulate(id, g); }
  static const Matrix& node_value(const Tape& t, Index id) { return t.node(id).value; }
  static Var wrap(Tape* t, Index id) { return Var(t, id); }
};

const Matrix& Var::value() const { return TapeAccess::value(*this); }

Var Tape::push(const char* op, Matrix value, bool needs_grad,
               std::function<void(Tape&, Index)> backprop) {
  Node n;
  n.value = std::move(value);
  n.op = op;
  n.needs_grad = record_ && needs_grad;
  if (n.needs_grad) n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<Index>(nodes_.size()) - 1);
}

Var Tape::leaf(Matrix value) { return push("leaf", std::move(value), true, {}); }

Var Tape::constant(Matrix value) { return push("const", std::move(value), false, {}); }

void Tape::accumulate(Index id, const Matrix& g) {
  Node& n = node(id);
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  n.grad += g;
}

void Tape::backward(const Var& loss) {
  require(record_, "backward() on a non-recording tape");
  require(TapeAccess::tape(loss) == this, "loss Var belongs to a different tape");
  const Index lid = TapeAccess::id(loss);
  const Matrix& lv = node(lid).value;
  require(lv.rows() == 1 && lv.cols() == 1, "loss must be scalar (1x1)");
  if (!std::isfinite(lv(0, 0))) {
    // Find the first primitive whose output went non-finite; that is the
    // actionable one for the caller.
    for (Index i = 0; i <= lid; ++i) {
      if (!node(i).value.allFinite()) {
        throw NumericError(std::string("non-finite loss; first non-finite value "
                                       "produced by primitive '") +
                           node(i).op + "'");
      }
    }
    throw NumericError("non-finite loss");
  }
  if (ran_backward_) {
    for (auto& n : nodes_) n.grad.resize(0, 0);
  }
  ran_backward_ = true;
  accumulate(lid, Matrix::Ones(1, 1));
  for (Index i = lid; i >= 0; --i) {
    Node& n = node(i);
    if (!n.needs_grad || !n.backprop) continue;
    if (n.grad.size() == 0) continue;  // node never influenced the loss
    n.backprop(*this, i);
  }
}

Matrix Tape::grad(const Var& v) const {
  require(TapeAccess::tape(v) == this, "Var belongs to a different tape");
  const Node& n = node(TapeAccess::id(v));
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

const Matrix& Tape::value(const Var& v) const {
  require(TapeAccess::tape(v) == this, "Var belongs to a different tape");
  return node(TapeAccess::id(v)).value;
}

namespace {

bool any_needs_grad(std::initializer_list<Var> vs) {
  for (const Var& v : vs)
    if (TapeAccess::needs_grad(v)) return true;
  return false;
}

Tape& tape_of(const Var& v) {
  Tape* t = TapeAccess::tape(v);
  require(t != nullptr, "use of default-constructed Var");
  return *t;
}

}  // namespace

Var make_op(Tape& t, const char* name, Matrix value, std::initializer_list<Var> parents,
            std::function<void(Tape&, Index)> backprop) {
  for (const Var& p : parents) require_same_tape(&t, TapeAccess::tape(p));
  const bool needs = t.recording() && any_needs_grad(parents);
  return t.push(name, std::move(value), needs, needs ? std::move(backprop) : nullptr);
}

Var make_op(Tape& t, const char* name, Matrix value, const std::vector<Var>& parents,
            std::function<void(Tape&, Index)> backprop) {
  bool needs = false;
  for (const Var& p : parents) {
    require_same_tape(&t, TapeAccess::tape(p));
    if (TapeAccess::needs_grad(p)) needs = true;
  }
  needs = needs && t.recording();
  return t.push(name, std::move(value), needs, needs ? std::move(backprop) : nullptr);
}

namespace {

// Shorthands used by the backward closures.
Index idof(const Var& v) { return TapeAccess::id(v); }
const Matrix& val(const Var& v) { return TapeAccess::value(v); }
const Matrix& gradient_of(Tape& t, Index id) {
  // Only called from backprop closures, where the gradient is already set.
  return TapeAccess::node_grad(t, id);
}

}  // namespace

// Each op reads parent values back out of the tape inside its closure, so
// closures only capture ids and small constants.

Var operator+(const Var& a, const Var& b) {
  require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
          "add: shape mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a), ib = idof(b);
  return make_op(t, "add", val(a) + val(b), {a, b}, [ia, ib](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    TapeAccess::accumulate(t, ia, g);
    TapeAccess::accumulate(t, ib, g);
  });
}

Var operator-(const Var& a, const Var& b) {
  require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
          "sub: shape mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a), ib = idof(b);
  return make_op(t, "sub", val(a) - val(b), {a, b}, [ia, ib](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    TapeAccess::accumulate(t, ia, g);
    TapeAccess::accumulate(t, ib, -g);
  });
}

Var operator*(const Var& a, const Var& b) {
  require(val(a).rows() == val(b).rows() && val(a).cols() == val(b).cols(),
          "mul: shape mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a), ib = idof(b);
  return make_op(t, "mul", val(a).cwiseProduct(val(b)), {a, b},
                 [ia, ib](Tape& t, Index self) {
                   const Matrix& g = gradient_of(t, self);
                   TapeAccess::accumulate(t, ia,
                                          g.cwiseProduct(TapeAccess::node_value(t, ib)));
                   TapeAccess::accumulate(t, ib,
                                          g.cwiseProduct(TapeAccess::node_value(t, ia)));
                 });
}

Var operator-(const Var& a) { return scale(a, -1.0); }

Var scale(const Var& a, double c) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "scale", c * val(a), {a}, [ia, c](Tape& t, Index self) {
    TapeAccess::accumulate(t, ia, c * gradient_of(t, self));
  });
}

Var add_scalar(const Var& a, double c) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "add_scalar", (val(a).array() + c).matrix(), {a}, [ia](Tape& t, Index self) {
    TapeAccess::accumulate(t, ia, gradient_of(t, self));
  });
}

Var matmul(const Var& a, const Var& b) {
  require(val(a).cols() == val(b).rows(), "matmul: inner dimension mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a), ib = idof(b);
  return make_op(t, "matmul", val(a) * val(b), {a, b}, [ia, ib](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    TapeAccess::accumulate(t, ia, g * TapeAccess::node_value(t, ib).transpose());
    TapeAccess::accumulate(t, ib, TapeAccess::node_value(t, ia).transpose() * g);
  });
}

Var linear(const Var& x, const Var& w, const Var& b, const Matrix* mask) {
  const Index in_dim = val(x).cols();
  const Index out_dim = val(w).rows();
  require(val(w).cols() == in_dim, "linear: weight shape mismatch");
  require(val(b).rows() == 1 && val(b).cols() == out_dim,
          "linear: bias must be a 1 x out row vector");
  if (mask != nullptr)
    require(mask->rows() == out_dim && mask->cols() == in_dim,
            "linear: mask shape mismatch");

  Tape& t = tape_of(x);
  Index ix = idof(x), iw = idof(w), ib = idof(b);
  Matrix w_eff = mask ? val(w).cwiseProduct(*mask) : val(w);
  Matrix out = (val(x) * w_eff.transpose()).rowwise() + val(b).row(0);
  return make_op(t, "linear", std::move(out), {x, w, b},
                 [ix, iw, ib, mask](Tape& t, Index self) {
                   const Matrix& g = gradient_of(t, self);
                   const Matrix& xv = TapeAccess::node_value(t, ix);
                   const Matrix& wv = TapeAccess::node_value(t, iw);
                   Matrix w_eff = mask ? wv.cwiseProduct(*mask) : wv;
                   TapeAccess::accumulate(t, ix, g * w_eff);
                   Matrix gw = g.transpose() * xv;
                   if (mask) gw = gw.cwiseProduct(*mask);
                   TapeAccess::accumulate(t, iw, gw);
                   TapeAccess::accumulate(t, ib, g.colwise().sum());
                 });
}

Var tanh(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "tanh", val(a).array().tanh().matrix(), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& y = TapeAccess::node_value(t, self);
    TapeAccess::accumulate(t, ia, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var relu(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "relu", val(a).cwiseMax(0.0), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    TapeAccess::accumulate(
        t, ia, (g.array() * (x.array() > 0.0).cast<double>()).matrix());
  });
}

Var softplus(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  // max(x,0) + log1p(exp(-|x|)) is exact and overflow-safe.
  Matrix v = val(a).unaryExpr(
      [](double x) { return std::fmax(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); });
  return make_op(t, "softplus", std::move(v), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    Matrix sig = x.unaryExpr([](double u) { return 1.0 / (1.0 + std::exp(-u)); });
    TapeAccess::accumulate(t, ia, g.cwiseProduct(sig));
  });
}

Var exp(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "exp", val(a).array().exp().matrix(), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& y = TapeAccess::node_value(t, self);
    TapeAccess::accumulate(t, ia, g.cwiseProduct(y));
  });
}

Var log(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "log", val(a).array().log().matrix(), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    TapeAccess::accumulate(t, ia, g.cwiseQuotient(x));
  });
}

Var square(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "square", val(a).array().square().matrix(), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    TapeAccess::accumulate(t, ia, 2.0 * g.cwiseProduct(x));
  });
}

Var sum(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  Matrix v(1, 1);
  v(0, 0) = val(a).sum();
  return make_op(t, "sum", std::move(v), {a}, [ia](Tape& t, Index self) {
    const double g = gradient_of(t, self)(0, 0);
    const Matrix& x = TapeAccess::node_value(t, ia);
    TapeAccess::accumulate(t, ia, Matrix::Constant(x.rows(), x.cols(), g));
  });
}

Var mean_all(const Var& a) {
  const double n = static_cast<double>(val(a).size());
  require(n > 0, "mean_all: empty operand");
  return scale(sum(a), 1.0 / n);
}

Var row_sum(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "row_sum", val(a).rowwise().sum(), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    TapeAccess::accumulate(t, ia, g.col(0).replicate(1, x.cols()));
  });
}

Var logsumexp_rows(const Var& a) {
  Tape& t = tape_of(a);
  Index ia = idof(a);
  const Matrix& x = val(a);
  Vector m = x.rowwise().maxCoeff();
  Matrix shifted = x.colwise() - m;
  Vector lse = (m.array() + shifted.array().exp().rowwise().sum().log()).matrix();
  return make_op(t, "logsumexp_rows", lse, {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    const Matrix& lse = TapeAccess::node_value(t, self);
    Matrix softmax = (x.colwise() - lse.col(0)).array().exp();
    TapeAccess::accumulate(
        t, ia, (softmax.array().colwise() * g.col(0).array()).matrix());
  });
}

Var slice_cols(const Var& a, Index first, Index n) {
  require(first >= 0 && n >= 0 && first + n <= val(a).cols(),
          "slice_cols: range out of bounds");
  Tape& t = tape_of(a);
  Index ia = idof(a);
  return make_op(t, "slice_cols", val(a).middleCols(first, n), {a},
                 [ia, first, n](Tape& t, Index self) {
                   const Matrix& g = gradient_of(t, self);
                   const Matrix& x = TapeAccess::node_value(t, ia);
                   Matrix gx = Matrix::Zero(x.rows(), x.cols());
                   gx.middleCols(first, n) = g;
                   TapeAccess::accumulate(t, ia, gx);
                 });
}

Var hstack(const std::vector<Var>& parts) {
  require(!parts.empty(), "hstack: no parts");
  Tape& t = tape_of(parts.front());
  const Index rows = val(parts.front()).rows();
  Index cols = 0;
  for (const Var& p : parts) {
    require(val(p).rows() == rows, "hstack: row count mismatch");
    cols += val(p).cols();
  }
  Matrix v(rows, cols);
  std::vector<Index> ids, widths;
  Index at = 0;
  for (const Var& p : parts) {
    v.middleCols(at, val(p).cols()) = val(p);
    ids.push_back(idof(p));
    widths.push_back(val(p).cols());
    at += val(p).cols();
  }
  return make_op(t, "hstack", std::move(v), parts,
                 [ids, widths](Tape& t, Index self) {
                   const Matrix& g = gradient_of(t, self);
                   Index at = 0;
                   for (std::size_t k = 0; k < ids.size(); ++k) {
                     TapeAccess::accumulate(t, ids[k], g.middleCols(at, widths[k]));
                     at += widths[k];
                   }
                 });
}

Var sub_col(const Var& a, const Var& col) {
  require(val(col).cols() == 1 && val(col).rows() == val(a).rows(),
          "sub_col: column shape mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a), ic = idof(col);
  Matrix v = val(a).colwise() - val(col).col(0);
  return make_op(t, "sub_col", std::move(v), {a, col}, [ia, ic](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    TapeAccess::accumulate(t, ia, g);
    TapeAccess::accumulate(t, ic, -g.rowwise().sum());
  });
}

Var tile_rows(const Var& a, Index times) {
  require(times >= 1, "tile_rows: times must be >= 1");
  Tape& t = tape_of(a);
  Index ia = idof(a);
  const Index b = val(a).rows();
  return make_op(t, "tile_rows", val(a).replicate(times, 1), {a},
                 [ia, b, times](Tape& t, Index self) {
                   const Matrix& g = gradient_of(t, self);
                   Matrix acc = g.middleRows(0, b);
                   for (Index k = 1; k < times; ++k) acc += g.middleRows(k * b, b);
                   TapeAccess::accumulate(t, ia, acc);
                 });
}

Var permute_cols(const Var& a, const IndexVec& perm) {
  require(static_cast<Index>(perm.size()) == val(a).cols(),
          "permute_cols: permutation length mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a);
  Matrix v(val(a).rows(), val(a).cols());
  for (Index j = 0; j < v.cols(); ++j)
    v.col(j) = val(a).col(perm[static_cast<std::size_t>(j)]);
  return make_op(t, "permute_cols", std::move(v), {a},
                 [ia, perm](Tape& t, Index self) {
                   const Matrix& g = gradient_of(t, self);
                   Matrix gx(g.rows(), g.cols());
                   for (Index j = 0; j < g.cols(); ++j)
                     gx.col(perm[static_cast<std::size_t>(j)]) = g.col(j);
                   TapeAccess::accumulate(t, ia, gx);
                 });
}

Var reshape_colmajor(const Var& a, Index rows, Index cols) {
  require(rows * cols == val(a).size(), "reshape: element count mismatch");
  Tape& t = tape_of(a);
  Index ia = idof(a);
  Matrix v = Eigen::Map<const Matrix>(val(a).data(), rows, cols);
  return make_op(t, "reshape", std::move(v), {a}, [ia](Tape& t, Index self) {
    const Matrix& g = gradient_of(t, self);
    const Matrix& x = TapeAccess::node_value(t, ia);
    TapeAccess::accumulate(
        t, ia, Eigen::Map<const Matrix>(g.data(), x.rows(), x.cols()));
  });
}

double scalar_value(const Var& a) {
  require(val(a).rows() == 1 && val(a).cols() == 1, "scalar_value: not a 1x1 Var");
  return val(a)(0, 0);
}

Vector collect_gradient(Tape& tape, const Var& loss, const std::vector<Var>& params) {
  tape.backward(loss);
  Index total = 0;
  for (const Var& p : params) total += p.value().size();
  Vector out(total);
  Index at = 0;
  for (const Var& p : params) {
    Matrix g = tape.grad(p);
    out.segment(at, g.size()) = Eigen::Map<const Vector>(g.data(), g.size());
    at += g.size();
  }
  return out;
}

Index param_count(const ConstParamRefs& params) {
  Index total = 0;
  for (const Matrix* p : params) total += p->size();
  return total;
}

Vector flatten(const ConstParamRefs& params) {
  Vector out(param_count(params));
  Index at = 0;
  for (const Matrix* p : params) {
    out.segment(at, p->size()) = Eigen::Map<const Vector>(p->data(), p->size());
    at += p->size();
  }
  return out;
}

void unflatten(const Vector& flat, const ParamRefs& params) {
  Index at = 0;
  for (Matrix* p : params) {
    if (at + p->size() > flat.size())
      throw Error("unflatten: flat vector too short for parameter set");
    Eigen::Map<Vector>(p->data(), p->size()) = flat.segment(at, p->size());
    at += p->size();
  }
  if (at != flat.size()) throw Error("unflatten: flat vector length mismatch");
}

}  // namespace sbir::ad
