#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "sbir/distributions.hpp"
#include "sbir/rng.hpp"
#include "sbir/types.hpp"

namespace sbir {

enum class FailureReason { kNone, kNan, kInf, kProtocolError, kTimeout };

std::string reason_name(FailureReason r);

// One entry per batch row; reason is kNone exactly for valid rows.
struct ValidityMask {
  std::vector<bool> valid;
  std::vector<FailureReason> reason;

  Index size() const { return static_cast<Index>(valid.size()); }
  Index n_valid() const;
  Index n_with(FailureReason r) const;
  void resize(Index n);
  void mark_failed(Index row, FailureReason r);
};

// Per-row simulator: one parameter vector in, one output vector out. The rng
// stream is seeded per (master seed, round, row), which makes results
// independent of worker count. Throwing marks the row as protocol-error.
using RowSimulatorFn = std::function<Vector(const Vector& theta, RngStream& rng)>;

// Vectorized simulator: whole batch in one call, with the same per-row seeds
// the row-wise path would use.
using BatchSimulatorFn =
    std::function<Matrix(const Matrix& theta, const std::vector<std::uint64_t>& row_seeds)>;

class ExternalSimulator;

// Wraps an in-process function or an external process behind one contract:
// every input row yields exactly one output row or a per-row failure marker,
// in input order, for any worker count.
class Simulator {
 public:
  static Simulator in_process(std::string name, Index theta_dim, RowSimulatorFn fn,
                              Index workers = 1);
  static Simulator in_process_batched(std::string name, Index theta_dim,
                                      BatchSimulatorFn fn);
  // Launches the command (via /bin/sh -c) and performs the protocol handshake;
  // construction fails if the process cannot start or does not handshake.
  static Simulator external(std::string command, Index theta_dim,
                            double timeout_seconds, Index workers = 1);

  const std::string& name() const { return name_; }
  Index theta_dim() const { return theta_dim_; }
  Index x_dim() const { return x_dim_; }
  bool shapes_inferred() const { return x_dim_ > 0; }
  bool batch_capable() const { return static_cast<bool>(batch_fn_); }
  bool is_external() const { return external_ != nullptr; }
  Index workers() const { return workers_; }
  void set_workers(Index w);

  // Runs pilot simulations on prior draws (up to 10 attempts) and fixes the
  // output dimension; scalar outputs count as dimension 1.
  std::pair<Index, Index> infer_shapes(const Prior& prior, std::uint64_t master_seed);

  // Simulates one batch. Invalid rows are poisoned with NaN in the output and
  // flagged in the mask; they are never raised as exceptions. Throws only
  // when the whole batch failed.
  std::pair<DataBatch, ValidityMask> simulate(const ParameterBatch& theta, Index round,
                                              std::uint64_t master_seed);

 private:
  Simulator() = default;

  std::string name_;
  Index theta_dim_ = 0;
  Index x_dim_ = 0;  // 0 until inferred
  Index workers_ = 1;
  RowSimulatorFn row_fn_;
  BatchSimulatorFn batch_fn_;
  std::shared_ptr<ExternalSimulator> external_;
};

// Per-dimension affine standardization fitted on valid rows. Population
// (1/n) standard deviation; near-constant dimensions get scale 1 and are
// flagged.
class Standardizer {
 public:
  Standardizer() = default;

  static Standardizer fit(const DataBatch& x, const std::vector<bool>& valid);
  static Standardizer fit(const DataBatch& x);
  static Standardizer identity(Index dim);

  bool fitted() const { return fitted_; }
  Index dim() const { return mean_.size(); }
  const Vector& mean() const { return mean_; }
  const Vector& scale() const { return scale_; }
  const std::vector<bool>& constant_dims() const { return constant_; }

  Matrix transform(const Matrix& x) const;
  Matrix inverse(const Matrix& z) const;
  Vector transform_row(const Vector& x) const;

 private:
  bool fitted_ = false;
  Vector mean_, scale_;
  std::vector<bool> constant_;
};

}  // namespace sbir
