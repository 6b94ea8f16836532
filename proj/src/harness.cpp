#include "sbir/harness.hpp"

#include <cmath>
#include <thread>

#include "sbir/errors.hpp"
#include "sbir/external_sim.hpp"

namespace sbir {

std::string reason_name(FailureReason r) {
  switch (r) {
    case FailureReason::kNone: return "none";
    case FailureReason::kNan: return "nan";
    case FailureReason::kInf: return "inf";
    case FailureReason::kProtocolError: return "protocol-error";
    case FailureReason::kTimeout: return "timeout";
  }
  return "?";
}

Index ValidityMask::n_valid() const {
  Index n = 0;
  for (bool v : valid) n += v ? 1 : 0;
  return n;
}

Index ValidityMask::n_with(FailureReason r) const {
  Index n = 0;
  for (FailureReason x : reason) n += x == r ? 1 : 0;
  return n;
}

void ValidityMask::resize(Index n) {
  valid.assign(static_cast<std::size_t>(n), true);
  reason.assign(static_cast<std::size_t>(n), FailureReason::kNone);
}

void ValidityMask::mark_failed(Index row, FailureReason r) {
  valid[static_cast<std::size_t>(row)] = false;
  reason[static_cast<std::size_t>(row)] = r;
}

Simulator Simulator::in_process(std::string name, Index theta_dim, RowSimulatorFn fn,
                                Index workers) {
  if (theta_dim < 1) throw Error("Simulator: theta_dim must be >= 1");
  if (workers < 1) throw Error("Simulator: workers must be >= 1");
  Simulator s;
  s.name_ = std::move(name);
  s.theta_dim_ = theta_dim;
  s.row_fn_ = std::move(fn);
  s.workers_ = workers;
  return s;
}

Simulator Simulator::in_process_batched(std::string name, Index theta_dim,
                                        BatchSimulatorFn fn) {
  if (theta_dim < 1) throw Error("Simulator: theta_dim must be >= 1");
  Simulator s;
  s.name_ = std::move(name);
  s.theta_dim_ = theta_dim;
  s.batch_fn_ = std::move(fn);
  return s;
}

Simulator Simulator::external(std::string command, Index theta_dim,
                              double timeout_seconds, Index workers) {
  if (theta_dim < 1) throw Error("Simulator: theta_dim must be >= 1");
  Simulator s;
  s.name_ = "external:" + command;
  s.theta_dim_ = theta_dim;
  s.workers_ = workers;  // recorded; the wire pipeline itself is sequential
  s.external_ = std::make_shared<ExternalSimulator>(std::move(command), timeout_seconds);
  return s;
}

void Simulator::set_workers(Index w) {
  if (w < 1) throw Error("Simulator: workers must be >= 1");
  workers_ = w;
}

namespace {

// Flags NaN/Inf rows; rows of the wrong length were already marked.
void validate_row(const Vector& x, Index expected_dim, Index row, Matrix& out,
                  ValidityMask& mask) {
  if (x.size() != expected_dim) {
    mask.mark_failed(row, FailureReason::kProtocolError);
    return;
  }
  bool has_nan = false, has_inf = false;
  for (Index d = 0; d < x.size(); ++d) {
    if (std::isnan(x[d])) has_nan = true;
    else if (std::isinf(x[d])) has_inf = true;
  }
  if (has_nan || has_inf) {
    mask.mark_failed(row, has_nan ? FailureReason::kNan : FailureReason::kInf);
    return;
  }
  out.row(row) = x.transpose();
}

}  // namespace

std::pair<Index, Index> Simulator::infer_shapes(const Prior& prior,
                                                std::uint64_t master_seed) {
  if (prior.dim() != theta_dim_)
    throw Error("infer_shapes: prior dimension does not match simulator theta_dim");
  if (shapes_inferred()) return {theta_dim_, x_dim_};

  RngStream pilot_rng(seed_from(master_seed, streams::kSimulator, 0));
  std::string last_failure = "no output";
  for (int attempt = 0; attempt < 10; ++attempt) {
    ParameterBatch theta = prior.sample(1, pilot_rng);
    const std::uint64_t row_seed =
        seed_from(master_seed, streams::kSimulator, 0, static_cast<std::uint64_t>(attempt));
    try {
      Vector x;
      if (external_) {
        Matrix out;
        ValidityMask mask;
        const Index dim = external_->simulate(theta, out, mask, /*expected_dim=*/0);
        if (!mask.valid[0]) {
          last_failure = reason_name(mask.reason[0]);
          continue;
        }
        x = out.row(0).transpose();
        (void)dim;
      } else if (batch_fn_) {
        Matrix out = batch_fn_(theta, {row_seed});
        if (out.rows() != 1) throw Error("batched simulator returned wrong row count");
        x = out.row(0).transpose();
      } else {
        RngStream row_rng(row_seed);
        x = row_fn_(Vector(theta.row(0).transpose()), row_rng);
      }
      if (x.size() < 1) {
        last_failure = "empty output";
        continue;
      }
      if (!x.allFinite()) {
        last_failure = "non-finite pilot output";
        continue;
      }
      x_dim_ = x.size();
      return {theta_dim_, x_dim_};
    } catch (const ConfigError&) {
      throw;
    } catch (const std::exception& e) {
      last_failure = e.what();
    }
  }
  throw Error("infer_shapes: pilot simulation failed 10 times (" + last_failure + ")");
}

std::pair<DataBatch, ValidityMask> Simulator::simulate(const ParameterBatch& theta,
                                                       Index round,
                                                       std::uint64_t master_seed) {
  if (!shapes_inferred()) throw Error("Simulator::simulate: call infer_shapes first");
  if (theta.cols() != theta_dim_)
    throw Error("Simulator::simulate: theta dimension mismatch");
  const Index n = theta.rows();

  DataBatch out = Matrix::Constant(n, x_dim_, std::numeric_limits<double>::quiet_NaN());
  ValidityMask mask;
  mask.resize(n);
  if (n == 0) return {out, mask};

  auto row_seed = [&](Index i) {
    return seed_from(master_seed, streams::kSimulator, static_cast<std::uint64_t>(round),
                     static_cast<std::uint64_t>(i));
  };

  if (external_) {
    external_->simulate(theta, out, mask, x_dim_);
  } else if (batch_fn_) {
    std::vector<std::uint64_t> seeds(static_cast<std::size_t>(n));
    for (Index i = 0; i < n; ++i) seeds[static_cast<std::size_t>(i)] = row_seed(i);
    Matrix res = batch_fn_(theta, seeds);
    if (res.rows() != n)
      throw Error("Simulator::simulate: batched simulator returned wrong row count");
    for (Index i = 0; i < n; ++i)
      validate_row(Vector(res.row(i).transpose()), x_dim_, i, out, mask);
  } else {
    auto run_rows = [&](Index first, Index last) {
      for (Index i = first; i < last; ++i) {
        try {
          RngStream rng(row_seed(i));
          Vector x = row_fn_(Vector(theta.row(i).transpose()), rng);
          validate_row(x, x_dim_, i, out, mask);
        } catch (...) {
          mask.mark_failed(i, FailureReason::kProtocolError);
        }
      }
    };
    const Index workers = std::min<Index>(workers_, n);
    if (workers <= 1) {
      run_rows(0, n);
    } else {
      // Static contiguous partition; rows write disjoint output slots, so the
      // result is identical for every worker count.
      std::vector<std::thread> pool;
      pool.reserve(static_cast<std::size_t>(workers));
      const Index chunk = (n + workers - 1) / workers;
      for (Index w = 0; w < workers; ++w) {
        const Index first = w * chunk;
        const Index last = std::min(n, first + chunk);
        if (first >= last) break;
        pool.emplace_back(run_rows, first, last);
      }
      for (auto& t : pool) t.join();
    }
  }

  if (mask.n_valid() == 0)
    throw Error("Simulator::simulate: every row of the batch failed (" +
                std::to_string(n) + " rows)");
  return {out, mask};
}

Standardizer Standardizer::fit(const DataBatch& x, const std::vector<bool>& valid) {
  if (static_cast<Index>(valid.size()) != x.rows())
    throw Error("Standardizer::fit: mask length mismatch");
  Index n = 0;
  for (bool v : valid) n += v ? 1 : 0;
  if (n < 2) throw Error("Standardizer::fit: need at least 2 valid rows");

  Standardizer s;
  s.mean_ = Vector::Zero(x.cols());
  s.scale_ = Vector::Ones(x.cols());
  s.constant_.assign(static_cast<std::size_t>(x.cols()), false);

  for (Index i = 0; i < x.rows(); ++i)
    if (valid[static_cast<std::size_t>(i)]) s.mean_ += x.row(i).transpose();
  s.mean_ /= static_cast<double>(n);

  Vector var = Vector::Zero(x.cols());
  for (Index i = 0; i < x.rows(); ++i)
    if (valid[static_cast<std::size_t>(i)])
      var += (x.row(i).transpose() - s.mean_).array().square().matrix();
  var /= static_cast<double>(n);  // population variance

  for (Index d = 0; d < x.cols(); ++d) {
    const double sd = std::sqrt(var[d]);
    if (sd < 1e-13) {
      s.scale_[d] = 1.0;
      s.constant_[static_cast<std::size_t>(d)] = true;
    } else {
      s.scale_[d] = sd;
    }
  }
  s.fitted_ = true;
  return s;
}

Standardizer Standardizer::fit(const DataBatch& x) {
  return fit(x, std::vector<bool>(static_cast<std::size_t>(x.rows()), true));
}

Standardizer Standardizer::identity(Index dim) {
  Standardizer s;
  s.mean_ = Vector::Zero(dim);
  s.scale_ = Vector::Ones(dim);
  s.constant_.assign(static_cast<std::size_t>(dim), false);
  s.fitted_ = true;
  return s;
}

Matrix Standardizer::transform(const Matrix& x) const {
  if (!fitted_) throw Error("Standardizer: not fitted");
  if (x.cols() != dim()) throw Error("Standardizer::transform: dimension mismatch");
  return (x.rowwise() - mean_.transpose()).array().rowwise() /
         scale_.transpose().array();
}

Matrix Standardizer::inverse(const Matrix& z) const {
  if (!fitted_) throw Error("Standardizer: not fitted");
  if (z.cols() != dim()) throw Error("Standardizer::inverse: dimension mismatch");
  return (z.array().rowwise() * scale_.transpose().array()).matrix().rowwise() +
         mean_.transpose();
}

Vector Standardizer::transform_row(const Vector& x) const {
  Matrix m(1, x.size());
  m.row(0) = x.transpose();
  return transform(m).row(0).transpose();
}

}  // namespace sbir
