#include "sbir/samplers.hpp"

#include <cmath>

#include "sbir/errors.hpp"

namespace sbir {

namespace {

// Coerce NaNs to -inf so one failed target evaluation cannot kill a chain.
Vector sanitize(const LogTargetFn& target, const ParameterBatch& theta,
                Index* nan_count) {
  Vector v = target(theta);
  if (v.size() != theta.rows())
    throw Error("log target returned wrong number of rows");
  for (Index i = 0; i < v.size(); ++i)
    if (std::isnan(v[i])) {
      v[i] = kNegInf;
      ++*nan_count;
    }
  return v;
}

// Per-chain sample quota that pools to exactly n_samples, chain-major.
std::vector<Index> chain_quotas(Index n_samples, Index n_chains) {
  std::vector<Index> q(static_cast<std::size_t>(n_chains));
  for (Index c = 0; c < n_chains; ++c)
    q[static_cast<std::size_t>(c)] =
        n_samples / n_chains + (c < n_samples % n_chains ? 1 : 0);
  return q;
}

Vector rhat_or_nan(const std::vector<Matrix>& kept, Index dim) {
  Index shortest = kept.empty() ? 0 : kept.front().rows();
  for (const Matrix& m : kept) shortest = std::min(shortest, m.rows());
  if (kept.size() < 2 || shortest < 4)
    return Vector::Constant(dim, std::numeric_limits<double>::quiet_NaN());
  std::vector<Matrix> trimmed;
  trimmed.reserve(kept.size());
  for (const Matrix& m : kept) trimmed.push_back(m.topRows(shortest));
  return split_rhat(trimmed);
}

}  // namespace

McmcResult metropolis_hastings(const LogTargetFn& target, const ParameterBatch& init,
                               Index n_samples, Index n_chains,
                               const Vector& proposal_scale, Index thin, Index burn_in,
                               std::uint64_t seed) {
  const Index dim = init.cols();
  if (init.rows() != n_chains)
    throw Error("metropolis_hastings: init rows must equal n_chains");
  if (proposal_scale.size() != dim)
    throw Error("metropolis_hastings: proposal_scale dimension mismatch");
  if (thin < 1 || burn_in < 0 || n_samples < 0)
    throw Error("metropolis_hastings: bad schedule");

  McmcDiagnostics diag;
  Matrix state = init;
  Vector logf = sanitize(target, state, &diag.nan_normalized);
  for (Index c = 0; c < n_chains; ++c)
    if (!std::isfinite(logf[c]))
      throw Error(
          "metropolis_hastings: no finite-log-target initialization found; "
          "initialize chains via resample_init or from prior support");

  std::vector<RngStream> streams;
  streams.reserve(static_cast<std::size_t>(n_chains));
  for (Index c = 0; c < n_chains; ++c)
    streams.emplace_back(seed_from(seed, streams::kChain, static_cast<std::uint64_t>(c)));

  const auto quota = chain_quotas(n_samples, n_chains);
  std::vector<Matrix> kept;
  for (Index c = 0; c < n_chains; ++c)
    kept.emplace_back(quota[static_cast<std::size_t>(c)], dim);
  std::vector<Index> filled(static_cast<std::size_t>(n_chains), 0);

  Index max_quota = 0;
  for (Index q : quota) max_quota = std::max(max_quota, q);
  const Index iters = burn_in + max_quota * thin;

  Matrix proposal(n_chains, dim);
  for (Index it = 0; it < iters; ++it) {
    for (Index c = 0; c < n_chains; ++c)
      for (Index d = 0; d < dim; ++d)
        proposal(c, d) = state(c, d) + proposal_scale[d] * streams[c].normal();
    Vector logf_new = sanitize(target, proposal, &diag.nan_normalized);
    for (Index c = 0; c < n_chains; ++c) {
      ++diag.proposed;
      const double log_ratio = logf_new[c] - logf[c];
      const double u = streams[c].uniform();
      if (std::log(1.0 - u) < log_ratio) {  // 1-u in (0,1] keeps the log finite
        state.row(c) = proposal.row(c);
        logf[c] = logf_new[c];
        ++diag.accepted;
      }
      const Index k = it - burn_in;
      if (k >= 0 && k % thin == 0) {
        Index& f = filled[static_cast<std::size_t>(c)];
        if (f < quota[static_cast<std::size_t>(c)]) {
          kept[static_cast<std::size_t>(c)].row(f) = state.row(c);
          ++f;
        }
      }
    }
  }

  diag.acceptance_rate =
      diag.proposed == 0 ? 1.0
                         : static_cast<double>(diag.accepted) /
                               static_cast<double>(diag.proposed);
  diag.rhat = rhat_or_nan(kept, dim);

  McmcResult res;
  res.samples.resize(n_samples, dim);
  Index at = 0;
  for (Index c = 0; c < n_chains; ++c) {
    res.samples.middleRows(at, quota[static_cast<std::size_t>(c)]) =
        kept[static_cast<std::size_t>(c)];
    at += quota[static_cast<std::size_t>(c)];
  }
  res.diagnostics = diag;
  return res;
}

McmcResult slice_sample(const LogTargetFn& target, const ParameterBatch& init,
                        Index n_samples, Index n_chains, const Vector& init_width,
                        Index thin, Index burn_in, std::uint64_t seed) {
  const Index dim = init.cols();
  if (init.rows() != n_chains) throw Error("slice_sample: init rows must equal n_chains");
  if (init_width.size() != dim)
    throw Error("slice_sample: init_width dimension mismatch");
  for (Index d = 0; d < dim; ++d)
    if (!(init_width[d] > 0.0)) throw Error("slice_sample: widths must be positive");

  constexpr Index kMaxExpansions = 1000000;
  McmcDiagnostics diag;

  auto eval_one = [&](const Vector& x) {
    Matrix row(1, dim);
    row.row(0) = x.transpose();
    return sanitize(target, row, &diag.nan_normalized)[0];
  };

  const auto quota = chain_quotas(n_samples, n_chains);
  std::vector<Matrix> kept;
  for (Index c = 0; c < n_chains; ++c)
    kept.emplace_back(quota[static_cast<std::size_t>(c)], dim);

  for (Index c = 0; c < n_chains; ++c) {
    RngStream rng(seed_from(seed, streams::kChain, static_cast<std::uint64_t>(c)));
    Vector x = init.row(c).transpose();
    double fx = eval_one(x);
    if (!std::isfinite(fx))
      throw Error(
          "slice_sample: no finite-log-target initialization found; "
          "initialize chains via resample_init or from prior support");

    const Index iters = burn_in + quota[static_cast<std::size_t>(c)] * thin;
    Index filled = 0;
    for (Index it = 0; it < iters; ++it) {
      for (Index d = 0; d < dim; ++d) {
        const double log_y = fx + std::log(1.0 - rng.uniform());
        const double w = init_width[d];
        double lo = x[d] - w * rng.uniform();
        double hi = lo + w;
        Vector probe = x;
        Index expansions = 0;
        probe[d] = lo;
        while (eval_one(probe) >= log_y) {
          lo -= w;
          probe[d] = lo;
          if (++expansions > kMaxExpansions)
            throw Error("slice_sample: stepping out exceeded expansion limit "
                        "(pathological target)");
        }
        probe[d] = hi;
        while (eval_one(probe) >= log_y) {
          hi += w;
          probe[d] = hi;
          if (++expansions > kMaxExpansions)
            throw Error("slice_sample: stepping out exceeded expansion limit "
                        "(pathological target)");
        }
        // Shrinkage: the interval contracts toward x, so this terminates.
        for (;;) {
          const double cand = lo + (hi - lo) * rng.uniform();
          probe[d] = cand;
          const double f_cand = eval_one(probe);
          if (f_cand >= log_y) {
            x[d] = cand;
            fx = f_cand;
            break;
          }
          if (cand < x[d])
            lo = cand;
          else
            hi = cand;
        }
      }
      ++diag.proposed;
      ++diag.accepted;  // every slice sweep yields an accepted state
      const Index k = it - burn_in;
      if (k >= 0 && k % thin == 0 && filled < quota[static_cast<std::size_t>(c)]) {
        kept[static_cast<std::size_t>(c)].row(filled) = x.transpose();
        ++filled;
      }
    }
  }

  diag.acceptance_rate = 1.0;
  diag.rhat = rhat_or_nan(kept, dim);

  McmcResult res;
  res.samples.resize(n_samples, dim);
  Index at = 0;
  for (Index c = 0; c < n_chains; ++c) {
    res.samples.middleRows(at, quota[static_cast<std::size_t>(c)]) =
        kept[static_cast<std::size_t>(c)];
    at += quota[static_cast<std::size_t>(c)];
  }
  res.diagnostics = diag;
  return res;
}

ParameterBatch resample_init(const LogTargetFn& target, const Prior& prior,
                             Index n_chains, Index pool, std::uint64_t seed) {
  if (pool < n_chains) throw Error("resample_init: pool must be >= n_chains");
  RngStream rng(seed_from(seed, streams::kChainInit));
  ParameterBatch candidates = prior.sample(pool, rng);
  Index nan_count = 0;
  Vector logf = sanitize(target, candidates, &nan_count);

  const double m = logf.maxCoeff();
  if (!std::isfinite(m))
    throw Error(
        "resample_init: every pool point has -inf log target; the target and "
        "prior supports may be disjoint");
  Vector w = (logf.array() - m).exp();
  w /= w.sum();

  ParameterBatch init(n_chains, prior.dim());
  for (Index c = 0; c < n_chains; ++c) {
    const double u = rng.uniform();
    double acc = 0.0;
    Index pick = pool - 1;
    for (Index i = 0; i < pool; ++i) {
      acc += w[i];
      if (u < acc) {
        pick = i;
        break;
      }
    }
    init.row(c) = candidates.row(pick);
  }
  return init;
}

RejectionResult rejection_within_support(const BatchSamplerFn& sampler,
                                         const Support& support, Index n,
                                         Index max_batches) {
  if (n < 0) throw Error("rejection_within_support: n must be >= 0");
  RejectionResult res;
  res.samples.resize(n, support.dim());
  Index accepted = 0;
  long long drawn = 0;
  const Index batch = std::max<Index>(n, 1024);
  Index batches = 0;
  while (accepted < n) {
    ParameterBatch draw = sampler(batch);
    if (draw.cols() != support.dim())
      throw Error("rejection_within_support: sampler dimension mismatch");
    drawn += draw.rows();
    const auto mask = support.contains(draw);
    for (Index i = 0; i < draw.rows() && accepted < n; ++i)
      if (mask[static_cast<std::size_t>(i)]) res.samples.row(accepted++) = draw.row(i);
    ++batches;
    if (accepted < n && batches >= max_batches) {
      const double rate = static_cast<double>(accepted) / static_cast<double>(drawn);
      if (rate < 1e-4)
        throw Error("rejection_within_support: acceptance " + std::to_string(rate) +
                    " after " + std::to_string(batches) +
                    " batches; estimated leakage " + std::to_string(1.0 - rate) +
                    " of estimator mass lies outside the prior support");
    }
  }
  res.acceptance_rate =
      drawn == 0 ? 1.0 : static_cast<double>(accepted) / static_cast<double>(drawn);
  return res;
}

Vector split_rhat(const std::vector<Matrix>& chains) {
  if (chains.size() < 2) throw Error("split_rhat: need at least 2 chains");
  const Index n = chains.front().rows();
  const Index dim = chains.front().cols();
  for (const Matrix& c : chains)
    if (c.rows() != n || c.cols() != dim)
      throw Error("split_rhat: chains must share one shape");
  if (n < 4) throw Error("split_rhat: need at least 4 samples per chain");

  const Index half = n / 2;
  std::vector<const Matrix*> src;
  std::vector<std::pair<Index, Index>> ranges;  // (start, len) into each source
  for (const Matrix& c : chains) {
    src.push_back(&c);
    src.push_back(&c);
  }
  for (std::size_t i = 0; i < chains.size(); ++i) {
    ranges.emplace_back(0, half);
    ranges.emplace_back(n - half, half);
  }

  const Index m = static_cast<Index>(ranges.size());
  Vector out(dim);
  for (Index d = 0; d < dim; ++d) {
    Vector means(m), vars(m);
    for (Index j = 0; j < m; ++j) {
      const Matrix& c = *src[static_cast<std::size_t>(j)];
      const auto [start, len] = ranges[static_cast<std::size_t>(j)];
      const auto seg = c.col(d).segment(start, len);
      const double mu = seg.mean();
      means[j] = mu;
      vars[j] = (seg.array() - mu).square().sum() / static_cast<double>(len - 1);
    }
    const double w = vars.mean();
    const double grand = means.mean();
    const double b = static_cast<double>(half) *
                     (means.array() - grand).square().sum() /
                     static_cast<double>(m - 1);
    if (w < 1e-300) {
      out[d] = b < 1e-300 ? 1.0 : kInf;
      continue;
    }
    const double var_plus =
        (static_cast<double>(half - 1) / static_cast<double>(half)) * w +
        b / static_cast<double>(half);
    out[d] = std::sqrt(var_plus / w);
  }
  return out;
}

McmcResult run_mcmc(const LogTargetFn& target, const Prior& prior,
                    const SamplerConfig& cfg, Index n_samples, std::uint64_t seed) {
  ParameterBatch init = resample_init(target, prior, cfg.n_chains, cfg.sir_pool, seed);
  if (cfg.method == McmcMethod::kMetropolisHastings) {
    Vector scale = Vector::Constant(prior.dim(), cfg.proposal_scale);
    return metropolis_hastings(target, init, n_samples, cfg.n_chains, scale, cfg.thin,
                               cfg.burn_in, seed);
  }
  Vector width = Vector::Constant(prior.dim(), cfg.init_width);
  return slice_sample(target, init, n_samples, cfg.n_chains, width, cfg.thin,
                      cfg.burn_in, seed);
}

std::string method_name(McmcMethod m) {
  return m == McmcMethod::kSlice ? "slice" : "mh";
}

}  // namespace sbir
