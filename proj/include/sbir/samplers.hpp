#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "sbir/distributions.hpp"
#include "sbir/rng.hpp"
#include "sbir/types.hpp"

namespace sbir {

// Unnormalized log density over parameter rows. Implementations must return
// -inf (never NaN) outside the support; the samplers additionally normalize
// any NaN to -inf and count it.
using LogTargetFn = std::function<Vector(const ParameterBatch&)>;

enum class McmcMethod { kSlice, kMetropolisHastings };

struct SamplerConfig {
  McmcMethod method = McmcMethod::kSlice;
  Index n_chains = 4;
  Index burn_in = 200;
  Index thin = 1;
  Index sir_pool = 1024;       // prior pool for importance-resampled chain init
  double proposal_scale = 0.5; // per-dimension random-walk scale (MH)
  double init_width = 1.0;     // per-dimension initial slice width
};

struct McmcDiagnostics {
  double acceptance_rate = 1.0;  // accepted / proposed, exact
  Index accepted = 0;
  Index proposed = 0;
  Vector rhat;                   // split-Rhat per dimension (NaN if too short)
  Index nan_normalized = 0;      // target NaNs coerced to -inf
};

struct McmcResult {
  ParameterBatch samples;  // pooled chain-major, exactly n_samples rows
  McmcDiagnostics diagnostics;
};

// Gaussian random-walk Metropolis-Hastings. Chains run in lockstep so the
// target is evaluated on one n_chains-row batch per iteration. Requires all
// init rows to have finite log target.
McmcResult metropolis_hastings(const LogTargetFn& target, const ParameterBatch& init,
                               Index n_samples, Index n_chains,
                               const Vector& proposal_scale, Index thin, Index burn_in,
                               std::uint64_t seed);

// Axis-aligned slice sampling with stepping-out and shrinkage. Every emitted
// sample has finite log target by construction.
McmcResult slice_sample(const LogTargetFn& target, const ParameterBatch& init,
                        Index n_samples, Index n_chains, const Vector& init_width,
                        Index thin, Index burn_in, std::uint64_t seed);

// Sampling-importance-resampling chain initialization: draw `pool` prior
// points and pick n_chains of them with probability proportional to
// softmax(log target). Errors when no pool point has finite target.
ParameterBatch resample_init(const LogTargetFn& target, const Prior& prior,
                             Index n_chains, Index pool, std::uint64_t seed);

// Draws from `sampler` until n rows fall inside the support; also reports the
// overall acceptance rate. Errors when acceptance stays below 1e-4 after
// max_batches batches.
using BatchSamplerFn = std::function<ParameterBatch(Index n)>;

struct RejectionResult {
  ParameterBatch samples;
  double acceptance_rate = 1.0;
};

RejectionResult rejection_within_support(const BatchSamplerFn& sampler,
                                         const Support& support, Index n,
                                         Index max_batches = 100);

// Split-chain potential scale reduction factor, one entry per dimension.
// All-constant chains report 1.0 by convention; disjoint constant chains
// report +inf.
Vector split_rhat(const std::vector<Matrix>& chains);

// Run the configured MCMC method end to end: SIR initialization, burn-in,
// thinning, pooled output.
McmcResult run_mcmc(const LogTargetFn& target, const Prior& prior,
                    const SamplerConfig& cfg, Index n_samples, std::uint64_t seed);

std::string method_name(McmcMethod m);

}  // namespace sbir
