#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "sbir/types.hpp"

namespace sbir {

// splitmix64 finalizer, used to derive independent seeds from a master seed
// plus small integer tags (round index, row index, purpose).
std::uint64_t mix64(std::uint64_t x);
std::uint64_t seed_from(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0,
                        std::uint64_t c = 0);

// Purpose tags for derived streams. Keeping these distinct guarantees that
// e.g. prior sampling and chain proposals never consume the same stream.
namespace streams {
inline constexpr std::uint64_t kPrior = 1;
inline constexpr std::uint64_t kSimulator = 2;
inline constexpr std::uint64_t kTrain = 3;
inline constexpr std::uint64_t kChain = 4;
inline constexpr std::uint64_t kLeakage = 5;
inline constexpr std::uint64_t kChainInit = 6;
inline constexpr std::uint64_t kEstimatorInit = 7;
inline constexpr std::uint64_t kAbc = 8;
inline constexpr std::uint64_t kOracle = 9;
inline constexpr std::uint64_t kPosterior = 10;
}  // namespace streams

// Deterministic random stream. Consumers never share one stream across
// threads; concurrent callers derive separate streams instead.
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : gen_(seed) {}

  std::uint64_t raw() { return gen_(); }

  // Uniform in [0, 1), 53-bit resolution.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform_in(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller; the sine branch is discarded so the
  // stream stays stateless between calls.
  double normal();

  // Unbiased draw from {0, ..., n-1} by rejection.
  Index uniform_index(Index n);

  Vector normal_vector(Index n);
  Matrix normal_matrix(Index rows, Index cols);
  std::vector<Index> permutation(Index n);  // Fisher-Yates

 private:
  std::mt19937_64 gen_;
};

}  // namespace sbir
