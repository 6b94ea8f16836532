#pragma once

#include <chrono>
#include <cstdint>
#include <deque>
#include <string>
#include <vector>

#include "sbir/types.hpp"

namespace sbir {

struct ValidityMask;

// Speaks the line-delimited JSON wire protocol with a child process:
//
//   simulator -> {"protocol": 1}                         (handshake)
//   harness   -> {"id": <int>, "theta": [<float>, ...]}
//   simulator -> {"id": <int>, "x": [<float>, ...]}
//            or {"id": <int>, "error": "<msg>"}
//
// Replies may arrive out of order; id is authoritative. A timeout or a
// malformed reply fails that row and restarts the process; unanswered rows
// are re-sent afterwards.
class ExternalSimulator {
 public:
  ExternalSimulator(std::string command, double timeout_seconds);
  ~ExternalSimulator();

  ExternalSimulator(const ExternalSimulator&) = delete;
  ExternalSimulator& operator=(const ExternalSimulator&) = delete;

  const std::string& command() const { return command_; }

  // Fills out/mask (both pre-sized to theta.rows() x dim). When expected_dim
  // is 0 the first valid reply fixes the output dimension; out is resized
  // accordingly. Returns the output dimension.
  Index simulate(const ParameterBatch& theta, Matrix& out, ValidityMask& mask,
                 Index expected_dim);

 private:
  void launch();
  void shutdown();
  bool read_line(std::string& line, std::chrono::steady_clock::time_point deadline);
  bool write_all(const std::string& data, std::chrono::steady_clock::time_point deadline);

  std::string command_;
  double timeout_ = 10.0;
  int pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string rx_buffer_;
};

}  // namespace sbir
