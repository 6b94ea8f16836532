#include "sbir/external_sim.hpp"

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <mutex>
#include <unordered_map>

#include <json.hpp>

#include "sbir/errors.hpp"
#include "sbir/harness.hpp"

namespace sbir {

namespace {

using Clock = std::chrono::steady_clock;
using json = nlohmann::json;

void ignore_sigpipe_once() {
  static std::once_flag flag;
  std::call_once(flag, [] { ::signal(SIGPIPE, SIG_IGN); });
}

int remaining_ms(Clock::time_point deadline) {
  const auto left =
      std::chrono::duration_cast<std::chrono::milliseconds>(deadline - Clock::now());
  if (left.count() <= 0) return 0;
  return static_cast<int>(std::min<long long>(left.count(), 3600 * 1000));
}

void set_nonblocking(int fd) {
  const int flags = ::fcntl(fd, F_GETFL, 0);
  ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

constexpr std::size_t kPipelineWindow = 8;

}  // namespace

ExternalSimulator::ExternalSimulator(std::string command, double timeout_seconds)
    : command_(std::move(command)), timeout_(timeout_seconds) {
  if (command_.empty()) throw ConfigError("external simulator: empty command");
  if (!(timeout_ > 0.0)) throw ConfigError("external simulator: timeout must be > 0");
  ignore_sigpipe_once();
  launch();
}

ExternalSimulator::~ExternalSimulator() { shutdown(); }

void ExternalSimulator::launch() {
  int to_child[2], from_child[2];
  if (::pipe(to_child) != 0 || ::pipe(from_child) != 0)
    throw Error("external simulator: pipe() failed");

  const int pid = ::fork();
  if (pid < 0) throw Error("external simulator: fork() failed");
  if (pid == 0) {
    // Child: own process group so timeouts can kill the whole command line.
    ::setpgid(0, 0);
    ::dup2(to_child[0], STDIN_FILENO);
    ::dup2(from_child[1], STDOUT_FILENO);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    ::execl("/bin/sh", "sh", "-c", command_.c_str(), static_cast<char*>(nullptr));
    ::_exit(127);
  }

  pid_ = pid;
  to_child_ = to_child[1];
  from_child_ = from_child[0];
  ::close(to_child[0]);
  ::close(from_child[1]);
  set_nonblocking(to_child_);
  set_nonblocking(from_child_);
  rx_buffer_.clear();

  // Handshake: the simulator announces the protocol version first.
  const auto deadline =
      Clock::now() + std::chrono::milliseconds(
                         static_cast<long long>(std::max(timeout_, 5.0) * 1000.0));
  std::string line;
  if (!read_line(line, deadline)) {
    shutdown();
    throw ConfigError("external simulator: no handshake from command '" + command_ +
                      "' (is the executable present?)");
  }
  try {
    json h = json::parse(line);
    if (h.at("protocol").get<int>() != 1) {
      shutdown();
      throw ConfigError("external simulator: unsupported protocol version in '" + line +
                        "'");
    }
  } catch (const json::exception&) {
    shutdown();
    throw ConfigError("external simulator: malformed handshake line '" + line + "'");
  }
}

void ExternalSimulator::shutdown() {
  if (pid_ > 0) {
    ::kill(-pid_, SIGKILL);
    ::kill(pid_, SIGKILL);
    int status = 0;
    ::waitpid(pid_, &status, 0);
    pid_ = -1;
  }
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = -1;
  from_child_ = -1;
  rx_buffer_.clear();
}

bool ExternalSimulator::read_line(std::string& line, Clock::time_point deadline) {
  for (;;) {
    const auto nl = rx_buffer_.find('\n');
    if (nl != std::string::npos) {
      line = rx_buffer_.substr(0, nl);
      rx_buffer_.erase(0, nl + 1);
      if (!line.empty() && line.back() == '\r') line.pop_back();
      return true;
    }
    struct pollfd pfd = {from_child_, POLLIN, 0};
    const int pr = ::poll(&pfd, 1, remaining_ms(deadline));
    if (pr <= 0) return false;  // timeout (or poll error)
    char buf[4096];
    const ssize_t got = ::read(from_child_, buf, sizeof buf);
    if (got <= 0) {
      if (got < 0 && (errno == EAGAIN || errno == EINTR)) continue;
      return false;  // EOF: child is gone
    }
    rx_buffer_.append(buf, static_cast<std::size_t>(got));
  }
}

bool ExternalSimulator::write_all(const std::string& data, Clock::time_point deadline) {
  std::size_t off = 0;
  while (off < data.size()) {
    struct pollfd pfd = {to_child_, POLLOUT, 0};
    const int pr = ::poll(&pfd, 1, remaining_ms(deadline));
    if (pr <= 0) return false;
    const ssize_t put = ::write(to_child_, data.data() + off, data.size() - off);
    if (put < 0) {
      if (errno == EAGAIN || errno == EINTR) continue;
      return false;
    }
    off += static_cast<std::size_t>(put);
  }
  return true;
}

Index ExternalSimulator::simulate(const ParameterBatch& theta, Matrix& out,
                                  ValidityMask& mask, Index expected_dim) {
  const Index n = theta.rows();
  Index dim = expected_dim;
  if (dim > 0) {
    out.setConstant(n, dim, std::numeric_limits<double>::quiet_NaN());
  }
  mask.resize(n);

  // Rows not yet answered, in send order; the front is the oldest
  // outstanding request, which absorbs malformed replies and timeouts.
  std::deque<Index> pending;
  std::deque<Index> to_send;
  for (Index i = 0; i < n; ++i) to_send.push_back(i);
  std::unordered_map<Index, Clock::time_point> deadlines;
  Index answered = 0;

  auto timeout_ms = [this] {
    return std::chrono::milliseconds(static_cast<long long>(timeout_ * 1000.0));
  };

  auto fail_row = [&](Index row, FailureReason why) {
    mask.mark_failed(row, why);
    ++answered;
  };

  auto restart = [&]() {
    shutdown();
    launch();  // throws ConfigError on handshake failure -> whole-batch error
    // Outstanding requests died with the process; queue them again.
    while (!pending.empty()) {
      to_send.push_front(pending.back());
      pending.pop_back();
    }
    deadlines.clear();
  };

  auto send_some = [&]() {
    while (!to_send.empty() && pending.size() < kPipelineWindow) {
      const Index row = to_send.front();
      json req;
      req["id"] = static_cast<long long>(row);
      std::vector<double> t(theta.cols());
      for (Index d = 0; d < theta.cols(); ++d) t[static_cast<std::size_t>(d)] = theta(row, d);
      req["theta"] = t;
      const std::string line = req.dump() + "\n";
      const auto dl = Clock::now() + timeout_ms();
      if (!write_all(line, dl)) return false;
      to_send.pop_front();
      pending.push_back(row);
      deadlines[row] = Clock::now() + timeout_ms();
    }
    return true;
  };

  while (answered < n) {
    if (!send_some()) {
      // Could not even write a request: fail the row we tried to send.
      const Index row = to_send.front();
      to_send.pop_front();
      fail_row(row, FailureReason::kProtocolError);
      restart();
      continue;
    }
    if (pending.empty()) continue;

    const Index oldest = pending.front();
    std::string line;
    if (!read_line(line, deadlines[oldest])) {
      // Timeout (or dead child) on the oldest outstanding row.
      const bool child_eof = rx_buffer_.empty() && Clock::now() < deadlines[oldest];
      pending.pop_front();
      deadlines.erase(oldest);
      fail_row(oldest, child_eof ? FailureReason::kProtocolError : FailureReason::kTimeout);
      restart();
      continue;
    }

    Index row = -1;
    bool ok = false;
    std::vector<double> x;
    bool declared_error = false;
    try {
      json rep = json::parse(line);
      row = rep.at("id").get<Index>();
      if (rep.contains("error")) {
        declared_error = true;
        ok = true;
      } else {
        x = rep.at("x").get<std::vector<double>>();
        ok = true;
      }
    } catch (const json::exception&) {
      ok = false;
    }

    const auto pos = ok ? std::find(pending.begin(), pending.end(), row) : pending.end();
    if (!ok || pos == pending.end()) {
      // Malformed or unattributable reply: charge the oldest outstanding row.
      pending.pop_front();
      deadlines.erase(oldest);
      fail_row(oldest, FailureReason::kProtocolError);
      restart();
      continue;
    }

    pending.erase(pos);
    deadlines.erase(row);
    if (declared_error) {
      fail_row(row, FailureReason::kProtocolError);
      continue;
    }
    if (dim == 0 && !x.empty()) {
      dim = static_cast<Index>(x.size());
      out.setConstant(n, dim, std::numeric_limits<double>::quiet_NaN());
    }
    if (x.empty() || static_cast<Index>(x.size()) != dim) {
      fail_row(row, FailureReason::kProtocolError);
      continue;
    }
    bool has_nan = false, has_inf = false;
    for (double v : x) {
      if (std::isnan(v)) has_nan = true;
      else if (std::isinf(v)) has_inf = true;
    }
    if (has_nan || has_inf) {
      fail_row(row, has_nan ? FailureReason::kNan : FailureReason::kInf);
      continue;
    }
    for (Index d = 0; d < dim; ++d) out(row, d) = x[static_cast<std::size_t>(d)];
    ++answered;
  }

  if (dim == 0) {
    out.setConstant(n, 1, std::numeric_limits<double>::quiet_NaN());
    dim = 1;
  }
  return dim;
}

}  // namespace sbir
