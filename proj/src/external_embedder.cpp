// Bridge to embedding models running out of process.
//
// Wire protocol (one JSON object per line over the child's stdin/stdout):
//   child  -> {"dim": D}                                   handshake, once
//   parent -> {"id": "...", "rate": R, "samples_b64": "..."}  f32 LE samples
//   child  -> {"id": "...", "embedding": [D floats]}         any order
//
// The child's stdin and stdout share one socketpair end so writes never raise
// SIGPIPE (MSG_NOSIGNAL) when the child dies early.

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cmath>
#include <cstring>
#include <thread>
#include <unordered_map>

#include "json.hpp"
#include "probebench/base64.hpp"
#include "probebench/embedding.hpp"
#include "probebench/error.hpp"

namespace probebench::embedding {

using nlohmann::json;

namespace {

constexpr std::size_t kStderrTail = 4096;

void set_nonblocking(int fd) {
  const int flags = fcntl(fd, F_GETFL, 0);
  fcntl(fd, F_SETFL, flags | O_NONBLOCK);
}

std::string describe_status(int status) {
  if (WIFEXITED(status)) return "exited with status " + std::to_string(WEXITSTATUS(status));
  if (WIFSIGNALED(status)) return "killed by signal " + std::to_string(WTERMSIG(status));
  return "stopped";
}

}  // namespace

class ExternalEmbedder::Session {
 public:
  explicit Session(const CommandSpec& spec) : spec_(spec) {
    int sv[2];
    if (socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
      throw ProviderError("external embedder: socketpair failed: " + std::string(std::strerror(errno)));
    }
    int err_pipe[2];
    if (pipe2(err_pipe, O_CLOEXEC) != 0) {
      close(sv[0]);
      close(sv[1]);
      throw ProviderError("external embedder: pipe failed: " + std::string(std::strerror(errno)));
    }
    pid_ = fork();
    if (pid_ < 0) {
      close(sv[0]);
      close(sv[1]);
      close(err_pipe[0]);
      close(err_pipe[1]);
      throw ProviderError("external embedder: fork failed: " + std::string(std::strerror(errno)));
    }
    if (pid_ == 0) {
      dup2(sv[1], STDIN_FILENO);
      dup2(sv[1], STDOUT_FILENO);
      dup2(err_pipe[1], STDERR_FILENO);
      execl("/bin/sh", "sh", "-c", spec_.command.c_str(), static_cast<char*>(nullptr));
      _exit(127);
    }
    close(sv[1]);
    close(err_pipe[1]);
    io_fd_ = sv[0];
    err_fd_ = err_pipe[0];
    set_nonblocking(io_fd_);
    set_nonblocking(err_fd_);
    try {
      handshake();
    } catch (...) {
      shutdown_child();
      throw;
    }
  }

  ~Session() { shutdown_child(); }

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

 private:
  void handshake() {
    const std::string line = read_line();
    json hello;
    try {
      hello = json::parse(line);
    } catch (const json::exception&) {
      fail("handshake is not JSON: '" + line.substr(0, 200) + "'");
    }
    if (!hello.is_object() || !hello.contains("dim") || !hello["dim"].is_number_integer()) {
      fail("handshake must be {\"dim\": int}, got '" + line.substr(0, 200) + "'");
    }
    dim_ = hello["dim"].get<std::int64_t>();
    if (dim_ <= 0) fail("handshake declares non-positive dim");
    if (spec_.expected_dim != 0 && static_cast<std::size_t>(dim_) != spec_.expected_dim) {
      fail("protocol violation: handshake dim " + std::to_string(dim_) + " but provider expects " +
           std::to_string(spec_.expected_dim));
    }
  }

 public:
  std::vector<EmbeddingVector> round_trip(const std::vector<std::vector<float>>& frames, std::uint32_t rate) {
    std::vector<std::string> ids(frames.size());
    std::unordered_map<std::string, std::size_t> slot;
    std::string outgoing;
    for (std::size_t i = 0; i < frames.size(); ++i) {
      ids[i] = "f" + std::to_string(next_id_++);
      slot.emplace(ids[i], i);
      json req{{"id", ids[i]}, {"rate", rate}, {"samples_b64", encode_f32_samples(frames[i])}};
      outgoing += req.dump();
      outgoing += '\n';
    }
    std::vector<EmbeddingVector> result(frames.size());
    std::vector<bool> filled(frames.size(), false);
    std::size_t remaining = frames.size();
    std::size_t sent = 0;

    while (remaining > 0) {
      std::string line;
      if (pop_line(line)) {
        accept_response(line, slot, result, filled, remaining);
        continue;
      }
      pump(outgoing, sent);
    }
    return result;
  }

  /// Closes the child's stdin and reaps it.
  void shutdown_child() {
    if (pid_ <= 0) return;
    if (io_fd_ >= 0) ::shutdown(io_fd_, SHUT_WR);
    int status = 0;
    if (timed_out_) kill(pid_, SIGKILL);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(2);
    while (waitpid(pid_, &status, WNOHANG) == 0) {
      if (std::chrono::steady_clock::now() > deadline) {
        kill(pid_, SIGKILL);
        waitpid(pid_, &status, 0);
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    pid_ = -1;
    if (io_fd_ >= 0) close(io_fd_);
    if (err_fd_ >= 0) close(err_fd_);
    io_fd_ = err_fd_ = -1;
  }

 private:
  [[noreturn]] void fail(const std::string& what) {
    std::string msg = "external embedder '" + spec_.command + "': " + what;
    if (pid_ > 0) {
      int status = 0;
      if (waitpid(pid_, &status, WNOHANG) == pid_) {
        msg += " (process " + describe_status(status) + ")";
        pid_ = -1;
      }
    }
    drain_stderr();
    if (!stderr_tail_.empty()) msg += "; stderr: " + stderr_tail_;
    throw ProviderError(msg);
  }

  void accept_response(const std::string& line, const std::unordered_map<std::string, std::size_t>& slot,
                       std::vector<EmbeddingVector>& result, std::vector<bool>& filled, std::size_t& remaining) {
    json resp;
    try {
      resp = json::parse(line);
    } catch (const json::exception&) {
      fail("protocol violation: response is not JSON: '" + line.substr(0, 200) + "'");
    }
    if (!resp.is_object() || !resp.contains("id") || !resp["id"].is_string() || !resp.contains("embedding") ||
        !resp["embedding"].is_array()) {
      fail("protocol violation: response must be {\"id\": string, \"embedding\": [floats]}");
    }
    const auto id = resp["id"].get<std::string>();
    auto it = slot.find(id);
    if (it == slot.end()) fail("protocol violation: unknown response id '" + id + "'");
    if (filled[it->second]) fail("protocol violation: duplicate response for id '" + id + "'");
    const auto& arr = resp["embedding"];
    if (static_cast<std::int64_t>(arr.size()) != dim_) {
      fail("protocol violation: response '" + id + "' has dimension " + std::to_string(arr.size()) +
           ", declared " + std::to_string(dim_));
    }
    EmbeddingVector v(arr.size());
    for (std::size_t i = 0; i < arr.size(); ++i) {
      if (!arr[i].is_number()) fail("protocol violation: non-numeric embedding value in '" + id + "'");
      v[i] = arr[i].get<float>();
      if (!std::isfinite(v[i])) fail("protocol violation: non-finite embedding value in '" + id + "'");
    }
    result[it->second] = std::move(v);
    filled[it->second] = true;
    --remaining;
  }

  bool pop_line(std::string& line) {
    const auto nl = inbox_.find('\n');
    if (nl == std::string::npos) return false;
    line = inbox_.substr(0, nl);
    inbox_.erase(0, nl + 1);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  std::string read_line() {
    std::string line;
    std::string none;
    std::size_t sent = 0;
    while (!pop_line(line)) pump(none, sent);
    return line;
  }

  /// One poll round: writes pending output, reads stdout and stderr.
  void pump(const std::string& outgoing, std::size_t& sent) {
    pollfd fds[2];
    fds[0].fd = io_fd_;
    fds[0].events = POLLIN | (sent < outgoing.size() ? POLLOUT : 0);
    fds[1].fd = err_fd_;
    fds[1].events = POLLIN;
    const int timeout_ms = static_cast<int>(spec_.timeout.count());
    const int ready = poll(fds, err_fd_ >= 0 ? 2 : 1, timeout_ms);
    if (ready < 0) {
      if (errno == EINTR) return;
      fail("poll failed: " + std::string(std::strerror(errno)));
    }
    if (ready == 0) {
      timed_out_ = true;
      fail("timeout after " + std::to_string(timeout_ms) + " ms without progress");
    }

    if (err_fd_ >= 0 && (fds[1].revents & (POLLIN | POLLHUP))) read_stderr_once();

    if (fds[0].revents & POLLOUT) {
      const ssize_t n = send(io_fd_, outgoing.data() + sent, outgoing.size() - sent, MSG_NOSIGNAL);
      if (n > 0) {
        sent += static_cast<std::size_t>(n);
      } else if (n < 0 && errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
        fail("write to child failed: " + std::string(std::strerror(errno)));
      }
    }
    if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
      char buf[65536];
      const ssize_t n = recv(io_fd_, buf, sizeof buf, 0);
      if (n > 0) {
        inbox_.append(buf, static_cast<std::size_t>(n));
      } else if (n == 0) {
        // Give the child a moment to be reapable so the status is reported.
        for (int i = 0; i < 50 && pid_ > 0; ++i) {
          int status = 0;
          if (waitpid(pid_, &status, WNOHANG) == pid_) {
            pid_ = -1;
            drain_stderr();
            std::string msg = "external embedder '" + spec_.command + "': process exited before replying (" +
                              describe_status(status) + ")";
            if (!stderr_tail_.empty()) msg += "; stderr: " + stderr_tail_;
            throw ProviderError(msg);
          }
          std::this_thread::sleep_for(std::chrono::milliseconds(10));
        }
        fail("child closed its stdout");
      } else if (errno != EAGAIN && errno != EWOULDBLOCK && errno != EINTR) {
        fail("read from child failed: " + std::string(std::strerror(errno)));
      }
    }
  }

  void read_stderr_once() {
    char buf[4096];
    const ssize_t n = read(err_fd_, buf, sizeof buf);
    if (n > 0) {
      stderr_tail_.append(buf, static_cast<std::size_t>(n));
      if (stderr_tail_.size() > kStderrTail) stderr_tail_.erase(0, stderr_tail_.size() - kStderrTail);
    } else if (n == 0) {
      close(err_fd_);
      err_fd_ = -1;
    }
  }

  void drain_stderr() {
    for (int i = 0; i < 64 && err_fd_ >= 0; ++i) {
      pollfd p{err_fd_, POLLIN, 0};
      if (poll(&p, 1, 20) <= 0) break;
      const auto before = stderr_tail_.size();
      read_stderr_once();
      if (err_fd_ >= 0 && stderr_tail_.size() == before) break;
    }
  }

  CommandSpec spec_;
  pid_t pid_ = -1;
  int io_fd_ = -1;
  int err_fd_ = -1;
  bool timed_out_ = false;
  std::int64_t dim_ = 0;
  std::uint64_t next_id_ = 0;
  std::string inbox_;
  std::string stderr_tail_;
};

ExternalEmbedder::ExternalEmbedder(CommandSpec spec) : spec_(std::move(spec)) {}

ExternalEmbedder::~ExternalEmbedder() = default;

EmbeddingVector ExternalEmbedder::embed_frame(std::span<const float> frame, std::uint32_t rate) {
  return embed_frames({std::vector<float>(frame.begin(), frame.end())}, rate).front();
}

std::vector<EmbeddingVector> ExternalEmbedder::embed_frames(const std::vector<std::vector<float>>& frames,
                                                            std::uint32_t rate) {
  if (frames.empty()) return {};
  if (!session_) session_ = std::make_unique<Session>(spec_);
  try {
    return session_->round_trip(frames, rate);
  } catch (...) {
    // A broken stream cannot be resynchronised; restart on the next call.
    session_.reset();
    throw;
  }
}

std::vector<EmbeddingVector> external_embed(const CommandSpec& command, const std::vector<std::vector<float>>& frames,
                                            std::uint32_t rate) {
  ExternalEmbedder embedder(command);
  return embedder.embed_frames(frames, rate);
}

}  // namespace probebench::embedding
