#pragma once

// Predictor backed by a child process speaking the wire protocol on its
// stdin/stdout. One child per predictor; requests are serialized.

#include <csignal>
#include <cstddef>
#include <mutex>
#include <sstream>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include "cfx/error.hpp"
#include "cfx/predictor.hpp"
#include "cfx/wire.hpp"

namespace cfx {

class SubprocessPredictor final : public Predictor {
 public:
  explicit SubprocessPredictor(std::vector<std::string> argv, std::size_t batch_limit = 64)
      : argv_(std::move(argv)), batch_limit_(std::max<std::size_t>(1, batch_limit)) {
    if (argv_.empty()) throw UsageError("subprocess predictor: empty command");
    std::signal(SIGPIPE, SIG_IGN);
    try {
      connect();
    } catch (const TransportError&) {
      shutdown();
      try {
        connect();
      } catch (const TransportError& e) {
        shutdown();
        throw TransportError("predictor handshake failed twice: " + std::string(e.what()));
      }
    }
  }

  // Splits a shell-like command string on whitespace (no quoting).
  static std::vector<std::string> split_command(const std::string& cmd) {
    std::istringstream is(cmd);
    std::vector<std::string> out;
    for (std::string tok; is >> tok;) out.push_back(tok);
    return out;
  }

  SubprocessPredictor(const SubprocessPredictor&) = delete;
  SubprocessPredictor& operator=(const SubprocessPredictor&) = delete;
  ~SubprocessPredictor() override { shutdown(); }

  std::size_t num_classes() const override { return num_classes_; }
  std::size_t batch_limit() const override { return batch_limit_; }

  std::vector<PredictionVector> predict(std::span<const ImageTensor> batch) const override {
    std::vector<PredictionVector> out;
    if (batch.empty()) return out;
    const auto& first = batch.front();
    wire::Frame req;
    req.header = {{"op", "predict"},
                  {"n", batch.size()},
                  {"c", first.channels()},
                  {"h", first.height()},
                  {"w", first.width()}};
    req.payload.reserve(batch.size() * first.size());
    for (const auto& t : batch) req.payload.insert(req.payload.end(), t.values().begin(), t.values().end());

    std::lock_guard lock(mutex_);
    if (to_child_ < 0) throw TransportError("predictor process is not running");
    wire::FdWriter writer(to_child_);
    wire::FdReader reader(from_child_);
    writer.write_all(wire::encode_frame(req));
    auto resp = wire::read_frame(reader);
    if (!resp) throw TransportError("predictor closed its output during a predict request");
    const auto op = resp->header.value("op", std::string{});
    if (op == "error") {
      throw TransportError("predictor error: " + resp->header.value("msg", std::string{"?"}));
    }
    if (op != "scores" || resp->header.value("n", std::size_t{0}) != batch.size() ||
        resp->header.value("k", std::size_t{0}) != num_classes_) {
      throw TransportError("unexpected predictor response header " + resp->header.dump());
    }
    out.reserve(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
      std::vector<double> scores(resp->payload.begin() + i * num_classes_,
                                 resp->payload.begin() + (i + 1) * num_classes_);
      out.emplace_back(std::move(scores));
    }
    return out;
  }

 private:
  void connect() {
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0) throw TransportError("pipe() failed");
    if (::pipe(out_pipe) != 0) {
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      throw TransportError("pipe() failed");
    }
    std::vector<char*> args;
    for (auto& a : argv_) args.push_back(a.data());
    args.push_back(nullptr);

    const pid_t pid = ::fork();
    if (pid < 0) throw TransportError("fork() failed");
    if (pid == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      ::execvp(args[0], args.data());
      ::_exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    ::fcntl(in_pipe[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(out_pipe[0], F_SETFD, FD_CLOEXEC);
    pid_ = pid;
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];

    wire::FdWriter writer(to_child_);
    wire::FdReader reader(from_child_);
    writer.write_all(wire::encode_frame(wire::hello_request()));
    auto reply = wire::read_frame(reader);
    if (!reply) throw TransportError("predictor exited before answering hello");
    const auto& h = reply->header;
    if (h.value("op", std::string{}) != "hello" ||
        h.value("version", -1) != wire::kProtocolVersion || !h.contains("num_classes") ||
        !h.at("num_classes").is_number_unsigned() || h.at("num_classes").get<std::size_t>() == 0) {
      throw TransportError("bad hello reply " + h.dump());
    }
    num_classes_ = h.at("num_classes").get<std::size_t>();
  }

  void shutdown() noexcept {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      int status = 0;
      if (::waitpid(pid_, &status, WNOHANG) == 0) {
        // Closing stdin asks a well-behaved server to exit; give it a moment.
        for (int i = 0; i < 50; ++i) {
          ::usleep(10000);
          if (::waitpid(pid_, &status, WNOHANG) != 0) {
            pid_ = -1;
            return;
          }
        }
        ::kill(pid_, SIGKILL);
        ::waitpid(pid_, &status, 0);
      }
      pid_ = -1;
    }
  }

  std::vector<std::string> argv_;
  std::size_t batch_limit_;
  std::size_t num_classes_ = 0;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  mutable std::mutex mutex_;
};

}  // namespace cfx
