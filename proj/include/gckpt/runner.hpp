#pragma once

#include <filesystem>
#include <optional>

#include "gckpt/control.hpp"
#include "gckpt/engine.hpp"

namespace gckpt {

struct RunnerConfig {
  uint64_t interval = 0;  // instructions between automatic images; 0 = none
  std::string image_dir = ".";
  std::string image_prefix = "session";
  std::string socket_path;        // empty: no control endpoint
  uint64_t slice = 1'000'000;     // command latency bound, in instructions
};

// Drives one session to completion: runs bounded slices, writes interval
// checkpoints at exact instruction boundaries, executes control commands
// between slices, and reaps forked serializers as they finish.
class SessionRunner {
 public:
  SessionRunner(Session& session, RunnerConfig cfg)
      : s_(session), cfg_(std::move(cfg)) {
    if (cfg_.slice == 0) raise(ErrorCode::BadConfig, "zero slice");
    std::filesystem::create_directories(cfg_.image_dir);
    // Image paths travel over the control socket; clients have their own cwd.
    cfg_.image_dir = std::filesystem::absolute(cfg_.image_dir).string();
    if (!cfg_.socket_path.empty())
      server_ = std::make_unique<ControlServer>(cfg_.socket_path);
  }

  ~SessionRunner() {
    if (server_) server_->close();
  }

  uint64_t images_written() const { return images_written_; }
  bool stopped_by_command() const { return stop_; }

  // Runs until the guest halts or a stop command arrives. Returns the
  // number of images written (interval plus commanded).
  uint64_t run() {
    uint64_t next = 0;
    if (cfg_.interval)
      next = (s_.machine().instr_count() / cfg_.interval + 1) * cfg_.interval;

    while (!stop_ && !s_.machine().halted()) {
      uint64_t budget = cfg_.slice;
      if (cfg_.interval)
        budget = std::min(budget, next - s_.machine().instr_count());
      s_.run(budget);

      if (cfg_.interval && s_.machine().instr_count() >= next) {
        checkpoint_now(interval_image_path(), CkptMode::Default, "");
        next += cfg_.interval;
      }
      reap_if_done();
      drain_commands();
    }

    if (pending_) {
      s_.join(*pending_);
      images_written_++;
      pending_.reset();
    }
    drain_commands();
    if (server_) server_->close();
    return images_written_;
  }

 private:
  std::string interval_image_path() {
    char seq[16];
    std::snprintf(seq, sizeof(seq), "%06llu",
                  static_cast<unsigned long long>(interval_seq_++));
    return (std::filesystem::path(cfg_.image_dir) /
            (cfg_.image_prefix + "-" + seq + ".gckp"))
        .string();
  }

  std::string command_image_path() {
    char seq[16];
    std::snprintf(seq, sizeof(seq), "%06llu",
                  static_cast<unsigned long long>(command_seq_++));
    return (std::filesystem::path(cfg_.image_dir) /
            (cfg_.image_prefix + "-cmd-" + seq + ".gckp"))
        .string();
  }

  void checkpoint_now(const std::string& path, CkptMode mode,
                      const std::string& base) {
    CheckpointOptions opts;
    opts.mode = mode;
    opts.base = base;
    s_.checkpoint(path, opts);
    images_written_++;
  }

  void reap_if_done() {
    if (pending_ && s_.forked_done(*pending_)) {
      s_.join(*pending_);
      images_written_++;
      pending_.reset();
    }
  }

  void drain_commands() {
    if (!server_) return;
    while (auto req = server_->take()) {
      nlohmann::json resp;
      try {
        resp = execute(req->body);
        resp["ok"] = true;
      } catch (const Error& e) {
        resp = nlohmann::json{};
        resp["ok"] = false;
        resp["error"] = std::string(error_code_name(e.code()));
        resp["message"] = e.what();
      } catch (const std::exception& e) {
        resp = nlohmann::json{};
        resp["ok"] = false;
        resp["error"] = std::string(error_code_name(ErrorCode::IoFailure));
        resp["message"] = e.what();
      }
      req->reply.set_value(std::move(resp));
    }
  }

  nlohmann::json execute(const nlohmann::json& body) {
    std::string op = body.value("op", "");
    if (op == "status") {
      nlohmann::json r;
      r["instr"] = s_.machine().instr_count();
      r["halted"] = s_.machine().halted();
      r["images"] = images_written_;
      r["pending_forked"] = pending_.has_value();
      return r;
    }
    if (op == "stop") {
      stop_ = true;
      return nlohmann::json{{"stopped", true}};
    }
    if (op == "checkpoint") {
      std::string mode_name = body.value("mode", "default");
      std::string base = body.value("base", std::string{});

      // Validate before a sequence number is spent on the request.
      CkptMode mode = CkptMode::Default;
      if (mode_name == "forked") {
        if (pending_)
          raise(ErrorCode::BadConfig, "a forked checkpoint is still pending");
      } else if (mode_name == "default") mode = CkptMode::Default;
      else if (mode_name == "fast") mode = CkptMode::FastRestart;
      else if (mode_name == "incremental") mode = CkptMode::Incremental;
      else raise(ErrorCode::BadConfig, "unknown mode: " + mode_name);

      std::string path = body.value("path", std::string{});
      if (path.empty()) path = command_image_path();

      if (mode_name == "forked") {
        pending_ = s_.checkpoint_forked(path);
        return nlohmann::json{{"image", path}, {"forked", true}};
      }
      checkpoint_now(path, mode, base);
      return nlohmann::json{{"image", path}, {"forked", false}};
    }
    raise(ErrorCode::BadConfig, "unknown op: " + op);
  }

  Session& s_;
  RunnerConfig cfg_;
  std::unique_ptr<ControlServer> server_;
  std::optional<PendingCheckpoint> pending_;
  uint64_t images_written_ = 0;
  uint64_t interval_seq_ = 1;
  uint64_t command_seq_ = 1;
  bool stop_ = false;
};

}  // namespace gckpt
