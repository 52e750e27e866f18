#pragma once

#include <poll.h>
#include <sys/socket.h>
#include <sys/un.h>
#include <unistd.h>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <future>
#include <mutex>
#include <string>
#include <thread>

#include "gckpt/error.hpp"
#include "json.hpp"

namespace gckpt {

// Line-delimited JSON over a local stream socket: one request line in, one
// response line out, connection per command. Responses are {"ok":true,...}
// or {"ok":false,"error":<code name>,"message":...}.

namespace detail {

inline int unix_connect(const std::string& path) {
  int fd = ::socket(AF_UNIX, SOCK_STREAM, 0);
  if (fd < 0) raise(ErrorCode::IoFailure, "socket() failed");
  sockaddr_un addr{};
  addr.sun_family = AF_UNIX;
  if (path.size() >= sizeof(addr.sun_path)) {
    ::close(fd);
    raise(ErrorCode::BadConfig, "socket path too long: " + path);
  }
  std::copy(path.begin(), path.end(), addr.sun_path);
  if (::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
    ::close(fd);
    raise(ErrorCode::UnknownSession, "no session listening at " + path);
  }
  return fd;
}

inline bool write_all(int fd, const std::string& s) {
  size_t off = 0;
  while (off < s.size()) {
    ssize_t n = ::write(fd, s.data() + off, s.size() - off);
    if (n <= 0) return false;
    off += static_cast<size_t>(n);
  }
  return true;
}

// Reads until '\n' or EOF; caps the line to keep a hostile peer from
// ballooning memory.
inline std::string read_line(int fd, size_t cap = 1 << 20) {
  std::string out;
  char c;
  while (out.size() < cap) {
    ssize_t n = ::read(fd, &c, 1);
    if (n <= 0) break;
    if (c == '\n') break;
    out += c;
  }
  return out;
}

}  // namespace detail

// A request picked off the socket, waiting for the owning loop to execute
// it. The server thread blocks on `reply` to write the response back.
struct ControlRequest {
  nlohmann::json body;
  std::promise<nlohmann::json> reply;
};

class ControlServer {
 public:
  explicit ControlServer(std::string socket_path)
      : path_(std::move(socket_path)) {
    ::unlink(path_.c_str());
    fd_ = ::socket(AF_UNIX, SOCK_STREAM, 0);
    if (fd_ < 0) raise(ErrorCode::IoFailure, "socket() failed");
    sockaddr_un addr{};
    addr.sun_family = AF_UNIX;
    if (path_.size() >= sizeof(addr.sun_path)) {
      ::close(fd_);
      raise(ErrorCode::BadConfig, "socket path too long: " + path_);
    }
    std::copy(path_.begin(), path_.end(), addr.sun_path);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 ||
        ::listen(fd_, 8) != 0) {
      ::close(fd_);
      raise(ErrorCode::IoFailure, "cannot listen on " + path_);
    }
    thread_ = std::thread([this] { serve(); });
  }

  ~ControlServer() { close(); }

  ControlServer(const ControlServer&) = delete;
  ControlServer& operator=(const ControlServer&) = delete;

  const std::string& path() const { return path_; }

  // Next pending request, if any. The executing loop calls this between
  // work slices; requests never run on the socket thread.
  std::unique_ptr<ControlRequest> take() {
    std::lock_guard lock(mu_);
    if (queue_.empty()) return nullptr;
    auto r = std::move(queue_.front());
    queue_.pop_front();
    return r;
  }

  void close() {
    bool was = stopping_.exchange(true);
    if (was) return;
    if (thread_.joinable()) thread_.join();
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
    ::unlink(path_.c_str());
    // Whatever never got executed is answered, not abandoned.
    while (auto r = take()) {
      nlohmann::json err;
      err["ok"] = false;
      err["error"] = std::string(error_code_name(ErrorCode::UnknownSession));
      err["message"] = "session is shutting down";
      r->reply.set_value(err);
    }
  }

 private:
  void serve() {
    while (!stopping_.load()) {
      pollfd p{fd_, POLLIN, 0};
      int rc = ::poll(&p, 1, 50);
      if (rc <= 0) continue;
      int conn = ::accept(fd_, nullptr, nullptr);
      if (conn < 0) continue;
      handle(conn);
      ::close(conn);
    }
  }

  void handle(int conn) {
    std::string line = detail::read_line(conn);
    nlohmann::json body;
    try {
      body = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      nlohmann::json err;
      err["ok"] = false;
      err["error"] = std::string(error_code_name(ErrorCode::BadConfig));
      err["message"] = std::string("bad request: ") + e.what();
      detail::write_all(conn, err.dump() + "\n");
      return;
    }
    auto req = std::make_unique<ControlRequest>();
    req->body = std::move(body);
    std::future<nlohmann::json> fut = req->reply.get_future();
    {
      std::lock_guard lock(mu_);
      queue_.push_back(std::move(req));
    }
    // The executing loop drains between slices. Poll in short steps so the
    // wait also ends on shutdown, and cap it so a wedged loop cannot hold
    // the socket thread hostage forever.
    nlohmann::json resp;
    int waited_ms = 0;
    for (;;) {
      if (fut.wait_for(std::chrono::milliseconds(50)) ==
          std::future_status::ready) {
        resp = fut.get();
        break;
      }
      waited_ms += 50;
      if (stopping_.load()) {
        resp["ok"] = false;
        resp["error"] = std::string(error_code_name(ErrorCode::UnknownSession));
        resp["message"] = "session is shutting down";
        break;
      }
      if (waited_ms >= 30000) {
        resp["ok"] = false;
        resp["error"] = std::string(error_code_name(ErrorCode::QuiesceTimeout));
        resp["message"] = "session did not answer in time";
        break;
      }
    }
    detail::write_all(conn, resp.dump() + "\n");
  }

  std::string path_;
  int fd_ = -1;
  std::thread thread_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::deque<std::unique_ptr<ControlRequest>> queue_;
};

// One round trip as the command-side client. Raises UnknownSession when
// nobody is listening and re-raises the server's typed error on failure
// responses.
inline nlohmann::json control_request(const std::string& socket_path,
                                      const nlohmann::json& body) {
  int fd = detail::unix_connect(socket_path);
  if (!detail::write_all(fd, body.dump() + "\n")) {
    ::close(fd);
    raise(ErrorCode::IoFailure, "control write failed");
  }
  std::string line = detail::read_line(fd);
  ::close(fd);
  if (line.empty()) raise(ErrorCode::IoFailure, "empty control response");
  nlohmann::json resp;
  try {
    resp = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    raise(ErrorCode::DecodeError, std::string("bad control response: ") + e.what());
  }
  if (!resp.value("ok", false)) {
    std::string code = resp.value("error", "IoFailure");
    std::string msg = resp.value("message", "control request failed");
    raise(error_code_from_name(code), msg);
  }
  return resp;
}

}  // namespace gckpt
