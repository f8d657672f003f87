#pragma once

// Predictor backed by a remote model server speaking the wire protocol over
// a TCP stream socket (POSIX).

#include <cerrno>
#include <cstdint>
#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include "mslam/errors.hpp"
#include "mslam/predictor.hpp"
#include "mslam/wire.hpp"

namespace mslam {

struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
};

/// "host:port"; the host may be a bracketed IPv6 literal.
inline Endpoint parse_endpoint(const std::string& s) {
  const auto colon = s.rfind(':');
  if (colon == std::string::npos || colon == 0 || colon + 1 == s.size()) {
    throw ConfigError("endpoint must be host:port, got \"" + s + "\"");
  }
  std::string host = s.substr(0, colon);
  if (host.size() >= 2 && host.front() == '[' && host.back() == ']') host = host.substr(1, host.size() - 2);
  const std::string port = s.substr(colon + 1);
  if (port.find_first_not_of("0123456789") != std::string::npos || port.size() > 5) {
    throw ConfigError("invalid port in \"" + s + "\"");
  }
  const unsigned long p = std::stoul(port);
  if (p == 0 || p > 65535) throw ConfigError("invalid port in \"" + s + "\"");
  return {host, static_cast<std::uint16_t>(p)};
}

namespace net {

/// Owning file descriptor.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() { close(); }

  int fd() const { return fd_; }
  bool is_open() const { return fd_ >= 0; }
  void close() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline void send_all(int fd, const std::uint8_t* p, std::size_t n) {
  while (n > 0) {
    const ssize_t k = ::send(fd, p, n, MSG_NOSIGNAL);
    if (k < 0 && errno == EINTR) continue;
    if (k <= 0) throw IoError(std::string("socket send failed: ") + std::strerror(errno));
    p += k;
    n -= static_cast<std::size_t>(k);
  }
}

/// False on orderly shutdown before the first byte.
inline bool recv_all(int fd, std::uint8_t* p, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t k = ::recv(fd, p + got, n - got, 0);
    if (k < 0 && errno == EINTR) continue;
    if (k == 0 && got == 0) return false;
    if (k == 0) throw IoError("connection closed mid-frame");
    if (k < 0) throw IoError(std::string("socket receive failed: ") + std::strerror(errno));
    got += static_cast<std::size_t>(k);
  }
  return true;
}

inline void write_frame(int fd, std::span<const std::uint8_t> body) {
  const auto f = wire::frame(body);
  send_all(fd, f.data(), f.size());
}

/// Next frame body, or nullopt when the peer closed the connection.
inline std::optional<std::vector<std::uint8_t>> read_frame(int fd) {
  std::uint8_t len_bytes[4];
  if (!recv_all(fd, len_bytes, 4)) return std::nullopt;
  std::uint32_t len;
  std::memcpy(&len, len_bytes, 4);
  if (len > wire::kMaxFrameBytes) throw IoError("incoming frame exceeds the 64 MB limit");
  std::vector<std::uint8_t> body(len);
  if (len > 0 && !recv_all(fd, body.data(), len)) throw IoError("connection closed mid-frame");
  return body;
}

inline void set_timeouts(int fd, int timeout_ms) {
  timeval tv{timeout_ms / 1000, (timeout_ms % 1000) * 1000};
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

inline Socket connect_to(const Endpoint& ep, int timeout_ms) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  if (const int rc = ::getaddrinfo(ep.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw PredictorUnavailableError("cannot resolve " + ep.host + ": " + ::gai_strerror(rc));
  }
  std::string last = "no addresses";
  for (addrinfo* a = res; a; a = a->ai_next) {
    Socket s(::socket(a->ai_family, a->ai_socktype, a->ai_protocol));
    if (!s.is_open()) continue;
    const int flags = ::fcntl(s.fd(), F_GETFL, 0);
    ::fcntl(s.fd(), F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(s.fd(), a->ai_addr, a->ai_addrlen);
    if (rc != 0 && errno == EINPROGRESS) {
      pollfd p{s.fd(), POLLOUT, 0};
      rc = ::poll(&p, 1, timeout_ms) == 1 ? 0 : -1;
      int err = rc == 0 ? 0 : ETIMEDOUT;
      socklen_t len = sizeof err;
      if (rc == 0) ::getsockopt(s.fd(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) {
        errno = err;
        rc = -1;
      }
    }
    if (rc != 0) {
      last = std::strerror(errno);
      continue;
    }
    ::fcntl(s.fd(), F_SETFL, flags);
    set_timeouts(s.fd(), timeout_ms);
    ::freeaddrinfo(res);
    return s;
  }
  ::freeaddrinfo(res);
  throw PredictorUnavailableError("cannot connect to " + ep.host + ":" + port + ": " + last);
}

}  // namespace net

/// Supplies the image bytes sent for a frame.
using ImageSource = std::function<wire::Image(const FrameRef&)>;

/// One connection, one request in flight. The connection is opened lazily
/// and re-opened after a transport failure.
class BridgePredictor : public Predictor {
 public:
  BridgePredictor(Endpoint endpoint, ImageSource images, int timeout_ms = 30000)
      : endpoint_(std::move(endpoint)), images_(std::move(images)), timeout_ms_(timeout_ms) {
    if (!images_) throw ConfigError("bridge predictor needs an image source");
  }

  PredictionPair predict(const FrameRef& i, const FrameRef& j) override {
    return call(wire::Op::predict, {images_(i), images_(j)});
  }

  MonocularPrediction monocular_init(const FrameRef& frame) override {
    auto p = call(wire::Op::monocular_init, {images_(frame)});
    return {std::move(p.x_ii), std::move(p.c_ii), std::move(p.f_ii)};
  }

  std::uint32_t requests_sent() const { return next_id_; }

 private:
  PredictionPair call(wire::Op op, std::vector<wire::Image> images) {
    const wire::Request req{next_id_++, op, std::move(images)};
    const auto body = wire::encode_request(req);
    std::optional<std::vector<std::uint8_t>> reply;
    try {
      if (!socket_.is_open()) socket_ = net::connect_to(endpoint_, timeout_ms_);
      net::write_frame(socket_.fd(), body);
      reply = net::read_frame(socket_.fd());
    } catch (const IoError& e) {
      socket_.close();
      throw PredictorUnavailableError(std::string("bridge transport: ") + e.what());
    }
    if (!reply) {
      socket_.close();
      throw PredictorUnavailableError("bridge closed the connection");
    }
    wire::Response resp;
    try {
      resp = wire::decode_response(*reply);
    } catch (const ParseError& e) {
      socket_.close();
      throw PredictorUnavailableError(std::string("malformed bridge response: ") + e.what());
    }
    if (resp.id != req.id) {
      socket_.close();
      throw PredictorUnavailableError("bridge response id " + std::to_string(resp.id) + " does not match request " +
                                      std::to_string(req.id));
    }
    if (resp.status != wire::kOk) {
      throw PredictorUnavailableError("bridge error status " + std::to_string(resp.status) + ": " + resp.error);
    }
    return std::move(resp.pair);
  }

  Endpoint endpoint_;
  ImageSource images_;
  int timeout_ms_;
  net::Socket socket_;
  std::uint32_t next_id_ = 0;
};

}  // namespace mslam
