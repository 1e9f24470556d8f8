#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstring>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "inspect/binary_io.hpp"
#include "inspect/error.hpp"
#include "inspect/protocol.hpp"

// Minimal blocking TCP transport for the line protocol.
namespace inspect::net {

class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { close(); }

  int fd() const noexcept { return fd_; }
  bool valid() const noexcept { return fd_ >= 0; }
  void close() noexcept {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void send_all(std::span<const std::uint8_t> bytes) {
    std::size_t sent = 0;
    while (sent < bytes.size()) {
      const ssize_t n = ::send(fd_, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(std::string("send failed: ") + std::strerror(errno));
      sent += static_cast<std::size_t>(n);
    }
  }

  // Waits up to timeout_ms for data; returns bytes read, 0 on orderly close,
  // nullopt on timeout.
  std::optional<std::size_t> recv_some(std::uint8_t* buf, std::size_t cap, int timeout_ms) {
    pollfd p{fd_, POLLIN, 0};
    while (true) {
      const int r = ::poll(&p, 1, timeout_ms);
      if (r < 0 && errno == EINTR) continue;
      if (r < 0) throw Error(std::string("poll failed: ") + std::strerror(errno));
      if (r == 0) return std::nullopt;
      break;
    }
    while (true) {
      const ssize_t n = ::recv(fd_, buf, cap, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw Error(std::string("recv failed: ") + std::strerror(errno));
      return static_cast<std::size_t>(n);
    }
  }

 private:
  int fd_ = -1;
};

inline sockaddr_in resolve(const std::string& host, int port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr) {
    throw ConfigError("cannot resolve host '" + host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  ::freeaddrinfo(res);
  return addr;
}

inline Socket connect_to(const std::string& host, int port) {
  const sockaddr_in addr = resolve(host, port);
  Socket s(::socket(AF_INET, SOCK_STREAM, 0));
  if (!s.valid()) throw Error("socket() failed");
  if (::connect(s.fd(), reinterpret_cast<const sockaddr*>(&addr), sizeof addr) != 0) {
    throw Error("cannot connect to " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
  }
  const int one = 1;
  ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return s;
}

// Frame-level connection: sends messages and reads whole frames.
class FrameChannel {
 public:
  explicit FrameChannel(Socket s) : sock_(std::move(s)) {}

  void send(const ProtocolMessage& m) { sock_.send_all(encode_frame(m)); }

  // Next message, or nullopt on timeout or when the peer closed.
  std::optional<ProtocolMessage> receive(int timeout_ms) {
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(timeout_ms);
    while (true) {
      if (auto m = decoder_.next()) return m;
      const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
      if (left.count() <= 0) return std::nullopt;
      std::uint8_t buf[65536];
      const auto n = sock_.recv_some(buf, sizeof buf, static_cast<int>(left.count()));
      if (!n) return std::nullopt;
      if (*n == 0) {
        closed_ = true;
        return std::nullopt;
      }
      decoder_.feed(std::span<const std::uint8_t>(buf, *n));
    }
  }

  bool closed() const noexcept { return closed_; }
  const std::vector<FramingCode>& framing_errors() const noexcept { return decoder_.errors(); }
  Socket& socket() noexcept { return sock_; }

 private:
  Socket sock_;
  StreamDecoder decoder_;
  bool closed_ = false;
};

// Accepts connections and serves each on its own thread. The handler maps a
// request to an optional reply.
class FrameServer {
 public:
  using Handler = std::function<std::optional<ProtocolMessage>(const ProtocolMessage&)>;

  FrameServer(std::string host, int port, Handler handler) : handler_(std::move(handler)) {
    listener_ = Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener_.valid()) throw Error("socket() failed");
    const int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr = resolve(host, port);
    if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw Error("cannot bind " + host + ":" + std::to_string(port) + ": " + std::strerror(errno));
    }
    if (::listen(listener_.fd(), 16) != 0) throw Error("listen failed");
    socklen_t len = sizeof addr;
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::thread([this] { accept_loop(); });
  }

  ~FrameServer() { stop(); }

  int port() const noexcept { return port_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    listener_.shutdown();
    if (acceptor_.joinable()) acceptor_.join();
    std::lock_guard lock(mu_);
    for (auto& c : conns_) c.sock->shutdown();
    for (auto& c : conns_)
      if (c.thread.joinable()) c.thread.join();
    conns_.clear();
  }

 private:
  struct Conn {
    std::shared_ptr<Socket> sock;
    std::thread thread;
  };

  void accept_loop() {
    while (!stopping_) {
      pollfd p{listener_.fd(), POLLIN, 0};
      if (::poll(&p, 1, 100) <= 0) continue;
      const int fd = ::accept(listener_.fd(), nullptr, nullptr);
      if (fd < 0) continue;
      const int one = 1;
      ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      std::lock_guard lock(mu_);
      if (stopping_) {
        ::close(fd);
        break;
      }
      auto sock = std::make_shared<Socket>(fd);
      conns_.push_back({sock, std::thread([this, sock] { serve(sock); })});
    }
  }

  void serve(std::shared_ptr<Socket> sock) {
    StreamDecoder decoder;
    std::uint8_t buf[65536];
    while (!stopping_) {
      std::optional<std::size_t> n;
      try {
        n = sock->recv_some(buf, sizeof buf, 100);
      } catch (const Error&) {
        return;
      }
      if (!n) continue;
      if (*n == 0) return;
      decoder.feed(std::span<const std::uint8_t>(buf, *n));
      while (auto m = decoder.next()) {
        try {
          if (auto reply = handler_(*m)) sock->send_all(encode_frame(*reply));
        } catch (const Error&) {
          return;
        }
      }
    }
  }

  Handler handler_;
  Socket listener_;
  int port_ = 0;
  std::thread acceptor_;
  std::atomic<bool> stopping_{false};
  std::mutex mu_;
  std::list<Conn> conns_;
};

}  // namespace inspect::net
