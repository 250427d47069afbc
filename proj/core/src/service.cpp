#include "refil/service.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <cerrno>
#include <cmath>
#include <cstring>
#include <limits>

#include "refil/autodiff.hpp"
#include "refil/checkpoint.hpp"

namespace refil {

namespace {

constexpr std::string_view kServerSuffix = ".server.rflm";

bool send_all(int fd, std::span<const std::uint8_t> bytes) {
  std::size_t sent = 0;
  while (sent < bytes.size()) {
    const ssize_t n = ::send(fd, bytes.data() + sent, bytes.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

// Reads up to n bytes; fewer only on EOF, timeout or error.
std::size_t recv_exact(int fd, std::uint8_t* out, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, out + got, n - got, 0);
    if (r < 0 && errno == EINTR) continue;
    if (r <= 0) break;
    got += static_cast<std::size_t>(r);
  }
  return got;
}

// Payload bytes are read in chunks so a lying length field cannot force a
// large allocation up front.
bool recv_payload(int fd, std::uint64_t len, std::vector<std::uint8_t>& out) {
  constexpr std::size_t kChunk = std::size_t{1} << 20;
  out.clear();
  while (out.size() < len) {
    const std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(kChunk, len - out.size()));
    const std::size_t at = out.size();
    out.resize(at + want);
    const std::size_t got = recv_exact(fd, out.data() + at, want);
    if (got < want) {
      out.resize(at + got);
      return false;
    }
  }
  return true;
}

void set_timeouts(int fd, std::chrono::milliseconds timeout) {
  timeval tv{};
  tv.tv_sec = static_cast<time_t>(timeout.count() / 1000);
  tv.tv_usec = static_cast<suseconds_t>((timeout.count() % 1000) * 1000);
  ::setsockopt(fd, SOL_SOCKET, SO_RCVTIMEO, &tv, sizeof tv);
  ::setsockopt(fd, SOL_SOCKET, SO_SNDTIMEO, &tv, sizeof tv);
}

void set_nodelay(int fd) {
  int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

std::string errno_text() { return std::strerror(errno); }

addrinfo* resolve(const Endpoint& ep, bool passive) {
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  if (passive) hints.ai_flags = AI_PASSIVE;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(ep.port);
  const int rc = ::getaddrinfo(ep.host.empty() ? nullptr : ep.host.c_str(), port.c_str(), &hints, &res);
  if (rc != 0) throw ConnectionError("cannot resolve " + ep.to_string() + ": " + ::gai_strerror(rc));
  return res;
}

}  // namespace

Endpoint Endpoint::parse(const std::string& address) {
  const auto colon = address.rfind(':');
  if (colon == std::string::npos) throw std::invalid_argument("address '" + address + "' is not host:port");
  Endpoint ep;
  ep.host = address.substr(0, colon);
  const std::string port = address.substr(colon + 1);
  std::size_t used = 0;
  unsigned long v = 0;
  try {
    v = std::stoul(port, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (port.empty() || used != port.size() || v > 65535) {
    throw std::invalid_argument("address '" + address + "' has an invalid port");
  }
  ep.port = static_cast<std::uint16_t>(v);
  return ep;
}

ServerCatalog load_server_catalog(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw std::runtime_error("model directory " + dir.string() + " not found");
  ServerCatalog catalog;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    const std::string name = entry.path().filename().string();
    if (name.size() <= kServerSuffix.size() || !name.ends_with(kServerSuffix)) continue;
    catalog.emplace(name.substr(0, name.size() - kServerSuffix.size()), load_model(entry.path()));
  }
  if (catalog.empty()) throw std::runtime_error("no *.server.rflm checkpoints in " + dir.string());
  return catalog;
}

Server::Server(ServerCatalog catalog, const std::string& bind_address, LogMode log) : catalog_(std::move(catalog)) {
  if (catalog_.empty()) throw std::invalid_argument("server catalog is empty");
  if (const auto* hbc = std::get_if<HonestButCurious>(&log)) log_ = std::make_unique<ActivationLogWriter>(hbc->path);
  const Endpoint ep = Endpoint::parse(bind_address);
  host_ = ep.host.empty() ? "0.0.0.0" : ep.host;
  addrinfo* res = resolve(ep, true);
  listen_fd_ = ::socket(res->ai_family, res->ai_socktype, res->ai_protocol);
  if (listen_fd_ < 0) {
    ::freeaddrinfo(res);
    throw ConnectionError("socket: " + errno_text());
  }
  int one = 1;
  ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
  if (::bind(listen_fd_, res->ai_addr, res->ai_addrlen) != 0 || ::listen(listen_fd_, 256) != 0) {
    const std::string why = errno_text();
    ::freeaddrinfo(res);
    ::close(listen_fd_);
    throw ConnectionError("cannot listen on " + bind_address + ": " + why);
  }
  ::freeaddrinfo(res);
  sockaddr_in bound{};
  socklen_t len = sizeof bound;
  ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&bound), &len);
  port_ = ntohs(bound.sin_port);
}

Server::~Server() {
  stop();
}

void Server::start() {
  background_ = std::thread([this] { serve(); });
}

void Server::serve() {
  while (!stopping_.load()) {
    const int fd = ::accept(listen_fd_, nullptr, nullptr);
    if (fd < 0) {
      if (stopping_.load()) break;
      if (errno == EINTR || errno == ECONNABORTED || errno == EMFILE || errno == ENFILE) {
        std::this_thread::sleep_for(std::chrono::milliseconds(1));
        continue;
      }
      break;
    }
    set_nodelay(fd);
    std::lock_guard lock(conn_mu_);
    for (auto& t : finished_) t.join();
    finished_.clear();
    if (stopping_.load()) {
      ::close(fd);
      break;
    }
    connections_.emplace(fd, std::thread([this, fd] { handle(fd); }));
  }
}

void Server::stop() {
  if (stopping_.exchange(true)) {
    if (background_.joinable() && background_.get_id() != std::this_thread::get_id()) background_.join();
    return;
  }
  if (listen_fd_ >= 0) ::shutdown(listen_fd_, SHUT_RDWR);
  if (background_.joinable()) background_.join();
  {
    std::lock_guard lock(conn_mu_);
    for (auto& [fd, t] : connections_) ::shutdown(fd, SHUT_RDWR);
  }
  for (;;) {
    {
      std::lock_guard lock(conn_mu_);
      if (connections_.empty()) break;
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(1));
  }
  for (auto& t : finished_) t.join();
  finished_.clear();
  if (listen_fd_ >= 0) ::close(listen_fd_);
  listen_fd_ = -1;
}

void Server::handle(int fd) {
  const auto reply = [fd](const WireMessage& m) { return send_all(fd, encode(m)); };
  const auto fail = [&](std::uint64_t id, ErrorCode code, const std::string& msg) {
    reply(ErrorPayload{id, code, msg});
  };
  std::vector<std::uint8_t> payload;
  for (;;) {
    std::uint8_t hdr[kFrameHeaderSize];
    const std::size_t got = recv_exact(fd, hdr, kFrameHeaderSize);
    if (got == 0) break;
    if (got < kFrameHeaderSize) {
      fail(0, ErrorCode::Malformed, "truncated frame header (" + std::to_string(got) + " of 14 bytes)");
      break;
    }
    FrameHeader h;
    WireMessage msg;
    try {
      h = decode_header(hdr);
      if (!recv_payload(fd, h.payload_len, payload)) {
        fail(0, ErrorCode::Malformed, "truncated payload (" + std::to_string(payload.size()) + " of " +
                                          std::to_string(h.payload_len) + " bytes)");
        break;
      }
      msg = decode_payload(h.type, payload);
    } catch (const DecodeError& e) {
      fail(0, ErrorCode::Malformed, e.what());
      break;
    }

    bool ok = true;
    if (std::holds_alternative<HelloPayload>(msg)) {
      HelloPayload hello;
      for (const auto& [id, model] : catalog_) hello.model_ids.push_back(id);
      ok = reply(hello);
    } else if (const auto* req = std::get_if<ActivationPayload>(&msg)) {
      const auto it = catalog_.find(req->model_id);
      if (it == catalog_.end()) {
        ok = reply(ErrorPayload{req->request_id, ErrorCode::UnknownModel, "unknown model id '" + req->model_id + "'"});
      } else if (req->tensor.shape() != it->second.input_shape()) {
        ok = reply(ErrorPayload{req->request_id, ErrorCode::ShapeMismatch,
                                "activation shape " + shape_to_string(req->tensor.shape()) + " does not match " +
                                    req->model_id + " input " + shape_to_string(it->second.input_shape())});
      } else {
        try {
          Tensor out = forward(it->second, req->tensor);
          if (log_) log_->append(*req);
          ++served_;
          ok = reply(PredictionPayload{req->request_id, std::move(out)});
        } catch (const std::exception& e) {
          ok = reply(ErrorPayload{req->request_id, ErrorCode::Internal, e.what()});
        }
      }
    } else {
      ok = reply(ErrorPayload{0, ErrorCode::UnexpectedMessage, "clients may only send Hello or ActivationRequest"});
    }
    if (!ok) break;
  }
  std::lock_guard lock(conn_mu_);
  const auto it = connections_.find(fd);
  if (it != connections_.end()) {
    finished_.push_back(std::move(it->second));
    connections_.erase(it);
  }
  ::close(fd);
}

ServiceClient::ServiceClient(const std::string& address, std::chrono::milliseconds timeout) {
  const Endpoint ep = Endpoint::parse(address);
  addrinfo* res = resolve(ep, false);
  for (addrinfo* a = res; a; a = a->ai_next) {
    fd_ = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd_ < 0) continue;
    if (::connect(fd_, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd_);
    fd_ = -1;
  }
  const std::string why = errno_text();
  ::freeaddrinfo(res);
  if (fd_ < 0) throw ConnectionError("cannot connect to " + address + ": " + why);
  set_nodelay(fd_);
  set_timeouts(fd_, timeout);
}

ServiceClient::~ServiceClient() {
  if (fd_ >= 0) ::close(fd_);
}

void ServiceClient::send_raw(std::span<const std::uint8_t> bytes) {
  if (!send_all(fd_, bytes)) throw ConnectionError("send failed: " + errno_text());
}

WireMessage ServiceClient::receive() {
  std::uint8_t hdr[kFrameHeaderSize];
  const std::size_t got = recv_exact(fd_, hdr, kFrameHeaderSize);
  if (got < kFrameHeaderSize) throw ConnectionError("connection closed while waiting for a reply");
  try {
    const FrameHeader h = decode_header(hdr);
    std::vector<std::uint8_t> payload;
    if (!recv_payload(fd_, h.payload_len, payload)) throw ConnectionError("connection closed mid-frame");
    return decode_payload(h.type, payload);
  } catch (const DecodeError& e) {
    throw ConnectionError(std::string("malformed reply from server: ") + e.what());
  }
}

std::vector<std::string> ServiceClient::hello() {
  send_raw(encode(HelloPayload{}));
  WireMessage m = receive();
  if (auto* h = std::get_if<HelloPayload>(&m)) return std::move(h->model_ids);
  if (auto* e = std::get_if<ErrorPayload>(&m)) throw ServerError(e->code, e->message);
  throw ConnectionError("unexpected reply to Hello");
}

Tensor ServiceClient::predict(const ActivationPayload& request) {
  send_raw(encode(request));
  WireMessage m = receive();
  if (auto* p = std::get_if<PredictionPayload>(&m)) {
    if (p->request_id != request.request_id) {
      throw ConnectionError("reply for request " + std::to_string(p->request_id) + ", expected " +
                            std::to_string(request.request_id));
    }
    return std::move(p->prediction);
  }
  if (auto* e = std::get_if<ErrorPayload>(&m)) {
    if (e->code == ErrorCode::ShapeMismatch) throw ShapeError("server: " + e->message);
    throw ServerError(e->code, "server: " + e->message);
  }
  throw ConnectionError("unexpected reply to ActivationRequest");
}

InferResult client_infer(const Model& client, const RefilConfig& cfg, const Tensor& x, ServiceClient& connection,
                         const std::string& model_id, Rng& rng, std::uint64_t request_id, ClientTelemetry telemetry) {
  if (x.shape() != client.input_shape()) {
    throw ShapeError("client_infer: input shape " + shape_to_string(x.shape()) + " does not match client input " +
                     shape_to_string(client.input_shape()));
  }
  InferResult out;
  out.activation = refil_forward(client, x, cfg, rng);
  ActivationPayload req;
  req.model_id = model_id;
  req.tensor = out.activation.z_noised;
  const float nan = std::numeric_limits<float>::quiet_NaN();
  req.sigma = telemetry.send ? static_cast<float>(out.activation.sigma) : nan;
  req.achieved_dfil = telemetry.send ? static_cast<float>(out.activation.achieved_dfil) : nan;
  req.request_id = request_id;
  out.prediction = connection.predict(req);
  return out;
}

InferResult client_infer(const Model& client, const RefilConfig& cfg, const Tensor& x,
                         const std::string& server_address, const std::string& model_id, Rng& rng,
                         std::uint64_t request_id, ClientTelemetry telemetry) {
  ServiceClient connection(server_address);
  return client_infer(client, cfg, x, connection, model_id, rng, request_id, telemetry);
}

}  // namespace refil
