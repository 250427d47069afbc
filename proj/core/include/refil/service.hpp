#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <thread>
#include <variant>
#include <vector>

#include "refil/model.hpp"
#include "refil/privacy.hpp"
#include "refil/wire.hpp"

namespace refil {

/// Server-side models keyed by model id. Immutable once a Server owns it.
using ServerCatalog = std::map<std::string, Model>;

/// Loads every "<id>.server.rflm" checkpoint in `dir`.
ServerCatalog load_server_catalog(const std::filesystem::path& dir);

struct LogOff {};
/// Appends every accepted activation to an activation log.
struct HonestButCurious {
  std::filesystem::path path;
};
using LogMode = std::variant<LogOff, HonestButCurious>;

/// Could not reach the server, or the connection broke mid-exchange.
class ConnectionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// The server replied with an Error frame.
class ServerError : public std::runtime_error {
 public:
  ServerError(ErrorCode code, const std::string& message) : std::runtime_error(message), code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

/// "host:port"; port 0 binds an ephemeral port.
struct Endpoint {
  std::string host;
  std::uint16_t port = 0;
  static Endpoint parse(const std::string& address);
  std::string to_string() const { return host + ":" + std::to_string(port); }
};

/// Thread-per-connection split-inference server. Requests on one
/// connection are answered in order.
class Server {
 public:
  Server(ServerCatalog catalog, const std::string& bind_address, LogMode log = LogOff{});
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Bound port (resolved when the bind address used port 0).
  std::uint16_t port() const { return port_; }
  Endpoint endpoint() const { return {host_, port_}; }

  /// Accepts connections until stop() is called.
  void serve();
  /// serve() on a background thread.
  void start();
  /// Idempotent; closes the listener and all open connections.
  void stop();

  std::uint64_t requests_served() const { return served_.load(); }

 private:
  void handle(int fd);

  ServerCatalog catalog_;
  std::unique_ptr<ActivationLogWriter> log_;
  std::string host_;
  std::uint16_t port_ = 0;
  int listen_fd_ = -1;
  std::atomic<bool> stopping_{false};
  std::atomic<std::uint64_t> served_{0};
  std::thread background_;
  std::mutex conn_mu_;
  std::map<int, std::thread> connections_;
  std::vector<std::thread> finished_;
};

/// One persistent connection to a Server.
class ServiceClient {
 public:
  explicit ServiceClient(const std::string& address,
                         std::chrono::milliseconds timeout = std::chrono::milliseconds(30000));
  ~ServiceClient();
  ServiceClient(const ServiceClient&) = delete;
  ServiceClient& operator=(const ServiceClient&) = delete;

  /// Model ids the server offers.
  std::vector<std::string> hello();
  /// Sends one activation and waits for its prediction. Server Error frames
  /// raise ServerError, or ShapeError for a shape mismatch.
  Tensor predict(const ActivationPayload& request);
  /// Sends raw bytes, for protocol tests.
  void send_raw(std::span<const std::uint8_t> bytes);
  /// Next frame from the server.
  WireMessage receive();

 private:
  int fd_ = -1;
};

struct ClientTelemetry {
  bool send = true;  // when false, sigma and dFIL go out as NaN
};

struct InferResult {
  Tensor prediction;
  NoisyActivation activation;
};

/// refil_forward on the client, then one request to the server. The raw
/// input stays in this process.
InferResult client_infer(const Model& client, const RefilConfig& cfg, const Tensor& x, ServiceClient& connection,
                         const std::string& model_id, Rng& rng, std::uint64_t request_id = 0,
                         ClientTelemetry telemetry = {});
InferResult client_infer(const Model& client, const RefilConfig& cfg, const Tensor& x,
                         const std::string& server_address, const std::string& model_id, Rng& rng,
                         std::uint64_t request_id = 0, ClientTelemetry telemetry = {});

}  // namespace refil
