#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <mutex>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "refil/tensor.hpp"

namespace refil {

// Frame: "SPLT" | version u8 | type u8 | payload_len u64 LE | payload.
inline constexpr std::uint8_t kWireVersion = 1;
inline constexpr std::size_t kFrameHeaderSize = 14;
inline constexpr std::uint64_t kMaxPayloadSize = std::uint64_t{1} << 30;

enum class MessageType : std::uint8_t { Hello = 1, ActivationRequest = 2, PredictionResponse = 3, Error = 4 };

enum class ErrorCode : std::uint16_t {
  Malformed = 1,
  UnknownModel = 2,
  ShapeMismatch = 3,
  UnexpectedMessage = 4,
  Internal = 5,
};

/// Client greeting carries no ids; the server reply lists its models.
struct HelloPayload {
  std::vector<std::string> model_ids;
  bool operator==(const HelloPayload&) const = default;
};

/// The only client-to-server data message. It has no field for the raw
/// input, only the noised split activation and telemetry.
struct ActivationPayload {
  std::string model_id;
  Tensor tensor;
  float sigma = 0.0f;
  float achieved_dfil = 0.0f;
  std::uint64_t request_id = 0;
  bool operator==(const ActivationPayload&) const = default;
};

struct PredictionPayload {
  std::uint64_t request_id = 0;
  Tensor prediction;
  bool operator==(const PredictionPayload&) const = default;
};

struct ErrorPayload {
  std::uint64_t request_id = 0;
  ErrorCode code = ErrorCode::Internal;
  std::string message;
  bool operator==(const ErrorPayload&) const = default;
};

using WireMessage = std::variant<HelloPayload, ActivationPayload, PredictionPayload, ErrorPayload>;

class DecodeError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

MessageType message_type(const WireMessage& m);

struct FrameHeader {
  std::uint8_t version = kWireVersion;
  MessageType type = MessageType::Hello;
  std::uint64_t payload_len = 0;
};

std::vector<std::uint8_t> encode(const WireMessage& m);
/// Validates magic, version, type and the payload size limit.
FrameHeader decode_header(std::span<const std::uint8_t> header);
WireMessage decode_payload(MessageType type, std::span<const std::uint8_t> payload);
/// Decodes exactly one complete frame; trailing bytes are an error.
WireMessage decode(std::span<const std::uint8_t> frame);

/// Appends ActivationRequest frames; safe to call from several threads.
class ActivationLogWriter {
 public:
  explicit ActivationLogWriter(const std::filesystem::path& path);
  void append(const ActivationPayload& p);

 private:
  std::mutex mu_;
  std::ofstream out_;
};

void write_activation_log(const std::filesystem::path& path, const std::vector<ActivationPayload>& entries);
std::vector<ActivationPayload> read_activation_log(const std::filesystem::path& path);

}  // namespace refil
