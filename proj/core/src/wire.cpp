#include "refil/wire.hpp"

#include <cstring>
#include <iterator>

#include "bytes.hpp"

namespace refil {

namespace {

using Reader = detail::ByteReader<DecodeError>;
constexpr char kMagic[4] = {'S', 'P', 'L', 'T'};

void encode_payload(detail::ByteWriter& w, const HelloPayload& p) {
  w.u32(static_cast<std::uint32_t>(p.model_ids.size()));
  for (const auto& id : p.model_ids) w.string(id);
}
void encode_payload(detail::ByteWriter& w, const ActivationPayload& p) {
  w.string(p.model_id);
  w.tensor(p.tensor);
  w.f32(p.sigma);
  w.f32(p.achieved_dfil);
  w.u64(p.request_id);
}
void encode_payload(detail::ByteWriter& w, const PredictionPayload& p) {
  w.u64(p.request_id);
  w.tensor(p.prediction);
}
void encode_payload(detail::ByteWriter& w, const ErrorPayload& p) {
  w.u64(p.request_id);
  w.u16(static_cast<std::uint16_t>(p.code));
  w.string(p.message);
}

}  // namespace

MessageType message_type(const WireMessage& m) {
  return static_cast<MessageType>(m.index() + 1);
}

std::vector<std::uint8_t> encode(const WireMessage& m) {
  detail::ByteWriter body;
  std::visit([&](const auto& p) { encode_payload(body, p); }, m);
  detail::ByteWriter w;
  w.raw(kMagic, 4);
  w.u8(kWireVersion);
  w.u8(static_cast<std::uint8_t>(message_type(m)));
  w.u64(body.buffer().size());
  w.bytes(body.buffer());
  return w.take();
}

FrameHeader decode_header(std::span<const std::uint8_t> header) {
  if (header.size() < kFrameHeaderSize) {
    throw DecodeError("truncated frame header: " + std::to_string(header.size()) + " of 14 bytes");
  }
  if (std::memcmp(header.data(), kMagic, 4) != 0) throw DecodeError("bad frame magic at byte 0");
  Reader r(header.subspan(4, kFrameHeaderSize - 4));
  FrameHeader h;
  h.version = r.u8();
  if (h.version != kWireVersion) throw DecodeError("unsupported wire version " + std::to_string(h.version));
  const std::uint8_t type = r.u8();
  if (type < 1 || type > 4) throw DecodeError("unknown message type " + std::to_string(type));
  h.type = static_cast<MessageType>(type);
  h.payload_len = r.u64();
  if (h.payload_len > kMaxPayloadSize) {
    throw DecodeError("payload length " + std::to_string(h.payload_len) + " exceeds limit");
  }
  return h;
}

WireMessage decode_payload(MessageType type, std::span<const std::uint8_t> payload) {
  Reader r(payload);
  WireMessage out;
  switch (type) {
    case MessageType::Hello: {
      HelloPayload p;
      const std::uint32_t n = r.u32();
      if (n > r.remaining() / 4) throw DecodeError("hello id count " + std::to_string(n) + " exceeds payload");
      for (std::uint32_t i = 0; i < n; ++i) p.model_ids.push_back(r.string());
      out = std::move(p);
      break;
    }
    case MessageType::ActivationRequest: {
      ActivationPayload p;
      p.model_id = r.string();
      p.tensor = r.tensor();
      p.sigma = r.f32();
      p.achieved_dfil = r.f32();
      p.request_id = r.u64();
      out = std::move(p);
      break;
    }
    case MessageType::PredictionResponse: {
      PredictionPayload p;
      p.request_id = r.u64();
      p.prediction = r.tensor();
      out = std::move(p);
      break;
    }
    case MessageType::Error: {
      ErrorPayload p;
      p.request_id = r.u64();
      p.code = static_cast<ErrorCode>(r.u16());
      p.message = r.string();
      out = std::move(p);
      break;
    }
    default:
      throw DecodeError("unknown message type " + std::to_string(static_cast<int>(type)));
  }
  if (!r.done()) throw DecodeError("trailing bytes in payload at byte " + std::to_string(r.offset()));
  return out;
}

WireMessage decode(std::span<const std::uint8_t> frame) {
  const FrameHeader h = decode_header(frame);
  const auto rest = frame.subspan(kFrameHeaderSize);
  if (rest.size() != h.payload_len) {
    throw DecodeError("payload length mismatch: header says " + std::to_string(h.payload_len) + ", frame has " +
                      std::to_string(rest.size()));
  }
  return decode_payload(h.type, rest);
}

ActivationLogWriter::ActivationLogWriter(const std::filesystem::path& path)
    : out_(path, std::ios::binary | std::ios::app) {
  if (!out_) throw std::runtime_error("cannot open activation log " + path.string());
}

void ActivationLogWriter::append(const ActivationPayload& p) {
  const auto bytes = encode(p);
  std::lock_guard lock(mu_);
  out_.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  out_.flush();
}

void write_activation_log(const std::filesystem::path& path, const std::vector<ActivationPayload>& entries) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write activation log " + path.string());
  for (const auto& e : entries) {
    const auto bytes = encode(e);
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  }
}

std::vector<ActivationPayload> read_activation_log(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open activation log " + path.string());
  const std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::span<const std::uint8_t> all(data);
  std::vector<ActivationPayload> out;
  std::size_t pos = 0;
  while (pos < all.size()) {
    const FrameHeader h = [&] {
      try {
        return decode_header(all.subspan(pos));
      } catch (const DecodeError& e) {
        throw DecodeError(path.string() + ": frame at byte " + std::to_string(pos) + ": " + e.what());
      }
    }();
    if (h.type != MessageType::ActivationRequest) {
      throw DecodeError(path.string() + ": non-activation frame at byte " + std::to_string(pos));
    }
    if (h.payload_len > all.size() - pos - kFrameHeaderSize) {
      throw DecodeError(path.string() + ": truncated frame at byte " + std::to_string(pos));
    }
    out.push_back(std::get<ActivationPayload>(
        decode_payload(h.type, all.subspan(pos + kFrameHeaderSize, h.payload_len))));
    pos += kFrameHeaderSize + h.payload_len;
  }
  return out;
}

}  // namespace refil
