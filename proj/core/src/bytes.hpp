#pragma once

// Little-endian byte writer/reader shared by the checkpoint and wire codecs.

#include <bit>
#include <cstdint>
#include <cstring>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "refil/tensor.hpp"

namespace refil::detail {

static_assert(std::endian::native == std::endian::little, "codecs assume a little-endian host");

class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u16(std::uint16_t v) { raw(&v, sizeof v); }
  void u32(std::uint32_t v) { raw(&v, sizeof v); }
  void u64(std::uint64_t v) { raw(&v, sizeof v); }
  void f32(float v) { raw(&v, sizeof v); }
  void bytes(std::span<const std::uint8_t> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void string(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  /// rank byte followed by u32 dims.
  void shape(const Shape& s) {
    if (s.size() > 255) throw std::length_error("rank exceeds 255");
    u8(static_cast<std::uint8_t>(s.size()));
    for (std::size_t d : s) u32(static_cast<std::uint32_t>(d));
  }
  void tensor(const Tensor& t) {
    shape(t.shape());
    raw(t.ptr(), t.size() * sizeof(float));
  }

  std::vector<std::uint8_t>& buffer() { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Reader over a byte span; throws Error (constructed from a message) on
/// truncation.
template <typename Error>
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data) : data_(data) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

  std::uint8_t u8() { return get<std::uint8_t>(); }
  std::uint16_t u16() { return get<std::uint16_t>(); }
  std::uint32_t u32() { return get<std::uint32_t>(); }
  std::uint64_t u64() { return get<std::uint64_t>(); }
  float f32() { return get<float>(); }

  std::span<const std::uint8_t> bytes(std::size_t n) {
    need(n);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::string string() {
    const std::uint32_t n = u32();
    auto b = bytes(n);
    return std::string(b.begin(), b.end());
  }
  Shape shape() {
    const std::uint8_t rank = u8();
    Shape s(rank);
    for (auto& d : s) d = u32();
    return s;
  }
  /// Shape whose dims are all positive, for tensor headers.
  Shape tensor_shape() {
    const std::size_t at = pos_;
    Shape s = shape();
    for (std::size_t d : s) {
      if (d == 0) throw Error("zero dimension in tensor header at byte " + std::to_string(at));
    }
    return s;
  }
  Tensor tensor() {
    Shape s = tensor_shape();
    const std::size_t n = shape_size(s);
    if (n > remaining() / sizeof(float)) {
      throw Error("tensor data truncated at byte " + std::to_string(pos_) + " (need " + std::to_string(n) +
                  " floats)");
    }
    std::vector<float> values(n);
    std::memcpy(values.data(), data_.data() + pos_, n * sizeof(float));
    pos_ += n * sizeof(float);
    return Tensor(std::move(s), std::move(values));
  }

 private:
  void need(std::size_t n) {
    if (n > remaining()) {
      throw Error("truncated input at byte " + std::to_string(pos_) + " (need " + std::to_string(n) + ", have " +
                  std::to_string(remaining()) + ")");
    }
  }
  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, data_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
};

}  // namespace refil::detail
