#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <vector>

#include "refil/model.hpp"

namespace refil {

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::uint8_t kCheckpointVersion = 1;

// RFLM layout, all integers little-endian:
//   "RFLM" | version u8 | layer count u32 | input shape header | layers...
// shape header = rank u8 followed by rank u32 values.
// layer = kind tag u8 | attribute header | parameter tensors | nested lists
// parameter tensor = shape header | raw f32 data
// nested list = layer count u32 | layers...
std::vector<std::uint8_t> encode_model(const Model& model);
Model decode_model(std::span<const std::uint8_t> bytes);

void save_model(const std::filesystem::path& path, const Model& model);
Model load_model(const std::filesystem::path& path);

}  // namespace refil
