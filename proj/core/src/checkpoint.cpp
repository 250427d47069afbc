#include "refil/checkpoint.hpp"

#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>

#include "bytes.hpp"

namespace refil {

namespace {

using Writer = detail::ByteWriter;
using Reader = detail::ByteReader<CheckpointError>;

constexpr char kMagic[4] = {'R', 'F', 'L', 'M'};
constexpr std::uint32_t kMaxNesting = 64;

void write_list(Writer& w, const LayerList& layers);

void write_layer(Writer& w, const Layer& layer) {
  w.u8(static_cast<std::uint8_t>(layer.kind()));
  std::visit(
      [&](const auto& op) {
        using T = std::remove_cvref_t<decltype(op)>;
        if constexpr (std::is_same_v<T, Dense>) {
          w.shape({});
          w.tensor(op.weight);
          w.tensor(op.bias);
        } else if constexpr (std::is_same_v<T, Conv2d>) {
          w.shape({op.stride, op.padding});
          w.tensor(op.kernel);
          w.tensor(op.bias);
        } else if constexpr (std::is_same_v<T, AvgPool>) {
          w.shape({op.window});
        } else if constexpr (std::is_same_v<T, EmbeddingLookup>) {
          w.shape({op.field});
          w.tensor(op.table);
        } else if constexpr (std::is_same_v<T, Concat>) {
          w.shape({op.axis, op.branches.size()});
          for (const LayerList& b : op.branches) write_list(w, b);
        } else if constexpr (std::is_same_v<T, Standardize>) {
          w.shape({});
          w.tensor(op.mean);
          w.tensor(op.stddev);
        } else if constexpr (std::is_same_v<T, Residual>) {
          w.shape({});
          write_list(w, op.body);
        } else {
          w.shape({});  // Relu, Flatten
        }
      },
      layer.op);
}

void write_list(Writer& w, const LayerList& layers) {
  w.u32(static_cast<std::uint32_t>(layers.size()));
  for (const Layer& l : layers) write_layer(w, l);
}

LayerList read_list(Reader& r, std::uint32_t depth);

Shape attributes(Reader& r, std::size_t expected_rank, const char* kind) {
  const std::size_t at = r.offset();
  Shape a = r.shape();
  if (a.size() != expected_rank) {
    throw CheckpointError(std::string(kind) + ": expected " + std::to_string(expected_rank) +
                          " attributes at byte " + std::to_string(at) + ", got " + std::to_string(a.size()));
  }
  return a;
}

Layer read_layer(Reader& r, std::uint32_t depth) {
  const std::size_t at = r.offset();
  const std::uint8_t tag = r.u8();
  switch (static_cast<LayerKind>(tag)) {
    case LayerKind::Dense: {
      attributes(r, 0, "Dense");
      Tensor w = r.tensor();
      Tensor b = r.tensor();
      return Dense{std::move(w), std::move(b)};
    }
    case LayerKind::Conv2d: {
      Shape a = attributes(r, 2, "Conv2d");
      Tensor k = r.tensor();
      Tensor b = r.tensor();
      return Conv2d{std::move(k), std::move(b), a[0], a[1]};
    }
    case LayerKind::Relu:
      attributes(r, 0, "Relu");
      return Relu{};
    case LayerKind::AvgPool:
      return AvgPool{attributes(r, 1, "AvgPool")[0]};
    case LayerKind::Flatten:
      attributes(r, 0, "Flatten");
      return Flatten{};
    case LayerKind::EmbeddingLookup: {
      Shape a = attributes(r, 1, "EmbeddingLookup");
      Tensor t = r.tensor();
      return EmbeddingLookup{std::move(t), a[0]};
    }
    case LayerKind::Concat: {
      Shape a = attributes(r, 2, "Concat");
      Concat c;
      c.axis = a[0];
      for (std::size_t b = 0; b < a[1]; ++b) c.branches.push_back(read_list(r, depth + 1));
      return c;
    }
    case LayerKind::Standardize: {
      attributes(r, 0, "Standardize");
      Tensor m = r.tensor();
      Tensor s = r.tensor();
      return Standardize{std::move(m), std::move(s)};
    }
    case LayerKind::Residual:
      attributes(r, 0, "Residual");
      return Residual{read_list(r, depth + 1)};
  }
  throw CheckpointError("unknown layer tag " + std::to_string(tag) + " at byte " + std::to_string(at));
}

LayerList read_list(Reader& r, std::uint32_t depth) {
  if (depth > kMaxNesting) throw CheckpointError("layer nesting too deep");
  const std::uint32_t n = r.u32();
  // Each layer occupies at least two bytes.
  if (n > r.remaining() / 2) throw CheckpointError("layer count " + std::to_string(n) + " exceeds file size");
  LayerList layers;
  layers.reserve(n);
  for (std::uint32_t i = 0; i < n; ++i) layers.push_back(read_layer(r, depth));
  return layers;
}

}  // namespace

std::vector<std::uint8_t> encode_model(const Model& model) {
  Writer w;
  w.raw(kMagic, 4);
  w.u8(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(model.layer_count()));
  w.shape(model.input_shape());
  for (const Layer& l : model.layers()) write_layer(w, l);
  return w.take();
}

Model decode_model(std::span<const std::uint8_t> bytes) {
  Reader r(bytes);
  auto magic = r.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) throw CheckpointError("bad magic: not an RFLM checkpoint");
  const std::uint8_t version = r.u8();
  if (version != kCheckpointVersion) {
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint32_t count = r.u32();
  Shape input = r.tensor_shape();
  if (count > r.remaining() / 2) throw CheckpointError("layer count exceeds file size");
  LayerList layers;
  layers.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) layers.push_back(read_layer(r, 0));
  if (!r.done()) {
    throw CheckpointError("trailing bytes after last layer at byte " + std::to_string(r.offset()));
  }
  try {
    return Model(std::move(input), std::move(layers));
  } catch (const ShapeError& e) {
    throw CheckpointError(std::string("inconsistent checkpoint: ") + e.what());
  }
}

void save_model(const std::filesystem::path& path, const Model& model) {
  const auto bytes = encode_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("write failed: " + path.string());
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_model(bytes);
}

}  // namespace refil
