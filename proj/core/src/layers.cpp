#include "refil/layers.hpp"

#include <cmath>
#include <string>

#include "refil/rng.hpp"

namespace refil {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

[[noreturn]] void fail(const std::string& msg) { throw ShapeError(msg); }

Shape concat_output_shape(const Concat& c, const Shape& in) {
  if (c.branches.empty()) fail("Concat: no branches");
  Shape out;
  for (std::size_t b = 0; b < c.branches.size(); ++b) {
    Shape s = layers_output_shape(c.branches[b], in);
    if (c.axis >= s.size()) fail("Concat: axis " + std::to_string(c.axis) + " out of range for branch output " +
                                 shape_to_string(s));
    if (b == 0) {
      out = s;
      continue;
    }
    if (s.size() != out.size()) fail("Concat: branch ranks differ");
    for (std::size_t a = 0; a < s.size(); ++a) {
      if (a != c.axis && s[a] != out[a]) {
        fail("Concat: branch " + std::to_string(b) + " output " + shape_to_string(s) + " incompatible with " +
             shape_to_string(out));
      }
    }
    out[c.axis] += s[c.axis];
  }
  return out;
}

}  // namespace

LayerKind Layer::kind() const { return static_cast<LayerKind>(op.index() + 1); }

std::string_view Layer::name() const {
  static constexpr std::string_view kNames[] = {"Dense",           "Conv2d", "Relu",        "AvgPool", "Flatten",
                                                "EmbeddingLookup", "Concat", "Standardize", "Residual"};
  return kNames[op.index()];
}

Shape layer_output_shape(const Layer& layer, const Shape& in) {
  return std::visit(
      Overloaded{
          [&](const Dense& d) -> Shape {
            if (d.weight.rank() != 2) fail("Dense: weight must be rank 2");
            if (d.bias.shape() != Shape{d.weight.dim(0)}) fail("Dense: bias shape mismatch");
            if (shape_size(in) != d.weight.dim(1)) {
              fail("Dense: expected input size " + std::to_string(d.weight.dim(1)) + ", got " + shape_to_string(in));
            }
            return {d.weight.dim(0)};
          },
          [&](const Conv2d& c) -> Shape {
            if (c.kernel.rank() != 4) fail("Conv2d: kernel must be rank 4");
            if (c.bias.shape() != Shape{c.kernel.dim(0)}) fail("Conv2d: bias shape mismatch");
            if (c.stride == 0) fail("Conv2d: stride must be positive");
            if (in.size() != 3 || in[0] != c.kernel.dim(1)) {
              fail("Conv2d: expected [" + std::to_string(c.kernel.dim(1)) + "xHxW] input, got " + shape_to_string(in));
            }
            const std::size_t kh = c.kernel.dim(2), kw = c.kernel.dim(3);
            if (in[1] + 2 * c.padding < kh || in[2] + 2 * c.padding < kw) fail("Conv2d: kernel larger than input");
            return {c.kernel.dim(0), (in[1] + 2 * c.padding - kh) / c.stride + 1,
                    (in[2] + 2 * c.padding - kw) / c.stride + 1};
          },
          [&](const Relu&) -> Shape { return in; },
          [&](const AvgPool& p) -> Shape {
            if (in.size() != 3) fail("AvgPool: expected [CxHxW] input, got " + shape_to_string(in));
            if (p.window == 0 || in[1] < p.window || in[2] < p.window) fail("AvgPool: window larger than input");
            return {in[0], in[1] / p.window, in[2] / p.window};
          },
          [&](const Flatten&) -> Shape { return {shape_size(in)}; },
          [&](const EmbeddingLookup& e) -> Shape {
            if (e.table.rank() != 2) fail("EmbeddingLookup: table must be rank 2");
            if (in.size() != 1 || e.field >= in[0]) {
              fail("EmbeddingLookup: field " + std::to_string(e.field) + " out of range for index input " +
                   shape_to_string(in));
            }
            return {e.table.dim(1)};
          },
          [&](const Concat& c) -> Shape { return concat_output_shape(c, in); },
          [&](const Standardize& s) -> Shape {
            if (in.empty()) fail("Standardize: scalar input");
            if (s.mean.shape() != s.stddev.shape() || s.mean.rank() != 1 || s.mean.dim(0) != in[0]) {
              fail("Standardize: statistics must have length " + std::to_string(in[0]));
            }
            for (float v : s.stddev.data()) {
              if (!(v > 0.0f)) fail("Standardize: stddev must be positive");
            }
            return in;
          },
          [&](const Residual& r) -> Shape {
            Shape out = layers_output_shape(r.body, in);
            if (out != in) fail("Residual: body maps " + shape_to_string(in) + " to " + shape_to_string(out));
            return in;
          },
      },
      layer.op);
}

Shape layers_output_shape(const LayerList& layers, const Shape& in) {
  Shape s = in;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    try {
      s = layer_output_shape(layers[i], s);
    } catch (const ShapeError& e) {
      throw ShapeError("layer " + std::to_string(i) + " (" + std::string(layers[i].name()) + "): " + e.what());
    }
  }
  return s;
}

std::size_t layer_param_count(const Layer& layer) {
  return std::visit(Overloaded{
                        [](const Dense&) -> std::size_t { return 2; },
                        [](const Conv2d&) -> std::size_t { return 2; },
                        [](const EmbeddingLookup&) -> std::size_t { return 1; },
                        [](const Concat& c) -> std::size_t {
                          std::size_t n = 0;
                          for (const auto& b : c.branches)
                            for (const auto& l : b) n += layer_param_count(l);
                          return n;
                        },
                        [](const Residual& r) -> std::size_t {
                          std::size_t n = 0;
                          for (const auto& l : r.body) n += layer_param_count(l);
                          return n;
                        },
                        [](const auto&) -> std::size_t { return 0; },
                    },
                    layer.op);
}

namespace {

template <typename List, typename Out>
void collect_impl(List& layers, Out& out) {
  for (auto& layer : layers) {
    std::visit(
        [&](auto& op) {
          using T = std::remove_cvref_t<decltype(op)>;
          if constexpr (std::is_same_v<T, Dense>) {
            out.push_back(&op.weight);
            out.push_back(&op.bias);
          } else if constexpr (std::is_same_v<T, Conv2d>) {
            out.push_back(&op.kernel);
            out.push_back(&op.bias);
          } else if constexpr (std::is_same_v<T, EmbeddingLookup>) {
            out.push_back(&op.table);
          } else if constexpr (std::is_same_v<T, Concat>) {
            for (auto& b : op.branches) collect_impl(b, out);
          } else if constexpr (std::is_same_v<T, Residual>) {
            collect_impl(op.body, out);
          }
        },
        layer.op);
  }
}

}  // namespace

void collect_parameters(LayerList& layers, std::vector<Tensor*>& out) { collect_impl(layers, out); }
void collect_parameters(const LayerList& layers, std::vector<const Tensor*>& out) { collect_impl(layers, out); }

bool consumes_indices(const Layer& layer) {
  if (layer.is<EmbeddingLookup>()) return true;
  if (const auto* c = std::get_if<Concat>(&layer.op)) {
    for (const auto& branch : c->branches) {
      if (branch.size() != 1 || !consumes_indices(branch.front())) return false;
    }
    return !c->branches.empty();
  }
  return false;
}

Dense make_dense(std::size_t in, std::size_t out, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in));
  return Dense{rng.uniform_tensor({out, in}, -bound, bound), rng.uniform_tensor({out}, -bound, bound)};
}

Conv2d make_conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                   std::size_t padding, Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_channels * kernel * kernel));
  return Conv2d{rng.uniform_tensor({out_channels, in_channels, kernel, kernel}, -bound, bound),
                rng.uniform_tensor({out_channels}, -bound, bound), stride, padding};
}

EmbeddingLookup make_embedding(std::size_t rows, std::size_t dim, std::size_t field, Rng& rng, float scale) {
  return EmbeddingLookup{rng.normal_tensor({rows, dim}, scale), field};
}

}  // namespace refil
