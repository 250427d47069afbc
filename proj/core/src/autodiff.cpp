#include "refil/autodiff.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace refil {

namespace {

// Eight independent partial sums in a fixed order: vectorizable without
// -ffast-math and bit-reproducible.
float dot_lanes(const float* a, const float* b, std::size_t n) {
  float acc[8] = {0, 0, 0, 0, 0, 0, 0, 0};
  std::size_t j = 0;
  for (; j + 8 <= n; j += 8) {
    for (std::size_t k = 0; k < 8; ++k) acc[k] += a[j + k] * b[j + k];
  }
  float tail = 0.0f;
  for (; j < n; ++j) tail += a[j] * b[j];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

// ---- Dense ----------------------------------------------------------------

Tensor dense_apply(const Dense& d, const Tensor& x, bool with_bias) {
  const std::size_t m = d.weight.dim(0), n = d.weight.dim(1);
  Tensor y({m});
  const float* w = d.weight.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    y[i] = dot_lanes(w + i * n, x.ptr(), n) + (with_bias ? d.bias[i] : 0.0f);
  }
  return y;
}

Tensor dense_transpose(const Dense& d, const Tensor& u, const Shape& in_shape) {
  const std::size_t m = d.weight.dim(0), n = d.weight.dim(1);
  Tensor g(in_shape);
  float* gs = g.ptr();
  const float* w = d.weight.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const float ui = u[i];
    if (ui == 0.0f) continue;
    const float* row = w + i * n;
    for (std::size_t j = 0; j < n; ++j) gs[j] += ui * row[j];
  }
  return g;
}

void dense_param_grad(const Dense& d, const Tensor& x, const Tensor& u, Tensor& dw, Tensor& db) {
  const std::size_t m = d.weight.dim(0), n = d.weight.dim(1);
  float* g = dw.ptr();
  const float* xs = x.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const float ui = u[i];
    db[i] += ui;
    if (ui == 0.0f) continue;
    float* row = g + i * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += ui * xs[j];
  }
}

// ---- Conv2d ---------------------------------------------------------------

struct ConvGeometry {
  std::size_t in_c, in_h, in_w, out_c, out_h, out_w, kh, kw, stride, pad;

  ConvGeometry(const Conv2d& c, const Shape& in)
      : in_c(in[0]),
        in_h(in[1]),
        in_w(in[2]),
        out_c(c.kernel.dim(0)),
        out_h((in[1] + 2 * c.padding - c.kernel.dim(2)) / c.stride + 1),
        out_w((in[2] + 2 * c.padding - c.kernel.dim(3)) / c.stride + 1),
        kh(c.kernel.dim(2)),
        kw(c.kernel.dim(3)),
        stride(c.stride),
        pad(c.padding) {}

  // Output columns ox with 0 <= ox*stride + kx - pad < in_w.
  void column_range(std::size_t kx, std::size_t& lo, std::size_t& hi) const {
    const long p = static_cast<long>(pad), s = static_cast<long>(stride), k = static_cast<long>(kx);
    long first = 0;
    if (p > k) first = (p - k + s - 1) / s;
    long last = (static_cast<long>(in_w) - 1 + p - k);
    last = last < 0 ? -1 : last / s;
    if (last >= static_cast<long>(out_w)) last = static_cast<long>(out_w) - 1;
    lo = static_cast<std::size_t>(first);
    hi = last < first ? lo : static_cast<std::size_t>(last + 1);
  }

  bool input_row(std::size_t oy, std::size_t ky, std::size_t& iy) const {
    const long r = static_cast<long>(oy * stride + ky) - static_cast<long>(pad);
    if (r < 0 || r >= static_cast<long>(in_h)) return false;
    iy = static_cast<std::size_t>(r);
    return true;
  }
};

Tensor conv_apply(const Conv2d& c, const Tensor& x, bool with_bias) {
  const ConvGeometry g(c, x.shape());
  Tensor y({g.out_c, g.out_h, g.out_w});
  const float* k = c.kernel.ptr();
  const float* xs = x.ptr();
  float* ys = y.ptr();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t o = 0; o < g.out_c; ++o) {
    float* yo = ys + o * plane;
    if (with_bias) {
      for (std::size_t p = 0; p < plane; ++p) yo[p] = c.bias[o];
    }
    for (std::size_t i = 0; i < g.in_c; ++i) {
      const float* xi = xs + i * g.in_h * g.in_w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const float w = k[((o * g.in_c + i) * g.kh + ky) * g.kw + kx];
          std::size_t lo, hi;
          g.column_range(kx, lo, hi);
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            std::size_t iy;
            if (!g.input_row(oy, ky, iy)) continue;
            float* yrow = yo + oy * g.out_w;
            const float* xrow = xi + iy * g.in_w;
            if (g.stride == 1) {
              const float* src = xrow + (lo + kx - g.pad);
              float* dst = yrow + lo;
              for (std::size_t t = 0, n = hi - lo; t < n; ++t) dst[t] += w * src[t];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) yrow[ox] += w * xrow[ox * g.stride + kx - g.pad];
            }
          }
        }
      }
    }
  }
  return y;
}

Tensor conv_transpose(const Conv2d& c, const Tensor& u, const Shape& in_shape) {
  const ConvGeometry g(c, in_shape);
  Tensor gx(in_shape);
  const float* k = c.kernel.ptr();
  const float* us = u.ptr();
  float* gs = gx.ptr();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t o = 0; o < g.out_c; ++o) {
    const float* uo = us + o * plane;
    for (std::size_t i = 0; i < g.in_c; ++i) {
      float* gi = gs + i * g.in_h * g.in_w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          const float w = k[((o * g.in_c + i) * g.kh + ky) * g.kw + kx];
          std::size_t lo, hi;
          g.column_range(kx, lo, hi);
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            std::size_t iy;
            if (!g.input_row(oy, ky, iy)) continue;
            const float* urow = uo + oy * g.out_w;
            float* grow = gi + iy * g.in_w;
            if (g.stride == 1) {
              const float* src = urow + lo;
              float* dst = grow + (lo + kx - g.pad);
              for (std::size_t t = 0, n = hi - lo; t < n; ++t) dst[t] += w * src[t];
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) grow[ox * g.stride + kx - g.pad] += w * urow[ox];
            }
          }
        }
      }
    }
  }
  return gx;
}

void conv_param_grad(const Conv2d& c, const Tensor& x, const Tensor& u, Tensor& dk, Tensor& db) {
  const ConvGeometry g(c, x.shape());
  const float* xs = x.ptr();
  const float* us = u.ptr();
  float* dks = dk.ptr();
  const std::size_t plane = g.out_h * g.out_w;
  for (std::size_t o = 0; o < g.out_c; ++o) {
    const float* uo = us + o * plane;
    float bsum = 0.0f;
    for (std::size_t p = 0; p < plane; ++p) bsum += uo[p];
    db[o] += bsum;
    for (std::size_t i = 0; i < g.in_c; ++i) {
      const float* xi = xs + i * g.in_h * g.in_w;
      for (std::size_t ky = 0; ky < g.kh; ++ky) {
        for (std::size_t kx = 0; kx < g.kw; ++kx) {
          std::size_t lo, hi;
          g.column_range(kx, lo, hi);
          float acc = 0.0f;
          for (std::size_t oy = 0; oy < g.out_h; ++oy) {
            std::size_t iy;
            if (!g.input_row(oy, ky, iy)) continue;
            const float* urow = uo + oy * g.out_w;
            const float* xrow = xi + iy * g.in_w;
            if (g.stride == 1) {
              if (hi > lo) acc += dot_lanes(urow + lo, xrow + (lo + kx - g.pad), hi - lo);
            } else {
              for (std::size_t ox = lo; ox < hi; ++ox) acc += urow[ox] * xrow[ox * g.stride + kx - g.pad];
            }
          }
          dks[((o * g.in_c + i) * g.kh + ky) * g.kw + kx] += acc;
        }
      }
    }
  }
}

// ---- AvgPool --------------------------------------------------------------

Tensor pool_apply(const AvgPool& p, const Tensor& x) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), win = p.window;
  const std::size_t oh = h / win, ow = w / win;
  Tensor y({c, oh, ow});
  const float scale = 1.0f / static_cast<float>(win * win);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        float acc = 0.0f;
        for (std::size_t dy = 0; dy < win; ++dy)
          for (std::size_t dx = 0; dx < win; ++dx) acc += x[(ch * h + oy * win + dy) * w + ox * win + dx];
        y[(ch * oh + oy) * ow + ox] = acc * scale;
      }
  return y;
}

Tensor pool_transpose(const AvgPool& p, const Tensor& u, const Shape& in_shape) {
  const std::size_t c = in_shape[0], h = in_shape[1], w = in_shape[2], win = p.window;
  const std::size_t oh = h / win, ow = w / win;
  Tensor g(in_shape);
  const float scale = 1.0f / static_cast<float>(win * win);
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        const float v = u[(ch * oh + oy) * ow + ox] * scale;
        for (std::size_t dy = 0; dy < win; ++dy)
          for (std::size_t dx = 0; dx < win; ++dx) g[(ch * h + oy * win + dy) * w + ox * win + dx] = v;
      }
  return g;
}

// ---- Standardize ----------------------------------------------------------

Tensor standardize_apply(const Standardize& s, const Tensor& x, bool center) {
  Tensor y = x;
  const std::size_t c = x.dim(0), inner = x.size() / c;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float mu = center ? s.mean[ch] : 0.0f;
    const float inv = 1.0f / s.stddev[ch];
    float* row = y.ptr() + ch * inner;
    for (std::size_t k = 0; k < inner; ++k) row[k] = (row[k] - mu) * inv;
  }
  return y;
}

// ---- EmbeddingLookup ------------------------------------------------------

std::size_t lookup_index(const EmbeddingLookup& e, const Tensor& x) {
  const float raw = x[e.field];
  const float rounded = std::nearbyint(raw);
  if (!std::isfinite(raw) || rounded != raw || raw < 0.0f ||
      static_cast<std::size_t>(rounded) >= e.table.dim(0)) {
    throw std::out_of_range("EmbeddingLookup: index " + std::to_string(raw) + " not an integer in [0, " +
                            std::to_string(e.table.dim(0)) + ")");
  }
  return static_cast<std::size_t>(rounded);
}

Tensor lookup_row(const EmbeddingLookup& e, std::size_t row) {
  const std::size_t dim = e.table.dim(1);
  const float* src = e.table.ptr() + row * dim;
  return Tensor({dim}, std::vector<float>(src, src + dim));
}

// ---- Concat ---------------------------------------------------------------

struct AxisSplit {
  std::size_t outer, inner;
};

AxisSplit axis_split(const Shape& s, std::size_t axis) {
  AxisSplit r{1, 1};
  for (std::size_t a = 0; a < axis; ++a) r.outer *= s[a];
  for (std::size_t a = axis + 1; a < s.size(); ++a) r.inner *= s[a];
  return r;
}

Tensor concat_parts(const std::vector<Tensor>& parts, std::size_t axis) {
  Shape out_shape = parts.front().shape();
  out_shape[axis] = 0;
  for (const Tensor& p : parts) out_shape[axis] += p.dim(axis);
  Tensor out(out_shape);
  const AxisSplit sp = axis_split(out_shape, axis);
  const std::size_t out_block = out_shape[axis] * sp.inner;
  std::size_t offset = 0;
  for (const Tensor& p : parts) {
    const std::size_t block = p.dim(axis) * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o) {
      const float* src = p.ptr() + o * block;
      std::copy(src, src + block, out.ptr() + o * out_block + offset);
    }
    offset += block;
  }
  return out;
}

Tensor concat_slice(const Tensor& whole, const Shape& part_shape, std::size_t axis, std::size_t axis_offset) {
  Tensor part(part_shape);
  const AxisSplit sp = axis_split(whole.shape(), axis);
  const std::size_t whole_block = whole.dim(axis) * sp.inner;
  const std::size_t block = part_shape[axis] * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o) {
    const float* src = whole.ptr() + o * whole_block + axis_offset * sp.inner;
    std::copy(src, src + block, part.ptr() + o * block);
  }
  return part;
}

// ---- Layer dispatch -------------------------------------------------------

Tensor forward_layer(const Layer& layer, const Tensor& x, std::vector<Tape>* inner) {
  return std::visit(
      [&](const auto& op) -> Tensor {
        using T = std::remove_cvref_t<decltype(op)>;
        if constexpr (std::is_same_v<T, Dense>) {
          return dense_apply(op, x, true);
        } else if constexpr (std::is_same_v<T, Conv2d>) {
          return conv_apply(op, x, true);
        } else if constexpr (std::is_same_v<T, Relu>) {
          Tensor y = x;
          for (float& v : y.data()) v = v > 0.0f ? v : 0.0f;
          return y;
        } else if constexpr (std::is_same_v<T, AvgPool>) {
          return pool_apply(op, x);
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return x.reshaped({x.size()});
        } else if constexpr (std::is_same_v<T, EmbeddingLookup>) {
          return lookup_row(op, lookup_index(op, x));
        } else if constexpr (std::is_same_v<T, Concat>) {
          std::vector<Tensor> parts;
          parts.reserve(op.branches.size());
          for (const LayerList& branch : op.branches) {
            if (inner) {
              inner->push_back(record_layers(branch, x));
              parts.push_back(inner->back().output());
            } else {
              parts.push_back(forward_layers(branch, x));
            }
          }
          return concat_parts(parts, op.axis);
        } else if constexpr (std::is_same_v<T, Standardize>) {
          return standardize_apply(op, x, true);
        } else if constexpr (std::is_same_v<T, Residual>) {
          if (inner) {
            inner->push_back(record_layers(op.body, x));
            return x + inner->back().output();
          }
          return x + forward_layers(op.body, x);
        }
      },
      layer.op);
}

Tensor tangent_layer(const Layer& layer, const Tensor& x, const std::vector<Tape>& inner, const Tensor& v) {
  return std::visit(
      [&](const auto& op) -> Tensor {
        using T = std::remove_cvref_t<decltype(op)>;
        if constexpr (std::is_same_v<T, Dense>) {
          return dense_apply(op, v, false);
        } else if constexpr (std::is_same_v<T, Conv2d>) {
          return conv_apply(op, v, false);
        } else if constexpr (std::is_same_v<T, Relu>) {
          Tensor t = v;
          for (std::size_t i = 0; i < t.size(); ++i)
            if (!(x[i] > 0.0f)) t[i] = 0.0f;
          return t;
        } else if constexpr (std::is_same_v<T, AvgPool>) {
          return pool_apply(op, v);
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return v.reshaped({v.size()});
        } else if constexpr (std::is_same_v<T, EmbeddingLookup>) {
          return Tensor({op.table.dim(1)});
        } else if constexpr (std::is_same_v<T, Concat>) {
          std::vector<Tensor> parts;
          parts.reserve(op.branches.size());
          for (std::size_t b = 0; b < op.branches.size(); ++b) {
            parts.push_back(tangent_layers(op.branches[b], inner[b], v));
          }
          return concat_parts(parts, op.axis);
        } else if constexpr (std::is_same_v<T, Standardize>) {
          return standardize_apply(op, v, false);
        } else if constexpr (std::is_same_v<T, Residual>) {
          return v + tangent_layers(op.body, inner.front(), v);
        }
      },
      layer.op);
}

Tensor cotangent_layer(const Layer& layer, const Tensor& x, const std::vector<Tape>& inner, const Tensor& u,
                       std::span<Tensor> grads) {
  return std::visit(
      [&](const auto& op) -> Tensor {
        using T = std::remove_cvref_t<decltype(op)>;
        if constexpr (std::is_same_v<T, Dense>) {
          if (!grads.empty()) dense_param_grad(op, x, u, grads[0], grads[1]);
          return dense_transpose(op, u, x.shape());
        } else if constexpr (std::is_same_v<T, Conv2d>) {
          if (!grads.empty()) conv_param_grad(op, x, u, grads[0], grads[1]);
          return conv_transpose(op, u, x.shape());
        } else if constexpr (std::is_same_v<T, Relu>) {
          Tensor g = u;
          for (std::size_t i = 0; i < g.size(); ++i)
            if (!(x[i] > 0.0f)) g[i] = 0.0f;
          return g;
        } else if constexpr (std::is_same_v<T, AvgPool>) {
          return pool_transpose(op, u, x.shape());
        } else if constexpr (std::is_same_v<T, Flatten>) {
          return u.reshaped(x.shape());
        } else if constexpr (std::is_same_v<T, EmbeddingLookup>) {
          if (!grads.empty()) {
            const std::size_t row = lookup_index(op, x), dim = op.table.dim(1);
            float* dst = grads[0].ptr() + row * dim;
            for (std::size_t k = 0; k < dim; ++k) dst[k] += u[k];
          }
          return Tensor(x.shape());
        } else if constexpr (std::is_same_v<T, Concat>) {
          Tensor g(x.shape());
          std::size_t axis_offset = 0, param_offset = 0;
          for (std::size_t b = 0; b < op.branches.size(); ++b) {
            const Shape& part_shape = inner[b].output().shape();
            Tensor ub = concat_slice(u, part_shape, op.axis, axis_offset);
            axis_offset += part_shape[op.axis];
            std::size_t count = 0;
            for (const Layer& l : op.branches[b]) count += layer_param_count(l);
            std::span<Tensor> sub = grads.empty() ? grads : grads.subspan(param_offset, count);
            param_offset += count;
            g += cotangent_layers(op.branches[b], inner[b], ub, sub);
          }
          return g;
        } else if constexpr (std::is_same_v<T, Standardize>) {
          return standardize_apply(op, u, false);
        } else if constexpr (std::is_same_v<T, Residual>) {
          return u + cotangent_layers(op.body, inner.front(), u, grads);
        }
      },
      layer.op);
}

void require_shape(const Tensor& t, const Shape& expected, const char* what) {
  if (t.shape() != expected) {
    throw ShapeError(std::string(what) + ": expected shape " + shape_to_string(expected) + ", got " +
                     shape_to_string(t.shape()));
  }
}

}  // namespace

Tensor forward_layers(std::span<const Layer> layers, const Tensor& x) {
  Tensor cur = x;
  for (const Layer& layer : layers) cur = forward_layer(layer, cur, nullptr);
  return cur;
}

Tape record_layers(std::span<const Layer> layers, const Tensor& x) {
  Tape tape;
  tape.values.reserve(layers.size() + 1);
  tape.inner.resize(layers.size());
  tape.values.push_back(x);
  for (std::size_t i = 0; i < layers.size(); ++i) {
    tape.values.push_back(forward_layer(layers[i], tape.values[i], &tape.inner[i]));
  }
  return tape;
}

Tensor tangent_layers(std::span<const Layer> layers, const Tape& tape, const Tensor& v) {
  Tensor cur = v;
  for (std::size_t i = 0; i < layers.size(); ++i) cur = tangent_layer(layers[i], tape.values[i], tape.inner[i], cur);
  return cur;
}

Tensor cotangent_layers(std::span<const Layer> layers, const Tape& tape, const Tensor& u, std::span<Tensor> param_grads) {
  std::vector<std::size_t> offsets(layers.size() + 1, 0);
  for (std::size_t i = 0; i < layers.size(); ++i) offsets[i + 1] = offsets[i] + layer_param_count(layers[i]);
  Tensor cur = u;
  for (std::size_t i = layers.size(); i-- > 0;) {
    std::span<Tensor> sub =
        param_grads.empty() ? param_grads : param_grads.subspan(offsets[i], offsets[i + 1] - offsets[i]);
    cur = cotangent_layer(layers[i], tape.values[i], tape.inner[i], cur, sub);
  }
  return cur;
}

Tensor forward(const Model& model, const Tensor& x) {
  require_shape(x, model.input_shape(), "forward");
  return forward_layers(model.layers(), x);
}

Tensor vjp(const Model& model, const Tensor& x, const Tensor& u) { return Linearization(model, x).vjp(u); }

Tensor jvp(const Model& model, const Tensor& x, const Tensor& v) { return Linearization(model, x).jvp(v); }

std::vector<Tensor> zero_param_grads(const Model& model) {
  std::vector<Tensor> grads;
  for (const Tensor* p : model.parameters()) grads.emplace_back(p->shape());
  return grads;
}

Linearization::Linearization(const Model& model, const Tensor& x) : model_(model) {
  require_shape(x, model.input_shape(), "linearize");
  tape_ = record_layers(model.layers(), x);
}

Tensor Linearization::jvp(const Tensor& v) const {
  require_shape(v, model_.input_shape(), "jvp");
  return tangent_layers(model_.layers(), tape_, v);
}

Tensor Linearization::vjp(const Tensor& u) const { return vjp(u, {}); }

Tensor Linearization::vjp(const Tensor& u, std::span<Tensor> param_grads) const {
  require_shape(u, model_.output_shape(), "vjp");
  if (!param_grads.empty() && param_grads.size() != model_.parameters().size()) {
    throw std::invalid_argument("vjp: parameter gradient buffer count mismatch");
  }
  return cotangent_layers(model_.layers(), tape_, u, param_grads);
}

Tensor full_jacobian(const Model& model, const Tensor& x, std::size_t cap) {
  const std::size_t m = model.output_size(), d = model.input_size();
  if (m * d > cap) {
    throw std::length_error("full_jacobian: " + std::to_string(m) + "x" + std::to_string(d) +
                            " exceeds the entry cap " + std::to_string(cap) + "; use a trace estimator");
  }
  const Linearization lin(model, x);
  Tensor jac({m, d});
  for (std::size_t i = 0; i < m; ++i) {
    const Tensor row = lin.vjp(basis(model.output_shape(), i));
    std::copy(row.ptr(), row.ptr() + d, jac.ptr() + i * d);
  }
  return jac;
}

double trace_jtj_exact(const Model& model, const Tensor& x) {
  const std::size_t m = model.output_size(), d = model.input_size();
  const Linearization lin(model, x);
  double total = 0.0;
  if (d <= m) {
    for (std::size_t j = 0; j < d; ++j) total += squared_norm(lin.jvp(basis(model.input_shape(), j)));
  } else {
    for (std::size_t i = 0; i < m; ++i) total += squared_norm(lin.vjp(basis(model.output_shape(), i)));
  }
  return total;
}

double trace_jtj_hutchinson(const Model& model, const Tensor& x, std::size_t probes, Rng& rng) {
  if (probes == 0) throw std::invalid_argument("trace_jtj_hutchinson: probes must be >= 1");
  const Linearization lin(model, x);
  double total = 0.0;
  for (std::size_t j = 0; j < probes; ++j) total += squared_norm(lin.jvp(rng.rademacher_tensor(model.input_shape())));
  return total / static_cast<double>(probes);
}

}  // namespace refil
