#include "refil/reference_models.hpp"

#include <stdexcept>

namespace refil {

SplitModel mnist_mlp(std::size_t width, Rng& rng, std::size_t classes) {
  LayerList layers;
  layers.push_back(make_dense(28 * 28, width, rng));
  layers.push_back(Relu{});
  layers.push_back(make_dense(width, 64, rng));
  layers.push_back(Relu{});
  layers.push_back(make_dense(64, classes, rng));
  return SplitModel(Model({1, 28, 28}, std::move(layers)), 1);
}

CnnSplit parse_cnn_split(std::string_view name) {
  if (name == "early") return CnnSplit::Early;
  if (name == "middle") return CnnSplit::Middle;
  if (name == "late") return CnnSplit::Late;
  throw std::invalid_argument("unknown CNN split '" + std::string(name) + "' (expected early, middle or late)");
}

std::string_view to_string(CnnSplit split) {
  switch (split) {
    case CnnSplit::Early: return "early";
    case CnnSplit::Middle: return "middle";
    case CnnSplit::Late: return "late";
  }
  return "?";
}

namespace {

Layer residual_block(std::size_t channels, Rng& rng) {
  Residual r;
  r.body.push_back(make_conv2d(channels, channels, 3, 1, 1, rng));
  r.body.push_back(Relu{});
  r.body.push_back(make_conv2d(channels, channels, 3, 1, 1, rng));
  return r;
}

}  // namespace

SplitModel residual_cnn(CnnSplit split, const CnnOptions& o, Rng& rng) {
  if (o.height % 2 != 0 || o.width % 2 != 0 || o.height != o.width) {
    throw std::invalid_argument("residual_cnn: input must be square with even side");
  }
  const std::size_t c = o.base_width;
  Standardize st{Tensor({o.channels}, 0.5f), Tensor({o.channels}, 0.25f)};
  if (!o.mean.empty() || !o.stddev.empty()) {
    if (o.mean.size() != o.channels || o.stddev.size() != o.channels) {
      throw std::invalid_argument("residual_cnn: mean/stddev must have one entry per channel");
    }
    st.mean = Tensor({o.channels}, o.mean);
    st.stddev = Tensor({o.channels}, o.stddev);
  }

  LayerList layers;
  layers.push_back(std::move(st));
  layers.push_back(make_conv2d(o.channels, c, 3, 1, 1, rng));
  const std::size_t early = layers.size();
  layers.push_back(Relu{});
  std::size_t middle = 0, late = 0;
  for (std::size_t block = 1; block <= 8; ++block) {
    if (block == 5) layers.push_back(AvgPool{2});
    layers.push_back(residual_block(c, rng));
    layers.push_back(Relu{});
    if (block == 4) middle = layers.size();
    if (block == 6) late = layers.size();
  }
  layers.push_back(AvgPool{o.height / 2});
  layers.push_back(Flatten{});
  layers.push_back(make_dense(c, o.classes, rng));

  const std::size_t index = split == CnnSplit::Early ? early : split == CnnSplit::Middle ? middle : late;
  return SplitModel(Model({o.channels, o.height, o.width}, std::move(layers)), index);
}

SplitModel ncf_mlp(std::size_t users, std::size_t movies, Rng& rng, std::size_t embedding_dim) {
  Concat towers;
  towers.axis = 0;
  towers.branches.push_back({make_embedding(users, embedding_dim, 0, rng)});
  towers.branches.push_back({make_embedding(movies, embedding_dim, 1, rng)});
  LayerList layers;
  layers.push_back(std::move(towers));
  layers.push_back(make_dense(2 * embedding_dim, 64, rng));
  layers.push_back(Relu{});
  layers.push_back(make_dense(64, 32, rng));
  layers.push_back(Relu{});
  layers.push_back(make_dense(32, 16, rng));
  layers.push_back(Relu{});
  layers.push_back(make_dense(16, 1, rng));
  return SplitModel(Model({2}, std::move(layers)), 2);
}

std::vector<CatalogEntry> build_reference_models(std::uint64_t seed) {
  std::vector<CatalogEntry> out;
  Rng rng(seed);
  out.push_back({"mlp-1000", mnist_mlp(1000, rng)});
  out.push_back({"mlp-10000", mnist_mlp(10000, rng)});
  for (CnnSplit s : {CnnSplit::Early, CnnSplit::Middle, CnnSplit::Late}) {
    Rng cnn_rng(Rng::derive(seed, 1));  // the three splits share weights
    out.push_back({"cnn-" + std::string(to_string(s)), residual_cnn(s, CnnOptions{}, cnn_rng)});
  }
  out.push_back({"ncf", ncf_mlp(1000, 1000, rng)});
  return out;
}

}  // namespace refil
