#include "refil/datasets.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>
#include <unordered_map>

#include "refil/rng.hpp"

namespace refil {

namespace {

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  return std::vector<std::uint8_t>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
}

std::uint32_t be32(const std::vector<std::uint8_t>& b, std::size_t off, const std::filesystem::path& p) {
  if (off + 4 > b.size()) throw DataError(p.string() + ": truncated header at byte " + std::to_string(off));
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

void put_be32(std::ofstream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v >> 24), static_cast<char>(v >> 16), static_cast<char>(v >> 8),
                     static_cast<char>(v)};
  out.write(b, 4);
}

float pixel(std::uint8_t v) { return static_cast<float>(v) / 255.0f; }

void standardize_in_place(Dataset& data, const std::vector<float>& mean, const std::vector<float>& stddev) {
  for (Example& e : data) {
    const std::size_t c = e.x.dim(0), inner = e.x.size() / c;
    for (std::size_t ch = 0; ch < c; ++ch) {
      float* row = e.x.ptr() + ch * inner;
      for (std::size_t k = 0; k < inner; ++k) row[k] = (row[k] - mean[ch]) / stddev[ch];
    }
  }
}

}  // namespace

std::filesystem::path resolve_data_path(const std::filesystem::path& p) {
  if (p.is_absolute()) return p;
  if (const char* dir = std::getenv("REFIL_DATA_DIR"); dir && *dir) return std::filesystem::path(dir) / p;
  return p;
}

Dataset load_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels, std::size_t limit) {
  const auto img = read_file(images);
  const auto lbl = read_file(labels);
  if (be32(img, 0, images) != 2051) throw DataError(images.string() + ": bad IDX3 magic at byte 0");
  if (be32(lbl, 0, labels) != 2049) throw DataError(labels.string() + ": bad IDX1 magic at byte 0");
  const std::size_t n = be32(img, 4, images), rows = be32(img, 8, images), cols = be32(img, 12, images);
  const std::size_t nl = be32(lbl, 4, labels);
  if (n != nl) throw DataError(images.string() + ": image count " + std::to_string(n) + " != label count " +
                               std::to_string(nl));
  if (rows == 0 || cols == 0) throw DataError(images.string() + ": zero image dimension at byte 8");
  const std::size_t plane = rows * cols;
  if (img.size() < 16 + n * plane) {
    throw DataError(images.string() + ": truncated pixel data at byte " + std::to_string(img.size()));
  }
  if (lbl.size() < 8 + n) throw DataError(labels.string() + ": truncated label data at byte " +
                                          std::to_string(lbl.size()));
  const std::size_t count = limit ? std::min(limit, n) : n;
  Dataset out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    Tensor x({1, rows, cols});
    const std::uint8_t* src = img.data() + 16 + i * plane;
    for (std::size_t k = 0; k < plane; ++k) x[k] = pixel(src[k]);
    const int label = lbl[8 + i];
    if (label > 9) throw DataError(labels.string() + ": label out of range at byte " + std::to_string(8 + i));
    out.push_back({std::move(x), label});
  }
  return out;
}

void write_mnist_idx(const std::filesystem::path& images, const std::filesystem::path& labels, const Dataset& data) {
  if (data.empty()) throw DataError("write_mnist_idx: empty dataset");
  const Shape& s = data.front().x.shape();
  const std::size_t rows = s[s.size() - 2], cols = s[s.size() - 1];
  std::ofstream img(images, std::ios::binary | std::ios::trunc);
  std::ofstream lbl(labels, std::ios::binary | std::ios::trunc);
  if (!img || !lbl) throw DataError("write_mnist_idx: cannot open output files");
  put_be32(img, 2051);
  put_be32(img, static_cast<std::uint32_t>(data.size()));
  put_be32(img, static_cast<std::uint32_t>(rows));
  put_be32(img, static_cast<std::uint32_t>(cols));
  put_be32(lbl, 2049);
  put_be32(lbl, static_cast<std::uint32_t>(data.size()));
  for (const Example& e : data) {
    if (e.x.size() != rows * cols) throw DataError("write_mnist_idx: inconsistent example shapes");
    for (float v : e.x.data()) {
      const float clamped = std::clamp(v, 0.0f, 1.0f);
      img.put(static_cast<char>(static_cast<std::uint8_t>(std::lround(clamped * 255.0f))));
    }
    lbl.put(static_cast<char>(static_cast<std::uint8_t>(e.label)));
  }
}

void channel_statistics(const Dataset& data, std::vector<float>& mean, std::vector<float>& stddev) {
  if (data.empty()) throw DataError("channel_statistics: empty dataset");
  const std::size_t c = data.front().x.dim(0), inner = data.front().x.size() / c;
  std::vector<double> s(c, 0.0), s2(c, 0.0);
  for (const Example& e : data) {
    for (std::size_t ch = 0; ch < c; ++ch) {
      const float* row = e.x.ptr() + ch * inner;
      for (std::size_t k = 0; k < inner; ++k) {
        s[ch] += row[k];
        s2[ch] += static_cast<double>(row[k]) * row[k];
      }
    }
  }
  const double n = static_cast<double>(data.size() * inner);
  mean.assign(c, 0.0f);
  stddev.assign(c, 1.0f);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const double mu = s[ch] / n;
    const double var = std::max(s2[ch] / n - mu * mu, 0.0);
    mean[ch] = static_cast<float>(mu);
    stddev[ch] = var > 0.0 ? static_cast<float>(std::sqrt(var)) : 1.0f;
  }
}

LoadedDataset load_cifar10_binary(const Cifar10Binary& source) {
  constexpr std::size_t kRecord = 1 + 3 * 32 * 32;
  LoadedDataset out;
  out.input_shape = {3, 32, 32};
  out.num_classes = 10;
  for (const auto& file : source.files) {
    const auto path = resolve_data_path(file);
    const auto bytes = read_file(path);
    if (bytes.size() % kRecord != 0) {
      throw DataError(path.string() + ": size " + std::to_string(bytes.size()) +
                      " is not a multiple of the 3073-byte record; partial record at byte " +
                      std::to_string(bytes.size() - bytes.size() % kRecord));
    }
    for (std::size_t off = 0; off < bytes.size(); off += kRecord) {
      if (source.limit && out.examples.size() >= source.limit) break;
      const int label = bytes[off];
      if (label > 9) throw DataError(path.string() + ": label out of range at byte " + std::to_string(off));
      Tensor x({3, 32, 32});
      for (std::size_t k = 0; k < kRecord - 1; ++k) x[k] = pixel(bytes[off + 1 + k]);
      out.examples.push_back({std::move(x), label});
    }
  }
  if (out.examples.empty()) throw DataError("CIFAR-10: no records loaded");
  if (source.standardize) {
    channel_statistics(out.examples, out.channel_mean, out.channel_std);
    standardize_in_place(out.examples, out.channel_mean, out.channel_std);
  }
  return out;
}

LoadedDataset load_movielens_csv(const MovieLensCsv& source) {
  const auto path = resolve_data_path(source.file);
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  LoadedDataset out;
  out.input_shape = {2};
  out.num_classes = 2;
  std::unordered_map<long long, std::size_t> users, movies;
  long long max_user = -1, max_movie = -1;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line_no == 1 && !line.empty() && !std::isdigit(static_cast<unsigned char>(line[0]))) continue;  // header
    std::istringstream row(line);
    std::string uid_s, mid_s, rating_s;
    if (!std::getline(row, uid_s, ',') || !std::getline(row, mid_s, ',') || !std::getline(row, rating_s, ',')) {
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": expected userId,movieId,rating");
    }
    long long uid = 0, mid = 0;
    double rating = 0.0;
    try {
      std::size_t used = 0;
      uid = std::stoll(uid_s, &used);
      if (used != uid_s.size()) throw std::invalid_argument("uid");
      mid = std::stoll(mid_s, &used);
      if (used != mid_s.size()) throw std::invalid_argument("mid");
      rating = std::stod(rating_s, &used);
      if (used != rating_s.size()) throw std::invalid_argument("rating");
    } catch (const std::exception&) {
      throw DataError(path.string() + ": line " + std::to_string(line_no) + ": malformed row '" + line + "'");
    }
    if (uid < 0 || mid < 0) throw DataError(path.string() + ": line " + std::to_string(line_no) + ": negative id");
    std::size_t u = static_cast<std::size_t>(uid), m = static_cast<std::size_t>(mid);
    if (source.remap_ids) {
      u = users.emplace(uid, users.size()).first->second;
      m = movies.emplace(mid, movies.size()).first->second;
    } else {
      max_user = std::max(max_user, uid);
      max_movie = std::max(max_movie, mid);
    }
    Tensor x({2});
    x[0] = static_cast<float>(u);
    x[1] = static_cast<float>(m);
    out.examples.push_back({std::move(x), rating >= source.like_threshold ? 1 : 0});
    if (source.limit && out.examples.size() >= source.limit) break;
  }
  out.num_users = source.remap_ids ? users.size() : static_cast<std::size_t>(max_user + 1);
  out.num_movies = source.remap_ids ? movies.size() : static_cast<std::size_t>(max_movie + 1);
  return out;
}

LoadedDataset make_synthetic_images(const SyntheticImages& spec) {
  if (spec.classes == 0 || spec.count == 0) throw DataError("synthetic images: classes and count must be positive");
  LoadedDataset out;
  out.input_shape = {spec.channels, spec.height, spec.width};
  out.num_classes = spec.classes;

  // Each class template: a few colored Gaussian blobs.
  struct Blob {
    double cy, cx, radius;
    std::vector<double> color;
  };
  Rng trng(spec.template_seed);
  std::vector<std::vector<Blob>> templates(spec.classes);
  for (auto& blobs : templates) {
    const std::size_t n = 2 + trng.below(2);
    for (std::size_t b = 0; b < n; ++b) {
      Blob blob;
      blob.cy = trng.uniform(0.2, 0.8) * static_cast<double>(spec.height);
      blob.cx = trng.uniform(0.2, 0.8) * static_cast<double>(spec.width);
      blob.radius = trng.uniform(0.08, 0.18) * static_cast<double>(std::min(spec.height, spec.width));
      for (std::size_t c = 0; c < spec.channels; ++c) blob.color.push_back(trng.uniform(0.4, 1.0));
      blobs.push_back(std::move(blob));
    }
  }

  Rng rng(spec.seed);
  out.examples.reserve(spec.count);
  const long shift_span = static_cast<long>(2 * spec.max_shift + 1);
  for (std::size_t i = 0; i < spec.count; ++i) {
    const int label = static_cast<int>(rng.below(spec.classes));
    const double dy = static_cast<double>(static_cast<long>(rng.below(shift_span)) - static_cast<long>(spec.max_shift));
    const double dx = static_cast<double>(static_cast<long>(rng.below(shift_span)) - static_cast<long>(spec.max_shift));
    const double gain = rng.uniform(0.7, 1.0);
    Tensor x(out.input_shape);
    for (std::size_t c = 0; c < spec.channels; ++c) {
      for (std::size_t y = 0; y < spec.height; ++y) {
        for (std::size_t xx = 0; xx < spec.width; ++xx) {
          double v = 0.0;
          for (const Blob& b : templates[label]) {
            const double ry = static_cast<double>(y) - (b.cy + dy), rx = static_cast<double>(xx) - (b.cx + dx);
            v += b.color[c] * std::exp(-(ry * ry + rx * rx) / (2.0 * b.radius * b.radius));
          }
          v = gain * v + spec.pixel_noise * rng.normal();
          const double q = std::round(std::clamp(v, 0.0, 1.0) * 255.0);
          x[(c * spec.height + y) * spec.width + xx] = static_cast<float>(q) / 255.0f;
        }
      }
    }
    out.examples.push_back({std::move(x), label});
  }
  return out;
}

LoadedDataset make_synthetic_ratings(const SyntheticRatings& spec) {
  if (spec.users == 0 || spec.movies == 0) throw DataError("synthetic ratings: users and movies must be positive");
  LoadedDataset out;
  out.input_shape = {2};
  out.num_classes = 2;
  out.num_users = spec.users;
  out.num_movies = spec.movies;
  Rng rng(spec.seed);
  std::vector<double> uf(spec.users * spec.rank), mf(spec.movies * spec.rank), mb(spec.movies);
  for (double& v : uf) v = rng.normal();
  for (double& v : mf) v = rng.normal();
  for (double& v : mb) v = rng.normal();
  const double scale = 1.5 / std::sqrt(static_cast<double>(spec.rank));
  for (std::size_t i = 0; i < spec.count; ++i) {
    const std::size_t u = rng.below(spec.users), m = rng.below(spec.movies);
    double score = mb[m] - 0.5;
    for (std::size_t r = 0; r < spec.rank; ++r) score += scale * uf[u * spec.rank + r] * mf[m * spec.rank + r];
    const double p = 1.0 / (1.0 + std::exp(-2.0 * score));
    Tensor x({2});
    x[0] = static_cast<float>(u);
    x[1] = static_cast<float>(m);
    out.examples.push_back({std::move(x), rng.uniform() < p ? 1 : 0});
  }
  return out;
}

LoadedDataset load_dataset(const DatasetSource& source) {
  return std::visit(
      [](const auto& s) -> LoadedDataset {
        using T = std::remove_cvref_t<decltype(s)>;
        if constexpr (std::is_same_v<T, MnistIdx>) {
          LoadedDataset out;
          out.examples = load_mnist_idx(resolve_data_path(s.images), resolve_data_path(s.labels), s.limit);
          out.input_shape = out.examples.empty() ? Shape{1, 28, 28} : out.examples.front().x.shape();
          out.num_classes = 10;
          return out;
        } else if constexpr (std::is_same_v<T, Cifar10Binary>) {
          return load_cifar10_binary(s);
        } else if constexpr (std::is_same_v<T, MovieLensCsv>) {
          return load_movielens_csv(s);
        } else if constexpr (std::is_same_v<T, SyntheticImages>) {
          return make_synthetic_images(s);
        } else {
          return make_synthetic_ratings(s);
        }
      },
      source);
}

std::pair<Dataset, Dataset> split_train_test(Dataset data, std::size_t test_count) {
  if (test_count > data.size()) throw DataError("split_train_test: test count exceeds dataset size");
  Dataset test(std::make_move_iterator(data.end() - static_cast<std::ptrdiff_t>(test_count)),
               std::make_move_iterator(data.end()));
  data.resize(data.size() - test_count);
  return {std::move(data), std::move(test)};
}

}  // namespace refil
