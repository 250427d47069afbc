#include "refil/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace refil {

double mse(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mse");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - b[i];
    s += d * d;
  }
  return s / static_cast<double>(a.size());
}

namespace {

std::array<double, kSsimWindow> gaussian_window() {
  std::array<double, kSsimWindow> w{};
  const double c = (kSsimWindow - 1) / 2.0;
  double total = 0.0;
  for (std::size_t i = 0; i < kSsimWindow; ++i) {
    const double t = static_cast<double>(i) - c;
    w[i] = std::exp(-t * t / (2.0 * kSsimSigma * kSsimSigma));
    total += w[i];
  }
  for (double& v : w) v /= total;
  return w;
}

}  // namespace

double ssim(const Tensor& a, const Tensor& b, double dynamic_range) {
  require_same_shape(a, b, "ssim");
  if (a.rank() != 2 && a.rank() != 3) throw ShapeError("ssim: expected [h, w] or [c, h, w], got " +
                                                       shape_to_string(a.shape()));
  const std::size_t c = a.rank() == 3 ? a.dim(0) : 1;
  const std::size_t h = a.dim(a.rank() - 2), w = a.dim(a.rank() - 1);
  if (h < kSsimWindow || w < kSsimWindow) {
    throw ShapeError("ssim: image " + shape_to_string(a.shape()) + " is smaller than the 11x11 window");
  }
  const auto g = gaussian_window();
  const double c1 = std::pow(0.01 * dynamic_range, 2), c2 = std::pow(0.03 * dynamic_range, 2);
  const std::size_t oh = h - kSsimWindow + 1, ow = w - kSsimWindow + 1;
  double total = 0.0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const float* pa = a.ptr() + ch * h * w;
    const float* pb = b.ptr() + ch * h * w;
    double channel_sum = 0.0;
    for (std::size_t i = 0; i < oh; ++i) {
      for (std::size_t j = 0; j < ow; ++j) {
        double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
        for (std::size_t u = 0; u < kSsimWindow; ++u) {
          for (std::size_t v = 0; v < kSsimWindow; ++v) {
            const double wt = g[u] * g[v];
            const double x = pa[(i + u) * w + j + v], y = pb[(i + u) * w + j + v];
            ma += wt * x;
            mb += wt * y;
            saa += wt * x * x;
            sbb += wt * y * y;
            sab += wt * x * y;
          }
        }
        const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
        channel_sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
      }
    }
    total += channel_sum / static_cast<double>(oh * ow);
  }
  return total / static_cast<double>(c);
}

int topk_success(const std::vector<std::size_t>& ranked_ids, std::size_t true_id, std::size_t k) {
  if (k == 0) throw std::invalid_argument("topk_success: k must be >= 1");
  const auto end = ranked_ids.begin() + static_cast<std::ptrdiff_t>(std::min(k, ranked_ids.size()));
  return std::find(ranked_ids.begin(), end, true_id) != end ? 1 : 0;
}

}  // namespace refil
