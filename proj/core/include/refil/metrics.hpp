#pragma once

#include <cstddef>
#include <vector>

#include "refil/tensor.hpp"

namespace refil {

/// Mean over all elements of (a - b)^2.
double mse(const Tensor& a, const Tensor& b);

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;

/// Mean local SSIM over the valid region of an 11x11 Gaussian window
/// (sigma 1.5), C1 = (0.01 L)^2, C2 = (0.03 L)^2, averaged over channels.
/// Accepts [h, w] or [c, h, w] images with h, w >= 11.
double ssim(const Tensor& a, const Tensor& b, double dynamic_range = 1.0);

/// 1 iff true_id is among the first k entries of the ranking.
int topk_success(const std::vector<std::size_t>& ranked_ids, std::size_t true_id, std::size_t k);

}  // namespace refil
