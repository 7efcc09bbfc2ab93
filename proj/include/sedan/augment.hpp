#pragma once

// Periodicity-preserving (rolling, flipping, scaling) and trend-preserving
// (jittering, window cropping, window warping) augmentations of feature
// sequences h[m x d]. Every augmentation is an affine map along time,
// h' = s * (A h) + c, so the same plan can be applied to plain matrices and
// to autograd tensors.

#include "sedan/tensor.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace sedan {

struct AugmentParams {
  std::optional<std::size_t> roll_max;  // defaults to m / 2
  bool allow_flip = true;
  double scale_low = 0.8;
  double scale_high = 1.2;
  double jitter_sigma = 0.03;
  double crop_ratio_min = 0.8;
  double warp_factor_low = 0.5;
  double warp_factor_high = 2.0;
  double warp_range_fraction = 0.2;
  std::uint64_t seed = 17;

  void validate() const {
    if (!(crop_ratio_min > 0.0 && crop_ratio_min <= 1.0)) throw std::invalid_argument("crop_ratio_min must be in (0, 1]");
    if (!(scale_low > 0.0) || scale_high < scale_low) throw std::invalid_argument("scale range must be positive and ordered");
    if (jitter_sigma < 0.0) throw std::invalid_argument("jitter_sigma must be >= 0");
    if (!(warp_factor_low > 0.0 && warp_factor_high > 0.0)) throw std::invalid_argument("warp factors must be > 0");
    if (!(warp_range_fraction > 0.0 && warp_range_fraction <= 1.0)) {
      throw std::invalid_argument("warp_range_fraction must be in (0, 1]");
    }
  }
};

/// h' = scale * (time_map * h) + offset
struct AugmentPlan {
  Eigen::MatrixXd time_map;  // [m x m]
  double scale = 1.0;
  Eigen::MatrixXd offset;  // [m x d]

  static AugmentPlan identity(std::size_t m, std::size_t d) {
    const auto mi = static_cast<Eigen::Index>(m);
    return {Eigen::MatrixXd::Identity(mi, mi), 1.0, Eigen::MatrixXd::Zero(mi, static_cast<Eigen::Index>(d))};
  }

  /// Appends a linear time map applied after the current plan.
  void then_map(const Eigen::MatrixXd& map) {
    time_map = map * time_map;
    offset = map * offset;
  }
  void then_scale(double s) {
    scale *= s;
    offset *= s;
  }
  void then_add(const Eigen::MatrixXd& noise) { offset += noise; }

  Eigen::MatrixXd apply(const Eigen::MatrixXd& h) const { return scale * (time_map * h) + offset; }

  Tensor apply(const Tensor& h) const {
    auto mapped = matmul(Tensor::from_matrix(time_map), h);
    auto scaled = scale == 1.0 ? mapped : sedan::scale(mapped, scale);
    if (offset.isZero(0.0)) return scaled;
    return add(scaled, Tensor::from_matrix(offset));
  }
};

// ---------------------------------------------------------------- time maps

inline Eigen::MatrixXd rolling_map(std::size_t m, std::size_t r) {
  if (r >= m) throw std::invalid_argument("rolling shift must be < sequence length");
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>((i + m - r) % m)) = 1.0;
  return A;
}

inline Eigen::MatrixXd flipping_map(std::size_t m) {
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < m; ++i) A(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(m - i - 1)) = 1.0;
  return A;
}

/// Linear interpolation from `from` samples onto `to` evenly spaced samples
/// spanning the same interval. Rows sum to one.
inline Eigen::MatrixXd resample_map(std::size_t from, std::size_t to) {
  if (from == 0 || to == 0) throw std::invalid_argument("resample lengths must be >= 1");
  Eigen::MatrixXd A = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(to), static_cast<Eigen::Index>(from));
  for (std::size_t j = 0; j < to; ++j) {
    const double pos = (to == 1 || from == 1) ? 0.0
                                              : static_cast<double>(j) * static_cast<double>(from - 1) /
                                                    static_cast<double>(to - 1);
    const auto i0 = std::min(static_cast<std::size_t>(std::floor(pos)), from - 1);
    const double frac = pos - static_cast<double>(i0);
    A(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i0)) += 1.0 - frac;
    if (frac > 0.0) A(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i0 + 1)) += frac;
  }
  return A;
}

inline Eigen::MatrixXd crop_map(std::size_t m, std::size_t keep_len, std::size_t start) {
  if (keep_len == 0 || keep_len > m) throw std::invalid_argument("crop keep_len must be in [1, m]");
  if (start + keep_len > m) throw std::invalid_argument("crop window exceeds the sequence");
  Eigen::MatrixXd select = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(keep_len), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < keep_len; ++i) select(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(start + i)) = 1.0;
  return resample_map(keep_len, m) * select;
}

inline Eigen::MatrixXd warp_map(std::size_t m, std::size_t range_start, std::size_t range_len, double factor) {
  if (range_len == 0) throw std::invalid_argument("warp range must be non-empty");
  if (range_start + range_len > m) throw std::invalid_argument("warp range exceeds the sequence");
  if (!(factor > 0.0)) throw std::invalid_argument("warp factor must be > 0");
  const auto warped_len =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(static_cast<double>(range_len) * factor)));
  const std::size_t total = m - range_len + warped_len;
  Eigen::MatrixXd stitched = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(total), static_cast<Eigen::Index>(m));
  for (std::size_t i = 0; i < range_start; ++i) stitched(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(i)) = 1.0;
  stitched.block(static_cast<Eigen::Index>(range_start), static_cast<Eigen::Index>(range_start),
                 static_cast<Eigen::Index>(warped_len), static_cast<Eigen::Index>(range_len)) =
      resample_map(range_len, warped_len);
  for (std::size_t i = range_start + range_len; i < m; ++i) {
    stitched(static_cast<Eigen::Index>(i - range_len + warped_len), static_cast<Eigen::Index>(i)) = 1.0;
  }
  return resample_map(total, m) * stitched;
}

// ---------------------------------------------------------------- single augmentations

inline Eigen::MatrixXd rolling(const Eigen::MatrixXd& h, std::size_t r) {
  return rolling_map(static_cast<std::size_t>(h.rows()), r) * h;
}

inline Eigen::MatrixXd flipping(const Eigen::MatrixXd& h) { return h.colwise().reverse(); }

inline Eigen::MatrixXd scaling(const Eigen::MatrixXd& h, double factor) {
  if (!(factor > 0.0)) throw std::invalid_argument("scaling factor must be > 0");
  return factor * h;
}

inline Eigen::MatrixXd jitter_noise(Eigen::Index rows, Eigen::Index cols, double sigma, std::mt19937_64& rng) {
  if (sigma < 0.0) throw std::invalid_argument("jitter sigma must be >= 0");
  Eigen::MatrixXd noise = Eigen::MatrixXd::Zero(rows, cols);
  if (sigma == 0.0) return noise;
  std::normal_distribution<double> dist(0.0, sigma);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) noise(i, j) = dist(rng);
  return noise;
}

inline Eigen::MatrixXd jittering(const Eigen::MatrixXd& h, double sigma, std::mt19937_64& rng) {
  return h + jitter_noise(h.rows(), h.cols(), sigma, rng);
}

inline Eigen::MatrixXd window_crop(const Eigen::MatrixXd& h, std::size_t keep_len, std::size_t start) {
  return crop_map(static_cast<std::size_t>(h.rows()), keep_len, start) * h;
}

inline Eigen::MatrixXd window_warp(const Eigen::MatrixXd& h, std::size_t range_start, std::size_t range_len,
                                   double factor) {
  return warp_map(static_cast<std::size_t>(h.rows()), range_start, range_len, factor) * h;
}

// ---------------------------------------------------------------- composers

/// Bit 0/1/2 of a subset mask select the first/second/third augmentation of
/// a composer, applied in that order.
inline unsigned draw_subset(std::mt19937_64& rng) {
  std::uniform_int_distribution<unsigned> dist(1, 7);
  return dist(rng);
}

/// rolling -> flipping -> scaling over a random nonempty subset.
inline AugmentPlan seasonal_plan(std::size_t m, std::size_t d, const AugmentParams& p, std::mt19937_64& rng,
                                 std::optional<unsigned> subset = std::nullopt) {
  p.validate();
  const unsigned mask = subset ? *subset : draw_subset(rng);
  auto plan = AugmentPlan::identity(m, d);
  if (mask & 1u) {
    const std::size_t limit = std::min(p.roll_max.value_or(m / 2), m - 1);
    std::uniform_int_distribution<std::size_t> shift(0, limit);
    plan.then_map(rolling_map(m, shift(rng)));
  }
  if ((mask & 2u) && p.allow_flip) plan.then_map(flipping_map(m));
  if (mask & 4u) {
    std::uniform_real_distribution<double> factor(p.scale_low, p.scale_high);
    plan.then_scale(p.scale_low == p.scale_high ? p.scale_low : factor(rng));
  }
  return plan;
}

/// jittering -> window cropping -> window warping over a random nonempty subset.
inline AugmentPlan trend_plan(std::size_t m, std::size_t d, const AugmentParams& p, std::mt19937_64& rng,
                              std::optional<unsigned> subset = std::nullopt) {
  p.validate();
  const unsigned mask = subset ? *subset : draw_subset(rng);
  auto plan = AugmentPlan::identity(m, d);
  if (mask & 1u) {
    plan.then_add(jitter_noise(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(d), p.jitter_sigma, rng));
  }
  if (mask & 2u) {
    const auto min_keep = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::ceil(p.crop_ratio_min * static_cast<double>(m) - 1e-9)), 1, m);
    std::uniform_int_distribution<std::size_t> keep_dist(min_keep, m);
    const std::size_t keep = keep_dist(rng);
    std::uniform_int_distribution<std::size_t> start_dist(0, m - keep);
    plan.then_map(crop_map(m, keep, start_dist(rng)));
  }
  if (mask & 4u) {
    const auto len = std::clamp<std::size_t>(
        static_cast<std::size_t>(std::lround(p.warp_range_fraction * static_cast<double>(m))), 1, m);
    std::uniform_int_distribution<std::size_t> start_dist(0, m - len);
    const std::size_t start = start_dist(rng);
    std::bernoulli_distribution pick_low(0.5);
    const double factor = pick_low(rng) ? p.warp_factor_low : p.warp_factor_high;
    plan.then_map(warp_map(m, start, len, factor));
  }
  return plan;
}

inline Eigen::MatrixXd compose_seasonal(const Eigen::MatrixXd& h, const AugmentParams& p, std::mt19937_64& rng) {
  return seasonal_plan(static_cast<std::size_t>(h.rows()), static_cast<std::size_t>(h.cols()), p, rng).apply(h);
}

inline Eigen::MatrixXd compose_trend(const Eigen::MatrixXd& h, const AugmentParams& p, std::mt19937_64& rng) {
  return trend_plan(static_cast<std::size_t>(h.rows()), static_cast<std::size_t>(h.cols()), p, rng).apply(h);
}

}  // namespace sedan
