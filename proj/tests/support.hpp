// Shared generators for unit and acceptance tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "mpt/diffeo.hpp"
#include "mpt/metrics.hpp"
#include "mpt/tensor.hpp"

namespace mpt::testing {

inline Tensor normal(Shape s, std::mt19937_64& rng, double stddev = 1.0) {
  std::normal_distribution<double> d(0.0, stddev);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

inline Tensor uniform(Shape s, std::mt19937_64& rng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor t(std::move(s));
  for (auto& v : t.data()) v = d(rng);
  return t;
}

/// Separable Gaussian blur of every channel of [C,H,W] with clamped borders.
inline Tensor gaussian_blur(const Tensor& x, double sigma) {
  const long r = static_cast<long>(std::ceil(3.0 * sigma));
  std::vector<double> k(static_cast<std::size_t>(2 * r + 1));
  double ks = 0.0;
  for (long i = -r; i <= r; ++i) ks += k[static_cast<std::size_t>(i + r)] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (auto& v : k) v /= ks;
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  auto clampi = [](long v, std::size_t n) { return static_cast<std::size_t>(std::clamp(v, 0L, static_cast<long>(n) - 1)); };
  Tensor tmp(x.shape()), out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0.0;
        for (long d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * x(ch, i, clampi(static_cast<long>(j) + d, w));
        tmp(ch, i, j) = s;
      }
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) {
        double s = 0.0;
        for (long d = -r; d <= r; ++d) s += k[static_cast<std::size_t>(d + r)] * tmp(ch, clampi(static_cast<long>(i) + d, h), j);
        out(ch, i, j) = s;
      }
  return out;
}

/// Gaussian-smoothed noise rescaled so the largest per-pixel norm is v_max
/// (less a rounding margin).
inline Tensor smooth_velocity(std::size_t h, std::size_t w, double v_max, std::mt19937_64& rng,
                              double sigma = 4.0) {
  Tensor v = gaussian_blur(normal({2, h, w}, rng), sigma);
  const double m = max_norm(v);
  return m > 0.0 ? scale(v, v_max * (1.0 - 1e-12) / m) : v;
}

/// Largest per-pixel norm of a [2,H,W] field over pixels at least `margin` from the border.
inline double interior_max_norm(const Tensor& f, std::size_t margin) {
  const std::size_t h = f.dim(1), w = f.dim(2);
  double m = 0.0;
  for (std::size_t i = margin; i + margin < h; ++i)
    for (std::size_t j = margin; j + margin < w; ++j) m = std::max(m, std::hypot(f(0, i, j), f(1, i, j)));
  return m;
}

/// Random blob-and-stroke mask: a few filled discs and thick random walks.
inline metrics::BinaryImage random_mask(std::size_t h, std::size_t w, std::mt19937_64& rng) {
  metrics::BinaryImage img(h, w);
  std::uniform_int_distribution<int> shapes(1, 4), kind(0, 1), steps(5, 30), dir(-1, 1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const int n = shapes(rng);
  for (int s = 0; s < n; ++s) {
    long ci = static_cast<long>(u(rng) * static_cast<double>(h)), cj = static_cast<long>(u(rng) * static_cast<double>(w));
    const double rad = 0.5 + 3.0 * u(rng);
    auto disc = [&](long a, long b, double rr) {
      for (long i = a - 4; i <= a + 4; ++i)
        for (long j = b - 4; j <= b + 4; ++j)
          if (i >= 0 && j >= 0 && i < static_cast<long>(h) && j < static_cast<long>(w) &&
              (i - a) * (i - a) + (j - b) * (j - b) <= rr * rr) {
            img(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = 1;
          }
    };
    if (kind(rng) == 0) {
      disc(ci, cj, rad);
    } else {
      const int len = steps(rng);
      const double tr = 0.5 + 1.5 * u(rng);
      for (int k = 0; k < len; ++k) {
        disc(ci, cj, tr);
        ci += dir(rng);
        cj += dir(rng);
      }
    }
  }
  return img;
}

}  // namespace mpt::testing
