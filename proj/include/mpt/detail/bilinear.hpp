#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>

namespace mpt::detail {

/// Interpolation cell for one axis. Coordinates are clamped to
/// [0, extent-1]; `inside` is false when clamping was active, in which case
/// the sample is locally constant in that coordinate.
struct AxisTap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
  bool inside = true;
};

inline AxisTap axis_tap(double coord, std::size_t extent) {
  AxisTap t;
  if (extent == 1) {
    t.inside = false;
    return t;
  }
  const double top = static_cast<double>(extent - 1);
  double c = coord;
  if (c < 0.0) {
    c = 0.0;
    t.inside = false;
  } else if (c > top) {
    c = top;
    t.inside = false;
  }
  auto lo = static_cast<std::size_t>(std::floor(c));
  if (lo >= extent - 1) lo = extent - 2;
  t.lo = lo;
  t.hi = lo + 1;
  t.frac = c - static_cast<double>(lo);
  return t;
}

}  // namespace mpt::detail
