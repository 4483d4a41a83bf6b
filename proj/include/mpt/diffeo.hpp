#pragma once

#include <limits>
#include <vector>

#include "mpt/tensor.hpp"

namespace mpt {

inline constexpr int kDefaultSquaringSteps = 7;

/// Stationary velocity field, [2,H,W] (row, col) in pixels per unit time.
class VelocityField {
 public:
  VelocityField() = default;
  /// Throws ArgumentError if any per-pixel norm exceeds v_max.
  explicit VelocityField(Tensor v, double v_max = std::numeric_limits<double>::infinity());

  const Tensor& tensor() const noexcept { return v_; }
  double v_max() const noexcept { return v_max_; }
  std::size_t height() const { return v_.dim(1); }
  std::size_t width() const { return v_.dim(2); }

  VelocityField negated() const;
  static VelocityField zeros(std::size_t h, std::size_t w);

 private:
  Tensor v_;
  double v_max_ = std::numeric_limits<double>::infinity();
};

/// phi(x) = x + offset(x), stored as the [2,H,W] offset field.
class DeformationField {
 public:
  DeformationField() = default;
  explicit DeformationField(Tensor offsets, int steps = 0);

  const Tensor& offsets() const noexcept { return off_; }
  int step_count() const noexcept { return steps_; }
  std::size_t height() const { return off_.dim(1); }
  std::size_t width() const { return off_.dim(2); }

  static DeformationField identity(std::size_t h, std::size_t w);

 private:
  Tensor off_;
  int steps_ = 0;
};

/// Largest per-pixel vector norm of a [2,H,W] field.
double max_norm(const Tensor& field);

/// (outer o inner)(x) = outer(inner(x)), sampling outer at inner-warped points.
DeformationField compose(const DeformationField& outer, const DeformationField& inner);

/// Scaling and squaring: start at v / 2^n, then square n times.
DeformationField exponentiate(const VelocityField& v, int n = kDefaultSquaringSteps);

/// Same as exponentiate, also returning the n pre-squaring fields
/// (index k holds the field before the (k+1)-th squaring) for backprop.
DeformationField exponentiate(const VelocityField& v, int n, std::vector<Tensor>& history);

DeformationField invert(const VelocityField& v, int n = kDefaultSquaringSteps);

/// det of d(x + offset)/dx; central differences inside, one-sided on borders.
Tensor jacobian_determinant(const DeformationField& phi);

/// Minimum of jacobian_determinant over pixels at least `margin` from every border.
double min_interior_jacobian(const DeformationField& phi, std::size_t margin = 1);

}  // namespace mpt
