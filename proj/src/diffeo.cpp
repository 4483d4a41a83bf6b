#include "mpt/diffeo.hpp"

#include <algorithm>
#include <cmath>

namespace mpt {

namespace {

void require_field(const Tensor& t, const char* what) {
  if (t.rank() != 3 || t.dim(0) != 2) {
    throw ShapeError(std::string(what) + " must be [2,H,W], got " + shape_str(t.shape()));
  }
}

}  // namespace

double max_norm(const Tensor& field) {
  require_field(field, "field");
  const std::size_t n = field.dim(1) * field.dim(2);
  double m = 0.0;
  for (std::size_t p = 0; p < n; ++p) m = std::max(m, std::hypot(field[p], field[n + p]));
  return m;
}

VelocityField::VelocityField(Tensor v, double v_max) : v_(std::move(v)), v_max_(v_max) {
  require_field(v_, "velocity field");
  v_.validate();
  const double m = max_norm(v_);
  if (m > v_max_) {
    throw ArgumentError("velocity norm " + std::to_string(m) + " exceeds declared v_max " +
                        std::to_string(v_max_));
  }
}

VelocityField VelocityField::negated() const { return VelocityField(scale(v_, -1.0), v_max_); }

VelocityField VelocityField::zeros(std::size_t h, std::size_t w) {
  return VelocityField(Tensor({2, h, w}));
}

DeformationField::DeformationField(Tensor offsets, int steps) : off_(std::move(offsets)), steps_(steps) {
  require_field(off_, "deformation field");
  off_.validate();
}

DeformationField DeformationField::identity(std::size_t h, std::size_t w) {
  return DeformationField(Tensor({2, h, w}));
}

DeformationField compose(const DeformationField& outer, const DeformationField& inner) {
  if (outer.offsets().shape() != inner.offsets().shape()) {
    throw ShapeError("compose: field shapes differ " + shape_str(outer.offsets().shape()) + " vs " +
                     shape_str(inner.offsets().shape()));
  }
  Tensor out = warp(outer.offsets(), inner.offsets());
  axpy(out, inner.offsets());
  return DeformationField(std::move(out), std::max(outer.step_count(), inner.step_count()));
}

DeformationField exponentiate(const VelocityField& v, int n, std::vector<Tensor>& history) {
  if (n < 1) throw ArgumentError("exponentiate: step count must be >= 1, got " + std::to_string(n));
  history.clear();
  // phi^(1/2^n) = Id + v / 2^n, the first-order flow from phi^(0) = Id.
  Tensor phi = scale(v.tensor(), std::ldexp(1.0, -n));
  for (int i = 0; i < n; ++i) {
    history.push_back(phi);
    Tensor next = warp(phi, phi);
    axpy(next, phi);
    phi = std::move(next);
  }
  return DeformationField(std::move(phi), n);
}

DeformationField exponentiate(const VelocityField& v, int n) {
  std::vector<Tensor> history;
  return exponentiate(v, n, history);
}

DeformationField invert(const VelocityField& v, int n) { return exponentiate(v.negated(), n); }

Tensor jacobian_determinant(const DeformationField& phi) {
  const Tensor& off = phi.offsets();
  const std::size_t h = off.dim(1), w = off.dim(2), n = h * w;
  if (h < 3 || w < 3) throw ShapeError("jacobian_determinant: field must be at least 3x3");
  Tensor det({h, w});
  auto d_row = [&](std::size_t comp, std::size_t i, std::size_t j) {
    const double* f = off.ptr() + comp * n;
    if (i == 0) return f[w + j] - f[j];
    if (i == h - 1) return f[i * w + j] - f[(i - 1) * w + j];
    return 0.5 * (f[(i + 1) * w + j] - f[(i - 1) * w + j]);
  };
  auto d_col = [&](std::size_t comp, std::size_t i, std::size_t j) {
    const double* f = off.ptr() + comp * n;
    if (j == 0) return f[i * w + 1] - f[i * w];
    if (j == w - 1) return f[i * w + j] - f[i * w + j - 1];
    return 0.5 * (f[i * w + j + 1] - f[i * w + j - 1]);
  };
  for (std::size_t i = 0; i < h; ++i) {
    for (std::size_t j = 0; j < w; ++j) {
      const double a = 1.0 + d_row(0, i, j), b = d_col(0, i, j);
      const double c = d_row(1, i, j), d = 1.0 + d_col(1, i, j);
      det(i, j) = a * d - b * c;
    }
  }
  return det;
}

double min_interior_jacobian(const DeformationField& phi, std::size_t margin) {
  const Tensor det = jacobian_determinant(phi);
  const std::size_t h = det.dim(0), w = det.dim(1);
  if (2 * margin >= h || 2 * margin >= w) throw ArgumentError("min_interior_jacobian: margin too large");
  double m = std::numeric_limits<double>::infinity();
  for (std::size_t i = margin; i < h - margin; ++i)
    for (std::size_t j = margin; j < w - margin; ++j) m = std::min(m, det(i, j));
  return m;
}

}  // namespace mpt
