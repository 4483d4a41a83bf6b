#include <cmath>
#include <random>

#include "doctest.h"
#include "mpt/diffeo.hpp"
#include "support.hpp"

using namespace mpt;
using mpt::testing::interior_max_norm;
using mpt::testing::smooth_velocity;

namespace {

Tensor constant_field(std::size_t h, std::size_t w, double r, double c) {
  Tensor t({2, h, w});
  for (std::size_t k = 0; k < h * w; ++k) {
    t[k] = r;
    t[h * w + k] = c;
  }
  return t;
}

double interior_error(const Tensor& f, double r, double c, std::size_t margin) {
  const std::size_t h = f.dim(1), w = f.dim(2);
  double e = 0.0;
  for (std::size_t i = margin; i + margin < h; ++i)
    for (std::size_t j = margin; j + margin < w; ++j)
      e = std::max({e, std::abs(f(0, i, j) - r), std::abs(f(1, i, j) - c)});
  return e;
}

}  // namespace

TEST_CASE("velocity field construction") {
  CHECK_THROWS_AS(VelocityField(Tensor({3, 4, 4})), ShapeError);
  CHECK_THROWS_AS(VelocityField(constant_field(4, 4, 3.0, 4.0), 4.9), ArgumentError);
  CHECK_NOTHROW(VelocityField(constant_field(4, 4, 3.0, 4.0), 5.0));
  CHECK_THROWS_AS(exponentiate(VelocityField::zeros(4, 4), 0), ArgumentError);
}

TEST_CASE("compose examples") {
  const auto id = DeformationField::identity(8, 8);
  CHECK(max_abs(compose(id, id).offsets()) == 0.0);
  const DeformationField t1(constant_field(16, 16, 1.5, -0.5)), t2(constant_field(16, 16, -0.25, 2.0));
  CHECK(interior_error(compose(t1, t2).offsets(), 1.25, 1.5, 3) < 1e-12);
}

TEST_CASE("compose with the inverse is near identity") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const VelocityField v(smooth_velocity(32, 32, 1.0, rng));
    const auto phi = exponentiate(v), inv = invert(v);
    CHECK(interior_max_norm(compose(phi, inv).offsets(), 1) < 0.05);
    CHECK(interior_max_norm(compose(inv, phi).offsets(), 1) < 0.05);
  }
}

TEST_CASE("exponentiate examples") {
  CHECK(max_abs(exponentiate(VelocityField::zeros(8, 8)).offsets()) == 0.0);

  const auto phi = exponentiate(VelocityField(constant_field(64, 64, 3.0, -1.5)), 6);
  CHECK(phi.step_count() == 6);
  CHECK(interior_error(phi.offsets(), 3.0, -1.5, 3) < 1e-9);

  // v_row = a (row - c). The discrete scheme maps row - c to
  // (1 + a/2^n)^(2^n) (row - c); the continuous flow gives e^a.
  const std::size_t n = 64;
  const double a = 0.1, c = 31.5;
  Tensor v({2, n, n});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) v(0, i, j) = a * (static_cast<double>(i) - c);
  for (int steps : {8, 10}) {
    const auto lin = exponentiate(VelocityField(v), steps);
    const double gain = std::pow(1.0 + a / std::ldexp(1.0, steps), std::ldexp(1.0, steps)) - 1.0;
    double discrete = 0.0, continuous = 0.0;
    for (std::size_t i = 8; i + 8 < n; ++i) {
      const double r = static_cast<double>(i) - c;
      for (std::size_t j = 4; j + 4 < n; ++j) {
        discrete = std::max(discrete, std::abs(lin.offsets()(0, i, j) - gain * r) / std::abs(gain * r));
        continuous = std::max(continuous, std::abs(lin.offsets()(0, i, j) - std::expm1(a) * r) / std::abs(std::expm1(a) * r));
        CHECK(lin.offsets()(1, i, j) == 0.0);
      }
    }
    CHECK(discrete < 1e-10);
    // First-order start: relative error ~ a^2 e^a / (2^(n+1) (e^a - 1)).
    const double predicted = a * a * std::exp(a) / (std::ldexp(2.0, steps) * std::expm1(a));
    CHECK(continuous == doctest::Approx(predicted).epsilon(0.01));
    if (steps == 10) CHECK(continuous < 1e-4);
  }
}

TEST_CASE("exponentiate is a one-parameter group") {
  std::mt19937_64 rng(12);
  const Tensor v = smooth_velocity(48, 48, 1.5, rng);
  // exp(v) = exp(v/2) o exp(v/2) holds for the discrete scheme when the half
  // field uses one step fewer.
  const auto full = exponentiate(VelocityField(v), 7);
  const auto half = exponentiate(VelocityField(scale(v, 0.5)), 6);
  CHECK(max_abs_diff(compose(half, half).offsets(), full.offsets()) < 1e-6);
}

TEST_CASE("step refinement converges monotonically") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 5; ++trial) {
    const VelocityField v(smooth_velocity(48, 48, 2.0, rng));
    double prev = INFINITY;
    for (int n = 4; n <= 10; ++n) {
      const double d = max_abs_diff(exponentiate(v, n).offsets(), exponentiate(v, n + 1).offsets());
      CHECK(d < prev);
      prev = d;
    }
  }
}

TEST_CASE("jacobian determinant") {
  CHECK(max_abs_diff(jacobian_determinant(DeformationField::identity(6, 6)), Tensor({6, 6}, 1.0)) == 0.0);
  CHECK(max_abs_diff(jacobian_determinant(DeformationField(constant_field(6, 6, 2.0, -1.0))), Tensor({6, 6}, 1.0)) ==
        0.0);
  // Uniform scaling by 1.5 has determinant 2.25 everywhere.
  Tensor s({2, 6, 6});
  for (std::size_t i = 0; i < 6; ++i)
    for (std::size_t j = 0; j < 6; ++j) {
      s(0, i, j) = 0.5 * static_cast<double>(i);
      s(1, i, j) = 0.5 * static_cast<double>(j);
    }
  const Tensor jac = jacobian_determinant(DeformationField(s));
  for (std::size_t k = 0; k < 36; ++k) CHECK(jac[k] == doctest::Approx(2.25).epsilon(1e-14));
}

TEST_CASE("smooth fields stay diffeomorphic") {
  std::mt19937_64 rng(14);
  for (int trial = 0; trial < 20; ++trial) {
    const VelocityField v(smooth_velocity(64, 64, 2.0, rng));
    CHECK(min_interior_jacobian(exponentiate(v, 7)) > 0.0);
  }
}

TEST_CASE("invert examples") {
  CHECK(max_abs(invert(VelocityField::zeros(8, 8)).offsets()) == 0.0);
  const auto inv = invert(VelocityField(constant_field(32, 32, 1.0, 2.0)));
  CHECK(interior_error(inv.offsets(), -1.0, -2.0, 3) < 1e-9);
}
