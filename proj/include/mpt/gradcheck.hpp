#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpt/grad.hpp"
#include "mpt/model.hpp"

namespace mpt {

inline constexpr double kKernelGradTol = 1e-6;
inline constexpr double kNetworkGradTol = 1e-4;

/// Names accepted by check_kernel, in a fixed order.
const std::vector<std::string>& gradcheck_kernels();

/// Analytic backward of one kernel against central differences on random
/// inputs. Every kernel is reduced to a scalar by a fixed random projection
/// of its output, centered on the unperturbed output. The composite block
/// check uses the fourth-order stencil at 10 * eps.
FdReport check_kernel(const std::string& name, std::uint64_t seed = 0, double eps = 1e-5);

/// Configuration used by the end-to-end check on a 16x16 input.
MPTNetConfig gradcheck_network_config();

/// dice_loss(forward(x)) against central differences over every parameter
/// group. Velocity biases are offset so that sample points sit away from the
/// bilinear lattice, where the interpolant is not differentiable. Uses the
/// fourth-order stencil: several parameter groups have gradients
/// near 1e-8, below the rounding floor of the second-order one.
FdReport check_network(const MPTNetConfig& cfg, std::uint64_t seed = 0, double eps = 1e-3,
                       std::size_t max_coords = 40);

}  // namespace mpt
