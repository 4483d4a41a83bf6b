#pragma once

#include <string>

#include "mpt/tensor.hpp"

namespace mpt {

/// Binary 8-bit PGM (P5) of a [H,W] tensor, linearly mapped from [min,max]
/// to [0,255]. A constant image maps to 0.
void save_pgm(const std::string& path, const Tensor& img);

}  // namespace mpt
