#pragma once

#include <cstddef>
#include <utility>
#include <vector>

#include "mpt/diffeo.hpp"
#include "mpt/tensor.hpp"

namespace mpt {

struct Point2 {
  double row = 0.0;
  double col = 0.0;
};

/// Non-overlapping tiling of an H x W image into patch_h x patch_w patches.
/// Each patch is described by its center and the offsets of its pixels
/// relative to that center; `weights` ([patch_h, patch_w]) weights the
/// pixels of every patch.
struct PatchGrid {
  std::size_t patch_h = 0;
  std::size_t patch_w = 0;
  std::size_t rows = 0;  // patches per column
  std::size_t cols = 0;  // patches per row
  std::vector<Point2> centers;
  std::vector<Point2> region_offsets;
  Tensor weights;

  std::size_t count() const noexcept { return rows * cols; }
};

/// Uniform weights 1/|R|. Throws ShapeError unless the patch size divides H and W.
PatchGrid make_patch_grid(std::size_t h, std::size_t w, std::size_t patch_h, std::size_t patch_w);

/// Per-patch weighted sum of x sampled at p0 + pn + phi(p0 + pn); [N_patch, C].
Tensor morph_patch_extract(const Tensor& x, const DeformationField& phi, const PatchGrid& grid);

/// Dense warp out(p) = x(p + phi(p)).
Tensor deform_features(const Tensor& x, const DeformationField& phi);

/// Weighted pooling of x over the patches of grid; [N_patch, C].
Tensor patch_pool(const Tensor& x, const PatchGrid& grid);

/// [C,H,W] -> [N_win, win_h*win_w, C]; windows and tokens in raster order.
Tensor window_partition(const Tensor& x, std::size_t win_h, std::size_t win_w);
Tensor window_merge(const Tensor& windows, std::size_t h, std::size_t w, std::size_t win_h,
                    std::size_t win_w);

/// Toroidal roll: out[(i + s_h) mod H, (j + s_w) mod W] = x[i, j].
Tensor cyclic_shift(const Tensor& x, long shift_h, long shift_w);

}  // namespace mpt
