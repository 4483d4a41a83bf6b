#include "mpt/morphpatch.hpp"

#include <cmath>

#include "mpt/detail/bilinear.hpp"

namespace mpt {

PatchGrid make_patch_grid(std::size_t h, std::size_t w, std::size_t patch_h, std::size_t patch_w) {
  if (patch_h == 0 || patch_w == 0 || h % patch_h != 0 || w % patch_w != 0) {
    throw ShapeError("patch size " + std::to_string(patch_h) + "x" + std::to_string(patch_w) +
                     " does not tile a " + std::to_string(h) + "x" + std::to_string(w) + " image");
  }
  PatchGrid g;
  g.patch_h = patch_h;
  g.patch_w = patch_w;
  g.rows = h / patch_h;
  g.cols = w / patch_w;
  const double ch = 0.5 * static_cast<double>(patch_h - 1);
  const double cw = 0.5 * static_cast<double>(patch_w - 1);
  for (std::size_t r = 0; r < g.rows; ++r)
    for (std::size_t c = 0; c < g.cols; ++c)
      g.centers.push_back({static_cast<double>(r * patch_h) + ch, static_cast<double>(c * patch_w) + cw});
  for (std::size_t a = 0; a < patch_h; ++a)
    for (std::size_t b = 0; b < patch_w; ++b)
      g.region_offsets.push_back({static_cast<double>(a) - ch, static_cast<double>(b) - cw});
  g.weights = Tensor({patch_h, patch_w}, 1.0 / static_cast<double>(patch_h * patch_w));
  return g;
}

namespace {

void check_grid(const Tensor& x, const PatchGrid& grid) {
  if (x.rank() != 3) throw ShapeError("expected [C,H,W] features, got " + shape_str(x.shape()));
  if (grid.rows * grid.patch_h != x.dim(1) || grid.cols * grid.patch_w != x.dim(2)) {
    throw ShapeError("patch grid does not tile image " + shape_str(x.shape()));
  }
  if (grid.weights.size() != grid.region_offsets.size()) throw ShapeError("patch weights size mismatch");
}

}  // namespace

Tensor morph_patch_extract(const Tensor& x, const DeformationField& phi, const PatchGrid& grid) {
  check_grid(x, grid);
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2), n = h * w;
  if (phi.height() != h || phi.width() != w) throw ShapeError("morph_patch_extract: field/image size mismatch");
  const Tensor& off = phi.offsets();
  Tensor y({grid.count(), c});
  for (std::size_t p = 0; p < grid.count(); ++p) {
    const Point2 p0 = grid.centers[p];
    for (std::size_t k = 0; k < grid.region_offsets.size(); ++k) {
      const Point2 pn = grid.region_offsets[k];
      const double r = p0.row + pn.row, q = p0.col + pn.col;
      const auto pix = static_cast<std::size_t>(std::lround(r)) * w + static_cast<std::size_t>(std::lround(q));
      const auto tr = detail::axis_tap(r + off[pix], h);
      const auto tc = detail::axis_tap(q + off[n + pix], w);
      const double w00 = (1 - tr.frac) * (1 - tc.frac), w01 = (1 - tr.frac) * tc.frac;
      const double w10 = tr.frac * (1 - tc.frac), w11 = tr.frac * tc.frac;
      const double wk = grid.weights[k];
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* s = x.ptr() + ch * n;
        const double v = w00 * s[tr.lo * w + tc.lo] + w01 * s[tr.lo * w + tc.hi] +
                         w10 * s[tr.hi * w + tc.lo] + w11 * s[tr.hi * w + tc.hi];
        y[p * c + ch] += wk * v;
      }
    }
  }
  return y;
}

Tensor deform_features(const Tensor& x, const DeformationField& phi) {
  if (x.rank() != 3 || phi.height() != x.dim(1) || phi.width() != x.dim(2)) {
    throw ShapeError("deform_features: field " + shape_str(phi.offsets().shape()) + " does not match " +
                     shape_str(x.shape()));
  }
  return warp(x, phi.offsets());
}

Tensor patch_pool(const Tensor& x, const PatchGrid& grid) {
  check_grid(x, grid);
  const std::size_t c = x.dim(0), w = x.dim(2), n = x.dim(1) * w;
  Tensor y({grid.count(), c});
  for (std::size_t p = 0; p < grid.count(); ++p) {
    for (std::size_t k = 0; k < grid.region_offsets.size(); ++k) {
      const auto r = static_cast<std::size_t>(std::lround(grid.centers[p].row + grid.region_offsets[k].row));
      const auto q = static_cast<std::size_t>(std::lround(grid.centers[p].col + grid.region_offsets[k].col));
      for (std::size_t ch = 0; ch < c; ++ch) y[p * c + ch] += grid.weights[k] * x[ch * n + r * w + q];
    }
  }
  return y;
}

Tensor window_partition(const Tensor& x, std::size_t win_h, std::size_t win_w) {
  if (x.rank() != 3) throw ShapeError("window_partition: expected [C,H,W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (win_h == 0 || win_w == 0 || h % win_h || w % win_w) {
    throw ShapeError("window_partition: " + std::to_string(win_h) + "x" + std::to_string(win_w) +
                     " windows do not tile " + shape_str(x.shape()));
  }
  const std::size_t nwr = h / win_h, nwc = w / win_w, l = win_h * win_w;
  Tensor out({nwr * nwc, l, c});
  for (std::size_t a = 0; a < nwr; ++a)
    for (std::size_t b = 0; b < nwc; ++b)
      for (std::size_t i = 0; i < win_h; ++i)
        for (std::size_t j = 0; j < win_w; ++j) {
          const std::size_t tok = ((a * nwc + b) * l + i * win_w + j) * c;
          const std::size_t pix = (a * win_h + i) * w + b * win_w + j;
          for (std::size_t ch = 0; ch < c; ++ch) out[tok + ch] = x[ch * h * w + pix];
        }
  return out;
}

Tensor window_merge(const Tensor& windows, std::size_t h, std::size_t w, std::size_t win_h,
                    std::size_t win_w) {
  if (windows.rank() != 3 || win_h == 0 || win_w == 0 || h % win_h || w % win_w ||
      windows.dim(0) != (h / win_h) * (w / win_w) || windows.dim(1) != win_h * win_w) {
    throw ShapeError("window_merge: windows " + shape_str(windows.shape()) + " incompatible with image size");
  }
  const std::size_t c = windows.dim(2), nwc = w / win_w, l = win_h * win_w;
  Tensor out({c, h, w});
  for (std::size_t a = 0; a < h / win_h; ++a)
    for (std::size_t b = 0; b < nwc; ++b)
      for (std::size_t i = 0; i < win_h; ++i)
        for (std::size_t j = 0; j < win_w; ++j) {
          const std::size_t tok = ((a * nwc + b) * l + i * win_w + j) * c;
          const std::size_t pix = (a * win_h + i) * w + b * win_w + j;
          for (std::size_t ch = 0; ch < c; ++ch) out[ch * h * w + pix] = windows[tok + ch];
        }
  return out;
}

Tensor cyclic_shift(const Tensor& x, long shift_h, long shift_w) {
  if (x.rank() != 3) throw ShapeError("cyclic_shift: expected [C,H,W]");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const auto mod = [](long s, std::size_t m) {
    const long r = s % static_cast<long>(m);
    return static_cast<std::size_t>(r < 0 ? r + static_cast<long>(m) : r);
  };
  const std::size_t sh = mod(shift_h, h), sw = mod(shift_w, w);
  Tensor out(x.shape());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < h; ++i)
      for (std::size_t j = 0; j < w; ++j) out(ch, (i + sh) % h, (j + sw) % w) = x(ch, i, j);
  return out;
}

}  // namespace mpt
