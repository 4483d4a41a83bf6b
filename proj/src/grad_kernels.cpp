#include <algorithm>
#include <cmath>

#include "mpt/detail/bilinear.hpp"
#include "mpt/grad.hpp"
#include "mpt/morphpatch.hpp"

namespace mpt {

Tensor gelu_backward(const Tensor& x, const Tensor& d_out) {
  if (x.shape() != d_out.shape()) throw ShapeError("gelu_backward: shape mismatch");
  constexpr double kInvSqrt2Pi = 0.3989422804014327;
  Tensor dx(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double v = x[i];
    const double cdf = 0.5 * (1.0 + std::erf(v * M_SQRT1_2));
    dx[i] = d_out[i] * (cdf + v * kInvSqrt2Pi * std::exp(-0.5 * v * v));
  }
  return dx;
}

MatmulGrads matmul_backward(const Tensor& a, const Tensor& b, const Tensor& d_out) {
  return {matmul_nt(d_out, b), matmul_tn(a, d_out)};
}

Tensor softmax_backward(const Tensor& y, const Tensor& d_out, int axis) {
  if (y.shape() != d_out.shape()) throw ShapeError("softmax_backward: shape mismatch");
  const int r = static_cast<int>(y.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ArgumentError("softmax_backward: axis out of range");
  const auto& s = y.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor dx(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double dot = 0.0;
      for (std::size_t k = 0; k < n; ++k) dot += y[base + k * inner] * d_out[base + k * inner];
      for (std::size_t k = 0; k < n; ++k) {
        const std::size_t idx = base + k * inner;
        dx[idx] = y[idx] * (d_out[idx] - dot);
      }
    }
  }
  return dx;
}

LayerNormGrads layer_norm_backward(const LayerNormCache& cache, const Tensor& gamma, const Tensor& d_out) {
  if (cache.xhat.empty()) throw ArgumentError("layer_norm_backward: missing forward context");
  if (cache.xhat.shape() != d_out.shape()) throw ShapeError("layer_norm_backward: shape mismatch");
  const std::size_t n = d_out.dim(0), c = d_out.dim(1);
  LayerNormGrads g{Tensor(d_out.shape()), Tensor({c}), Tensor({c})};
  std::vector<double> dxh(c);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_d = 0.0, mean_dx = 0.0;
    for (std::size_t k = 0; k < c; ++k) {
      const double go = d_out[i * c + k];
      const double xh = cache.xhat[i * c + k];
      g.d_gamma[k] += go * xh;
      g.d_beta[k] += go;
      dxh[k] = go * gamma[k];
      mean_d += dxh[k];
      mean_dx += dxh[k] * xh;
    }
    mean_d /= static_cast<double>(c);
    mean_dx /= static_cast<double>(c);
    const double inv = cache.inv_std[i];
    for (std::size_t k = 0; k < c; ++k) {
      g.d_x[i * c + k] = inv * (dxh[k] - mean_d - cache.xhat[i * c + k] * mean_dx);
    }
  }
  return g;
}

Conv2dGrads conv2d_backward(const Tensor& x, const Tensor& kernel, const Tensor& d_out, int stride) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  const auto s = static_cast<std::size_t>(stride);
  const std::size_t oh = (h + s - 1) / s, ow = (w + s - 1) / s;
  if (d_out.shape() != Shape{cout, oh, ow}) throw ShapeError("conv2d_backward: upstream shape mismatch");
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  Conv2dGrads g{Tensor(x.shape()), Tensor(kernel.shape()), Tensor({cout})};
  for (std::size_t co = 0; co < cout; ++co) {
    const double* gp = d_out.ptr() + co * oh * ow;
    double bsum = 0.0;
    for (std::size_t p = 0; p < oh * ow; ++p) bsum += gp[p];
    g.d_bias[co] = bsum;
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* ip = x.ptr() + ci * h * w;
      double* dip = g.d_x.ptr() + ci * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const std::size_t kidx = ((co * cin + ci) * k + ky) * k + kx;
          const double kv = kernel[kidx];
          const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
          const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
          double kacc = 0.0;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s) + dy;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* irow = ip + static_cast<std::size_t>(iy) * w;
            double* drow = dip + static_cast<std::size_t>(iy) * w;
            const double* grow = gp + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s) + dx;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              kacc += irow[ix] * grow[ox];
              drow[ix] += kv * grow[ox];
            }
          }
          g.d_kernel[kidx] = kacc;
        }
      }
    }
  }
  return g;
}

namespace {

// Shared bilinear backward. coord(p) returns the absolute (row, col) of
// output pixel p; the coordinate gradient is written through d_row/d_col.
template <typename CoordFn, typename GradFn>
Tensor bilinear_backward(const Tensor& x, std::size_t out_pixels, const Tensor& d_out, CoordFn coord,
                         GradFn add_coord_grad) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor dx(x.shape());
  for (std::size_t p = 0; p < out_pixels; ++p) {
    const auto [r, q] = coord(p);
    const auto tr = detail::axis_tap(r, h);
    const auto tc = detail::axis_tap(q, w);
    const double w00 = (1 - tr.frac) * (1 - tc.frac), w01 = (1 - tr.frac) * tc.frac;
    const double w10 = tr.frac * (1 - tc.frac), w11 = tr.frac * tc.frac;
    double gr = 0.0, gc = 0.0;
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double g = d_out[ch * out_pixels + p];
      if (g == 0.0) continue;
      const double* s = x.ptr() + ch * h * w;
      double* ds = dx.ptr() + ch * h * w;
      const std::size_t i00 = tr.lo * w + tc.lo, i01 = tr.lo * w + tc.hi;
      const std::size_t i10 = tr.hi * w + tc.lo, i11 = tr.hi * w + tc.hi;
      ds[i00] += w00 * g;
      ds[i01] += w01 * g;
      ds[i10] += w10 * g;
      ds[i11] += w11 * g;
      if (tr.inside) gr += g * ((1 - tc.frac) * (s[i10] - s[i00]) + tc.frac * (s[i11] - s[i01]));
      if (tc.inside) gc += g * ((1 - tr.frac) * (s[i01] - s[i00]) + tr.frac * (s[i11] - s[i10]));
    }
    add_coord_grad(p, gr, gc);
  }
  return dx;
}

}  // namespace

SampleGrads grid_sample_backward(const Tensor& x, const Tensor& coords, const Tensor& d_out) {
  if (x.rank() != 3 || coords.rank() != 3 || coords.dim(2) != 2) {
    throw ShapeError("grid_sample_backward: only 2-D sampling is differentiable");
  }
  const std::size_t oh = coords.dim(0), ow = coords.dim(1);
  if (d_out.shape() != Shape{x.dim(0), oh, ow}) throw ShapeError("grid_sample_backward: upstream shape mismatch");
  SampleGrads g;
  g.d_coords = Tensor(coords.shape());
  g.d_x = bilinear_backward(
      x, oh * ow, d_out, [&](std::size_t p) { return std::pair{coords[2 * p], coords[2 * p + 1]}; },
      [&](std::size_t p, double gr, double gc) {
        g.d_coords[2 * p] = gr;
        g.d_coords[2 * p + 1] = gc;
      });
  return g;
}

SampleGrads warp_backward(const Tensor& x, const Tensor& offsets, const Tensor& d_out) {
  const std::size_t oh = offsets.dim(1), ow = offsets.dim(2), n = oh * ow;
  if (x.rank() != 3 || d_out.shape() != Shape{x.dim(0), oh, ow}) {
    throw ShapeError("warp_backward: upstream shape mismatch");
  }
  SampleGrads g;
  g.d_coords = Tensor(offsets.shape());
  g.d_x = bilinear_backward(
      x, n, d_out,
      [&](std::size_t p) {
        return std::pair{static_cast<double>(p / ow) + offsets[p], static_cast<double>(p % ow) + offsets[n + p]};
      },
      [&](std::size_t p, double gr, double gc) {
        g.d_coords[p] = gr;
        g.d_coords[n + p] = gc;
      });
  return g;
}

Tensor upsample_nearest2_backward(const Tensor& d_out) {
  const std::size_t c = d_out.dim(0), h = d_out.dim(1) / 2, w = d_out.dim(2) / 2;
  Tensor dx({c, h, w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) dx(ch, i / 2, j / 2) += d_out(ch, i, j);
  return dx;
}

std::pair<Tensor, Tensor> concat_channels_backward(const Tensor& d_out, std::size_t channels_a) {
  const std::size_t c = d_out.dim(0), h = d_out.dim(1), w = d_out.dim(2);
  if (channels_a >= c) throw ShapeError("concat_channels_backward: split point out of range");
  Tensor a({channels_a, h, w}), b({c - channels_a, h, w});
  std::copy_n(d_out.ptr(), a.size(), a.ptr());
  std::copy_n(d_out.ptr() + a.size(), b.size(), b.ptr());
  return {std::move(a), std::move(b)};
}

ComposeGrads compose_backward(const Tensor& outer, const Tensor& inner, const Tensor& d_out) {
  auto wg = warp_backward(outer, inner, d_out);
  axpy(wg.d_coords, d_out);
  return {std::move(wg.d_x), std::move(wg.d_coords)};
}

Tensor exponentiate_backward(const std::vector<Tensor>& history, const Tensor& d_phi) {
  if (history.empty()) throw ArgumentError("exponentiate_backward: missing forward context");
  Tensor g = d_phi;
  for (auto it = history.rbegin(); it != history.rend(); ++it) {
    auto cg = compose_backward(*it, *it, g);
    axpy(cg.d_outer, cg.d_inner);
    g = std::move(cg.d_outer);
  }
  return scale(g, std::ldexp(1.0, -static_cast<int>(history.size())));
}

SampleGrads deform_features_backward(const Tensor& x, const DeformationField& phi, const Tensor& d_out) {
  return warp_backward(x, phi.offsets(), d_out);
}

SoftAssignGrads soft_assign_backward(const Tensor& features, const Tensor& lambda, const Tensor& assign,
                                     const Tensor& d_assign) {
  const Tensor dz = softmax_backward(assign, d_assign, 1);
  SoftAssignGrads g{matmul(dz, lambda), matmul_tn(dz, features), Tensor({lambda.dim(0)})};
  const std::size_t m = dz.dim(0), n = dz.dim(1);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t s = 0; s < n; ++s) g.d_mu[s] += dz(i, s);
  return g;
}

UpdateCoresGrads update_cores_backward(const Tensor& features, const Tensor& cores, const Tensor& assign,
                                       CoreUpdate mode, const Tensor& d_out) {
  const std::size_t m = features.dim(0), n = cores.dim(0), d = cores.dim(1);
  if (d_out.shape() != cores.shape()) throw ShapeError("update_cores_backward: upstream shape mismatch");
  std::vector<double> mass(n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t s = 0; s < n; ++s) mass[s] += assign(i, s);

  Tensor d_disp = d_out;  // gradient w.r.t. D_s = sum_i g_is (f_i - c_s)
  UpdateCoresGrads g;
  g.d_cores = Tensor(cores.shape());
  std::vector<double> d_mass(n, 0.0);
  if (mode == CoreUpdate::residual) {
    const Tensor disp = matmul_tn(assign, features);
    for (std::size_t s = 0; s < n; ++s) {
      const double den = std::max(mass[s], kCoreUpdateEps);
      double dden = 0.0;
      for (std::size_t k = 0; k < d; ++k) {
        const double dsk = disp(s, k) - mass[s] * cores(s, k);
        dden -= d_out(s, k) * dsk / (den * den);
        d_disp(s, k) = d_out(s, k) / den;
        g.d_cores(s, k) = d_out(s, k);
      }
      if (mass[s] > kCoreUpdateEps) d_mass[s] = dden;
    }
  }
  for (std::size_t s = 0; s < n; ++s) {
    if (mode == CoreUpdate::residual && mass[s] > kCoreUpdateEps) {
      for (std::size_t k = 0; k < d; ++k) g.d_cores(s, k) = 0.0;  // output is P / mass
      continue;
    }
    for (std::size_t k = 0; k < d; ++k) g.d_cores(s, k) -= mass[s] * d_disp(s, k);
  }
  g.d_features = matmul(assign, d_disp);
  // d g_is = dD_s . (f_i - c_s) + dmass_s
  g.d_assign = matmul_nt(features, d_disp);
  for (std::size_t s = 0; s < n; ++s) {
    double dc = 0.0;
    for (std::size_t k = 0; k < d; ++k) dc += d_disp(s, k) * cores(s, k);
    for (std::size_t i = 0; i < m; ++i) g.d_assign(i, s) += d_mass[s] - dc;
  }
  return g;
}

ScaGrads sca_backward(const ScaCache& cache, const SCAParams& p, const Tensor& d_out) {
  if (cache.attn.empty()) throw ArgumentError("sca_backward: missing forward context");
  const Tensor& q = cache.q;
  const Tensor& k = cache.k;
  const Tensor& v = cache.v;
  const std::size_t m = q.dim(0), n = k.dim(0), d = q.dim(1), dh = d / p.heads;
  if (d_out.shape() != Shape{m, d}) throw ShapeError("sca_backward: upstream shape mismatch");
  const double sc = p.scale();
  Tensor dq({m, d}), dk({n, d}), dv({n, d});
  std::vector<double> da(n);
  for (std::size_t hd = 0; hd < p.heads; ++hd) {
    const std::size_t off = hd * dh;
    for (std::size_t i = 0; i < m; ++i) {
      const double* a = cache.attn.ptr() + (hd * m + i) * n;
      double dot = 0.0;
      for (std::size_t s = 0; s < n; ++s) {
        double acc = 0.0;
        for (std::size_t c = 0; c < dh; ++c) {
          const double go = d_out(i, off + c);
          acc += go * v(s, off + c);
          dv(s, off + c) += a[s] * go;
        }
        da[s] = acc;
        dot += acc * a[s];
      }
      for (std::size_t s = 0; s < n; ++s) {
        const double ds = a[s] * (da[s] - dot) * sc;
        if (ds == 0.0) continue;
        for (std::size_t c = 0; c < dh; ++c) {
          dq(i, off + c) += ds * k(s, off + c);
          dk(s, off + c) += ds * q(i, off + c);
        }
      }
    }
  }
  ScaGrads g;
  g.d_wq = matmul_tn(cache.features, dq);
  g.d_features = matmul_nt(dq, p.wq);
  g.d_wk = matmul_tn(cache.new_cores, dk);
  g.d_wv = matmul_tn(cache.new_cores, dv);
  g.d_new_cores = matmul_nt(dk, p.wk);
  axpy(g.d_new_cores, matmul_nt(dv, p.wv));
  return g;
}

}  // namespace mpt
