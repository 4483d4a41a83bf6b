#include "mpt/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "mpt/detail/bilinear.hpp"

namespace mpt {

namespace {

thread_local std::size_t g_peak_elements = 0;

void note_alloc(std::size_t n) { g_peak_elements = std::max(g_peak_elements, n); }

void check_shape(const Shape& s) {
  for (auto e : s) {
    if (e == 0) throw ShapeError("tensor extents must be >= 1, got " + shape_str(s));
  }
}

void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
}

void require_rank(const Tensor& a, std::size_t r, const char* op) {
  if (a.rank() != r) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " +
                     shape_str(a.shape()));
  }
}

}  // namespace

namespace alloc_stats {
void reset() { g_peak_elements = 0; }
std::size_t peak_elements() { return g_peak_elements; }
}  // namespace alloc_stats

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_.assign(shape_numel(shape_), fill);
  note_alloc(data_.size());
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                     shape_str(shape_));
  }
  validate();
  note_alloc(data_.size());
}

Tensor::Tensor(Shape shape, std::initializer_list<double> data)
    : Tensor(std::move(shape), std::vector<double>(data)) {}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size()) throw ShapeError("axis out of range for shape " + shape_str(shape_));
  return shape_[axis];
}

void Tensor::validate() const {
  for (std::size_t i = 0; i < data_.size(); ++i) {
    if (!std::isfinite(data_[i])) {
      throw FormatError("non-finite value at flat index " + std::to_string(i) +
                        (name_.empty() ? "" : " in '" + name_ + "'"));
    }
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  check_shape(shape);
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  t.name_ = name_;
  return t;
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same(a, b, "add");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same(a, b, "sub");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same(a, b, "mul");
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Tensor scale(const Tensor& a, double s) {
  Tensor out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * s;
  return out;
}

void axpy(Tensor& a, const Tensor& b, double s) {
  require_same(a, b, "axpy");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

double sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return s;
}

double max_abs(const Tensor& a) {
  double m = 0.0;
  for (double v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor gelu(const Tensor& x) {
  Tensor out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    out[i] = 0.5 * x[i] * (1.0 + std::erf(x[i] * M_SQRT1_2));
  }
  return out;
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    double* row = po + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = pa[i * k + p];
      const double* brow = pb + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_tn");
  require_rank(b, 2, "matmul_tn");
  const std::size_t k = a.dim(0), m = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul_tn: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = pa + p * m;
    const double* brow = pb + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double av = arow[i];
      double* row = po + i * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  return out;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul_nt");
  require_rank(b, 2, "matmul_nt");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
  if (b.dim(1) != k) {
    throw ShapeError("matmul_nt: inner dimension mismatch " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  }
  Tensor out({m, n});
  const double* pa = a.ptr();
  const double* pb = b.ptr();
  double* po = out.ptr();
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = pa + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = pb + j * k;
      double s = 0.0;
      for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
      po[i * n + j] = s;
    }
  }
  return out;
}

Tensor transpose(const Tensor& a) {
  require_rank(a, 2, "transpose");
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor out({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  return out;
}

Tensor to_tokens(const Tensor& x) {
  require_rank(x, 3, "to_tokens");
  const std::size_t c = x.dim(0), hw = x.dim(1) * x.dim(2);
  Tensor out({hw, c});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t p = 0; p < hw; ++p) out[p * c + ch] = x[ch * hw + p];
  return out;
}

Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w) {
  require_rank(t, 2, "from_tokens");
  if (t.dim(0) != h * w) throw ShapeError("from_tokens: token count does not match " +
                                          std::to_string(h) + "x" + std::to_string(w));
  const std::size_t c = t.dim(1), hw = h * w;
  Tensor out({c, h, w});
  for (std::size_t p = 0; p < hw; ++p)
    for (std::size_t ch = 0; ch < c; ++ch) out[ch * hw + p] = t[p * c + ch];
  return out;
}

// ---- normalization ----------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const int r = static_cast<int>(x.rank());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ArgumentError("softmax: axis out of range");
  const auto& s = x.shape();
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < r; ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Tensor out(s);
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * n * inner + in;
      double mx = x[base];
      for (std::size_t k = 1; k < n; ++k) mx = std::max(mx, x[base + k * inner]);
      double z = 0.0;
      for (std::size_t k = 0; k < n; ++k) {
        const double e = std::exp(x[base + k * inner] - mx);
        out[base + k * inner] = e;
        z += e;
      }
      const double inv = 1.0 / z;
      for (std::size_t k = 0; k < n; ++k) out[base + k * inner] *= inv;
    }
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps,
                  LayerNormCache* cache) {
  require_rank(x, 2, "layer_norm");
  const std::size_t n = x.dim(0), c = x.dim(1);
  if (gamma.size() != c || beta.size() != c) throw ShapeError("layer_norm: affine size mismatch");
  Tensor out(x.shape());
  if (cache) {
    cache->xhat = Tensor(x.shape());
    cache->inv_std.assign(n, 0.0);
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = x.ptr() + i * c;
    double mean = 0.0;
    for (std::size_t k = 0; k < c; ++k) mean += row[k];
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t k = 0; k < c; ++k) var += (row[k] - mean) * (row[k] - mean);
    var /= static_cast<double>(c);
    const double inv = 1.0 / std::sqrt(var + eps);
    for (std::size_t k = 0; k < c; ++k) {
      const double xh = (row[k] - mean) * inv;
      out[i * c + k] = xh * gamma[k] + beta[k];
      if (cache) cache->xhat[i * c + k] = xh;
    }
    if (cache) cache->inv_std[i] = inv;
  }
  return out;
}

// ---- spatial kernels --------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride) {
  require_rank(x, 3, "conv2d");
  require_rank(kernel, 4, "conv2d");
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != cin) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, got " +
                     std::to_string(cin));
  }
  if (kernel.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square with odd size");
  if (bias.size() != cout) throw ShapeError("conv2d: bias size mismatch");
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  const auto s = static_cast<std::size_t>(stride);
  const std::size_t oh = (h + s - 1) / s, ow = (w + s - 1) / s;
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor out({cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co) {
    double* op = out.ptr() + co * oh * ow;
    std::fill(op, op + oh * ow, bias[co]);
    for (std::size_t ci = 0; ci < cin; ++ci) {
      const double* ip = x.ptr() + ci * h * w;
      for (std::size_t ky = 0; ky < k; ++ky) {
        for (std::size_t kx = 0; kx < k; ++kx) {
          const double kv = kernel[((co * cin + ci) * k + ky) * k + kx];
          if (kv == 0.0) continue;
          const auto dy = static_cast<std::ptrdiff_t>(ky) - pad;
          const auto dx = static_cast<std::ptrdiff_t>(kx) - pad;
          for (std::size_t oy = 0; oy < oh; ++oy) {
            const auto iy = static_cast<std::ptrdiff_t>(oy * s) + dy;
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            const double* irow = ip + static_cast<std::size_t>(iy) * w;
            double* orow = op + oy * ow;
            for (std::size_t ox = 0; ox < ow; ++ox) {
              const auto ix = static_cast<std::ptrdiff_t>(ox * s) + dx;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              orow[ox] += kv * irow[ix];
            }
          }
        }
      }
    }
  }
  return out;
}

namespace {

Tensor grid_sample_2d(const Tensor& x, const Tensor& coords) {
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = coords.dim(0), ow = coords.dim(1);
  Tensor out({c, oh, ow});
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      const auto tr = detail::axis_tap(coords[(i * ow + j) * 2], h);
      const auto tc = detail::axis_tap(coords[(i * ow + j) * 2 + 1], w);
      const double w00 = (1 - tr.frac) * (1 - tc.frac), w01 = (1 - tr.frac) * tc.frac;
      const double w10 = tr.frac * (1 - tc.frac), w11 = tr.frac * tc.frac;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* p = x.ptr() + ch * h * w;
        out[(ch * oh + i) * ow + j] = w00 * p[tr.lo * w + tc.lo] + w01 * p[tr.lo * w + tc.hi] +
                                      w10 * p[tr.hi * w + tc.lo] + w11 * p[tr.hi * w + tc.hi];
      }
    }
  }
  return out;
}

Tensor grid_sample_3d(const Tensor& x, const Tensor& coords) {
  const std::size_t c = x.dim(0), d = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t od = coords.dim(0), oh = coords.dim(1), ow = coords.dim(2);
  Tensor out({c, od, oh, ow});
  const std::size_t ovox = od * oh * ow;
  for (std::size_t v = 0; v < ovox; ++v) {
    const auto tz = detail::axis_tap(coords[v * 3], d);
    const auto ty = detail::axis_tap(coords[v * 3 + 1], h);
    const auto tx = detail::axis_tap(coords[v * 3 + 2], w);
    const std::size_t zs[2] = {tz.lo, tz.hi}, ys[2] = {ty.lo, ty.hi}, xs[2] = {tx.lo, tx.hi};
    const double wz[2] = {1 - tz.frac, tz.frac}, wy[2] = {1 - ty.frac, ty.frac},
                 wx[2] = {1 - tx.frac, tx.frac};
    for (std::size_t ch = 0; ch < c; ++ch) {
      const double* p = x.ptr() + ch * d * h * w;
      double acc = 0.0;
      for (int a = 0; a < 2; ++a)
        for (int b = 0; b < 2; ++b)
          for (int e = 0; e < 2; ++e) acc += wz[a] * wy[b] * wx[e] * p[(zs[a] * h + ys[b]) * w + xs[e]];
      out[ch * ovox + v] = acc;
    }
  }
  return out;
}

}  // namespace

Tensor grid_sample(const Tensor& x, const Tensor& coords) {
  for (double v : coords.data()) {
    if (!std::isfinite(v)) throw FormatError("grid_sample: non-finite coordinate");
  }
  if (x.rank() == 3) {
    if (coords.rank() != 3 || coords.dim(2) != 2) {
      throw ShapeError("grid_sample: coords " + shape_str(coords.shape()) +
                       " incompatible with 2-D input " + shape_str(x.shape()));
    }
    return grid_sample_2d(x, coords);
  }
  if (x.rank() == 4) {
    if (coords.rank() != 4 || coords.dim(3) != 3) {
      throw ShapeError("grid_sample: coords " + shape_str(coords.shape()) +
                       " incompatible with 3-D input " + shape_str(x.shape()));
    }
    return grid_sample_3d(x, coords);
  }
  throw ShapeError("grid_sample: input must be [C,H,W] or [C,D,H,W], got " + shape_str(x.shape()));
}

Tensor warp(const Tensor& x, const Tensor& offsets) {
  require_rank(x, 3, "warp");
  if (offsets.rank() != 3 || offsets.dim(0) != 2) {
    throw ShapeError("warp: offsets must be [2,H,W], got " + shape_str(offsets.shape()));
  }
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t oh = offsets.dim(1), ow = offsets.dim(2), n = oh * ow;
  Tensor out({c, oh, ow});
  for (std::size_t i = 0; i < oh; ++i) {
    for (std::size_t j = 0; j < ow; ++j) {
      const std::size_t p = i * ow + j;
      const auto tr = detail::axis_tap(static_cast<double>(i) + offsets[p], h);
      const auto tc = detail::axis_tap(static_cast<double>(j) + offsets[n + p], w);
      const double w00 = (1 - tr.frac) * (1 - tc.frac), w01 = (1 - tr.frac) * tc.frac;
      const double w10 = tr.frac * (1 - tc.frac), w11 = tr.frac * tc.frac;
      for (std::size_t ch = 0; ch < c; ++ch) {
        const double* s = x.ptr() + ch * h * w;
        out[ch * n + p] = w00 * s[tr.lo * w + tc.lo] + w01 * s[tr.lo * w + tc.hi] +
                          w10 * s[tr.hi * w + tc.lo] + w11 * s[tr.hi * w + tc.hi];
      }
    }
  }
  return out;
}

Tensor upsample_nearest2(const Tensor& x) {
  require_rank(x, 3, "upsample_nearest2");
  const std::size_t c = x.dim(0), h = x.dim(1), w = x.dim(2);
  Tensor out({c, 2 * h, 2 * w});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t i = 0; i < 2 * h; ++i)
      for (std::size_t j = 0; j < 2 * w; ++j) out(ch, i, j) = x(ch, i / 2, j / 2);
  return out;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "concat_channels");
  require_rank(b, 3, "concat_channels");
  if (a.dim(1) != b.dim(1) || a.dim(2) != b.dim(2)) throw ShapeError("concat_channels: spatial mismatch");
  Tensor out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.data().begin(), a.data().end(), out.data().begin());
  std::copy(b.data().begin(), b.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

// ---- MTK1 -------------------------------------------------------------------

namespace {

template <typename T>
void put_le(std::ostream& os, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts are not supported");
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get_le(std::istream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!is) throw FormatError("MTK1: truncated stream");
  return v;
}

}  // namespace

void write_mtk(std::ostream& os, const Tensor& t) {
  if (t.empty()) throw ArgumentError("MTK1: cannot serialize an empty tensor");
  os.write("MTK1", 4);
  put_le<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
  for (auto e : t.shape()) put_le<std::uint32_t>(os, static_cast<std::uint32_t>(e));
  os.write(reinterpret_cast<const char*>(t.ptr()), static_cast<std::streamsize>(t.size() * sizeof(double)));
}

Tensor read_mtk(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, "MTK1", 4) != 0) throw FormatError("MTK1: bad magic");
  const auto rank = get_le<std::uint32_t>(is);
  if (rank == 0 || rank > 8) throw FormatError("MTK1: unsupported rank " + std::to_string(rank));
  Shape shape(rank);
  for (auto& e : shape) {
    e = get_le<std::uint32_t>(is);
    if (e == 0) throw FormatError("MTK1: zero extent");
  }
  std::vector<double> data(shape_numel(shape));
  is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(data.size() * sizeof(double)));
  if (!is) throw FormatError("MTK1: truncated payload");
  return Tensor(std::move(shape), std::move(data));
}

void save_mtk(const std::string& path, const Tensor& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  write_mtk(os, t);
  if (!os) throw FormatError("write failed for '" + path + "'");
}

Tensor load_mtk(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  try {
    return read_mtk(is);
  } catch (const FormatError& e) {
    throw FormatError(path + ": " + e.what());
  }
}

}  // namespace mpt
