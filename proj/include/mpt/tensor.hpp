#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mpt {

/// Raised when tensor extents are incompatible with an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for invalid scalar arguments (step counts, axes, labels).
class ArgumentError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised for malformed files and non-finite values.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Dense row-major array of doubles.
///
/// A default-constructed Tensor is empty (rank 0, no data) and only serves
/// as a placeholder; every other constructor requires extents >= 1.
/// Values supplied from outside are checked for finiteness on construction;
/// kernels allocate outputs through the zero-filled constructor.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);
  Tensor(Shape shape, std::initializer_list<double> data);

  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

  bool empty() const noexcept { return data_.empty(); }
  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t dim(std::size_t axis) const;

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }

  double& operator[](std::size_t i) noexcept { return data_[i]; }
  double operator[](std::size_t i) const noexcept { return data_[i]; }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
  double& operator()(std::size_t i, std::size_t j, std::size_t k) {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }
  double operator()(std::size_t i, std::size_t j, std::size_t k) const {
    return data_[(i * shape_[1] + j) * shape_[2] + k];
  }

  const std::string& name() const noexcept { return name_; }
  void set_name(std::string n) { name_ = std::move(n); }

  /// Throws FormatError if any value is NaN or infinite.
  void validate() const;

  /// Same data, new extents; throws ShapeError if the element count differs.
  Tensor reshaped(Shape shape) const;

  void fill(double v);

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  Shape shape_;
  std::vector<double> data_;
  std::string name_;
};

/// Largest element count of any Tensor allocated since the last reset on
/// this thread. Used to check that kernels avoid quadratic intermediates.
namespace alloc_stats {
void reset();
std::size_t peak_elements();
}  // namespace alloc_stats

// ---- elementwise and reductions -------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
/// a += s * b
void axpy(Tensor& a, const Tensor& b, double s = 1.0);
double sum(const Tensor& a);
double max_abs(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

/// Smooth GELU, x * Phi(x).
Tensor gelu(const Tensor& x);

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
/// a^T b without materializing the transpose.
Tensor matmul_tn(const Tensor& a, const Tensor& b);
/// a b^T without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

/// [C,H,W] <-> [H*W, C]
Tensor to_tokens(const Tensor& x);
Tensor from_tokens(const Tensor& t, std::size_t h, std::size_t w);

// ---- normalization ----------------------------------------------------------

Tensor softmax(const Tensor& x, int axis);

inline constexpr double kLayerNormEps = 1e-5;

struct LayerNormCache {
  Tensor xhat;
  std::vector<double> inv_std;
};

/// Normalizes the last axis of x ([N, C]) then applies gamma/beta ([C]).
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = kLayerNormEps, LayerNormCache* cache = nullptr);

// ---- spatial kernels --------------------------------------------------------

/// Zero-padded cross-correlation. kernel is [Cout, Cin, k, k] with k odd.
/// With stride s the output has ceil(H/s) x ceil(W/s) pixels, output (i,j)
/// centered on input (i*s, j*s).
Tensor conv2d(const Tensor& x, const Tensor& kernel, const Tensor& bias, int stride = 1);

/// Bilinear (rank-3 input [C,H,W], coords [H',W',2]) or trilinear
/// (rank-4 input [C,D,H,W], coords [D',H',W',3]) sampling at absolute pixel
/// coordinates. Coordinates are clamped to the border.
Tensor grid_sample(const Tensor& x, const Tensor& coords);

/// Samples x ([C,H,W]) at p + offsets(p), offsets shaped [2,H',W'].
Tensor warp(const Tensor& x, const Tensor& offsets);

Tensor upsample_nearest2(const Tensor& x);
Tensor concat_channels(const Tensor& a, const Tensor& b);

// ---- MTK1 file format -------------------------------------------------------

void write_mtk(std::ostream& os, const Tensor& t);
Tensor read_mtk(std::istream& is);
void save_mtk(const std::string& path, const Tensor& t);
Tensor load_mtk(const std::string& path);

}  // namespace mpt
