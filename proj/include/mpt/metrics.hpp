#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpt/tensor.hpp"

namespace mpt {

/// Label raster [H,W] with integer labels in [0, num_classes).
class SegMask {
 public:
  SegMask() = default;
  SegMask(Tensor labels, std::size_t num_classes);
  SegMask(std::size_t h, std::size_t w, std::size_t num_classes);

  const Tensor& labels() const noexcept { return labels_; }
  std::size_t num_classes() const noexcept { return classes_; }
  std::size_t height() const { return labels_.dim(0); }
  std::size_t width() const { return labels_.dim(1); }
  int at(std::size_t i, std::size_t j) const { return static_cast<int>(labels_(i, j)); }
  void set(std::size_t i, std::size_t j, int label);

  /// Binary raster (0/1 bytes) of one class, row-major.
  std::vector<std::uint8_t> binary(int cls) const;

 private:
  Tensor labels_;
  std::size_t classes_ = 0;
};

namespace metrics {

/// Binary raster stored row-major as 0/1 bytes.
struct BinaryImage {
  std::size_t h = 0, w = 0;
  std::vector<std::uint8_t> px;

  BinaryImage() = default;
  BinaryImage(std::size_t h_, std::size_t w_) : h(h_), w(w_), px(h_ * w_, 0) {}
  std::uint8_t operator()(std::size_t i, std::size_t j) const { return px[i * w + j]; }
  std::uint8_t& operator()(std::size_t i, std::size_t j) { return px[i * w + j]; }
  std::size_t count() const;
  bool operator==(const BinaryImage&) const = default;

  static BinaryImage from_mask(const SegMask& m, int cls);
  static BinaryImage from_rows(const std::vector<std::string>& rows);  // '#' / '1' = foreground
};

/// Empty prediction and empty ground truth score 1.
double dice(const SegMask& pred, const SegMask& gt, int cls);
double iou(const SegMask& pred, const SegMask& gt, int cls);
/// Mean IoU over foreground classes 1..num_classes-1.
double miou(const SegMask& pred, const SegMask& gt);

/// Zhang-Suen two-subiteration thinning. Candidates of each subiteration are
/// marked in parallel and then deleted one at a time, re-checking the
/// deletion conditions against the current raster, which keeps every
/// 8-connected component intact (2x2 blocks are reduced instead of erased).
/// A final pass removes simple points that still sit in a 2x2 block.
BinaryImage skeletonize(const BinaryImage& mask);

/// True if no 2x2 block of the raster is entirely foreground.
bool is_thin(const BinaryImage& img);

/// Number of 8-connected foreground components.
std::size_t count_components(const BinaryImage& img);

double cl_dice(const BinaryImage& pred, const BinaryImage& gt);
/// Mean clDice over foreground classes.
double cl_dice(const SegMask& pred, const SegMask& gt);

}  // namespace metrics
}  // namespace mpt
