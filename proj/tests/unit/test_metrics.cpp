#include <random>

#include "doctest.h"
#include "mpt/metrics.hpp"
#include "support.hpp"

using namespace mpt;
using namespace mpt::metrics;

namespace {

SegMask mask_from(const BinaryImage& b) {
  Tensor t({b.h, b.w});
  for (std::size_t k = 0; k < b.px.size(); ++k) t[k] = b.px[k];
  return SegMask(t, 2);
}

bool subset(const BinaryImage& a, const BinaryImage& b) {
  for (std::size_t k = 0; k < a.px.size(); ++k)
    if (a.px[k] && !b.px[k]) return false;
  return true;
}

}  // namespace

TEST_CASE("segmentation mask validation") {
  CHECK_THROWS(SegMask(Tensor({2, 2}, {0, 1, 2, 0}), 2));
  CHECK_THROWS(SegMask(Tensor({2, 2}, {0, 0.5, 1, 0}), 2));
  CHECK_NOTHROW(SegMask(Tensor({2, 2}, {0, 1, 2, 0}), 3));
}

TEST_CASE("dice and iou examples") {
  const auto p = mask_from(BinaryImage::from_rows({"##..", "##..", "....", "...."}));
  const auto g = mask_from(BinaryImage::from_rows({".##.", ".##.", "....", "...."}));
  CHECK(dice(p, g, 1) == 0.5);
  CHECK(iou(p, g, 1) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(dice(p, p, 1) == 1.0);
  CHECK(iou(p, p, 1) == 1.0);
  const auto far = mask_from(BinaryImage::from_rows({"....", "....", "..##", "..##"}));
  CHECK(dice(p, far, 1) == 0.0);
  CHECK(iou(p, far, 1) == 0.0);
  CHECK(miou(p, g) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("metric bounds and symmetry") {
  std::mt19937_64 rng(61);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = mpt::testing::random_mask(24, 24, rng), b = mpt::testing::random_mask(24, 24, rng);
    const auto pa = mask_from(a), pb = mask_from(b);
    const double d = dice(pa, pb, 1), j = iou(pa, pb, 1), c = cl_dice(a, b);
    CHECK(d >= 0.0);
    CHECK(d <= 1.0);
    CHECK(j >= 0.0);
    CHECK(d >= j);
    CHECK(c >= 0.0);
    CHECK(c <= 1.0);
    CHECK(d == dice(pb, pa, 1));
    CHECK(c == cl_dice(b, a));
  }
}

TEST_CASE("skeleton examples") {
  const auto line = BinaryImage::from_rows({".......", ".#####.", "......."});
  CHECK(skeletonize(line) == line);
  const BinaryImage empty(6, 6);
  CHECK(skeletonize(empty) == empty);

  // Filled 5x5 square with a one-pixel frame; the expected raster comes from
  // running the thinning rules by hand on this grid.
  const auto square = BinaryImage::from_rows({".......", ".#####.", ".#####.", ".#####.", ".#####.", ".#####.", "......."});
  const auto skel = skeletonize(square);
  CHECK(skel == BinaryImage::from_rows({".......", ".......", ".......", "...#...", "...#...", ".......", "......."}));
  CHECK(subset(skel, square));
  CHECK(is_thin(skel));
  CHECK(count_components(skel) == 1);
}

TEST_CASE("skeletonize is idempotent, thin and component-preserving") {
  std::mt19937_64 rng(62);
  for (int trial = 0; trial < 200; ++trial) {
    const auto m = mpt::testing::random_mask(32, 32, rng);
    const auto s = skeletonize(m);
    CHECK(subset(s, m));
    CHECK(skeletonize(s) == s);
    CHECK(count_components(s) == count_components(m));
  }
}

TEST_CASE("component counter") {
  CHECK(count_components(BinaryImage::from_rows({"#..", ".#.", "..#"})) == 1);
  CHECK(count_components(BinaryImage::from_rows({"#.#", "...", "#.#"})) == 4);
  CHECK(count_components(BinaryImage(3, 3)) == 0);
}

TEST_CASE("clDice examples") {
  std::string full(22, '.'), gap(22, '.');
  for (std::size_t j = 1; j <= 20; ++j) full[j] = '#';
  gap = full;
  for (std::size_t j = 16; j <= 20; ++j) gap[j] = '.';
  const std::string blank(22, '.');
  const auto gt = BinaryImage::from_rows({blank, full, blank});
  const auto pred = BinaryImage::from_rows({blank, gap, blank});
  CHECK(skeletonize(gt) == gt);
  CHECK(skeletonize(pred) == pred);
  CHECK(cl_dice(pred, gt) == doctest::Approx(2.0 * 0.75 / 1.75).epsilon(1e-15));
  CHECK(cl_dice(gt, gt) == 1.0);

  const auto a = BinaryImage::from_rows({"#####", ".....", ".....", ".....", "....."});
  const auto b = BinaryImage::from_rows({".....", ".....", ".....", ".....", "#####"});
  CHECK(cl_dice(a, b) == 0.0);
  CHECK(cl_dice(BinaryImage(4, 4), BinaryImage(4, 4)) == 1.0);
  CHECK(cl_dice(a, BinaryImage(5, 5)) == 0.0);
  CHECK(cl_dice(mask_from(gt), mask_from(gt)) == 1.0);
}
