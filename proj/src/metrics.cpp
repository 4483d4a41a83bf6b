#include "mpt/metrics.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <string>

namespace mpt {

SegMask::SegMask(Tensor labels, std::size_t num_classes) : labels_(std::move(labels)), classes_(num_classes) {
  if (labels_.rank() != 2) throw ShapeError("SegMask: labels must be [H,W], got " + shape_str(labels_.shape()));
  if (num_classes == 0) throw ArgumentError("SegMask: num_classes must be >= 1");
  for (double v : labels_.data()) {
    if (v < 0 || v != std::floor(v) || v >= static_cast<double>(num_classes)) {
      throw ArgumentError("SegMask: label " + std::to_string(v) + " outside [0, " + std::to_string(num_classes) +
                          ")");
    }
  }
}

SegMask::SegMask(std::size_t h, std::size_t w, std::size_t num_classes)
    : SegMask(Tensor({h, w}), num_classes) {}

void SegMask::set(std::size_t i, std::size_t j, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= classes_) throw ArgumentError("SegMask: label out of range");
  labels_(i, j) = label;
}

std::vector<std::uint8_t> SegMask::binary(int cls) const {
  std::vector<std::uint8_t> out(labels_.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<int>(labels_[i]) == cls ? 1 : 0;
  return out;
}

namespace metrics {

std::size_t BinaryImage::count() const {
  std::size_t n = 0;
  for (auto v : px) n += v ? 1 : 0;
  return n;
}

BinaryImage BinaryImage::from_mask(const SegMask& m, int cls) {
  BinaryImage b(m.height(), m.width());
  b.px = m.binary(cls);
  return b;
}

BinaryImage BinaryImage::from_rows(const std::vector<std::string>& rows) {
  if (rows.empty()) throw ShapeError("BinaryImage::from_rows: no rows");
  BinaryImage b(rows.size(), rows[0].size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != b.w) throw ShapeError("BinaryImage::from_rows: ragged rows");
    for (std::size_t j = 0; j < b.w; ++j) b(i, j) = (rows[i][j] == '#' || rows[i][j] == '1') ? 1 : 0;
  }
  return b;
}

namespace {

void require_match(const SegMask& a, const SegMask& b, int cls) {
  if (a.labels().shape() != b.labels().shape()) throw ShapeError("metric: mask shapes differ");
  if (cls < 0 || static_cast<std::size_t>(cls) >= std::max(a.num_classes(), b.num_classes())) {
    throw ArgumentError("metric: class " + std::to_string(cls) + " out of range");
  }
}

struct Overlap {
  std::size_t inter = 0, pred = 0, gt = 0;
};

Overlap overlap(const SegMask& pred, const SegMask& gt, int cls) {
  require_match(pred, gt, cls);
  Overlap o;
  const auto& p = pred.labels();
  const auto& g = gt.labels();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = static_cast<int>(p[i]) == cls, b = static_cast<int>(g[i]) == cls;
    o.pred += a;
    o.gt += b;
    o.inter += a && b;
  }
  return o;
}

}  // namespace

double dice(const SegMask& pred, const SegMask& gt, int cls) {
  const auto o = overlap(pred, gt, cls);
  if (o.pred + o.gt == 0) return 1.0;
  return 2.0 * static_cast<double>(o.inter) / static_cast<double>(o.pred + o.gt);
}

double iou(const SegMask& pred, const SegMask& gt, int cls) {
  const auto o = overlap(pred, gt, cls);
  const std::size_t uni = o.pred + o.gt - o.inter;
  if (uni == 0) return 1.0;
  return static_cast<double>(o.inter) / static_cast<double>(uni);
}

double miou(const SegMask& pred, const SegMask& gt) {
  const std::size_t k = std::max(pred.num_classes(), gt.num_classes());
  if (k < 2) throw ArgumentError("miou: need at least one foreground class");
  double s = 0.0;
  for (std::size_t c = 1; c < k; ++c) s += iou(pred, gt, static_cast<int>(c));
  return s / static_cast<double>(k - 1);
}

// ---- thinning ---------------------------------------------------------------

namespace {

// Ring order P2..P9: N, NE, E, SE, S, SW, W, NW.
constexpr std::array<int, 8> kDi = {-1, -1, 0, 1, 1, 1, 0, -1};
constexpr std::array<int, 8> kDj = {0, 1, 1, 1, 0, -1, -1, -1};

std::array<std::uint8_t, 8> ring(const BinaryImage& img, std::size_t i, std::size_t j) {
  std::array<std::uint8_t, 8> r{};
  for (int k = 0; k < 8; ++k) {
    const long ii = static_cast<long>(i) + kDi[k], jj = static_cast<long>(j) + kDj[k];
    if (ii >= 0 && jj >= 0 && ii < static_cast<long>(img.h) && jj < static_cast<long>(img.w)) {
      r[k] = img(static_cast<std::size_t>(ii), static_cast<std::size_t>(jj));
    }
  }
  return r;
}

bool zhang_suen_deletable(const BinaryImage& img, std::size_t i, std::size_t j, int pass) {
  if (!img(i, j)) return false;
  const auto p = ring(img, i, j);
  int b = 0, a = 0;
  for (int k = 0; k < 8; ++k) {
    b += p[k];
    a += (!p[k] && p[(k + 1) % 8]) ? 1 : 0;
  }
  if (b < 2 || b > 6 || a != 1) return false;
  const int n = p[0], e = p[2], s = p[4], w = p[6];
  if (pass == 0) return n * e * s == 0 && e * s * w == 0;
  return n * e * w == 0 && n * s * w == 0;
}

// 8-connected foreground components and 4-connected background components
// (touching the center's 4-neighbours) within the 3x3 neighbourhood.
bool is_simple(const BinaryImage& img, std::size_t i, std::size_t j) {
  const auto p = ring(img, i, j);
  int b = 0;
  for (auto v : p) b += v;
  if (b < 2) return false;  // endpoints and isolated pixels stay
  auto components = [&](bool fg, bool eight) {
    std::array<int, 8> label{};
    label.fill(-1);
    int count = 0;
    for (int s = 0; s < 8; ++s) {
      if ((p[s] != 0) != fg || label[s] >= 0) continue;
      if (!fg && s % 2 == 1) continue;  // background components must touch a 4-neighbour
      label[s] = count;
      std::array<int, 8> stack{};
      int top = 0;
      stack[top++] = s;
      while (top) {
        const int u = stack[--top];
        for (int v = 0; v < 8; ++v) {
          if (label[v] >= 0 || (p[v] != 0) != fg) continue;
          const int di = std::abs(kDi[u] - kDi[v]), dj = std::abs(kDj[u] - kDj[v]);
          const bool adj = eight ? (di <= 1 && dj <= 1) : (di + dj == 1);
          if (adj) {
            label[v] = count;
            stack[top++] = v;
          }
        }
      }
      ++count;
    }
    return count;
  };
  return components(true, true) == 1 && components(false, false) == 1;
}

bool in_full_block(const BinaryImage& img, std::size_t i, std::size_t j) {
  for (int di = -1; di <= 0; ++di) {
    for (int dj = -1; dj <= 0; ++dj) {
      const long r = static_cast<long>(i) + di, c = static_cast<long>(j) + dj;
      if (r < 0 || c < 0 || r + 1 >= static_cast<long>(img.h) || c + 1 >= static_cast<long>(img.w)) continue;
      const auto ur = static_cast<std::size_t>(r), uc = static_cast<std::size_t>(c);
      if (img(ur, uc) && img(ur + 1, uc) && img(ur, uc + 1) && img(ur + 1, uc + 1)) return true;
    }
  }
  return false;
}

}  // namespace

BinaryImage skeletonize(const BinaryImage& mask) {
  BinaryImage img = mask;
  for (auto& v : img.px) v = v ? 1 : 0;
  std::vector<std::size_t> candidates;
  bool changed = true;
  while (changed) {
    changed = false;
    for (int pass = 0; pass < 2; ++pass) {
      candidates.clear();
      for (std::size_t i = 0; i < img.h; ++i)
        for (std::size_t j = 0; j < img.w; ++j)
          if (zhang_suen_deletable(img, i, j, pass)) candidates.push_back(i * img.w + j);
      for (std::size_t idx : candidates) {
        const std::size_t i = idx / img.w, j = idx % img.w;
        if (zhang_suen_deletable(img, i, j, pass)) {
          img.px[idx] = 0;
          changed = true;
        }
      }
    }
    if (changed) continue;
    for (std::size_t i = 0; i < img.h; ++i) {
      for (std::size_t j = 0; j < img.w; ++j) {
        if (img(i, j) && in_full_block(img, i, j) && is_simple(img, i, j)) {
          img(i, j) = 0;
          changed = true;
        }
      }
    }
  }
  return img;
}

bool is_thin(const BinaryImage& img) {
  for (std::size_t i = 0; i + 1 < img.h; ++i)
    for (std::size_t j = 0; j + 1 < img.w; ++j)
      if (img(i, j) && img(i + 1, j) && img(i, j + 1) && img(i + 1, j + 1)) return false;
  return true;
}

std::size_t count_components(const BinaryImage& img) {
  std::vector<std::uint8_t> seen(img.px.size(), 0);
  std::vector<std::size_t> stack;
  std::size_t count = 0;
  for (std::size_t s = 0; s < img.px.size(); ++s) {
    if (!img.px[s] || seen[s]) continue;
    ++count;
    seen[s] = 1;
    stack.push_back(s);
    while (!stack.empty()) {
      const std::size_t u = stack.back();
      stack.pop_back();
      const long ui = static_cast<long>(u / img.w), uj = static_cast<long>(u % img.w);
      for (int k = 0; k < 8; ++k) {
        const long ii = ui + kDi[k], jj = uj + kDj[k];
        if (ii < 0 || jj < 0 || ii >= static_cast<long>(img.h) || jj >= static_cast<long>(img.w)) continue;
        const std::size_t v = static_cast<std::size_t>(ii) * img.w + static_cast<std::size_t>(jj);
        if (img.px[v] && !seen[v]) {
          seen[v] = 1;
          stack.push_back(v);
        }
      }
    }
  }
  return count;
}

double cl_dice(const BinaryImage& pred, const BinaryImage& gt) {
  if (pred.h != gt.h || pred.w != gt.w) throw ShapeError("cl_dice: mask shapes differ");
  const BinaryImage sp = skeletonize(pred), sg = skeletonize(gt);
  const std::size_t np = sp.count(), ng = sg.count();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  std::size_t hit_p = 0, hit_g = 0;
  for (std::size_t i = 0; i < sp.px.size(); ++i) {
    hit_p += sp.px[i] && gt.px[i];
    hit_g += sg.px[i] && pred.px[i];
  }
  const double tprec = static_cast<double>(hit_p) / static_cast<double>(np);
  const double tsens = static_cast<double>(hit_g) / static_cast<double>(ng);
  if (tprec + tsens == 0.0) return 0.0;
  return 2.0 * tprec * tsens / (tprec + tsens);
}

double cl_dice(const SegMask& pred, const SegMask& gt) {
  const std::size_t k = std::max(pred.num_classes(), gt.num_classes());
  if (k < 2) throw ArgumentError("cl_dice: need at least one foreground class");
  if (pred.labels().shape() != gt.labels().shape()) throw ShapeError("cl_dice: mask shapes differ");
  double s = 0.0;
  for (std::size_t c = 1; c < k; ++c) {
    s += cl_dice(BinaryImage::from_mask(pred, static_cast<int>(c)), BinaryImage::from_mask(gt, static_cast<int>(c)));
  }
  return s / static_cast<double>(k - 1);
}

}  // namespace metrics
}  // namespace mpt
