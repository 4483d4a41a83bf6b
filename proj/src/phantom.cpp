#include "mpt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

namespace mpt::phantom {

namespace fs = std::filesystem;

void PhantomSpec::validate() const {
  if (size < 32) throw ArgumentError("PhantomSpec: size must be >= 32, got " + std::to_string(size));
  if (tubes == 0) throw ArgumentError("PhantomSpec: tubes must be >= 1");
  if (!(radius_min >= 1.0) || !(radius_max >= radius_min)) {
    throw ArgumentError("PhantomSpec: need 1 <= radius_min <= radius_max");
  }
  if (!(curvature >= 0.0)) throw ArgumentError("PhantomSpec: curvature must be >= 0");
  if (!(bifurcation_prob >= 0.0 && bifurcation_prob <= 1.0)) {
    throw ArgumentError("PhantomSpec: bifurcation_prob must lie in [0,1]");
  }
  if (!(noise_sigma >= 0.0)) throw ArgumentError("PhantomSpec: noise_sigma must be >= 0");
  if (!std::isfinite(contrast)) throw ArgumentError("PhantomSpec: contrast must be finite");
}

PhantomSpec PhantomSpec::preset(const std::string& name) {
  PhantomSpec s;
  if (name == "curved") {
    s.curvature = 4.0;
  } else if (name == "straight") {
    s.curvature = 0.0;
  } else {
    throw ArgumentError("unknown phantom preset '" + name + "' (expected straight or curved)");
  }
  return s;
}

namespace {

double segment_dist2(Point2 p, Point2 a, Point2 b) {
  const double dr = b.row - a.row, dc = b.col - a.col;
  const double len2 = dr * dr + dc * dc;
  double t = 0.0;
  if (len2 > 0.0) t = std::clamp(((p.row - a.row) * dr + (p.col - a.col) * dc) / len2, 0.0, 1.0);
  const double er = a.row + t * dr - p.row, ec = a.col + t * dc - p.col;
  return er * er + ec * ec;
}

// Sinusoidally perturbed straight path from `start` along `dir` for `length`
// pixels, sampled every 0.25 px and clamped into the image.
std::vector<Point2> perturbed_path(Point2 start, double angle, double length, double amplitude, double cycles,
                                   double phase, double extent) {
  const double ur = std::sin(angle), uc = std::cos(angle);
  const double nr = uc, nc = -ur;
  const auto steps = static_cast<std::size_t>(std::ceil(length / 0.25));
  std::vector<Point2> pts;
  pts.reserve(steps + 1);
  for (std::size_t k = 0; k <= steps; ++k) {
    const double t = static_cast<double>(k) / static_cast<double>(steps);
    // Offset vanishes at t = 0 so branches stay attached to their parent.
    const double off = amplitude * (std::sin(2.0 * std::numbers::pi * cycles * t + phase) - std::sin(phase));
    Point2 p{start.row + t * length * ur + off * nr, start.col + t * length * uc + off * nc};
    p.row = std::clamp(p.row, 0.0, extent - 1.0);
    p.col = std::clamp(p.col, 0.0, extent - 1.0);
    pts.push_back(p);
  }
  return pts;
}

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

void render_tube(metrics::BinaryImage& img, const std::vector<Point2>& polyline, double radius) {
  if (polyline.empty()) return;
  const double r2 = radius * radius;
  auto mark = [&](Point2 a, Point2 b) {
    const long i0 = std::max(0L, static_cast<long>(std::floor(std::min(a.row, b.row) - radius)));
    const long i1 = std::min(static_cast<long>(img.h) - 1, static_cast<long>(std::ceil(std::max(a.row, b.row) + radius)));
    const long j0 = std::max(0L, static_cast<long>(std::floor(std::min(a.col, b.col) - radius)));
    const long j1 = std::min(static_cast<long>(img.w) - 1, static_cast<long>(std::ceil(std::max(a.col, b.col) + radius)));
    for (long i = i0; i <= i1; ++i)
      for (long j = j0; j <= j1; ++j)
        if (segment_dist2({static_cast<double>(i), static_cast<double>(j)}, a, b) <= r2) {
          img(static_cast<std::size_t>(i), static_cast<std::size_t>(j)) = 1;
        }
  };
  if (polyline.size() == 1) mark(polyline[0], polyline[0]);
  for (std::size_t k = 0; k + 1 < polyline.size(); ++k) mark(polyline[k], polyline[k + 1]);
}

Phantom generate(const PhantomSpec& spec) {
  spec.validate();
  const std::size_t n = spec.size;
  const double ext = static_cast<double>(n);
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * unit(rng); };

  Phantom out;
  metrics::BinaryImage all(n, n);
  for (std::size_t t = 0; t < spec.tubes; ++t) {
    metrics::BinaryImage tube(n, n);
    const double angle = uniform(0.0, std::numbers::pi);
    const Point2 center{uniform(0.3, 0.7) * (ext - 1.0), uniform(0.3, 0.7) * (ext - 1.0)};
    const double length = 0.9 * ext;
    const Point2 start{center.row - 0.5 * length * std::sin(angle), center.col - 0.5 * length * std::cos(angle)};
    const double radius = uniform(spec.radius_min, spec.radius_max);
    const double cycles = uniform(1.0, 2.0);
    const double phase = uniform(0.0, 2.0 * std::numbers::pi);
    const auto path = perturbed_path(start, angle, length, spec.curvature, cycles, phase, ext);
    render_tube(tube, path, radius);

    if (unit(rng) < spec.bifurcation_prob) {
      const std::size_t at = static_cast<std::size_t>(uniform(0.3, 0.7) * static_cast<double>(path.size() - 1));
      const double turn = uniform(std::numbers::pi / 6.0, std::numbers::pi / 3.0) * (unit(rng) < 0.5 ? -1.0 : 1.0);
      const double blen = uniform(0.3, 0.5) * ext;
      const double bphase = uniform(0.0, 2.0 * std::numbers::pi);
      const auto branch = perturbed_path(path[at], angle + turn, blen, 0.5 * spec.curvature, 1.0, bphase, ext);
      render_tube(tube, branch, std::max(spec.radius_min, 0.75 * radius));
    }
    for (std::size_t k = 0; k < all.px.size(); ++k) all.px[k] |= tube.px[k];
    out.tubes.push_back(std::move(tube));
  }

  std::normal_distribution<double> noise(0.0, 1.0);
  Tensor image({1, n, n});
  Tensor labels({n, n});
  for (std::size_t k = 0; k < n * n; ++k) {
    labels[k] = all.px[k];
    const double e = spec.noise_sigma > 0.0 ? spec.noise_sigma * noise(rng) : 0.0;
    image[k] = spec.contrast * all.px[k] + e;
  }
  out.image = std::move(image);
  out.mask = SegMask(std::move(labels), 2);
  return out;
}

PhantomSpec sample_spec(const PhantomSpec& spec, int split, std::size_t index) {
  PhantomSpec s = spec;
  s.seed = mix(mix(spec.seed) ^ (static_cast<std::uint64_t>(split) << 40) ^ index);
  return s;
}

std::vector<DatasetEntry> make_dataset(const PhantomSpec& spec, std::size_t n_train, std::size_t n_eval,
                                       const std::string& out_dir) {
  spec.validate();
  const fs::path root(out_dir);
  std::vector<DatasetEntry> entries;
  const std::pair<const char*, std::size_t> splits[] = {{"train", n_train}, {"eval", n_eval}};
  for (int s = 0; s < 2; ++s) {
    const auto [name, count] = splits[s];
    std::error_code ec;
    fs::create_directories(root / name, ec);
    if (ec) throw FormatError("cannot create '" + (root / name).string() + "': " + ec.message());
    for (std::size_t i = 0; i < count; ++i) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%04zu.mtk", i);
      DatasetEntry e{name, std::string(name) + "/image_" + buf, std::string(name) + "/mask_" + buf};
      const Phantom p = generate(sample_spec(spec, s, i));
      save_mtk((root / e.image).string(), p.image);
      save_mtk((root / e.mask).string(), p.mask.labels());
      entries.push_back(std::move(e));
    }
  }
  std::ofstream man(root / "manifest.txt", std::ios::binary);
  if (!man) throw FormatError("cannot write manifest in '" + out_dir + "'");
  for (const auto& e : entries) man << e.split << ' ' << e.image << ' ' << e.mask << '\n';
  if (!man) throw FormatError("write failed for manifest in '" + out_dir + "'");
  return entries;
}

std::vector<DatasetEntry> read_manifest(const std::string& dir) {
  const fs::path path = fs::path(dir) / "manifest.txt";
  std::ifstream is(path);
  if (!is) throw FormatError("cannot open '" + path.string() + "'");
  std::vector<DatasetEntry> entries;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ls(line);
    DatasetEntry e;
    std::string extra;
    if (!(ls >> e.split >> e.image >> e.mask) || (ls >> extra) || (e.split != "train" && e.split != "eval")) {
      throw FormatError(path.string() + ":" + std::to_string(lineno) + ": expected '<train|eval> <image> <mask>'");
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

PhantomSpec spec_from_config(const KeyValueConfig& cfg) {
  cfg.require_known({"preset", "size", "tubes", "radius_min", "radius_max", "curvature", "bifurcation_prob",
                     "contrast", "noise_sigma", "seed", "n_train", "n_eval"});
  PhantomSpec s = PhantomSpec::preset(cfg.get_string("preset", "curved"));
  auto non_negative = [&](const char* key, long fallback) {
    const long v = cfg.get_int(key, fallback);
    if (v < 0) throw ArgumentError(std::string("config key '") + key + "' must be >= 0");
    return v;
  };
  s.size = static_cast<std::size_t>(non_negative("size", static_cast<long>(s.size)));
  s.tubes = static_cast<std::size_t>(non_negative("tubes", static_cast<long>(s.tubes)));
  s.radius_min = cfg.get_double("radius_min", s.radius_min);
  s.radius_max = cfg.get_double("radius_max", s.radius_max);
  s.curvature = cfg.get_double("curvature", s.curvature);
  s.bifurcation_prob = cfg.get_double("bifurcation_prob", s.bifurcation_prob);
  s.contrast = cfg.get_double("contrast", s.contrast);
  s.noise_sigma = cfg.get_double("noise_sigma", s.noise_sigma);
  s.seed = static_cast<std::uint64_t>(non_negative("seed", 0));
  s.validate();
  return s;
}

}  // namespace mpt::phantom
