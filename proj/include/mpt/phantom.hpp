#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mpt/config.hpp"
#include "mpt/metrics.hpp"
#include "mpt/morphpatch.hpp"
#include "mpt/tensor.hpp"

namespace mpt::phantom {

/// Synthetic vessel phantom parameters. Lengths are in pixels; curvature is
/// the amplitude of the sinusoidal perpendicular perturbation.
struct PhantomSpec {
  std::size_t size = 32;
  std::size_t tubes = 3;
  double radius_min = 1.0;
  double radius_max = 2.0;
  double curvature = 4.0;
  double bifurcation_prob = 0.5;
  double contrast = 1.0;
  double noise_sigma = 0.2;
  std::uint64_t seed = 0;

  void validate() const;

  /// `straight` (no curvature) or `curved` (thin, strongly bent tubes).
  static PhantomSpec preset(const std::string& name);
};

struct Phantom {
  Tensor image;  // [1,H,W]
  SegMask mask;  // labels {0,1}
  std::vector<metrics::BinaryImage> tubes;  // each tube with its branches, before noise
};

/// Marks every pixel whose center lies within `radius` of the polyline.
void render_tube(metrics::BinaryImage& img, const std::vector<Point2>& polyline, double radius);

Phantom generate(const PhantomSpec& spec);

/// Per-sample spec: same parameters, seed derived from (seed, split, index).
PhantomSpec sample_spec(const PhantomSpec& spec, int split, std::size_t index);

struct DatasetEntry {
  std::string split;  // "train" or "eval"
  std::string image;  // relative paths
  std::string mask;
};

/// Writes <out>/train/*, <out>/eval/* MTK1 pairs and <out>/manifest.txt.
std::vector<DatasetEntry> make_dataset(const PhantomSpec& spec, std::size_t n_train, std::size_t n_eval,
                                       const std::string& out_dir);

std::vector<DatasetEntry> read_manifest(const std::string& dir);

/// Keys: preset, size, tubes, radius_min, radius_max, curvature,
/// bifurcation_prob, contrast, noise_sigma, seed (n_train / n_eval are
/// accepted and read by the caller).
PhantomSpec spec_from_config(const KeyValueConfig& cfg);

}  // namespace mpt::phantom
