#include "mpt/pgm.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

namespace mpt {

void save_pgm(const std::string& path, const Tensor& img) {
  if (img.rank() != 2) throw ShapeError("save_pgm: expected [H,W], got " + shape_str(img.shape()));
  img.validate();
  const auto [lo, hi] = std::minmax_element(img.data().begin(), img.data().end());
  const double range = *hi - *lo;
  std::vector<unsigned char> px(img.size(), 0);
  if (range > 0.0) {
    for (std::size_t i = 0; i < img.size(); ++i) {
      px[i] = static_cast<unsigned char>(std::lround(255.0 * (img[i] - *lo) / range));
    }
  }
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  os << "P5\n" << img.dim(1) << " " << img.dim(0) << "\n255\n";
  os.write(reinterpret_cast<const char*>(px.data()), static_cast<std::streamsize>(px.size()));
  if (!os) throw FormatError("write failed for '" + path + "'");
}

}  // namespace mpt
