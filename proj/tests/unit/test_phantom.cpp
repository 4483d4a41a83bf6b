#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>

#include "doctest.h"
#include "mpt/phantom.hpp"

using namespace mpt;
using namespace mpt::phantom;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpt_test_phantom_" + name);
  fs::remove_all(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("spec validation and presets") {
  PhantomSpec s;
  s.size = 16;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
  s = PhantomSpec{};
  s.radius_min = 0.5;
  CHECK_THROWS_AS(s.validate(), ArgumentError);
  CHECK(PhantomSpec::preset("straight").curvature == 0.0);
  CHECK(PhantomSpec::preset("curved").curvature > 0.0);
  CHECK_THROWS_AS(PhantomSpec::preset("wiggly"), ArgumentError);
}

TEST_CASE("straight tube area") {
  metrics::BinaryImage img(40, 40);
  render_tube(img, {{20.0, 10.0}, {20.0, 30.0}}, 2.0);
  const double n = static_cast<double>(img.count());
  CHECK(n >= 20.0 * 5.0 * 0.8);
  CHECK(n <= 20.0 * 5.0 * 1.2);
}

TEST_CASE("noise-free phantom image equals its mask") {
  PhantomSpec s = PhantomSpec::preset("curved");
  s.noise_sigma = 0.0;
  s.contrast = 1.0;
  s.seed = 5;
  const Phantom p = generate(s);
  CHECK(p.image.reshaped({s.size, s.size}) == p.mask.labels());
}

TEST_CASE("phantoms are deterministic, binary and tube-connected") {
  for (const char* preset : {"curved", "straight"}) {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      PhantomSpec s = PhantomSpec::preset(preset);
      s.seed = seed;
      const Phantom a = generate(s), b = generate(s);
      CHECK(a.image == b.image);
      CHECK(a.mask.labels() == b.mask.labels());
      for (double v : a.mask.labels().data()) CHECK((v == 0.0 || v == 1.0));
      REQUIRE(a.tubes.size() == s.tubes);
      for (const auto& t : a.tubes) {
        CHECK(t.count() > 0);
        CHECK(metrics::count_components(t) == 1);
      }
    }
  }
}

TEST_CASE("dataset layout and byte-for-byte regeneration") {
  PhantomSpec s = PhantomSpec::preset("curved");
  s.seed = 3;
  const fs::path a = scratch("a"), b = scratch("b");
  const auto entries = make_dataset(s, 8, 2, a.string());
  make_dataset(s, 8, 2, b.string());
  CHECK(entries.size() == 10);
  std::size_t images = 0, masks = 0;
  for (const auto& e : fs::directory_iterator(a / "train")) {
    const auto name = e.path().filename().string();
    images += name.starts_with("image_");
    masks += name.starts_with("mask_");
    CHECK(slurp(e.path()) == slurp(b / "train" / name));
  }
  CHECK(images == 8);
  CHECK(masks == 8);
  const auto manifest = read_manifest(a.string());
  std::size_t train_lines = 0;
  for (const auto& e : manifest) train_lines += e.split == "train";
  CHECK(train_lines == 8);
  CHECK(slurp(a / "manifest.txt") == slurp(b / "manifest.txt"));
  const Tensor mask = load_mtk((a / manifest[0].mask).string());
  for (double v : mask.data()) CHECK((v == 0.0 || v == 1.0));
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("manifest errors") {
  const fs::path d = scratch("bad");
  fs::create_directories(d);
  CHECK_THROWS_AS(read_manifest(d.string()), FormatError);
  std::ofstream(d / "manifest.txt") << "test a b\n";
  CHECK_THROWS_AS(read_manifest(d.string()), FormatError);
  fs::remove_all(d);
}

TEST_CASE("config keys") {
  std::istringstream ok("preset = straight\nsize = 48\nseed = 9\n");
  const auto s = spec_from_config(KeyValueConfig::parse(ok, "ok"));
  CHECK(s.size == 48);
  CHECK(s.seed == 9);
  CHECK(s.curvature == 0.0);
  std::istringstream bad("preset = curved\ncolour = red\n");
  CHECK_THROWS_AS(spec_from_config(KeyValueConfig::parse(bad, "bad")), ArgumentError);
}
