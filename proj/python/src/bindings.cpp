// Python bindings over the core library. Arrays are float64, C-contiguous.

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "mpt/diffeo.hpp"
#include "mpt/gradcheck.hpp"
#include "mpt/metrics.hpp"
#include "mpt/model.hpp"
#include "mpt/morphpatch.hpp"
#include "mpt/phantom.hpp"
#include "mpt/sca.hpp"

namespace py = pybind11;
using namespace mpt;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using Mask = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape s(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(s), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array a(std::vector<py::ssize_t>(t.shape().begin(), t.shape().end()));
  std::copy(t.ptr(), t.ptr() + t.size(), a.mutable_data());
  return a;
}

metrics::BinaryImage to_binary(const Mask& m) {
  if (m.ndim() != 2) throw ShapeError("expected a 2-D mask");
  metrics::BinaryImage b(static_cast<std::size_t>(m.shape(0)), static_cast<std::size_t>(m.shape(1)));
  for (py::ssize_t k = 0; k < m.size(); ++k) b.px[static_cast<std::size_t>(k)] = m.data()[k] ? 1 : 0;
  return b;
}

Mask from_binary(const metrics::BinaryImage& b) {
  Mask m({static_cast<py::ssize_t>(b.h), static_cast<py::ssize_t>(b.w)});
  std::copy(b.px.begin(), b.px.end(), m.mutable_data());
  return m;
}

CoreUpdate core_mode(const std::string& s) {
  if (s == "residual") return CoreUpdate::residual;
  if (s == "verbatim") return CoreUpdate::verbatim;
  throw ArgumentError("mode must be residual or verbatim, got '" + s + "'");
}

py::dict report_dict(const FdReport& r) {
  py::dict d;
  d["max_rel_err"] = r.max_rel_err;
  d["checked"] = r.checked;
  d["worst"] = r.worst_name;
  d["worst_index"] = r.worst_index;
  d["analytic"] = r.analytic;
  d["numeric"] = r.numeric;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Morph-patch transformer core";

  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<ArgumentError>(m, "ArgumentError", PyExc_ValueError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  m.def("load_mtk", [](const std::string& p) { return to_array(load_mtk(p)); }, py::arg("path"));
  m.def("save_mtk", [](const std::string& p, const Array& a) { save_mtk(p, to_tensor(a)); }, py::arg("path"),
        py::arg("array"));

  m.def("grid_sample", [](const Array& x, const Array& c) { return to_array(grid_sample(to_tensor(x), to_tensor(c))); },
        py::arg("x"), py::arg("coords"));
  m.def("warp", [](const Array& x, const Array& o) { return to_array(warp(to_tensor(x), to_tensor(o))); }, py::arg("x"),
        py::arg("offsets"));

  m.def(
      "exponentiate",
      [](const Array& v, int steps) { return to_array(exponentiate(VelocityField(to_tensor(v)), steps).offsets()); },
      py::arg("velocity"), py::arg("steps") = kDefaultSquaringSteps);
  m.def(
      "invert", [](const Array& v, int steps) { return to_array(invert(VelocityField(to_tensor(v)), steps).offsets()); },
      py::arg("velocity"), py::arg("steps") = kDefaultSquaringSteps);
  m.def(
      "compose",
      [](const Array& outer, const Array& inner) {
        return to_array(compose(DeformationField(to_tensor(outer)), DeformationField(to_tensor(inner))).offsets());
      },
      py::arg("outer"), py::arg("inner"));
  m.def(
      "jacobian_determinant",
      [](const Array& phi) { return to_array(jacobian_determinant(DeformationField(to_tensor(phi)))); },
      py::arg("offsets"));

  m.def(
      "deform_features",
      [](const Array& x, const Array& phi) {
        return to_array(deform_features(to_tensor(x), DeformationField(to_tensor(phi))));
      },
      py::arg("x"), py::arg("offsets"));
  m.def(
      "morph_patch_extract",
      [](const Array& x, const Array& phi, std::size_t patch) {
        const Tensor t = to_tensor(x);
        if (t.rank() != 3) throw ShapeError("x must be [C,H,W]");
        const auto g = make_patch_grid(t.dim(1), t.dim(2), patch, patch);
        return to_array(morph_patch_extract(t, DeformationField(to_tensor(phi)), g));
      },
      py::arg("x"), py::arg("offsets"), py::arg("patch"));

  m.def(
      "soft_assign",
      [](const Array& f, const Array& cores, double beta) {
        return to_array(soft_assign(to_tensor(f), ClusterState::derived(to_tensor(cores), beta)));
      },
      py::arg("features"), py::arg("cores"), py::arg("beta"));
  m.def(
      "soft_assign_gaussian",
      [](const Array& f, const Array& cores, double beta) {
        return to_array(soft_assign_gaussian(to_tensor(f), to_tensor(cores), beta));
      },
      py::arg("features"), py::arg("cores"), py::arg("beta"));
  m.def(
      "update_cores",
      [](const Array& f, const Array& cores, const Array& assign, const std::string& mode) {
        return to_array(update_cores(to_tensor(f), to_tensor(cores), to_tensor(assign), core_mode(mode)));
      },
      py::arg("features"), py::arg("cores"), py::arg("assign"), py::arg("mode") = "residual");

  m.def("skeletonize", [](const Mask& mk) { return from_binary(metrics::skeletonize(to_binary(mk))); },
        py::arg("mask"));
  m.def("cl_dice", [](const Mask& p, const Mask& g) { return metrics::cl_dice(to_binary(p), to_binary(g)); },
        py::arg("pred"), py::arg("gt"));
  m.def(
      "dice",
      [](const Mask& p, const Mask& g) {
        const auto bp = to_binary(p), bg = to_binary(g);
        auto seg = [](const metrics::BinaryImage& b) {
          Tensor t({b.h, b.w});
          for (std::size_t k = 0; k < b.px.size(); ++k) t[k] = b.px[k];
          return SegMask(t, 2);
        };
        return metrics::dice(seg(bp), seg(bg), 1);
      },
      py::arg("pred"), py::arg("gt"));

  m.def(
      "generate_phantom",
      [](const std::string& preset, std::uint64_t seed, std::size_t size, double noise_sigma) {
        auto s = phantom::PhantomSpec::preset(preset);
        s.seed = seed;
        s.size = size;
        s.noise_sigma = noise_sigma;
        const auto p = phantom::generate(s);
        return py::make_tuple(to_array(p.image), to_array(p.mask.labels()));
      },
      py::arg("preset") = "curved", py::arg("seed") = 0, py::arg("size") = 32, py::arg("noise_sigma") = 0.5);

  m.def("gradcheck_kernels", &gradcheck_kernels);
  m.def(
      "gradcheck", [](const std::string& k, std::uint64_t seed) { return report_dict(check_kernel(k, seed)); },
      py::arg("kernel"), py::arg("seed") = 0);

  py::class_<MPTNet>(m, "MPTNet")
      .def(py::init([](std::uint64_t seed, bool use_mp, bool use_sca, std::size_t base_channels,
                       std::size_t n_clusters) {
             MPTNetConfig cfg;
             cfg.use_mp = use_mp;
             cfg.use_sca = use_sca;
             cfg.base_channels = base_channels;
             cfg.n_clusters = n_clusters;
             return MPTNet(cfg, seed);
           }),
           py::arg("seed") = 0, py::arg("use_mp") = true, py::arg("use_sca") = true, py::arg("base_channels") = 16,
           py::arg("n_clusters") = kDefaultClusters)
      .def_static(
          "load",
          [](const std::string& ckpt) {
            const TrainConfig tc = train_config_from(KeyValueConfig::load(ckpt + ".cfg"));
            return MPTNet(tc.net, load_checkpoint(ckpt));
          },
          py::arg("checkpoint"))
      .def("forward", [](const MPTNet& n, const Array& x) { return to_array(n.forward(to_tensor(x))); },
           py::arg("image"))
      .def(
          "predict",
          [](const MPTNet& n, const Array& x) { return to_array(predict_labels(n.forward(to_tensor(x))).labels()); },
          py::arg("image"))
      .def(
          "deformation_fields",
          [](const MPTNet& n, const Array& x) {
            py::list out;
            for (const auto& f : n.deformation_fields(to_tensor(x))) out.append(to_array(f.offsets()));
            return out;
          },
          py::arg("image"))
      .def_property_readonly("parameter_count", [](const MPTNet& n) { return n.params().parameter_count(); })
      .def("parameter_names", [](const MPTNet& n) {
        std::vector<std::string> names;
        for (const auto& e : n.params().entries()) names.push_back(e.name);
        return names;
      });
}
