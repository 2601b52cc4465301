#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fdseg/data.hpp"
#include "fdseg/experiments.hpp"
#include "fdseg/theory.hpp"
#include "fdseg/trainer.hpp"
#include "fdseg/unet.hpp"

namespace py = pybind11;
using namespace fdseg;

namespace {

py::array_t<float> plane(const std::vector<float>& v, int h, int w) {
  py::array_t<float> a({h, w});
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

std::vector<double> flat(const py::array_t<double, py::array::c_style | py::array::forcecast>& a) {
  return {a.data(), a.data() + a.size()};
}

py::dict sample_dict(const SiteSample& s) {
  py::dict d;
  d["id"] = s.id;
  d["source"] = s.source == Source::Base ? "base" : "novel";
  d["image"] = plane(s.image, s.height, s.width);
  d["mask"] = plane(s.mask, s.height, s.width);
  return d;
}

}  // namespace

PYBIND11_MODULE(_fdseg, m) {
  m.doc() = "Feature-discrepancy segmentation kit";
  m.attr("__version__") = FDSEG_VERSION;

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);

  py::class_<SiteConfig>(m, "SiteConfig")
      .def(py::init<>())
      .def_readwrite("name", &SiteConfig::name)
      .def_readwrite("fg_intensity_mean", &SiteConfig::fg_intensity_mean)
      .def_readwrite("bg_intensity_mean", &SiteConfig::bg_intensity_mean)
      .def_readwrite("texture_sigma", &SiteConfig::texture_sigma)
      .def_readwrite("blur_radius", &SiteConfig::blur_radius)
      .def_readwrite("min_shapes", &SiteConfig::min_shapes)
      .def_readwrite("max_shapes", &SiteConfig::max_shapes)
      .def_readwrite("image_height", &SiteConfig::image_height)
      .def_readwrite("image_width", &SiteConfig::image_width);
  m.def("default_base_site", &default_base_site);
  m.def("default_novel_site", &default_novel_site);
  m.def(
      "generate_site",
      [](const SiteConfig& c, int n, std::uint64_t seed) {
        py::list out;
        for (const auto& s : generate_site(c, n, seed)) out.append(sample_dict(s));
        return out;
      },
      py::arg("config"), py::arg("n"), py::arg("seed") = 0, "List of {id, source, image, mask} dicts.");

  py::class_<UNetConfig>(m, "UNetConfig")
      .def(py::init<>())
      .def_readwrite("depth", &UNetConfig::depth)
      .def_readwrite("base_channels", &UNetConfig::base_channels)
      .def_readwrite("input_height", &UNetConfig::input_height)
      .def_readwrite("input_width", &UNetConfig::input_width);

  py::class_<UNet>(m, "UNet")
      .def_property_readonly("parameter_count", [](const UNet& u) { return parameter_count(u.params()); })
      .def_property_readonly("tap_names", &UNet::tap_names)
      .def(
          "predict",
          [](const UNet& u, const py::array_t<float, py::array::c_style | py::array::forcecast>& images) {
            if (images.ndim() != 3) throw ContractError("predict: images must be (n, h, w)");
            const int n = static_cast<int>(images.shape(0));
            const auto out = u.predict(std::vector<float>(images.data(), images.data() + images.size()), n);
            py::array_t<float> a({images.shape(0), images.shape(1), images.shape(2)});
            std::copy(out.begin(), out.end(), a.mutable_data());
            return a;
          },
          "Foreground probabilities for an (n, h, w) stack.");
  m.def("init_params", &init_params, py::arg("config"), py::arg("seed") = 0);
  m.def("load_checkpoint", [](const std::string& p) { return load_checkpoint(p); });
  m.def("save_checkpoint", [](const UNet& u, const std::string& p) { save_checkpoint(u, p); });

  py::class_<TTestResult>(m, "TTestResult")
      .def_readonly("t", &TTestResult::t)
      .def_readonly("p", &TTestResult::p)
      .def_readonly("mean", &TTestResult::mean)
      .def_readonly("sd", &TTestResult::sd)
      .def_readonly("dof", &TTestResult::dof);
  m.def("one_sample_t_test",
        [](double baseline, const std::vector<double>& runs) { return one_sample_t_test(baseline, runs); });
  m.def("student_t_cdf", &student_t_cdf);

  m.def(
      "lemma2_gradient",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& w,
         const py::array_t<double, py::array::c_style | py::array::forcecast>& dx, double scale) {
        if (w.ndim() != 2 || w.shape(0) != w.shape(1)) throw ContractError("lemma2_gradient: W must be d x d");
        const auto r = lemma2_gradient(flat(w), flat(dx), static_cast<int>(w.shape(0)), scale);
        py::dict d;
        d["loss"] = r.loss;
        d["grad_analytic"] = r.grad_analytic;
        d["grad_numeric"] = r.grad_numeric;
        d["max_rel_error"] = r.max_rel_error;
        d["scale_dx_invariance_error"] = r.scale_dx_invariance_error;
        d["scale_w_ratio_error"] = r.scale_w_ratio_error;
        return d;
      },
      py::arg("w"), py::arg("dx"), py::arg("scale") = 2.5);
  m.def(
      "mediation_mc",
      [](double a, double b, int n, std::uint64_t seed) {
        const auto r = mediation_mc(a, b, n, seed);
        return py::make_tuple(r.slope, r.residual_variance);
      },
      py::arg("a"), py::arg("b"), py::arg("n") = 100000, py::arg("seed") = 0, "(slope, residual variance)");
  m.def(
      "lemma1_sweep",
      [](int instances, std::uint64_t seed) {
        const auto r = lemma1_sweep(instances, seed);
        return py::make_tuple(r.violations, r.violation_rate, r.min_gap);
      },
      py::arg("instances") = 100, py::arg("seed") = 0, "(violations, violation rate, min gap)");
  m.def("pearson", [](const std::vector<double>& x, const std::vector<double>& y) { return pearson(x, y).r; });

  m.def(
      "run_cli",
      [](const std::vector<std::string>& args) {
        std::vector<const char*> argv{"fdseg"};
        for (const auto& a : args) argv.push_back(a.c_str());
        py::gil_scoped_release release;
        return run_cli(static_cast<int>(argv.size()), argv.data());
      },
      "Runs the fdseg command line with `args`; returns the exit code.");
}
