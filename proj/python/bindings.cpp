#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "dpl/checkpoint.hpp"
#include "dpl/config.hpp"
#include "dpl/data.hpp"
#include "dpl/errors.hpp"
#include "dpl/evaluation.hpp"
#include "dpl/indicators.hpp"
#include "dpl/losses.hpp"
#include "dpl/pipeline.hpp"
#include "dpl/trainer.hpp"

namespace py = pybind11;
using namespace dpl;

namespace {

// H x W x 3 uint8 array in BGR order -> FaceImage (deep copy).
FaceImage image_from_array(py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast> a) {
  if (a.ndim() != 3 || a.shape(2) != 3) throw InvalidImageError("expected an H x W x 3 uint8 array");
  cv::Mat view(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), CV_8UC3,
               const_cast<std::uint8_t*>(a.data()));
  return FaceImage{view.clone()};
}

py::array_t<std::uint8_t> image_to_array(const FaceImage& img) {
  py::array_t<std::uint8_t> out({img.height(), img.width(), 3});
  cv::Mat dst(img.height(), img.width(), CV_8UC3, out.mutable_data());
  img.pixels.copyTo(dst);
  return out;
}

RunConfig config_from_arg(const py::object& arg) {
  if (py::isinstance<py::dict>(arg)) {
    auto json_mod = py::module_::import("json");
    auto text = json_mod.attr("dumps")(arg).cast<std::string>();
    auto c = config_from_json(nlohmann::json::parse(text));
    c.validate();
    return c;
  }
  return load_config(arg.cast<std::string>());
}

py::dict report_dict(const evaluation::EvalReport& r) {
  auto json_mod = py::module_::import("json");
  return json_mod.attr("loads")(r.to_json().dump()).cast<py::dict>();
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dual-branch progressive learning deepfake detector (C++ core)";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<SingleClassError>(m, "SingleClassError", PyExc_ValueError);
  py::register_exception<InsufficientDataError>(m, "InsufficientDataError", PyExc_ValueError);

  m.def("score_from_similarities",
        [](double s1, double s2, double t) { return indicators::score_from_similarities(s1, s2, t).value; },
        py::arg("positive"), py::arg("negative"), py::arg("temperature") = 1.0);

  m.def("stub_indicator",
        [](py::array_t<std::uint8_t> image, const std::string& which) {
          auto kind = which == "fii" ? indicators::IndicatorKind::kIdentifiability : indicators::IndicatorKind::kQuality;
          if (which != "vqi" && which != "fii") throw ConfigError("which must be vqi or fii");
          return indicators::stub_indicator(image_from_array(image), kind).value;
        },
        py::arg("image"), py::arg("which") = "vqi");

  py::class_<indicators::QuantizerSpec>(m, "Quantizer")
      .def_readonly("levels", &indicators::QuantizerSpec::levels)
      .def_readonly("boundaries", &indicators::QuantizerSpec::boundaries)
      .def("__call__", [](const indicators::QuantizerSpec& q, double s) { return indicators::quantize(s, q).value; })
      .def("to_text", &indicators::QuantizerSpec::to_text)
      .def_static("from_text", [](const std::string& t) { return indicators::QuantizerSpec::from_text(t); })
      .def_static("load", [](const std::string& p) { return indicators::QuantizerSpec::load(p); })
      .def("save", [](const indicators::QuantizerSpec& q, const std::string& p) { q.save(p); });

  m.def("fit_quantizer",
        [](const std::vector<double>& scores, int levels, bool higher_score_lower_level) {
          return indicators::fit_quantizer(scores, levels,
                                           higher_score_lower_level ? indicators::Orientation::kHigherScoreLowerLevel
                                                                    : indicators::Orientation::kHigherScoreHigherLevel);
        },
        py::arg("scores"), py::arg("levels") = 5, py::arg("higher_score_lower_level") = true);

  m.def("auc", [](const std::vector<double>& s, const std::vector<int>& y) { return evaluation::auc(s, y); },
        py::arg("scores"), py::arg("labels"));

  m.def("rewards",
        [](const std::vector<double>& c) {
          auto r = training::compute_rewards(c);
          return py::make_tuple(r.rewards, r.returns);
        },
        py::arg("confidences"), "Per-step rewards r_2..r_T and reward-to-go returns.");

  m.def("clipped_surrogate",
        [](double ratio, double advantage, double eps) {
          auto t = training::clipped_surrogate(torch::tensor({ratio}, torch::kFloat64),
                                               torch::tensor({advantage}, torch::kFloat64), eps);
          return t.item<double>();
        },
        py::arg("ratio"), py::arg("advantage"), py::arg("clip_epsilon") = 0.2);

  m.def("jpeg_roundtrip",
        [](py::array_t<std::uint8_t> image, int quality) {
          return image_to_array(data::jpeg_roundtrip(image_from_array(image), quality));
        },
        py::arg("image"), py::arg("quality"));

  m.def("perturb",
        [](py::array_t<std::uint8_t> image, const std::string& kind, int severity, std::uint64_t seed) {
          evaluation::PerturbationSpec spec{evaluation::perturbation_from_string(kind), severity};
          spec.validate();
          Rng rng(seed);
          return image_to_array(evaluation::perturb(image_from_array(image), spec, rng));
        },
        py::arg("image"), py::arg("kind"), py::arg("severity"), py::arg("seed") = 0);

  m.def("make_synthetic_dataset",
        [](const std::string& out, int n_per_class, double strength, int q_lo, int q_hi, std::uint64_t seed,
           int image_size, double test_fraction) {
          data::SyntheticOptions o{n_per_class, strength, q_lo, q_hi, seed, image_size, test_fraction};
          return data::make_synthetic_dataset(o, out).size();
        },
        py::arg("out"), py::arg("n_per_class") = 500, py::arg("artifact_strength") = 0.5, py::arg("quality_lo") = 30,
        py::arg("quality_hi") = 100, py::arg("seed") = 0, py::arg("image_size") = 224, py::arg("test_fraction") = 0.2);

  m.def("load_config",
        [](const py::object& arg) {
          auto json_mod = py::module_::import("json");
          return json_mod.attr("loads")(to_json(config_from_arg(arg)).dump());
        },
        py::arg("config"), "Validate a config (path or dict) and return it with defaults filled in.");

  m.def("fit_indicators",
        [](const py::object& config) {
          auto c = config_from_arg(config);
          apply_runtime(c);
          IndicatorFit fit;
          {
            py::gil_scoped_release release;
            fit = dpl::fit_indicators(c);
          }
          return py::make_tuple(fit.quality_histogram, fit.identifiability_histogram);
        },
        py::arg("config"));

  m.def("train",
        [](const py::object& config, bool resume) {
          auto c = config_from_arg(config);
          py::gil_scoped_release release;
          return training::train(c, resume).last_checkpoint.string();
        },
        py::arg("config"), py::arg("resume") = false, "Run both stages; returns the last checkpoint path.");

  m.def("evaluate",
        [](const std::string& checkpoint, const std::string& manifest, const std::string& split,
           const std::string& policy, int q_lo, int q_hi, std::optional<std::string> perturbation, int severity,
           std::optional<std::uint64_t> seed) {
          auto model = load_model(checkpoint);
          apply_runtime(model.config);
          const auto& c = model.config;
          evaluation::EvalOptions opt;
          opt.policy = {data::compression_mode_from_string(policy), q_lo, q_hi};
          opt.policy.validate();
          opt.seed = seed.value_or(c.seed);
          if (perturbation) {
            opt.perturbation = evaluation::PerturbationSpec{evaluation::perturbation_from_string(*perturbation), severity};
            opt.perturbation->validate();
          }
          auto samples = load_split(manifest.empty() ? c.data.test_manifest : manifest, data::split_from_string(split),
                                    c.data.image_size);
          evaluation::EvalReport r;
          {
            py::gil_scoped_release release;
            r = evaluation::evaluate(*model.detector, samples, opt);
          }
          r.checkpoint = checkpoint;
          return report_dict(r);
        },
        py::arg("checkpoint"), py::arg("manifest") = "", py::arg("split") = "test", py::arg("policy") = "none",
        py::arg("quality_lo") = 30, py::arg("quality_hi") = 100, py::arg("perturbation") = py::none(),
        py::arg("severity") = 1, py::arg("seed") = py::none());

  m.def("export_embeddings",
        [](const std::string& checkpoint, const std::string& out, const std::string& manifest, const std::string& split) {
          auto model = load_model(checkpoint);
          apply_runtime(model.config);
          auto samples = load_split(manifest.empty() ? model.config.data.test_manifest : manifest,
                                    data::split_from_string(split), model.config.data.image_size);
          evaluation::EvalOptions opt;
          opt.seed = model.config.seed;
          py::gil_scoped_release release;
          evaluation::export_embeddings(*model.detector, samples, opt, out);
          return samples.size();
        },
        py::arg("checkpoint"), py::arg("out"), py::arg("manifest") = "", py::arg("split") = "test");

  m.def("sha256", [](const py::bytes& b) { return sha256_hex(std::string(b)); });
}
