#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "orthokd/checkpoint.hpp"
#include "orthokd/config.hpp"
#include "orthokd/distill.hpp"
#include "orthokd/errors.hpp"
#include "orthokd/experiment.hpp"
#include "orthokd/metrics.hpp"
#include "orthokd/report.hpp"
#include "orthokd/train.hpp"

namespace py = pybind11;
using namespace orthokd;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

ExperimentConfig parse_config(const std::string& text, const std::map<std::string, std::string>& overrides) {
  Config c = Config::parse(text);
  for (const auto& [k, v] : overrides) c.set(k, v);
  return experiment_config(c);
}

py::dict record_dict(const RunRecord& r) {
  py::dict d;
  d["tag"] = to_string(r.tag);
  d["train_type"] = r.train_type;
  d["seed"] = r.seed;
  d["accuracy"] = r.accuracy;
  d["model"] = r.model;
  d["model_digest"] = r.model_digest;
  d["teacher_digest"] = r.teacher_digest;
  return d;
}

py::dict confidence_dict(const ConfidenceReport& r) {
  py::dict d;
  d["n"] = r.n;
  d["avg"] = r.avg;
  d["stddev"] = r.stddev;
  d["errmargin"] = r.err_margin;
  d["interval99"] = r.interval99;
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Pruning and distillation experiments on micro networks";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);
  py::register_exception<FormatError>(m, "FormatError", PyExc_IOError);

  py::class_<ModelGraph>(m, "Model")
      .def_static("micro_resnet", &build_micro_resnet, py::arg("depth"), py::arg("width"), py::arg("classes"),
                  py::arg("seed"), py::arg("in_channels") = 3, py::arg("size") = 16)
      .def_static("micro_vgg", &build_micro_vgg, py::arg("width"), py::arg("classes"), py::arg("seed"),
                  py::arg("in_channels") = 3, py::arg("size") = 16)
      .def_static("load", [](const std::string& path) { return model_from_checkpoint(read_checkpoint(path)); })
      .def("save", [](const ModelGraph& g, const std::string& path) { write_checkpoint(path, make_checkpoint(g)); })
      .def_readonly("arch", &ModelGraph::arch)
      .def_readonly("num_classes", &ModelGraph::num_classes)
      .def("parameter_count", &ModelGraph::parameter_count)
      .def("digest", [](const ModelGraph& g) { return hex_digest(model_digest(g)); })
      .def("parameters", [](const ModelGraph& g) {
        py::dict d;
        for (const auto& p : g.params) d[py::str(p.name())] = to_array(p.value());
        return d;
      })
      .def("predict", [](const ModelGraph& g, const Array& x) { return to_array(predict_logits(g, to_tensor(x))); })
      .def("naswot", [](const ModelGraph& g, const Array& x) { return naswot_score(g, to_tensor(x)).score; });

  m.def("surplus", &surplus, py::arg("unpruned_scratch"), py::arg("unpruned_kd"),
        py::arg("finetuned_scratch"), py::arg("self_distill"));
  m.def("confidence_report", [](const std::vector<double>& s) { return confidence_dict(confidence_report(s)); });
  m.def("confidence_from_stddev",
        [](double sd, std::size_t n) { return confidence_dict(confidence_from_stddev(sd, n)); });
  m.def("naswot_from_jacobians", [](const Array& j) { return naswot_from_jacobians(to_tensor(j)).score; });

  m.def(
      "kd_loss",
      [](const std::vector<double>& y, const std::vector<double>& s, const std::vector<double>& t, double alpha,
         double temperature) {
        DistillConfig c;
        c.alpha = alpha;
        c.temperature = temperature;
        return kd_loss_value(y, s, t, c);
      },
      py::arg("targets"), py::arg("student_logits"), py::arg("teacher_logits"), py::arg("alpha") = 0.9,
      py::arg("temperature") = 4.0);
  m.def("cross_entropy", [](const std::vector<double>& y, const std::vector<double>& q) { return cross_entropy(y, q); });
  m.def("expand_soft_target", [](const std::vector<double>& p) {
    std::vector<std::pair<std::size_t, double>> out;
    for (const auto& e : expand_soft_target(p)) out.emplace_back(e.class_index, e.weight);
    return out;
  });

  m.def(
      "run_experiment",
      [](const std::string& config_text, const std::map<std::string, std::string>& overrides, bool matrix,
         std::size_t jobs, const std::string& out_dir) {
        const ExperimentConfig cfg = parse_config(config_text, overrides);
        ExperimentResult res;
        {
          py::gil_scoped_release release;
          res = matrix ? run_matrix(cfg, {jobs, out_dir}) : run_schedule(cfg, {jobs, out_dir});
        }
        py::list records;
        for (const auto& r : res.records) records.append(record_dict(r));
        py::dict out;
        out["records"] = records;
        if (matrix) {
          const DiversityScores d = diversity_scores(res, cfg.score_batch);
          out["naswot_scratch"] = d.scratch;
          out["naswot_distilled"] = d.distilled;
        }
        return out;
      },
      py::arg("config_text") = "", py::arg("overrides") = std::map<std::string, std::string>{},
      py::arg("matrix") = false, py::arg("jobs") = 1, py::arg("out_dir") = "");
  m.def("report_markdown", [](const std::string& results_csv) {
    return report_markdown(build_report(parse_records_csv(results_csv)));
  });
}
