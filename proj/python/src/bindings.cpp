#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "mgd/distill.hpp"
#include "mgd/experiment.hpp"
#include "mgd/models.hpp"
#include "mgd/tensor.hpp"
#include "mgd/trainer.hpp"

namespace py = pybind11;
using namespace mgd;
using Block64 = BasicGenerativeBlock<double>;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
BasicTensor<T> to_tensor(const Array<T>& a, bool requires_grad = false) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return BasicTensor<T>(std::move(shape), std::vector<T>(a.data(), a.data() + a.size()),
                        requires_grad);
}

template <typename T, typename Span>
Array<T> to_array(const Shape& shape, Span values) {
  Array<T> out(std::vector<py::ssize_t>(shape.begin(), shape.end()));
  std::copy(values.begin(), values.end(), out.mutable_data());
  return out;
}

MaskMode parse_mode(const std::string& mode) {
  if (mode == "spatial") return MaskMode::spatial;
  if (mode == "channel") return MaskMode::channel;
  throw py::value_error("mode must be 'spatial' or 'channel', got '" + mode + "'");
}

py::dict summary_dict(const RunSummary& s) {
  py::dict d;
  d["top1"] = s.top1;
  d["top5"] = s.top5;
  d["feature_diff"] = s.feature_diff;
  if (s.baseline_top1) d["baseline_top1"] = *s.baseline_top1;
  if (s.baseline_top5) d["baseline_top5"] = *s.baseline_top5;
  if (s.teacher_hash_before) d["teacher_hash_before"] = *s.teacher_hash_before;
  if (s.teacher_hash_after) d["teacher_hash_after"] = *s.teacher_hash_after;
  return d;
}

py::dict param_grads(Block64& block) {
  py::dict grads;
  for (auto* p : block.parameters()) {
    if (p->tensor.has_grad())
      grads[py::str(p->name)] = to_array<double>(p->tensor.shape(), p->tensor.grad());
    p->tensor.zero_grad();
  }
  return grads;
}

}  // namespace

PYBIND11_MODULE(_mgd, m) {
  m.doc() = "Masked generative distillation core";
  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
  configure_threads_from_env();

  m.def(
      "sample_mask",
      [](std::size_t n, std::size_t c, std::size_t h, std::size_t w, const std::string& mode,
         double ratio, std::uint64_t seed, std::size_t stage, std::uint64_t iteration) {
        const MaskConfig cfg{parse_mode(mode), ratio, seed};
        cfg.validate();
        auto rng = mask_stream(seed, stage, iteration);
        const auto mask = sample_mask(n, c, h, w, cfg, rng);
        return to_array<std::uint8_t>(mask.shape(), std::span<const std::uint8_t>(mask.bits));
      },
      py::arg("n"), py::arg("c"), py::arg("h"), py::arg("w"), py::arg("mode") = "spatial",
      py::arg("ratio") = 0.5, py::arg("seed") = 0, py::arg("stage") = 0,
      py::arg("iteration") = 0,
      "Binary keep-mask (1 keeps) of shape (n, h, w) for spatial or (n, c) for channel mode.");

  py::class_<Block64>(m, "GenerativeBlock")
      .def(py::init([](std::size_t s, std::size_t t, int depth, int kernel, std::uint64_t seed) {
             return Block64(s, t, {depth, kernel}, seed);
           }),
           py::arg("student_channels"), py::arg("teacher_channels"), py::arg("depth") = 2,
           py::arg("kernel") = 3, py::arg("seed") = 0)
      .def("parameters",
           [](Block64& b) {
             py::dict out;
             for (auto* p : b.parameters())
               out[py::str(p->name)] = to_array<double>(p->tensor.shape(), p->tensor.data());
             return out;
           })
      .def("set_parameter",
           [](Block64& b, const std::string& name, const Array<double>& value) {
             for (auto* p : b.parameters()) {
               if (p->name != name) continue;
               if (static_cast<std::size_t>(value.size()) != p->tensor.size())
                 throw py::value_error(name + ": expected " + shape_str(p->tensor.shape()));
               std::copy(value.data(), value.data() + value.size(),
                         p->tensor.mutable_data().begin());
               return;
             }
             throw py::key_error(name);
           })
      .def(
          "mgd_loss",
          [](Block64& b, const Array<double>& student, const Array<double>& teacher, double ratio,
             const std::string& mode, std::uint64_t seed, std::uint64_t iteration,
             bool mean_normalize) {
            const std::vector<Tensor64> s{to_tensor(student, true)};
            const std::vector<Tensor64> t{to_tensor(teacher)};
            Block64* blocks[] = {&b};
            const auto loss =
                mgd_loss<double>(s, t, blocks, {parse_mode(mode), ratio, seed}, iteration,
                                 mean_normalize);
            backward(loss);
            return py::make_tuple(loss.item(), to_array<double>(s[0].shape(), s[0].grad()),
                                  param_grads(b));
          },
          py::arg("student"), py::arg("teacher"), py::arg("ratio") = 0.5,
          py::arg("mode") = "spatial", py::arg("seed") = 0, py::arg("iteration") = 0,
          py::arg("mean_normalize") = false,
          "Returns (loss, d loss / d student, {parameter: gradient}).")
      .def(
          "mimic_loss",
          [](Block64& b, const Array<double>& student, const Array<double>& teacher) {
            const auto s = to_tensor(student, true);
            const auto loss = mimic_loss(s, to_tensor(teacher), b.align_layer());
            backward(loss);
            return py::make_tuple(loss.item(), to_array<double>(s.shape(), s.grad()),
                                  param_grads(b));
          },
          py::arg("student"), py::arg("teacher"),
          "Direct mimicking through the block's adaptation layer only.");

  py::class_<Model>(m, "Model")
      .def(py::init([](const std::string& config, std::size_t in_channels, std::size_t input_size,
                       std::size_t classes, std::uint64_t seed) {
             auto cfg = BackboneConfig::parse(config);
             cfg.in_channels = in_channels;
             cfg.input_size = input_size;
             cfg.num_classes = classes;
             cfg.validate();
             return build_backbone(cfg, seed);
           }),
           py::arg("config") = "student", py::arg("in_channels") = 3, py::arg("input_size") = 32,
           py::arg("classes") = 10, py::arg("seed") = 0)
      .def("describe", [](const Model& model) { return model.config().describe(); })
      .def_property_readonly("parameter_count", &Model::parameter_count)
      .def("eval", [](Model& model) { model.set_mode(Mode::eval); })
      .def("train", [](Model& model) { model.set_mode(Mode::train); })
      .def("forward",
           [](Model& model, const Array<float>& images) {
             NoGradGuard no_grad;
             const auto out = model.forward(to_tensor(images));
             py::dict feats;
             for (const auto& f : out.features)
               feats[py::str(f.name)] = to_array<float>(f.value.shape(), f.value.data());
             return py::make_tuple(to_array<float>(out.logits.shape(), out.logits.data()), feats);
           })
      .def("state_hash", &Model::state_hash)
      .def("save", &Model::save)
      .def("load", &Model::load);

  m.def(
      "accuracy",
      [](const Array<float>& logits, const Array<std::int32_t>& labels) {
        if (logits.ndim() != 2 || labels.ndim() != 1 || labels.shape(0) != logits.shape(0))
          throw py::value_error("expected (N, K) logits and N labels");
        const auto acc = accuracy_from_logits(
            std::span<const float>(logits.data(), logits.size()),
            static_cast<std::size_t>(logits.shape(1)),
            std::span<const std::int32_t>(labels.data(), labels.size()));
        return py::make_tuple(acc.top1, acc.top5);
      },
      py::arg("logits"), py::arg("labels"), "(top1, top5) in percent.");

  m.def(
      "check_config",
      [](const std::string& text) {
        const auto cfg = ExperimentConfig::parse(text);
        return task_name(cfg.task);
      },
      py::arg("text"), "Validates config text and returns its task name.");

  m.def(
      "run_experiment",
      [](const std::string& text, bool verbose) {
        const auto cfg = ExperimentConfig::parse(text);
        std::ostringstream log;
        RunSummary summary;
        {
          py::gil_scoped_release release;
          summary = run_experiment(cfg, log);
        }
        if (verbose) py::print(log.str(), py::arg("end") = "");
        return summary_dict(summary);
      },
      py::arg("text"), py::arg("verbose") = false);

  m.def(
      "compare",
      [](const std::vector<std::filesystem::path>& dirs, const std::filesystem::path& out) {
        return compare_runs(dirs, out);
      },
      py::arg("run_dirs"), py::arg("out"), "Writes the comparison CSV; returns per-run errors.");
}
