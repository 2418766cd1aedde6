#include <pybind11/numpy.h>
#include <pybind11/operators.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "distillforge/config.hpp"
#include "distillforge/errors.hpp"
#include "distillforge/losses.hpp"
#include "distillforge/metrics.hpp"
#include "distillforge/nets.hpp"
#include "distillforge/pipeline.hpp"
#include "distillforge/random.hpp"
#include "distillforge/synth_data.hpp"

namespace py = pybind11;
using namespace distillforge;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

// 1-D input is treated as a single row.
Tensor to_tensor(const Array& a, bool requires_grad = false) {
  if (a.ndim() == 1) {
    const auto n = static_cast<std::size_t>(a.shape(0));
    return Tensor({1, n}, std::vector<double>(a.data(), a.data() + n), requires_grad);
  }
  if (a.ndim() != 2) throw DimensionError("expected a 1-D or 2-D array");
  const auto r = static_cast<std::size_t>(a.shape(0)), c = static_cast<std::size_t>(a.shape(1));
  return Tensor({r, c}, std::vector<double>(a.data(), a.data() + r * c), requires_grad);
}

Array to_numpy(const Tensor& t) {
  const auto v = t.data();
  if (t.rank() != 2) {
    Array out(static_cast<py::ssize_t>(v.size()));
    std::copy(v.begin(), v.end(), out.mutable_data());
    return out;
  }
  Array out({static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())});
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

Array gradient_of(const Tensor& t) {
  const auto g = t.grad();
  Array out({static_cast<py::ssize_t>(t.rows()), static_cast<py::ssize_t>(t.cols())});
  std::copy(g.begin(), g.end(), out.mutable_data());
  return out;
}

// Loss value, or (value, d loss / d first argument) when `grad` is set.
template <typename F>
py::object loss_value(const Array& first, bool grad, F&& f) {
  const Tensor x = to_tensor(first, grad);
  const Tensor loss = f(x);
  if (!grad) return py::float_(loss.item());
  backward(loss);
  return py::make_tuple(loss.item(), gradient_of(x));
}

DistillConfig distill_config(double alpha, double beta, double tau, double margin) {
  DistillConfig cfg;
  cfg.alpha = alpha;
  cfg.beta = beta;
  cfg.tau = tau;
  cfg.lambda_margin = margin;
  cfg.validate();
  return cfg;
}

Array sample_matrix(const std::vector<Sample>& s, bool keypoints) {
  return to_numpy(keypoints ? keypoints_matrix(s) : features_matrix(s));
}

py::array_t<std::size_t> identity_vector(const std::vector<Sample>& s) {
  const auto ids = identities_of(s);
  py::array_t<std::size_t> out(static_cast<py::ssize_t>(ids.size()));
  std::copy(ids.begin(), ids.end(), out.mutable_data());
  return out;
}

py::dict outputs_dict(const NetOutputs& o) {
  py::dict d;
  d["logits"] = to_numpy(o.logits);
  d["embedding"] = to_numpy(o.embedding);
  d["regression"] = to_numpy(o.regression);
  return d;
}

RunConfig resolve(std::uint64_t seed, const std::string& config_text,
                  const std::vector<std::string>& overrides) {
  ConfigBuilder b;
  if (!config_text.empty()) b.apply_text(config_text);
  for (const auto& o : overrides) b.apply_override(o);
  b.set_seed(seed);
  return b.build();
}

}  // namespace

PYBIND11_MODULE(_distillforge, m) {
  m.doc() = "Teacher-student distillation on synthetic faces (C++ core)";

  py::register_exception<ParameterError>(m, "ParameterError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<ParseError>(m, "ParseError", PyExc_ValueError);
  py::register_exception<EvaluationError>(m, "EvaluationError", PyExc_ArithmeticError);

  m.def("derive_seed", [](std::uint64_t seed, const std::string& name) { return derive_seed(seed, name); },
        py::arg("seed"), py::arg("name"));

  // ---- losses
  m.def("soft_predictions", [](const Array& logits, double tau) {
    return to_numpy(soft_predictions(to_tensor(logits), tau));
  }, py::arg("logits"), py::arg("tau"));
  m.def("softmax_rows", [](const Array& x) { return to_numpy(softmax_rows(to_tensor(x))); });
  m.def("cross_entropy", [](const Array& pred, const Array& target, bool grad) {
    const Tensor t = to_tensor(target);
    return loss_value(pred, grad, [&](const Tensor& p) { return cross_entropy(p, t); });
  }, py::arg("pred"), py::arg("target"), py::arg("grad") = false);
  m.def("softmax_loss", [](const Array& logits, const std::vector<std::size_t>& labels, bool grad) {
    return loss_value(logits, grad, [&](const Tensor& x) { return softmax_loss(x, labels); });
  }, py::arg("logits"), py::arg("labels"), py::arg("grad") = false);
  m.def("distill_cls_loss",
        [](const Array& student, const Array& teacher, const std::vector<std::size_t>& labels,
           double alpha, double tau, bool grad) {
          const Tensor t = to_tensor(teacher);
          const auto cfg = distill_config(alpha, 0.0, tau, 0.4);
          return loss_value(student, grad,
                            [&](const Tensor& s) { return distill_cls_loss(s, t, labels, cfg); });
        },
        py::arg("student_logits"), py::arg("teacher_logits"), py::arg("labels"),
        py::arg("alpha") = 1.0, py::arg("tau") = 3.0, py::arg("grad") = false);
  m.def("euclidean_loss", [](const Array& pred, const Array& target, bool grad) {
    const Tensor t = to_tensor(target);
    return loss_value(pred, grad, [&](const Tensor& p) { return euclidean_loss(p, t); });
  }, py::arg("prediction"), py::arg("target"), py::arg("grad") = false);
  m.def("hidden_match_loss", [](const Array& student, const Array& teacher, bool grad) {
    const Tensor t = to_tensor(teacher);
    return loss_value(student, grad, [&](const Tensor& s) { return hidden_match_loss(s, t); });
  }, py::arg("student_embedding"), py::arg("teacher_embedding"), py::arg("grad") = false);
  m.def("triplet_loss",
        [](const Array& anchor, const Array& positive, const Array& negative, double margin,
           bool grad) {
          const Tensor p = to_tensor(positive), n = to_tensor(negative);
          return loss_value(anchor, grad,
                            [&](const Tensor& a) { return triplet_loss(a, p, n, margin); });
        },
        py::arg("anchor"), py::arg("positive"), py::arg("negative"), py::arg("margin") = 0.4,
        py::arg("grad") = false);

  // ---- metrics
  m.def("top1_accuracy", [](const Array& logits, const std::vector<std::size_t>& labels) {
    return top1_accuracy(to_tensor(logits), labels);
  }, py::arg("logits"), py::arg("labels"));
  m.def("nrmse", [](const Array& pred, const Array& truth, const std::vector<double>& norm_ref) {
    return nrmse(to_tensor(pred), to_tensor(truth), norm_ref);
  }, py::arg("predicted"), py::arg("truth"), py::arg("norm_ref"));
  m.def("interocular_distances", [](const Array& truth, double fallback) {
    return interocular_distances(to_tensor(truth), fallback);
  }, py::arg("truth"), py::arg("fallback"));
  m.def("verification_top1", [](const Array& e, const std::vector<std::size_t>& ids) {
    return verification_top1(to_tensor(e), ids);
  }, py::arg("embeddings"), py::arg("identities"));
  m.def("pair_verification_accuracy",
        [](const std::vector<double>& same, const std::vector<double>& diff) {
          return pair_verification_accuracy(same, diff);
        },
        py::arg("same_distances"), py::arg("diff_distances"));

  // ---- synthetic data
  py::class_<GeneratorParams>(m, "GeneratorParams")
      .def(py::init<>())
      .def_readwrite("num_identities", &GeneratorParams::num_identities)
      .def_readwrite("samples_per_identity", &GeneratorParams::samples_per_identity)
      .def_readwrite("input_dim", &GeneratorParams::input_dim)
      .def_readwrite("latent_dim", &GeneratorParams::latent_dim)
      .def_readwrite("pose_dim", &GeneratorParams::pose_dim)
      .def_readwrite("num_keypoints", &GeneratorParams::num_keypoints)
      .def_readwrite("identity_keypoint_scale", &GeneratorParams::identity_keypoint_scale)
      .def_readwrite("pose_keypoint_scale", &GeneratorParams::pose_keypoint_scale)
      .def_readwrite("noise_std", &GeneratorParams::noise_std)
      .def_readwrite("seed", &GeneratorParams::seed)
      .def("validate", &GeneratorParams::validate)
      .def(py::self == py::self);

  py::class_<SplitDataset>(m, "Dataset")
      .def_property_readonly("train_features", [](const SplitDataset& d) { return sample_matrix(d.train, false); })
      .def_property_readonly("train_keypoints", [](const SplitDataset& d) { return sample_matrix(d.train, true); })
      .def_property_readonly("train_identities", [](const SplitDataset& d) { return identity_vector(d.train); })
      .def_property_readonly("test_features", [](const SplitDataset& d) { return sample_matrix(d.test, false); })
      .def_property_readonly("test_keypoints", [](const SplitDataset& d) { return sample_matrix(d.test, true); })
      .def_property_readonly("test_identities", [](const SplitDataset& d) { return identity_vector(d.test); })
      .def_readonly("generator", &SplitDataset::generator)
      .def_property_readonly("num_identities", &SplitDataset::num_identities)
      .def("__len__", [](const SplitDataset& d) { return d.train.size() + d.test.size(); });

  m.def("generate", &generate, py::arg("params"));
  m.def("save_dataset", &save_dataset, py::arg("dataset"), py::arg("path"));
  m.def("load_dataset", &load_dataset, py::arg("path"));
  m.def("make_triplets",
        [](const std::vector<std::size_t>& ids, std::size_t count, std::uint64_t seed) {
          const auto t = make_triplets(ids, count, seed);
          py::array_t<std::size_t> out({static_cast<py::ssize_t>(t.size()), py::ssize_t{3}});
          auto v = out.mutable_unchecked<2>();
          for (std::size_t i = 0; i < t.size(); ++i) {
            const auto r = static_cast<py::ssize_t>(i);
            v(r, 0) = t[i].anchor;
            v(r, 1) = t[i].positive;
            v(r, 2) = t[i].negative;
          }
          return out;
        },
        py::arg("identities"), py::arg("count"), py::arg("seed"));

  // ---- networks
  py::class_<NetworkSpec>(m, "NetworkSpec")
      .def(py::init<>())
      .def_readwrite("input_dim", &NetworkSpec::input_dim)
      .def_readwrite("hidden_widths", &NetworkSpec::hidden_widths)
      .def_readwrite("embedding_dim", &NetworkSpec::embedding_dim)
      .def_readwrite("num_classes", &NetworkSpec::num_classes)
      .def_readwrite("num_keypoint_coords", &NetworkSpec::num_keypoint_coords)
      .def_readwrite("width_divisor", &NetworkSpec::width_divisor)
      .def("divided_widths", &NetworkSpec::divided_widths)
      .def("with_divisor", &NetworkSpec::with_divisor, py::arg("divisor"))
      .def("validate", &NetworkSpec::validate)
      .def(py::self == py::self)
      .def("__repr__", [](const NetworkSpec& s) { return to_string(s); });

  py::class_<Network>(m, "Network")
      .def_static("build", &Network::build, py::arg("spec"), py::arg("seed"))
      .def_property_readonly("spec", &Network::spec)
      .def_property_readonly("parameter_count", &Network::parameter_count)
      .def("infer", [](const Network& n, const Array& x) { return outputs_dict(n.infer(to_tensor(x))); },
           py::arg("features"))
      .def("parameters", [](const Network& n) {
        py::list out;
        for (const auto& p : n.parameters()) out.append(to_numpy(p));
        return out;
      })
      .def("clone", &Network::clone);

  m.def("save_checkpoint", &save_checkpoint, py::arg("network"), py::arg("path"));
  m.def("load_checkpoint", &load_checkpoint, py::arg("path"));

  // ---- pipeline
  m.def("nag_quadratic",
        [](double w0, double curvature, double target, double lr, double momentum, int steps) {
          // Runs the library optimizer on curvature/2 (w - target)^2.
          std::vector<Tensor> params{Tensor::scalar(w0, true)};
          OptimizerState opt;
          opt.learning_rate = lr;
          opt.momentum = momentum;
          std::vector<double> path;
          for (int i = 0; i < steps; ++i) {
            backward(scale(sum(square(add_scalar(params[0], -target))), 0.5 * curvature));
            nag_step(params, opt);
            path.push_back(params[0].item());
          }
          return path;
        },
        py::arg("w0"), py::arg("curvature"), py::arg("target"), py::arg("lr"),
        py::arg("momentum"), py::arg("steps"));

  m.def("select_targets",
        [](const std::map<std::pair<double, double>, double>& metric, bool higher_is_better) {
          const auto c = select_targets(metric, higher_is_better);
          return std::make_pair(c.alpha, c.beta);
        },
        py::arg("metric"), py::arg("higher_is_better"));

  m.def("evaluate",
        [](const Network& net, const SplitDataset& data, std::size_t pair_count,
           std::uint64_t pair_seed) {
          const auto e = evaluate(net, data, pair_count, pair_seed);
          py::dict d;
          d["top1"] = e.top1;
          d["nrmse"] = e.nrmse;
          d["verif_top1"] = e.verif_top1;
          d["pair_acc"] = e.pair_acc;
          return d;
        },
        py::arg("network"), py::arg("dataset"), py::arg("pair_count") = 300,
        py::arg("pair_seed") = 0);

  m.def("config_keys", [] {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : config_keys()) out.emplace_back(k.name, k.description);
    return out;
  });
  m.def("render_config",
        [](std::uint64_t seed, const std::string& text, const std::vector<std::string>& overrides) {
          return render_config(resolve(seed, text, overrides));
        },
        py::arg("seed") = 0, py::arg("config_text") = "",
        py::arg("overrides") = std::vector<std::string>{});
  m.def("run_experiment",
        [](std::uint64_t seed, const std::string& text, const std::vector<std::string>& overrides) {
          const auto cfg = resolve(seed, text, overrides);
          ExperimentResult r;
          {
            py::gil_scoped_release release;
            r = run_experiment(cfg.plan);
          }
          return std::make_pair(r.report.to_json(), r.selections_json());
        },
        py::arg("seed") = 0, py::arg("config_text") = "",
        py::arg("overrides") = std::vector<std::string>{});
}
