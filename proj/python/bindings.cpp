#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "logo/harness.hpp"

namespace py = pybind11;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

logo::Tensor to_tensor(const Array& a) {
  logo::Shape shape(a.shape(), a.shape() + a.ndim());
  return logo::Tensor(std::move(shape), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const logo::Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  Array out(shape);
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

py::dict cost_dict(const logo::CostReport& r) {
  py::dict d;
  d["F"] = r.F, d["H"] = r.H, d["W"] = r.W, d["f"] = r.f, d["h"] = r.h, d["w"] = r.w;
  d["cost_local"] = r.cost_local;
  d["cost_global"] = r.cost_global;
  d["cost_logo_total"] = r.cost_logo_total;
  d["cost_full"] = r.cost_full;
  d["cost_spatial_only"] = r.cost_spatial_only;
  d["cost_divided"] = r.cost_divided;
  d["cost_mixing"] = r.cost_mixing;
  d["ordering_ok"] = r.ordering_ok();
  return d;
}

py::dict metrics_dict(const logo::Metrics& m) {
  py::dict d;
  d["uar"] = m.uar;
  d["war"] = m.war;
  d["per_class_recall"] = m.per_class_recall;
  d["support"] = m.support;
  d["confusion"] = m.confusion;
  d["zero_support_classes"] = m.zero_support_classes;
  return d;
}

logo::Dataset to_dataset(const py::list& samples) {
  logo::Dataset data;
  for (const auto& item : samples) {
    auto pair = item.cast<py::tuple>();
    data.push_back({logo::ClipFeatures::from(to_tensor(pair[0].cast<Array>())), pair[1].cast<std::size_t>()});
  }
  return data;
}

py::list from_dataset(const logo::Dataset& data) {
  py::list out;
  for (const auto& s : data) out.append(py::make_tuple(to_array(s.clip.features), s.label));
  return out;
}

}  // namespace

PYBIND11_MODULE(_logoformer, m) {
  m.doc() = "Local-global spatio-temporal attention with a compact loss regularizer";

  py::register_exception<logo::Error>(m, "LogoError", PyExc_ValueError);

  py::enum_<logo::PoolMode>(m, "PoolMode")
      .value("average", logo::PoolMode::average)
      .value("learned", logo::PoolMode::learned);

  py::class_<logo::WindowSpec>(m, "WindowSpec")
      .def(py::init<std::size_t, std::size_t, std::size_t>(), py::arg("f") = 2, py::arg("h") = 2, py::arg("w") = 2)
      .def_readwrite("f", &logo::WindowSpec::f)
      .def_readwrite("h", &logo::WindowSpec::h)
      .def_readwrite("w", &logo::WindowSpec::w);

  py::class_<logo::ModelConfig>(m, "ModelConfig")
      .def(py::init<>())
      .def_readwrite("frames", &logo::ModelConfig::frames)
      .def_readwrite("height", &logo::ModelConfig::height)
      .def_readwrite("width", &logo::ModelConfig::width)
      .def_readwrite("channels", &logo::ModelConfig::channels)
      .def_readwrite("dim", &logo::ModelConfig::dim)
      .def_readwrite("blocks", &logo::ModelConfig::blocks)
      .def_readwrite("heads", &logo::ModelConfig::heads)
      .def_readwrite("window", &logo::ModelConfig::window)
      .def_readwrite("pool_mode", &logo::ModelConfig::pool_mode)
      .def_readwrite("num_classes", &logo::ModelConfig::num_classes)
      .def_readwrite("seed", &logo::ModelConfig::seed)
      .def("validate", &logo::ModelConfig::validate);

  m.def("tiny_config", &logo::tiny_config);

  py::class_<logo::Model>(m, "Model")
      .def(py::init(&logo::Model::init), py::arg("config"))
      .def_readonly("config", &logo::Model::config)
      .def("parameter_count", &logo::Model::parameter_count)
      .def("parameter_names",
           [](const logo::Model& model) {
             std::vector<std::string> names;
             for (const auto& [name, t] : model.parameters()) names.push_back(name);
             return names;
           })
      .def("parameter",
           [](const logo::Model& model, const std::string& name) {
             for (const auto& [n, t] : model.parameters())
               if (n == name) return to_array(*t);
             throw py::key_error(name);
           })
      .def("forward", [](const logo::Model& model, const Array& clip) {
        return to_array(logo::forward(model, logo::ClipFeatures::from(to_tensor(clip))));
      })
      .def("cls_features", [](const logo::Model& model, const Array& clip) {
        return to_array(logo::cls_features(model, logo::ClipFeatures::from(to_tensor(clip))));
      })
      .def("save", [](const logo::Model& model, const std::string& path) { logo::save(model, path); })
      .def_static("load", [](const std::string& path) { return logo::load(path); });

  m.def("cost_report", [](std::size_t F, std::size_t H, std::size_t W, std::size_t f, std::size_t h,
                          std::size_t w) { return cost_dict(logo::cost_report(F, H, W, f, h, w)); });
  m.def(
      "cost_sweep",
      [](const std::vector<std::array<std::size_t, 6>>& rows) {
        std::vector<logo::CostGridRow> grid;
        for (const auto& r : rows) grid.push_back({r[0], r[1], r[2], r[3], r[4], r[5]});
        return logo::cost_sweep(grid);
      },
      "CSV with one row per (F, H, W, f, h, w) configuration");

  m.def("cross_entropy", [](const Array& logits, std::size_t target) {
    return logo::cross_entropy(to_tensor(logits), target).item();
  });
  m.def("non_target_distribution", [](const Array& logits, std::size_t target) {
    return to_array(logo::non_target_distribution(to_tensor(logits), target));
  });
  m.def("compact_term", [](const Array& logits, std::size_t target) {
    return logo::compact_term(to_tensor(logits), target).item();
  });
  m.def(
      "total_loss",
      [](const Array& logits, std::size_t target, double lambda) {
        const auto b = logo::total_loss(to_tensor(logits), target, lambda);
        py::dict d;
        d["cross_entropy"] = b.cross_entropy;
        d["compact_term"] = b.compact_term;
        d["lambda"] = b.lambda;
        d["total"] = b.total;
        return d;
      },
      py::arg("logits"), py::arg("target"), py::arg("lambda_") = 1.0);
  m.def("evaluate", [](const std::vector<std::size_t>& preds, const std::vector<std::size_t>& labels,
                       std::size_t classes) { return metrics_dict(logo::evaluate(preds, labels, classes)); });

  py::class_<logo::SyntheticSpec>(m, "SyntheticSpec")
      .def(py::init<>())
      .def_static("matching", &logo::SyntheticSpec::matching)
      .def_readwrite("num_classes", &logo::SyntheticSpec::num_classes)
      .def_readwrite("clips_per_class", &logo::SyntheticSpec::clips_per_class)
      .def_readwrite("frames", &logo::SyntheticSpec::frames)
      .def_readwrite("height", &logo::SyntheticSpec::height)
      .def_readwrite("width", &logo::SyntheticSpec::width)
      .def_readwrite("channels", &logo::SyntheticSpec::channels)
      .def_readwrite("class_signal_scale", &logo::SyntheticSpec::class_signal_scale)
      .def_readwrite("noise_scale", &logo::SyntheticSpec::noise_scale)
      .def_readwrite("temporal_drift", &logo::SyntheticSpec::temporal_drift)
      .def_readwrite("seed", &logo::SyntheticSpec::seed)
      .def_readwrite("prototype_seed", &logo::SyntheticSpec::prototype_seed);

  m.def("generate", [](const logo::SyntheticSpec& spec) { return from_dataset(logo::generate(spec)); },
        "List of (features[F, H, W, C], label) tuples");

  py::class_<logo::TrainConfig>(m, "TrainConfig")
      .def(py::init<>())
      .def_readwrite("model", &logo::TrainConfig::model)
      .def_readwrite("lr", &logo::TrainConfig::lr)
      .def_readwrite("momentum", &logo::TrainConfig::momentum)
      .def_readwrite("epochs", &logo::TrainConfig::epochs)
      .def_readwrite("batch_size", &logo::TrainConfig::batch_size)
      .def_readwrite("lambda_", &logo::TrainConfig::lambda)
      .def_readwrite("seed", &logo::TrainConfig::seed);

  m.def("train", [](const logo::TrainConfig& config, const py::list& samples) {
    const logo::Dataset data = to_dataset(samples);
    std::pair<logo::Model, logo::RunHistory> result;
    {
      py::gil_scoped_release release;
      result = logo::train(config, data);
    }
    py::list history;
    for (const auto& r : result.second.epochs) {
      py::dict d;
      d["epoch"] = r.epoch;
      d["loss_total"] = r.loss_total;
      d["loss_ce"] = r.loss_ce;
      d["loss_compact"] = r.loss_compact;
      d["train_uar"] = r.train_uar;
      d["train_war"] = r.train_war;
      history.append(d);
    }
    return py::make_tuple(std::move(result.first), history);
  });

  m.def("evaluate_model", [](const logo::Model& model, const py::list& samples) {
    return metrics_dict(logo::evaluate_model(model, to_dataset(samples)));
  });
  m.def("embeddings_csv",
        [](const logo::Model& model, const py::list& samples) { return logo::embeddings_csv(model, to_dataset(samples)); });

  m.def(
      "gradcheck",
      [](const logo::ModelConfig& config, bool head_only) {
        logo::GradcheckOptions opts;
        opts.head_only = head_only;
        const auto report = logo::gradcheck(config, opts);
        py::dict d;
        d["max_rel_error"] = report.max_rel_error;
        d["worst"] = report.worst;
        py::list entries;
        for (const auto& e : report.entries) entries.append(py::make_tuple(e.name, e.size, e.max_rel_error));
        d["entries"] = entries;
        return d;
      },
      py::arg("config"), py::arg("head_only") = false);
}
