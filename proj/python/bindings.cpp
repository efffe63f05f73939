#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <complex>
#include <set>
#include <string>

#include "tsda/alignment.hpp"
#include "tsda/config.hpp"
#include "tsda/data.hpp"
#include "tsda/detection.hpp"
#include "tsda/eval.hpp"
#include "tsda/logging.hpp"
#include "tsda/pipeline.hpp"
#include "tsda/spectral.hpp"

namespace py = pybind11;
using namespace tsda;

namespace {

using DoubleArray = py::array_t<double, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const DoubleArray& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor(shape, std::vector<double>(a.data(), a.data() + a.size()));
}

py::array_t<double> to_numpy(const Tensor& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<double> out(shape);
  std::copy(t.values().begin(), t.values().end(), out.mutable_data());
  return out;
}

py::array_t<std::complex<double>> to_numpy(const ComplexTensor& c) {
  std::vector<py::ssize_t> shape(c.shape.begin(), c.shape.end());
  py::array_t<std::complex<double>> out(shape);
  auto* p = out.mutable_data();
  for (std::size_t i = 0; i < c.size(); ++i) p[i] = {c.re[i], c.im[i]};
  return out;
}

// Python settings: a key=value string or a dict of scalars.
KeyValues to_settings(const py::object& obj) {
  if (obj.is_none()) return {};
  if (py::isinstance<py::str>(obj)) return KeyValues::parse(obj.cast<std::string>(), "<python>");
  KeyValues kv;
  for (auto item : obj.cast<py::dict>()) {
    const auto key = item.first.cast<std::string>();
    const py::handle v = item.second;
    if (py::isinstance<py::bool_>(v))
      kv.set(key, v.cast<bool>() ? "true" : "false");
    else if (py::isinstance<py::list>(v) || py::isinstance<py::tuple>(v)) {
      std::string joined;
      for (auto e : v) joined += (joined.empty() ? "" : ",") + py::str(e).cast<std::string>();
      kv.set(key, joined);
    } else
      kv.set(key, py::str(v).cast<std::string>());
  }
  return kv;
}

data::Dataset make_dataset(const std::string& domain, const DoubleArray& values, const py::object& labels,
                           std::size_t classes) {
  if (values.ndim() != 3) throw std::invalid_argument(domain + ": values must be [n, channels, length]");
  data::Dataset ds;
  ds.domain = domain;
  ds.values = to_tensor(values);
  ds.channels = ds.values.dim(1);
  ds.length = ds.values.dim(2);
  if (!labels.is_none()) ds.labels = labels.cast<std::vector<std::size_t>>();
  ds.classes = classes;
  ds.validate();
  return ds;
}

py::dict dataset_dict(const data::Dataset& ds) {
  py::dict d;
  d["values"] = to_numpy(ds.values);
  d["labels"] = ds.labels;
  d["classes"] = ds.classes;
  return d;
}

}  // namespace

PYBIND11_MODULE(_tsda, m) {
  m.doc() = "Core routines of the tsda library";
  configure_logging();

  m.def("hann_window", [](std::size_t n) { return to_numpy(spectral::hann_window(n)); }, py::arg("n"));
  m.def(
      "dft", [](const DoubleArray& x) { return to_numpy(spectral::dft_forward(to_tensor(x))); }, py::arg("x"),
      "One-sided DFT along the last axis of a [T] or [d, T] array.");
  m.def(
      "idft",
      [](py::array_t<std::complex<double>, py::array::c_style | py::array::forcecast> v, std::size_t length) {
        ComplexTensor c(Shape(v.shape(), v.shape() + v.ndim()));
        for (py::ssize_t i = 0; i < v.size(); ++i) {
          c.re[i] = v.data()[i].real();
          c.im[i] = v.data()[i].imag();
        }
        return to_numpy(spectral::dft_inverse(c, length));
      },
      py::arg("v"), py::arg("length"));
  m.def(
      "polar",
      [](const DoubleArray& x) {
        const auto v = spectral::dft_forward(to_tensor(x));
        auto p = spectral::to_polar(v, x.shape(x.ndim() - 1));
        if (x.ndim() == 1) {
          p.amplitude = p.amplitude.reshaped({p.amplitude.size()});
          p.phase = p.phase.reshaped({p.phase.size()});
        }
        return py::make_tuple(to_numpy(p.amplitude), to_numpy(p.phase));
      },
      py::arg("x"), "Amplitude |v|/T and phase of the one-sided spectrum.");

  m.def(
      "sinkhorn",
      [](const DoubleArray& source, const DoubleArray& target, double eta, std::size_t iterations, double p) {
        alignment::SinkhornOptions opt;
        opt.eta = eta;
        opt.max_iterations = iterations;
        opt.p = p;
        const auto r = alignment::sinkhorn(to_tensor(source), to_tensor(target), opt);
        py::dict d;
        d["loss"] = r.loss;
        d["plan"] = to_numpy(r.plan.plan);
        d["iterations"] = r.iterations;
        d["log_domain"] = r.log_domain;
        return d;
      },
      py::arg("source"), py::arg("target"), py::arg("eta") = 1e-3, py::arg("iterations") = 100, py::arg("p") = 2.0);
  m.def(
      "mmd",
      [](const DoubleArray& source, const DoubleArray& target, double sigma) {
        return alignment::mmd_loss(to_tensor(source), to_tensor(target), sigma);
      },
      py::arg("source"), py::arg("target"), py::arg("sigma"));
  m.def(
      "gradient_probe",
      [](double shift, const std::string& divergence, std::size_t points, std::size_t dim, std::uint64_t seed) {
        alignment::ProbeDivergence d;
        if (divergence == "sinkhorn") d = alignment::ProbeDivergence::sinkhorn;
        else if (divergence == "mmd") d = alignment::ProbeDivergence::mmd;
        else if (divergence == "kl_on_histograms") d = alignment::ProbeDivergence::kl_on_histograms;
        else throw std::invalid_argument("unknown divergence '" + divergence + "'");
        alignment::ProbeOptions opt;
        opt.points = points;
        opt.dimension = dim;
        opt.seed = seed;
        const auto r = alignment::gradient_probe(shift, d, opt);
        return py::make_tuple(r.loss, r.gradient_norm);
      },
      py::arg("shift"), py::arg("divergence"), py::arg("points") = 32, py::arg("dim") = 2, py::arg("seed") = 0);

  m.def("dip", [](std::vector<double> v) { return detection::dip_statistic(std::move(v)); }, py::arg("values"));
  m.def("dip_pvalue", &detection::dip_pvalue, py::arg("dip"), py::arg("n"), py::arg("bootstrap") = 1000,
        py::arg("seed") = 0);
  m.def(
      "kmeans2",
      [](const std::vector<double>& v) {
        const auto r = detection::kmeans2(v);
        return py::make_tuple(r.mu1, r.mu2, r.assignment);
      },
      py::arg("values"));

  m.def(
      "accuracy",
      [](const std::vector<std::int64_t>& p, const std::vector<std::int64_t>& y) { return eval::accuracy(p, y); },
      py::arg("preds"), py::arg("labels"));
  m.def(
      "macro_f1",
      [](const std::vector<std::int64_t>& p, const std::vector<std::int64_t>& y, std::size_t c) {
        return eval::macro_f1(p, y, c);
      },
      py::arg("preds"), py::arg("labels"), py::arg("classes"));
  m.def("h_score", &eval::h_score, py::arg("ca_c"), py::arg("ca_u"));
  m.def(
      "evaluate",
      [](const std::vector<std::int64_t>& preds, const std::vector<std::size_t>& labels, std::size_t classes,
         const std::set<std::size_t>& known, bool universal) {
        const auto r = eval::evaluate(preds, labels, classes, known, universal);
        py::dict d;
        const auto kv = r.to_keyvalues();
        for (const auto& [k, v] : kv.entries()) d[py::str(k)] = v;
        d["confusion"] = r.confusion;
        return d;
      },
      py::arg("preds"), py::arg("labels"), py::arg("classes"), py::arg("known"), py::arg("universal") = false);

  m.def(
      "generate_pair",
      [](const py::object& settings) {
        auto [s, t] = data::pair_specs(to_settings(settings));
        return py::make_tuple(dataset_dict(data::generate(s)), dataset_dict(data::generate(t)));
      },
      py::arg("settings"), "Synthetic source/target pair from flat settings (str or dict).");

  m.def(
      "adapt",
      [](const DoubleArray& xs, const std::vector<std::size_t>& ys, const DoubleArray& xt, const py::object& settings,
         std::size_t classes) {
        const auto cfg = pipeline::TrainConfig::from_keyvalues(to_settings(settings));
        cfg.validate();
        if (classes == 0)
          for (auto y : ys) classes = std::max(classes, y + 1);
        const auto source = make_dataset("source", xs, py::cast(ys), classes);
        const auto target = make_dataset("target", xt, py::none(), classes);
        pipeline::AdaptationResult r;
        {
          py::gil_scoped_release release;
          r = pipeline::adapt(source, target, cfg);
        }
        py::dict d;
        d["predictions"] = r.predictions;
        py::list trace;
        for (const auto& e : r.trace) {
          py::dict row;
          row["stage"] = e.stage;
          row["epoch"] = e.epoch;
          row["classification"] = e.classification;
          row["alignment"] = e.alignment;
          row["reconstruction"] = e.reconstruction;
          row["total"] = e.total;
          trace.append(row);
        }
        d["trace"] = trace;
        std::vector<double> drift;
        std::vector<std::string> verdict;
        for (const auto& rec : r.drift) {
          drift.push_back(rec.drift);
          verdict.push_back(detection::to_string(rec.verdict));
        }
        d["drift"] = drift;
        d["verdicts"] = verdict;
        py::list decisions;
        for (const auto& dec : r.decisions) {
          py::dict row;
          row["class"] = dec.cls;
          row["count"] = dec.count;
          row["dip"] = dec.dip;
          row["p_value"] = dec.p_value;
          row["bimodal"] = dec.bimodal;
          decisions.append(row);
        }
        d["decisions"] = decisions;
        return d;
      },
      py::arg("source_values"), py::arg("source_labels"), py::arg("target_values"), py::arg("settings") = py::none(),
      py::arg("classes") = 0, "Stages 1-3 on arrays of shape [n, channels, length].");

  m.attr("UNKNOWN") = pipeline::kUnknown;
}
