#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "hsmamba/data.hpp"
#include "hsmamba/encoder.hpp"
#include "hsmamba/network.hpp"
#include "hsmamba/ssm.hpp"
#include "hsmamba/train.hpp"

namespace py = pybind11;
using namespace hsmamba;

namespace {

NdArray to_ndarray(const py::array& arr) {
  auto a = py::array_t<double, py::array::c_style | py::array::forcecast>::ensure(arr);
  Shape shape(a.ndim());
  for (py::ssize_t i = 0; i < a.ndim(); ++i) shape[i] = static_cast<std::size_t>(a.shape(i));
  std::vector<double> data(a.data(), a.data() + a.size());
  return NdArray(std::move(shape), std::move(data));
}

py::array_t<double> from_ndarray(const NdArray& a) {
  std::vector<py::ssize_t> shape(a.shape().begin(), a.shape().end());
  py::array_t<double> out(shape);
  std::copy_n(a.data(), a.numel(), out.mutable_data());
  return out;
}

LabelMap to_labels(const py::array& arr) {
  auto a = py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>::ensure(arr);
  if (a.ndim() != 2) throw ShapeError("labels must be a 2-d uint16 array");
  LabelMap m;
  m.height = static_cast<std::size_t>(a.shape(0));
  m.width = static_cast<std::size_t>(a.shape(1));
  m.labels.assign(a.data(), a.data() + a.size());
  return m;
}

py::array_t<std::uint16_t> from_labels(const std::vector<std::uint16_t>& v, std::size_t h,
                                       std::size_t w) {
  py::array_t<std::uint16_t> out({static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  std::copy_n(v.data(), v.size(), out.mutable_data());
  return out;
}

std::vector<std::uint8_t> to_mask(const py::array& arr) {
  auto a = py::array_t<bool, py::array::c_style | py::array::forcecast>::ensure(arr);
  std::vector<std::uint8_t> m(a.size());
  for (py::ssize_t i = 0; i < a.size(); ++i) m[i] = a.data()[i] ? 1 : 0;
  return m;
}

py::array_t<bool> from_mask(const std::vector<std::uint8_t>& m, std::size_t h, std::size_t w) {
  py::array_t<bool> out({static_cast<py::ssize_t>(h), static_cast<py::ssize_t>(w)});
  for (std::size_t i = 0; i < m.size(); ++i) out.mutable_data()[i] = m[i] != 0;
  return out;
}

ModelConfig make_config(std::size_t num_classes, std::size_t embed_dim, std::size_t patch,
                        std::size_t groups_spe, std::size_t groups_spa, std::size_t state,
                        std::size_t gn_groups, std::size_t tau, const std::string& fusion,
                        bool pos_encoding, bool lgi, bool exact_zoh) {
  ModelConfig cfg;
  cfg.num_classes = num_classes;
  cfg.embed_dim = embed_dim;
  cfg.base_patch = patch;
  cfg.groups_spe = groups_spe;
  cfg.groups_spa = groups_spa;
  cfg.state_dim = state;
  cfg.gn_groups = gn_groups;
  cfg.tau = tau;
  cfg.fusion = fusion_mode_from_string(fusion);
  cfg.use_pos_encoding = pos_encoding;
  cfg.use_lgi = lgi;
  cfg.exact_zoh = exact_zoh;
  return cfg;
}

struct PyModel {
  std::unique_ptr<Network> net;

  NdArray logits_of(const py::array& cube) {
    Tape tape;
    VarId logits = net->forward(tape, to_ndarray(cube));
    return tape.value(logits);
  }
};

SsmParams params_from_arrays(const py::array& log_a, const py::array& w_b, const py::array& w_c,
                             const py::array& w_delta, const py::array& b_delta,
                             const py::array& d_skip, bool exact) {
  SsmParams p;
  p.log_a = to_ndarray(log_a);
  p.w_b = to_ndarray(w_b);
  p.w_c = to_ndarray(w_c);
  p.w_delta = to_ndarray(w_delta);
  p.b_delta = to_ndarray(b_delta);
  p.d_skip = to_ndarray(d_skip);
  p.exact_zoh = exact;
  return p;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Dual-domain selective-scan hyperspectral classifier (C++ core)";

  py::register_exception<Error>(m, "HsmError", PyExc_RuntimeError);

  m.def(
      "synth_scene",
      [](std::size_t h, std::size_t w, std::size_t c, std::size_t k, double noise,
         std::uint64_t seed) {
        SynthScene s = synth_scene(h, w, c, k, noise, seed);
        return py::make_tuple(from_ndarray(s.cube.values),
                              from_labels(s.labels.labels, h, w),
                              from_ndarray(s.signatures));
      },
      py::arg("height"), py::arg("width"), py::arg("bands"), py::arg("num_classes"),
      py::arg("noise_sigma") = 0.05, py::arg("seed") = 1,
      "Voronoi scene with smooth class spectra; returns (cube, labels, signatures)");

  m.def(
      "normalize",
      [](const py::array& cube) {
        Cube c{to_ndarray(cube)};
        return from_ndarray(normalize(c).values);
      },
      py::arg("cube"), "per-band min-max scaling to [0,1]");

  m.def(
      "stratified_split",
      [](const py::array& labels, int train_n, int val_n, std::uint64_t seed,
         const std::map<int, std::pair<int, int>>& overrides) {
        LabelMap lm = to_labels(labels);
        SplitMask s = stratified_split(lm, train_n, val_n, overrides, seed);
        return py::make_tuple(from_mask(s.train, s.height, s.width),
                              from_mask(s.val, s.height, s.width),
                              from_mask(s.test, s.height, s.width));
      },
      py::arg("labels"), py::arg("train_n") = 30, py::arg("val_n") = 10, py::arg("seed") = 1,
      py::arg("overrides") = std::map<int, std::pair<int, int>>{},
      "per-class sampling without replacement; returns (train, val, test) masks");

  m.def(
      "positional_encoding",
      [](std::size_t len, std::size_t channels) {
        return from_ndarray(cosine_positional_encoding(len, channels));
      },
      py::arg("seq_len"), py::arg("channels"));

  m.def(
      "discretize_zoh",
      [](const py::array& a, const py::array& b, const py::array& delta) {
        DiscretizedPair p = discretize_zoh(to_ndarray(a), to_ndarray(b), to_ndarray(delta));
        return py::make_tuple(from_ndarray(p.a_bar), from_ndarray(p.b_bar));
      },
      py::arg("a"), py::arg("b"), py::arg("delta"));

  m.def(
      "recurrent_scan",
      [](const py::array& a_bar, const py::array& b_bar, const py::array& c, const py::array& x) {
        DiscretizedPair p{to_ndarray(a_bar), to_ndarray(b_bar)};
        return from_ndarray(recurrent_scan(p, to_ndarray(c), to_ndarray(x)));
      },
      py::arg("a_bar"), py::arg("b_bar"), py::arg("c"), py::arg("x"));

  m.def(
      "kernel_scan",
      [](const py::array& a_bar, const py::array& b_bar, const py::array& c, const py::array& x) {
        DiscretizedPair p{to_ndarray(a_bar), to_ndarray(b_bar)};
        return from_ndarray(kernel_scan(p, to_ndarray(c), to_ndarray(x)));
      },
      py::arg("a_bar"), py::arg("b_bar"), py::arg("c"), py::arg("x"));

  m.def(
      "selective_scan",
      [](const py::array& x, const py::array& log_a, const py::array& w_b, const py::array& w_c,
         const py::array& w_delta, const py::array& b_delta, const py::array& d_skip,
         bool exact_zoh) {
        SsmParams p = params_from_arrays(log_a, w_b, w_c, w_delta, b_delta, d_skip, exact_zoh);
        return from_ndarray(selective_scan_s6(p, to_ndarray(x)));
      },
      py::arg("x"), py::arg("log_a"), py::arg("w_b"), py::arg("w_c"), py::arg("w_delta"),
      py::arg("b_delta"), py::arg("d_skip"), py::arg("exact_zoh") = true,
      "input-dependent diagonal-state scan over [L,D] or [B,L,D]");

  m.def(
      "compute_metrics",
      [](const py::array& pred, const py::array& labels, const py::array& mask) {
        LabelMap lm = to_labels(labels);
        LabelMap pm = to_labels(pred);
        Metrics mt = compute_metrics(pm.labels, lm, to_mask(mask));
        py::dict d;
        d["oa"] = mt.oa;
        d["aa"] = mt.aa;
        d["kappa"] = mt.kappa;
        std::vector<py::ssize_t> shape{static_cast<py::ssize_t>(mt.num_classes),
                                       static_cast<py::ssize_t>(mt.num_classes)};
        py::array_t<std::uint64_t> conf(shape);
        std::copy(mt.confusion.begin(), mt.confusion.end(), conf.mutable_data());
        d["confusion"] = conf;
        return d;
      },
      py::arg("pred"), py::arg("labels"), py::arg("mask"));

  m.def("read_cube", [](const std::string& path) { return from_ndarray(read_cube(path).values); });
  m.def("write_cube", [](const py::array& cube, const std::string& path) {
    write_cube(Cube{to_ndarray(cube)}, path);
  });
  m.def("read_labels", [](const std::string& path) {
    LabelMap l = read_labels(path);
    return from_labels(l.labels, l.height, l.width);
  });
  m.def("write_labels", [](const py::array& labels, const std::string& path) {
    write_labels(to_labels(labels), path);
  });

  m.def(
      "benchmark_scan",
      [](const std::vector<std::size_t>& lengths, std::size_t dim, std::size_t state, int repeats,
         bool use_f32) {
        auto rows = benchmark_scan(lengths, dim, state, repeats, use_f32);
        py::list out;
        for (const auto& r : rows) out.append(py::make_tuple(r.len, r.mean_seconds, r.std_seconds));
        return out;
      },
      py::arg("lengths"), py::arg("dim") = 8, py::arg("state") = 8, py::arg("repeats") = 3,
      py::arg("use_f32") = false);

  py::class_<PyModel>(m, "Model")
      .def(py::init([](std::size_t bands, std::size_t num_classes, std::size_t embed_dim,
                       std::size_t patch, std::size_t groups_spe, std::size_t groups_spa,
                       std::size_t state, std::size_t gn_groups, std::size_t tau,
                       const std::string& fusion, bool pos_encoding, bool lgi, bool exact_zoh,
                       std::uint64_t seed) {
             PyModel pm;
             pm.net = std::make_unique<Network>(
                 make_config(num_classes, embed_dim, patch, groups_spe, groups_spa, state,
                             gn_groups, tau, fusion, pos_encoding, lgi, exact_zoh),
                 bands, seed);
             return pm;
           }),
           py::arg("bands"), py::arg("num_classes"), py::arg("embed_dim") = 32,
           py::arg("patch") = 4, py::arg("groups_spe") = 4, py::arg("groups_spa") = 4,
           py::arg("state") = 4, py::arg("gn_groups") = 8, py::arg("tau") = 4,
           py::arg("fusion") = "gated", py::arg("pos_encoding") = true, py::arg("lgi") = true,
           py::arg("exact_zoh") = true, py::arg("seed") = 1)
      .def("logits",
           [](PyModel& pm, const py::array& cube) { return from_ndarray(pm.logits_of(cube)); })
      .def("predict",
           [](PyModel& pm, const py::array& cube) {
             NdArray lg = pm.logits_of(cube);
             return from_labels(argmax_labels(lg), lg.extent(1), lg.extent(2));
           })
      .def("save", [](PyModel& pm, const std::string& path) {
        save_checkpoint(pm.net->store(), path);
      })
      .def("load", [](PyModel& pm, const std::string& path) {
        load_checkpoint(pm.net->store(), path);
      })
      .def_property_readonly("param_count",
                             [](const PyModel& pm) { return pm.net->count_params(); })
      .def(
          "fit",
          [](PyModel& pm, const py::array& cube, const py::array& labels,
             const py::array& train_mask, const py::array& val_mask, double lr, int epochs,
             int patience, std::uint64_t seed) {
            Cube c{to_ndarray(cube)};
            LabelMap lm = to_labels(labels);
            SplitMask split;
            split.height = lm.height;
            split.width = lm.width;
            split.train = to_mask(train_mask);
            split.val = to_mask(val_mask);
            split.test.assign(lm.labels.size(), 0);
            TrainConfig tc;
            tc.lr = lr;
            tc.max_epochs = epochs;
            tc.patience = patience;
            tc.seed = seed;
            TrainResult res = train(*pm.net, c, lm, split, tc);
            py::dict d;
            d["best_val_oa"] = res.best_val_oa;
            d["best_epoch"] = res.best_epoch;
            d["epochs_run"] = res.epochs_run;
            py::list hist;
            for (const EpochRow& r : res.history)
              hist.append(py::make_tuple(r.epoch, r.train_loss, r.val_oa, r.val_aa, r.val_kappa));
            d["history"] = hist;
            return d;
          },
          py::arg("cube"), py::arg("labels"), py::arg("train_mask"), py::arg("val_mask"),
          py::arg("lr") = 3e-4, py::arg("epochs") = 200, py::arg("patience") = 50,
          py::arg("seed") = 1);
}
