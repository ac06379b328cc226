#include "limoseg/augment.hpp"
#include "limoseg/error.hpp"
#include "limoseg/evaluate.hpp"
#include "limoseg/ingest.hpp"
#include "limoseg/model.hpp"
#include "limoseg/preproc.hpp"
#include "limoseg/quantize.hpp"
#include "limoseg/train.hpp"

#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <cstring>
#include <memory>

namespace py = pybind11;
using namespace pybind11::literals;
using namespace limoseg;

namespace {

template <typename T>
using Array = py::array_t<T, py::array::c_style | py::array::forcecast>;

template <typename T>
py::array_t<T> to_numpy(const Grid<T>& g) {
    py::array_t<T> out({g.rows, g.cols});
    std::memcpy(out.mutable_data(), g.data.data(), g.data.size() * sizeof(T));
    return out;
}

template <typename T>
Grid<T> from_numpy(const Array<T>& a) {
    if (a.ndim() != 2) throw py::value_error("expected a 2-D array");
    Grid<T> g(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)));
    std::memcpy(g.data.data(), a.data(), g.data.size() * sizeof(T));
    return g;
}

GridSpec grid_named(const std::string& name) {
    if (name == "desk") return GridSpec::desk();
    if (name == "paper") return GridSpec::paper();
    throw py::value_error("unknown grid '" + name + "' (desk|paper)");
}

// (N,3) or (N,4) float32; labels optional
PointCloud cloud_from(const Array<float>& pts, const std::optional<Array<std::uint16_t>>& labels) {
    if (pts.ndim() != 2 || (pts.shape(1) != 3 && pts.shape(1) != 4))
        throw py::value_error("points must have shape (N, 3) or (N, 4)");
    const auto n = static_cast<std::size_t>(pts.shape(0));
    const auto w = static_cast<std::size_t>(pts.shape(1));
    PointCloud c;
    c.points.resize(n);
    const float* d = pts.data();
    for (std::size_t i = 0; i < n; ++i)
        c.points[i] = Point{d[i * w], d[i * w + 1], d[i * w + 2], w == 4 ? d[i * w + 3] : 0.f};
    if (labels) {
        if (static_cast<std::size_t>(labels->size()) != n) throw py::value_error("labels must have one entry per point");
        c.labels.emplace(labels->data(), labels->data() + n);
    }
    return c;
}

py::array_t<float> points_of(const PointCloud& c) {
    py::array_t<float> out({static_cast<py::ssize_t>(c.size()), py::ssize_t{4}});
    std::memcpy(out.mutable_data(), c.points.data(), c.size() * sizeof(Point));
    return out;
}

py::object labels_of(const PointCloud& c) {
    if (!c.labels) return py::none();
    return py::array_t<std::uint16_t>(static_cast<py::ssize_t>(c.labels->size()), c.labels->data());
}

py::dict counts_dict(const ConfusionCounts& c) {
    py::dict d("tp"_a = c.tp, "fp"_a = c.fp, "fn"_a = c.fn, "tn"_a = c.tn);
    d["iou"] = iou_moving(c);
    d["precision"] = precision(c);
    d["recall"] = recall(c);
    return d;
}

std::vector<BevWindow> bev_windows(const std::vector<Frame>& frames, int sequence_id, bool filter, bool augment,
                                   std::uint64_t augment_seed, const std::string& residual, const std::string& grid,
                                   bool semantics) {
    std::vector<FrameWindow> w;
    if (augment) {
        AugmentParams p;
        p.seed = augment_seed;
        w = augment_sequence(frames, p, sequence_id);
    } else {
        w = build_windows(frames, sequence_id);
    }
    if (filter) w = filter_training_windows(std::move(w));
    BevOptions opt;
    opt.residual = parse_residual_mode(residual);
    opt.semantics = semantics;
    const GridSpec spec = grid_named(grid);
    std::vector<BevWindow> out;
    out.reserve(w.size());
    for (const auto& fw : w) out.push_back(build_bev_window(fw, spec, opt));
    return out;
}

ModelConfig model_config(const std::string& variant, const std::string& residual, std::uint64_t seed, int rows,
                         int cols) {
    ModelConfig c;
    c.variant = parse_variant(variant);
    c.residual_mode = parse_residual_mode(residual);
    c.init_seed = seed;
    c.rows = rows;
    c.cols = cols;
    c.validate();
    return c;
}

std::vector<const BevWindow*> pointers(const std::vector<BevWindow>& ws) {
    std::vector<const BevWindow*> p;
    for (const auto& w : ws) p.push_back(&w);
    return p;
}

}  // namespace

PYBIND11_MODULE(_limoseg, m) {
    m.doc() = "Moving-object segmentation on bird's-eye-view LiDAR images";

    py::register_exception<Error>(m, "LimosegError", PyExc_RuntimeError);

    py::class_<Frame>(m, "Frame")
        .def(py::init([](const Array<float>& pts, std::optional<Array<std::uint16_t>> labels,
                         const Eigen::Matrix4d& pose) { return Frame{cloud_from(pts, labels), Pose(pose)}; }),
             "points"_a, "labels"_a = py::none(), "pose"_a = Eigen::Matrix4d::Identity())
        .def_property_readonly("points", [](const Frame& f) { return points_of(f.cloud); })
        .def_property_readonly("labels", [](const Frame& f) { return labels_of(f.cloud); })
        .def_property_readonly("pose", [](const Frame& f) { return f.pose.matrix(); })
        .def("__len__", [](const Frame& f) { return f.cloud.size(); });

    py::class_<BevWindow>(m, "BevWindow")
        .def_property_readonly("frames",
                               [](const BevWindow& w) {
                                   return py::make_tuple(to_numpy(w.frames[0]), to_numpy(w.frames[1]),
                                                         to_numpy(w.frames[2]));
                               })
        .def_property_readonly("residual", [](const BevWindow& w) { return to_numpy(w.residual); })
        .def_property_readonly("label_mask", [](const BevWindow& w) { return to_numpy(w.label_mask); })
        .def_property_readonly("occupancy_mask", [](const BevWindow& w) { return to_numpy(w.occupancy_mask); })
        .def_readonly("sequence_id", &BevWindow::sequence_id)
        .def_readonly("frame_index", &BevWindow::frame_index)
        .def_readonly("augmented", &BevWindow::augmented)
        .def_readonly("motion_points", &BevWindow::motion_points)
        .def("with_residual",
             [](const BevWindow& w, const std::string& mode) {
                 BevWindow c = w;
                 c.residual = compute_residual(parse_residual_mode(mode), w.frames[0], w.frames[1], w.frames[2]);
                 return c;
             },
             "mode"_a)
        .def("save", [](const BevWindow& w, const fs::path& p) { save_bev_window(p, w); })
        .def_static("load", &load_bev_window);

    m.def("generate_scene",
          [](int frames, std::uint64_t seed, int moving_cars, int parked_cars) {
              SceneConfig c;
              c.frames = frames;
              c.seed = seed;
              c.moving_cars = moving_cars;
              c.parked_cars = parked_cars;
              return generate_scene(c).frames;
          },
          "frames"_a = 60, "seed"_a = 0, "moving_cars"_a = 4, "parked_cars"_a = 14);
    m.def("load_sequence", &load_sequence, "path"_a);
    m.def("write_sequence", &write_sequence, "path"_a, "frames"_a);

    m.def("count_motion_points",
          [](const Array<std::uint16_t>& labels) {
              std::size_t n = 0;
              for (py::ssize_t i = 0; i < labels.size(); ++i) n += default_label_map().is_moving(labels.data()[i]);
              return n;
          },
          "labels"_a);

    m.def("motion_compensate",
          [](const Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>& pts, const Eigen::Matrix4d& pose_past,
             const Eigen::Matrix4d& pose_now) {
              std::vector<Eigen::Vector3d> in(static_cast<std::size_t>(pts.rows()));
              for (Eigen::Index i = 0; i < pts.rows(); ++i) in[i] = pts.row(i).transpose();
              const auto out = motion_compensate(in, Pose(pose_past), Pose(pose_now));
              Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor> r(pts.rows(), 3);
              for (Eigen::Index i = 0; i < pts.rows(); ++i) r.row(i) = out[i].transpose();
              return r;
          },
          "points"_a, "pose_past"_a, "pose_now"_a);

    m.def("rasterize", [](const Array<float>& pts, const std::string& grid) {
              return to_numpy(rasterize(cloud_from(pts, std::nullopt), grid_named(grid)));
          },
          "points"_a, "grid"_a = "desk");
    m.def("rasterize_labels",
          [](const Array<float>& pts, const Array<std::uint16_t>& labels, const std::string& grid) {
              const LabelRaster r = rasterize_labels(cloud_from(pts, labels), grid_named(grid));
              return py::make_tuple(to_numpy(r.label_mask), to_numpy(r.occupancy_mask));
          },
          "points"_a, "labels"_a, "grid"_a = "desk");
    m.def("residual",
          [](const Array<float>& now, const Array<float>& p1, const Array<float>& p2, const std::string& mode) {
              return to_numpy(compute_residual(parse_residual_mode(mode), from_numpy(now), from_numpy(p1),
                                               from_numpy(p2)));
          },
          "now"_a, "past1"_a, "past2"_a, "mode"_a = "mul");

    m.def("bev_windows", &bev_windows, "frames"_a, "sequence_id"_a = 0, "filter"_a = false, "augment"_a = false,
          "augment_seed"_a = 0, "residual"_a = "mul", "grid"_a = "desk", "semantics"_a = false,
          py::call_guard<py::gil_scoped_release>());

    py::class_<Model>(m, "Model")
        .def(py::init([](const std::string& variant, const std::string& residual, std::uint64_t seed, int rows,
                         int cols) { return Model(model_config(variant, residual, seed, rows, cols)); }),
             "variant"_a = "multi_encoder_joint", "residual"_a = "mul", "seed"_a = 0, "rows"_a = 96, "cols"_a = 64)
        .def_property_readonly("variant", [](const Model& mo) { return to_string(mo.config().variant); })
        .def_property_readonly("residual", [](const Model& mo) { return to_string(mo.config().residual_mode); })
        .def_property_readonly("parameter_count", &Model::parameter_count)
        .def_property_readonly("parameter_names", &Model::parameter_names)
        .def("predict",
             [](const Model& mo, const std::vector<BevWindow>& ws) {
                 std::vector<Mask> masks;
                 {
                     py::gil_scoped_release nogil;
                     for (const auto& w : ws) {
                         auto one = predict_masks(mo.forward(std::vector<const BevWindow*>{&w}));
                         masks.push_back(std::move(one[0]));
                     }
                 }
                 py::list out;
                 for (const auto& mk : masks) out.append(to_numpy(mk));
                 return out;
             },
             "windows"_a)
        .def("logits",
             [](const Model& mo, const std::vector<BevWindow>& ws) {
                 const ad::Tensor t = mo.forward(pointers(ws));
                 std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
                 py::array_t<float> out(shape);
                 std::memcpy(out.mutable_data(), t.data().data(), t.data().size() * sizeof(float));
                 return out;
             },
             "windows"_a)
        .def("save", [](const Model& mo, const fs::path& p) { save_checkpoint(p, mo); }, "path"_a)
        .def_static("load", [](const fs::path& p) { return model_from_checkpoint(load_checkpoint(p)); }, "path"_a);

    m.def("train",
          [](const std::vector<BevWindow>& train_set, const std::vector<BevWindow>& val_set, const std::string& variant,
             const std::string& residual, int epochs, int batch_size, double lr, std::uint64_t seed,
             bool uniform_weights) {
              if (train_set.empty()) throw py::value_error("empty training set");
              TrainConfig c;
              c.model = model_config(variant, residual, 0, train_set[0].rows(), train_set[0].cols());
              c.epochs = epochs;
              c.batch_size = batch_size;
              c.learning_rate = lr;
              c.seed = seed;
              c.uniform_weights = uniform_weights;
              c.validate();
              std::optional<TrainResult> res;
              {
                  py::gil_scoped_release nogil;
                  res.emplace(train(train_set, val_set, c));
              }
              TrainResult& r = *res;
              py::list log;
              for (const auto& e : r.log)
                  log.append(py::dict("epoch"_a = e.epoch, "train_loss"_a = e.train_loss, "val_iou"_a = e.val_iou));
              py::dict out("best"_a = std::move(r.best), "last"_a = std::move(r.last), "best_epoch"_a = r.best_epoch,
                           "log"_a = log);
              out["class_weights"] = r.stats.weights();
              return out;
          },
          "train"_a, "val"_a = std::vector<BevWindow>{}, "variant"_a = "multi_encoder_joint", "residual"_a = "mul",
          "epochs"_a = 30, "batch_size"_a = 12, "lr"_a = 1e-3, "seed"_a = 0, "uniform_weights"_a = false);

    m.def("evaluate",
          [](const Model& mo, const std::vector<BevWindow>& ws, const std::string& prec,
             const std::vector<BevWindow>& calibration, int k) {
              const Precision p = parse_precision(prec);
              QuantScheme s{p, std::nullopt};
              if (p == Precision::kInt8) s.activations = calibrate_activations(mo, calibration, k);
              py::gil_scoped_release nogil;
              const QuantizedModel q(mo, s);
              const ConfusionCounts c = evaluate_model(q.model(), ws, 12, q.hook());
              py::gil_scoped_acquire gil;
              return counts_dict(c);
          },
          "model"_a, "windows"_a, "precision"_a = "fp32", "calibration"_a = std::vector<BevWindow>{}, "k"_a = 10);

    m.def("model_size",
          [](const Model& mo, const std::string& prec) {
              return model_size(make_checkpoint(mo), parse_precision(prec)).bytes;
          },
          "model"_a, "precision"_a = "fp32");

    m.def("benchmark",
          [](const Model& mo, const BevWindow& w, int warmup, int iterations) {
              LatencyReport r;
              {
                  py::gil_scoped_release nogil;
                  r = benchmark(mo, w, warmup, iterations);
              }
              return py::dict("mean_ms"_a = r.mean_ms, "p50_ms"_a = r.p50_ms, "p99_ms"_a = r.p99_ms,
                              "times_ms"_a = r.times_ms);
          },
          "model"_a, "window"_a, "warmup"_a = 5, "iterations"_a = 20);

    m.def("round_fp16", &round_fp16, "x"_a);
    m.def("int8_scale", [](const Array<float>& v) { return int8_scale({v.data(), static_cast<std::size_t>(v.size())}); },
          "values"_a);
    m.def("class_weight", &class_weight, "frequency"_a, "epsilon"_a = 1.02);
}
