#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "clickseg/datasets.hpp"
#include "clickseg/encoding.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/experiments.hpp"
#include "clickseg/model.hpp"

namespace py = pybind11;
using namespace clickseg;

namespace {

using U8Array = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

Image to_image(const U8Array& a) {
  if (a.ndim() == 2) {
    return Image(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), 1,
                 std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
  }
  if (a.ndim() != 3) throw DimensionError("image must be (rows, cols) or (rows, cols, channels)");
  return Image(static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2)),
               std::vector<std::uint8_t>(a.data(), a.data() + a.size()));
}

U8Array from_image(const Image& img) {
  U8Array out({img.rows(), img.cols(), img.channels()});
  std::copy(img.data().begin(), img.data().end(), out.mutable_data());
  return out;
}

SegmentationMap to_map(const U8Array& a) {
  if (a.ndim() != 2) throw DimensionError("label map must be (rows, cols)");
  return {static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
          std::vector<std::uint8_t>(a.data(), a.data() + a.size())};
}

U8Array from_map(const SegmentationMap& m) {
  U8Array out({m.rows(), m.cols()});
  std::copy(m.labels().begin(), m.labels().end(), out.mutable_data());
  return out;
}

py::array_t<float> from_stack(const FloatStack& s) {
  py::array_t<float> out({s.channels(), s.rows(), s.cols()});
  std::copy(s.data().begin(), s.data().end(), out.mutable_data());
  return out;
}

std::vector<Click> to_clicks(const std::vector<std::tuple<int, int, int>>& clicks) {
  std::vector<Click> out;
  for (const auto& [r, c, k] : clicks) out.push_back({r, c, k});
  return out;
}

py::list legend(const ClassSchema& schema) {
  py::list out;
  for (const auto& c : schema.classes()) {
    out.append(py::dict(py::arg("id") = c.id, py::arg("name") = c.name,
                        py::arg("color") = py::make_tuple(c.color[0], c.color[1], c.color[2])));
  }
  return out;
}

py::dict tile_dict(const RasterTile& t) {
  py::dict d;
  d["id"] = t.id;
  d["image"] = from_image(t.image);
  d["ground_truth"] = t.ground_truth ? py::object(from_map(*t.ground_truth)) : py::none();
  return d;
}

py::dict dataset_dict(const Dataset& ds) {
  py::dict d;
  d["classes"] = legend(ds.schema);
  py::list tiles;
  for (const auto& t : ds.tiles) tiles.append(tile_dict(t));
  d["tiles"] = tiles;
  d["digest"] = dataset_digest(ds.tiles);
  return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Interactive multi-class segmentation refinement";

  py::register_exception<Error>(m, "Error", PyExc_RuntimeError);

  m.def(
      "encode_clicks",
      [](const std::vector<std::tuple<int, int, int>>& clicks, int rows, int cols, int n_classes,
         const std::string& mode, const std::string& channels, int disk_radius, double d_max) {
        EncodingConfig config;
        config.mode = encoding_mode_from_string(mode);
        config.channels = channel_layout_from_string(channels);
        config.disk_radius = disk_radius;
        config.d_max = d_max;
        config.validate();
        const auto c = to_clicks(clicks);
        return from_stack(encode(c, {rows, cols}, n_classes, config));
      },
      py::arg("clicks"), py::arg("rows"), py::arg("cols"), py::arg("n_classes"), py::arg("mode") = "distance",
      py::arg("channels") = "per_class", py::arg("disk_radius") = 5, py::arg("d_max") = 160.0,
      "Annotation channels (channels, rows, cols) for (row, col, class_id) clicks.");

  m.def(
      "generate_synthetic",
      [](int n_tiles, int size, int n_classes, std::uint64_t seed) {
        return dataset_dict(generate_synthetic_dataset(n_tiles, size, n_classes, seed));
      },
      py::arg("n_tiles"), py::arg("size") = 128, py::arg("n_classes") = 3, py::arg("seed") = 1);

  m.def(
      "load_dataset", [](const std::filesystem::path& manifest) { return dataset_dict(load_dataset(manifest)); },
      py::arg("manifest"));

  m.def(
      "mean_iou",
      [](const U8Array& pred, const U8Array& gt, int n_classes) {
        const auto step = measure_step(to_map(pred), to_map(gt), n_classes);
        py::list per_class;
        for (const auto& v : step.iou_per_class) per_class.append(v ? py::object(py::float_(*v)) : py::none());
        return py::make_tuple(step.mean_iou, per_class);
      },
      py::arg("prediction"), py::arg("ground_truth"), py::arg("n_classes"));

  py::class_<ModelCheckpoint, std::shared_ptr<ModelCheckpoint>>(m, "Checkpoint")
      .def_static(
          "load",
          [](const std::filesystem::path& path) { return std::make_shared<ModelCheckpoint>(load_checkpoint(path)); },
          py::arg("path"))
      .def_property_readonly("classes", [](const ModelCheckpoint& c) { return legend(c.schema); })
      .def_property_readonly("image_channels", &ModelCheckpoint::image_channels)
      .def_property_readonly("architecture",
                             [](const ModelCheckpoint& c) { return to_string(c.model.spec().architecture); })
      .def_property_readonly("train_digest", [](const ModelCheckpoint& c) { return c.train_digest; })
      .def("weights_checksum", [](const ModelCheckpoint& c) { return c.model.weights_checksum(); })
      .def(
          "predict",
          [](const ModelCheckpoint& c, const U8Array& image, const std::vector<std::tuple<int, int, int>>& clicks) {
            const auto img = to_image(image);
            const auto cl = to_clicks(clicks);
            Prediction p;
            {
              py::gil_scoped_release release;
              p = predict_map(c, img, cl);
            }
            return py::make_tuple(from_map(p.labels), from_stack(p.probabilities));
          },
          py::arg("image"), py::arg("clicks") = std::vector<std::tuple<int, int, int>>{},
          "Returns (labels (rows, cols), probabilities (classes, rows, cols)).")
      .def(
          "refine",
          [](const ModelCheckpoint& c, const U8Array& image, const U8Array& gt, const std::string& clicker, int budget,
             std::uint64_t seed) {
            RasterTile tile{"array", to_image(image), to_map(gt)};
            Rng rng(seed);
            const auto t = run_refinement_loop(c, tile, clicker_kind_from_string(clicker), budget, rng);
            return nlohmann::json(t).dump();
          },
          py::arg("image"), py::arg("ground_truth"), py::arg("clicker") = "independent", py::arg("budget") = 20,
          py::arg("seed") = 0, "Automatic refinement loop; returns the trajectory as JSON text.");

  m.def(
      "run_suite",
      [](const std::filesystem::path& path, std::optional<std::filesystem::path> out, std::optional<int> workers) {
        const auto suite = ExperimentSuite::load(path);
        SuiteReport report;
        {
          py::gil_scoped_release release;
          report = run_suite(suite, {std::move(out), workers});
        }
        nlohmann::json j{{"suite", report.name}, {"passed", report.all_passed()}};
        j["cells"] = nlohmann::json::array();
        for (const auto& c : report.cells) j["cells"].push_back({{"name", c.name}, {"mean", c.mean}, {"ok", c.ok()}});
        j["checks"] = nlohmann::json::array();
        for (const auto& k : report.checks) {
          j["checks"].push_back({{"name", k.name}, {"passed", k.passed}, {"lhs", k.lhs}, {"rhs", k.rhs}});
        }
        return j.dump();
      },
      py::arg("suite"), py::arg("out") = py::none(), py::arg("workers") = py::none(),
      "Runs an experiment suite; returns a JSON summary.");
}
