#include "clickseg/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>
#include <spdlog/spdlog.h>

#include "clickseg/digest.hpp"
#include "clickseg/error.hpp"

namespace clickseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

Image image_from_mat(const cv::Mat& mat, const std::string& what) {
  if (mat.empty()) throw LoadError("could not decode image " + what);
  if (mat.depth() != CV_8U) throw LoadError("image " + what + " is not 8-bit");
  cv::Mat rgb;
  switch (mat.channels()) {
    case 1:
      rgb = mat;
      break;
    case 3:
      cv::cvtColor(mat, rgb, cv::COLOR_BGR2RGB);
      break;
    case 4:
      cv::cvtColor(mat, rgb, cv::COLOR_BGRA2RGB);
      break;
    default:
      throw LoadError("image " + what + " has unsupported channel count " + std::to_string(mat.channels()));
  }
  if (!rgb.isContinuous()) rgb = rgb.clone();
  std::vector<std::uint8_t> data(rgb.data, rgb.data + rgb.total() * rgb.elemSize());
  return Image(rgb.rows, rgb.cols, rgb.channels(), std::move(data));
}

cv::Mat mat_from_image(const Image& image) {
  if (image.channels() != 1 && image.channels() != 3) {
    throw DimensionError("only 1- or 3-channel images can be encoded");
  }
  cv::Mat view(image.rows(), image.cols(), CV_8UC(image.channels()),
               const_cast<std::uint8_t*>(image.data().data()));
  cv::Mat out;
  if (image.channels() == 3) {
    cv::cvtColor(view, out, cv::COLOR_RGB2BGR);
  } else {
    out = view.clone();
  }
  return out;
}

fs::path resolve(const fs::path& base, const std::string& p) {
  fs::path path(p);
  return path.is_absolute() ? path : base / path;
}

}  // namespace

Image read_image(const fs::path& path) {
  if (!fs::exists(path)) throw LoadError("file not found: " + path.string());
  return image_from_mat(cv::imread(path.string(), cv::IMREAD_UNCHANGED), path.string());
}

void write_png(const fs::path& path, const Image& image) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), mat_from_image(image))) throw LoadError("could not write " + path.string());
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  std::vector<std::uint8_t> buffer;
  cv::imencode(".png", mat_from_image(image), buffer);
  return buffer;
}

Image decode_image(std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) throw LoadError("empty image payload");
  const cv::Mat raw(1, static_cast<int>(bytes.size()), CV_8UC1, const_cast<std::uint8_t*>(bytes.data()));
  return image_from_mat(cv::imdecode(raw, cv::IMREAD_UNCHANGED), "payload");
}

SegmentationMap labels_from_colors(const Image& label_raster, const ClassSchema& schema) {
  if (label_raster.channels() != 3) {
    throw SchemaMismatchError("color-coded label raster must have 3 channels, got " +
                              std::to_string(label_raster.channels()));
  }
  SegmentationMap out(label_raster.rows(), label_raster.cols());
  std::map<Rgb, std::size_t> unknown;
  for (int r = 0; r < label_raster.rows(); ++r) {
    for (int c = 0; c < label_raster.cols(); ++c) {
      const Rgb color{label_raster.at(r, c, 0), label_raster.at(r, c, 1), label_raster.at(r, c, 2)};
      if (auto id = schema.id_of(color)) {
        out.at(r, c) = static_cast<SegmentationMap::Label>(*id);
      } else {
        ++unknown[color];
      }
    }
  }
  if (!unknown.empty()) {
    const auto& [color, count] = *unknown.begin();
    throw SchemaMismatchError("label color (" + std::to_string(color[0]) + "," + std::to_string(color[1]) + "," +
                              std::to_string(color[2]) + ") is not in the class schema (" +
                              std::to_string(count) + " pixels; " + std::to_string(unknown.size()) +
                              " unknown colors in total)");
  }
  return out;
}

SegmentationMap labels_from_index_raster(const Image& index_raster, const ClassSchema& schema) {
  if (index_raster.channels() != 1) throw SchemaMismatchError("class-id raster must have a single channel");
  std::vector<SegmentationMap::Label> labels(index_raster.data().begin(), index_raster.data().end());
  std::size_t bad = 0;
  int first_bad = -1;
  for (auto v : labels) {
    if (v >= schema.size()) {
      if (first_bad < 0) first_bad = v;
      ++bad;
    }
  }
  if (bad > 0) {
    throw SchemaMismatchError("class id " + std::to_string(first_bad) + " outside schema of " +
                              std::to_string(schema.size()) + " classes (" + std::to_string(bad) + " pixels)");
  }
  return SegmentationMap(index_raster.rows(), index_raster.cols(), std::move(labels));
}

Image render_labels(const SegmentationMap& labels, const ClassSchema& schema) {
  Image out(labels.rows(), labels.cols(), 3);
  for (int r = 0; r < labels.rows(); ++r) {
    for (int c = 0; c < labels.cols(); ++c) {
      const auto& color = schema.color_of(labels.at(r, c));
      for (int k = 0; k < 3; ++k) out.at(r, c, k) = color[k];
    }
  }
  return out;
}

Dataset load_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw LoadError("manifest not found: " + manifest_path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + " is not valid JSON: " + e.what());
  }
  Dataset dataset;
  try {
    dataset.schema = doc.get<ClassSchema>();
  } catch (const json::exception& e) {
    throw LoadError("manifest " + manifest_path.string() + " has a malformed class table: " + e.what());
  }
  const fs::path base = manifest_path.parent_path();
  for (const auto& entry : doc.value("tiles", json::array())) {
    RasterTile tile;
    const auto image_path = resolve(base, entry.at("image").get<std::string>());
    tile.id = entry.value("id", image_path.stem().string());
    tile.image = read_image(image_path);
    if (entry.contains("label") && !entry.at("label").is_null()) {
      const auto label_path = resolve(base, entry.at("label").get<std::string>());
      const Image raster = read_image(label_path);
      const std::string mode = entry.value("label_mode", "color");
      try {
        if (mode == "color") {
          tile.ground_truth = labels_from_colors(raster, dataset.schema);
        } else if (mode == "index") {
          tile.ground_truth = labels_from_index_raster(raster, dataset.schema);
        } else {
          throw LoadError("unknown label_mode '" + mode + "' for tile " + tile.id);
        }
      } catch (const SchemaMismatchError& e) {
        throw SchemaMismatchError(label_path.string() + ": " + e.what());
      }
      if (tile.ground_truth->shape() != tile.image.shape()) {
        throw DimensionError("label raster " + label_path.string() + " does not match its image size");
      }
    }
    dataset.tiles.push_back(std::move(tile));
  }
  return dataset;
}

fs::path write_dataset(const Dataset& dataset, const fs::path& directory) {
  fs::create_directories(directory);
  json doc = dataset.schema;
  auto& tiles = doc["tiles"] = json::array();
  for (const auto& tile : dataset.tiles) {
    json entry{{"id", tile.id}, {"image", tile.id + ".png"}};
    write_png(directory / (tile.id + ".png"), tile.image);
    if (tile.ground_truth) {
      write_png(directory / (tile.id + "_gt.png"), render_labels(*tile.ground_truth, dataset.schema));
      entry["label"] = tile.id + "_gt.png";
      entry["label_mode"] = "color";
    }
    tiles.push_back(std::move(entry));
  }
  const auto manifest = directory / "manifest.json";
  std::ofstream(manifest) << doc.dump(2) << '\n';
  return manifest;
}

std::pair<std::vector<RasterTile>, std::vector<RasterTile>> split_train_val(std::vector<RasterTile> tiles,
                                                                            double ratio, std::uint64_t seed) {
  if (!(ratio > 0.0 && ratio < 1.0)) throw SplitError("split ratio must lie strictly between 0 and 1");
  if (tiles.size() < 2) throw SplitError("need at least 2 tiles to split, got " + std::to_string(tiles.size()));
  const auto n = static_cast<long>(tiles.size());
  const long n_train = std::clamp(std::lround(ratio * static_cast<double>(n)), 1L, n - 1);

  std::vector<std::size_t> order(tiles.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::pair<std::vector<RasterTile>, std::vector<RasterTile>> out;
  for (long i = 0; i < n; ++i) {
    auto& dst = i < n_train ? out.first : out.second;
    dst.push_back(std::move(tiles[order[static_cast<std::size_t>(i)]]));
  }
  return out;
}

Patch sample_patch(const RasterTile& tile, int size, Rng& rng) {
  if (!tile.ground_truth) throw LoadError("tile " + tile.id + " has no ground truth to crop");
  if (size < 1 || size > tile.image.rows() || size > tile.image.cols()) {
    throw DimensionError("patch size " + std::to_string(size) + " exceeds tile " + tile.id + " (" +
                         std::to_string(tile.image.rows()) + "x" + std::to_string(tile.image.cols()) + ")");
  }
  std::uniform_int_distribution<int> row_dist(0, tile.image.rows() - size);
  std::uniform_int_distribution<int> col_dist(0, tile.image.cols() - size);
  const int row = row_dist(rng);
  const int col = col_dist(rng);
  const Region region{row, col, size, size};
  return Patch{tile.image.crop(region), tile.ground_truth->crop(region), row, col};
}

std::vector<Region> sliding_windows(Shape shape, int window, double overlap) {
  if (window < 1) throw DimensionError("window must be positive");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("window overlap must lie in [0,1)");
  auto starts = [&](int extent) {
    std::vector<int> s;
    if (extent <= window) {
      s.push_back(0);
      return s;
    }
    const int stride = std::max(1, static_cast<int>(std::floor(window * (1.0 - overlap))));
    for (int p = 0; p + window < extent; p += stride) s.push_back(p);
    s.push_back(extent - window);
    return s;
  };
  std::vector<Region> out;
  for (int r : starts(shape.rows)) {
    for (int c : starts(shape.cols)) {
      out.push_back({r, c, std::min(window, shape.rows), std::min(window, shape.cols)});
    }
  }
  return out;
}

// --- synthetic data -------------------------------------------------------

std::vector<double> synthetic_target_fractions(int n_classes) {
  if (n_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (n_classes == 2) return {0.75, 0.25};
  std::vector<double> f(static_cast<std::size_t>(n_classes));
  f[0] = 0.5;
  f.back() = 0.03;
  const double shared = (1.0 - f[0] - f.back()) / (n_classes - 2);
  for (int k = 1; k < n_classes - 1; ++k) f[static_cast<std::size_t>(k)] = shared;
  return f;
}

namespace {

using Color = std::array<double, 3>;

// Mean appearance of each class. Class 1 and the background are the pair
// whose palettes get mixed.
Color class_palette(int id, int n_classes) {
  if (id == 0) return {95.0, 125.0, 70.0};
  if (n_classes > 2 && id == n_classes - 1) return {215.0, 195.0, 60.0};
  if (id == 1) return {160.0, 115.0, 105.0};
  // Remaining classes: spread hues deterministically.
  const double t = static_cast<double>(id) / n_classes;
  return {60.0 + 150.0 * t, 90.0 + 60.0 * std::sin(6.28 * t), 200.0 - 120.0 * t};
}

struct Canvas {
  int size;
  std::vector<double> rgb;  // size*size*3
  SegmentationMap labels;

  explicit Canvas(int s) : size(s), rgb(static_cast<std::size_t>(s) * s * 3, 0.0), labels(s, s, 0) {}
  double* px(int r, int c) { return rgb.data() + (static_cast<std::size_t>(r) * size + c) * 3; }
};

struct Shape2d {
  enum class Kind { kRect, kDisc, kStrip } kind = Kind::kRect;
  int r0 = 0, c0 = 0, h = 0, w = 0;  // bounding box; discs use center (r0, c0) and radius h
};

template <typename Fn>
void for_each_pixel(const Shape2d& s, int size, Fn&& fn) {
  if (s.kind == Shape2d::Kind::kDisc) {
    const int rad = s.h;
    for (int r = std::max(0, s.r0 - rad); r <= std::min(size - 1, s.r0 + rad); ++r) {
      for (int c = std::max(0, s.c0 - rad); c <= std::min(size - 1, s.c0 + rad); ++c) {
        const int dr = r - s.r0;
        const int dc = c - s.c0;
        if (dr * dr + dc * dc <= rad * rad) fn(r, c);
      }
    }
    return;
  }
  for (int r = std::max(0, s.r0); r < std::min(size, s.r0 + s.h); ++r) {
    for (int c = std::max(0, s.c0); c < std::min(size, s.c0 + s.w); ++c) fn(r, c);
  }
}

Shape2d random_shape(int cls, int n_classes, int size, double max_area, Rng& rng) {
  const double scale = size / 128.0;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  auto uni = [&](double lo, double hi) { return lo + (hi - lo) * u(rng); };
  Shape2d s;
  const bool rare = n_classes > 2 && cls == n_classes - 1;
  if (rare) {
    // Small vehicles: short rectangles, occasionally round.
    if (u(rng) < 0.75) {
      s.kind = Shape2d::Kind::kRect;
      const bool vertical = u(rng) < 0.5;
      const int a = std::max(2, static_cast<int>(std::lround(uni(3.0, 5.0) * scale)));
      const int b = std::max(3, static_cast<int>(std::lround(uni(6.0, 10.0) * scale)));
      s.h = vertical ? b : a;
      s.w = vertical ? a : b;
    } else {
      s.kind = Shape2d::Kind::kDisc;
      s.h = std::max(2, static_cast<int>(std::lround(uni(2.5, 4.0) * scale)));
    }
  } else {
    const double pick = u(rng);
    if (pick < 0.55) {
      s.kind = Shape2d::Kind::kRect;
      s.h = static_cast<int>(std::lround(uni(10.0, 34.0) * scale));
      s.w = static_cast<int>(std::lround(uni(10.0, 34.0) * scale));
    } else if (pick < 0.8) {
      s.kind = Shape2d::Kind::kDisc;
      s.h = static_cast<int>(std::lround(uni(6.0, 16.0) * scale));
    } else {
      s.kind = Shape2d::Kind::kStrip;
      const bool vertical = u(rng) < 0.5;
      const int thick = static_cast<int>(std::lround(uni(4.0, 8.0) * scale));
      const int len = static_cast<int>(std::lround(uni(0.3, 0.8) * size));
      s.h = vertical ? len : thick;
      s.w = vertical ? thick : len;
    }
    // Shrink to the remaining budget so per-tile coverage tracks its target.
    auto area = [&] {
      return s.kind == Shape2d::Kind::kDisc ? 3.14159 * s.h * s.h : static_cast<double>(s.h) * s.w;
    };
    while (area() > std::max(max_area, 16.0 * scale * scale) && std::max(s.h, s.w) > 3) {
      if (s.kind == Shape2d::Kind::kDisc) {
        --s.h;
      } else if (s.h >= s.w) {
        s.h = std::max(2, s.h * 3 / 4);
      } else {
        s.w = std::max(2, s.w * 3 / 4);
      }
    }
  }
  const int extent_r = s.kind == Shape2d::Kind::kDisc ? 0 : s.h;
  const int extent_c = s.kind == Shape2d::Kind::kDisc ? 0 : s.w;
  std::uniform_int_distribution<int> rr(0, std::max(0, size - 1 - extent_r / 2));
  std::uniform_int_distribution<int> cc(0, std::max(0, size - 1 - extent_c / 2));
  s.r0 = rr(rng) - (s.kind == Shape2d::Kind::kDisc ? 0 : extent_r / 4);
  s.c0 = cc(rng) - (s.kind == Shape2d::Kind::kDisc ? 0 : extent_c / 4);
  return s;
}

Color jitter(const Color& base, double amount, Rng& rng) {
  std::uniform_real_distribution<double> u(-amount, amount);
  return {base[0] + u(rng), base[1] + u(rng), base[2] + u(rng)};
}

RasterTile generate_tile(int index, int size, int n_classes, const std::vector<double>& targets,
                         const SyntheticStyle& style, Rng& rng) {
  Canvas canvas(size);
  std::uniform_real_distribution<double> u(0.0, 1.0);

  // Background: tile-level base color plus a few soft low-contrast blobs.
  const Color bg = jitter(class_palette(0, n_classes), 18.0, rng);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) std::copy(bg.begin(), bg.end(), canvas.px(r, c));
  }
  const int n_blobs = 3;
  for (int b = 0; b < n_blobs; ++b) {
    const double cr = u(rng) * size;
    const double cc = u(rng) * size;
    const double sigma = (0.15 + 0.2 * u(rng)) * size;
    const Color delta = jitter({0.0, 0.0, 0.0}, 14.0, rng);
    for (int r = 0; r < size; ++r) {
      for (int c = 0; c < size; ++c) {
        const double d2 = ((r - cr) * (r - cr) + (c - cc) * (c - cc)) / (2.0 * sigma * sigma);
        const double w = std::exp(-d2);
        double* p = canvas.px(r, c);
        for (int k = 0; k < 3; ++k) p[k] += w * delta[k];
      }
    }
  }

  const double area = static_cast<double>(size) * size;

  // Decoys: background regions painted like class 1.
  if (n_classes >= 2 && style.decoy_fraction > 0.0) {
    double painted = 0.0;
    const double budget = style.decoy_fraction * area;
    for (int guard = 0; painted < budget && guard < 1000; ++guard) {
      Shape2d s = random_shape(1, n_classes, size, budget - painted, rng);
      const Color color = jitter(class_palette(1, n_classes), 22.0, rng);
      for_each_pixel(s, size, [&](int r, int c) {
        std::copy(color.begin(), color.end(), canvas.px(r, c));
        painted += 1.0;
      });
    }
  }

  // Foreground: repeatedly serve the class with the largest relative deficit,
  // painting only over background pixels.
  std::vector<double> counts(static_cast<std::size_t>(n_classes), 0.0);
  counts[0] = area;
  for (int guard = 0; guard < 20000; ++guard) {
    int best = -1;
    double best_deficit = 0.0;
    for (int k = 1; k < n_classes; ++k) {
      const double want = targets[static_cast<std::size_t>(k)] * area;
      const double deficit = (want - counts[static_cast<std::size_t>(k)]) / want;
      if (deficit > best_deficit) {
        best_deficit = deficit;
        best = k;
      }
    }
    if (best < 0) break;
    const double remaining = targets[static_cast<std::size_t>(best)] * area - counts[static_cast<std::size_t>(best)];
    Shape2d s = random_shape(best, n_classes, size, remaining, rng);
    const bool camouflaged = best == 1 && u(rng) < style.camouflage_probability;
    const Color color = camouflaged ? jitter(class_palette(0, n_classes), 22.0, rng)
                                    : jitter(class_palette(best, n_classes), 22.0, rng);
    for_each_pixel(s, size, [&](int r, int c) {
      if (canvas.labels.at(r, c) != 0) return;
      canvas.labels.at(r, c) = static_cast<SegmentationMap::Label>(best);
      std::copy(color.begin(), color.end(), canvas.px(r, c));
      counts[0] -= 1.0;
      counts[static_cast<std::size_t>(best)] += 1.0;
    });
  }

  RasterTile tile;
  char id[32];
  std::snprintf(id, sizeof(id), "tile_%04d", index);
  tile.id = id;
  tile.image = Image(size, size, 3);
  std::normal_distribution<double> noise(0.0, style.pixel_noise);
  for (int r = 0; r < size; ++r) {
    for (int c = 0; c < size; ++c) {
      const double* p = canvas.px(r, c);
      for (int k = 0; k < 3; ++k) {
        tile.image.at(r, c, k) = static_cast<std::uint8_t>(std::clamp(std::lround(p[k] + noise(rng)), 0L, 255L));
      }
    }
  }
  tile.ground_truth = std::move(canvas.labels);
  return tile;
}

ClassSchema synthetic_schema(int n_classes) {
  std::vector<ClassInfo> classes;
  for (int k = 0; k < n_classes; ++k) {
    ClassInfo info;
    info.id = k;
    if (k == 0) {
      info.name = "background";
      info.color = {0, 0, 0};
    } else if (n_classes > 2 && k == n_classes - 1) {
      info.name = "rare";
      info.color = {255, 255, 0};
    } else {
      info.name = n_classes == 2 ? "building" : "class_" + std::to_string(k);
      const auto base = class_palette(k, n_classes);
      info.color = {static_cast<std::uint8_t>(std::lround(base[0])), static_cast<std::uint8_t>(std::lround(base[1])),
                    static_cast<std::uint8_t>(std::lround(base[2]))};
      if (k == 1) info.color = {0, 0, 255};
    }
    classes.push_back(std::move(info));
  }
  return ClassSchema(std::move(classes));
}

}  // namespace

Dataset generate_synthetic_dataset(int n_tiles, int size, int n_classes, std::uint64_t seed,
                                   const SyntheticStyle& style) {
  if (n_classes < 2) throw ConfigError("synthetic dataset needs at least 2 classes");
  if (n_classes > 255) throw ConfigError("synthetic dataset supports at most 255 classes");
  if (n_tiles < 0) throw ConfigError("tile count must be non-negative");
  if (size < 16) throw ConfigError("synthetic tiles must be at least 16 pixels wide");
  const auto targets = synthetic_target_fractions(n_classes);
  Dataset dataset{synthetic_schema(n_classes), {}};
  dataset.tiles.reserve(static_cast<std::size_t>(n_tiles));
  for (int i = 0; i < n_tiles; ++i) {
    // One stream per tile keeps tiles independent of the total count.
    Rng rng(seed * 0x9E3779B97F4A7C15ULL + static_cast<std::uint64_t>(i) + 1);
    dataset.tiles.push_back(generate_tile(i, size, n_classes, targets, style, rng));
  }
  return dataset;
}

std::string dataset_digest(std::span<const RasterTile> tiles) {
  Sha256 h;
  for (const auto& t : tiles) {
    h.update(t.id);
    h.update_pod(t.image.rows()).update_pod(t.image.cols()).update_pod(t.image.channels());
    h.update(t.image.data());
    if (t.ground_truth) h.update(t.ground_truth->labels());
  }
  return h.hex();
}

std::vector<double> compute_class_frequencies(std::span<const RasterTile> tiles, ClassSchema& schema) {
  const int n = schema.size();
  std::vector<std::uint64_t> counts(static_cast<std::size_t>(n), 0);
  std::uint64_t total = 0;
  for (const auto& tile : tiles) {
    if (!tile.ground_truth) throw LoadError("tile " + tile.id + " has no ground truth");
    for (auto v : tile.ground_truth->labels()) {
      if (v >= n) throw SchemaMismatchError("tile " + tile.id + " has class id " + std::to_string(v) + " >= N");
      ++counts[v];
    }
    total += tile.ground_truth->size();
  }
  if (total == 0) throw LoadError("no labelled pixels to count");
  std::vector<double> freq(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    freq[static_cast<std::size_t>(k)] = static_cast<double>(counts[static_cast<std::size_t>(k)]) / total;
    if (counts[static_cast<std::size_t>(k)] == 0) {
      spdlog::warn("class {} ('{}') has no pixels in the training tiles", k, schema[k].name);
    }
  }
  // Renormalise away floating-point drift so the schema invariant holds.
  const double sum = std::accumulate(freq.begin(), freq.end(), 0.0);
  for (auto& f : freq) f /= sum;
  schema.set_frequencies(freq);
  return freq;
}

}  // namespace clickseg
