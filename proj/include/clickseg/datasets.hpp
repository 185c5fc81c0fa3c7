#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "clickseg/raster.hpp"
#include "clickseg/schema.hpp"

namespace clickseg {

using Rng = std::mt19937_64;

struct RasterTile {
  std::string id;
  Image image;
  std::optional<SegmentationMap> ground_truth;
};

struct Patch {
  Image image;
  SegmentationMap labels;
  int row = 0;  // origin inside the parent tile
  int col = 0;
};

struct Dataset {
  ClassSchema schema;
  std::vector<RasterTile> tiles;
};

// Manifest: a JSON document
//   { "classes": [{"name": ..., "color": [r, g, b]}, ...],
//     "frequencies": [...]                              (optional)
//     "tiles": [{"id": ..., "image": "a.png", "label": "a_gt.png",
//                "label_mode": "color" | "index"}, ...] }
// Relative paths resolve against the manifest's directory. "label" is
// optional; "label_mode" defaults to "color".
Dataset load_dataset(const std::filesystem::path& manifest_path);

// Writes every tile as PNG (image + color-coded label) next to a manifest.
// Returns the manifest path.
std::filesystem::path write_dataset(const Dataset& dataset, const std::filesystem::path& directory);

// Converts a color-coded label raster to class ids. Unknown colors raise
// SchemaMismatchError naming the color and how many pixels carry it.
SegmentationMap labels_from_colors(const Image& label_raster, const ClassSchema& schema);
// Validates a class-id raster (single channel) against the schema.
SegmentationMap labels_from_index_raster(const Image& index_raster, const ClassSchema& schema);
Image render_labels(const SegmentationMap& labels, const ClassSchema& schema);

// 8-bit raster I/O (PNG, TIFF, anything OpenCV decodes). Channels come back
// in RGB order.
Image read_image(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);
std::vector<std::uint8_t> encode_png(const Image& image);
Image decode_image(std::span<const std::uint8_t> bytes);

// Deterministic shuffle-and-cut. Train size is round(ratio * n), kept within
// [1, n-1] so neither side is empty.
std::pair<std::vector<RasterTile>, std::vector<RasterTile>> split_train_val(std::vector<RasterTile> tiles,
                                                                            double ratio, std::uint64_t seed);

// Uniform random size x size crop of a tile with ground truth.
Patch sample_patch(const RasterTile& tile, int size, Rng& rng);

// Windows of side `window` covering `shape`, consecutive windows overlapping
// by `overlap` (fraction of the window). The last window in each axis is
// snapped to the far edge. A frame smaller than the window yields one region
// equal to the frame.
std::vector<Region> sliding_windows(Shape shape, int window, double overlap = 0.25);

struct SyntheticStyle {
  // Probability a foreground shape of class 1 borrows the background palette.
  double camouflage_probability = 0.4;
  // Target fraction of pixels covered by background decoys painted with the
  // class-1 palette.
  double decoy_fraction = 0.1;
  double pixel_noise = 6.0;
};

// Target pixel fractions the generator aims for: class N-1 is rare (3%),
// the background takes half, remaining classes share the rest. For N = 2 the
// foreground takes 25%.
std::vector<double> synthetic_target_fractions(int n_classes);

Dataset generate_synthetic_dataset(int n_tiles, int size, int n_classes, std::uint64_t seed,
                                   const SyntheticStyle& style = {});

// Stable digest of images and labels, used to pin generated datasets.
std::string dataset_digest(std::span<const RasterTile> tiles);

// Per-class pixel fractions over tiles with ground truth. Classes with zero
// pixels are recorded as 0 with a warning. The result is also stored in the
// schema.
std::vector<double> compute_class_frequencies(std::span<const RasterTile> tiles, ClassSchema& schema);

}  // namespace clickseg
