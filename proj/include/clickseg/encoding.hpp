#pragma once

#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "clickseg/raster.hpp"
#include "clickseg/sampling.hpp"
#include "clickseg/schema.hpp"

namespace clickseg {

enum class EncodingMode { kBinary, kDistance };
enum class ChannelLayout { kPerClass, kSingle };

std::string to_string(EncodingMode m);
std::string to_string(ChannelLayout c);
EncodingMode encoding_mode_from_string(const std::string& s);
ChannelLayout channel_layout_from_string(const std::string& s);

struct EncodingConfig {
  EncodingMode mode = EncodingMode::kDistance;
  ChannelLayout channels = ChannelLayout::kPerClass;
  int disk_radius = 5;   // BINARY: disk radius in pixels
  double d_max = 160.0;  // DISTANCE: truncation distance in pixels

  void validate() const;
  [[nodiscard]] int channel_count(int n_classes) const {
    return channels == ChannelLayout::kPerClass ? n_classes : 1;
  }
  friend bool operator==(const EncodingConfig&, const EncodingConfig&) = default;
};

void to_json(nlohmann::json& j, const EncodingConfig& c);
void from_json(const nlohmann::json& j, EncodingConfig& c);

// Per-channel image statistics applied after scaling intensities to [0,1].
struct Normalization {
  std::vector<float> mean;
  std::vector<float> stddev;

  static Normalization uniform(int channels, float mean = 0.5F, float stddev = 0.25F);
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

void to_json(nlohmann::json& j, const Normalization& n);
void from_json(const nlohmann::json& j, Normalization& n);

// Rasterises clicks into annotation channels over a frame of `shape`.
//
//   BINARY:   channel k is 1 within Euclidean distance disk_radius of any
//             class-k click, 0 elsewhere.
//   DISTANCE: channel k is max(0, 1 - d_k(p) / d_max), d_k(p) being the
//             exact Euclidean distance from p to the nearest class-k click.
//
// SINGLE layout puts every click, whatever its label, into one channel.
// PER_CLASS rejects marker labels with LabelError; clicks outside the frame
// raise CoordinateError.
FloatStack encode(std::span<const Click> clicks, Shape shape, int n_classes, const EncodingConfig& config);
FloatStack encode(std::span<const Click> clicks, Shape shape, const ClassSchema& schema, const EncodingConfig& config);

// Same values as encode() over the full frame, materialised only for
// `region`. Used by tiled inference.
FloatStack encode_region(std::span<const Click> clicks, Shape frame, const Region& region, int n_classes,
                         const EncodingConfig& config);

// Image scaled to [0,1], normalised per channel, followed by the annotation
// channels unchanged: (C + K) x H x W.
FloatStack assemble_network_input(const Image& image, const FloatStack& annotations, const Normalization& norm);

}  // namespace clickseg
