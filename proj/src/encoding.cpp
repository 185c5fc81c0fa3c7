#include "clickseg/encoding.hpp"

#include <algorithm>
#include <cmath>

#include <nlohmann/json.hpp>

#include "clickseg/error.hpp"

namespace clickseg {

std::string to_string(EncodingMode m) { return m == EncodingMode::kBinary ? "binary" : "distance"; }

std::string to_string(ChannelLayout c) { return c == ChannelLayout::kPerClass ? "per_class" : "single"; }

EncodingMode encoding_mode_from_string(const std::string& s) {
  if (s == "binary" || s == "BINARY") return EncodingMode::kBinary;
  if (s == "distance" || s == "DISTANCE") return EncodingMode::kDistance;
  throw ConfigError("unknown encoding mode '" + s + "'");
}

ChannelLayout channel_layout_from_string(const std::string& s) {
  if (s == "per_class" || s == "PER_CLASS") return ChannelLayout::kPerClass;
  if (s == "single" || s == "SINGLE") return ChannelLayout::kSingle;
  throw ConfigError("unknown channel layout '" + s + "'");
}

void EncodingConfig::validate() const {
  if (disk_radius < 1) throw ConfigError("disk_radius must be >= 1");
  if (!(d_max >= 1.0)) throw ConfigError("d_max must be >= 1");
}

void to_json(nlohmann::json& j, const EncodingConfig& c) {
  j = {{"mode", to_string(c.mode)},
       {"channels", to_string(c.channels)},
       {"disk_radius", c.disk_radius},
       {"d_max", c.d_max}};
}

void from_json(const nlohmann::json& j, EncodingConfig& c) {
  c = EncodingConfig{};
  if (j.contains("mode")) c.mode = encoding_mode_from_string(j.at("mode").get<std::string>());
  if (j.contains("channels")) c.channels = channel_layout_from_string(j.at("channels").get<std::string>());
  c.disk_radius = j.value("disk_radius", c.disk_radius);
  c.d_max = j.value("d_max", c.d_max);
  c.validate();
}

Normalization Normalization::uniform(int channels, float mean, float stddev) {
  return {std::vector<float>(static_cast<std::size_t>(channels), mean),
          std::vector<float>(static_cast<std::size_t>(channels), stddev)};
}

void to_json(nlohmann::json& j, const Normalization& n) { j = {{"mean", n.mean}, {"stddev", n.stddev}}; }

void from_json(const nlohmann::json& j, Normalization& n) {
  n.mean = j.at("mean").get<std::vector<float>>();
  n.stddev = j.at("stddev").get<std::vector<float>>();
}

FloatStack encode_region(std::span<const Click> clicks, Shape frame, const Region& region, int n_classes,
                         const EncodingConfig& config) {
  config.validate();
  if (region.row < 0 || region.col < 0 || region.row + region.rows > frame.rows ||
      region.col + region.cols > frame.cols) {
    throw DimensionError("encoding region lies outside the frame");
  }
  const bool per_class = config.channels == ChannelLayout::kPerClass;
  for (const auto& click : clicks) {
    if (!frame.contains(click.row, click.col)) {
      throw CoordinateError("click (" + std::to_string(click.row) + "," + std::to_string(click.col) +
                            ") lies outside the " + std::to_string(frame.rows) + "x" + std::to_string(frame.cols) +
                            " frame");
    }
    if (per_class && (click.label < 0 || click.label >= n_classes)) {
      throw LabelError("per-class encoding needs a class label in [0," + std::to_string(n_classes) + "), got " +
                       std::to_string(click.label));
    }
  }

  FloatStack out(config.channel_count(n_classes), region.rows, region.cols);
  const double reach = config.mode == EncodingMode::kBinary ? config.disk_radius : config.d_max;
  const auto span = static_cast<int>(std::ceil(reach));
  const double reach2 = reach * reach;

  for (const auto& click : clicks) {
    const int k = per_class ? click.label : 0;
    // Clicks outside the region still reach into it.
    const int r_lo = std::max(region.row, click.row - span);
    const int r_hi = std::min(region.row + region.rows - 1, click.row + span);
    const int c_lo = std::max(region.col, click.col - span);
    const int c_hi = std::min(region.col + region.cols - 1, click.col + span);
    for (int r = r_lo; r <= r_hi; ++r) {
      const double dr = r - click.row;
      for (int c = c_lo; c <= c_hi; ++c) {
        const double dc = c - click.col;
        const double d2 = dr * dr + dc * dc;
        float& v = out.at(k, r - region.row, c - region.col);
        if (config.mode == EncodingMode::kBinary) {
          if (d2 <= reach2) v = 1.0F;
        } else if (d2 < reach2) {
          v = std::max(v, static_cast<float>(1.0 - std::sqrt(d2) / config.d_max));
        }
      }
    }
  }
  return out;
}

FloatStack encode(std::span<const Click> clicks, Shape shape, int n_classes, const EncodingConfig& config) {
  return encode_region(clicks, shape, Region{0, 0, shape.rows, shape.cols}, n_classes, config);
}

FloatStack encode(std::span<const Click> clicks, Shape shape, const ClassSchema& schema, const EncodingConfig& config) {
  return encode(clicks, shape, schema.size(), config);
}

FloatStack assemble_network_input(const Image& image, const FloatStack& annotations, const Normalization& norm) {
  if (image.shape() != annotations.shape()) {
    throw DimensionError("image " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                         " and annotations " + std::to_string(annotations.rows()) + "x" +
                         std::to_string(annotations.cols()) + " differ in shape");
  }
  const int c_img = image.channels();
  if (norm.mean.size() != static_cast<std::size_t>(c_img) || norm.stddev.size() != static_cast<std::size_t>(c_img)) {
    throw DimensionError("normalization has " + std::to_string(norm.mean.size()) + " channels, image has " +
                         std::to_string(c_img));
  }
  FloatStack out(c_img + annotations.channels(), image.rows(), image.cols());
  const auto pixels = image.data();
  const std::size_t plane = out.plane_size();
  for (int ch = 0; ch < c_img; ++ch) {
    auto dst = out.plane(ch);
    const float scale = 1.0F / (255.0F * norm.stddev[static_cast<std::size_t>(ch)]);
    const float shift = norm.mean[static_cast<std::size_t>(ch)] / norm.stddev[static_cast<std::size_t>(ch)];
    for (std::size_t p = 0; p < plane; ++p) {
      dst[p] = static_cast<float>(pixels[p * c_img + ch]) * scale - shift;
    }
  }
  for (int k = 0; k < annotations.channels(); ++k) {
    std::copy(annotations.plane(k).begin(), annotations.plane(k).end(), out.plane(c_img + k).begin());
  }
  return out;
}

}  // namespace clickseg
