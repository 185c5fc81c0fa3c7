#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "clickseg/encoding.hpp"
#include "clickseg/raster.hpp"
#include "clickseg/sampling.hpp"
#include "clickseg/schema.hpp"

namespace clickseg {

enum class Architecture { kLinkNetR18, kUNetSmall, kSegNetLite };

std::string to_string(Architecture a);
Architecture architecture_from_string(const std::string& s);

struct BackboneSpec {
  Architecture architecture = Architecture::kLinkNetR18;
  int in_channels = 3;
  int n_classes = 2;
  // Channel count of the first encoder stage (64 for a full-width residual-18
  // encoder); deeper stages double it.
  int encoder_width = 64;

  void validate() const;
  // Total downsampling factor; inputs are padded to a multiple of it.
  [[nodiscard]] int stride() const;
  friend bool operator==(const BackboneSpec&, const BackboneSpec&) = default;
};

void to_json(nlohmann::json& j, const BackboneSpec& s);
void from_json(const nlohmann::json& j, BackboneSpec& s);

// Encoder-decoder segmentation network mapping (C+K) x H x W inputs to
// N x H x W logits. Inference never touches the weights, so one Model can
// serve concurrent forward() calls; training needs exclusive access.
class Model {
 public:
  struct Impl;

  // Deterministic initialisation for a fixed seed.
  static Model build(const BackboneSpec& spec, std::uint64_t seed);

  Model(Model&&) noexcept;
  Model& operator=(Model&&) noexcept;
  ~Model();

  [[nodiscard]] Model clone() const;
  [[nodiscard]] const BackboneSpec& spec() const;

  // Logits for one input. Spatial sizes that are not multiples of the
  // architecture stride are zero-padded and the output cropped back.
  [[nodiscard]] FloatStack forward(const FloatStack& input) const;

  [[nodiscard]] std::vector<std::uint8_t> serialize_weights() const;
  void load_weights(std::span<const std::uint8_t> blob);
  // SHA-256 over the serialised weights and buffers.
  [[nodiscard]] std::string weights_checksum() const;
  [[nodiscard]] std::size_t parameter_count() const;

  Impl& impl() { return *impl_; }
  [[nodiscard]] const Impl& impl() const { return *impl_; }

 private:
  explicit Model(std::unique_ptr<Impl> impl);
  std::unique_ptr<Impl> impl_;
};

// Copies every weight of `plain` (trained on image channels only) into a
// fresh model with `extra_channels` more inputs; the first convolution's
// weights for the extra channels are zero, so with all-zero annotations the
// adapted model reproduces `plain` exactly.
Model adapt_input_channels(const Model& plain, int extra_channels);

struct Prediction {
  SegmentationMap labels;
  FloatStack probabilities;  // N x H x W softmax
};

// Full-image inference with clicks. Clicks are encoded over the whole frame;
// images larger than `window` are processed in overlapping windows (25%
// overlap) whose logits are averaged. window <= 0 means single pass.
Prediction predict_map(const Model& model, const Image& image, std::span<const Click> clicks,
                       const EncodingConfig& encoding, const Normalization& normalization, int window);

struct ModelCheckpoint {
  Model model;
  ClassSchema schema;
  EncodingConfig encoding;
  Normalization normalization;
  int window = 512;          // inference window used at training crop size
  std::string train_digest;  // digest of the training configuration

  [[nodiscard]] int image_channels() const { return static_cast<int>(normalization.mean.size()); }
};

Prediction predict_map(const ModelCheckpoint& checkpoint, const Image& image, std::span<const Click> clicks);

// Single-file archive: magic, JSON metadata (spec, schema, encoding,
// normalisation, digests) and the weights blob. load_checkpoint verifies the
// weights digest and every shape before returning, so a damaged or
// mismatching file raises IntegrityError and nothing is half-loaded.
void save_checkpoint(const ModelCheckpoint& checkpoint, const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path);
ModelCheckpoint load_checkpoint(const std::filesystem::path& path, const ClassSchema& expected_schema);

// Float64 copy of a model in inference mode, for checking that every input
// channel (annotations included) takes part in the computation. Inputs are
// planar (C+K) x H x W.
class LossProbe {
 public:
  explicit LossProbe(const Model& model);
  ~LossProbe();
  LossProbe(const LossProbe&) = delete;
  LossProbe& operator=(const LossProbe&) = delete;

  // Mean per-pixel cross-entropy against `target`.
  [[nodiscard]] double loss(std::span<const double> input, const SegmentationMap& target) const;
  // d loss / d input, same layout as the input.
  [[nodiscard]] std::vector<double> input_gradient(std::span<const double> input,
                                                   const SegmentationMap& target) const;

 private:
  struct State;
  std::unique_ptr<State> state_;
};

}  // namespace clickseg
