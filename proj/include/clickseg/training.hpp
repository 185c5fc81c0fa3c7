#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "clickseg/datasets.hpp"
#include "clickseg/encoding.hpp"
#include "clickseg/model.hpp"
#include "clickseg/sampling.hpp"

namespace clickseg {

struct TrainConfig {
  int epochs = 50;
  int samples_per_epoch = 10000;
  int batch_size = 8;
  int crop_size = 512;
  double base_lr = 0.05;
  std::vector<int> lr_milestones{15, 30, 45};
  double lr_decay = 0.1;
  double momentum = 0.9;
  SamplingConfig sampling;
  EncodingConfig encoding;
  bool flip_horizontal = true;
  bool flip_vertical = true;
  // false trains a plain image-only network (no annotation channels).
  bool use_annotations = true;
  std::uint64_t seed = 0;

  void validate() const;
  // base_lr * lr_decay^(number of milestones <= epoch); epochs count from 0.
  [[nodiscard]] double lr_at(int epoch) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

// Reads a YAML or JSON document with the TrainConfig keys. Unknown keys are
// rejected so typos do not silently fall back to defaults.
TrainConfig load_train_config(const std::filesystem::path& path);
// Converts a YAML node tree (given as text) to JSON, shared by the config
// and suite loaders.
nlohmann::json yaml_to_json(const std::string& yaml_text);

// Everything the `train` command needs besides the data: the training
// config plus backbone choice and the train/validation split. File layout:
// the TrainConfig keys at top level, plus optional
//   backbone: {architecture: unet_small, encoder_width: 16}
//   split:    {ratio: 0.8, seed: 0}
struct TrainJob {
  TrainConfig train;
  Architecture architecture = Architecture::kLinkNetR18;
  int encoder_width = 64;
  double split_ratio = 0.8;
  std::uint64_t split_seed = 0;

  // Backbone for `schema` and `image_channels` input bands.
  [[nodiscard]] BackboneSpec backbone(const ClassSchema& schema, int image_channels) const;
};

void to_json(nlohmann::json& j, const TrainJob& job);
void from_json(const nlohmann::json& j, TrainJob& job);
TrainJob load_train_job(const std::filesystem::path& path);

// Image statistics over the given tiles (per channel mean and standard
// deviation of intensities scaled to [0,1]).
Normalization compute_normalization(std::span<const RasterTile> tiles);

struct TrainingBatch {
  std::vector<Image> images;               // augmented crops
  std::vector<FloatStack> inputs;          // (C+K) x S x S each
  std::vector<SegmentationMap> targets;    // dense S x S labels
  std::vector<std::vector<Click>> clicks;  // clicks behind each element's annotation channels
  std::vector<int> click_counts;           // drawn counts (error-channel clicks are sampled later)

  [[nodiscard]] std::size_t size() const { return inputs.size(); }
  // Digest of inputs and targets, reported when training diverges.
  [[nodiscard]] std::string digest() const;
};

// Per element: pick a tile uniformly, crop, flip, draw the click count, draw
// clicks from the flipped ground truth, encode and assemble. Clicks are
// inputs only; the target is always the full label crop. The error-channel
// strategy leaves the annotation channel empty here.
TrainingBatch make_training_batch(std::span<const RasterTile> tiles, const ClassSchema& schema,
                                  const TrainConfig& config, const Normalization& normalization, Rng& rng);

struct EpochStats {
  int epoch = 0;
  double lr = 0.0;
  double mean_loss = 0.0;
  double val_miou = 0.0;  // zero clicks
  double seconds = 0.0;
};

struct TrainReport {
  std::vector<double> epoch_loss;
  std::vector<double> epoch_val_miou;
  std::vector<double> epoch_lr;
  double wall_seconds = 0.0;
  std::string checkpoint_path;
  std::string train_digest;
};

void to_json(nlohmann::json& j, const TrainReport& r);

struct TrainResult {
  TrainReport report;
  ModelCheckpoint checkpoint;
};

using EpochCallback = std::function<void(const EpochStats&)>;

// Digest of everything that determines a training run: config, backbone,
// schema and the training tiles.
std::string training_digest(const TrainConfig& config, const BackboneSpec& spec, const ClassSchema& schema,
                            std::span<const RasterTile> train_tiles);

// SGD with momentum on mean pixel cross-entropy, step learning-rate schedule,
// zero-click validation after each epoch. Dispatches to the error-channel
// variant for the SINGLE_ERROR strategy. A non-finite loss raises
// TrainingDivergedError naming the learning rate and the batch digest.
TrainResult train(Model model, const ClassSchema& schema, std::span<const RasterTile> train_tiles,
                  std::span<const RasterTile> val_tiles, const TrainConfig& config,
                  const EpochCallback& on_epoch = {});

// Two passes per batch: a gradient-free first pass with empty annotations
// finds mislabelled pixels, error clicks are sampled there, and only the
// second pass is back-propagated.
TrainResult train_error_channel_variant(Model model, const ClassSchema& schema, std::span<const RasterTile> train_tiles,
                                        std::span<const RasterTile> val_tiles, const TrainConfig& config,
                                        const EpochCallback& on_epoch = {});

// Zero-click mean IoU over tiles (confusion matrices aggregated).
double validation_miou(const ModelCheckpoint& checkpoint, std::span<const RasterTile> tiles);

// Test hooks. Both work on a copy of the model in training mode and return
// the flattened parameter gradients of one step's loss.
struct ErrorStepGradients {
  std::vector<std::vector<Click>> clicks;  // error clicks drawn for each element
  std::vector<float> gradients;
  double loss = 0.0;
};
ErrorStepGradients error_channel_step_gradients(const Model& model, const TrainingBatch& batch,
                                                const TrainConfig& config, const Normalization& normalization,
                                                Rng& rng);
std::vector<float> step_gradients(const Model& model, const TrainingBatch& batch);

}  // namespace clickseg
