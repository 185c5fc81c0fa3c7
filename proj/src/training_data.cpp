// Torch-free half of the training module: configuration, normalisation
// statistics and batch construction.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>
#include <yaml-cpp/yaml.h>

#include "clickseg/digest.hpp"
#include "clickseg/error.hpp"
#include "clickseg/training.hpp"

namespace clickseg {

using nlohmann::json;

void TrainConfig::validate() const {
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (samples_per_epoch < 1) throw ConfigError("samples_per_epoch must be >= 1");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (crop_size < 1) throw ConfigError("crop_size must be >= 1");
  if (!(base_lr > 0.0)) throw ConfigError("base_lr must be positive");
  if (!(lr_decay > 0.0 && lr_decay < 1.0)) throw ConfigError("lr_decay must lie in (0,1)");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0,1)");
  for (std::size_t i = 0; i < lr_milestones.size(); ++i) {
    if (lr_milestones[i] < 0 || lr_milestones[i] >= epochs) throw ConfigError("lr milestones must lie in [0, epochs)");
    if (i > 0 && lr_milestones[i] <= lr_milestones[i - 1]) {
      throw ConfigError("lr milestones must be strictly increasing");
    }
  }
  sampling.validate();
  encoding.validate();
  const bool single = sampling.strategy == SamplingStrategy::kSingleBorder ||
                      sampling.strategy == SamplingStrategy::kSingleError;
  if (single != (encoding.channels == ChannelLayout::kSingle)) {
    throw ConfigError("strategy " + to_string(sampling.strategy) + " needs the " +
                      (single ? std::string("single") : std::string("per_class")) + " channel layout");
  }
}

double TrainConfig::lr_at(int epoch) const {
  const auto passed = std::count_if(lr_milestones.begin(), lr_milestones.end(), [&](int m) { return m <= epoch; });
  return base_lr * std::pow(lr_decay, static_cast<double>(passed));
}

namespace {

void to_json(json& j, const SamplingConfig& s) {
  j = {{"strategy", to_string(s.strategy)},
       {"max_clicks", s.max_clicks},
       {"zero_probability", s.zero_probability},
       {"frequency_balanced", s.frequency_balanced}};
}

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a mapping");
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError("unknown key '" + key + "' in " + where);
  }
}

SamplingConfig sampling_from_json(const json& j) {
  reject_unknown(j, {"strategy", "max_clicks", "zero_probability", "frequency_balanced"}, "sampling");
  SamplingConfig s;
  if (j.contains("strategy")) s.strategy = sampling_strategy_from_string(j.at("strategy").get<std::string>());
  s.max_clicks = j.value("max_clicks", s.max_clicks);
  s.zero_probability = j.value("zero_probability", s.zero_probability);
  s.frequency_balanced = j.value("frequency_balanced", s.frequency_balanced);
  return s;
}

}  // namespace

void to_json(json& j, const TrainConfig& c) {
  json sampling;
  to_json(sampling, c.sampling);
  j = {{"epochs", c.epochs},
       {"samples_per_epoch", c.samples_per_epoch},
       {"batch_size", c.batch_size},
       {"crop_size", c.crop_size},
       {"base_lr", c.base_lr},
       {"lr_milestones", c.lr_milestones},
       {"lr_decay", c.lr_decay},
       {"momentum", c.momentum},
       {"sampling", sampling},
       {"encoding", c.encoding},
       {"flip_horizontal", c.flip_horizontal},
       {"flip_vertical", c.flip_vertical},
       {"use_annotations", c.use_annotations},
       {"seed", c.seed}};
}

void from_json(const json& j, TrainConfig& c) {
  reject_unknown(j,
                 {"epochs", "samples_per_epoch", "batch_size", "crop_size", "base_lr", "lr_milestones", "lr_decay",
                  "momentum", "sampling", "encoding", "flip_horizontal", "flip_vertical", "use_annotations", "seed"},
                 "training config");
  c = TrainConfig{};
  c.epochs = j.value("epochs", c.epochs);
  c.samples_per_epoch = j.value("samples_per_epoch", c.samples_per_epoch);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.crop_size = j.value("crop_size", c.crop_size);
  c.base_lr = j.value("base_lr", c.base_lr);
  c.lr_milestones = j.value("lr_milestones", c.lr_milestones);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.momentum = j.value("momentum", c.momentum);
  if (j.contains("sampling")) c.sampling = sampling_from_json(j.at("sampling"));
  if (j.contains("encoding")) {
    reject_unknown(j.at("encoding"), {"mode", "channels", "disk_radius", "d_max"}, "encoding");
    c.encoding = j.at("encoding").get<EncodingConfig>();
  }
  c.flip_horizontal = j.value("flip_horizontal", c.flip_horizontal);
  c.flip_vertical = j.value("flip_vertical", c.flip_vertical);
  c.use_annotations = j.value("use_annotations", c.use_annotations);
  c.seed = j.value("seed", c.seed);
}

namespace {

json scalar_to_json(const YAML::Node& node) {
  const std::string& text = node.Scalar();
  if (node.Tag() == "!") return text;  // quoted
  if (text == "~" || text == "null" || text.empty()) return nullptr;
  if (text == "true" || text == "True") return true;
  if (text == "false" || text == "False") return false;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  try {
    std::size_t used = 0;
    const double v = std::stod(text, &used);
    if (used == text.size()) return v;
  } catch (const std::exception&) {
  }
  return text;
}

json node_to_json(const YAML::Node& node) {
  switch (node.Type()) {
    case YAML::NodeType::Null:
    case YAML::NodeType::Undefined:
      return nullptr;
    case YAML::NodeType::Scalar:
      return scalar_to_json(node);
    case YAML::NodeType::Sequence: {
      json a = json::array();
      for (const auto& item : node) a.push_back(node_to_json(item));
      return a;
    }
    case YAML::NodeType::Map: {
      json o = json::object();
      for (const auto& kv : node) o[kv.first.as<std::string>()] = node_to_json(kv.second);
      return o;
    }
  }
  return nullptr;
}

}  // namespace

json yaml_to_json(const std::string& yaml_text) {
  try {
    return node_to_json(YAML::Load(yaml_text));
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("malformed YAML: ") + e.what());
  }
}

namespace {

template <typename T>
T load_document(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("config not found: " + path.string());
  std::stringstream text;
  text << in.rdbuf();
  // JSON is a subset of YAML, so one parser serves both.
  const json doc = yaml_to_json(text.str());
  try {
    return doc.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

}  // namespace

TrainConfig load_train_config(const std::filesystem::path& path) {
  auto config = load_document<TrainConfig>(path);
  config.validate();
  return config;
}

BackboneSpec TrainJob::backbone(const ClassSchema& schema, int image_channels) const {
  BackboneSpec spec;
  spec.architecture = architecture;
  spec.encoder_width = encoder_width;
  spec.n_classes = schema.size();
  spec.in_channels = image_channels + (train.use_annotations ? train.encoding.channel_count(schema.size()) : 0);
  spec.validate();
  return spec;
}

void to_json(json& j, const TrainJob& job) {
  j = job.train;
  j["backbone"] = {{"architecture", to_string(job.architecture)}, {"encoder_width", job.encoder_width}};
  j["split"] = {{"ratio", job.split_ratio}, {"seed", job.split_seed}};
}

void from_json(const json& j, TrainJob& job) {
  job = TrainJob{};
  json rest = j.is_null() ? json::object() : j;
  if (!rest.is_object()) throw ConfigError("training config must be a mapping");
  if (rest.contains("backbone")) {
    const auto b = rest.at("backbone");
    reject_unknown(b, {"architecture", "encoder_width"}, "backbone");
    if (b.contains("architecture")) job.architecture = architecture_from_string(b.at("architecture").get<std::string>());
    job.encoder_width = b.value("encoder_width", job.encoder_width);
    rest.erase("backbone");
  }
  if (rest.contains("split")) {
    const auto s = rest.at("split");
    reject_unknown(s, {"ratio", "seed"}, "split");
    job.split_ratio = s.value("ratio", job.split_ratio);
    job.split_seed = s.value("seed", job.split_seed);
    rest.erase("split");
  }
  job.train = rest.get<TrainConfig>();
}

TrainJob load_train_job(const std::filesystem::path& path) {
  auto job = load_document<TrainJob>(path);
  job.train.validate();
  return job;
}

Normalization compute_normalization(std::span<const RasterTile> tiles) {
  if (tiles.empty()) throw ConfigError("cannot compute image statistics without tiles");
  const int channels = tiles.front().image.channels();
  std::vector<double> sum(static_cast<std::size_t>(channels), 0.0);
  std::vector<double> sq(static_cast<std::size_t>(channels), 0.0);
  double count = 0.0;
  for (const auto& t : tiles) {
    if (t.image.channels() != channels) throw DimensionError("tiles disagree on the channel count");
    const auto px = t.image.data();
    for (std::size_t i = 0; i < px.size(); ++i) {
      const double v = px[i] / 255.0;
      sum[i % static_cast<std::size_t>(channels)] += v;
      sq[i % static_cast<std::size_t>(channels)] += v * v;
    }
    count += static_cast<double>(t.image.shape().area());
  }
  Normalization n;
  for (int c = 0; c < channels; ++c) {
    const double mean = sum[static_cast<std::size_t>(c)] / count;
    const double var = std::max(0.0, sq[static_cast<std::size_t>(c)] / count - mean * mean);
    n.mean.push_back(static_cast<float>(mean));
    n.stddev.push_back(static_cast<float>(std::max(std::sqrt(var), 1e-3)));
  }
  return n;
}

std::string TrainingBatch::digest() const {
  Sha256 h;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const auto in = inputs[i].data();
    h.update(std::span<const std::uint8_t>(reinterpret_cast<const std::uint8_t*>(in.data()), in.size_bytes()));
    h.update(std::span<const std::uint8_t>(targets[i].labels().data(), targets[i].labels().size()));
  }
  return h.hex();
}

TrainingBatch make_training_batch(std::span<const RasterTile> tiles, const ClassSchema& schema,
                                  const TrainConfig& config, const Normalization& normalization, Rng& rng) {
  if (tiles.empty()) throw ConfigError("no training tiles");
  const int n = schema.size();
  const int k = config.use_annotations ? config.encoding.channel_count(n) : 0;
  TrainingBatch batch;
  std::uniform_int_distribution<std::size_t> pick_tile(0, tiles.size() - 1);
  std::bernoulli_distribution coin(0.5);

  for (int b = 0; b < config.batch_size; ++b) {
    Patch patch = sample_patch(tiles[pick_tile(rng)], config.crop_size, rng);
    if (config.flip_horizontal && coin(rng)) {
      patch.image.flip_horizontal();
      patch.labels.flip_horizontal();
    }
    if (config.flip_vertical && coin(rng)) {
      patch.image.flip_vertical();
      patch.labels.flip_vertical();
    }

    // Clicks come from the augmented labels, so they stay aligned.
    // Drawn even for plain models so both see the same crop sequence.
    int count = sample_click_count(config.sampling, rng);
    if (!config.use_annotations) count = 0;
    std::vector<Click> clicks;
    switch (config.sampling.strategy) {
      case SamplingStrategy::kInside:
        clicks = sample_inside_clicks(patch.labels, count, schema, config.sampling.frequency_balanced, rng);
        break;
      case SamplingStrategy::kBorder:
      case SamplingStrategy::kSingleBorder:
        try {
          clicks = sample_border_clicks(patch.labels, count, rng);
        } catch (const NoBoundaryError&) {
          clicks.clear();  // single-class crop: nothing to click on
        }
        if (config.sampling.strategy == SamplingStrategy::kSingleBorder) {
          for (auto& c : clicks) c.label = kBorderLabel;
        }
        break;
      case SamplingStrategy::kSingleError:
        break;  // needs a first-pass prediction
    }

    const FloatStack annotations =
        k > 0 ? encode(clicks, patch.labels.shape(), n, config.encoding) : FloatStack(0, config.crop_size, config.crop_size);
    batch.inputs.push_back(assemble_network_input(patch.image, annotations, normalization));
    batch.images.push_back(std::move(patch.image));
    batch.targets.push_back(std::move(patch.labels));
    batch.clicks.push_back(std::move(clicks));
    batch.click_counts.push_back(count);
  }
  return batch;
}

std::string training_digest(const TrainConfig& config, const BackboneSpec& spec, const ClassSchema& schema,
                            std::span<const RasterTile> train_tiles) {
  const json doc{{"train", config}, {"backbone", spec}, {"schema", schema}, {"tiles", dataset_digest(train_tiles)}};
  return sha256_hex(doc.dump());
}

void to_json(json& j, const TrainReport& r) {
  j = {{"epoch_loss", r.epoch_loss},
       {"epoch_val_miou", r.epoch_val_miou},
       {"epoch_lr", r.epoch_lr},
       {"wall_seconds", r.wall_seconds},
       {"checkpoint_path", r.checkpoint_path},
       {"train_digest", r.train_digest}};
}

}  // namespace clickseg
