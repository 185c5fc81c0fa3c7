#include "clickseg/training.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <sstream>

#include "clickseg/error.hpp"
#include "clickseg/evaluation.hpp"
#include "model_impl.hpp"

namespace clickseg {

namespace {

torch::Tensor stack_inputs(const std::vector<FloatStack>& inputs) {
  const auto& first = inputs.front();
  auto t = torch::empty({static_cast<long>(inputs.size()), first.channels(), first.rows(), first.cols()}, torch::kFloat32);
  float* dst = t.data_ptr<float>();
  for (const auto& in : inputs) {
    std::memcpy(dst, in.data().data(), in.data().size_bytes());
    dst += in.data().size();
  }
  return t;
}

torch::Tensor stack_targets(const std::vector<SegmentationMap>& targets) {
  const auto& first = targets.front();
  auto t = torch::empty({static_cast<long>(targets.size()), first.rows(), first.cols()}, torch::kLong);
  auto* dst = t.data_ptr<std::int64_t>();
  for (const auto& m : targets) {
    for (auto v : m.labels()) *dst++ = v;
  }
  return t;
}

std::vector<float> flat_gradients(SegmentationNetImpl& net) {
  std::vector<float> out;
  for (const auto& p : net.parameters()) {
    if (!p.grad().defined()) {
      out.insert(out.end(), static_cast<std::size_t>(p.numel()), 0.0F);
      continue;
    }
    auto g = p.grad().contiguous();
    out.insert(out.end(), g.data_ptr<float>(), g.data_ptr<float>() + g.numel());
  }
  return out;
}

void check_model(const Model& model, const ClassSchema& schema, std::span<const RasterTile> tiles,
                 const TrainConfig& config) {
  config.validate();
  if (tiles.empty()) throw ConfigError("training needs at least one tile");
  const auto& spec = model.spec();
  const int c = tiles.front().image.channels();
  const int k = config.use_annotations ? config.encoding.channel_count(schema.size()) : 0;
  if (spec.n_classes != schema.size()) {
    throw ConfigError("model predicts " + std::to_string(spec.n_classes) + " classes, schema has " +
                      std::to_string(schema.size()));
  }
  if (spec.in_channels != c + k) {
    throw ConfigError("model takes " + std::to_string(spec.in_channels) + " input channels, data provides " +
                      std::to_string(c) + " image + " + std::to_string(k) + " annotation channels");
  }
}

// First pass without gradients and with empty annotations, then error clicks
// where it is wrong; returns the second-pass inputs.
std::vector<FloatStack> error_channel_inputs(SegmentationNetImpl& net, int stride, const TrainingBatch& batch,
                                             const TrainConfig& config, int n_classes,
                                             const Normalization& normalization, Rng& rng,
                                             std::vector<std::vector<Click>>& clicks_out) {
  torch::Tensor first;
  {
    torch::NoGradGuard no_grad;
    const bool was_training = net.is_training();
    net.eval();
    first = forward_padded(net, stack_inputs(batch.inputs), stride).argmax(1).to(torch::kUInt8).contiguous();
    net.train(was_training);
  }
  std::vector<FloatStack> inputs;
  clicks_out.clear();
  const int s = config.crop_size;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto* p = first[static_cast<long>(i)].data_ptr<std::uint8_t>();
    SegmentationMap pred(s, s, std::vector<SegmentationMap::Label>(p, p + static_cast<std::size_t>(s) * s));
    auto clicks = sample_error_clicks(batch.targets[i], pred, batch.click_counts[i], rng);
    if (clicks.empty()) {
      inputs.push_back(batch.inputs[i]);
    } else {
      const auto annotations = encode(clicks, {s, s}, n_classes, config.encoding);
      inputs.push_back(assemble_network_input(batch.images[i], annotations, normalization));
    }
    clicks_out.push_back(std::move(clicks));
  }
  return inputs;
}

SegmentationMap zero_click_labels(const Model& model, const Image& image, const Normalization& normalization,
                                  int annotation_channels, const EncodingConfig& encoding, int window) {
  if (annotation_channels > 0) {
    return predict_map(model, image, {}, encoding, normalization, window).labels;
  }
  const auto logits = model.forward(assemble_network_input(image, FloatStack(0, image.rows(), image.cols()), normalization));
  SegmentationMap out(image.rows(), image.cols());
  const std::size_t plane = logits.plane_size();
  for (std::size_t p = 0; p < plane; ++p) {
    int best = 0;
    for (int k = 1; k < logits.channels(); ++k) {
      if (logits.data()[k * plane + p] > logits.data()[static_cast<std::size_t>(best) * plane + p]) best = k;
    }
    out[p] = static_cast<SegmentationMap::Label>(best);
  }
  return out;
}

double zero_click_miou(const Model& model, std::span<const RasterTile> tiles, int n_classes,
                       const Normalization& normalization, int annotation_channels, const EncodingConfig& encoding,
                       int window) {
  if (tiles.empty()) return std::numeric_limits<double>::quiet_NaN();
  ConfusionMatrix cm(n_classes);
  for (const auto& t : tiles) {
    if (!t.ground_truth) continue;
    cm.add(zero_click_labels(model, t.image, normalization, annotation_channels, encoding, window), *t.ground_truth);
  }
  return mean_iou(cm);
}

TrainResult run_training(Model model, const ClassSchema& schema, std::span<const RasterTile> train_tiles,
                         std::span<const RasterTile> val_tiles, const TrainConfig& config,
                         const EpochCallback& on_epoch, bool error_channel) {
  const auto start = std::chrono::steady_clock::now();
  const int n = schema.size();
  const int k = config.use_annotations ? config.encoding.channel_count(n) : 0;
  const auto normalization = compute_normalization(train_tiles);
  auto& net = *model.impl().net;
  const int stride = model.spec().stride();

  torch::optim::SGD optimizer(net.parameters(), torch::optim::SGDOptions(config.base_lr).momentum(config.momentum));
  Rng rng(config.seed);
  const int steps = (config.samples_per_epoch + config.batch_size - 1) / config.batch_size;

  TrainReport report;
  report.train_digest = training_digest(config, model.spec(), schema, train_tiles);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    const double lr = config.lr_at(epoch);
    for (auto& group : optimizer.param_groups()) static_cast<torch::optim::SGDOptions&>(group.options()).lr(lr);
    net.train();
    double loss_sum = 0.0;
    for (int step = 0; step < steps; ++step) {
      const auto batch = make_training_batch(train_tiles, schema, config, normalization, rng);
      torch::Tensor x;
      if (error_channel) {
        std::vector<std::vector<Click>> clicks;
        x = stack_inputs(error_channel_inputs(net, stride, batch, config, n, normalization, rng, clicks));
      } else {
        x = stack_inputs(batch.inputs);
      }
      optimizer.zero_grad();
      auto loss = torch::nn::functional::cross_entropy(forward_padded(net, x, stride), stack_targets(batch.targets));
      const double value = loss.item<double>();
      if (!std::isfinite(value)) {
        std::ostringstream msg;
        msg << "training diverged at epoch " << epoch << ", step " << step << ": loss " << value << ", lr " << lr
            << ", batch digest " << batch.digest();
        throw TrainingDivergedError(msg.str());
      }
      loss.backward();
      optimizer.step();
      loss_sum += value;
    }
    net.eval();
    const double val = zero_click_miou(model, val_tiles, n, normalization, k, config.encoding, config.crop_size);
    report.epoch_loss.push_back(loss_sum / steps);
    report.epoch_val_miou.push_back(val);
    report.epoch_lr.push_back(lr);
    if (on_epoch) {
      on_epoch(EpochStats{epoch, lr, loss_sum / steps, val,
                          std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count()});
    }
  }
  net.eval();
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  ModelCheckpoint checkpoint{std::move(model), schema, config.encoding, normalization, config.crop_size,
                             report.train_digest};
  return TrainResult{std::move(report), std::move(checkpoint)};
}

}  // namespace

TrainResult train(Model model, const ClassSchema& schema, std::span<const RasterTile> train_tiles,
                  std::span<const RasterTile> val_tiles, const TrainConfig& config, const EpochCallback& on_epoch) {
  if (config.sampling.strategy == SamplingStrategy::kSingleError && config.use_annotations) {
    return train_error_channel_variant(std::move(model), schema, train_tiles, val_tiles, config, on_epoch);
  }
  check_model(model, schema, train_tiles, config);
  return run_training(std::move(model), schema, train_tiles, val_tiles, config, on_epoch, false);
}

TrainResult train_error_channel_variant(Model model, const ClassSchema& schema, std::span<const RasterTile> train_tiles,
                                        std::span<const RasterTile> val_tiles, const TrainConfig& config,
                                        const EpochCallback& on_epoch) {
  if (config.sampling.strategy != SamplingStrategy::kSingleError || !config.use_annotations) {
    throw ConfigError("the error-channel variant needs the single_error strategy with annotations");
  }
  check_model(model, schema, train_tiles, config);
  return run_training(std::move(model), schema, train_tiles, val_tiles, config, on_epoch, true);
}

double validation_miou(const ModelCheckpoint& checkpoint, std::span<const RasterTile> tiles) {
  return zero_click_miou(checkpoint.model, tiles, checkpoint.schema.size(), checkpoint.normalization,
                         checkpoint.encoding.channel_count(checkpoint.schema.size()), checkpoint.encoding,
                         checkpoint.window);
}

std::vector<float> step_gradients(const Model& model, const TrainingBatch& batch) {
  Model copy = model.clone();
  auto& net = *copy.impl().net;
  net.train();
  net.zero_grad();
  auto loss = torch::nn::functional::cross_entropy(forward_padded(net, stack_inputs(batch.inputs), copy.spec().stride()),
                                                   stack_targets(batch.targets));
  loss.backward();
  return flat_gradients(net);
}

ErrorStepGradients error_channel_step_gradients(const Model& model, const TrainingBatch& batch,
                                                const TrainConfig& config, const Normalization& normalization,
                                                Rng& rng) {
  Model copy = model.clone();
  auto& net = *copy.impl().net;
  net.train();
  net.zero_grad();
  ErrorStepGradients out;
  const auto inputs = error_channel_inputs(net, copy.spec().stride(), batch, config, copy.spec().n_classes,
                                           normalization, rng, out.clicks);
  auto loss = torch::nn::functional::cross_entropy(forward_padded(net, stack_inputs(inputs), copy.spec().stride()),
                                                   stack_targets(batch.targets));
  loss.backward();
  out.loss = loss.item<double>();
  out.gradients = flat_gradients(net);
  return out;
}

}  // namespace clickseg
