#include <doctest.h>

#include <unistd.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "clickseg/datasets.hpp"
#include "clickseg/encoding.hpp"
#include "clickseg/training.hpp"

using namespace clickseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("clickseg_training_" + std::to_string(getpid()));
  fs::create_directories(dir);
  return dir / name;
}

fs::path write_text(const std::string& name, const std::string& text) {
  const auto p = scratch(name);
  std::ofstream(p) << text;
  return p;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.epochs = 2;
  c.samples_per_epoch = 8;
  c.batch_size = 4;
  c.crop_size = 32;
  c.lr_milestones = {1};
  c.sampling.max_clicks = 6;
  c.encoding.d_max = 16;
  return c;
}

bool all_zero(const FloatStack& s, int from_channel) {
  for (int k = from_channel; k < s.channels(); ++k) {
    for (float v : s.plane(k)) {
      if (v != 0.0F) return false;
    }
  }
  return true;
}

double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

}  // namespace

TEST_CASE("step schedule with the default recipe") {
  const TrainConfig c;
  CHECK(c.epochs == 50);
  CHECK(c.batch_size == 8);
  CHECK(c.crop_size == 512);
  CHECK(c.lr_at(0) == doctest::Approx(0.05));
  CHECK(c.lr_at(14) == doctest::Approx(0.05));
  CHECK(c.lr_at(15) == doctest::Approx(0.005));
  CHECK(c.lr_at(16) == doctest::Approx(0.005));
  CHECK(c.lr_at(29) == doctest::Approx(0.005));
  CHECK(c.lr_at(30) == doctest::Approx(0.0005));
  CHECK(c.lr_at(45) == doctest::Approx(0.00005));
  CHECK(c.lr_at(49) == doctest::Approx(0.00005));
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config validation") {
  auto bad = [](auto mutate) {
    TrainConfig c;
    mutate(c);
    return c;
  };
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.batch_size = 0; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.base_lr = -1; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lr_milestones = {30, 15}; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.lr_milestones = {50}; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.sampling.zero_probability = 1.5; }).validate(), ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.sampling.strategy = SamplingStrategy::kSingleBorder; }).validate(),
                  ConfigError);
  CHECK_THROWS_AS(bad([](TrainConfig& c) { c.encoding.channels = ChannelLayout::kSingle; }).validate(), ConfigError);
  CHECK_NOTHROW(bad([](TrainConfig& c) {
                  c.sampling.strategy = SamplingStrategy::kSingleError;
                  c.encoding.channels = ChannelLayout::kSingle;
                }).validate());
}

TEST_CASE("YAML configs") {
  const auto path = write_text("job.yaml", R"(
epochs: 4
samples_per_epoch: 64
batch_size: 2
crop_size: 64
base_lr: 0.01
lr_milestones: [2, 3]
lr_decay: 0.5
sampling: {strategy: border, max_clicks: 7, zero_probability: 0.5, frequency_balanced: false}
encoding: {mode: binary, channels: per_class, disk_radius: 4, d_max: 50}
backbone: {architecture: segnet_lite, encoder_width: 12}
split: {ratio: 0.75, seed: 9}
seed: 3
)");
  const auto job = load_train_job(path);
  CHECK(job.train.epochs == 4);
  CHECK(job.train.samples_per_epoch == 64);
  CHECK(job.train.base_lr == doctest::Approx(0.01));
  CHECK(job.train.lr_milestones == std::vector<int>{2, 3});
  CHECK(job.train.sampling.strategy == SamplingStrategy::kBorder);
  CHECK(job.train.sampling.max_clicks == 7);
  CHECK_FALSE(job.train.sampling.frequency_balanced);
  CHECK(job.train.encoding.mode == EncodingMode::kBinary);
  CHECK(job.train.encoding.disk_radius == 4);
  CHECK(job.train.seed == 3);
  CHECK(job.architecture == Architecture::kSegNetLite);
  CHECK(job.encoder_width == 12);
  CHECK(job.split_ratio == doctest::Approx(0.75));
  CHECK(job.split_seed == 9);
  const auto spec = job.backbone(potsdam_schema(), 3);
  CHECK(spec.in_channels == 9);
  CHECK(spec.n_classes == 6);

  // The same document as JSON round-trips.
  const nlohmann::json j = job;
  const auto again = j.get<TrainJob>();
  CHECK(nlohmann::json(again) == j);

  SUBCASE("unknown keys are rejected") {
    CHECK_THROWS_AS(load_train_config(write_text("typo.yaml", "epocs: 3\n")), ConfigError);
    CHECK_THROWS_AS(load_train_job(write_text("typo2.yaml", "sampling: {max_click: 3}\n")), ConfigError);
  }
  SUBCASE("invalid values are rejected") {
    CHECK_THROWS_AS(load_train_config(write_text("neg.yaml", "batch_size: -2\n")), ConfigError);
    CHECK_THROWS_AS(load_train_config(write_text("mode.yaml", "encoding: {mode: gaussian}\n")), ConfigError);
    CHECK_THROWS_AS(load_train_config(write_text("type.yaml", "epochs: many\n")), ConfigError);
  }
  SUBCASE("missing file") { CHECK_THROWS_AS(load_train_config(scratch("none.yaml")), LoadError); }
}

TEST_CASE("yaml_to_json keeps quoted scalars as strings") {
  const auto j = yaml_to_json("a: 1\nb: 2.5\nc: '7'\nd: [x, 3]\ne: true\n");
  CHECK(j["a"] == 1);
  CHECK(j["b"] == 2.5);
  CHECK(j["c"] == "7");
  CHECK(j["d"][0] == "x");
  CHECK(j["d"][1] == 3);
  CHECK(j["e"] == true);
}

TEST_CASE("normalization statistics equal a direct computation") {
  const auto ds = generate_synthetic_dataset(5, 24, 3, 2);
  const auto norm = compute_normalization(ds.tiles);
  REQUIRE(norm.mean.size() == 3);
  for (int ch = 0; ch < 3; ++ch) {
    double s = 0, s2 = 0, n = 0;
    for (const auto& t : ds.tiles) {
      for (int r = 0; r < t.image.rows(); ++r) {
        for (int c = 0; c < t.image.cols(); ++c) {
          const double v = t.image.at(r, c, ch) / 255.0;
          s += v;
          s2 += v * v;
          n += 1;
        }
      }
    }
    const double mean = s / n;
    const double sd = std::sqrt(std::max(0.0, s2 / n - mean * mean));
    CHECK(norm.mean[ch] == doctest::Approx(mean).epsilon(1e-5));
    CHECK(norm.stddev[ch] == doctest::Approx(std::max(sd, 1e-3)).epsilon(1e-4));
  }
}

TEST_CASE("batch layout for six classes") {
  auto ds = generate_synthetic_dataset(4, 40, 6, 3);
  auto c = tiny_config();
  c.batch_size = 8;
  const auto norm = compute_normalization(ds.tiles);
  Rng rng(1);
  const auto batch = make_training_batch(ds.tiles, ds.schema, c, norm, rng);
  REQUIRE(batch.size() == 8);
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(batch.inputs[i].channels() == 9);
    CHECK(batch.inputs[i].shape() == Shape{32, 32});
    CHECK(batch.targets[i].shape() == Shape{32, 32});
    CHECK(batch.images[i].shape() == Shape{32, 32});
  }
  Rng again(1);
  CHECK(make_training_batch(ds.tiles, ds.schema, c, norm, again).digest() == batch.digest());
  Rng other(2);
  CHECK(make_training_batch(ds.tiles, ds.schema, c, norm, other).digest() != batch.digest());
}

TEST_CASE("zero_probability = 1 gives empty annotation channels") {
  auto ds = generate_synthetic_dataset(4, 40, 3, 3);
  auto c = tiny_config();
  c.sampling.zero_probability = 1.0;
  c.batch_size = 16;
  Rng rng(4);
  const auto batch = make_training_batch(ds.tiles, ds.schema, c, Normalization::uniform(3), rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(batch.clicks[i].empty());
    CHECK(batch.click_counts[i] == 0);
    CHECK(all_zero(batch.inputs[i], 3));
  }
}

TEST_CASE("clicks, annotations and targets stay aligned after flips") {
  auto ds = generate_synthetic_dataset(6, 48, 3, 8);
  const auto norm = compute_normalization(ds.tiles);
  for (auto strategy : {SamplingStrategy::kInside, SamplingStrategy::kBorder, SamplingStrategy::kSingleBorder}) {
    CAPTURE(to_string(strategy));
    auto c = tiny_config();
    c.batch_size = 32;
    c.sampling.strategy = strategy;
    c.encoding.channels = strategy == SamplingStrategy::kSingleBorder ? ChannelLayout::kSingle : ChannelLayout::kPerClass;
    Rng rng(10);
    const auto batch = make_training_batch(ds.tiles, ds.schema, c, norm, rng);
    int clicks_seen = 0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto& t = batch.targets[i];
      for (const auto& k : batch.clicks[i]) {
        ++clicks_seen;
        if (strategy == SamplingStrategy::kInside) CHECK(k.label == t.at(k.row, k.col));
        if (strategy != SamplingStrategy::kInside) CHECK(is_border_pixel(t, k.row, k.col));
        if (strategy == SamplingStrategy::kSingleBorder) CHECK(k.label == kBorderLabel);
      }
      if (batch.clicks[i].empty() && strategy == SamplingStrategy::kInside) CHECK(batch.click_counts[i] == 0);
      const auto ann = encode(batch.clicks[i], t.shape(), 3, c.encoding);
      const auto expected = assemble_network_input(batch.images[i], ann, norm);
      double diff = 0.0;
      for (int k = 0; k < expected.channels(); ++k) {
        diff = std::max(diff, max_abs_diff(expected.plane(k), batch.inputs[i].plane(k)));
      }
      CHECK(diff == 0.0);
    }
    CHECK(clicks_seen > 0);
  }
}

TEST_CASE("flips are applied to image and labels together") {
  // Tiles whose image encodes the label, so any misalignment shows.
  ClassSchema schema({{0, "a", {0, 0, 0}}, {1, "b", {255, 255, 255}}});
  std::vector<RasterTile> tiles;
  Rng gen(5);
  for (int t = 0; t < 3; ++t) {
    SegmentationMap gt(20, 20);
    Image img(20, 20, 3);
    for (int r = 0; r < 20; ++r) {
      for (int c = 0; c < 20; ++c) {
        gt.at(r, c) = static_cast<std::uint8_t>(gen() % 2);
        for (int ch = 0; ch < 3; ++ch) img.at(r, c, ch) = static_cast<std::uint8_t>(gt.at(r, c) * 200 + r);
      }
    }
    tiles.push_back({"t" + std::to_string(t), img, gt});
  }
  auto c = tiny_config();
  c.crop_size = 12;
  c.batch_size = 64;
  Rng rng(3);
  const auto batch = make_training_batch(tiles, schema, c, Normalization::uniform(3), rng);
  bool aligned = true;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    for (int r = 0; r < 12; ++r) {
      for (int col = 0; col < 12; ++col) {
        aligned = aligned && (batch.images[i].at(r, col, 0) >= 200) == (batch.targets[i].at(r, col) == 1);
      }
    }
  }
  CHECK(aligned);
}

TEST_CASE("training is deterministic and reports every epoch") {
  auto ds = generate_synthetic_dataset(6, 40, 3, 12);
  const auto c = tiny_config();
  const BackboneSpec spec{Architecture::kUNetSmall, 6, 3, 8};
  std::span<const RasterTile> all(ds.tiles);
  const auto a = train(Model::build(spec, 1), ds.schema, all.first(4), all.subspan(4), c);
  const auto b = train(Model::build(spec, 1), ds.schema, all.first(4), all.subspan(4), c);
  CHECK(a.checkpoint.model.weights_checksum() == b.checkpoint.model.weights_checksum());
  REQUIRE(a.report.epoch_loss.size() == 2);
  CHECK(a.report.epoch_lr == std::vector<double>{c.lr_at(0), c.lr_at(1)});
  for (double v : a.report.epoch_val_miou) CHECK((v >= 0.0 && v <= 1.0));
  for (double v : a.report.epoch_loss) CHECK(std::isfinite(v));
  CHECK(a.checkpoint.window == c.crop_size);
  CHECK(a.checkpoint.encoding == c.encoding);
  CHECK(a.checkpoint.train_digest == training_digest(c, spec, ds.schema, all.first(4)));
  CHECK(a.report.train_digest == a.checkpoint.train_digest);
  CHECK(validation_miou(a.checkpoint, all.subspan(4)) == doctest::Approx(a.report.epoch_val_miou.back()));
}

TEST_CASE("training digest tracks config, backbone and data") {
  auto ds = generate_synthetic_dataset(3, 24, 3, 1);
  const auto c = tiny_config();
  const BackboneSpec spec{Architecture::kUNetSmall, 6, 3, 8};
  const auto d = training_digest(c, spec, ds.schema, ds.tiles);
  CHECK(d == training_digest(c, spec, ds.schema, ds.tiles));
  auto c2 = c;
  c2.seed = 1;
  CHECK(d != training_digest(c2, spec, ds.schema, ds.tiles));
  auto spec2 = spec;
  spec2.encoder_width = 16;
  CHECK(d != training_digest(c, spec2, ds.schema, ds.tiles));
  CHECK(d != training_digest(c, spec, ds.schema, std::span<const RasterTile>(ds.tiles).first(2)));
}

TEST_CASE("model and config must agree") {
  auto ds = generate_synthetic_dataset(3, 40, 3, 1);
  const auto c = tiny_config();
  CHECK_THROWS_AS(train(Model::build({Architecture::kUNetSmall, 3, 3, 8}, 1), ds.schema, ds.tiles, {}, c),
                  ConfigError);
  CHECK_THROWS_AS(train(Model::build({Architecture::kUNetSmall, 6, 4, 8}, 1), ds.schema, ds.tiles, {}, c),
                  ConfigError);
}

TEST_CASE("annotated training with zero clicks matches a plain network") {
  auto ds = generate_synthetic_dataset(4, 40, 3, 6);
  auto c = tiny_config();
  c.sampling.zero_probability = 1.0;
  auto plain_cfg = c;
  plain_cfg.use_annotations = false;

  const auto init = Model::build({Architecture::kUNetSmall, 3, 3, 8}, 4);
  const auto plain = train(init.clone(), ds.schema, ds.tiles, {}, plain_cfg);
  const auto annotated = train(adapt_input_channels(init, 3), ds.schema, ds.tiles, {}, c);

  FloatStack img(3, 40, 40);
  FloatStack padded(6, 40, 40);
  Rng rng(1);
  std::normal_distribution<float> d(0.0F, 1.0F);
  for (int k = 0; k < 3; ++k) {
    for (std::size_t i = 0; i < img.plane_size(); ++i) img.plane(k)[i] = padded.plane(k)[i] = d(rng);
  }
  const auto a = plain.checkpoint.model.forward(img);
  const auto b = annotated.checkpoint.model.forward(padded);
  double diff = 0.0;
  for (int k = 0; k < 3; ++k) diff = std::max(diff, max_abs_diff(a.plane(k), b.plane(k)));
  CHECK(diff < 1e-3);
  CHECK(plain.report.epoch_loss[0] == doctest::Approx(annotated.report.epoch_loss[0]).epsilon(1e-4));
}

TEST_CASE("error-channel step back-propagates only the second pass") {
  auto ds = generate_synthetic_dataset(4, 40, 3, 6);
  auto c = tiny_config();
  c.sampling.strategy = SamplingStrategy::kSingleError;
  c.encoding.channels = ChannelLayout::kSingle;
  c.sampling.zero_probability = 0.0;
  c.batch_size = 4;
  const auto norm = compute_normalization(ds.tiles);
  const auto model = Model::build({Architecture::kUNetSmall, 4, 3, 8}, 9);

  Rng rng(2);
  const auto batch = make_training_batch(ds.tiles, ds.schema, c, norm, rng);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(batch.clicks[i].empty());
    CHECK(all_zero(batch.inputs[i], 3));
    CHECK(batch.click_counts[i] >= 1);
  }

  Rng click_rng(7);
  const auto step = error_channel_step_gradients(model, batch, c, norm, click_rng);
  REQUIRE(step.clicks.size() == batch.size());

  // Error clicks sit on pixels the zero-annotation prediction gets wrong.
  int total = 0;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto logits = model.forward(batch.inputs[i]);
    for (const auto& k : step.clicks[i]) {
      int best = 0;
      for (int ch = 1; ch < 3; ++ch) {
        if (logits.at(ch, k.row, k.col) > logits.at(best, k.row, k.col)) best = ch;
      }
      CHECK(k.label == kErrorLabel);
      CHECK(best != batch.targets[i].at(k.row, k.col));
      ++total;
    }
    CHECK(static_cast<int>(step.clicks[i].size()) <= batch.click_counts[i]);
  }
  CHECK(total > 0);

  // Same gradients as an ordinary step on the re-encoded batch.
  auto second = batch;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto ann = encode(step.clicks[i], batch.targets[i].shape(), 3, c.encoding);
    second.inputs[i] = assemble_network_input(batch.images[i], ann, norm);
  }
  const auto g = step_gradients(model, second);
  REQUIRE(g.size() == step.gradients.size());
  double scale = 0.0;
  for (float v : g) scale = std::max(scale, double(std::abs(v)));
  CHECK(scale > 0.0);
  CHECK(max_abs_diff(g, step.gradients) <= 1e-5 * scale);
}

TEST_CASE("a diverging run names the learning rate and batch") {
  auto ds = generate_synthetic_dataset(3, 40, 3, 6);
  auto c = tiny_config();
  c.base_lr = 1e12;
  c.epochs = 3;
  c.lr_milestones = {};
  c.samples_per_epoch = 40;
  try {
    (void)train(Model::build({Architecture::kUNetSmall, 6, 3, 8}, 1), ds.schema, ds.tiles, {}, c);
    FAIL("expected divergence");
  } catch (const TrainingDivergedError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("lr 1e+12") != std::string::npos);
    CHECK(msg.find("batch digest") != std::string::npos);
  }
}
