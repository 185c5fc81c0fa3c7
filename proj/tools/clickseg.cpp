// clickseg command-line tool.

#include <CLI11.hpp>

#include <csignal>
#include <filesystem>
#include <fstream>
#include <thread>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "clickseg/datasets.hpp"
#include "clickseg/error.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/experiments.hpp"
#include "clickseg/model.hpp"
#include "clickseg/report.hpp"
#include "clickseg/service.hpp"
#include "clickseg/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace clickseg;

namespace {

std::vector<RasterTile> select_subset(std::vector<RasterTile> tiles, const std::string& subset, double ratio,
                                      std::uint64_t seed) {
  if (subset == "all") return tiles;
  auto [train, val] = split_train_val(std::move(tiles), ratio, seed);
  return subset == "train" ? std::move(train) : std::move(val);
}

int cmd_generate(int n_tiles, int size, int classes, std::uint64_t seed, const SyntheticStyle& style,
                 const fs::path& out) {
  const auto ds = generate_synthetic_dataset(n_tiles, size, classes, seed, style);
  const auto manifest = write_dataset(ds, out);
  spdlog::info("wrote {} tiles to {} (digest {})", ds.tiles.size(), manifest.string(), dataset_digest(ds.tiles));
  return 0;
}

int cmd_train(const fs::path& config_path, const fs::path& data, const fs::path& out) {
  const auto job = load_train_job(config_path);
  auto dataset = load_dataset(data);
  if (dataset.tiles.empty()) throw ConfigError("dataset " + data.string() + " has no tiles");
  auto [train_tiles, val_tiles] = split_train_val(std::move(dataset.tiles), job.split_ratio, job.split_seed);
  compute_class_frequencies(train_tiles, dataset.schema);

  const auto spec = job.backbone(dataset.schema, train_tiles.front().image.channels());
  auto model = Model::build(spec, job.train.seed);
  spdlog::info("training {} ({} parameters) on {} tiles, validating on {}", to_string(spec.architecture),
               model.parameter_count(), train_tiles.size(), val_tiles.size());

  auto result = train(std::move(model), dataset.schema, train_tiles, val_tiles, job.train, [](const EpochStats& s) {
    spdlog::info("epoch {:3d}  lr {:.4g}  loss {:.4f}  val mIoU {:.4f}  ({:.1f}s)", s.epoch, s.lr, s.mean_loss,
                 s.val_miou, s.seconds);
  });

  fs::create_directories(out);
  const auto ckpt = out / "checkpoint.ckpt";
  save_checkpoint(result.checkpoint, ckpt);
  result.report.checkpoint_path = ckpt.string();
  json report = result.report;
  report["config"] = job;
  json split{{"train", json::array()}, {"val", json::array()}};
  for (const auto& t : train_tiles) split["train"].push_back(t.id);
  for (const auto& t : val_tiles) split["val"].push_back(t.id);
  report["split"] = split;
  std::ofstream(out / "train_report.json") << report.dump(2) << '\n';
  spdlog::info("checkpoint written to {}", ckpt.string());
  return 0;
}

int cmd_evaluate(const fs::path& checkpoint_path, const fs::path& data, const std::string& clicker, int budget,
                 std::uint64_t seed, const fs::path& out, const std::string& subset, double ratio,
                 std::uint64_t split_seed) {
  const auto kind = clicker_kind_from_string(clicker);
  auto dataset = load_dataset(data);
  const auto checkpoint = load_checkpoint(checkpoint_path, dataset.schema);
  const auto tiles = select_subset(std::move(dataset.tiles), subset, ratio, split_seed);
  std::vector<RefinementTrajectory> trajectories;
  for (std::size_t i = 0; i < tiles.size(); ++i) {
    if (!tiles[i].ground_truth) continue;
    Rng rng(seed + i);
    trajectories.push_back(run_refinement_loop(checkpoint, tiles[i], kind, budget, rng));
  }
  const auto summary = summarize(trajectories, checkpoint.schema.size(), budget);
  write_evaluation_bundle(out, trajectories, summary, checkpoint.schema);
  spdlog::info("{} tiles: baseline mIoU {:.4f}, after {} clicks {:.4f} (gain {:+.4f}), improved on {:.1f}%, "
               "{:.1f} px/click",
               summary.tiles, summary.baseline_miou, budget, summary.final_miou, summary.mean_gain,
               100.0 * summary.improved_fraction, summary.corrected_per_click);
  return 0;
}

int cmd_serve(const fs::path& checkpoint_path, const std::string& host, int port, const ServiceConfig& config,
              const std::optional<fs::path>& data) {
  auto checkpoint = std::make_shared<const ModelCheckpoint>(load_checkpoint(checkpoint_path));
  SessionManager manager(checkpoint, config);
  if (data) {
    auto dataset = load_dataset(*data);
    if (dataset.schema.size() != checkpoint->schema.size()) {
      throw ConfigError("dataset and checkpoint disagree on the number of classes");
    }
    spdlog::info("{} tiles available by id", dataset.tiles.size());
    manager.set_tiles(std::move(dataset.tiles));
  }

  // Signals are taken synchronously by this thread; the server runs on another.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  HttpService http(manager);
  const int bound = http.bind(host, port);
  spdlog::info("serving {} on http://{}:{}/v1 (max {} sessions)", to_string(checkpoint->model.spec().architecture),
               host, bound, config.max_sessions);
  std::thread server([&] { http.run(); });
  int sig = 0;
  sigwait(&signals, &sig);
  spdlog::info("signal {}, shutting down", sig);
  http.stop();
  server.join();
  return 0;
}

int cmd_experiment(const fs::path& suite_path, const std::optional<fs::path>& out, const std::optional<int>& workers) {
  const auto suite = ExperimentSuite::load(suite_path);
  const auto report = run_suite(suite, {out, workers});
  bool runs_ok = true;
  for (const auto& c : report.cells) {
    spdlog::info("{:40s} baseline {:.4f}  gain {:+.4f}  improved {:.0f}%", c.name,
                 c.mean.count("baseline_miou") ? c.mean.at("baseline_miou") : std::nan(""),
                 c.mean.count("mean_gain") ? c.mean.at("mean_gain") : std::nan(""),
                 100.0 * (c.mean.count("improved_fraction") ? c.mean.at("improved_fraction") : std::nan("")));
    runs_ok = runs_ok && c.ok();
  }
  for (const auto& k : report.checks) {
    spdlog::info("{} {}: {} ({} vs {}){}", k.passed ? "PASS" : "FAIL", k.name, k.expression, format_number(k.lhs, 4),
                 format_number(k.rhs, 4), k.detail.empty() ? "" : " " + k.detail);
  }
  spdlog::info("report in {}", ((out ? *out : suite.output) / "report").string());
  return runs_ok && report.all_passed() ? 0 : 1;
}

// Re-runs every prefix of a recorded click sequence and compares the metrics
// with the recording, bit for bit.
int cmd_replay(const fs::path& checkpoint_path, const fs::path& trajectory_path, int index,
               const std::optional<fs::path>& image_path, const std::optional<fs::path>& gt_path,
               const std::optional<fs::path>& data, const fs::path& out) {
  const auto checkpoint = load_checkpoint(checkpoint_path);
  std::ifstream in(trajectory_path);
  if (!in) throw LoadError("trajectory not found: " + trajectory_path.string());
  auto doc = json::parse(in);
  if (doc.is_array()) doc = doc.at(static_cast<std::size_t>(index));
  const auto trajectory = doc.get<RefinementTrajectory>();

  Image image;
  std::optional<SegmentationMap> gt;
  if (data) {
    auto dataset = load_dataset(*data);
    const auto it = std::find_if(dataset.tiles.begin(), dataset.tiles.end(),
                                 [&](const RasterTile& t) { return t.id == trajectory.tile_id; });
    if (it == dataset.tiles.end()) throw NotFoundError("tile '" + trajectory.tile_id + "' is not in the dataset");
    image = it->image;
    gt = it->ground_truth;
  } else if (image_path) {
    image = read_image(*image_path);
    if (gt_path) gt = labels_from_colors(read_image(*gt_path), checkpoint.schema);
  } else {
    throw ConfigError("replay needs --image or --data");
  }

  const auto clicks = trajectory.clicks();
  int mismatches = 0;
  SegmentationMap final_map;
  for (std::size_t k = 0; k <= clicks.size(); ++k) {
    auto pred = predict_map(checkpoint, image, std::span<const Click>(clicks.data(), k));
    if (gt) {
      const auto step = measure_step(pred.labels, *gt, checkpoint.schema.size());
      const auto& rec = trajectory.steps[k];
      if (step.mean_iou != rec.mean_iou || step.error_pixels != rec.error_pixels) {
        ++mismatches;
        spdlog::warn("step {}: recorded mIoU {:.17g} ({} errors), replayed {:.17g} ({} errors)", k, rec.mean_iou,
                     rec.error_pixels, step.mean_iou, step.error_pixels);
      }
    }
    final_map = std::move(pred.labels);
  }
  write_png(out, render_labels(final_map, checkpoint.schema));
  if (!gt) {
    spdlog::info("replayed {} clicks without ground truth; mask written to {}", clicks.size(), out.string());
    return 0;
  }
  spdlog::info("replayed {} clicks: {} of {} steps differ; mask written to {}", clicks.size(), mismatches,
               clicks.size() + 1, out.string());
  return mismatches == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Interactive multi-class segmentation refinement"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("generate", "Write the synthetic dataset to a directory");
  int n_tiles = 200, size = 128, classes = 3;
  std::uint64_t gen_seed = 1;
  fs::path gen_out;
  gen->add_option("--tiles", n_tiles, "Number of tiles")->capture_default_str();
  gen->add_option("--size", size, "Tile side in pixels")->capture_default_str();
  gen->add_option("--classes", classes, "Number of classes")->capture_default_str();
  gen->add_option("--seed", gen_seed, "Generator seed")->capture_default_str();
  SyntheticStyle style;
  gen->add_option("--camouflage", style.camouflage_probability, "Share of class-1 shapes in background colors")
      ->capture_default_str();
  gen->add_option("--decoys", style.decoy_fraction, "Background area painted in class-1 colors")->capture_default_str();
  gen->add_option("--noise", style.pixel_noise, "Pixel noise standard deviation")->capture_default_str();
  gen->add_option("--out", gen_out, "Output directory")->required();

  auto* tr = app.add_subcommand("train", "Train a network on image + simulated-click channels");
  fs::path config_path, train_data, train_out;
  tr->add_option("--config", config_path, "Training config (YAML or JSON)")->required()->check(CLI::ExistingFile);
  tr->add_option("--data", train_data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", train_out, "Output directory")->required();

  auto* ev = app.add_subcommand("evaluate", "Run the automatic refinement loop");
  fs::path ev_ckpt, ev_data, ev_out;
  std::string ev_clicker = "independent", ev_subset = "all";
  int ev_budget = 120;
  std::uint64_t ev_seed = 0, ev_split_seed = 0;
  double ev_ratio = 0.8;
  ev->add_option("--checkpoint", ev_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", ev_data, "Dataset manifest")->required()->check(CLI::ExistingFile);
  ev->add_option("--clicker", ev_clicker, "independent or dependent")
      ->check(CLI::IsMember({"independent", "dependent"}))
      ->capture_default_str();
  ev->add_option("--budget", ev_budget, "Clicks per tile")->capture_default_str();
  ev->add_option("--seed", ev_seed, "Clicker seed")->capture_default_str();
  ev->add_option("--out", ev_out, "Output directory")->required();
  ev->add_option("--subset", ev_subset, "Tiles to evaluate: all, train or val")
      ->check(CLI::IsMember({"all", "train", "val"}))
      ->capture_default_str();
  ev->add_option("--split-ratio", ev_ratio, "Train ratio used to pick the subset")->capture_default_str();
  ev->add_option("--split-seed", ev_split_seed, "Split seed used to pick the subset")->capture_default_str();

  auto* sv = app.add_subcommand("serve", "Serve interactive sessions over HTTP under /v1");
  fs::path sv_ckpt;
  std::optional<fs::path> sv_data;
  std::string sv_host = "127.0.0.1";
  int sv_port = 8080;
  ServiceConfig sv_config;
  sv->add_option("--checkpoint", sv_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  sv->add_option("--port", sv_port, "Port, 0 picks a free one")->capture_default_str();
  sv->add_option("--host", sv_host, "Address to bind")->capture_default_str();
  sv->add_option("--max-sessions", sv_config.max_sessions, "Live sessions before eviction")->capture_default_str();
  sv->add_option("--max-history", sv_config.max_history, "Clicks per session")->capture_default_str();
  sv->add_option("--data", sv_data, "Dataset manifest whose tiles can be opened by id")->check(CLI::ExistingFile);

  auto* ex = app.add_subcommand("experiment", "Experiment suites");
  ex->require_subcommand(1);
  auto* ex_run = ex->add_subcommand("run", "Run a suite, skipping finished cells, and write its report");
  fs::path suite_path;
  std::optional<fs::path> ex_out;
  std::optional<int> ex_workers;
  ex_run->add_option("suite", suite_path, "Suite file (YAML)")->required()->check(CLI::ExistingFile);
  ex_run->add_option("--out", ex_out, "Output directory (default: the suite's)");
  ex_run->add_option("--workers", ex_workers, "Cells run in parallel (default: the suite's)");

  auto* rp = app.add_subcommand("replay", "Re-run a recorded click sequence and check it reproduces");
  fs::path rp_ckpt, rp_traj, rp_out;
  int rp_index = 0;
  std::optional<fs::path> rp_image, rp_gt, rp_data;
  rp->add_option("--checkpoint", rp_ckpt, "Checkpoint file")->required()->check(CLI::ExistingFile);
  rp->add_option("--trajectory", rp_traj, "Trajectory JSON (one object or an array)")->required()->check(CLI::ExistingFile);
  rp->add_option("--index", rp_index, "Entry to use when the file holds an array")->capture_default_str();
  rp->add_option("--image", rp_image, "Image the clicks were made on")->check(CLI::ExistingFile);
  rp->add_option("--ground-truth", rp_gt, "Color-coded reference labels")->check(CLI::ExistingFile);
  rp->add_option("--data", rp_data, "Dataset manifest; the tile is found by the trajectory's tile id")
      ->check(CLI::ExistingFile);
  rp->add_option("--out", rp_out, "Final mask PNG")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_generate(n_tiles, size, classes, gen_seed, style, gen_out);
    if (tr->parsed()) return cmd_train(config_path, train_data, train_out);
    if (ev->parsed()) {
      return cmd_evaluate(ev_ckpt, ev_data, ev_clicker, ev_budget, ev_seed, ev_out, ev_subset, ev_ratio, ev_split_seed);
    }
    if (sv->parsed()) return cmd_serve(sv_ckpt, sv_host, sv_port, sv_config, sv_data);
    if (ex_run->parsed()) return cmd_experiment(suite_path, ex_out, ex_workers);
    if (rp->parsed()) return cmd_replay(rp_ckpt, rp_traj, rp_index, rp_image, rp_gt, rp_data, rp_out);
  } catch (const clickseg::Error& e) {
    spdlog::error("{}", e.what());
    return 2;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("{}", e.what());
    return 2;
  }
  return 0;
}
