// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any
// criterion outside kKnownFailures fails. Suite criteria get one line per
// acceptance check (`<suite>:<check>`) and reuse finished cells under --runs.

#include <CLI11.hpp>

#include <cctype>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <map>
#include <set>

#include <nlohmann/json.hpp>

#include "clickseg/encoding.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/experiments.hpp"
#include "clickseg/model.hpp"
#include "clickseg/report.hpp"
#include "clickseg/service.hpp"
#include "oracles.hpp"

using namespace clickseg;
namespace fs = std::filesystem;

namespace {

// Tolerances and sizes of every criterion.
constexpr double kEncodingTolerance = 1e-6;
constexpr int kEncodingTrials = 100;
constexpr int kEncodingMaxSide = 64;
constexpr int kMetricTrials = 1000;
constexpr int kMetricMaxSide = 32;
constexpr int kClickerTrials = 1000;
constexpr int kComponentDraws = 10000;
constexpr double kComponentShare = 0.2;
constexpr double kComponentTolerance = 0.02;
constexpr int kBalanceClicks = 30000;
constexpr double kBalancedTolerance = 0.02;
constexpr double kUnbalancedTolerance = 0.01;
constexpr int kFrozenClicks = 120;
constexpr double kGradientRelTolerance = 1e-3;
constexpr double kGradientFloor = 1e-4;
constexpr double kGradientStep = 1e-5;
constexpr int kReplayClicks = 120;

// Measured on the shipped recipe (3 seeds) and left failing: the rare-class
// gains are within seed noise (|gain| < 0.0015 in every cell) and the
// single-error cell beat the per-class cell on 2 of 3 seeds.
const std::set<std::string> kKnownFailures{
    "toy-ablations:balancing-helps-the-rare-class",
    "toy-ablations:single-error-below-per-class",
};

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

ClassSchema three_classes() {
  return ClassSchema({{0, "background", {0, 0, 0}}, {1, "frequent", {0, 0, 255}}, {2, "rare", {255, 255, 0}}});
}

SegmentationMap random_map(int rows, int cols, int n, Rng& rng) {
  SegmentationMap m(rows, cols);
  for (std::size_t i = 0; i < m.size(); ++i) m[i] = static_cast<std::uint8_t>(rng() % static_cast<unsigned>(n));
  return m;
}

Outcome encoding_oracle() {
  Rng rng(101);
  double worst = 0.0;
  bool empty_zero = true;
  for (int trial = 0; trial < kEncodingTrials; ++trial) {
    const int rows = 1 + static_cast<int>(rng() % kEncodingMaxSide);
    const int cols = 1 + static_cast<int>(rng() % kEncodingMaxSide);
    const int n = 2 + static_cast<int>(rng() % 5);
    const int count = trial % 10 == 0 ? 0 : 1 + static_cast<int>(rng() % 12);
    std::vector<Click> clicks;
    for (int i = 0; i < count; ++i) {
      clicks.push_back({static_cast<int>(rng() % rows), static_cast<int>(rng() % cols), static_cast<int>(rng() % n)});
    }
    for (bool binary : {true, false}) {
      for (bool single : {false, true}) {
        EncodingConfig cfg;
        cfg.mode = binary ? EncodingMode::kBinary : EncodingMode::kDistance;
        cfg.channels = single ? ChannelLayout::kSingle : ChannelLayout::kPerClass;
        cfg.disk_radius = 1 + static_cast<int>(rng() % 8);
        cfg.d_max = 4.0 + static_cast<double>(rng() % 120);
        const auto got = encode(clicks, {rows, cols}, n, cfg);
        const auto want = oracle::encode(clicks, rows, cols, cfg.channel_count(n), binary, single, cfg.disk_radius,
                                         cfg.d_max);
        for (std::size_t i = 0; i < want.size(); ++i) {
          worst = std::max(worst, std::abs(double(got.data()[i]) - want[i]));
          if (count == 0 && got.data()[i] != 0.0F) empty_zero = false;
        }
      }
    }
  }
  return {worst < kEncodingTolerance && empty_zero,
          "max abs error " + fmt("%.3g", worst) + ", empty click set all-zero: " + (empty_zero ? "yes" : "no")};
}

Outcome metric_oracle() {
  Rng rng(102);
  int mismatches = 0;
  for (int trial = 0; trial < kMetricTrials; ++trial) {
    const int rows = 1 + static_cast<int>(rng() % kMetricMaxSide);
    const int cols = 1 + static_cast<int>(rng() % kMetricMaxSide);
    const int n = 2 + static_cast<int>(rng() % 6);
    const auto gt = random_map(rows, cols, n, rng);
    auto pred = random_map(rows, cols, n, rng);
    if (trial % 4 == 0) pred = gt;  // perfect and partially absent classes
    // Brute-force confusion matrix, then IoU per class present in either map.
    std::vector<std::vector<std::uint64_t>> cm(static_cast<std::size_t>(n), std::vector<std::uint64_t>(n, 0));
    for (std::size_t i = 0; i < gt.size(); ++i) ++cm[gt[i]][pred[i]];
    double sum = 0.0;
    int present = 0;
    std::vector<std::optional<double>> want;
    for (int k = 0; k < n; ++k) {
      std::uint64_t tp = cm[k][k], fp = 0, fn = 0;
      for (int j = 0; j < n; ++j) {
        if (j == k) continue;
        fp += cm[j][k];
        fn += cm[k][j];
      }
      if (tp + fp + fn == 0) {
        want.emplace_back();
        continue;
      }
      const double iou = double(tp) / double(tp + fp + fn);
      want.emplace_back(iou);
      sum += iou;
      ++present;
    }
    const auto cmat = confusion_matrix(pred, gt, n);
    const auto got = iou_per_class(cmat);
    const double got_mean = mean_iou(cmat);
    if (got != want || got_mean != sum / present) ++mismatches;
  }
  return {mismatches == 0, std::to_string(mismatches) + " of " + std::to_string(kMetricTrials) +
                               " map pairs differ from the brute-force confusion matrix"};
}

Outcome clicker_properties() {
  Rng rng(103);
  int bad_independent = 0, bad_dependent = 0, dependent_clicks = 0;
  for (int trial = 0; trial < kClickerTrials; ++trial) {
    const auto gt = random_map(2 + trial % 31, 2 + trial % 29, 3, rng);
    const auto pred = random_map(gt.rows(), gt.cols(), 3, rng);
    if (const auto c = auto_click_independent(pred, gt, rng)) {
      if (pred.at(c->row, c->col) == gt.at(c->row, c->col) || c->label != gt.at(c->row, c->col)) ++bad_independent;
    } else if (pred != gt) {
      ++bad_independent;
    }
    const int target = trial % 3;
    if (const auto c = auto_click_dependent(pred, gt, target, rng)) {
      ++dependent_clicks;
      if (c->label != target || gt.at(c->row, c->col) != target || pred.at(c->row, c->col) == target) ++bad_dependent;
    }
  }

  // Six error components of sizes 100, 50, 10, 5, 4, 3 on a 40 x 40 map.
  const SegmentationMap gt(40, 40, 0);
  auto pred = gt;
  for (const Region b : {Region{0, 0, 10, 10}, Region{15, 0, 5, 10}, Region{25, 0, 2, 5}, Region{30, 0, 1, 5},
                         Region{35, 0, 2, 2}, Region{0, 20, 1, 3}}) {
    for (int r = b.row; r < b.row + b.rows; ++r) {
      for (int c = b.col; c < b.col + b.cols; ++c) pred.at(r, c) = 1;
    }
  }
  const auto comps = find_error_components(pred, gt);
  std::vector<int> hits(comps.size(), 0);
  for (int i = 0; i < kComponentDraws; ++i) {
    const auto c = auto_click_independent(pred, gt, rng);
    if (!c) continue;
    const auto idx = static_cast<std::uint32_t>(c->row * 40 + c->col);
    for (std::size_t k = 0; k < comps.size(); ++k) {
      if (std::binary_search(comps[k].pixels.begin(), comps[k].pixels.end(), idx)) ++hits[k];
    }
  }
  bool shares_ok = comps.size() == 6 && hits[5] == 0;
  std::string shares;
  for (std::size_t k = 0; k < comps.size(); ++k) {
    const double share = hits[k] / double(kComponentDraws);
    if (k < 5) shares_ok = shares_ok && std::abs(share - kComponentShare) <= kComponentTolerance;
    shares += (k ? " " : "") + fmt("%.3f", share);
  }
  return {bad_independent == 0 && bad_dependent == 0 && shares_ok,
          std::to_string(bad_independent) + " bad independent clicks, " + std::to_string(bad_dependent) + " of " +
              std::to_string(dependent_clicks) + " dependent clicks off target, component shares " + shares};
}

Outcome frequency_balancing() {
  // 100 x 100 reference with shares 0.90, 0.09, 0.01.
  SegmentationMap gt(100, 100, 0);
  for (std::size_t i = 0; i < 900; ++i) gt[i] = 1;
  for (std::size_t i = 900; i < 1000; ++i) gt[i] = 2;
  const auto schema = three_classes();
  Rng rng(104);
  auto shares = [&](bool balanced) {
    std::vector<double> s(3, 0.0);
    for (const auto& c : sample_inside_clicks(gt, kBalanceClicks, schema, balanced, rng)) {
      s[static_cast<std::size_t>(c.label)] += 1.0 / kBalanceClicks;
    }
    return s;
  };
  const auto bal = shares(true);
  const auto unbal = shares(false);
  const std::vector<double> target{0.90, 0.09, 0.01};
  bool ok = true;
  for (std::size_t k = 0; k < 3; ++k) {
    ok = ok && std::abs(bal[k] - 1.0 / 3.0) <= kBalancedTolerance;
    ok = ok && std::abs(unbal[k] - target[k]) <= kUnbalancedTolerance;
  }
  return {ok, "balanced " + fmt("%.4f", bal[0]) + "/" + fmt("%.4f", bal[1]) + "/" + fmt("%.4f", bal[2]) +
                  ", unbalanced " + fmt("%.4f", unbal[0]) + "/" + fmt("%.4f", unbal[1]) + "/" +
                  fmt("%.4f", unbal[2])};
}

// Untrained network: plenty of errors, so every loop uses its full budget.
std::shared_ptr<ModelCheckpoint> untrained_checkpoint() {
  EncodingConfig enc;
  enc.d_max = 32.0;
  return std::make_shared<ModelCheckpoint>(ModelCheckpoint{
      Model::build({Architecture::kUNetSmall, 3 + 3, 3, 8}, 7), three_classes(), enc, Normalization::uniform(3), 512,
      "untrained"});
}

RasterTile toy_tile() {
  auto ds = generate_synthetic_dataset(1, 64, 3, 105);
  return ds.tiles.front();
}

Outcome weights_frozen() {
  const auto ckpt = untrained_checkpoint();
  const auto tile = toy_tile();
  const auto before = ckpt->model.weights_checksum();
  Rng rng(106);
  const auto t = run_refinement_loop(*ckpt, tile, ClickerKind::kIndependent, kFrozenClicks, rng);
  const auto after = ckpt->model.weights_checksum();
  return {before == after && t.click_count() == kFrozenClicks,
          std::to_string(t.click_count()) + " clicks, checksum " + before.substr(0, 16) +
              (before == after ? " unchanged" : " changed to " + after.substr(0, 16))};
}

Outcome gradient_check() {
  // Width-reduced network, 3 image + 3 annotation channels, 8 x 8 input.
  const auto model = Model::build({Architecture::kUNetSmall, 6, 3, 4}, 17);
  const LossProbe probe(model);
  Rng rng(107);
  std::normal_distribution<double> d(0.0, 1.0);
  std::vector<double> x(6 * 64);
  for (auto& v : x) v = d(rng);
  SegmentationMap target(8, 8);
  for (std::size_t i = 0; i < target.size(); ++i) target[i] = static_cast<std::uint8_t>(rng() % 3);
  const auto g = probe.input_gradient(x, target);
  double worst = 0.0;
  std::vector<double> channel_norm(6, 0.0);
  for (std::size_t i = 0; i < x.size(); ++i) {
    auto xp = x, xm = x;
    xp[i] += kGradientStep;
    xm[i] -= kGradientStep;
    const double fd = (probe.loss(xp, target) - probe.loss(xm, target)) / (2 * kGradientStep);
    worst = std::max(worst, std::abs(fd - g[i]) / std::max(std::abs(fd), kGradientFloor));
    channel_norm[i / 64] += std::abs(g[i]);
  }
  const bool annotations_live = channel_norm[3] > 0 && channel_norm[4] > 0 && channel_norm[5] > 0;
  return {worst <= kGradientRelTolerance && annotations_live,
          "max relative error " + fmt("%.3g", worst) + " over " + std::to_string(x.size()) + " inputs (" +
              std::to_string(3 * 64) + " annotation inputs), annotation gradients " +
              (annotations_live ? "non-zero" : "ZERO")};
}

Outcome replay_determinism() {
  const auto ckpt = untrained_checkpoint();
  const auto tile = toy_tile();
  SessionManager manager(ckpt, {});
  const auto id = manager.create(tile.image, tile.ground_truth, tile.id).session_id;
  Rng rng(108);
  int clicks = 0;
  for (; clicks < kReplayClicks; ++clicks) {
    const auto current = manager.get(id).labels;
    const auto c = auto_click_independent(current, *tile.ground_truth, rng);
    if (!c) break;
    (void)manager.add_click(id, c->row, c->col, c->label);
  }
  const auto final_map = manager.get(id).labels;
  // Through JSON, as an exported history would travel.
  const auto exported = nlohmann::json(manager.export_trajectory(id)).dump();
  const auto history = nlohmann::json::parse(exported).get<RefinementTrajectory>().clicks();
  const auto replayed = predict_map(*ckpt, tile.image, history).labels;
  std::size_t differing = 0;
  for (std::size_t i = 0; i < final_map.size(); ++i) differing += final_map[i] != replayed[i] ? 1 : 0;
  return {history.size() == static_cast<std::size_t>(clicks) && differing == 0,
          std::to_string(history.size()) + " exported clicks, " + std::to_string(differing) +
              " pixels differ after replay"};
}

std::string slug(const std::string& name) {
  std::string out;
  for (char c : name) out += std::isalnum(static_cast<unsigned char>(c)) ? static_cast<char>(std::tolower(c)) : '-';
  return out;
}

// One outcome per acceptance check, plus `<suite>:cells` for failed runs.
std::vector<std::pair<std::string, Outcome>> suite_criteria(const fs::path& suite_file, const fs::path& runs) {
  const auto suite = ExperimentSuite::load(suite_file);
  SuiteOptions options;
  options.output = runs / suite.name;
  const auto report = run_suite(suite, options);
  std::vector<std::pair<std::string, Outcome>> out;
  std::string failed;
  for (const auto& c : report.cells) {
    if (!c.ok()) failed += c.name + " ";
  }
  out.push_back({suite.name + ":cells", {failed.empty() && !report.checks.empty(),
                                         failed.empty() ? std::to_string(report.cells.size()) + " cells ok, report " +
                                                              (*options.output / "report" / "summary.md").string()
                                                        : "failed cells: " + failed}});
  for (const auto& k : report.checks) {
    out.push_back({suite.name + ":" + slug(k.name),
                   {k.passed, k.expression + " (" + format_number(k.lhs, 4) + " vs " + format_number(k.rhs, 4) + ")"}});
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  fs::path repo = CLICKSEG_SOURCE_DIR;
  fs::path runs;
  std::vector<std::string> only;
  bool skip_suites = false;
  app.add_option("--repo", repo, "Repository root (suite files under experiments/)")->capture_default_str();
  app.add_option("--runs", runs, "Where suite runs are cached (default <repo>/runs)");
  app.add_option("--only", only, "Run only these criteria");
  app.add_flag("--skip-suites", skip_suites, "Skip the trained toy-suite criteria");
  CLI11_PARSE(app, argc, argv);
  if (runs.empty()) runs = repo / "runs";

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"encoding-oracle", encoding_oracle},
      {"metric-oracle", metric_oracle},
      {"clicker-properties", clicker_properties},
      {"frequency-balancing", frequency_balancing},
      {"weights-frozen", weights_frozen},
      {"annotation-gradient", gradient_check},
      {"replay-determinism", replay_determinism},
  };
  const std::vector<std::string> suites{"toy-main", "toy-ablations"};
  const auto selected = [&](const std::string& name) {
    return only.empty() || std::find(only.begin(), only.end(), name) != only.end();
  };

  int failed = 0, known = 0;
  const auto print = [&](const std::string& name, const Outcome& o, double seconds) {
    const bool expected = kKnownFailures.count(name) > 0;
    std::string note;
    if (!o.passed && expected) {
      note = " [known failure]";
      ++known;
    } else if (o.passed && expected) {
      note = " [unexpected pass, update kKnownFailures]";
      ++failed;
    } else if (!o.passed) {
      ++failed;
    }
    std::printf("%s %-48s %s (%.1fs)%s\n", o.passed ? "PASS" : "FAIL", name.c_str(), o.detail.c_str(), seconds,
                note.c_str());
    std::fflush(stdout);
  };
  const auto elapsed = [](auto start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  };

  for (const auto& [name, run] : criteria) {
    if (!selected(name)) continue;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = run();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    print(name, o, elapsed(start));
  }
  for (const auto& name : suites) {
    if (!selected(name)) continue;
    if (skip_suites) {
      std::printf("SKIP %s\n", name.c_str());
      continue;
    }
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::pair<std::string, Outcome>> outcomes;
    try {
      outcomes = suite_criteria(repo / "experiments" / (name + ".yaml"), runs);
    } catch (const std::exception& e) {
      outcomes = {{name + ":cells", {false, std::string("error: ") + e.what()}}};
    }
    const double seconds = elapsed(start);
    for (const auto& [sub, o] : outcomes) print(sub, o, seconds);
  }
  std::printf("%d unexpected failure(s), %d known failure(s)\n", failed, known);
  return failed == 0 ? 0 : 1;
}
