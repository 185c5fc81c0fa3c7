#include <doctest.h>

#include <cmath>
#include <fstream>
#include <algorithm>
#include <map>
#include <set>
#include <sstream>

#include "clickseg/experiments.hpp"

using namespace clickseg;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path scratch(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("clickseg_exp_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json tiny_suite(const fs::path& out) {
  auto doc = json::parse(R"({
    "name": "tiny",
    "dataset": {"synthetic": {"tiles": 6, "size": 32, "classes": 3, "seed": 4}, "split": {"ratio": 0.5, "seed": 1}},
    "base": {"epochs": 1, "samples_per_epoch": 8, "batch_size": 4, "crop_size": 32, "base_lr": 0.01,
             "lr_milestones": [], "encoding": {"d_max": 16},
             "backbone": {"architecture": "unet_small", "encoder_width": 4}},
    "evaluation": {"clicker": "independent", "budget": 3, "seed": 2}
  })");
  doc["output"] = out.string();
  return doc;
}

std::map<std::string, std::string> snapshot_tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file()) continue;
    std::ifstream in(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    out[fs::relative(e.path(), root).string()] = ss.str();
  }
  return out;
}

CellResult fake_cell(const std::string& name, std::map<std::string, double> mean, bool failed = false) {
  CellResult c;
  c.name = name;
  c.mean = std::move(mean);
  RunResult r;
  r.status = failed ? "failed" : "ok";
  c.runs.push_back(r);
  return c;
}

int count_dirs(const fs::path& p) {
  if (!fs::exists(p)) return 0;
  int n = 0;
  for (const auto& e : fs::directory_iterator(p)) n += e.is_directory() ? 1 : 0;
  return n;
}

}  // namespace

TEST_CASE("an empty suite produces an empty report and succeeds") {
  const auto dir = scratch("empty");
  const auto suite = ExperimentSuite::from_json(tiny_suite(dir / "out"), dir);
  CHECK(suite.cells.empty());
  const auto report = run_suite(suite);
  CHECK(report.cells.empty());
  CHECK(report.checks.empty());
  CHECK(report.all_passed());
  for (const char* f : {"cells.csv", "runs.csv", "acceptance.csv", "summary.md", "report.json"}) {
    CHECK(fs::exists(dir / "out" / "report" / f));
  }
  CHECK(count_dirs(dir / "out" / "train") == 0);
}

TEST_CASE("suite parsing rejects bad documents") {
  const auto dir = scratch("parse");
  auto with = [&](const json& patch) {
    auto doc = tiny_suite(dir);
    doc.merge_patch(patch);
    return doc;
  };
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"bogus", 1}}), dir), ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"name", ""}}), dir), ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"workers", 0}}), dir), ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"base", {{"split", {{"ratio", 0.5}}}}}}), dir),
                  ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"dataset", {{"manifest", "x.json"}}}}), dir),
                  ConfigError);  // both manifest and synthetic
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"evaluation", {{"subset", "test"}}}}), dir), ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"cells", {{{"name", "a/b"}}}}}), dir), ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"cells", {{{"name", "a"}}, {{"name", "a"}}}}}), dir),
                  ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"cells", {{{"name", "a"}, {"train_fraction", 0.0}}}}}), dir),
                  ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"cells", {{{"name", "a"}, {"extra", 1}}}}}), dir),
                  ConfigError);
  CHECK_THROWS_AS((void)ExperimentSuite::from_json(with({{"matrix", {{"epochs", json::array()}}}}), dir), ConfigError);

  // A cell whose resolved job is invalid is reported with its name.
  try {
    (void)ExperimentSuite::from_json(with({{"cells", {{{"name", "broken"}, {"overrides", {{"epochs", -1}}}}}}}), dir);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("broken") != std::string::npos);
  }
  try {
    (void)ExperimentSuite::from_json(
        with({{"cells", {{{"name", "typo"}, {"overrides", {{"encoding", {{"modee", "binary"}}}}}}}}}), dir);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find("modee") != std::string::npos);
  }
}

TEST_CASE("suite files load from YAML with paths relative to the file") {
  const auto dir = scratch("yaml");
  {
    std::ofstream f(dir / "suite.yaml");
    f << "name: y\noutput: out\ndataset:\n  manifest: data/manifest.json\n  digest: abc\n"
         "seeds: [3, 4]\ncells:\n  - name: a\n    overrides: {encoding: {mode: binary}}\n"
         "    evaluation: {clicker: dependent}\n  - name: b\n    seeds: [7]\n"
         "acceptance:\n  - {name: gain, check: a.mean_gain >= b.mean_gain, tolerance: 0.01}\n";
  }
  const auto suite = ExperimentSuite::load(dir / "suite.yaml");
  CHECK(suite.name == "y");
  REQUIRE(suite.dataset.manifest);
  CHECK(*suite.dataset.manifest == fs::weakly_canonical(dir / "data" / "manifest.json"));
  CHECK(suite.dataset.digest == std::optional<std::string>("abc"));
  REQUIRE(suite.cells.size() == 2);
  CHECK(suite.cells[0].seeds == std::vector<std::uint64_t>{3, 4});
  CHECK(suite.cells[1].seeds == std::vector<std::uint64_t>{7});
  CHECK(suite.protocol(suite.cells[0]).clicker == ClickerKind::kDependent);
  CHECK(suite.protocol(suite.cells[1]).clicker == ClickerKind::kIndependent);
  const auto job = suite.resolve(suite.cells[0], 4);
  CHECK(job.train.encoding.mode == EncodingMode::kBinary);
  CHECK(job.train.seed == 4);
  REQUIRE(suite.acceptance.size() == 1);
  CHECK(suite.acceptance[0].tolerance == doctest::Approx(0.01));
  CHECK_THROWS_AS((void)ExperimentSuite::load(dir / "missing.yaml"), LoadError);
}

TEST_CASE("matrix axes expand to the cartesian product") {
  const auto dir = scratch("matrix");
  auto doc = tiny_suite(dir);
  doc["seeds"] = {0, 1, 2};
  doc["matrix"] = json::parse(R"({
    "encoding.mode": ["binary", "distance"],
    "sampling.frequency_balanced": [true, false],
    "train_fraction": [0.5, 1.0]
  })");
  const auto suite = ExperimentSuite::from_json(doc, dir);
  REQUIRE(suite.cells.size() == 8);
  std::set<std::string> names;
  for (const auto& c : suite.cells) {
    names.insert(c.name);
    CHECK(c.seeds.size() == 3);
  }
  CHECK(names.size() == 8);
  const auto it = std::find_if(suite.cells.begin(), suite.cells.end(), [](const CellSpec& c) {
    return c.name == "mode=binary,frequency_balanced=false,train_fraction=0.5";
  });
  REQUIRE(it != suite.cells.end());
  CHECK(it->train_fraction == doctest::Approx(0.5));
  const auto job = suite.resolve(*it, 1);
  CHECK(job.train.encoding.mode == EncodingMode::kBinary);
  CHECK_FALSE(job.train.sampling.frequency_balanced);
  CHECK(job.train.epochs == 1);  // base values survive the patch
}

TEST_CASE("acceptance checks compare cell means") {
  std::vector<CellResult> cells{fake_cell("a", {{"mean_gain", 0.05}, {"class_gain.rare", 0.2}}),
                                fake_cell("b", {{"mean_gain", 0.04}}), fake_cell("dead", {}, true)};
  std::vector<AcceptanceCheck> checks{
      {"ge", "a.mean_gain >= b.mean_gain", 0.0},
      {"lt", "a.mean_gain < b.mean_gain", 0.0},
      {"tolerated", "b.mean_gain >= a.mean_gain", 0.02},
      {"not tolerated", "b.mean_gain >= a.mean_gain", 0.005},
      {"number", "a.class_gain.rare > 0.1", 0.0},
      {"le", "b.mean_gain <= 0.04", 0.0},
      {"missing cell", "z.mean_gain >= 0", 0.0},
      {"missing metric", "a.nope >= 0", 0.0},
      {"failed cell", "dead.mean_gain >= 0", 0.0},
      {"garbage", "a.mean_gain ~ 1", 0.0},
      {"short", "a.mean_gain >=", 0.0},
  };
  const auto r = evaluate_checks(checks, cells);
  REQUIRE(r.size() == checks.size());
  const std::vector<bool> expected{true, false, true, false, true, true, false, false, false, false, false};
  for (std::size_t i = 0; i < r.size(); ++i) {
    INFO(checks[i].name);
    CHECK(r[i].passed == expected[i]);
    if (i >= 6) CHECK_FALSE(r[i].detail.empty());
  }
  CHECK(r[0].lhs == doctest::Approx(0.05));
  CHECK(r[0].rhs == doctest::Approx(0.04));
  CHECK(r[4].rhs == doctest::Approx(0.1));
}

TEST_CASE("running a suite isolates failures, caches work and is idempotent") {
  const auto dir = scratch("run");
  auto doc = tiny_suite(dir / "out");
  doc["workers"] = 2;
  doc["cells"] = json::parse(R"([
    {"name": "plain", "seeds": [0, 1]},
    {"name": "dependent", "seeds": [0, 1], "evaluation": {"clicker": "dependent", "budget": 3}},
    {"name": "half", "train_fraction": 0.5},
    {"name": "diverges", "overrides": {"base_lr": 1e30, "epochs": 2, "samples_per_epoch": 16}}
  ])");
  doc["acceptance"] = json::parse(R"([
    {"name": "runs", "check": "plain.baseline_miou >= 0"},
    {"name": "needs failed cell", "check": "diverges.mean_gain >= 0"}
  ])");
  const auto suite = ExperimentSuite::from_json(doc, dir);
  const auto report = run_suite(suite);
  REQUIRE(report.cells.size() == 4);
  CHECK(report.cells[0].ok());
  CHECK(report.cells[1].ok());
  CHECK(report.cells[2].ok());
  CHECK_FALSE(report.cells[3].ok());
  CHECK(report.cells[3].runs[0].error.find("diverged") != std::string::npos);
  REQUIRE(report.checks.size() == 2);
  CHECK(report.checks[0].passed);
  CHECK_FALSE(report.checks[1].passed);
  CHECK_FALSE(report.all_passed());

  // plain and dependent share their trainings; the diverged run leaves nothing.
  CHECK(count_dirs(dir / "out" / "train") == 3);

  // Cell statistics are the sample mean and deviation over seeds.
  const auto& plain = report.cells[0];
  REQUIRE(plain.runs.size() == 2);
  for (const auto& [name, mean] : plain.mean) {
    const double a = plain.runs[0].metrics.at(name);
    const double b = plain.runs[1].metrics.at(name);
    CHECK(mean == doctest::Approx((a + b) / 2));
    CHECK(plain.stddev.at(name) == doctest::Approx(std::abs(a - b) / std::sqrt(2.0)));
  }
  for (const char* m : {"baseline_miou", "final_miou", "mean_gain", "improved_fraction", "corrected_per_click",
                        "val_miou", "class_gain.background"}) {
    CHECK(plain.mean.count(m) == 1);
  }
  CHECK(plain.curve.size() == 4);
  CHECK(plain.curve[0] == doctest::Approx(plain.mean.at("baseline_miou")));

  const auto before = snapshot_tree(dir / "out");
  CHECK(before.count("report/curves.png") == 1);
  const auto again = run_suite(suite);
  for (std::size_t c = 0; c < 3; ++c) {
    for (const auto& r : again.cells[c].runs) CHECK(r.status == "cached");
    CHECK(again.cells[c].mean == report.cells[c].mean);
  }
  CHECK(again.cells[3].runs[0].status == "failed");
  CHECK(snapshot_tree(dir / "out") == before);

  // More workers or a changed protocol leaves finished trainings alone.
  doc["evaluation"]["budget"] = 2;
  const auto changed = run_suite(ExperimentSuite::from_json(doc, dir), {std::nullopt, 1});
  CHECK(changed.cells[0].runs[0].status == "ok");
  CHECK(changed.cells[0].curve.size() == 3);
  CHECK(changed.cells[1].runs[0].status == "cached");  // has its own protocol
  CHECK(count_dirs(dir / "out" / "train") == 3);
}

TEST_CASE("a pinned dataset digest must match") {
  const auto dir = scratch("pin");
  auto doc = tiny_suite(dir / "out");
  doc["dataset"]["digest"] = std::string(64, '0');
  doc["cells"] = json::parse(R"([{"name": "a"}])");
  CHECK_THROWS_AS((void)run_suite(ExperimentSuite::from_json(doc, dir)), IntegrityError);
}

TEST_CASE("the shipped suites parse and pin the committed dataset") {
  const fs::path root = CLICKSEG_SOURCE_DIR;
  const auto manifest = root / "data" / "toy" / "manifest.json";
  const auto ds = load_dataset(manifest);
  CHECK(ds.tiles.size() == 200);
  for (const char* name : {"toy-main.yaml", "toy-ablations.yaml"}) {
    INFO(name);
    const auto suite = ExperimentSuite::load(root / "experiments" / name);
    CHECK_FALSE(suite.cells.empty());
    CHECK_FALSE(suite.acceptance.empty());
    REQUIRE(suite.dataset.manifest);
    CHECK(*suite.dataset.manifest == fs::weakly_canonical(manifest));
    CHECK(suite.dataset.digest == std::optional<std::string>(dataset_digest(ds.tiles)));
  }
}
