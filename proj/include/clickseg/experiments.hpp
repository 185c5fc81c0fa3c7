#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "clickseg/datasets.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/training.hpp"

namespace clickseg {

struct SyntheticParams {
  int tiles = 200;
  int size = 128;
  int classes = 3;
  std::uint64_t seed = 1;
  SyntheticStyle style;
};

struct DatasetSpec {
  std::optional<std::filesystem::path> manifest;  // absolute after loading
  std::optional<SyntheticParams> synthetic;
  std::optional<std::string> digest;              // pinned dataset digest
  double split_ratio = 0.8;
  std::uint64_t split_seed = 0;
};

struct EvaluationProtocol {
  ClickerKind clicker = ClickerKind::kIndependent;
  int budget = 20;
  std::uint64_t seed = 0;
  std::string subset = "val";  // val, train or all
};

struct CellSpec {
  std::string name;
  nlohmann::json overrides = nlohmann::json::object();  // merge patch over the base job
  std::vector<std::uint64_t> seeds{0};                   // training seeds, results are averaged
  double train_fraction = 1.0;
  std::optional<EvaluationProtocol> evaluation;          // replaces the suite protocol
};

// `<cell>.<metric> <op> <cell>.<metric> | <number>`, op one of >= <= > <.
struct AcceptanceCheck {
  std::string name;
  std::string expression;
  double tolerance = 0.0;  // slack granted to the left-hand side
};

// Suite file (YAML):
//   name: toy-main
//   output: runs/toy-main            relative to the working directory
//   workers: 1
//   dataset: {manifest: path | synthetic: {...}, digest: ..., split: {ratio, seed}}
//   base: {TrainJob document}
//   evaluation: {clicker, budget, seed, subset}
//   cells: [{name, overrides, seeds, train_fraction, evaluation}]
//   matrix: {dotted.key: [values...], train_fraction: [...]}   cartesian cells
//   acceptance: [{name, check, tolerance}]
struct ExperimentSuite {
  std::string name;
  std::filesystem::path output;
  int workers = 1;
  DatasetSpec dataset;
  nlohmann::json base = nlohmann::json::object();
  EvaluationProtocol evaluation;
  std::vector<CellSpec> cells;
  std::vector<AcceptanceCheck> acceptance;

  // Relative dataset paths resolve against the suite file's directory.
  static ExperimentSuite load(const std::filesystem::path& path);
  static ExperimentSuite from_json(const nlohmann::json& doc, const std::filesystem::path& base_dir);

  // Base job with the cell's overrides and the given training seed; throws
  // ConfigError if the result is not a valid job.
  [[nodiscard]] TrainJob resolve(const CellSpec& cell, std::uint64_t seed) const;
  [[nodiscard]] const EvaluationProtocol& protocol(const CellSpec& cell) const {
    return cell.evaluation ? *cell.evaluation : evaluation;
  }
};

struct RunResult {
  std::string cell;
  std::uint64_t seed = 0;
  std::string status;  // "ok", "cached" or "failed"
  std::string error;
  std::map<std::string, double> metrics;
  std::vector<double> curve;  // mean IoU vs clicks
};

struct CellResult {
  std::string name;
  std::vector<RunResult> runs;
  std::map<std::string, double> mean;  // over successful runs
  std::map<std::string, double> stddev;
  std::vector<double> curve;
  [[nodiscard]] bool ok() const;
};

struct CheckResult {
  std::string name;
  std::string expression;
  double lhs = 0.0;
  double rhs = 0.0;
  bool passed = false;
  std::string detail;
};

struct SuiteReport {
  std::string name;
  std::vector<CellResult> cells;
  std::vector<CheckResult> checks;
  [[nodiscard]] bool all_passed() const;
};

struct SuiteOptions {
  std::optional<std::filesystem::path> output;  // overrides the suite's output directory
  std::optional<int> workers;
};

// Materialises the dataset, trains and evaluates every (cell, seed) that is
// not already complete under the same digest, then writes the report bundle
// (cells.csv, runs.csv, acceptance.csv, curves.png, summary.md,
// report.json) under <output>/report. A failing cell is recorded and the
// others continue.
SuiteReport run_suite(const ExperimentSuite& suite, const SuiteOptions& options = {});

// Evaluates acceptance expressions against cell means.
std::vector<CheckResult> evaluate_checks(std::span<const AcceptanceCheck> checks, std::span<const CellResult> cells);

// Metric names available to checks: baseline_miou, final_miou, mean_gain,
// improved_fraction, corrected_per_click, val_miou and class_gain.<class>.
std::map<std::string, double> run_metrics(const EvaluationSummary& summary, const ClassSchema& schema, double val_miou);

}  // namespace clickseg
