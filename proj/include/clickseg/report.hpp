#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "clickseg/evaluation.hpp"
#include "clickseg/schema.hpp"

namespace clickseg {

struct Series {
  std::string name;
  std::vector<double> values;  // y at x = 0, 1, 2, ...; NaN entries are skipped
  Rgb color{0, 0, 0};
};

// Line chart with axes, ticks and a legend.
void plot_series_png(const std::filesystem::path& path, const std::string& title, const std::string& x_label,
                     const std::string& y_label, std::span<const Series> series);

// Writes rows verbatim, quoting cells that contain a comma or quote.
void write_csv(const std::filesystem::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);

// Fixed-precision number for tables and reports ("nan" for NaN).
std::string format_number(double v, int precision = 4);

// trajectories.json, summary.json, per_tile.csv, curve.csv and curves.png
// for one evaluation run.
void write_evaluation_bundle(const std::filesystem::path& directory, std::span<const RefinementTrajectory> trajectories,
                             const EvaluationSummary& summary, const ClassSchema& schema);

std::vector<RefinementTrajectory> read_trajectories(const std::filesystem::path& path);

}  // namespace clickseg
