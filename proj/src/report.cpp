#include "clickseg/report.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <nlohmann/json.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "clickseg/error.hpp"

namespace clickseg {

namespace fs = std::filesystem;
using nlohmann::json;

std::string format_number(double v, int precision) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

void write_csv(const fs::path& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw LoadError("could not write " + path.string());
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) {
      if (i) out << ',';
      const auto& c = cells[i];
      if (c.find_first_of(",\"\n") != std::string::npos) {
        out << '"';
        for (char ch : c) out << (ch == '"' ? "\"\"" : std::string(1, ch));
        out << '"';
      } else {
        out << c;
      }
    }
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

namespace {

// Round step for axis ticks covering `span` in about `target` intervals.
double nice_step(double span, int target) {
  const double raw = span / target;
  const double mag = std::pow(10.0, std::floor(std::log10(raw)));
  for (double m : {1.0, 2.0, 5.0, 10.0}) {
    if (raw <= m * mag) return m * mag;
  }
  return 10.0 * mag;
}

std::string tick_label(double v, double step) {
  const int digits = step >= 1.0 ? 0 : static_cast<int>(std::ceil(-std::log10(step)));
  return format_number(v, digits);
}

}  // namespace

void plot_series_png(const fs::path& path, const std::string& title, const std::string& x_label,
                     const std::string& y_label, std::span<const Series> series) {
  const int width = 900;
  const int height = 560;
  const int left = 80, right = 200, top = 50, bottom = 60;
  cv::Mat img(height, width, CV_8UC3, cv::Scalar(255, 255, 255));
  const auto font = cv::FONT_HERSHEY_SIMPLEX;

  double y_min = std::numeric_limits<double>::infinity();
  double y_max = -std::numeric_limits<double>::infinity();
  std::size_t x_count = 1;
  for (const auto& s : series) {
    x_count = std::max(x_count, s.values.size());
    for (double v : s.values) {
      if (std::isnan(v)) continue;
      y_min = std::min(y_min, v);
      y_max = std::max(y_max, v);
    }
  }
  if (!std::isfinite(y_min)) {
    y_min = 0.0;
    y_max = 1.0;
  }
  if (y_max - y_min < 1e-9) {
    y_min -= 0.05;
    y_max += 0.05;
  }
  const double pad = 0.05 * (y_max - y_min);
  y_min -= pad;
  y_max += pad;
  const double x_max = std::max<double>(1.0, static_cast<double>(x_count - 1));

  const int pw = width - left - right;
  const int ph = height - top - bottom;
  auto to_px = [&](double x, double y) {
    return cv::Point(left + static_cast<int>(std::lround(x / x_max * pw)),
                     top + ph - static_cast<int>(std::lround((y - y_min) / (y_max - y_min) * ph)));
  };

  const cv::Scalar grey(200, 200, 200), black(0, 0, 0);
  const double ys = nice_step(y_max - y_min, 6);
  for (double y = std::ceil(y_min / ys) * ys; y <= y_max; y += ys) {
    const auto p = to_px(0, y);
    cv::line(img, p, {left + pw, p.y}, grey, 1);
    cv::putText(img, tick_label(y, ys), {8, p.y + 5}, font, 0.45, black, 1, cv::LINE_AA);
  }
  const double xs = nice_step(x_max, 8);
  for (double x = 0; x <= x_max + 1e-9; x += xs) {
    const auto p = to_px(x, y_min);
    cv::line(img, p, {p.x, p.y + 5}, black, 1);
    cv::putText(img, tick_label(x, xs), {p.x - 8, p.y + 22}, font, 0.45, black, 1, cv::LINE_AA);
  }
  cv::rectangle(img, {left, top}, {left + pw, top + ph}, black, 1);
  cv::putText(img, title, {left, 32}, font, 0.7, black, 1, cv::LINE_AA);
  cv::putText(img, x_label, {left + pw / 2 - 30, height - 15}, font, 0.5, black, 1, cv::LINE_AA);
  cv::putText(img, y_label, {8, top - 12}, font, 0.5, black, 1, cv::LINE_AA);

  int legend_y = top + 10;
  for (const auto& s : series) {
    const cv::Scalar color(s.color[2], s.color[1], s.color[0]);
    std::vector<cv::Point> run;
    auto flush = [&] {
      if (run.size() > 1) cv::polylines(img, run, false, color, 2, cv::LINE_AA);
      if (run.size() == 1) cv::circle(img, run[0], 2, color, -1);
      run.clear();
    };
    for (std::size_t i = 0; i < s.values.size(); ++i) {
      if (std::isnan(s.values[i])) {
        flush();
        continue;
      }
      run.push_back(to_px(static_cast<double>(i), s.values[i]));
    }
    flush();
    cv::line(img, {left + pw + 15, legend_y}, {left + pw + 40, legend_y}, color, 2, cv::LINE_AA);
    cv::putText(img, s.name, {left + pw + 46, legend_y + 5}, font, 0.45, black, 1, cv::LINE_AA);
    legend_y += 22;
  }

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  if (!cv::imwrite(path.string(), img)) throw LoadError("could not write " + path.string());
}

void write_evaluation_bundle(const fs::path& directory, std::span<const RefinementTrajectory> trajectories,
                             const EvaluationSummary& summary, const ClassSchema& schema) {
  fs::create_directories(directory);
  json all = json::array();
  for (const auto& t : trajectories) all.push_back(t);
  std::ofstream(directory / "trajectories.json") << all.dump(1) << '\n';
  std::ofstream(directory / "summary.json") << json(summary).dump(2) << '\n';

  const int n = schema.size();
  std::vector<std::string> header{"tile", "clicks", "baseline_miou", "final_miou", "gain", "corrected_px_per_click"};
  for (const auto& c : schema.classes()) header.push_back("gain_" + c.name);
  std::vector<std::vector<std::string>> rows;
  for (const auto& t : trajectories) {
    std::vector<std::string> row{t.tile_id,
                                 std::to_string(t.click_count()),
                                 format_number(t.steps.front().mean_iou),
                                 format_number(t.steps.back().mean_iou),
                                 format_number(t.gain()),
                                 format_number(corrected_pixels_per_click(t), 2)};
    for (int k = 0; k < n; ++k) {
      const auto& a = t.steps.front().iou_per_class[static_cast<std::size_t>(k)];
      const auto& b = t.steps.back().iou_per_class[static_cast<std::size_t>(k)];
      row.push_back(a && b ? format_number(*b - *a) : "");
    }
    rows.push_back(std::move(row));
  }
  write_csv(directory / "per_tile.csv", header, rows);

  std::vector<std::string> curve_header{"clicks", "mean_iou"};
  for (const auto& c : schema.classes()) curve_header.push_back("iou_" + c.name);
  std::vector<std::vector<std::string>> curve_rows;
  for (std::size_t k = 0; k < summary.curve.size(); ++k) {
    std::vector<std::string> row{std::to_string(k), format_number(summary.curve[k])};
    for (int c = 0; c < n; ++c) row.push_back(format_number(summary.class_curves[static_cast<std::size_t>(c)][k]));
    curve_rows.push_back(std::move(row));
  }
  write_csv(directory / "curve.csv", curve_header, curve_rows);

  std::vector<Series> series{{"mean IoU", summary.curve, {0, 0, 0}}};
  for (int c = 0; c < n; ++c) {
    Rgb color = schema.color_of(c);
    if (color[0] > 230 && color[1] > 230 && color[2] > 230) color = {150, 150, 150};  // keep white classes visible
    series.push_back({schema[c].name, summary.class_curves[static_cast<std::size_t>(c)], color});
  }
  plot_series_png(directory / "curves.png", "IoU vs. clicks", "clicks", "IoU", series);
}

std::vector<RefinementTrajectory> read_trajectories(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("trajectory file not found: " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::exception& e) {
    throw LoadError("trajectory file " + path.string() + " is not valid JSON: " + e.what());
  }
  std::vector<RefinementTrajectory> out;
  if (doc.is_array()) {
    for (const auto& t : doc) out.push_back(t.get<RefinementTrajectory>());
  } else {
    out.push_back(doc.get<RefinementTrajectory>());
  }
  return out;
}

}  // namespace clickseg
