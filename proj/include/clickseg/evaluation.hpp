#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "clickseg/datasets.hpp"
#include "clickseg/raster.hpp"
#include "clickseg/sampling.hpp"

namespace clickseg {

struct ModelCheckpoint;

// counts[g][p]: pixels with ground truth g predicted as p.
class ConfusionMatrix {
 public:
  ConfusionMatrix() = default;
  explicit ConfusionMatrix(int n_classes);

  void add(const SegmentationMap& pred, const SegmentationMap& gt);
  void merge(const ConfusionMatrix& other);

  [[nodiscard]] int size() const { return n_; }
  [[nodiscard]] std::uint64_t at(int gt, int pred) const { return counts_[static_cast<std::size_t>(gt * n_ + pred)]; }

 private:
  int n_ = 0;
  std::vector<std::uint64_t> counts_;
};

ConfusionMatrix confusion_matrix(const SegmentationMap& pred, const SegmentationMap& gt, int n_classes);

// TP / (TP + FP + FN) per class; nullopt for classes absent from both maps.
std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm);
// Mean over classes that are present; NaN when none is.
double mean_iou(const ConfusionMatrix& cm);
double mean_iou(std::span<const std::optional<double>> ious);

// A 4-connected region of pixels where pred != gt.
struct ErrorComponent {
  std::vector<std::uint32_t> pixels;  // row-major indices, ascending
  Region bbox;
  int majority_gt_class = 0;  // ties go to the smaller id

  [[nodiscard]] std::size_t size() const { return pixels.size(); }
};

// Sorted by size (descending), then by first pixel in row-major order.
std::vector<ErrorComponent> find_error_components(const SegmentationMap& pred, const SegmentationMap& gt);

struct ClickerConfig {
  int top_components = 5;
  // Pixel weight proportional to the Euclidean distance to the nearest
  // pixel outside the component; uniform when false.
  bool interior_weighted = true;
};

// Euclidean distance from every component pixel to the nearest image pixel
// outside the component, in the order of component.pixels. The image border
// does not count as outside. All zeros when the component covers the image.
std::vector<double> interior_distances(const ErrorComponent& component, Shape shape);

// Click on one of the largest mislabelled regions, labelled with the ground
// truth there. nullopt when the prediction is perfect.
std::optional<Click> auto_click_independent(const SegmentationMap& pred, const SegmentationMap& gt, Rng& rng,
                                            const ClickerConfig& config = {});

// Same policy restricted to components whose majority class is
// `target_class`, and to pixels of that class inside them. nullopt when
// there is no such candidate.
std::optional<Click> auto_click_dependent(const SegmentationMap& pred, const SegmentationMap& gt, int target_class,
                                          Rng& rng, const ClickerConfig& config = {});

enum class ClickerKind { kIndependent, kDependent };
std::string to_string(ClickerKind k);
ClickerKind clicker_kind_from_string(const std::string& s);

// Chooses the class for each dependent click: schema order, round-robin,
// skipping classes without a candidate.
class RoundRobinClicker {
 public:
  explicit RoundRobinClicker(int n_classes) : n_(n_classes) {}
  std::optional<Click> next(const SegmentationMap& pred, const SegmentationMap& gt, Rng& rng,
                            const ClickerConfig& config = {});

 private:
  int n_;
  int cursor_ = 0;
};

struct TrajectoryStep {
  std::optional<Click> click;  // empty for the zero-click baseline
  std::vector<std::optional<double>> iou_per_class;
  double mean_iou = 0.0;
  std::uint64_t error_pixels = 0;
  std::int64_t corrected_pixels = 0;  // errors before minus errors after
};

struct RefinementTrajectory {
  std::string tile_id;
  std::string clicker;
  std::vector<TrajectoryStep> steps;  // steps[0] is the baseline

  [[nodiscard]] int click_count() const { return static_cast<int>(steps.size()) - 1; }
  [[nodiscard]] std::vector<Click> clicks() const;
  [[nodiscard]] double gain() const { return steps.back().mean_iou - steps.front().mean_iou; }
};

void to_json(nlohmann::json& j, const RefinementTrajectory& t);
void from_json(const nlohmann::json& j, RefinementTrajectory& t);

// One metric record for `pred` against `gt`.
TrajectoryStep measure_step(const SegmentationMap& pred, const SegmentationMap& gt, int n_classes);

using Predictor = std::function<SegmentationMap(std::span<const Click>)>;

// Step 0 predicts with no clicks; each further step adds one automatic click
// (all earlier clicks kept) and re-predicts. Stops early once no error
// pixel remains or the clicker finds no candidate.
RefinementTrajectory run_refinement_loop(const Predictor& predict, const SegmentationMap& gt, int n_classes,
                                         ClickerKind clicker, int budget, Rng& rng, const ClickerConfig& config = {});
RefinementTrajectory run_refinement_loop(const ModelCheckpoint& checkpoint, const RasterTile& tile, ClickerKind clicker,
                                         int budget, Rng& rng, const ClickerConfig& config = {});

// (baseline errors - final errors) / clicks; averaged over trajectories
// with at least one click. 0 when there is none.
double corrected_pixels_per_click(const RefinementTrajectory& trajectory);
double corrected_pixels_per_click(std::span<const RefinementTrajectory> trajectories);

struct EvaluationSummary {
  int tiles = 0;
  double baseline_miou = 0.0;  // means over tiles
  double final_miou = 0.0;
  double mean_gain = 0.0;
  double improved_fraction = 0.0;  // tiles whose final mean IoU beats the baseline
  double corrected_per_click = 0.0;
  std::vector<double> class_gain;  // per class, over tiles where the class is present
  // Mean IoU after k clicks, k = 0..budget. A trajectory that stopped early
  // contributes its last value to later entries.
  std::vector<double> curve;
  std::vector<std::vector<double>> class_curves;  // [class][k]
};

EvaluationSummary summarize(std::span<const RefinementTrajectory> trajectories, int n_classes, int budget);

void to_json(nlohmann::json& j, const EvaluationSummary& s);

}  // namespace clickseg
