#pragma once

#include <string>
#include <vector>

#include "clickseg/datasets.hpp"
#include "clickseg/raster.hpp"
#include "clickseg/schema.hpp"

namespace clickseg {

// Label value of a click. Non-negative values are class ids; the two
// negative markers are only meaningful for single-channel encodings.
inline constexpr int kBorderLabel = -1;
inline constexpr int kErrorLabel = -2;

struct Click {
  int row = 0;
  int col = 0;
  int label = 0;

  [[nodiscard]] bool is_class() const { return label >= 0; }
  friend bool operator==(const Click&, const Click&) = default;
  friend auto operator<=>(const Click&, const Click&) = default;
};

enum class SamplingStrategy { kInside, kBorder, kSingleBorder, kSingleError };

std::string to_string(SamplingStrategy s);
SamplingStrategy sampling_strategy_from_string(const std::string& s);

struct SamplingConfig {
  SamplingStrategy strategy = SamplingStrategy::kInside;
  int max_clicks = 40;
  double zero_probability = 0.2;
  bool frequency_balanced = true;

  void validate() const;
};

// 0 with probability zero_probability, otherwise uniform on [1, max_clicks].
int sample_click_count(const SamplingConfig& config, Rng& rng);

// Clicks on pixels whose ground truth equals the click label. Balanced mode
// draws the class uniformly over classes present in `gt`, then a pixel of
// that class uniformly; unbalanced mode draws pixels uniformly.
std::vector<Click> sample_inside_clicks(const SegmentationMap& gt, int count, const ClassSchema& schema,
                                        bool balanced, Rng& rng);

// A pixel is on a border when one of its 4-neighbours has another label.
[[nodiscard]] bool is_border_pixel(const SegmentationMap& gt, int row, int col);

// Clicks on border pixels labelled with a class drawn uniformly from the
// distinct labels of the pixel and its 4-neighbours.
std::vector<Click> sample_border_clicks(const SegmentationMap& gt, int count, Rng& rng);

// Clicks (label kErrorLabel) drawn uniformly over pixels where pred != gt.
// Returns an empty list when the prediction is perfect.
std::vector<Click> sample_error_clicks(const SegmentationMap& gt, const SegmentationMap& pred, int count, Rng& rng);

}  // namespace clickseg
