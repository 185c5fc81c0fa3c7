#include "clickseg/sampling.hpp"

#include <algorithm>
#include <array>

#include "clickseg/error.hpp"

namespace clickseg {

std::string to_string(SamplingStrategy s) {
  switch (s) {
    case SamplingStrategy::kInside:
      return "inside";
    case SamplingStrategy::kBorder:
      return "border";
    case SamplingStrategy::kSingleBorder:
      return "single_border";
    case SamplingStrategy::kSingleError:
      return "single_error";
  }
  return "?";
}

SamplingStrategy sampling_strategy_from_string(const std::string& s) {
  std::string v = s;
  std::transform(v.begin(), v.end(), v.begin(), [](unsigned char ch) { return std::tolower(ch); });
  if (v == "inside") return SamplingStrategy::kInside;
  if (v == "border") return SamplingStrategy::kBorder;
  if (v == "single_border") return SamplingStrategy::kSingleBorder;
  if (v == "single_error") return SamplingStrategy::kSingleError;
  throw ConfigError("unknown sampling strategy '" + s + "'");
}

void SamplingConfig::validate() const {
  if (max_clicks < 0) throw ConfigError("max_clicks must be >= 0");
  if (!(zero_probability >= 0.0 && zero_probability <= 1.0)) {
    throw ConfigError("zero_probability must lie in [0,1]");
  }
}

int sample_click_count(const SamplingConfig& config, Rng& rng) {
  config.validate();
  std::bernoulli_distribution none(config.zero_probability);
  if (none(rng) || config.max_clicks == 0) return 0;
  return std::uniform_int_distribution<int>(1, config.max_clicks)(rng);
}

std::vector<Click> sample_inside_clicks(const SegmentationMap& gt, int count, const ClassSchema& schema,
                                        bool balanced, Rng& rng) {
  if (count < 0) throw ConfigError("click count must be >= 0");
  std::vector<Click> clicks;
  if (count == 0) return clicks;
  if (gt.empty()) throw DimensionError("cannot sample clicks on an empty map");
  const int cols = gt.cols();
  clicks.reserve(static_cast<std::size_t>(count));

  if (!balanced) {
    std::uniform_int_distribution<std::size_t> pick(0, gt.size() - 1);
    for (int i = 0; i < count; ++i) {
      const std::size_t p = pick(rng);
      clicks.push_back({static_cast<int>(p / cols), static_cast<int>(p % cols), gt[p]});
    }
    return clicks;
  }

  const int n = std::max(schema.size(), gt.label_bound());
  std::vector<std::vector<std::size_t>> by_class(static_cast<std::size_t>(n));
  for (std::size_t p = 0; p < gt.size(); ++p) by_class[gt[p]].push_back(p);
  std::vector<int> present;
  for (int k = 0; k < n; ++k) {
    if (!by_class[static_cast<std::size_t>(k)].empty()) present.push_back(k);
  }
  std::uniform_int_distribution<std::size_t> pick_class(0, present.size() - 1);
  for (int i = 0; i < count; ++i) {
    const int k = present[pick_class(rng)];
    const auto& pixels = by_class[static_cast<std::size_t>(k)];
    const std::size_t p = pixels[std::uniform_int_distribution<std::size_t>(0, pixels.size() - 1)(rng)];
    clicks.push_back({static_cast<int>(p / cols), static_cast<int>(p % cols), k});
  }
  return clicks;
}

bool is_border_pixel(const SegmentationMap& gt, int row, int col) {
  const auto v = gt.at(row, col);
  return (row > 0 && gt.at(row - 1, col) != v) || (row + 1 < gt.rows() && gt.at(row + 1, col) != v) ||
         (col > 0 && gt.at(row, col - 1) != v) || (col + 1 < gt.cols() && gt.at(row, col + 1) != v);
}

namespace {

// Distinct labels among a pixel and its 4-neighbours, ascending.
std::vector<int> neighbourhood_labels(const SegmentationMap& gt, int row, int col) {
  std::array<int, 5> v{};
  int n = 0;
  v[n++] = gt.at(row, col);
  if (row > 0) v[n++] = gt.at(row - 1, col);
  if (row + 1 < gt.rows()) v[n++] = gt.at(row + 1, col);
  if (col > 0) v[n++] = gt.at(row, col - 1);
  if (col + 1 < gt.cols()) v[n++] = gt.at(row, col + 1);
  std::vector<int> out(v.begin(), v.begin() + n);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace

std::vector<Click> sample_border_clicks(const SegmentationMap& gt, int count, Rng& rng) {
  if (count < 0) throw ConfigError("click count must be >= 0");
  std::vector<Click> clicks;
  if (count == 0) return clicks;
  std::vector<std::size_t> border;
  for (int r = 0; r < gt.rows(); ++r) {
    for (int c = 0; c < gt.cols(); ++c) {
      if (is_border_pixel(gt, r, c)) border.push_back(static_cast<std::size_t>(r) * gt.cols() + c);
    }
  }
  if (border.empty()) throw NoBoundaryError("map has no class boundary to click on");
  std::uniform_int_distribution<std::size_t> pick(0, border.size() - 1);
  clicks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::size_t p = border[pick(rng)];
    const int r = static_cast<int>(p / gt.cols());
    const int c = static_cast<int>(p % gt.cols());
    const auto labels = neighbourhood_labels(gt, r, c);
    const int label = labels[std::uniform_int_distribution<std::size_t>(0, labels.size() - 1)(rng)];
    clicks.push_back({r, c, label});
  }
  return clicks;
}

std::vector<Click> sample_error_clicks(const SegmentationMap& gt, const SegmentationMap& pred, int count, Rng& rng) {
  if (gt.shape() != pred.shape()) throw DimensionError("prediction and ground truth differ in shape");
  if (count < 0) throw ConfigError("click count must be >= 0");
  std::vector<Click> clicks;
  if (count == 0) return clicks;
  std::vector<std::size_t> wrong;
  for (std::size_t p = 0; p < gt.size(); ++p) {
    if (gt[p] != pred[p]) wrong.push_back(p);
  }
  if (wrong.empty()) return clicks;
  std::uniform_int_distribution<std::size_t> pick(0, wrong.size() - 1);
  clicks.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::size_t p = wrong[pick(rng)];
    clicks.push_back({static_cast<int>(p / gt.cols()), static_cast<int>(p % gt.cols()), kErrorLabel});
  }
  return clicks;
}

}  // namespace clickseg
