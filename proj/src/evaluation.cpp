#include "clickseg/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <nlohmann/json.hpp>

#include "clickseg/error.hpp"
#include "clickseg/model.hpp"

namespace clickseg {

using nlohmann::json;

// --- metrics -------------------------------------------------------------------

ConfusionMatrix::ConfusionMatrix(int n_classes)
    : n_(n_classes), counts_(static_cast<std::size_t>(n_classes) * static_cast<std::size_t>(n_classes), 0) {
  if (n_classes < 1) throw ConfigError("confusion matrix needs at least one class");
}

void ConfusionMatrix::add(const SegmentationMap& pred, const SegmentationMap& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("prediction and ground truth differ in shape");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] >= n_ || pred[i] >= n_) {
      throw LabelError("label " + std::to_string(std::max(gt[i], pred[i])) + " outside " + std::to_string(n_) +
                       " classes");
    }
    ++counts_[static_cast<std::size_t>(gt[i]) * n_ + pred[i]];
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.n_ != n_) throw DimensionError("confusion matrices of different sizes");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

ConfusionMatrix confusion_matrix(const SegmentationMap& pred, const SegmentationMap& gt, int n_classes) {
  ConfusionMatrix cm(n_classes);
  cm.add(pred, gt);
  return cm;
}

std::vector<std::optional<double>> iou_per_class(const ConfusionMatrix& cm) {
  const int n = cm.size();
  std::vector<std::optional<double>> out(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) {
    std::uint64_t tp = cm.at(k, k);
    std::uint64_t fn = 0;
    std::uint64_t fp = 0;
    for (int j = 0; j < n; ++j) {
      if (j == k) continue;
      fn += cm.at(k, j);
      fp += cm.at(j, k);
    }
    const std::uint64_t denom = tp + fp + fn;
    if (denom > 0) out[static_cast<std::size_t>(k)] = static_cast<double>(tp) / static_cast<double>(denom);
  }
  return out;
}

double mean_iou(std::span<const std::optional<double>> ious) {
  double sum = 0.0;
  int count = 0;
  for (const auto& v : ious) {
    if (v) {
      sum += *v;
      ++count;
    }
  }
  return count == 0 ? std::numeric_limits<double>::quiet_NaN() : sum / count;
}

double mean_iou(const ConfusionMatrix& cm) {
  const auto ious = iou_per_class(cm);
  return mean_iou(ious);
}

// --- error components --------------------------------------------------------------

std::vector<ErrorComponent> find_error_components(const SegmentationMap& pred, const SegmentationMap& gt) {
  if (pred.shape() != gt.shape()) throw DimensionError("prediction and ground truth differ in shape");
  const int rows = gt.rows();
  const int cols = gt.cols();
  std::vector<char> seen(gt.size(), 0);
  std::vector<ErrorComponent> out;
  std::vector<std::uint32_t> queue;
  const int n_labels = std::max(gt.label_bound(), 1);
  std::vector<std::size_t> votes(static_cast<std::size_t>(n_labels));

  for (std::size_t start = 0; start < gt.size(); ++start) {
    if (seen[start] || pred[start] == gt[start]) continue;
    ErrorComponent comp;
    queue.assign(1, static_cast<std::uint32_t>(start));
    seen[start] = 1;
    int r_min = rows, r_max = -1, c_min = cols, c_max = -1;
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t head = 0; head < queue.size(); ++head) {
      const auto p = queue[head];
      const int r = static_cast<int>(p / cols);
      const int c = static_cast<int>(p % cols);
      r_min = std::min(r_min, r);
      r_max = std::max(r_max, r);
      c_min = std::min(c_min, c);
      c_max = std::max(c_max, c);
      ++votes[gt[p]];
      auto visit = [&](int rr, int cc) {
        const auto q = static_cast<std::size_t>(rr) * cols + cc;
        if (!seen[q] && pred[q] != gt[q]) {
          seen[q] = 1;
          queue.push_back(static_cast<std::uint32_t>(q));
        }
      };
      if (r > 0) visit(r - 1, c);
      if (r + 1 < rows) visit(r + 1, c);
      if (c > 0) visit(r, c - 1);
      if (c + 1 < cols) visit(r, c + 1);
    }
    comp.pixels = queue;
    std::sort(comp.pixels.begin(), comp.pixels.end());
    comp.bbox = Region{r_min, c_min, r_max - r_min + 1, c_max - c_min + 1};
    comp.majority_gt_class =
        static_cast<int>(std::max_element(votes.begin(), votes.end()) - votes.begin());  // first max = smaller id
    out.push_back(std::move(comp));
  }
  std::stable_sort(out.begin(), out.end(), [](const ErrorComponent& a, const ErrorComponent& b) {
    if (a.size() != b.size()) return a.size() > b.size();
    return a.pixels.front() < b.pixels.front();
  });
  return out;
}

namespace {

// Exact 1-D squared distance transform: lower envelope of the parabolas
// rooted at every sample. Non-feature samples carry kFar.
constexpr double kFar = 1e12;

void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  v.assign(static_cast<std::size_t>(n), 0);
  z.assign(static_cast<std::size_t>(n) + 1, 0.0);
  std::size_t k = 0;
  z[0] = -kInf;
  z[1] = kInf;
  auto meet = [&](int q, int p) { return ((f[q] + double(q) * q) - (f[p] + double(p) * p)) / (2.0 * (q - p)); };
  for (int q = 1; q < n; ++q) {
    double s = meet(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = meet(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    d[q] = double(q - v[k]) * double(q - v[k]) + f[v[k]];
  }
}

}  // namespace

std::vector<double> interior_distances(const ErrorComponent& component, Shape shape) {
  // Nearest outside pixel always lies within the bbox grown by one pixel
  // (clipped to the image), so the transform runs on that window only.
  const int r0 = std::max(0, component.bbox.row - 1);
  const int c0 = std::max(0, component.bbox.col - 1);
  const int r1 = std::min(shape.rows, component.bbox.row + component.bbox.rows + 1);
  const int c1 = std::min(shape.cols, component.bbox.col + component.bbox.cols + 1);
  const int h = r1 - r0;
  const int w = c1 - c0;
  std::vector<double> grid(static_cast<std::size_t>(h) * w, 0.0);
  for (auto p : component.pixels) {
    const int r = static_cast<int>(p / shape.cols) - r0;
    const int c = static_cast<int>(p % shape.cols) - c0;
    grid[static_cast<std::size_t>(r) * w + c] = kFar;
  }
  if (static_cast<std::size_t>(h) * w == component.size()) {
    return std::vector<double>(component.size(), 0.0);
  }

  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> col_in(static_cast<std::size_t>(h));
  std::vector<double> col_out(static_cast<std::size_t>(h));
  for (int c = 0; c < w; ++c) {
    for (int r = 0; r < h; ++r) col_in[static_cast<std::size_t>(r)] = grid[static_cast<std::size_t>(r) * w + c];
    edt_1d(col_in.data(), col_out.data(), h, v, z);
    for (int r = 0; r < h; ++r) grid[static_cast<std::size_t>(r) * w + c] = col_out[static_cast<std::size_t>(r)];
  }
  std::vector<double> row_out(static_cast<std::size_t>(w));
  for (int r = 0; r < h; ++r) {
    edt_1d(grid.data() + static_cast<std::size_t>(r) * w, row_out.data(), w, v, z);
    std::copy(row_out.begin(), row_out.end(), grid.begin() + static_cast<std::ptrdiff_t>(r) * w);
  }

  std::vector<double> out;
  out.reserve(component.size());
  for (auto p : component.pixels) {
    const int r = static_cast<int>(p / shape.cols) - r0;
    const int c = static_cast<int>(p % shape.cols) - c0;
    out.push_back(std::sqrt(grid[static_cast<std::size_t>(r) * w + c]));
  }
  return out;
}

// --- automatic clickers ---------------------------------------------------------------

namespace {

// Draws a pixel of `comp` restricted to `keep` (all pixels when empty).
Click pick_pixel(const ErrorComponent& comp, const SegmentationMap& gt, const std::vector<char>& keep, Rng& rng,
                 const ClickerConfig& config) {
  std::vector<double> weights;
  if (config.interior_weighted) {
    weights = interior_distances(comp, gt.shape());
  } else {
    weights.assign(comp.size(), 1.0);
  }
  for (std::size_t i = 0; i < weights.size(); ++i) {
    if (!keep.empty() && !keep[i]) weights[i] = 0.0;
  }
  double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (total <= 0.0) {
    // Component covering the whole image: no interior information.
    for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = (keep.empty() || keep[i]) ? 1.0 : 0.0;
  }
  std::discrete_distribution<std::size_t> pick(weights.begin(), weights.end());
  const auto p = comp.pixels[pick(rng)];
  return Click{static_cast<int>(p / gt.cols()), static_cast<int>(p % gt.cols()), gt[p]};
}

std::size_t pick_component(std::size_t available, const ClickerConfig& config, Rng& rng) {
  const auto top = std::min<std::size_t>(available, static_cast<std::size_t>(std::max(1, config.top_components)));
  return std::uniform_int_distribution<std::size_t>(0, top - 1)(rng);
}

}  // namespace

std::optional<Click> auto_click_independent(const SegmentationMap& pred, const SegmentationMap& gt, Rng& rng,
                                            const ClickerConfig& config) {
  const auto comps = find_error_components(pred, gt);
  if (comps.empty()) return std::nullopt;
  const auto& comp = comps[pick_component(comps.size(), config, rng)];
  return pick_pixel(comp, gt, {}, rng, config);
}

std::optional<Click> auto_click_dependent(const SegmentationMap& pred, const SegmentationMap& gt, int target_class,
                                          Rng& rng, const ClickerConfig& config) {
  auto comps = find_error_components(pred, gt);
  std::erase_if(comps, [&](const ErrorComponent& c) { return c.majority_gt_class != target_class; });
  if (comps.empty()) return std::nullopt;
  const auto& comp = comps[pick_component(comps.size(), config, rng)];
  std::vector<char> keep(comp.size());
  for (std::size_t i = 0; i < comp.size(); ++i) keep[i] = gt[comp.pixels[i]] == target_class;
  return pick_pixel(comp, gt, keep, rng, config);
}

std::string to_string(ClickerKind k) { return k == ClickerKind::kIndependent ? "independent" : "dependent"; }

ClickerKind clicker_kind_from_string(const std::string& s) {
  if (s == "independent") return ClickerKind::kIndependent;
  if (s == "dependent") return ClickerKind::kDependent;
  throw ConfigError("unknown clicker '" + s + "' (expected independent or dependent)");
}

std::optional<Click> RoundRobinClicker::next(const SegmentationMap& pred, const SegmentationMap& gt, Rng& rng,
                                             const ClickerConfig& config) {
  for (int tries = 0; tries < n_; ++tries) {
    const int k = cursor_;
    cursor_ = (cursor_ + 1) % n_;
    if (auto click = auto_click_dependent(pred, gt, k, rng, config)) return click;
  }
  return std::nullopt;
}

// --- refinement loop ------------------------------------------------------------------

std::vector<Click> RefinementTrajectory::clicks() const {
  std::vector<Click> out;
  for (const auto& s : steps) {
    if (s.click) out.push_back(*s.click);
  }
  return out;
}

TrajectoryStep measure_step(const SegmentationMap& pred, const SegmentationMap& gt, int n_classes) {
  TrajectoryStep step;
  const auto cm = confusion_matrix(pred, gt, n_classes);
  step.iou_per_class = iou_per_class(cm);
  step.mean_iou = mean_iou(step.iou_per_class);
  for (std::size_t i = 0; i < gt.size(); ++i) step.error_pixels += pred[i] != gt[i] ? 1 : 0;
  return step;
}

RefinementTrajectory run_refinement_loop(const Predictor& predict, const SegmentationMap& gt, int n_classes,
                                         ClickerKind clicker, int budget, Rng& rng, const ClickerConfig& config) {
  if (budget < 0) throw ConfigError("click budget must be >= 0");
  RefinementTrajectory traj;
  traj.clicker = to_string(clicker);
  std::vector<Click> clicks;
  auto pred = predict(clicks);
  traj.steps.push_back(measure_step(pred, gt, n_classes));
  RoundRobinClicker schedule(n_classes);

  for (int i = 0; i < budget && traj.steps.back().error_pixels > 0; ++i) {
    const auto click = clicker == ClickerKind::kIndependent ? auto_click_independent(pred, gt, rng, config)
                                                            : schedule.next(pred, gt, rng, config);
    if (!click) break;
    clicks.push_back(*click);
    pred = predict(clicks);
    auto step = measure_step(pred, gt, n_classes);
    step.click = *click;
    step.corrected_pixels =
        static_cast<std::int64_t>(traj.steps.back().error_pixels) - static_cast<std::int64_t>(step.error_pixels);
    traj.steps.push_back(std::move(step));
  }
  return traj;
}

RefinementTrajectory run_refinement_loop(const ModelCheckpoint& checkpoint, const RasterTile& tile, ClickerKind clicker,
                                         int budget, Rng& rng, const ClickerConfig& config) {
  if (!tile.ground_truth) throw ConfigError("tile " + tile.id + " has no ground truth to evaluate against");
  auto predict = [&](std::span<const Click> clicks) { return predict_map(checkpoint, tile.image, clicks).labels; };
  auto traj = run_refinement_loop(predict, *tile.ground_truth, checkpoint.schema.size(), clicker, budget, rng, config);
  traj.tile_id = tile.id;
  return traj;
}

double corrected_pixels_per_click(const RefinementTrajectory& t) {
  if (t.click_count() < 1) return 0.0;
  const double fixed = static_cast<double>(t.steps.front().error_pixels) - static_cast<double>(t.steps.back().error_pixels);
  return fixed / t.click_count();
}

double corrected_pixels_per_click(std::span<const RefinementTrajectory> trajectories) {
  double sum = 0.0;
  int n = 0;
  for (const auto& t : trajectories) {
    if (t.click_count() < 1) continue;
    sum += corrected_pixels_per_click(t);
    ++n;
  }
  return n == 0 ? 0.0 : sum / n;
}

EvaluationSummary summarize(std::span<const RefinementTrajectory> trajectories, int n_classes, int budget) {
  EvaluationSummary s;
  s.tiles = static_cast<int>(trajectories.size());
  s.curve.assign(static_cast<std::size_t>(budget) + 1, 0.0);
  s.class_curves.assign(static_cast<std::size_t>(n_classes), std::vector<double>(static_cast<std::size_t>(budget) + 1, 0.0));
  s.class_gain.assign(static_cast<std::size_t>(n_classes), 0.0);
  if (trajectories.empty()) return s;

  std::vector<std::vector<int>> class_counts(static_cast<std::size_t>(n_classes),
                                             std::vector<int>(static_cast<std::size_t>(budget) + 1, 0));
  std::vector<int> gain_counts(static_cast<std::size_t>(n_classes), 0);
  int improved = 0;
  for (const auto& t : trajectories) {
    s.baseline_miou += t.steps.front().mean_iou;
    s.final_miou += t.steps.back().mean_iou;
    if (t.steps.back().mean_iou > t.steps.front().mean_iou) ++improved;
    for (int k = 0; k <= budget; ++k) {
      const auto& step = t.steps[std::min<std::size_t>(static_cast<std::size_t>(k), t.steps.size() - 1)];
      s.curve[static_cast<std::size_t>(k)] += step.mean_iou;
      for (int c = 0; c < n_classes; ++c) {
        if (const auto& v = step.iou_per_class[static_cast<std::size_t>(c)]) {
          s.class_curves[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)] += *v;
          ++class_counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
        }
      }
    }
    for (int c = 0; c < n_classes; ++c) {
      const auto& a = t.steps.front().iou_per_class[static_cast<std::size_t>(c)];
      const auto& b = t.steps.back().iou_per_class[static_cast<std::size_t>(c)];
      if (a && b) {
        s.class_gain[static_cast<std::size_t>(c)] += *b - *a;
        ++gain_counts[static_cast<std::size_t>(c)];
      }
    }
  }
  const double n = static_cast<double>(trajectories.size());
  s.baseline_miou /= n;
  s.final_miou /= n;
  s.mean_gain = s.final_miou - s.baseline_miou;
  s.improved_fraction = improved / n;
  s.corrected_per_click = corrected_pixels_per_click(trajectories);
  for (auto& v : s.curve) v /= n;
  for (int c = 0; c < n_classes; ++c) {
    for (int k = 0; k <= budget; ++k) {
      const int cnt = class_counts[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
      auto& v = s.class_curves[static_cast<std::size_t>(c)][static_cast<std::size_t>(k)];
      v = cnt > 0 ? v / cnt : std::numeric_limits<double>::quiet_NaN();
    }
    const int g = gain_counts[static_cast<std::size_t>(c)];
    s.class_gain[static_cast<std::size_t>(c)] = g > 0 ? s.class_gain[static_cast<std::size_t>(c)] / g : 0.0;
  }
  return s;
}

// --- serialisation ------------------------------------------------------------------------

namespace {

json optional_array(const std::vector<std::optional<double>>& v) {
  json a = json::array();
  for (const auto& x : v) a.push_back(x ? json(*x) : json(nullptr));
  return a;
}

json nan_safe(double v) { return std::isnan(v) ? json(nullptr) : json(v); }

}  // namespace

void to_json(json& j, const RefinementTrajectory& t) {
  j = json{{"format", "clickseg.trajectory/v1"}, {"tile_id", t.tile_id}, {"clicker", t.clicker}};
  auto& steps = j["steps"] = json::array();
  for (const auto& s : t.steps) {
    json e{{"iou_per_class", optional_array(s.iou_per_class)},
           {"mean_iou", nan_safe(s.mean_iou)},
           {"error_pixels", s.error_pixels},
           {"corrected_pixels", s.corrected_pixels}};
    e["click"] = s.click ? json{{"row", s.click->row}, {"col", s.click->col}, {"label", s.click->label}} : json(nullptr);
    steps.push_back(std::move(e));
  }
}

void from_json(const json& j, RefinementTrajectory& t) {
  if (j.value("format", "") != "clickseg.trajectory/v1") throw ConfigError("not a clickseg trajectory record");
  t.tile_id = j.value("tile_id", "");
  t.clicker = j.value("clicker", "");
  t.steps.clear();
  for (const auto& e : j.at("steps")) {
    TrajectoryStep s;
    if (!e.at("click").is_null()) {
      const auto& c = e.at("click");
      s.click = Click{c.at("row").get<int>(), c.at("col").get<int>(), c.at("label").get<int>()};
    }
    for (const auto& v : e.at("iou_per_class")) {
      s.iou_per_class.push_back(v.is_null() ? std::nullopt : std::optional<double>(v.get<double>()));
    }
    s.mean_iou = e.at("mean_iou").is_null() ? std::numeric_limits<double>::quiet_NaN() : e.at("mean_iou").get<double>();
    s.error_pixels = e.at("error_pixels").get<std::uint64_t>();
    s.corrected_pixels = e.at("corrected_pixels").get<std::int64_t>();
    t.steps.push_back(std::move(s));
  }
  if (t.steps.empty()) throw ConfigError("trajectory has no baseline step");
}

void to_json(json& j, const EvaluationSummary& s) {
  auto vec = [](const std::vector<double>& v) {
    json a = json::array();
    for (double x : v) a.push_back(nan_safe(x));
    return a;
  };
  j = json{{"tiles", s.tiles},
           {"baseline_miou", nan_safe(s.baseline_miou)},
           {"final_miou", nan_safe(s.final_miou)},
           {"mean_gain", nan_safe(s.mean_gain)},
           {"improved_fraction", s.improved_fraction},
           {"corrected_pixels_per_click", s.corrected_per_click},
           {"class_gain", vec(s.class_gain)},
           {"curve", vec(s.curve)}};
  auto& cc = j["class_curves"] = json::array();
  for (const auto& c : s.class_curves) cc.push_back(vec(c));
}

}  // namespace clickseg
