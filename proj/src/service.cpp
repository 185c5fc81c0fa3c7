#include "clickseg/service.hpp"

#include <chrono>
#include <cmath>
#include <limits>
#include <random>

namespace clickseg {

struct SessionManager::Session {
  std::mutex mutex;  // serialises every call on this session
  std::string id;
  std::string tile_id;
  Image image;
  std::optional<SegmentationMap> ground_truth;
  std::vector<Click> clicks;
  std::vector<SegmentationMap> maps;   // maps[k]: prediction after k clicks
  std::vector<TrajectoryStep> steps;   // parallel to maps
  std::vector<double> latencies_ms;    // parallel to clicks
  FloatStack probabilities;            // of maps.back() when fresh
  bool probabilities_fresh = false;
  std::uint64_t last_used = 0;         // guarded by the manager's mutex
};

namespace {

TrajectoryStep make_step(const SegmentationMap& pred, const std::optional<SegmentationMap>& gt, int n_classes,
                         const std::vector<TrajectoryStep>& previous) {
  TrajectoryStep step;
  if (gt) {
    step = measure_step(pred, *gt, n_classes);
    if (!previous.empty()) {
      step.corrected_pixels =
          static_cast<std::int64_t>(previous.back().error_pixels) - static_cast<std::int64_t>(step.error_pixels);
    }
  } else {
    step.mean_iou = std::numeric_limits<double>::quiet_NaN();
  }
  return step;
}

std::optional<double> iou_of(const TrajectoryStep& s, bool has_gt) {
  if (!has_gt || std::isnan(s.mean_iou)) return std::nullopt;
  return s.mean_iou;
}

}  // namespace

SessionManager::SessionManager(std::shared_ptr<const ModelCheckpoint> checkpoint, ServiceConfig config)
    : checkpoint_(std::move(checkpoint)), config_(config), id_rng_(std::random_device{}()) {
  if (config_.max_sessions < 1) throw ConfigError("max_sessions must be >= 1");
  if (config_.max_history < 0) throw ConfigError("max_history must be >= 0");
}

SessionManager::~SessionManager() = default;

void SessionManager::set_tiles(std::vector<RasterTile> tiles) {
  std::lock_guard lock(mutex_);
  tiles_.clear();
  for (auto& t : tiles) {
    auto id = t.id;
    tiles_.emplace(std::move(id), std::move(t));
  }
}

const ModelCheckpoint& SessionManager::checkpoint() const {
  if (!checkpoint_) throw ServiceUnavailableError("no model is loaded");
  return *checkpoint_;
}

const ClassSchema& SessionManager::classes() const { return checkpoint().schema; }

std::size_t SessionManager::session_count() const {
  std::lock_guard lock(mutex_);
  return sessions_.size();
}

std::string SessionManager::new_id() {
  static constexpr char kHex[] = "0123456789abcdef";
  std::string id;
  for (int part = 0; part < 2; ++part) {
    auto v = id_rng_();
    for (int i = 0; i < 16; ++i, v >>= 4) id.push_back(kHex[v & 0xF]);
  }
  return id;
}

SessionSnapshot SessionManager::create(const Image& image, std::optional<SegmentationMap> ground_truth,
                                       const std::string& tile_id) {
  const auto& ckpt = checkpoint();
  if (image.empty()) throw ValidationError("image is empty");
  if (image.rows() > config_.max_image_side || image.cols() > config_.max_image_side) {
    throw ValidationError("image is " + std::to_string(image.rows()) + "x" + std::to_string(image.cols()) +
                          ", larger than the " + std::to_string(config_.max_image_side) + " pixel limit");
  }
  if (image.channels() != ckpt.image_channels()) {
    throw ValidationError("image has " + std::to_string(image.channels()) + " channels, the model expects " +
                          std::to_string(ckpt.image_channels()));
  }
  if (ground_truth) {
    if (ground_truth->shape() != image.shape()) throw ValidationError("ground truth and image sizes differ");
    if (ground_truth->label_bound() > ckpt.schema.size()) throw ValidationError("ground truth has unknown class ids");
  }

  auto session = std::make_shared<Session>();
  session->tile_id = tile_id;
  session->image = image;
  session->ground_truth = std::move(ground_truth);
  auto pred = predict_map(ckpt, session->image, {});
  session->steps.push_back(make_step(pred.labels, session->ground_truth, ckpt.schema.size(), session->steps));
  session->maps.push_back(std::move(pred.labels));
  session->probabilities = std::move(pred.probabilities);
  session->probabilities_fresh = true;

  {
    std::lock_guard lock(mutex_);
    while (static_cast<int>(sessions_.size()) >= config_.max_sessions) {
      // Evict the least recently used session nobody is working on.
      auto victim = sessions_.end();
      for (auto it = sessions_.begin(); it != sessions_.end(); ++it) {
        if (victim == sessions_.end() || it->second->last_used < victim->second->last_used) {
          std::unique_lock probe(it->second->mutex, std::try_to_lock);
          if (probe.owns_lock()) victim = it;
        }
      }
      if (victim == sessions_.end()) {
        throw ServiceUnavailableError("all " + std::to_string(config_.max_sessions) + " sessions are busy");
      }
      sessions_.erase(victim);
    }
    do {
      session->id = new_id();
    } while (sessions_.count(session->id) != 0);
    session->last_used = ++clock_;
    sessions_.emplace(session->id, session);
  }
  return get(session->id);
}

SessionSnapshot SessionManager::create_from_tile(const std::string& tile_id) {
  (void)checkpoint();  // unavailable before not-found
  RasterTile tile;
  {
    std::lock_guard lock(mutex_);
    const auto it = tiles_.find(tile_id);
    if (it == tiles_.end()) throw NotFoundError("unknown tile id '" + tile_id + "'");
    tile = it->second;
  }
  return create(tile.image, tile.ground_truth, tile.id);
}

std::shared_ptr<SessionManager::Session> SessionManager::find(const std::string& session_id) const {
  std::lock_guard lock(mutex_);
  const auto it = sessions_.find(session_id);
  if (it == sessions_.end()) throw NotFoundError("unknown session '" + session_id + "'");
  it->second->last_used = ++clock_;
  return it->second;
}

ClickResult SessionManager::add_click(const std::string& session_id, int row, int col, int class_id) {
  const auto& ckpt = checkpoint();
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  if (!s->image.shape().contains(row, col)) {
    throw ValidationError("click (" + std::to_string(row) + ", " + std::to_string(col) + ") is outside the " +
                          std::to_string(s->image.rows()) + "x" + std::to_string(s->image.cols()) + " image");
  }
  if (class_id < 0 || class_id >= ckpt.schema.size()) {
    throw ValidationError("class id " + std::to_string(class_id) + " is not in [0, " +
                          std::to_string(ckpt.schema.size()) + ")");
  }
  if (static_cast<int>(s->clicks.size()) >= config_.max_history) {
    throw ValidationError("session history is full (" + std::to_string(config_.max_history) + " clicks)");
  }

  auto clicks = s->clicks;
  clicks.push_back({row, col, class_id});
  const auto start = std::chrono::steady_clock::now();
  auto pred = predict_map(ckpt, s->image, clicks);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();

  ClickResult out;
  const auto& before = s->maps.back();
  for (std::size_t i = 0; i < before.size(); ++i) out.changed_pixels += before[i] != pred.labels[i] ? 1 : 0;
  auto step = make_step(pred.labels, s->ground_truth, ckpt.schema.size(), s->steps);
  step.click = clicks.back();
  const bool gt = s->ground_truth.has_value();
  out.mean_iou = iou_of(step, gt);
  if (out.mean_iou) {
    const auto prev = iou_of(s->steps.back(), gt);
    if (prev) out.iou_delta = *out.mean_iou - *prev;
  }

  s->clicks = std::move(clicks);
  s->steps.push_back(std::move(step));
  s->maps.push_back(pred.labels);
  s->latencies_ms.push_back(ms);
  s->probabilities = std::move(pred.probabilities);
  s->probabilities_fresh = true;

  out.labels = std::move(pred.labels);
  out.latency_ms = ms;
  out.history_length = static_cast<int>(s->clicks.size());
  return out;
}

UndoResult SessionManager::undo(const std::string& session_id) {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  UndoResult out;
  if (!s->clicks.empty()) {
    s->clicks.pop_back();
    s->maps.pop_back();
    s->steps.pop_back();
    s->latencies_ms.pop_back();
    s->probabilities_fresh = false;
    out.undone = true;
  }
  out.labels = s->maps.back();
  out.mean_iou = iou_of(s->steps.back(), s->ground_truth.has_value());
  out.history_length = static_cast<int>(s->clicks.size());
  return out;
}

SessionSnapshot SessionManager::get(const std::string& session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  SessionSnapshot out;
  out.session_id = s->id;
  out.tile_id = s->tile_id;
  out.shape = s->image.shape();
  out.clicks = s->clicks;
  out.labels = s->maps.back();
  out.has_ground_truth = s->ground_truth.has_value();
  if (out.has_ground_truth) {
    for (const auto& st : s->steps) out.iou_series.push_back(st.mean_iou);
  }
  out.latencies_ms = s->latencies_ms;
  return out;
}

FloatStack SessionManager::probabilities(const std::string& session_id) const {
  const auto& ckpt = checkpoint();
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  if (!s->probabilities_fresh) {
    s->probabilities = predict_map(ckpt, s->image, s->clicks).probabilities;
    s->probabilities_fresh = true;
  }
  return s->probabilities;
}

RefinementTrajectory SessionManager::export_trajectory(const std::string& session_id) const {
  auto s = find(session_id);
  std::lock_guard lock(s->mutex);
  RefinementTrajectory t;
  t.tile_id = s->tile_id;
  t.clicker = "manual";
  t.steps = s->steps;
  return t;
}

void SessionManager::close(const std::string& session_id) {
  std::shared_ptr<Session> s;
  {
    std::lock_guard lock(mutex_);
    const auto it = sessions_.find(session_id);
    if (it == sessions_.end()) throw NotFoundError("unknown session '" + session_id + "'");
    s = it->second;
    sessions_.erase(it);
  }
  // Let an in-flight call finish before the state goes away.
  std::lock_guard wait(s->mutex);
}

}  // namespace clickseg
