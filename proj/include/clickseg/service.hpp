#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "clickseg/datasets.hpp"
#include "clickseg/evaluation.hpp"
#include "clickseg/model.hpp"

namespace clickseg {

struct ServiceConfig {
  int max_sessions = 64;     // least recently used idle session is evicted beyond this
  int max_history = 1024;    // clicks per session
  int max_image_side = 8192;
};

struct SessionSnapshot {
  std::string session_id;
  std::string tile_id;
  Shape shape;
  std::vector<Click> clicks;
  SegmentationMap labels;        // current prediction
  bool has_ground_truth = false;
  std::vector<double> iou_series;  // mean IoU after 0..k clicks, with ground truth only
  std::vector<double> latencies_ms;  // inference time of each click
};

struct ClickResult {
  SegmentationMap labels;
  std::uint64_t changed_pixels = 0;
  std::optional<double> mean_iou;
  std::optional<double> iou_delta;
  double latency_ms = 0.0;
  int history_length = 0;
};

struct UndoResult {
  SegmentationMap labels;
  bool undone = false;  // false: history was already empty, nothing changed
  std::optional<double> mean_iou;
  int history_length = 0;
};

// In-memory refinement sessions over one shared, read-only checkpoint.
// Calls on different sessions run concurrently; calls on one session are
// serialised. Every prediction is predict_map(checkpoint, image, clicks), so
// a session's map depends on nothing but its click history.
class SessionManager {
 public:
  // A null checkpoint gives a manager that answers every model request with
  // ServiceUnavailableError.
  explicit SessionManager(std::shared_ptr<const ModelCheckpoint> checkpoint, ServiceConfig config = {});
  ~SessionManager();
  SessionManager(const SessionManager&) = delete;
  SessionManager& operator=(const SessionManager&) = delete;

  // Tiles that sessions may be opened on by id.
  void set_tiles(std::vector<RasterTile> tiles);

  [[nodiscard]] bool ready() const { return checkpoint_ != nullptr; }
  [[nodiscard]] const ClassSchema& classes() const;
  [[nodiscard]] const ModelCheckpoint& checkpoint() const;
  [[nodiscard]] std::size_t session_count() const;
  [[nodiscard]] const ServiceConfig& config() const { return config_; }

  SessionSnapshot create(const Image& image, std::optional<SegmentationMap> ground_truth = std::nullopt,
                         const std::string& tile_id = "upload");
  SessionSnapshot create_from_tile(const std::string& tile_id);

  ClickResult add_click(const std::string& session_id, int row, int col, int class_id);
  UndoResult undo(const std::string& session_id);
  [[nodiscard]] SessionSnapshot get(const std::string& session_id) const;
  // Softmax of the current step (recomputed after an undo).
  [[nodiscard]] FloatStack probabilities(const std::string& session_id) const;
  // Same record format the automatic loop writes (clicker "manual"). Metric
  // fields are NaN/0 without ground truth.
  [[nodiscard]] RefinementTrajectory export_trajectory(const std::string& session_id) const;
  void close(const std::string& session_id);

 private:
  struct Session;
  std::shared_ptr<Session> find(const std::string& session_id) const;
  std::string new_id();

  std::shared_ptr<const ModelCheckpoint> checkpoint_;
  ServiceConfig config_;
  std::map<std::string, RasterTile> tiles_;
  mutable std::mutex mutex_;  // guards sessions_, tiles_, clock_, id_rng_
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  mutable std::uint64_t clock_ = 0;
  Rng id_rng_;
};

// JSON/HTTP front end for a SessionManager, versioned under /v1.
class HttpService {
 public:
  explicit HttpService(SessionManager& manager);
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  // Binds and returns the port (a free one when `port` is 0).
  int bind(const std::string& host, int port);
  // Serves until stop(); call after bind().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace clickseg
