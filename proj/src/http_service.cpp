#include <httplib.h>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "clickseg/digest.hpp"
#include "clickseg/service.hpp"

namespace clickseg {

using nlohmann::json;

namespace {

std::string hex_color(const Rgb& c) {
  char buf[8];
  std::snprintf(buf, sizeof buf, "#%02x%02x%02x", c[0], c[1], c[2]);
  return buf;
}

json legend(const ClassSchema& schema) {
  json out = json::array();
  for (const auto& c : schema.classes()) {
    out.push_back({{"id", c.id}, {"name", c.name}, {"color", c.color}, {"hex", hex_color(c.color)}});
  }
  return out;
}

bool wants_raw(const httplib::Request& req) {
  if (!req.has_param("raw")) return false;
  const auto v = req.get_param_value("raw");
  return v == "1" || v == "true";
}

void put_mask(json& j, const SegmentationMap& labels, const ClassSchema& schema, bool raw) {
  j["mask_png"] = base64_encode(encode_png(render_labels(labels, schema)));
  if (raw) {
    j["mask_raw"] = {{"rows", labels.rows()},
                     {"cols", labels.cols()},
                     {"dtype", "uint8"},
                     {"data", base64_encode(labels.labels())}};
  }
}

json optional_number(const std::optional<double>& v) { return v ? json(*v) : json(nullptr); }

json snapshot_json(const SessionSnapshot& s, const ClassSchema& schema, bool raw) {
  json clicks = json::array();
  for (const auto& c : s.clicks) clicks.push_back({{"row", c.row}, {"col", c.col}, {"class_id", c.label}});
  json j{{"session_id", s.session_id},
         {"tile_id", s.tile_id},
         {"rows", s.shape.rows},
         {"cols", s.shape.cols},
         {"clicks", clicks},
         {"history_length", s.clicks.size()},
         {"has_ground_truth", s.has_ground_truth},
         {"latencies_ms", s.latencies_ms}};
  if (s.has_ground_truth) {
    json series = json::array();
    for (double v : s.iou_series) series.push_back(std::isnan(v) ? json(nullptr) : json(v));
    j["iou_series"] = series;
    j["iou"] = series.back();
  }
  put_mask(j, s.labels, schema, raw);
  return j;
}

void send(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message) {
  send(res, status, {{"error", message}, {"status", status}});
}

template <typename F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const NotFoundError& e) {
      send_error(res, 404, e.what());
    } catch (const ServiceUnavailableError& e) {
      send_error(res, 503, e.what());
    } catch (const json::exception& e) {
      send_error(res, 400, std::string("bad request body: ") + e.what());
    } catch (const Error& e) {
      // Validation failures and anything else traced back to the input.
      send_error(res, 422, e.what());
    } catch (const std::exception& e) {
      spdlog::error("{} {}: {}", req.method, req.path, e.what());
      send_error(res, 500, "internal error");
    }
  };
}

Image decode_upload(const std::string& bytes, const char* what) {
  try {
    return decode_image({reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size()});
  } catch (const Error& e) {
    throw ValidationError(std::string(what) + " could not be decoded: " + e.what());
  }
}

SegmentationMap decode_ground_truth(const std::string& bytes, const ClassSchema& schema) {
  const auto raster = decode_upload(bytes, "ground truth");
  try {
    return labels_from_colors(raster, schema);
  } catch (const Error& e) {
    throw ValidationError(std::string("ground truth: ") + e.what());
  }
}

std::string as_bytes(const std::vector<std::uint8_t>& v) { return {v.begin(), v.end()}; }

}  // namespace

struct HttpService::Impl {
  SessionManager& manager;
  httplib::Server server;
  bool bound = false;

  explicit Impl(SessionManager& m) : manager(m) { routes(); }

  SessionSnapshot create(const httplib::Request& req) {
    if (req.is_multipart_form_data()) {
      if (req.has_file("image")) {
        const auto image = decode_upload(req.get_file_value("image").content, "image");
        std::optional<SegmentationMap> gt;
        if (req.has_file("ground_truth")) {
          gt = decode_ground_truth(req.get_file_value("ground_truth").content, manager.classes());
        }
        const auto name = req.has_file("name") ? req.get_file_value("name").content : std::string("upload");
        return manager.create(image, std::move(gt), name);
      }
      if (req.has_file("tile_id")) return manager.create_from_tile(req.get_file_value("tile_id").content);
      throw ValidationError("multipart request needs an 'image' file or a 'tile_id' field");
    }
    const auto body = json::parse(req.body);
    if (body.contains("tile_id") && !body.contains("image_png")) {
      return manager.create_from_tile(body.at("tile_id").get<std::string>());
    }
    if (!body.contains("image_png")) throw ValidationError("request needs 'tile_id' or 'image_png'");
    const auto image = decode_upload(as_bytes(base64_decode(body.at("image_png").get<std::string>())), "image");
    std::optional<SegmentationMap> gt;
    if (body.contains("ground_truth_png")) {
      gt = decode_ground_truth(as_bytes(base64_decode(body.at("ground_truth_png").get<std::string>())),
                               manager.classes());
    }
    return manager.create(image, std::move(gt), body.value("name", std::string("upload")));
  }

  void routes() {
    server.Get("/v1/healthz", guarded([this](const httplib::Request& req, httplib::Response& res) {
      if (!manager.ready()) {
        send(res, 503, {{"status", "unavailable"}, {"model_loaded", false}});
        return;
      }
      const auto& ckpt = manager.checkpoint();
      json j{{"status", "ok"},
             {"model_loaded", true},
             {"sessions", manager.session_count()},
             {"max_sessions", manager.config().max_sessions},
             {"architecture", to_string(ckpt.model.spec().architecture)},
             {"classes", ckpt.schema.size()},
             {"train_digest", ckpt.train_digest}};
      if (req.has_param("checksum")) j["weights_checksum"] = ckpt.model.weights_checksum();
      send(res, 200, j);
    }));

    server.Get("/v1/classes", guarded([this](const httplib::Request&, httplib::Response& res) {
      send(res, 200, {{"classes", legend(manager.classes())}});
    }));

    server.Post("/v1/sessions", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto s = create(req);
      auto j = snapshot_json(s, manager.classes(), wants_raw(req));
      j["legend"] = legend(manager.classes());
      send(res, 201, j);
    }));

    server.Get("/v1/sessions/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, snapshot_json(manager.get(req.path_params.at("id")), manager.classes(), wants_raw(req)));
    }));

    server.Delete("/v1/sessions/:id", guarded([this](const httplib::Request& req, httplib::Response& res) {
      manager.close(req.path_params.at("id"));
      send(res, 200, {{"closed", true}});
    }));

    server.Post("/v1/sessions/:id/clicks", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto body = json::parse(req.body);
      const auto r = manager.add_click(req.path_params.at("id"), body.at("row").get<int>(), body.at("col").get<int>(),
                                       body.at("class_id").get<int>());
      json j{{"changed_pixels", r.changed_pixels},
             {"history_length", r.history_length},
             {"latency_ms", r.latency_ms},
             {"iou", optional_number(r.mean_iou)},
             {"iou_delta", optional_number(r.iou_delta)}};
      put_mask(j, r.labels, manager.classes(), wants_raw(req));
      send(res, 200, j);
    }));

    server.Post("/v1/sessions/:id/undo", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const auto r = manager.undo(req.path_params.at("id"));
      json j{{"undone", r.undone}, {"history_length", r.history_length}, {"iou", optional_number(r.mean_iou)}};
      put_mask(j, r.labels, manager.classes(), wants_raw(req));
      send(res, 200, j);
    }));

    server.Get("/v1/sessions/:id/trajectory", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send(res, 200, json(manager.export_trajectory(req.path_params.at("id"))));
    }));

    server.set_logger([](const httplib::Request& req, const httplib::Response& res) {
      spdlog::debug("{} {} -> {}", req.method, req.path, res.status);
    });
  }
};

HttpService::HttpService(SessionManager& manager) : impl_(std::make_unique<Impl>(manager)) {}

HttpService::~HttpService() = default;

int HttpService::bind(const std::string& host, int port) {
  int bound = -1;
  if (port == 0) {
    bound = impl_->server.bind_to_any_port(host);
  } else if (impl_->server.bind_to_port(host, port)) {
    bound = port;
  }
  if (bound < 0) throw ServiceUnavailableError("cannot bind " + host + ":" + std::to_string(port));
  impl_->bound = true;
  return bound;
}

void HttpService::run() {
  if (!impl_->bound) throw ServiceUnavailableError("bind() must be called before run()");
  impl_->server.listen_after_bind();
}

void HttpService::stop() { impl_->server.stop(); }

}  // namespace clickseg
