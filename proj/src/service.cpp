#include <harmonia/service.hpp>

#include <harmonia/data_streams.hpp>
#include <harmonia/error.hpp>
#include <harmonia/image_io.hpp>
#include <harmonia/params_json.hpp>
#include <harmonia/trainer.hpp>

#include <httplib.h>
#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <random>

namespace harmonia {

using nlohmann::ordered_json;

struct HarmonizationService::Session {
  std::mutex mutex;
  ImageTensor composite;
  MaskTensor mask;
  std::optional<ImageTensor> background;
  int bit_depth = 8;
  std::optional<HarmonizationParams> params;
  Clock::time_point last_access;
};

namespace {

ServiceResponse json_response(int status, const ordered_json& body) { return {status, "application/json", body.dump()}; }

ServiceResponse error_response(int status, const std::string& message, const std::string& field = {}) {
  ordered_json body;
  body["error"] = message;
  if (!field.empty()) body["field"] = field;
  return json_response(status, body);
}

std::string new_session_id() {
  static std::mutex mutex;
  static std::mt19937_64 rng{std::random_device{}()};
  std::lock_guard lock(mutex);
  const std::uint64_t hi = rng(), lo = rng();
  // RFC 4122 version 4 layout.
  const std::uint64_t h = (hi & 0xffffffffffff0fffULL) | 0x0000000000004000ULL;
  const std::uint64_t l = (lo & 0x3fffffffffffffffULL) | 0x8000000000000000ULL;
  char buf[37];
  std::snprintf(buf, sizeof buf, "%08x-%04x-%04x-%04x-%012llx", unsigned(h >> 32), unsigned((h >> 16) & 0xffff),
                unsigned(h & 0xffff), unsigned(l >> 48), static_cast<unsigned long long>(l & 0xffffffffffffULL));
  return buf;
}

std::pair<int, int> preview_size(int h, int w, int long_side) {
  const int longest = std::max(h, w);
  if (longest <= long_side) return {h, w};
  const double s = double(long_side) / longest;
  return {std::max(1, int(std::lround(h * s))), std::max(1, int(std::lround(w * s)))};
}

std::string preview_url(const std::string& id) { return "/v1/session/" + id + "/render?scale=preview"; }

}  // namespace

HarmonizationService::HarmonizationService(ServiceConfig config) : config_(std::move(config)) {
  if (config_.session_ttl_secs <= 0) throw ConfigError("session TTL must be positive");
  if (config_.max_upload_mb <= 0) throw ConfigError("upload limit must be positive");
  if (!config_.checkpoint.empty()) {
    predictor_ = std::make_unique<Predictor>(load_predictor_file(config_.checkpoint));
  }
}

HarmonizationService::~HarmonizationService() = default;

std::shared_ptr<HarmonizationService::Session> HarmonizationService::lookup(const std::string& id) {
  evict_expired();
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) return nullptr;
  it->second->last_access = Clock::now();
  return it->second;
}

std::size_t HarmonizationService::evict_expired(Clock::time_point now) {
  std::lock_guard lock(sessions_mutex_);
  const auto ttl = std::chrono::seconds(config_.session_ttl_secs);
  std::size_t dropped = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    if (now - it->second->last_access > ttl) {
      it = sessions_.erase(it);
      ++dropped;
    } else {
      ++it;
    }
  }
  return dropped;
}

std::size_t HarmonizationService::session_count() const {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

ServiceResponse HarmonizationService::create_session(const std::map<std::string, std::string>& parts) {
  for (const char* required : {"composite", "mask"}) {
    if (!parts.count(required)) return error_response(400, std::string("missing part '") + required + "'", required);
  }
  auto session = std::make_shared<Session>();
  try {
    const DecodedImage c = decode_png(parts.at("composite"), "composite");
    if (c.image.channels() != 3) return error_response(400, "composite must be RGB", "composite");
    session->composite = c.image;
    session->bit_depth = c.bit_depth;
  } catch (const std::exception& e) {
    return error_response(400, e.what(), "composite");
  }
  try {
    session->mask = mask_from_image(decode_png(parts.at("mask"), "mask").image);
  } catch (const std::exception& e) {
    return error_response(400, e.what(), "mask");
  }
  if (session->mask.height() != session->composite.height() || session->mask.width() != session->composite.width()) {
    return error_response(400, "mask dimensions do not match the composite", "mask");
  }
  if (auto it = parts.find("background"); it != parts.end()) {
    try {
      session->background = decode_png(it->second, "background").image;
    } catch (const std::exception& e) {
      return error_response(400, e.what(), "background");
    }
    if (session->background->height() != session->composite.height() ||
        session->background->width() != session->composite.width() || session->background->channels() != 3) {
      return error_response(400, "background dimensions do not match the composite", "background");
    }
  }
  session->last_access = Clock::now();
  const std::string id = new_session_id();
  {
    std::lock_guard lock(sessions_mutex_);
    sessions_[id] = session;
  }
  evict_expired();
  ordered_json body;
  body["session_id"] = id;
  return json_response(201, body);
}

ServiceResponse HarmonizationService::predict(const std::string& id) {
  auto s = lookup(id);
  if (!s) return error_response(404, "unknown session");
  if (!predictor_) return error_response(503, "no checkpoint loaded");
  std::lock_guard lock(s->mutex);
  HarmonizationParams params;
  {
    const int r = predictor_->config().resolution;
    const ImageTensor c = resize_bilinear(s->composite, r, r);
    const MaskTensor m = resize_bilinear(s->mask, r, r);
    const ImageTensor b = s->background ? resize_bilinear(*s->background, r, r) : fallback_background(c, m);
    std::lock_guard model_lock(predictor_mutex_);
    params = predictor_->predict(c, b, m);
  }
  s->params = params;
  ordered_json body;
  body["params"] = ordered_json::parse(serialize_params(params));
  body["preview_url"] = preview_url(id);
  return json_response(200, body);
}

ServiceResponse HarmonizationService::get_params(const std::string& id) {
  auto s = lookup(id);
  if (!s) return error_response(404, "unknown session");
  std::lock_guard lock(s->mutex);
  if (!s->params) return error_response(409, "session has no params yet");
  return {200, "application/json", serialize_params(*s->params)};
}

ServiceResponse HarmonizationService::put_params(const std::string& id, const std::string& body) {
  auto s = lookup(id);
  if (!s) return error_response(404, "unknown session");
  ParamsShape shape;
  if (predictor_) shape = {predictor_->config().curve_nodes, predictor_->config().grid};
  HarmonizationParams params;
  try {
    params = parse_params(body, shape);
  } catch (const ParseError& e) {
    return error_response(422, e.what(), e.field());
  }
  std::lock_guard lock(s->mutex);
  s->params = std::move(params);
  ordered_json out;
  out["preview_url"] = preview_url(id);
  return json_response(200, out);
}

ServiceResponse HarmonizationService::render(const std::string& id, const std::string& scale) {
  auto s = lookup(id);
  if (!s) return error_response(404, "unknown session");
  if (scale != "full" && scale != "preview") return error_response(400, "scale must be 'full' or 'preview'", "scale");
  std::lock_guard lock(s->mutex);
  if (!s->params) return error_response(409, "session has no params yet");
  ImageTensor out;
  if (scale == "full") {
    out = harmonize_full(s->composite, s->mask, *s->params);
  } else {
    const auto [h, w] = preview_size(s->composite.height(), s->composite.width(), config_.preview_long_side);
    out = harmonize_full(resize_bilinear(s->composite, h, w), resize_bilinear(s->mask, h, w), *s->params);
  }
  return {200, "image/png", encode_png(out, s->bit_depth)};
}

ServiceResponse HarmonizationService::health() const {
  ordered_json body;
  body["status"] = "ok";
  return json_response(200, body);
}

// ---------------------------------------------------------------------------
// HTTP transport

struct HttpServer::Impl {
  httplib::Server server;
};

namespace {

void send(httplib::Response& res, const ServiceResponse& r) {
  res.status = r.status;
  res.set_content(r.body, r.content_type);
}

}  // namespace

HttpServer::HttpServer(HarmonizationService& service) : impl_(std::make_unique<Impl>()) {
  auto& svr = impl_->server;
  svr.set_payload_max_length(std::size_t(service.config().max_upload_mb) * 1024 * 1024);
  svr.set_default_headers({{"Access-Control-Allow-Origin", service.config().cors_origin},
                           {"Access-Control-Allow-Methods", "GET, POST, PUT, OPTIONS"},
                           {"Access-Control-Allow-Headers", "Content-Type"}});
  svr.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
    std::string what = "internal error";
    try {
      std::rethrow_exception(ep);
    } catch (const std::exception& e) {
      what = e.what();
    } catch (...) {
    }
    send(res, error_response(500, what));
  });
  svr.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
  svr.Get("/v1/health", [&service](const httplib::Request&, httplib::Response& res) { send(res, service.health()); });
  svr.Post("/v1/session", [&service](const httplib::Request& req, httplib::Response& res) {
    if (!req.is_multipart_form_data()) {
      send(res, error_response(400, "expected multipart/form-data"));
      return;
    }
    std::map<std::string, std::string> parts;
    for (const auto& [name, file] : req.files) parts[name] = file.content;
    send(res, service.create_session(parts));
  });
  svr.Post(R"(/v1/session/([^/]+)/predict)", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.predict(req.matches[1]));
  });
  svr.Get(R"(/v1/session/([^/]+)/params)", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.get_params(req.matches[1]));
  });
  svr.Put(R"(/v1/session/([^/]+)/params)", [&service](const httplib::Request& req, httplib::Response& res) {
    send(res, service.put_params(req.matches[1], req.body));
  });
  svr.Get(R"(/v1/session/([^/]+)/render)", [&service](const httplib::Request& req, httplib::Response& res) {
    const std::string scale = req.has_param("scale") ? req.get_param_value("scale") : "full";
    send(res, service.render(req.matches[1], scale));
  });
}

HttpServer::~HttpServer() = default;

bool HttpServer::bind(const std::string& host, int port) {
  if (port == 0) {
    port_ = impl_->server.bind_to_any_port(host);
    return port_ > 0;
  }
  if (!impl_->server.bind_to_port(host, port)) return false;
  port_ = port;
  return true;
}

void HttpServer::listen() { impl_->server.listen_after_bind(); }

void HttpServer::stop() { impl_->server.stop(); }

}  // namespace harmonia
