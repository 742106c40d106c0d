#pragma once

#include <harmonia/image.hpp>
#include <harmonia/nn.hpp>
#include <harmonia/params.hpp>

#include <chrono>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>

namespace harmonia {

struct ServiceConfig {
  std::string checkpoint;
  int session_ttl_secs = 30 * 60;
  int max_upload_mb = 64;
  std::string cors_origin = "*";
  int preview_long_side = 512;
};

struct ServiceResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
};

/// Endpoint logic without the transport; every method is safe to call
/// concurrently. Sessions are kept in memory and evicted after the idle TTL.
class HarmonizationService {
 public:
  using Clock = std::chrono::steady_clock;

  /// Loads `config.checkpoint` when non-empty (throws on a bad file).
  explicit HarmonizationService(ServiceConfig config);
  ~HarmonizationService();

  bool has_checkpoint() const { return predictor_ != nullptr; }
  const ServiceConfig& config() const { return config_; }

  /// `parts` maps multipart field names (composite, mask, background) to
  /// file bytes.
  ServiceResponse create_session(const std::map<std::string, std::string>& parts);
  ServiceResponse predict(const std::string& id);
  ServiceResponse get_params(const std::string& id);
  ServiceResponse put_params(const std::string& id, const std::string& body);
  /// scale is "full" or "preview".
  ServiceResponse render(const std::string& id, const std::string& scale);
  ServiceResponse health() const;

  /// Drops sessions idle for longer than the TTL; returns how many.
  std::size_t evict_expired(Clock::time_point now = Clock::now());
  std::size_t session_count() const;

 private:
  struct Session;
  std::shared_ptr<Session> lookup(const std::string& id);

  ServiceConfig config_;
  std::unique_ptr<Predictor> predictor_;
  std::mutex predictor_mutex_;
  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
};

/// HTTP/1.1 front end for HarmonizationService.
class HttpServer {
 public:
  explicit HttpServer(HarmonizationService& service);
  ~HttpServer();

  /// Binds without serving; port 0 picks a free port. Returns false when the
  /// address is unavailable.
  bool bind(const std::string& host, int port);
  int port() const { return port_; }
  /// Blocks until stop().
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  int port_ = -1;
};

}  // namespace harmonia
