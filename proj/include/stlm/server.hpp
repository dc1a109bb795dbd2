#pragma once
// Local HTTP service for the chat UI.
//
//   GET  /api/model/status                 model lifecycle, with progress
//   POST /api/chat {session_id, prompt}    202 | 400 | 409 busy | 503 not ready
//   POST /api/chat/cancel {session_id}     200 | 404 | 409 not busy
//   GET  /api/chat/stream?session_id[&after=N]
//        server-sent events: token, action, warning, done; ": heartbeat"
//        comments while idle. Every event has an id; the stream first replays
//        logged events with id > after (or Last-Event-ID), then follows live.
//   GET  /api/chat/history?session_id      turns of the session
//   GET  /api/settings, POST /api/settings  {username?, colors?, avatar?}

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "stlm/chat.hpp"

namespace stlm {

enum class ModelPhase { Absent, Downloading, Verifying, Loading, Ready, Error };
std::string_view to_string(ModelPhase p);

struct ModelStatus {
  ModelPhase phase = ModelPhase::Absent;
  std::uint64_t done = 0;   // Downloading only
  std::uint64_t total = 0;  // Downloading only
  std::string error;        // Error only
  std::string error_code;   // Error only, an ErrorCode name

  friend bool operator==(const ModelStatus&, const ModelStatus&) = default;
};

nlohmann::json status_to_json(const ModelStatus& s);

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;  // 0 picks a free port
  // Where downloads land and the directory for settings and transcripts.
  std::filesystem::path model_dir = "models";
  std::filesystem::path state_dir = "state";
  std::optional<std::string> manifest;              // local path or http:// URL
  std::optional<std::filesystem::path> model_path;  // load directly, no download
  std::optional<std::filesystem::path> static_dir;  // served at /
  std::chrono::milliseconds heartbeat{15000};
  std::size_t max_settings_bytes = 64 * 1024;
  std::size_t max_logged_events = 10000;  // per session
  ChatSettings chat;
};

class ChatServer {
 public:
  explicit ChatServer(ServerConfig config);
  ~ChatServer();
  ChatServer(const ChatServer&) = delete;
  ChatServer& operator=(const ChatServer&) = delete;

  // Binds, starts serving and starts the model lifecycle. Returns the port.
  int start();
  void stop();
  // Blocks until stop() is called from elsewhere.
  void wait();

  ModelStatus status() const;
  // Every status the lifecycle has passed through, in order.
  std::vector<ModelStatus> status_history() const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace stlm
