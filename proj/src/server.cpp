#include "stlm/server.hpp"

#include <atomic>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <regex>
#include <thread>

#include "httplib.h"
#include "stlm/error.hpp"
#include "stlm/fetch.hpp"
#include "stlm/modelfile.hpp"

namespace stlm {

std::string_view to_string(ModelPhase p) {
  switch (p) {
    case ModelPhase::Absent: return "Absent";
    case ModelPhase::Downloading: return "Downloading";
    case ModelPhase::Verifying: return "Verifying";
    case ModelPhase::Loading: return "Loading";
    case ModelPhase::Ready: return "Ready";
    case ModelPhase::Error: return "Error";
  }
  return "?";
}

nlohmann::json status_to_json(const ModelStatus& s) {
  nlohmann::json j = {{"status", to_string(s.phase)}};
  if (s.phase == ModelPhase::Downloading) {
    j["done"] = s.done;
    j["total"] = s.total;
  }
  if (s.phase == ModelPhase::Error) {
    j["error"] = s.error;
    j["code"] = s.error_code;
  }
  return j;
}

namespace {

struct LoggedEvent {
  std::uint64_t id;
  std::string name;
  std::string data;
};

// Ordered, bounded record of a session's stream events. Shared by the chat
// callbacks and the SSE readers; it does not own the session.
struct EventLog {
  explicit EventLog(std::size_t max_events) : max_events(max_events) {}

  void push(std::string name, const nlohmann::json& data) {
    {
      std::lock_guard<std::mutex> lock(mutex);
      log.push_back({++last_id, std::move(name), data.dump()});
      while (log.size() > max_events) log.pop_front();
    }
    changed.notify_all();
  }

  std::size_t max_events;
  std::mutex mutex;
  std::condition_variable changed;
  std::deque<LoggedEvent> log;
  std::uint64_t last_id = 0;
};

struct SessionHub {
  SessionHub(std::shared_ptr<const Model> model, const ChatSettings& settings,
             std::optional<std::filesystem::path> transcript, std::size_t max_events)
      : events(std::make_shared<EventLog>(max_events)), chat(std::move(model), settings, std::move(transcript)) {}

  std::shared_ptr<EventLog> events;
  ChatSession chat;
};

ModelStatus phase_status(ModelPhase p) {
  ModelStatus s;
  s.phase = p;
  return s;
}

const std::regex kSessionId("^[A-Za-z0-9_-]{1,64}$");

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  send_json(res, status, {{"error", code}, {"message", message}});
}

std::optional<nlohmann::json> parse_body(const httplib::Request& req, httplib::Response& res) {
  try {
    auto j = nlohmann::json::parse(req.body);
    if (!j.is_object()) {
      send_error(res, 400, "InvalidArgument", "body must be a JSON object");
      return std::nullopt;
    }
    return j;
  } catch (const nlohmann::json::parse_error& e) {
    send_error(res, 400, "InvalidArgument", std::string("invalid JSON: ") + e.what());
    return std::nullopt;
  }
}

std::string sse_frame(const LoggedEvent& e) {
  return "id: " + std::to_string(e.id) + "\nevent: " + e.name + "\ndata: " + e.data + "\n\n";
}

}  // namespace

struct ChatServer::Impl {
  explicit Impl(ServerConfig c) : config(std::move(c)) {}

  ServerConfig config;
  httplib::Server http;
  std::thread listener;
  std::jthread lifecycle;
  std::atomic<bool> stopping{false};
  std::mutex stop_mutex;
  std::condition_variable stopped_cv;
  bool stopped = false;

  mutable std::mutex status_mutex;
  ModelStatus current;
  std::vector<ModelStatus> history{ModelStatus{}};
  std::shared_ptr<const Model> model;

  std::mutex sessions_mutex;
  std::map<std::string, std::shared_ptr<SessionHub>> sessions;

  std::mutex settings_mutex;
  nlohmann::json settings = nlohmann::json::object();

  void set_status(ModelStatus s) {
    std::lock_guard<std::mutex> lock(status_mutex);
    if (s.phase != current.phase) history.push_back(s);
    current = std::move(s);
  }

  void run_lifecycle() {
    try {
      std::filesystem::path path;
      if (config.model_path) {
        path = *config.model_path;
      } else if (config.manifest) {
        const ModelManifest manifest = load_manifest(*config.manifest);
        FetchCallbacks cb;
        cb.progress = [&](std::uint64_t done, std::uint64_t total) {
          if (stopping) fail(ErrorCode::NetworkError, "server stopping");
          std::lock_guard<std::mutex> lock(status_mutex);
          // A verified cache hit reports completion after Verifying; that is not a download.
          if (current.phase != ModelPhase::Absent && current.phase != ModelPhase::Downloading) return;
          ModelStatus s{ModelPhase::Downloading, done, total, {}, {}};
          if (s.phase != current.phase) history.push_back(s);
          current = s;
        };
        cb.verifying = [&] { set_status(phase_status(ModelPhase::Verifying)); };
        path = fetch_model(manifest, config.model_dir, cb).path;
      } else {
        return;  // stays Absent
      }
      set_status(phase_status(ModelPhase::Loading));
      auto loaded = std::make_shared<const Model>(read_model(path).model);
      {
        std::lock_guard<std::mutex> lock(status_mutex);
        model = std::move(loaded);
      }
      set_status(phase_status(ModelPhase::Ready));
    } catch (const Error& e) {
      set_status({ModelPhase::Error, 0, 0, e.what(), std::string(to_string(e.code()))});
    } catch (const std::exception& e) {
      set_status({ModelPhase::Error, 0, 0, e.what(), "IoError"});
    }
  }

  std::shared_ptr<const Model> ready_model() {
    std::lock_guard<std::mutex> lock(status_mutex);
    return current.phase == ModelPhase::Ready ? model : nullptr;
  }

  std::shared_ptr<SessionHub> find_session(const std::string& id) {
    std::lock_guard<std::mutex> lock(sessions_mutex);
    const auto it = sessions.find(id);
    return it == sessions.end() ? nullptr : it->second;
  }

  std::shared_ptr<SessionHub> session_for(const std::string& id, std::shared_ptr<const Model> m) {
    std::lock_guard<std::mutex> lock(sessions_mutex);
    auto& hub = sessions[id];
    if (!hub) {
      std::filesystem::create_directories(config.state_dir / "sessions");
      hub = std::make_shared<SessionHub>(std::move(m), config.chat, config.state_dir / "sessions" / (id + ".jsonl"),
                                         config.max_logged_events);
    }
    return hub;
  }

  std::filesystem::path settings_path() const { return config.state_dir / "settings.json"; }

  void load_settings() {
    std::ifstream in(settings_path());
    if (!in) return;
    try {
      auto j = nlohmann::json::parse(in);
      if (j.is_object()) settings = std::move(j);
    } catch (const nlohmann::json::exception&) {
      // A damaged settings file falls back to defaults.
    }
  }

  void save_settings() {
    std::filesystem::create_directories(config.state_dir);
    const std::string text = settings.dump(2);
    write_file_atomic(settings_path(), std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  }

  // Returns an error message, or empty when the update is acceptable.
  static std::string check_settings(const nlohmann::json& update) {
    for (const auto& [key, value] : update.items()) {
      if (key == "username" || key == "avatar") {
        if (!value.is_string()) return key + " must be a string";
      } else if (key == "colors") {
        if (!value.is_object()) return "colors must be an object";
        for (const auto& [k, v] : value.items())
          if (!v.is_string()) return "colors." + k + " must be a string";
      } else {
        return "unknown setting " + key;
      }
    }
    if (update.contains("username") && update["username"].get<std::string>().empty()) return "username is empty";
    return {};
  }

  void routes() {
    http.Get("/api/model/status", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, status_to_json(current_status()));
    });

    http.Post("/api/chat", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req, res);
      if (!body) return;
      const std::string id = body->value("session_id", "");
      const auto prompt = body->find("prompt");
      if (!std::regex_match(id, kSessionId)) return send_error(res, 400, "InvalidArgument", "bad session_id");
      if (prompt == body->end() || !prompt->is_string() || prompt->get<std::string>().empty()) {
        return send_error(res, 400, "InvalidArgument", "prompt must be a nonempty string");
      }
      auto m = ready_model();
      if (!m) return send_error(res, 503, "NotReady", "model is not ready");
      std::shared_ptr<SessionHub> hub;
      try {
        hub = session_for(id, m);
      } catch (const Error& e) {
        return send_error(res, 500, to_string(e.code()), e.what());
      }
      std::uint64_t before;
      {
        std::lock_guard<std::mutex> lock(hub->events->mutex);
        before = hub->events->last_id;
      }
      ChatObserver obs;
      std::shared_ptr<EventLog> h = hub->events;
      obs.on_event = [h](const ParseEvent& e) {
        if (const auto* t = std::get_if<TextDelta>(&e)) h->push("token", {{"text", t->text}});
        if (const auto* a = std::get_if<ActionDetected>(&e)) h->push("action", action_to_json(a->action));
        if (const auto* w = std::get_if<ParseWarning>(&e)) h->push("warning", {{"reason", w->reason}, {"raw_span", w->raw_span}});
      };
      obs.on_done = [h](const TurnResult& r) { h->push("done", turn_result_to_json(r)); };
      obs.on_error = [h](std::exception_ptr err) {
        std::string msg = "generation failed";
        std::string code = "IoError";
        try {
          std::rethrow_exception(err);
        } catch (const Error& e) {
          msg = e.what();
          code = std::string(to_string(e.code()));
        } catch (const std::exception& e) {
          msg = e.what();
        }
        h->push("done", {{"stop", "Error"}, {"error", msg}, {"code", code}, {"text", ""}, {"actions", nlohmann::json::array()}});
      };
      try {
        hub->chat.submit(prompt->get<std::string>(), std::move(obs));
      } catch (const Error& e) {
        if (e.code() == ErrorCode::Busy) return send_error(res, 409, "Busy", e.what());
        return send_error(res, 400, to_string(e.code()), e.what());
      }
      send_json(res, 202, {{"session_id", id},
                           {"stream", "/api/chat/stream?session_id=" + id + "&after=" + std::to_string(before)},
                           {"last_event_id", before}});
    });

    http.Post("/api/chat/cancel", [this](const httplib::Request& req, httplib::Response& res) {
      const auto body = parse_body(req, res);
      if (!body) return;
      auto hub = find_session(body->value("session_id", ""));
      if (!hub) return send_error(res, 404, "NotFound", "unknown session");
      try {
        hub->chat.cancel();
      } catch (const Error& e) {
        return send_error(res, 409, to_string(e.code()), e.what());
      }
      send_json(res, 200, {{"cancelled", true}});
    });

    http.Get("/api/chat/history", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.get_param_value("session_id");
      auto hub = find_session(id);
      if (!hub && std::regex_match(id, kSessionId)) {
        if (auto m = ready_model(); m && std::filesystem::exists(config.state_dir / "sessions" / (id + ".jsonl"))) {
          hub = session_for(id, m);
        }
      }
      if (!hub) return send_error(res, 404, "NotFound", "unknown session");
      nlohmann::json turns = nlohmann::json::array();
      for (const auto& t : hub->chat.turns()) turns.push_back(turn_to_json(t));
      send_json(res, 200, {{"session_id", id}, {"busy", hub->chat.busy()}, {"turns", turns}});
    });

    http.Get("/api/chat/stream", [this](const httplib::Request& req, httplib::Response& res) {
      const auto found = find_session(req.get_param_value("session_id"));
      if (!found) return send_error(res, 404, "NotFound", "unknown session");
      std::shared_ptr<EventLog> log = found->events;
      std::uint64_t cursor;
      {
        std::lock_guard<std::mutex> lock(log->mutex);
        cursor = log->last_id;
      }
      const std::string after = req.has_param("after") ? req.get_param_value("after") : req.get_header_value("Last-Event-ID");
      if (!after.empty()) {
        try {
          cursor = std::min<std::uint64_t>(std::stoull(after), cursor);
        } catch (const std::exception&) {
          return send_error(res, 400, "InvalidArgument", "bad event id");
        }
      }
      res.set_header("Cache-Control", "no-cache");
      res.set_chunked_content_provider(
          "text/event-stream", [this, log, cursor](std::size_t, httplib::DataSink& sink) mutable {
            std::vector<std::string> frames;
            {
              std::unique_lock<std::mutex> lock(log->mutex);
              log->changed.wait_for(lock, config.heartbeat, [&] { return stopping || log->last_id > cursor; });
              if (stopping) return false;
              for (const auto& e : log->log) {
                if (e.id > cursor) frames.push_back(sse_frame(e));
              }
              cursor = log->last_id;
            }
            if (frames.empty()) frames.push_back(": heartbeat\n\n");
            for (const auto& f : frames) {
              if (!sink.write(f.data(), f.size())) return false;
            }
            return true;
          });
    });

    http.Get("/api/settings", [this](const httplib::Request&, httplib::Response& res) {
      std::lock_guard<std::mutex> lock(settings_mutex);
      send_json(res, 200, settings);
    });

    http.Post("/api/settings", [this](const httplib::Request& req, httplib::Response& res) {
      if (req.body.size() > config.max_settings_bytes) {
        return send_error(res, 413, "TooLarge", "settings payload exceeds " + std::to_string(config.max_settings_bytes) + " bytes");
      }
      const auto body = parse_body(req, res);
      if (!body) return;
      if (const std::string err = check_settings(*body); !err.empty()) {
        return send_error(res, 400, "InvalidArgument", err);
      }
      std::lock_guard<std::mutex> lock(settings_mutex);
      for (const auto& [key, value] : body->items()) settings[key] = value;
      try {
        save_settings();
      } catch (const Error& e) {
        return send_error(res, 500, to_string(e.code()), e.what());
      }
      send_json(res, 200, settings);
    });

    if (config.static_dir) http.set_mount_point("/", config.static_dir->string());
  }

  ModelStatus current_status() const {
    std::lock_guard<std::mutex> lock(status_mutex);
    return current;
  }
};

ChatServer::ChatServer(ServerConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

ChatServer::~ChatServer() { stop(); }

int ChatServer::start() {
  Impl& s = *impl_;
  s.load_settings();
  s.routes();
  // Streams hold a worker each; leave room for ordinary requests.
  s.http.new_task_queue = [] { return new httplib::ThreadPool(32); };
  const int port = s.config.port == 0 ? s.http.bind_to_any_port(s.config.host)
                                      : (s.http.bind_to_port(s.config.host, s.config.port) ? s.config.port : -1);
  if (port < 0) fail(ErrorCode::IoError, "cannot bind " + s.config.host + ":" + std::to_string(s.config.port));
  s.listener = std::thread([&s] { s.http.listen_after_bind(); });
  s.http.wait_until_ready();
  s.lifecycle = std::jthread([&s] { s.run_lifecycle(); });
  return port;
}

void ChatServer::stop() {
  Impl& s = *impl_;
  if (s.stopping.exchange(true)) return;
  {
    std::lock_guard<std::mutex> lock(s.sessions_mutex);
    for (auto& [id, hub] : s.sessions) {
      std::lock_guard<std::mutex> hl(hub->events->mutex);
      hub->events->changed.notify_all();
    }
  }
  s.http.stop();
  if (s.listener.joinable()) s.listener.join();
  if (s.lifecycle.joinable()) s.lifecycle.join();
  {
    std::lock_guard<std::mutex> lock(s.sessions_mutex);
    s.sessions.clear();
  }
  std::lock_guard<std::mutex> lock(s.stop_mutex);
  s.stopped = true;
  s.stopped_cv.notify_all();
}

void ChatServer::wait() {
  Impl& s = *impl_;
  std::unique_lock<std::mutex> lock(s.stop_mutex);
  s.stopped_cv.wait(lock, [&] { return s.stopped; });
}

ModelStatus ChatServer::status() const { return impl_->current_status(); }

std::vector<ModelStatus> ChatServer::status_history() const {
  std::lock_guard<std::mutex> lock(impl_->status_mutex);
  return impl_->history;
}

}  // namespace stlm
