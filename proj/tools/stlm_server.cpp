// stlm-server: HTTP/SSE front end for the chat UI.
//
// Every flag falls back to an STLM_* environment variable. SIGINT or SIGTERM
// stops the server cleanly.

#include <csignal>
#include <iostream>
#include <pthread.h>

#include "CLI11.hpp"
#include "stlm/error.hpp"
#include "stlm/server.hpp"

int main(int argc, char** argv) {
  CLI::App app{"stlm-server: serve model status, chat and settings over HTTP"};
  stlm::ServerConfig config;
  std::string model_dir = config.model_dir.string();
  std::string state_dir = config.state_dir.string();
  std::string manifest, model_path, static_dir;
  long heartbeat_ms = static_cast<long>(config.heartbeat.count());

  app.add_option("--host", config.host)->envname("STLM_HOST")->capture_default_str();
  app.add_option("--port", config.port, "0 picks a free port")->envname("STLM_PORT")->capture_default_str();
  app.add_option("--model-dir", model_dir, "Download directory")->envname("STLM_MODEL_DIR")->capture_default_str();
  app.add_option("--state-dir", state_dir, "Settings and transcripts")->envname("STLM_STATE_DIR")->capture_default_str();
  auto* m = app.add_option("--manifest", manifest, "Manifest path or http:// URL")->envname("STLM_MANIFEST");
  app.add_option("--model", model_path, "Load this model file, no download")->envname("STLM_MODEL")->excludes(m);
  app.add_option("--static", static_dir, "Directory served at /")->envname("STLM_STATIC_DIR");
  app.add_option("--heartbeat-ms", heartbeat_ms)->envname("STLM_HEARTBEAT_MS")->capture_default_str();
  app.add_option("--temperature", config.chat.sampler.temperature)->envname("STLM_TEMPERATURE")->capture_default_str();
  app.add_option("--top-k", config.chat.sampler.top_k)->envname("STLM_TOP_K")->capture_default_str();
  app.add_option("--seed", config.chat.sampler.seed)->envname("STLM_SEED")->capture_default_str();
  app.add_option("--max-tokens", config.chat.max_new_tokens)->envname("STLM_MAX_TOKENS")->capture_default_str();
  CLI11_PARSE(app, argc, argv);

  config.model_dir = model_dir;
  config.state_dir = state_dir;
  if (!manifest.empty()) config.manifest = manifest;
  if (!model_path.empty()) config.model_path = model_path;
  if (!static_dir.empty()) config.static_dir = static_dir;
  config.heartbeat = std::chrono::milliseconds(heartbeat_ms);

  // Block the signals before any thread starts so only sigwait sees them.
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  try {
    stlm::ChatServer server(config);
    const int port = server.start();
    std::cerr << "listening on http://" << config.host << ":" << port << std::endl;
    int sig = 0;
    sigwait(&signals, &sig);
    std::cerr << "shutting down" << std::endl;
    server.stop();
  } catch (const stlm::Error& e) {
    std::cerr << "error: " << e.what() << " [" << stlm::to_string(e.code()) << "]\n";
    return 2;
  }
  return 0;
}
