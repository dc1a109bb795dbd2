#pragma once
// Conversation sessions: prompt rendering with history trimming, one
// generation at a time on a background worker, actions extracted on the fly.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <future>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"
#include "stlm/actions.hpp"
#include "stlm/adapter.hpp"
#include "stlm/transformer.hpp"

namespace stlm {

struct ChatTurn {
  Speaker speaker = Speaker::Human;
  std::string text;  // what the user sees; for the bot, the parser's TextDelta output
  std::string raw;   // what the model produced, tags included (bot turns only)
  std::vector<Action> actions;
  bool cancelled = false;
  std::int64_t timestamp_ms = 0;  // unix epoch

  // Text placed in the prompt for this turn.
  const std::string& prompt_text() const { return speaker == Speaker::Bot ? raw : text; }
};

nlohmann::json turn_to_json(const ChatTurn& t);
ChatTurn turn_from_json(const nlohmann::json& j);  // throws FormatError

inline constexpr std::size_t kDefaultGenerationReserve = 128;

struct ChatSettings {
  SamplerParams sampler;
  std::size_t generation_reserve = kDefaultGenerationReserve;
  std::size_t max_new_tokens = 0;  // 0 = until context or end of text
  std::size_t payload_cap = kDefaultPayloadCap;
};

// History turns (oldest human/bot pairs dropped first until the encoded
// prompt fits token_budget) followed by the new human turn and "<bot>:".
// The new human turn is kept even when it alone exceeds the budget.
std::string render_prompt(std::span<const ChatTurn> history, std::string_view prompt, const Vocab& vocab,
                          std::size_t token_budget);

struct TurnResult {
  std::string text;
  std::vector<Action> actions;
  StopReason stop = StopReason::EndOfText;
  std::size_t token_count = 0;
  std::chrono::duration<double> wall_time{};
};

nlohmann::json turn_result_to_json(const TurnResult& r);

struct ChatObserver {
  std::function<void(const ParseEvent&)> on_event;  // generation order, worker thread
  // Both run after busy is cleared and before the future is ready.
  std::function<void(const TurnResult&)> on_done;
  std::function<void(std::exception_ptr)> on_error;
};

class ChatSession {
 public:
  // Loads the transcript when the file exists; completed turns are appended
  // to it as JSON lines.
  ChatSession(std::shared_ptr<const Model> model, ChatSettings settings = {},
              std::optional<std::filesystem::path> transcript = std::nullopt);
  ~ChatSession();
  ChatSession(const ChatSession&) = delete;
  ChatSession& operator=(const ChatSession&) = delete;

  // Starts a turn on the worker and returns at once. Throws Busy while a turn
  // is in flight (the session is left untouched) and InvalidValue for an
  // empty prompt. Generation errors reach the future and on_error; the human
  // turn is then removed again.
  std::future<TurnResult> submit(std::string prompt, ChatObserver observer = {});

  // Stops the running turn at the next token boundary; the partial bot turn
  // is kept and marked cancelled. Throws NotBusy when idle.
  void cancel();

  // Forgets the history (and truncates the transcript). Throws Busy.
  void reset();

  bool busy() const;
  std::vector<ChatTurn> turns() const;
  std::size_t token_budget() const;
  std::string render_prompt(std::string_view prompt) const;
  const Model& model() const { return *model_; }
  const ChatSettings& settings() const { return settings_; }

 private:
  struct Job {
    std::string prompt;
    ChatObserver observer;
    std::promise<TurnResult> promise;
  };

  void worker_loop(std::stop_token stop);
  void run(Job& job);
  void append_transcript(std::span<const ChatTurn> turns);

  std::shared_ptr<const Model> model_;
  ChatSettings settings_;
  std::optional<std::filesystem::path> transcript_;

  mutable std::mutex mutex_;
  std::condition_variable_any wake_;
  std::vector<ChatTurn> turns_;
  bool busy_ = false;
  std::optional<Job> job_;
  std::stop_source turn_stop_;
  std::jthread worker_;
};

}  // namespace stlm
