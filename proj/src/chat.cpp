#include "stlm/chat.hpp"

#include <fstream>

#include "stlm/error.hpp"

namespace stlm {
namespace {

std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string render_tail(std::span<const ChatTurn> turns, std::string_view prompt) {
  std::string out;
  for (const ChatTurn& t : turns) {
    out += t.speaker == Speaker::Human ? special::kHuman : special::kBot;
    out += ": ";
    out += t.prompt_text();
    out += '\n';
  }
  // Same template as render_turns, ending on the bot cue.
  out += special::kHuman;
  out += ": ";
  out += prompt;
  out += '\n';
  out += special::kBot;
  out += ':';
  return out;
}

}  // namespace

nlohmann::json turn_to_json(const ChatTurn& t) {
  nlohmann::json actions = nlohmann::json::array();
  for (const Action& a : t.actions) actions.push_back(action_to_json(a));
  nlohmann::json j = {{"speaker", to_string(t.speaker)},
                      {"text", t.text},
                      {"timestamp", t.timestamp_ms},
                      {"actions", actions},
                      {"cancelled", t.cancelled}};
  if (t.speaker == Speaker::Bot) j["raw"] = t.raw;
  return j;
}

ChatTurn turn_from_json(const nlohmann::json& j) {
  ChatTurn t;
  try {
    const auto speaker = j.at("speaker").get<std::string>();
    if (speaker != "human" && speaker != "bot") fail(ErrorCode::FormatError, "unknown speaker " + speaker);
    t.speaker = speaker == "human" ? Speaker::Human : Speaker::Bot;
    t.text = j.at("text").get<std::string>();
    t.raw = j.value("raw", std::string());
    t.timestamp_ms = j.value("timestamp", std::int64_t{0});
    t.cancelled = j.value("cancelled", false);
    for (const auto& a : j.value("actions", nlohmann::json::array())) t.actions.push_back(action_from_json(a));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad transcript line: ") + e.what());
  }
  return t;
}

std::string render_prompt(std::span<const ChatTurn> history, std::string_view prompt, const Vocab& vocab,
                          std::size_t token_budget) {
  for (std::size_t first = 0; first < history.size(); first += 2) {
    std::string text = render_tail(history.subspan(first), prompt);
    if (encode(text, vocab).size() <= token_budget) return text;
  }
  return render_tail({}, prompt);
}

nlohmann::json turn_result_to_json(const TurnResult& r) {
  nlohmann::json actions = nlohmann::json::array();
  for (const Action& a : r.actions) actions.push_back(action_to_json(a));
  return {{"text", r.text},
          {"actions", actions},
          {"stop", to_string(r.stop)},
          {"token_count", r.token_count},
          {"wall_ms", std::llround(r.wall_time.count() * 1000.0)}};
}

ChatSession::ChatSession(std::shared_ptr<const Model> model, ChatSettings settings,
                         std::optional<std::filesystem::path> transcript)
    : model_(std::move(model)), settings_(settings), transcript_(std::move(transcript)) {
  if (!model_) fail(ErrorCode::InvalidArgument, "chat session needs a model");
  if (transcript_ && std::filesystem::exists(*transcript_)) {
    std::ifstream in(*transcript_);
    if (!in) fail(ErrorCode::IoError, "cannot read " + transcript_->string());
    std::string line;
    for (std::size_t n = 1; std::getline(in, line); ++n) {
      if (line.empty()) continue;
      try {
        turns_.push_back(turn_from_json(nlohmann::json::parse(line)));
      } catch (const std::exception& e) {
        fail(ErrorCode::FormatError, transcript_->string() + ":" + std::to_string(n) + ": " + e.what());
      }
    }
  }
  worker_ = std::jthread([this](std::stop_token st) { worker_loop(st); });
}

ChatSession::~ChatSession() {
  {
    std::lock_guard<std::mutex> lock(mutex_);
    turn_stop_.request_stop();
  }
  worker_.request_stop();
  if (worker_.joinable()) worker_.join();
}

std::future<TurnResult> ChatSession::submit(std::string prompt, ChatObserver observer) {
  std::future<TurnResult> result;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    if (busy_) fail(ErrorCode::Busy, "a reply is still being generated");
    if (prompt.empty()) fail(ErrorCode::InvalidValue, "prompt is empty");
    busy_ = true;
    ChatTurn human;
    human.speaker = Speaker::Human;
    human.text = prompt;
    human.timestamp_ms = now_ms();
    turns_.push_back(std::move(human));
    turn_stop_ = std::stop_source();
    job_.emplace(Job{std::move(prompt), std::move(observer), {}});
    result = job_->promise.get_future();
  }
  wake_.notify_one();
  return result;
}

void ChatSession::cancel() {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!busy_) fail(ErrorCode::NotBusy, "nothing to cancel");
  turn_stop_.request_stop();
}

void ChatSession::reset() {
  std::lock_guard<std::mutex> lock(mutex_);
  if (busy_) fail(ErrorCode::Busy, "cannot reset while a reply is being generated");
  turns_.clear();
  if (transcript_) {
    std::ofstream out(*transcript_, std::ios::trunc);
    if (!out) fail(ErrorCode::IoError, "cannot truncate " + transcript_->string());
  }
}

bool ChatSession::busy() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return busy_;
}

std::vector<ChatTurn> ChatSession::turns() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return turns_;
}

std::size_t ChatSession::token_budget() const {
  const std::size_t ctx = model_->config.max_context;
  return ctx > settings_.generation_reserve ? ctx - settings_.generation_reserve : 0;
}

std::string ChatSession::render_prompt(std::string_view prompt) const {
  std::lock_guard<std::mutex> lock(mutex_);
  return stlm::render_prompt(turns_, prompt, model_->vocab, token_budget());
}

void ChatSession::worker_loop(std::stop_token stop) {
  std::unique_lock<std::mutex> lock(mutex_);
  for (;;) {
    if (!wake_.wait(lock, stop, [this] { return job_.has_value(); })) return;
    Job job = std::move(*job_);
    job_.reset();
    lock.unlock();
    run(job);
    lock.lock();
  }
}

void ChatSession::run(Job& job) {
  std::vector<ChatTurn> history;
  ChatTurn human;
  std::stop_token cancel;
  {
    std::lock_guard<std::mutex> lock(mutex_);
    history.assign(turns_.begin(), turns_.end() - 1);
    human = turns_.back();
    cancel = turn_stop_.get_token();
  }
  TurnResult r;
  try {
    const auto start = std::chrono::steady_clock::now();
    const Model& m = *model_;
    const TokenSeq prompt = encode(stlm::render_prompt(history, job.prompt, m.vocab, token_budget()), m.vocab);

    ActionParser parser(settings_.payload_cap);
    auto deliver = [&](std::vector<ParseEvent> events) {
      for (const ParseEvent& e : events) {
        if (const auto* t = std::get_if<TextDelta>(&e)) r.text += t->text;
        if (const auto* a = std::get_if<ActionDetected>(&e)) r.actions.push_back(a->action);
        if (job.observer.on_event) job.observer.on_event(e);
      }
    };
    const GenerationResult g = generate(
        m, prompt, settings_.sampler, StopSpec{{std::string(special::kHuman)}, settings_.max_new_tokens},
        [&](const TokenEvent& e) { deliver(parser.feed(e.text)); }, cancel);
    deliver(parser.flush());
    r.stop = g.reason;
    r.token_count = g.token_count;
    r.wall_time = std::chrono::steady_clock::now() - start;

    ChatTurn bot;
    bot.speaker = Speaker::Bot;
    bot.text = r.text;
    bot.raw = g.text;
    bot.actions = r.actions;
    bot.cancelled = g.reason == StopReason::Cancelled;
    bot.timestamp_ms = now_ms();
    const ChatTurn pair[] = {human, bot};
    append_transcript(pair);
    std::lock_guard<std::mutex> lock(mutex_);
    turns_.push_back(std::move(bot));
    busy_ = false;
  } catch (...) {
    {
      std::lock_guard<std::mutex> lock(mutex_);
      turns_.pop_back();
      busy_ = false;
    }
    const auto err = std::current_exception();
    if (job.observer.on_error) {
      try {
        job.observer.on_error(err);
      } catch (...) {
      }
    }
    job.promise.set_exception(err);
    return;
  }
  if (job.observer.on_done) {
    try {
      job.observer.on_done(r);
    } catch (...) {
    }
  }
  job.promise.set_value(std::move(r));
}

void ChatSession::append_transcript(std::span<const ChatTurn> turns) {
  if (!transcript_) return;
  std::ofstream out(*transcript_, std::ios::app);
  for (const ChatTurn& t : turns) out << turn_to_json(t).dump() << '\n';
  out.flush();
  if (!out) fail(ErrorCode::IoError, "cannot append to " + transcript_->string());
}

}  // namespace stlm
