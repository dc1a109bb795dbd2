#pragma once
// Streaming extraction of <call>, <search> and <calendar> actions from
// generated text.
//
// Text outside tags passes straight through as TextDelta events. An opening
// tag starts an action whose payload is withheld until any of the three tags
// closes it; a closer that differs from the opener still yields the action,
// flagged as mismatched, plus a warning. Anything that cannot become an
// action (empty payload, bad calendar payload, overlong or unterminated
// payload) is reported as a warning and released as plain text, so
// concatenating TextDelta texts and action raw spans in order always
// reproduces the input.

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "json.hpp"

namespace stlm {

enum class ActionKind { Call, Search, Calendar };

std::string_view to_string(ActionKind kind);  // "call", "search", "calendar"
std::string_view tag_literal(ActionKind kind);  // "<call>", ...

struct DateTime {
  int year = 0, month = 0, day = 0, hour = 0, minute = 0, second = 0;

  std::string to_iso() const;  // YYYY-MM-DDTHH:MM:SS
  friend bool operator==(const DateTime&, const DateTime&) = default;
};

// Strict "YYYY-MM-DDTHH:MM:SS" with calendar validation. Throws BadDateTime.
DateTime parse_iso_datetime(std::string_view text);

struct CalendarEntry {
  DateTime when;
  std::string title;
};

// Splits at the first '/'; the rest, trimmed, is the title. Throws
// MalformedCalendar (no '/' or empty title) or BadDateTime.
CalendarEntry parse_calendar_payload(std::string_view payload);

struct Action {
  ActionKind kind = ActionKind::Call;
  std::string text;                   // contact, query or calendar title
  std::optional<DateTime> when;       // calendar only
  std::optional<ActionKind> mismatched_close;
  std::string raw_span;               // opener + payload + closer, verbatim

  friend bool operator==(const Action&, const Action&) = default;
};

// {"kind", "fields", "mismatched_close", "raw_span"}; fields holds "contact",
// "query" or "when" + "title".
nlohmann::json action_to_json(const Action& a);
Action action_from_json(const nlohmann::json& j);  // throws FormatError

struct TextDelta {
  std::string text;
  friend bool operator==(const TextDelta&, const TextDelta&) = default;
};
struct ActionDetected {
  Action action;
  friend bool operator==(const ActionDetected&, const ActionDetected&) = default;
};
struct ParseWarning {
  std::string reason;
  std::string raw_span;
  friend bool operator==(const ParseWarning&, const ParseWarning&) = default;
};
using ParseEvent = std::variant<TextDelta, ActionDetected, ParseWarning>;

nlohmann::json event_to_json(const ParseEvent& e);

// Merges adjacent TextDelta events. Streams from different chunkings of the
// same text are equal after normalisation.
std::vector<ParseEvent> normalize_events(std::vector<ParseEvent> events);

inline constexpr std::size_t kDefaultPayloadCap = 512;

class ActionParser {
 public:
  enum class Mode { Outside, MaybeTag, Inside };

  explicit ActionParser(std::size_t payload_cap = kDefaultPayloadCap) : cap_(payload_cap) {}

  std::vector<ParseEvent> feed(std::string_view chunk);
  // End of input: releases any held text and resets to Outside.
  std::vector<ParseEvent> flush();

  Mode mode() const { return mode_; }
  // Bytes currently withheld from the output.
  std::size_t buffered() const { return buffer_.size(); }

 private:
  void step(char c, std::vector<ParseEvent>& out);
  void close_action(ActionKind closer, std::vector<ParseEvent>& out);
  void release(std::string reason, std::vector<ParseEvent>& out);

  std::size_t cap_;
  Mode mode_ = Mode::Outside;
  ActionKind opener_ = ActionKind::Call;
  std::string buffer_;  // MaybeTag: tag prefix; Inside: payload so far
  std::string pending_text_;
};

// Convenience: feed the whole string, then flush.
std::vector<ParseEvent> parse_actions(std::string_view text, std::size_t payload_cap = kDefaultPayloadCap);

}  // namespace stlm
