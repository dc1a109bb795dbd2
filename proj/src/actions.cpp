#include "stlm/actions.hpp"

#include <algorithm>
#include <array>
#include <cstdio>

#include "stlm/error.hpp"
#include "stlm/tokenizer.hpp"

namespace stlm {
namespace {

constexpr std::array<ActionKind, 3> kKinds = {ActionKind::Call, ActionKind::Search, ActionKind::Calendar};

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
}

bool is_tag_prefix(std::string_view s) {
  for (ActionKind k : kKinds)
    if (tag_literal(k).starts_with(s)) return true;
  return false;
}

std::optional<ActionKind> tag_suffix(std::string_view s) {
  for (ActionKind k : kKinds)
    if (s.ends_with(tag_literal(k))) return k;
  return std::nullopt;
}

// Bytes at the end of s that could still grow into a tag.
std::size_t partial_tag_length(std::string_view s) {
  const auto lt = s.rfind('<');
  if (lt == std::string_view::npos) return 0;
  return is_tag_prefix(s.substr(lt)) ? s.size() - lt : 0;
}

int fixed_digits(std::string_view s, std::size_t pos, std::size_t n) {
  int v = 0;
  for (std::size_t i = pos; i < pos + n; ++i) {
    if (s[i] < '0' || s[i] > '9') fail(ErrorCode::BadDateTime, "not a datetime: " + std::string(s));
    v = v * 10 + (s[i] - '0');
  }
  return v;
}

int days_in_month(int year, int month) {
  static constexpr int days[] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  const bool leap = (year % 4 == 0 && year % 100 != 0) || year % 400 == 0;
  return month == 2 && leap ? 29 : days[month - 1];
}

}  // namespace

std::string_view to_string(ActionKind kind) {
  switch (kind) {
    case ActionKind::Call: return "call";
    case ActionKind::Search: return "search";
    case ActionKind::Calendar: return "calendar";
  }
  return "?";
}

std::string_view tag_literal(ActionKind kind) {
  switch (kind) {
    case ActionKind::Call: return special::kCall;
    case ActionKind::Search: return special::kSearch;
    case ActionKind::Calendar: return special::kCalendar;
  }
  return {};
}

std::string DateTime::to_iso() const {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02dT%02d:%02d:%02d", year, month, day, hour, minute, second);
  return buf;
}

DateTime parse_iso_datetime(std::string_view s) {
  // YYYY-MM-DDTHH:MM:SS
  if (s.size() != 19 || s[4] != '-' || s[7] != '-' || s[10] != 'T' || s[13] != ':' || s[16] != ':') {
    fail(ErrorCode::BadDateTime, "expected YYYY-MM-DDTHH:MM:SS, got \"" + std::string(s) + "\"");
  }
  DateTime d{fixed_digits(s, 0, 4),  fixed_digits(s, 5, 2),  fixed_digits(s, 8, 2),
             fixed_digits(s, 11, 2), fixed_digits(s, 14, 2), fixed_digits(s, 17, 2)};
  if (d.month < 1 || d.month > 12 || d.day < 1 || d.day > days_in_month(d.year, d.month) || d.hour > 23 ||
      d.minute > 59 || d.second > 59) {
    fail(ErrorCode::BadDateTime, "no such date or time: " + std::string(s));
  }
  return d;
}

CalendarEntry parse_calendar_payload(std::string_view payload) {
  const auto slash = payload.find('/');
  if (slash == std::string_view::npos) fail(ErrorCode::MalformedCalendar, "calendar payload has no '/' separator");
  CalendarEntry e;
  e.when = parse_iso_datetime(trim(payload.substr(0, slash)));
  e.title = std::string(trim(payload.substr(slash + 1)));
  if (e.title.empty()) fail(ErrorCode::MalformedCalendar, "calendar payload has an empty title");
  return e;
}

nlohmann::json action_to_json(const Action& a) {
  nlohmann::json fields;
  switch (a.kind) {
    case ActionKind::Call: fields = {{"contact", a.text}}; break;
    case ActionKind::Search: fields = {{"query", a.text}}; break;
    case ActionKind::Calendar: fields = {{"when", a.when ? a.when->to_iso() : ""}, {"title", a.text}}; break;
  }
  return {{"kind", to_string(a.kind)},
          {"fields", fields},
          {"mismatched_close", a.mismatched_close ? nlohmann::json(to_string(*a.mismatched_close)) : nlohmann::json()},
          {"raw_span", a.raw_span}};
}

Action action_from_json(const nlohmann::json& j) {
  Action a;
  try {
    const auto kind = j.at("kind").get<std::string>();
    const auto it = std::find_if(kKinds.begin(), kKinds.end(), [&](ActionKind k) { return to_string(k) == kind; });
    if (it == kKinds.end()) fail(ErrorCode::FormatError, "unknown action kind " + kind);
    a.kind = *it;
    const auto& f = j.at("fields");
    switch (a.kind) {
      case ActionKind::Call: a.text = f.at("contact").get<std::string>(); break;
      case ActionKind::Search: a.text = f.at("query").get<std::string>(); break;
      case ActionKind::Calendar:
        a.text = f.at("title").get<std::string>();
        a.when = parse_iso_datetime(f.at("when").get<std::string>());
        break;
    }
    if (const auto& m = j.at("mismatched_close"); !m.is_null()) {
      const auto name = m.get<std::string>();
      const auto mk = std::find_if(kKinds.begin(), kKinds.end(), [&](ActionKind k) { return to_string(k) == name; });
      if (mk == kKinds.end()) fail(ErrorCode::FormatError, "unknown tag " + name);
      a.mismatched_close = *mk;
    }
    a.raw_span = j.at("raw_span").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, std::string("bad action JSON: ") + e.what());
  } catch (const Error& e) {
    if (e.code() != ErrorCode::FormatError) fail(ErrorCode::FormatError, e.what());
    throw;
  }
  return a;
}

nlohmann::json event_to_json(const ParseEvent& e) {
  if (const auto* t = std::get_if<TextDelta>(&e)) return {{"type", "text"}, {"text", t->text}};
  if (const auto* a = std::get_if<ActionDetected>(&e)) return {{"type", "action"}, {"action", action_to_json(a->action)}};
  const auto& w = std::get<ParseWarning>(e);
  return {{"type", "warning"}, {"reason", w.reason}, {"raw_span", w.raw_span}};
}

std::vector<ParseEvent> normalize_events(std::vector<ParseEvent> events) {
  std::vector<ParseEvent> out;
  for (auto& e : events) {
    auto* t = std::get_if<TextDelta>(&e);
    if (t && t->text.empty()) continue;
    if (t && !out.empty()) {
      if (auto* prev = std::get_if<TextDelta>(&out.back())) {
        prev->text += t->text;
        continue;
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

std::vector<ParseEvent> ActionParser::feed(std::string_view chunk) {
  std::vector<ParseEvent> out;
  for (char c : chunk) step(c, out);
  if (!pending_text_.empty()) out.push_back(TextDelta{std::exchange(pending_text_, {})});
  return out;
}

void ActionParser::step(char c, std::vector<ParseEvent>& out) {
  auto emit_text = [&](std::string_view s) { pending_text_ += s; };
  auto flush_text = [&] {
    if (!pending_text_.empty()) out.push_back(TextDelta{std::exchange(pending_text_, {})});
  };

  switch (mode_) {
    case Mode::Outside:
      if (c == '<') {
        buffer_ = "<";
        mode_ = Mode::MaybeTag;
      } else {
        emit_text(std::string_view(&c, 1));
      }
      return;

    case Mode::MaybeTag: {
      buffer_ += c;
      if (!is_tag_prefix(buffer_)) {
        // Tags hold a single '<', so only a new '<' can start another candidate.
        buffer_.pop_back();
        emit_text(buffer_);
        buffer_.clear();
        mode_ = Mode::Outside;
        step(c, out);
        return;
      }
      if (const auto k = tag_suffix(buffer_)) {
        flush_text();
        opener_ = *k;
        buffer_.clear();
        mode_ = Mode::Inside;
      }
      return;
    }

    case Mode::Inside:
      buffer_ += c;
      if (const auto k = tag_suffix(buffer_)) {
        close_action(*k, out);
        return;
      }
      if (buffer_.size() - partial_tag_length(buffer_) > cap_) {
        flush_text();
        release("payload exceeds " + std::to_string(cap_) + " bytes", out);
      }
      return;
  }
}

void ActionParser::close_action(ActionKind closer, std::vector<ParseEvent>& out) {
  const std::string_view payload(buffer_.data(), buffer_.size() - tag_literal(closer).size());
  Action a;
  a.kind = opener_;
  a.raw_span = std::string(tag_literal(opener_)) + buffer_;
  a.text = std::string(trim(payload));
  if (a.text.empty()) {
    release("empty " + std::string(to_string(opener_)) + " payload", out);
    return;
  }
  if (a.kind == ActionKind::Calendar) {
    try {
      CalendarEntry e = parse_calendar_payload(payload);
      a.when = e.when;
      a.text = std::move(e.title);
    } catch (const Error& e) {
      release(e.what(), out);
      return;
    }
  }
  if (closer != opener_) a.mismatched_close = closer;
  const std::string raw = a.raw_span;
  out.push_back(ActionDetected{std::move(a)});
  if (closer != opener_) {
    out.push_back(ParseWarning{"closing tag " + std::string(tag_literal(closer)) + " does not match " +
                                   std::string(tag_literal(opener_)),
                               raw});
  }
  buffer_.clear();
  mode_ = Mode::Outside;
}

// Gives up on the current action: warns and hands the raw span back as text.
void ActionParser::release(std::string reason, std::vector<ParseEvent>& out) {
  std::string raw = std::string(tag_literal(opener_)) + buffer_;
  out.push_back(ParseWarning{std::move(reason), raw});
  out.push_back(TextDelta{std::move(raw)});
  buffer_.clear();
  mode_ = Mode::Outside;
}

std::vector<ParseEvent> ActionParser::flush() {
  std::vector<ParseEvent> out;
  if (mode_ == Mode::MaybeTag) {
    out.push_back(TextDelta{std::exchange(buffer_, {})});
    mode_ = Mode::Outside;
  } else if (mode_ == Mode::Inside) {
    release("unterminated " + std::string(tag_literal(opener_)) + " action", out);
  }
  return out;
}

std::vector<ParseEvent> parse_actions(std::string_view text, std::size_t payload_cap) {
  ActionParser p(payload_cap);
  auto out = p.feed(text);
  auto tail = p.flush();
  out.insert(out.end(), std::make_move_iterator(tail.begin()), std::make_move_iterator(tail.end()));
  return out;
}

}  // namespace stlm
