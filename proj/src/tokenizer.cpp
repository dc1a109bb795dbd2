#include "stlm/tokenizer.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <sstream>

#include "stlm/error.hpp"

namespace stlm {
namespace {

constexpr std::string_view kVocabHeader = "stlm-vocab 1";
constexpr std::array<std::string_view, 6> kFixtureSpecials{
    special::kHuman, special::kBot,      special::kCall,
    special::kSearch, special::kCalendar, special::kEndOfText};

std::string to_hex(std::string_view bytes) {
  static constexpr char kDigits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(kDigits[c >> 4]);
    out.push_back(kDigits[c & 0xF]);
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) fail(ErrorCode::FormatError, "vocab: odd-length hex field");
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    unsigned value = 0;
    const auto [ptr, ec] = std::from_chars(hex.data() + i, hex.data() + i + 2, value, 16);
    if (ec != std::errc() || ptr != hex.data() + i + 2) {
      fail(ErrorCode::FormatError, "vocab: bad hex digit");
    }
    out.push_back(static_cast<char>(value));
  }
  return out;
}

}  // namespace

Vocab::Vocab(std::vector<VocabEntry> entries) : entries_(std::move(entries)) { index(); }

void Vocab::index() {
  specials_.clear();
  byte_ids_.assign(256, 0);
  std::array<bool, 256> seen{};
  for (TokenId id = 0; id < entries_.size(); ++id) {
    const VocabEntry& e = entries_[id];
    switch (e.kind) {
      case TokenKind::Byte: {
        if (e.bytes.size() != 1) fail(ErrorCode::FormatError, "vocab: byte token must hold one byte");
        const auto b = static_cast<unsigned char>(e.bytes[0]);
        if (seen[b]) fail(ErrorCode::FormatError, "vocab: duplicate byte token");
        seen[b] = true;
        byte_ids_[b] = id;
        break;
      }
      case TokenKind::Special:
        if (e.bytes.empty()) fail(ErrorCode::FormatError, "vocab: empty special literal");
        for (const auto& [lit, other] : specials_) {
          if (lit == e.bytes) fail(ErrorCode::FormatError, "vocab: duplicate special literal");
        }
        specials_.emplace_back(e.bytes, id);
        break;
      case TokenKind::Piece:
        break;
    }
  }
  if (!std::all_of(seen.begin(), seen.end(), [](bool s) { return s; })) {
    fail(ErrorCode::FormatError, "vocab: every byte value needs a token");
  }
  std::stable_sort(specials_.begin(), specials_.end(),
                   [](const auto& a, const auto& b) { return a.first.size() > b.first.size(); });
  max_special_len_ = specials_.empty() ? 0 : specials_.front().first.size();
}

Vocab Vocab::fixture(std::size_t vocab_size) {
  std::vector<VocabEntry> entries;
  entries.reserve(std::max<std::size_t>(vocab_size, 256 + kFixtureSpecials.size()));
  for (int b = 0; b < 256; ++b) {
    entries.push_back({std::string(1, static_cast<char>(b)), TokenKind::Byte});
  }
  for (std::string_view s : kFixtureSpecials) entries.push_back({std::string(s), TokenKind::Special});
  while (entries.size() < vocab_size) entries.push_back({std::string(), TokenKind::Piece});
  return Vocab(std::move(entries));
}

const VocabEntry& Vocab::entry(TokenId id) const {
  if (id >= entries_.size()) {
    fail(ErrorCode::InvalidToken, "token id " + std::to_string(id) + " outside vocabulary");
  }
  return entries_[id];
}

std::optional<TokenId> Vocab::special_id(std::string_view literal) const {
  for (const auto& [lit, id] : specials_) {
    if (lit == literal) return id;
  }
  return std::nullopt;
}

TokenId Vocab::require_special(std::string_view literal) const {
  if (auto id = special_id(literal)) return *id;
  fail(ErrorCode::InvalidToken, "vocabulary has no special " + std::string(literal));
}

TokenId Vocab::add_piece(std::string bytes) {
  entries_.push_back({std::move(bytes), TokenKind::Piece});
  return static_cast<TokenId>(entries_.size() - 1);
}

std::string Vocab::to_text() const {
  std::ostringstream out;
  out << kVocabHeader << '\n';
  for (TokenId id = 0; id < entries_.size(); ++id) {
    out << id << '\t' << to_hex(entries_[id].bytes) << '\t'
        << static_cast<char>(entries_[id].kind) << '\n';
  }
  return out.str();
}

Vocab Vocab::from_text(std::string_view text) {
  std::vector<VocabEntry> entries;
  std::size_t pos = 0;
  bool header = true;
  while (pos < text.size()) {
    std::size_t end = text.find('\n', pos);
    if (end == std::string_view::npos) end = text.size();
    const std::string_view line = text.substr(pos, end - pos);
    pos = end + 1;
    if (header) {
      if (line != kVocabHeader) fail(ErrorCode::FormatError, "vocab: missing or unknown header");
      header = false;
      continue;
    }
    if (line.empty()) continue;
    const auto t1 = line.find('\t');
    const auto t2 = line.find('\t', t1 == std::string_view::npos ? t1 : t1 + 1);
    if (t1 == std::string_view::npos || t2 == std::string_view::npos || t2 + 2 != line.size()) {
      fail(ErrorCode::FormatError, "vocab: malformed line");
    }
    std::size_t id = 0;
    const auto [p, ec] = std::from_chars(line.data(), line.data() + t1, id);
    if (ec != std::errc() || p != line.data() + t1 || id != entries.size()) {
      fail(ErrorCode::FormatError, "vocab: ids must be consecutive from 0");
    }
    const char flag = line[t2 + 1];
    if (flag != 'B' && flag != 'S' && flag != 'P') fail(ErrorCode::FormatError, "vocab: unknown flag");
    entries.push_back({from_hex(line.substr(t1 + 1, t2 - t1 - 1)), static_cast<TokenKind>(flag)});
  }
  if (header) fail(ErrorCode::FormatError, "vocab: empty file");
  return Vocab(std::move(entries));
}

TokenSeq encode(std::string_view text, const Vocab& vocab) {
  TokenSeq out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    bool matched = false;
    // specials are sorted longest first, so the first hit is the longest
    for (const auto& [lit, id] : vocab.specials()) {
      if (text.compare(pos, lit.size(), lit) == 0) {
        out.push_back(id);
        pos += lit.size();
        matched = true;
        break;
      }
    }
    if (!matched) {
      out.push_back(vocab.byte_id(static_cast<unsigned char>(text[pos])));
      ++pos;
    }
  }
  return out;
}

std::string_view token_bytes(TokenId id, const Vocab& vocab) { return vocab.entry(id).bytes; }

std::string decode(const TokenSeq& ids, const Vocab& vocab) {
  std::string out;
  for (TokenId id : ids) out += vocab.entry(id).bytes;
  return out;
}

}  // namespace stlm
