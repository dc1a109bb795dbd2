#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace stlm {

using TokenId = std::uint32_t;
using TokenSeq = std::vector<TokenId>;

namespace special {
inline constexpr std::string_view kHuman = "<human>";
inline constexpr std::string_view kBot = "<bot>";
inline constexpr std::string_view kCall = "<call>";
inline constexpr std::string_view kSearch = "<search>";
inline constexpr std::string_view kCalendar = "<calendar>";
inline constexpr std::string_view kEndOfText = "<|endoftext|>";
}  // namespace special

enum class TokenKind : char {
  Byte = 'B',      // single raw byte; all 256 must be present
  Special = 'S',   // atomic literal matched before byte fallback
  Piece = 'P',     // multi-byte text, produced only by a model, never by encode
};

struct VocabEntry {
  std::string bytes;
  TokenKind kind = TokenKind::Byte;
};

// Byte-fallback vocabulary with atomic special literals. Immutable once built.
class Vocab {
 public:
  explicit Vocab(std::vector<VocabEntry> entries);

  // 256 byte tokens (id == byte value), then the six dialogue/action specials
  // in order, then `reserved` empty piece entries up to the requested size.
  static Vocab fixture(std::size_t vocab_size = 0);

  std::size_t size() const { return entries_.size(); }
  const VocabEntry& entry(TokenId id) const;
  std::optional<TokenId> special_id(std::string_view literal) const;
  TokenId require_special(std::string_view literal) const;
  TokenId eos() const { return require_special(special::kEndOfText); }
  TokenId byte_id(unsigned char b) const { return byte_ids_[b]; }
  const std::vector<std::pair<std::string, TokenId>>& specials() const { return specials_; }
  // Longest special literal; a streaming consumer never needs to hold back
  // more than this many bytes to see a special intact.
  std::size_t max_special_length() const { return max_special_len_; }

  // Append a decode-only piece; returns its id.
  TokenId add_piece(std::string bytes);

  std::string to_text() const;
  static Vocab from_text(std::string_view text);

 private:
  void index();

  std::vector<VocabEntry> entries_;
  std::vector<std::pair<std::string, TokenId>> specials_;  // longest first
  std::vector<TokenId> byte_ids_;
  std::size_t max_special_len_ = 0;
};

TokenSeq encode(std::string_view text, const Vocab& vocab);
std::string decode(const TokenSeq& ids, const Vocab& vocab);
std::string_view token_bytes(TokenId id, const Vocab& vocab);

}  // namespace stlm
