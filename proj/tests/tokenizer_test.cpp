#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "stlm/error.hpp"
#include "stlm/tokenizer.hpp"

using namespace stlm;

namespace {

std::string random_utf8(std::mt19937_64& rng, std::size_t max_len) {
  static const std::vector<std::string> fragments{
      "<call>", "<search>", "<calendar>", "<human>", "<bot>", "<|endoftext|>",
      "<ca", "ll>", "<", ">", "|", "John", " ", "\n", ":", "é", "日本", "🙂", "/"};
  std::uniform_int_distribution<std::size_t> len_dist(0, max_len);
  std::uniform_int_distribution<int> kind(0, 3);
  std::uniform_int_distribution<std::size_t> frag(0, fragments.size() - 1);
  std::uniform_int_distribution<int> ascii(0x20, 0x7E);
  std::string s;
  const std::size_t n = len_dist(rng);
  for (std::size_t i = 0; i < n; ++i) {
    if (kind(rng) == 0) {
      s += fragments[frag(rng)];
    } else {
      s.push_back(static_cast<char>(ascii(rng)));
    }
  }
  return s;
}

}  // namespace

TEST_SUITE("tokenizer") {
  TEST_CASE("fixture vocab layout") {
    const Vocab v = Vocab::fixture(512);
    CHECK(v.size() == 512);
    CHECK(v.byte_id('A') == 65);
    CHECK(v.require_special("<human>") == 256);
    CHECK(v.require_special("<|endoftext|>") == 261);
    CHECK(v.eos() == 261);
    CHECK(v.max_special_length() == std::string("<|endoftext|>").size());
    CHECK(Vocab::fixture().size() == 262);
  }

  TEST_CASE("encode examples") {
    const Vocab v = Vocab::fixture();
    CHECK(encode("", v).empty());
    CHECK(encode("<call>", v) == TokenSeq{v.require_special("<call>")});
    const TokenId call = v.require_special("<call>");
    CHECK(encode("<call>John<call>", v) == TokenSeq{call, 'J', 'o', 'h', 'n', call});
    // longest match: <calendar> is never <cal + endar>
    CHECK(encode("<calendar>", v) == TokenSeq{v.require_special("<calendar>")});
    CHECK(encode("<cal", v) == TokenSeq{'<', 'c', 'a', 'l'});
  }

  TEST_CASE("decode examples") {
    const Vocab v = Vocab::fixture();
    CHECK(decode({}, v).empty());
    CHECK(decode(encode("Hello, world", v), v) == "Hello, world");
    CHECK(decode({v.eos()}, v) == "<|endoftext|>");
    try {
      decode({static_cast<TokenId>(v.size())}, v);
      FAIL("expected InvalidToken");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::InvalidToken);
    }
  }

  TEST_CASE("property: round trip and special atomicity") {
    const Vocab v = Vocab::fixture();
    std::mt19937_64 rng(11);
    for (int i = 0; i < 10000; ++i) {
      const std::string s = random_utf8(rng, 24);
      const TokenSeq ids = encode(s, v);
      REQUIRE(decode(ids, v) == s);

      // every verbatim special occurrence (scanned left to right, longest
      // first) must surface as exactly one special id
      std::size_t expected = 0;
      for (std::size_t pos = 0; pos < s.size();) {
        bool hit = false;
        for (const auto& [lit, id] : v.specials()) {
          if (s.compare(pos, lit.size(), lit) == 0) {
            ++expected;
            pos += lit.size();
            hit = true;
            break;
          }
        }
        if (!hit) ++pos;
      }
      std::size_t specials = 0;
      for (TokenId id : ids) specials += v.entry(id).kind == TokenKind::Special;
      REQUIRE(specials == expected);
    }
  }

  TEST_CASE("vocab file round trip") {
    Vocab v = Vocab::fixture(300);
    v.add_piece("Hello");
    const std::string text = v.to_text();
    CHECK(text.rfind("stlm-vocab 1\n", 0) == 0);
    CHECK(text.find("256\t3c68756d616e3e\tS\n") != std::string::npos);
    const Vocab back = Vocab::from_text(text);
    CHECK(back.to_text() == text);
    CHECK(back.entry(300).bytes == "Hello");
    CHECK(back.entry(300).kind == TokenKind::Piece);
  }

  TEST_CASE("vocab file errors") {
    CHECK_THROWS_AS(Vocab::from_text(""), Error);
    CHECK_THROWS_AS(Vocab::from_text("stlm-vocab 9\n"), Error);
    // missing byte tokens
    CHECK_THROWS_AS(Vocab::from_text("stlm-vocab 1\n0\t41\tB\n"), Error);
    std::string text = Vocab::fixture().to_text();
    text.replace(text.find("\tS\n"), 3, "\tX\n");
    CHECK_THROWS_AS(Vocab::from_text(text), Error);
  }
}
