#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include "doctest.h"
#include "stlm/error.hpp"
#include "stlm/fixture.hpp"
#include "stlm/md5.hpp"
#include "stlm/modelfile.hpp"
#include "temp_dir.hpp"

using namespace stlm;
namespace fs = std::filesystem;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an stlm::Error");
  return ErrorCode::InvalidArgument;
}

void write_bytes(const fs::path& p, const std::vector<std::uint8_t>& b) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::uint64_t align32(std::uint64_t v) { return (v + 31) / 32 * 32; }

// File size predicted from the documented layout alone.
std::uint64_t predicted_size(const Model& m, Dtype dense) {
  std::uint64_t header = 4 + 4 + 4 + 4 + 6 * 4 + 3 * 4 + 4 + 4 + 4 + m.vocab.to_text().size();
  std::uint64_t payload_end = 0;
  for (const auto& [name, t] : m.weights.tensors()) header += 2 + name.size() + 2 + 8 * tensor_dims(t).size() + 16;
  payload_end = header;
  for (const auto& [name, t] : m.weights.tensors()) {
    const auto dims = tensor_dims(t);
    std::uint64_t n = 1;
    for (auto d : dims) n *= d;
    const std::uint64_t bytes = is_quantized(t) ? n / 32 * 18 : n * (dense == Dtype::F16 ? 2 : 4);
    payload_end = align32(payload_end) + bytes;
  }
  return payload_end + 20;
}

}  // namespace

TEST_SUITE("modelfile") {
  TEST_CASE("golden header bytes") {
    Container c;
    c.header.config = ModelConfig{};
    c.header.vocab_text = "V";
    c.tensors.emplace_back("t", DenseTensor({2}, {1.0f, -2.0f}));
    const auto bytes = serialize_container(c);
    const std::vector<std::uint8_t> head{
        'S', 'T', 'L', 'M', 1, 0, 0, 0, 0, 0, 0, 0, 1, 0, 0, 0,  // magic, version, kind, count
        4, 0, 0, 0, 4, 0, 0, 0, 128, 0, 0, 0, 0, 2, 0, 0,         // layers, heads, d_model, vocab
        0, 1, 0, 0, 0, 2, 0, 0,                                    // max_context, d_ff
        0x00, 0x00, 0x80, 0x3F, 0xAC, 0xC5, 0x27, 0x37, 0x00, 0x40, 0x1C, 0x46,  // 1.0, 1e-5, 10000
        0, 0, 0, 0, 0, 0, 0, 0,                                    // rank, alpha
        1, 0, 0, 0, 'V',                                           // vocab
        1, 0, 't', 0, 1, 2, 0, 0, 0, 0, 0, 0, 0,                   // name, f32, ndim 1, dims
        96, 0, 0, 0, 0, 0, 0, 0, 8, 0, 0, 0, 0, 0, 0, 0};          // offset 96, length 8
    REQUIRE(bytes.size() == 96 + 8 + 20);
    CHECK(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + head.size()) == head);
    for (std::size_t i = head.size(); i < 96; ++i) CHECK(bytes[i] == 0);
    const std::vector<std::uint8_t> payload{0, 0, 0x80, 0x3F, 0, 0, 0, 0xC0};
    CHECK(std::vector<std::uint8_t>(bytes.begin() + 96, bytes.begin() + 104) == payload);
    CHECK(to_hex(std::span(bytes).subspan(104, 16)) == md5_hex(std::span(bytes).first(104)));
    CHECK(std::string(bytes.end() - 4, bytes.end()) == "END1");
  }

  TEST_CASE("header-only container round trips") {
    Container c;
    c.header.vocab_text = Vocab::fixture().to_text();
    const auto bytes = serialize_container(c);
    const Container back = parse_container(bytes);
    CHECK(back.tensors.empty());
    CHECK(back.header.config == c.header.config);
    CHECK(serialize_container(back) == bytes);
  }

  TEST_CASE("model round trip: logits and bytes") {
    testing::TempDir dir;
    const Model m = fixture::random_model(ModelConfig{}, 31);
    for (Dtype dt : {Dtype::F32, Dtype::F16}) {
      const fs::path p = dir.path() / "m.stlm";
      const FileSummary s = write_model(m, p, dt);
      CHECK(s.file_bytes == fs::file_size(p));
      CHECK(s.file_bytes == predicted_size(m, dt));
      const LoadedModel back = read_model(p);
      CHECK(back.dense_dtype == dt);
      if (dt == Dtype::F32) {
        CHECK(back.model.weights == m.weights);
        const TokenSeq prompt = encode("<human>: Hi\n<bot>:", m.vocab);
        KVCache a(m.config), b(m.config);
        CHECK(forward(m, prompt, a) == forward(back.model, prompt, b));
      }
      const fs::path p2 = dir.path() / "m2.stlm";
      write_model(back.model, p2, dt);
      CHECK(read_file(p) == read_file(p2));
    }
  }

  TEST_CASE("corruption and format errors") {
    testing::TempDir dir;
    const fs::path p = dir.path() / "m.stlm";
    const Model m = fixture::random_model(ModelConfig{}, 32);
    write_model(m, p);
    const auto good = read_file(p);

    auto flipped = good;
    flipped[good.size() / 2] ^= 0x01;
    write_bytes(p, flipped);
    CHECK(code_of([&] { read_model(p); }) == ErrorCode::CorruptFile);

    write_bytes(p, std::vector<std::uint8_t>(good.begin(), good.begin() + good.size() / 3));
    CHECK(code_of([&] { read_model(p); }) == ErrorCode::CorruptFile);

    auto magic = good;
    magic[0] = 'X';
    write_bytes(p, magic);
    CHECK(code_of([&] { read_model(p); }) == ErrorCode::FormatError);

    auto version = good;
    version[4] = 9;
    write_bytes(p, version);
    CHECK(code_of([&] { read_model(p); }) == ErrorCode::FormatError);

    CHECK(code_of([&] { read_model(dir.path() / "missing.stlm"); }) == ErrorCode::IoError);
  }

  TEST_CASE("quantize_model: size law against the layout prediction") {
    testing::TempDir dir;
    const Model m = fixture::random_model(ModelConfig{}, 33);
    write_model(m, dir.path() / "f16.stlm", Dtype::F16);
    const SizeReport r = quantize_model(dir.path() / "f16.stlm", dir.path() / "q4.stlm");
    CHECK(r.before_bytes == fs::file_size(dir.path() / "f16.stlm"));
    CHECK(r.after_bytes == fs::file_size(dir.path() / "q4.stlm"));
    CHECK(r.before_bytes == predicted_size(m, Dtype::F16));
    CHECK(r.after_bytes == predicted_size(quantize_weights(m), Dtype::F16));
    CHECK(r.ratio >= 0.28);
    CHECK(r.ratio <= 0.35);
    for (const SizeRow& row : r.tensors) {
      CHECK(row.after == (row.dims.size() == 2 ? Dtype::Q4 : Dtype::F16));
      if (row.after == Dtype::Q4) CHECK(row.bytes_after * 2 * 32 == row.bytes_before * 18);
    }
    const LoadedModel q = read_model(dir.path() / "q4.stlm");
    CHECK(is_quantized(q.model.weights.get(names::kEmbed)));
    CHECK(code_of([&] { quantize_model(dir.path() / "q4.stlm", dir.path() / "again.stlm"); }) ==
          ErrorCode::AlreadyQuantized);
  }

  TEST_CASE("quantize_model names a non-conforming tensor") {
    testing::TempDir dir;
    ModelConfig c;
    c.d_model = 48;
    c.n_heads = 2;
    c.d_ff = 96;
    c.vocab_size = 262;
    Model m{c, {}, Vocab::fixture()};
    for (const auto& [name, dims] : expected_tensors(c)) m.weights.set(name, DenseTensor(dims));
    write_model(m, dir.path() / "odd.stlm", Dtype::F16);
    try {
      quantize_model(dir.path() / "odd.stlm", dir.path() / "out.stlm");
      FAIL("expected ShapeError");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::ShapeError);
      CHECK(std::string(e.what()).find("embed.weight") != std::string::npos);
    }
    CHECK_FALSE(fs::exists(dir.path() / "out.stlm"));
  }
}
