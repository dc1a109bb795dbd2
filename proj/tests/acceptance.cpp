// Acceptance suite: one PASS/FAIL line per top-level criterion, each checked
// at its stated tolerance and runtime budget. Exit status is the number of
// failed criteria.

#include <openssl/evp.h>
#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <random>
#include <sstream>

#include "file_server.hpp"
#include "reference_model.hpp"
#include "stlm/actions.hpp"
#include "stlm/adapter.hpp"
#include "stlm/chat.hpp"
#include "stlm/error.hpp"
#include "stlm/fetch.hpp"
#include "stlm/fixture.hpp"
#include "stlm/kernels.hpp"
#include "stlm/md5.hpp"
#include "stlm/modelfile.hpp"
#include "stlm/qtensor.hpp"
#include "temp_dir.hpp"
#include "test_util.hpp"

using namespace stlm;
namespace fs = std::filesystem;
using testing::random_matrix;
using testing::reference_matvec;
using testing::uniform_values;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void expect(bool ok, const std::string& what) {
  if (!ok) throw Failure(what);
}

template <class T>
std::string fmt(T v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

std::vector<TokenId> random_tokens(std::mt19937_64& rng, std::size_t n, std::size_t vocab) {
  std::vector<TokenId> t(n);
  for (auto& id : t) id = static_cast<TokenId>(rng() % vocab);
  return t;
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  throw Failure("expected an error, none was raised");
}

// ---------------------------------------------------------------------------

std::string quantization_error_bound() {
  std::mt19937_64 rng(101);
  constexpr std::size_t kBlocks = 20000;
  // Each row is one block; magnitudes span six decades.
  DenseTensor t({kBlocks, kBlockSize});
  std::uniform_real_distribution<double> log_mag(-3.0, 3.0);
  for (std::size_t r = 0; r < kBlocks; ++r) {
    const float m = static_cast<float>(std::pow(10.0, log_mag(rng)));
    const auto v = uniform_values(rng, kBlockSize, -m, m);
    std::copy(v.begin(), v.end(), t.data.begin() + static_cast<std::ptrdiff_t>(r * kBlockSize));
  }
  const DenseTensor back = dequantize(quantize_tensor(t));
  double worst_ratio = 0.0;
  for (std::size_t r = 0; r < kBlocks; ++r) {
    double amax = 0.0, err = 0.0;
    for (std::size_t i = 0; i < kBlockSize; ++i) {
      const std::size_t k = r * kBlockSize + i;
      amax = std::max(amax, std::fabs(double(t.data[k])));
      err = std::max(err, std::fabs(double(t.data[k]) - back.data[k]));
    }
    // f16 storage of the scale may move each step by one half-precision ulp.
    const double bound = amax / 14.0 + amax * std::ldexp(1.0, -10) + std::ldexp(1.0, -22);
    expect(err <= bound, "block " + fmt(r) + ": error " + fmt(err) + " > bound " + fmt(bound));
    worst_ratio = std::max(worst_ratio, err / amax);
  }
  const DenseTensor zero({1, kBlockSize});
  expect(dequantize(quantize_tensor(zero)).data == zero.data, "zero block does not round-trip");
  return fmt(kBlocks) + " blocks, worst err/amax " + fmt(worst_ratio) + " (1/14 = " + fmt(1.0 / 14) +
         "), zero block exact";
}

// File size from the documented layout, computed without the writer.
std::uint64_t predicted_size(const Model& m, Dtype dense) {
  auto align32 = [](std::uint64_t v) { return (v + 31) / 32 * 32; };
  std::uint64_t header = 4 + 4 + 4 + 4 + 6 * 4 + 3 * 4 + 4 + 4 + 4 + m.vocab.to_text().size();
  for (const auto& [name, t] : m.weights.tensors()) header += 2 + name.size() + 2 + 8 * tensor_dims(t).size() + 16;
  std::uint64_t end = header;
  for (const auto& [name, t] : m.weights.tensors()) {
    std::uint64_t n = 1;
    for (auto d : tensor_dims(t)) n *= d;
    end = align32(end) + (is_quantized(t) ? n / 32 * 18 : n * (dense == Dtype::F16 ? 2 : 4));
  }
  return end + 20;
}

std::string size_law() {
  testing::TempDir dir;
  const Model m = fixture::random_model(ModelConfig{}, 33);
  write_model(m, dir.path() / "f16.stlm", Dtype::F16);
  const SizeReport r = quantize_model(dir.path() / "f16.stlm", dir.path() / "q4.stlm");
  const std::uint64_t want_before = predicted_size(m, Dtype::F16);
  const std::uint64_t want_after = predicted_size(quantize_weights(m), Dtype::F16);
  expect(fs::file_size(dir.path() / "f16.stlm") == want_before, "16-bit file differs from the layout prediction");
  expect(fs::file_size(dir.path() / "q4.stlm") == want_after,
         "4-bit file is " + fmt(fs::file_size(dir.path() / "q4.stlm")) + " bytes, predicted " + fmt(want_after));
  expect(r.before_bytes == want_before && r.after_bytes == want_after, "report disagrees with file sizes");
  for (const SizeRow& row : r.tensors) {
    if (row.after == Dtype::Q4) expect(row.bytes_after * 64 == row.bytes_before * 18, "per-tensor q4 size: " + row.name);
  }
  expect(r.ratio >= 0.28 && r.ratio <= 0.35, "ratio " + fmt(r.ratio) + " outside [0.28, 0.35]");
  return "q4 " + fmt(r.after_bytes) + " / f16 " + fmt(r.before_bytes) + " bytes = ratio " + fmt(r.ratio) +
         " (reference 1.6/5.17 = " + fmt(kReferenceQ4Gb / kReferenceF16Gb) + ")";
}

std::string kernel_parity() {
  using kernels::Isa;
  std::mt19937_64 rng(102);
  std::vector<const kernels::KernelTable*> variants{&kernels::table(Isa::Scalar)};
  if (kernels::supported(Isa::Avx2)) variants.push_back(&kernels::table(Isa::Avx2));
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + rng() % 64;
    const std::size_t cols = 32 * (1 + rng() % 12);
    const QTensor w = quantize_tensor(random_matrix(rng, rows, cols, -4.0f, 4.0f));
    const auto x = uniform_values(rng, cols);
    const auto want = reference_matvec(dequantize(w), x);
    expect(qmatvec(w, x) == want, "shape " + fmt(rows) + "x" + fmt(cols) + ": active qmatvec differs");
    for (const auto* k : variants) {
      std::vector<float> y(rows);
      k->qmatvec(w.blocks().data(), rows, cols, x.data(), y.data());
      expect(std::memcmp(y.data(), want.data(), rows * sizeof(float)) == 0,
             std::string(k->name) + " qmatvec differs at " + fmt(rows) + "x" + fmt(cols));
    }
  }
  std::string names;
  for (const auto* k : variants) names += (names.empty() ? "" : ", ") + std::string(k->name);
  return "100 shapes bit-exact; kernels checked: " + names + "; active: " + std::string(kernels::active().name);
}

ModelConfig random_config(std::mt19937_64& rng) {
  ModelConfig c;
  c.n_layers = 1 + rng() % 4;
  c.d_model = 32 * (1 + rng() % 4);
  c.n_heads = (c.d_model / 32) * (1 + rng() % 2);
  c.d_ff = 2 * c.d_model;
  c.vocab_size = 270;
  c.max_context = 24;
  c.rotary_fraction = (rng() % 2) ? 1.0f : 0.5f;
  return c;
}

std::string kv_cache_equivalence() {
  std::mt19937_64 rng(103);
  double worst = 0.0, worst_ref = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    const ModelConfig c = random_config(rng);
    Model m = fixture::random_model(c, rng());
    if (trial % 2) m = quantize_weights(m);
    const std::size_t n = 4 + rng() % 16;
    const auto toks = random_tokens(rng, n, c.vocab_size);
    KVCache one(c), inc(c);
    const auto all = forward(m, toks, one);
    std::vector<float> last;
    for (TokenId t : toks) last = forward(m, std::span(&t, 1), inc);
    const auto ref = testing::reference_logits(m, toks);
    for (std::size_t i = 0; i < c.vocab_size; ++i) {
      worst = std::max(worst, double(std::fabs(all[(n - 1) * c.vocab_size + i] - last[i])));
      worst_ref = std::max(worst_ref, std::fabs(last[i] - ref[n - 1][i]));
    }
  }
  expect(worst <= 1e-4, "one-shot vs incremental deviation " + fmt(worst));
  return "20 models, max |one-shot - incremental| " + fmt(worst) + " (double-precision reference: " +
         fmt(worst_ref) + ")";
}

std::string causality_and_softmax() {
  std::mt19937_64 rng(104);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 10; ++trial) {
    const ModelConfig c = random_config(rng);
    const Model m = fixture::random_model(c, rng());
    const std::size_t n = 6 + rng() % 12, k = rng() % n, V = c.vocab_size;
    auto toks = random_tokens(rng, n, V);
    KVCache a(c);
    const auto base = forward(m, toks, a);
    toks[k] = static_cast<TokenId>((toks[k] + 1 + rng() % (V - 1)) % V);
    KVCache b(c);
    const auto pert = forward(m, toks, b);
    for (std::size_t i = 0; i < k * V; ++i) {
      expect(base[i] == pert[i], "changing position " + fmt(k) + " altered logits at " + fmt(i / V));
    }
    for (std::size_t t = 0; t < n; ++t) {
      double sum = 0.0;
      for (float p : softmax(std::span(base).subspan(t * V, V))) {
        expect(p >= 0.0f, "negative probability");
        sum += p;
      }
      worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));
    }
  }
  std::uniform_real_distribution<float> wide(-80.0f, 80.0f);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<float> logits(1 + rng() % 600);
    for (float& v : logits) v = wide(rng);
    double sum = 0.0;
    for (float p : softmax(logits)) sum += p;
    worst_sum = std::max(worst_sum, std::fabs(sum - 1.0));
  }
  expect(worst_sum <= 1e-6, "softmax sum deviates by " + fmt(worst_sum));
  return "10 models: earlier logits bit-identical after perturbation; max |sum p - 1| " + fmt(worst_sum);
}

// Values k/16 with |k| <= 16 keep products and short sums exact in f32.
DenseTensor dyadic(std::mt19937_64& rng, std::size_t rows, std::size_t cols) {
  DenseTensor t({rows, cols});
  for (float& v : t.data) v = static_cast<float>(static_cast<int>(rng() % 33) - 16) / 16.0f;
  return t;
}

std::string lora_merge() {
  std::mt19937_64 rng(105);
  ModelConfig c;
  c.n_layers = 2;
  c.n_heads = 2;
  c.d_model = 64;
  c.d_ff = 128;
  c.vocab_size = 300;
  c.max_context = 32;

  double worst = 0.0;
  for (int trial = 0; trial < 8; ++trial) {
    Model m = fixture::random_model(c, rng());
    if (trial % 4 == 3) m = quantize_weights(m);
    auto targets = default_lora_targets(c);
    if (trial % 2) targets.resize(1);
    const LoraAdapter ad =
        fixture::random_adapter(c, 1 + rng() % 8, static_cast<float>(1 + rng() % 16), rng(), targets);
    const auto toks = random_tokens(rng, 10, c.vocab_size);
    const auto ref = testing::reference_logits(m, toks, &ad);
    Model merged = m;
    merged.weights = merge_lora(m.weights, ad);
    KVCache cache(c);
    const auto got = forward(merged, toks, cache);
    for (std::size_t t = 0; t < toks.size(); ++t)
      for (std::size_t i = 0; i < c.vocab_size; ++i)
        worst = std::max(worst, std::fabs(got[t * c.vocab_size + i] - ref[t][i]));
  }
  expect(worst <= 1e-4, "merged vs dual-path deviation " + fmt(worst));

  const Model m = fixture::random_model(c, 7);
  LoraAdapter zero = fixture::random_adapter(c, 4, 8.0f, 8);
  for (auto& [name, p] : zero.targets) std::fill(p.b.data.begin(), p.b.data.end(), 0.0f);
  expect(merge_lora(m.weights, zero) == m.weights, "zero-B merge changed the weights");

  // Linearity in alpha: the delta scales exactly for arbitrary values, and
  // the merged weights do too whenever the additions are exact.
  const LoraAdapter ad = fixture::random_adapter(c, 3, 5.0f, 9);
  for (const auto& [name, p] : ad.targets) {
    const DenseTensor d1 = lora_delta(p, ad.scale());
    const DenseTensor d2 = lora_delta(p, 2.0f * ad.alpha / static_cast<float>(ad.rank));
    for (std::size_t i = 0; i < d1.data.size(); ++i) expect(d2.data[i] == 2.0f * d1.data[i], "delta not linear");
  }
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t rows = 1 + rng() % 8, cols = 1 + rng() % 8, rank = std::size_t{1} << (rng() % 3);
    ModelWeights base;
    base.set("w", dyadic(rng, rows, cols));
    LoraAdapter a1;
    a1.rank = rank;
    a1.alpha = static_cast<float>(rank) / 2.0f;
    a1.targets["w"] = {dyadic(rng, rank, cols), dyadic(rng, rows, rank)};
    LoraAdapter a2 = a1;
    a2.alpha = 2.0f * a1.alpha;
    const auto& w = base.dense("w").data;
    const auto w1 = merge_lora(base, a1).dense("w").data;
    const auto w2 = merge_lora(base, a2).dense("w").data;
    for (std::size_t i = 0; i < w.size(); ++i) expect(w2[i] - w[i] == 2.0f * (w1[i] - w[i]), "merge not linear");
  }
  return "8 adapters, max |merged - dual path| " + fmt(worst) + "; zero-B identity exact; alpha linearity exact";
}

std::vector<ParseEvent> feed_chunks(const std::vector<std::string>& chunks) {
  ActionParser p;
  std::vector<ParseEvent> out;
  for (const auto& c : chunks) {
    auto ev = p.feed(c);
    out.insert(out.end(), ev.begin(), ev.end());
  }
  auto ev = p.flush();
  out.insert(out.end(), ev.begin(), ev.end());
  return out;
}

std::string actions_grammar() {
  auto single = [](const std::string& text) {
    const auto ev = parse_actions(text);
    expect(ev.size() == 1 && std::holds_alternative<ActionDetected>(ev[0]), "expected one action for " + text);
    return std::get<ActionDetected>(ev[0]).action;
  };
  const Action call = single("<call>John<call>");
  expect(call.kind == ActionKind::Call && call.text == "John" && !call.mismatched_close, "call example");
  const Action search = single("<search>Highest building in the world<search>");
  expect(search.kind == ActionKind::Search && search.text == "Highest building in the world", "search example");
  const Action cal = single("<calendar>2023-05-20T09:00:00/Meeting<calendar>");
  expect(cal.kind == ActionKind::Calendar && cal.text == "Meeting" && cal.when == DateTime{2023, 5, 20, 9, 0, 0},
         "calendar example");
  const auto mm = parse_actions("<call>John Castro<calendar>");
  expect(mm.size() == 2 && std::holds_alternative<ActionDetected>(mm[0]) &&
             std::holds_alternative<ParseWarning>(mm[1]),
         "mismatch example: expected action then warning");
  const Action& a = std::get<ActionDetected>(mm[0]).action;
  expect(a.kind == ActionKind::Call && a.text == "John Castro" && a.mismatched_close == ActionKind::Calendar,
         "mismatch example fields");

  static const std::vector<std::string> frags = {
      "<call>", "<search>", "<calendar>", "<ca", "ll>", "<", ">", "John", " Castro", "Highest building",
      "2023-05-20T09:00:00", "/", "Meeting", " ", "\n", "<human>", "<bot>", "x", "<<", "<cal"};
  const std::vector<std::string> fixed = {"<call>John<call>", "<search>Highest building in the world<search>",
                                          "<calendar>2023-05-20T09:00:00/Meeting<calendar>",
                                          "<call>John Castro<calendar>"};
  std::mt19937_64 rng(106);
  std::size_t divergent = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    std::string s;
    if (trial < 200) {
      s = fixed[trial % fixed.size()];
    } else {
      for (std::size_t i = 0, n = rng() % 24; i < n; ++i) s += frags[rng() % frags.size()];
    }
    std::vector<std::string> chunks;
    for (std::size_t i = 0; i < s.size();) {
      const std::size_t len = std::min<std::size_t>(s.size() - i, rng() % 5);
      chunks.push_back(s.substr(i, len));
      i += len;
    }
    divergent += normalize_events(parse_actions(s)) != normalize_events(feed_chunks(chunks));
  }
  expect(divergent == 0, fmt(divergent) + " of 1000 partitions diverged");
  return "4 worked examples match; 1000 random partitions, 0 divergent";
}

std::string dataset_pipeline() {
  auto samples = [](std::size_t n) {
    std::vector<DialogueSample> out;
    for (std::size_t i = 0; i < n; ++i) {
      out.push_back(DialogueSample{{{Speaker::Human, "q" + std::to_string(i)}, {Speaker::Bot, "a"}}});
    }
    return out;
  };
  const auto all = samples(357);
  const auto [train, eval] = split_dataset(all, 0.9, 42);
  expect(train.size() == 321 && eval.size() == 36,
         "split gave " + fmt(train.size()) + "/" + fmt(eval.size()));
  expect(split_dataset(all, 0.9, 42) == std::pair(train, eval), "split is not deterministic");
  expect(split_dataset(all, 0.9, 43) != std::pair(train, eval), "seed has no effect");
  std::vector<std::string> seen;
  for (const auto* part : {&train, &eval})
    for (const auto& s : *part) seen.push_back(s.turns[0].text);
  std::sort(seen.begin(), seen.end());
  std::vector<std::string> want;
  for (const auto& s : all) want.push_back(s.turns[0].text);
  std::sort(want.begin(), want.end());
  expect(seen == want, "split is not a partition");

  const TokenId eos = Vocab::fixture().eos();
  std::mt19937_64 rng(107);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<TokenSeq> rows(1 + rng() % 6);
    std::size_t total = 0, longest = 0;
    for (auto& r : rows) {
      r = random_tokens(rng, rng() % 20, 256);
      total += r.size();
      longest = std::max(longest, r.size());
    }
    const auto b = pad_batch(rows, eos);
    std::size_t sum = 0;
    for (std::size_t i = 0; i < rows.size(); ++i) {
      expect(b.rows[i].size() == longest, "row width");
      expect(std::equal(rows[i].begin(), rows[i].end(), b.rows[i].begin()), "prefix not preserved");
      expect(std::all_of(b.rows[i].begin() + static_cast<std::ptrdiff_t>(rows[i].size()), b.rows[i].end(),
                         [&](TokenId t) { return t == eos; }),
             "padding is not the pad id");
      expect(b.lengths[i] == rows[i].size(), "length mismatch");
      sum += b.lengths[i];
    }
    expect(sum == total, "lengths do not sum to the token count");
  }
  return "357 -> 321 train / 36 eval; seeded deterministic partition; 300 padded batches hold their invariants";
}

std::string openssl_md5(const std::vector<std::uint8_t>& data) {
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(data.data(), data.size(), out, &len, EVP_md5(), nullptr);
  return to_hex(std::span<const std::uint8_t>(out, len));
}

std::string md5_and_fetch() {
  const std::vector<std::pair<std::string, std::string>> rfc = {
      {"", "d41d8cd98f00b204e9800998ecf8427e"},
      {"a", "0cc175b9c0f1b6a831c399e269772661"},
      {"abc", "900150983cd24fb0d6963f7d28e17f72"},
      {"message digest", "f96b697d7cb7938d525a2f31aaf161d0"},
      {"abcdefghijklmnopqrstuvwxyz", "c3fcd3d76192e4007dfb496cca67e13b"},
      {"ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789", "d174ab98d277d9f5a5611c2c9f419d9f"},
      {"12345678901234567890123456789012345678901234567890123456789012345678901234567890",
       "57edf4a22be3c955ac49da2e2107b67a"}};
  for (const auto& [msg, digest] : rfc) expect(md5_hex(msg) == digest, "RFC vector \"" + msg + "\"");
  std::mt19937_64 rng(108);
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::uint8_t> buf(rng() % 300 + (i % 7 == 0 ? 4096 : 0));
    for (auto& b : buf) b = static_cast<std::uint8_t>(rng());
    expect(md5_hex(std::span<const std::uint8_t>(buf)) == openssl_md5(buf), "random buffer " + fmt(i));
  }

  testing::TempDir tmp;
  const Model m = fixture::random_model(ModelConfig{}, 5);
  write_model(m, tmp.path() / "src.stlm");
  const auto bytes = read_file(tmp.path() / "src.stlm");
  testing::FileServer server;
  server.put("m.stlm", std::string(bytes.begin(), bytes.end()));
  const ModelManifest man{server.url("m.stlm"), bytes.size(), md5_hex(bytes), "m.stlm", 1};
  const fs::path dest = tmp.path() / "models", installed = dest / "m.stlm", part = dest / "m.stlm.part";

  server.set_fault(testing::FileServer::Fault::Corrupt);
  expect(code_of([&] { fetch_model(man, dest); }) == ErrorCode::ChecksumMismatch, "corruption not detected");
  expect(!fs::exists(installed) && !fs::exists(part), "corrupt download left files behind");

  server.set_fault(testing::FileServer::Fault::Truncate, bytes.size() / 3);
  expect(code_of([&] { fetch_model(man, dest); }) == ErrorCode::NetworkError, "truncation not reported");
  expect(!fs::exists(installed) && fs::exists(part), "truncated download must keep only the partial file");
  const auto kept = fs::file_size(part);

  server.set_fault(testing::FileServer::Fault::None);
  const int ranges_before = server.range_requests();
  const FetchResult r = fetch_model(man, dest);
  expect(r.resumed && server.range_requests() == ranges_before + 1, "restart did not resume with a range request");
  expect(r.bytes_downloaded == bytes.size() - kept, "resume re-downloaded kept bytes");
  expect(md5_file(installed.string()) == man.md5_hex && !fs::exists(part), "resumed install is not checksum-valid");
  expect(read_model(installed).model.weights == m.weights, "installed model does not load identically");

  // A damaged installed copy is detected and replaced.
  {
    std::fstream f(installed, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(100);
    f.put('\x5a');
  }
  const FetchResult again = fetch_model(man, dest);
  expect(!again.cache_hit && md5_file(installed.string()) == man.md5_hex, "damaged install not replaced");
  return "7 RFC vectors + 1000 random buffers match OpenSSL; corruption, truncation and resume install only "
         "checksum-valid files";
}

struct Run {
  int code = -1;
  std::string out;
};

Run run_cli(const std::string& args, const fs::path& input = {}) {
  std::string cmd = std::string(STLM_CLI_PATH) + " " + args;
  if (!input.empty()) cmd += " < '" + input.string() + "'";
  cmd += " 2>/dev/null";
  Run r;
  FILE* p = popen(cmd.c_str(), "r");
  if (!p) throw Failure("popen failed");
  char buf[4096];
  std::size_t n;
  while ((n = fread(buf, 1, sizeof buf, p)) > 0) r.out.append(buf, n);
  const int status = pclose(p);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

const char* const kGoldenTranscript =
    "you: Hello there\n"
    "bot: Hello!\n"
    "[done] stop=EndOfText tokens=1\n"
    "you: Please call John.\n"
    "bot: Calling John. \n"
    "[action] call: John\n"
    "[done] stop=EndOfText tokens=5\n"
    "you: What is the highest building in the world?\n"
    "bot: Let me check. \n"
    "[action] search: Highest building in the world\n"
    "[done] stop=EndOfText tokens=10\n"
    "you: Add a meeting on May 20 at 9!\n"
    "bot: Added: \n"
    "[action] calendar: 2023-05-20T09:00:00 Meeting\n"
    "[done] stop=EndOfText tokens=4\n";

std::string end_to_end() {
  testing::TempDir tmp;
  const fs::path build = tmp.path() / "build.stlm";
  Run r = run_cli("make-fixture --script '" + std::string(STLM_DEMO_SCRIPT) + "' '" + build.string() + "'");
  expect(r.code == 0, "make-fixture exited " + fmt(r.code));

  const auto bytes = read_file(build);
  testing::FileServer server;
  server.put("demo.stlm", std::string(bytes.begin(), bytes.end()));
  const ModelManifest man{server.url("demo.stlm"), bytes.size(), md5_hex(bytes), "demo.stlm", 1};
  server.put("manifest.json", manifest_to_json(man).dump());

  const fs::path dest = tmp.path() / "models";
  r = run_cli("download --manifest " + server.url("manifest.json") + " --dest '" + dest.string() + "'");
  expect(r.code == 0, "download exited " + fmt(r.code));
  expect(r.out.find("verified md5 " + man.md5_hex) != std::string::npos, "download did not report verification");
  expect(md5_file((dest / "demo.stlm").string()) == man.md5_hex, "installed file fails its checksum");

  const fs::path script = tmp.path() / "session.txt";
  std::ofstream(script) << "Hello there\nPlease call John.\nWhat is the highest building in the world?\n"
                           "Add a meeting on May 20 at 9!\n/quit\n";
  const fs::path transcript = tmp.path() / "transcript.jsonl";
  r = run_cli("chat --model '" + (dest / "demo.stlm").string() + "' --transcript '" + transcript.string() + "'",
              script);
  expect(r.code == 0, "chat exited " + fmt(r.code));
  expect(r.out == kGoldenTranscript, "transcript differs from golden:\n" + r.out);

  // The persisted transcript agrees: three bot turns, one action of each kind.
  std::ifstream in(transcript);
  std::vector<ActionKind> kinds;
  std::size_t lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const ChatTurn t = turn_from_json(nlohmann::json::parse(line));
    for (const auto& a : t.actions) kinds.push_back(a.kind);
  }
  expect(lines == 8, "transcript has " + fmt(lines) + " lines");
  expect(kinds == std::vector<ActionKind>{ActionKind::Call, ActionKind::Search, ActionKind::Calendar},
         "transcript actions are not one call, one search, one calendar");
  return "fixture served by manifest, downloaded, verified, loaded; 4-turn dialogue matches golden with "
         "call, search and calendar actions";
}

struct Criterion {
  const char* name;
  double budget_s;  // 0: no stated budget
  std::function<std::string()> check;
};

}  // namespace

int main() {
  const std::vector<Criterion> criteria = {
      {"quantization-error-bound", 10, quantization_error_bound},
      {"size-law", 30, size_law},
      {"kernel-parity", 30, kernel_parity},
      {"kv-cache-equivalence", 120, kv_cache_equivalence},
      {"causality-softmax", 0, causality_and_softmax},
      {"lora-merge", 0, lora_merge},
      {"actions-grammar", 10, actions_grammar},
      {"dataset-pipeline", 0, dataset_pipeline},
      {"md5-and-verified-fetch", 0, md5_and_fetch},
      {"end-to-end", 120, end_to_end},
  };
  int failed = 0;
  for (const auto& c : criteria) {
    const auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = c.check();
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (ok && c.budget_s > 0 && secs > c.budget_s) {
      ok = false;
      detail = "took " + fmt(secs) + " s, budget " + fmt(c.budget_s) + " s; " + detail;
    }
    failed += !ok;
    std::ostringstream timing;
    timing << std::fixed << std::setprecision(2) << secs;
    std::cout << (ok ? "PASS " : "FAIL ") << c.name << " [" << timing.str() << " s] " << detail << std::endl;
  }
  std::cout << (criteria.size() - failed) << "/" << criteria.size() << " criteria passed" << std::endl;
  return failed;
}
