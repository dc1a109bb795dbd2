// stlm: operator tool for model files, adapters, downloads and offline chat.
//
// Exit codes: 0 success, 1 usage, 2 I/O or network, 3 format or checksum,
// 4 shape.

#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <mutex>
#include <random>
#include <sstream>

#include "CLI11.hpp"
#include "stlm/actions.hpp"
#include "stlm/adapter.hpp"
#include "stlm/chat.hpp"
#include "stlm/error.hpp"
#include "stlm/fetch.hpp"
#include "stlm/fixture.hpp"
#include "stlm/md5.hpp"
#include "stlm/modelfile.hpp"

using namespace stlm;
namespace fs = std::filesystem;

namespace {

enum Exit { kOk = 0, kUsage = 1, kIo = 2, kFormat = 3, kShape = 4 };

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::IoError:
    case ErrorCode::NetworkError:
    case ErrorCode::DiskFull:
      return kIo;
    case ErrorCode::FormatError:
    case ErrorCode::CorruptFile:
    case ErrorCode::ChecksumMismatch:
    case ErrorCode::AlreadyQuantized:
    case ErrorCode::MalformedCalendar:
    case ErrorCode::BadDateTime:
      return kFormat;
    case ErrorCode::ShapeError:
    case ErrorCode::MissingTensor:
      return kShape;
    default:
      return kUsage;
  }
}

Dtype parse_dense_dtype(const std::string& s) {
  if (s == "f32") return Dtype::F32;
  if (s == "f16") return Dtype::F16;
  fail(ErrorCode::InvalidArgument, "dtype must be f32 or f16");
}

std::string dims_text(const std::vector<std::size_t>& dims) {
  std::string s;
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorCode::FormatError, path + ": " + e.what());
  }
}

std::string describe(const Action& a) {
  std::string s = "[action] " + std::string(to_string(a.kind)) + ": ";
  if (a.kind == ActionKind::Calendar && a.when) s += a.when->to_iso() + " ";
  s += a.text;
  if (a.mismatched_close) {
    s += " (closed by " + std::string(tag_literal(*a.mismatched_close)) + "; confirm before acting)";
  }
  return s;
}

// quantize ------------------------------------------------------------------

struct QuantizeOpts {
  std::string in, out;
};

int run_quantize(const QuantizeOpts& o, bool json) {
  const SizeReport r = quantize_model(o.in, o.out);
  if (json) {
    nlohmann::json rows = nlohmann::json::array();
    for (const auto& t : r.tensors) {
      rows.push_back({{"name", t.name},
                      {"dims", t.dims},
                      {"before", to_string(t.before)},
                      {"after", to_string(t.after)},
                      {"bytes_before", t.bytes_before},
                      {"bytes_after", t.bytes_after}});
    }
    std::cout << nlohmann::json{{"input", o.in},
                                {"output", o.out},
                                {"before_bytes", r.before_bytes},
                                {"after_bytes", r.after_bytes},
                                {"ratio", r.ratio},
                                {"tensors", rows}}
                     .dump(2)
              << "\n";
    return kOk;
  }
  std::cout << std::left << std::setw(28) << "tensor" << std::setw(12) << "dims" << std::setw(14) << "before"
            << "after\n";
  for (const auto& t : r.tensors) {
    std::cout << std::setw(28) << t.name << std::setw(12) << dims_text(t.dims) << std::setw(14)
              << (std::string(to_string(t.before)) + " " + std::to_string(t.bytes_before))
              << to_string(t.after) << " " << t.bytes_after << "\n";
  }
  std::cout << "before: " << r.before_bytes << " bytes\n"
            << "after:  " << r.after_bytes << " bytes\n"
            << "ratio:  " << std::fixed << std::setprecision(6) << r.ratio << "\n"
            << std::defaultfloat << std::setprecision(4) << "reference full-size model: " << kReferenceF16Gb << " GB -> " << kReferenceQ4Gb
            << " GB, ratio " << kReferenceQ4Gb / kReferenceF16Gb << "\n";
  return kOk;
}

// merge-lora ------------------------------------------------------------------

struct MergeOpts {
  std::string base, adapter, out, dtype = "f32";
};

int run_merge(const MergeOpts& o) {
  LoadedModel base = read_model(o.base);
  const LoraAdapter adapter = read_adapter(o.adapter);
  base.model.weights = merge_lora(base.model.weights, adapter);
  const FileSummary s = write_model(base.model, o.out, parse_dense_dtype(o.dtype));
  std::cout << "merged " << adapter.targets.size() << " target(s), rank " << adapter.rank << ", alpha "
            << adapter.alpha << "\nwrote " << o.out << " (" << s.file_bytes << " bytes)\n";
  return kOk;
}

// make-adapter ------------------------------------------------------------------

struct MakeAdapterOpts {
  std::string base, out;
  std::size_t rank = 4;
  float alpha = 8.0f;
  std::uint64_t seed = 0;
  std::vector<std::string> targets;
  bool zero_b = false;
};

int run_make_adapter(const MakeAdapterOpts& o) {
  const LoadedModel base = read_model(o.base);
  LoraAdapter a = fixture::random_adapter(base.model.config, o.rank, o.alpha, o.seed, o.targets);
  if (o.zero_b) {
    for (auto& [name, p] : a.targets) std::fill(p.b.data.begin(), p.b.data.end(), 0.0f);
  }
  write_adapter(a, base.model.config, o.out);
  std::cout << "wrote " << o.out << " (" << a.targets.size() << " target(s), rank " << a.rank << ")\n";
  return kOk;
}

// download ------------------------------------------------------------------

struct DownloadOpts {
  std::string manifest, dest;
};

class ProgressBar {
 public:
  void update(std::uint64_t done, std::uint64_t total) {
    const int pct = total ? static_cast<int>(done * 100 / total) : 100;
    if (pct == last_) return;
    last_ = pct;
    const int filled = pct * 30 / 100;
    std::cerr << "\r[" << std::string(filled, '#') << std::string(30 - filled, ' ') << "] " << std::setw(3) << pct
              << "% " << done << "/" << total << " bytes" << std::flush;
    shown_ = true;
  }
  void finish() {
    if (shown_) std::cerr << "\n";
    shown_ = false;
  }

 private:
  int last_ = -1;
  bool shown_ = false;
};

int run_download(const DownloadOpts& o) {
  const ModelManifest m = load_manifest(o.manifest);
  ProgressBar bar;
  FetchCallbacks cb;
  // A verification before any transfer is the check of an installed copy.
  bool transferred = false, checking_cache = false;
  cb.progress = [&](std::uint64_t done, std::uint64_t total) {
    if (checking_cache) return;
    transferred = true;
    bar.update(done, total);
  };
  cb.verifying = [&] {
    bar.finish();
    checking_cache = !transferred;
    std::cerr << (checking_cache ? "checking installed copy...\n" : "verifying md5...\n");
  };
  FetchResult r;
  try {
    r = fetch_model(m, o.dest, cb);
  } catch (...) {
    bar.finish();
    throw;
  }
  bar.finish();
  if (r.cache_hit) {
    std::cout << r.path.string() << ": verified, skipping\n";
  } else {
    std::cout << "downloaded " << r.bytes_downloaded << " bytes" << (r.resumed ? " (resumed)" : "") << "\n"
              << "verified md5 " << m.md5_hex << "\ninstalled " << r.path.string() << "\n";
  }
  return kOk;
}

// chat ------------------------------------------------------------------

struct ChatOpts {
  std::string model;
  std::string transcript;
  float temperature = 0.0f;
  std::size_t top_k = 0;
  std::uint64_t seed = 0;
  std::size_t max_tokens = 0;
  std::size_t reserve = kDefaultGenerationReserve;
  bool wait = false;
  bool no_wait = false;
};

class ReplPrinter {
 public:
  void line(const std::string& s) {
    std::lock_guard<std::mutex> lock(mutex_);
    end_line();
    std::cout << s << "\n" << std::flush;
  }
  void begin_reply() {
    std::lock_guard<std::mutex> lock(mutex_);
    end_line();
    std::cout << "bot: " << std::flush;
    mid_line_ = true;
  }
  void event(const ParseEvent& e) {
    std::lock_guard<std::mutex> lock(mutex_);
    if (const auto* t = std::get_if<TextDelta>(&e)) {
      if (!mid_line_) std::cout << "bot: ";
      std::cout << t->text << std::flush;
      mid_line_ = !t->text.ends_with('\n');
    } else if (const auto* a = std::get_if<ActionDetected>(&e)) {
      end_line();
      std::cout << describe(a->action) << "\n" << std::flush;
    } else {
      end_line();
      std::cout << "[warning] " << std::get<ParseWarning>(e).reason << "\n" << std::flush;
    }
  }

 private:
  void end_line() {
    if (mid_line_) std::cout << "\n";
    mid_line_ = false;
  }

  std::mutex mutex_;
  bool mid_line_ = false;
};

int run_chat(const ChatOpts& o) {
  auto model = std::make_shared<const Model>(read_model(o.model).model);
  ChatSettings settings;
  settings.sampler = {o.temperature, o.top_k, o.seed};
  settings.max_new_tokens = o.max_tokens;
  settings.generation_reserve = o.reserve;
  std::optional<fs::path> transcript;
  if (!o.transcript.empty()) transcript = o.transcript;
  ChatSession session(model, settings, transcript);

  const bool interactive = isatty(STDIN_FILENO);
  // Scripts wait for each reply so their output is reproducible.
  const bool wait_each = o.wait || (!o.no_wait && !interactive);
  ReplPrinter out;
  if (interactive) out.line("stlm chat: /cancel stops a reply, /reset clears history, /quit exits");

  std::future<TurnResult> pending;
  ChatObserver obs;
  obs.on_event = [&](const ParseEvent& e) { out.event(e); };
  obs.on_done = [&](const TurnResult& r) {
    out.line("[done] stop=" + std::string(to_string(r.stop)) + " tokens=" + std::to_string(r.token_count));
  };
  obs.on_error = [&](std::exception_ptr err) {
    try {
      std::rethrow_exception(err);
    } catch (const std::exception& e) {
      out.line(std::string("[error] ") + e.what());
    }
  };

  std::string line;
  while (std::getline(std::cin, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (line == "/quit") break;
    if (line == "/cancel") {
      try {
        session.cancel();
      } catch (const Error&) {
        out.line("[info] nothing to cancel");
      }
      continue;
    }
    if (line == "/reset") {
      try {
        session.reset();
        out.line("[info] history cleared");
      } catch (const Error&) {
        out.line("[busy] a reply is in progress; wait or /cancel");
      }
      continue;
    }
    if (line.starts_with("/")) {
      out.line("[error] unknown command " + line);
      continue;
    }
    try {
      if (!interactive) out.line("you: " + line);
      auto f = session.submit(line, obs);
      out.begin_reply();
      pending = std::move(f);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::Busy) throw;
      out.line("[busy] a reply is in progress; wait or /cancel");
      continue;
    }
    if (wait_each) pending.wait();
  }
  if (session.busy() && line == "/quit") {
    try {
      session.cancel();
    } catch (const Error&) {
    }
  }
  if (pending.valid()) pending.wait();
  return kOk;
}

// replay ------------------------------------------------------------------

struct ReplayOpts {
  std::string file;
  std::size_t fuzz = 0;
  std::uint64_t seed = 1;
  std::size_t cap = kDefaultPayloadCap;
};

// One recorded chunk per line, each a JSON string.
std::vector<std::string> read_chunks(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path);
  std::vector<std::string> chunks;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      if (!j.is_string()) fail(ErrorCode::FormatError, "not a string");
      chunks.push_back(j.get<std::string>());
    } catch (const std::exception& e) {
      fail(ErrorCode::FormatError, path + ":" + std::to_string(n) + ": each line must be a JSON string");
    }
  }
  return chunks;
}

int run_replay(const ReplayOpts& o, bool json) {
  const auto chunks = read_chunks(o.file);
  ActionParser parser(o.cap);
  std::vector<ParseEvent> events;
  for (const auto& c : chunks) {
    auto ev = parser.feed(c);
    events.insert(events.end(), ev.begin(), ev.end());
  }
  auto tail = parser.flush();
  events.insert(events.end(), tail.begin(), tail.end());

  std::size_t actions = 0, warnings = 0;
  for (const auto& e : events) {
    if (json) {
      std::cout << event_to_json(e).dump() << "\n";
    } else if (const auto* t = std::get_if<TextDelta>(&e)) {
      std::cout << "text " << nlohmann::json(t->text).dump() << "\n";
    } else if (const auto* a = std::get_if<ActionDetected>(&e)) {
      std::cout << describe(a->action) << "\n";
    } else {
      const auto& w = std::get<ParseWarning>(e);
      std::cout << "[warning] " << w.reason << " " << nlohmann::json(w.raw_span).dump() << "\n";
    }
    actions += std::holds_alternative<ActionDetected>(e);
    warnings += std::holds_alternative<ParseWarning>(e);
  }

  if (o.fuzz > 0) {
    std::string text;
    for (const auto& c : chunks) text += c;
    const auto reference = normalize_events(events);
    std::mt19937_64 rng(o.seed);
    std::size_t divergent = 0;
    for (std::size_t trial = 0; trial < o.fuzz; ++trial) {
      ActionParser p(o.cap);
      std::vector<ParseEvent> ev;
      for (std::size_t i = 0; i < text.size();) {
        const std::size_t len = std::min<std::size_t>(text.size() - i, 1 + rng() % 8);
        auto part = p.feed(std::string_view(text).substr(i, len));
        ev.insert(ev.end(), part.begin(), part.end());
        i += len;
      }
      auto rest = p.flush();
      ev.insert(ev.end(), rest.begin(), rest.end());
      divergent += normalize_events(std::move(ev)) != reference;
    }
    std::cerr << "fuzz: " << o.fuzz << " random partitions, " << divergent << " divergent\n";
    if (divergent) return kFormat;
  }
  std::cerr << actions << " action(s), " << warnings << " warning(s)\n";
  return kOk;
}

// make-fixture ------------------------------------------------------------------

struct FixtureOpts {
  std::string config, script, out, dtype = "f32";
  std::uint64_t seed = 0;
};

int run_make_fixture(const FixtureOpts& o) {
  ModelConfig config;
  if (!o.config.empty()) {
    try {
      config = fixture::config_from_json(read_json_file(o.config));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::FormatError, o.config + ": " + e.what());
    }
  }
  Model m;
  if (o.script.empty()) {
    m = fixture::random_model(config, o.seed);
  } else {
    try {
      m = fixture::scripted_model(config, fixture::script_from_json(read_json_file(o.script)));
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::FormatError, o.script + ": " + e.what());
    }
  }
  const FileSummary s = write_model(m, o.out, parse_dense_dtype(o.dtype));
  std::cout << "wrote " << o.out << " (" << s.file_bytes << " bytes, " << s.table.size() << " tensors)\n";
  return kOk;
}

// inspect ------------------------------------------------------------------

int run_inspect(const std::string& path, bool json) {
  const auto bytes = read_file(path);
  FileSummary summary;
  const Container c = parse_container(bytes, &summary);
  const auto& h = c.header;
  const bool adapter = h.kind == FileKind::Adapter;
  std::size_t vocab_entries = 0, specials = 0;
  if (!h.vocab_text.empty()) {
    const Vocab v = Vocab::from_text(h.vocab_text);
    vocab_entries = v.size();
    specials = v.specials().size();
  }
  if (json) {
    nlohmann::json tensors = nlohmann::json::array();
    for (const auto& t : summary.table) {
      tensors.push_back({{"name", t.name}, {"dtype", to_string(t.dtype)}, {"dims", t.dims}, {"offset", t.offset},
                         {"length", t.length}});
    }
    nlohmann::json by_dtype = nlohmann::json::object();
    for (const auto& [dt, n] : summary.bytes_by_dtype) by_dtype[std::string(to_string(dt))] = n;
    nlohmann::json out = {{"file", path},
                          {"kind", adapter ? "adapter" : "model"},
                          {"format_version", kFormatVersion},
                          {"file_bytes", summary.file_bytes},
                          {"md5", md5_hex(bytes)},
                          {"config", fixture::config_to_json(h.config)},
                          {"vocab_entries", vocab_entries},
                          {"tensors", tensors},
                          {"bytes_by_dtype", by_dtype}};
    out["lora"] = adapter ? nlohmann::json{{"rank", h.lora_rank}, {"alpha", h.lora_alpha}} : nlohmann::json();
    std::cout << out.dump(2) << "\n";
    return kOk;
  }
  const ModelConfig& k = h.config;
  std::cout << "file:    " << path << "\n"
            << "kind:    " << (adapter ? "adapter" : "model") << ", format version " << kFormatVersion << "\n"
            << "size:    " << summary.file_bytes << " bytes, md5 " << md5_hex(bytes) << "\n"
            << "config:  n_layers=" << k.n_layers << " n_heads=" << k.n_heads << " d_model=" << k.d_model
            << " d_ff=" << k.d_ff << " vocab_size=" << k.vocab_size << " max_context=" << k.max_context
            << " rotary_fraction=" << k.rotary_fraction << " layernorm_eps=" << k.layernorm_eps
            << " rope_base=" << k.rope_base << "\n";
  if (adapter) std::cout << "lora:    rank=" << h.lora_rank << " alpha=" << h.lora_alpha << "\n";
  if (vocab_entries) std::cout << "vocab:   " << vocab_entries << " entries, " << specials << " specials\n";
  std::cout << "tensors: " << summary.table.size() << "\n";
  std::size_t width = 0;
  for (const auto& t : summary.table) width = std::max(width, t.name.size());
  for (const auto& t : summary.table) {
    std::cout << "  " << std::left << std::setw(static_cast<int>(width + 2)) << t.name << std::setw(5) << to_string(t.dtype) << std::setw(12)
              << dims_text(t.dims) << " offset " << std::setw(10) << t.offset << " length " << t.length << "\n";
  }
  for (const auto& [dt, n] : summary.bytes_by_dtype) std::cout << to_string(dt) << " payload: " << n << " bytes\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stlm: quantize, merge, download, inspect and chat with STLM model files"};
  app.require_subcommand(1);
  bool json = false;

  QuantizeOpts q;
  auto* quantize = app.add_subcommand("quantize", "Convert a 16/32-bit model to 4-bit blocks");
  quantize->add_option("in", q.in, "Source model")->required();
  quantize->add_option("out", q.out, "Output model")->required();
  quantize->add_flag("--json", json, "Machine-readable report");

  MergeOpts mg;
  auto* merge = app.add_subcommand("merge-lora", "Fold a LoRA adapter into a base model");
  merge->add_option("base", mg.base, "Base model")->required();
  merge->add_option("adapter", mg.adapter, "Adapter file")->required();
  merge->add_option("out", mg.out, "Output model")->required();
  merge->add_option("--dtype", mg.dtype, "Dense storage: f32 or f16")->capture_default_str();

  MakeAdapterOpts ma;
  auto* make_adapter = app.add_subcommand("make-adapter", "Write a seeded random LoRA adapter for a model");
  make_adapter->add_option("--base", ma.base, "Model whose shapes the adapter fits")->required();
  make_adapter->add_option("--rank", ma.rank)->capture_default_str();
  make_adapter->add_option("--alpha", ma.alpha)->capture_default_str();
  make_adapter->add_option("--seed", ma.seed)->capture_default_str();
  make_adapter->add_option("--target", ma.targets, "Tensor to adapt (repeatable; default every QKV weight)");
  make_adapter->add_flag("--zero-b", ma.zero_b, "Zero the B matrices (identity adapter)");
  make_adapter->add_option("out", ma.out)->required();

  DownloadOpts dl;
  auto* download = app.add_subcommand("download", "Fetch and verify a model described by a manifest");
  download->add_option("--manifest", dl.manifest, "Manifest path or http:// URL")->required();
  download->add_option("--dest", dl.dest, "Destination directory")->required();

  ChatOpts ch;
  auto* chat = app.add_subcommand("chat", "Interactive chat with a model");
  chat->add_option("--model", ch.model, "Model file")->required();
  chat->add_option("--transcript", ch.transcript, "JSON-lines transcript to load and append to");
  chat->add_option("--temperature", ch.temperature)->capture_default_str();
  chat->add_option("--top-k", ch.top_k)->capture_default_str();
  chat->add_option("--seed", ch.seed)->capture_default_str();
  chat->add_option("--max-tokens", ch.max_tokens, "Per-reply token cap, 0 for none")->capture_default_str();
  chat->add_option("--reserve", ch.reserve, "Context tokens kept free for the reply")->capture_default_str();
  auto* wait_flag = chat->add_flag("--wait", ch.wait, "Finish each reply before reading the next line");
  chat->add_flag("--no-wait", ch.no_wait, "Keep reading input while a reply streams")->excludes(wait_flag);

  ReplayOpts rp;
  auto* replay = app.add_subcommand("replay", "Run recorded text chunks through the action parser");
  replay->add_option("file", rp.file, "One JSON string per line")->required();
  replay->add_option("--fuzz", rp.fuzz, "Also re-split the text N random ways and compare")->capture_default_str();
  replay->add_option("--seed", rp.seed)->capture_default_str();
  replay->add_option("--payload-cap", rp.cap)->capture_default_str();
  replay->add_flag("--json", json, "One event object per line");

  FixtureOpts fx;
  auto* make_fixture = app.add_subcommand("make-fixture", "Write a deterministic synthetic model");
  make_fixture->add_option("--config", fx.config, "Config JSON (defaults for missing fields)");
  make_fixture->add_option("--seed", fx.seed)->capture_default_str();
  make_fixture->add_option("--script", fx.script, "Reply script JSON; builds a scripted model");
  make_fixture->add_option("--dtype", fx.dtype, "Dense storage: f32 or f16")->capture_default_str();
  make_fixture->add_option("out", fx.out)->required();

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Print a model or adapter header and tensor table");
  inspect->add_option("file", inspect_path)->required();
  inspect->add_flag("--json", json, "Machine-readable output");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*quantize) return run_quantize(q, json);
    if (*merge) return run_merge(mg);
    if (*make_adapter) return run_make_adapter(ma);
    if (*download) return run_download(dl);
    if (*chat) return run_chat(ch);
    if (*replay) return run_replay(rp, json);
    if (*make_fixture) return run_make_fixture(fx);
    if (*inspect) return run_inspect(inspect_path, json);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << " [" << to_string(e.code()) << "]\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kIo;
  }
  return kUsage;
}
