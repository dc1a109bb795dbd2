#include "stlm/adapter.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "stlm/error.hpp"
#include "stlm/modelfile.hpp"

namespace stlm {

namespace {

constexpr std::string_view kSuffixA = ".lora_a";
constexpr std::string_view kSuffixB = ".lora_b";

std::string shape_text(const std::vector<std::size_t>& dims) {
  std::string s = "[";
  for (std::size_t i = 0; i < dims.size(); ++i) s += (i ? "x" : "") + std::to_string(dims[i]);
  return s + "]";
}

}  // namespace

void LoraAdapter::validate() const {
  if (rank < 1) fail(ErrorCode::InvalidArgument, "adapter rank must be at least 1");
  if (!std::isfinite(alpha)) fail(ErrorCode::InvalidArgument, "adapter alpha must be finite");
  for (const auto& [name, p] : targets) {
    if (p.a.rank() != 2 || p.b.rank() != 2 || p.a.rows() != rank || p.b.cols() != rank) {
      fail(ErrorCode::ShapeError, "adapter pair for " + name + " has shapes A" + shape_text(p.a.dims) +
                                      " B" + shape_text(p.b.dims) + ", expected rank " + std::to_string(rank));
    }
  }
}

std::vector<std::string> default_lora_targets(const ModelConfig& config) {
  std::vector<std::string> out;
  for (std::size_t l = 0; l < config.n_layers; ++l) out.push_back(names::layer(l, names::kQkvWeight));
  return out;
}

DenseTensor lora_delta(const LoraPair& pair, float scale) {
  const std::size_t rows = pair.b.rows(), rank = pair.b.cols(), cols = pair.a.cols();
  DenseTensor d({rows, cols});
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < cols; ++j) {
      float acc = 0.0f;
      for (std::size_t k = 0; k < rank; ++k) acc += pair.b.data[i * rank + k] * pair.a.data[k * cols + j];
      d.data[i * cols + j] = scale * acc;
    }
  }
  return d;
}

ModelWeights merge_lora(const ModelWeights& base, const LoraAdapter& adapter) {
  adapter.validate();
  ModelWeights out = base;
  for (const auto& [name, pair] : adapter.targets) {
    if (!base.contains(name)) fail(ErrorCode::MissingTensor, "adapter target " + name + " is not in the base model");
    DenseTensor w = to_dense(base.get(name));
    if (w.rank() != 2 || pair.b.rows() != w.rows() || pair.a.cols() != w.cols()) {
      fail(ErrorCode::ShapeError, "adapter pair for " + name + " (A" + shape_text(pair.a.dims) + ", B" +
                                      shape_text(pair.b.dims) + ") does not fit " + shape_text(w.dims));
    }
    const DenseTensor delta = lora_delta(pair, adapter.scale());
    for (std::size_t i = 0; i < w.data.size(); ++i) w.data[i] += delta.data[i];
    out.set(name, std::move(w));
  }
  return out;
}

void write_adapter(const LoraAdapter& adapter, const ModelConfig& base_config,
                   const std::filesystem::path& path) {
  adapter.validate();
  Container c;
  c.header.kind = FileKind::Adapter;
  c.header.config = base_config;
  c.header.lora_rank = static_cast<std::uint32_t>(adapter.rank);
  c.header.lora_alpha = adapter.alpha;
  for (const auto& [name, p] : adapter.targets) {
    for (const auto& [suffix, t] : {std::pair{kSuffixA, &p.a}, std::pair{kSuffixB, &p.b}}) {
      const std::string full = name + std::string(suffix);
      c.tensors.emplace_back(full, *t);
      c.dtypes.emplace(full, Dtype::F32);
    }
  }
  const auto bytes = serialize_container(c);
  write_file_atomic(path, bytes);
}

LoraAdapter read_adapter(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Container c = parse_container(bytes);
  if (c.header.kind != FileKind::Adapter) fail(ErrorCode::FormatError, path.string() + " is not an adapter file");
  LoraAdapter out;
  out.rank = c.header.lora_rank;
  out.alpha = c.header.lora_alpha;
  std::map<std::string, int> seen;
  for (auto& [name, t] : c.tensors) {
    if (is_quantized(t)) fail(ErrorCode::FormatError, "adapter tensor " + name + " must be dense");
    const bool is_a = name.ends_with(kSuffixA), is_b = name.ends_with(kSuffixB);
    if (!is_a && !is_b) fail(ErrorCode::FormatError, "unexpected adapter tensor " + name);
    const std::string target = name.substr(0, name.size() - kSuffixA.size());
    LoraPair& p = out.targets[target];
    (is_a ? p.a : p.b) = std::get<DenseTensor>(std::move(t));
    seen[target] |= is_a ? 1 : 2;
  }
  for (const auto& [target, mask] : seen) {
    if (mask != 3) fail(ErrorCode::FormatError, "adapter target " + target + " lacks one of its matrices");
  }
  out.validate();
  return out;
}

std::string_view to_string(Speaker s) { return s == Speaker::Human ? "human" : "bot"; }

void DialogueSample::validate() const {
  if (turns.empty()) fail(ErrorCode::InvalidValue, "dialogue has no turns");
  for (std::size_t i = 0; i < turns.size(); ++i) {
    const Speaker want = i % 2 == 0 ? Speaker::Human : Speaker::Bot;
    if (turns[i].speaker != want) {
      fail(ErrorCode::InvalidValue, "turn " + std::to_string(i) + " should be " + std::string(to_string(want)));
    }
  }
}

std::string render_turns(std::span<const Turn> turns) {
  std::string out;
  for (const Turn& t : turns) {
    out += t.speaker == Speaker::Human ? special::kHuman : special::kBot;
    out += ": ";
    out += t.text;
    out += '\n';
  }
  return out;
}

std::string render_dialogue(const DialogueSample& sample) {
  sample.validate();
  return render_turns(sample.turns) + std::string(special::kEndOfText);
}

PaddedBatch pad_batch(std::span<const TokenSeq> samples, TokenId pad_id) {
  if (samples.empty()) fail(ErrorCode::InvalidValue, "cannot pad an empty batch");
  std::size_t longest = 0;
  for (const auto& s : samples) longest = std::max(longest, s.size());
  PaddedBatch out;
  out.pad_id = pad_id;
  for (const auto& s : samples) {
    out.lengths.push_back(s.size());
    TokenSeq row = s;
    row.resize(longest, pad_id);
    out.rows.push_back(std::move(row));
  }
  return out;
}

std::pair<std::vector<DialogueSample>, std::vector<DialogueSample>> split_dataset(
    std::vector<DialogueSample> samples, double train_fraction, std::uint64_t seed) {
  const std::size_t n = samples.size();
  if (n < 2) fail(ErrorCode::TooFewSamples, "need at least two samples to split, got " + std::to_string(n));
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    fail(ErrorCode::InvalidArgument, "train fraction must lie strictly between 0 and 1");
  }
  // Spelled out rather than std::shuffle, whose algorithm varies between
  // standard libraries.
  std::mt19937_64 rng(seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const std::uint64_t bound = i + 1;
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
    std::uint64_t r;
    do r = rng();
    while (r >= limit);
    std::swap(samples[i], samples[r % bound]);
  }
  const auto cut = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(n)));
  std::vector<DialogueSample> eval(std::make_move_iterator(samples.begin() + static_cast<std::ptrdiff_t>(cut)),
                                   std::make_move_iterator(samples.end()));
  samples.resize(cut);
  return {std::move(samples), std::move(eval)};
}

nlohmann::json sample_to_json(const DialogueSample& s) {
  nlohmann::json turns = nlohmann::json::array();
  for (const Turn& t : s.turns) turns.push_back({{"speaker", to_string(t.speaker)}, {"text", t.text}});
  return {{"turns", turns}};
}

DialogueSample sample_from_json(const nlohmann::json& j) {
  DialogueSample s;
  try {
    for (const auto& t : j.at("turns")) {
      const auto speaker = t.at("speaker").get<std::string>();
      if (speaker != "human" && speaker != "bot") fail(ErrorCode::FormatError, "unknown speaker " + speaker);
      s.turns.push_back({speaker == "human" ? Speaker::Human : Speaker::Bot, t.at("text").get<std::string>()});
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::FormatError, e.what());
  }
  try {
    s.validate();
  } catch (const Error& e) {
    fail(ErrorCode::FormatError, e.what());
  }
  return s;
}

std::vector<DialogueSample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot open " + path.string());
  std::vector<DialogueSample> out;
  std::string line;
  for (std::size_t n = 1; std::getline(in, line); ++n) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(sample_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      fail(ErrorCode::FormatError, path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

void write_dataset(const std::filesystem::path& path, std::span<const DialogueSample> samples) {
  std::string text;
  for (const auto& s : samples) text += sample_to_json(s).dump() + "\n";
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace stlm
