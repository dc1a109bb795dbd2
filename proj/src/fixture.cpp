#include "stlm/fixture.hpp"

#include <bit>
#include <cmath>
#include <map>

#include "stlm/error.hpp"

namespace stlm::fixture {
namespace {

// Portable uniform [lo, hi) from the top 24 bits of a 64-bit draw.
class Uniform {
 public:
  explicit Uniform(std::uint64_t seed) : rng_(seed) {}
  float next(float lo, float hi) {
    const float u = static_cast<float>(rng_() >> 40) * 0x1.0p-24f;
    return lo + (hi - lo) * u;
  }

 private:
  std::mt19937_64 rng_;
};

DenseTensor filled(std::vector<std::size_t> dims, Uniform& u, float lo, float hi) {
  DenseTensor t(std::move(dims));
  for (float& v : t.data) v = u.next(lo, hi);
  return t;
}

// Sylvester Hadamard row: entry j of row i is (-1)^popcount(i & j).
float hadamard(std::size_t i, std::size_t j) {
  return (std::popcount(i & j) & 1) ? -1.0f : 1.0f;
}

}  // namespace

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.n_layers = j.value("n_layers", c.n_layers);
  c.n_heads = j.value("n_heads", c.n_heads);
  c.d_model = j.value("d_model", c.d_model);
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.max_context = j.value("max_context", c.max_context);
  c.d_ff = j.value("d_ff", 4 * c.d_model);
  c.rotary_fraction = j.value("rotary_fraction", c.rotary_fraction);
  c.layernorm_eps = j.value("layernorm_eps", c.layernorm_eps);
  c.rope_base = j.value("rope_base", c.rope_base);
  c.validate();
  return c;
}

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},       {"n_heads", c.n_heads},
          {"d_model", c.d_model},         {"vocab_size", c.vocab_size},
          {"max_context", c.max_context}, {"d_ff", c.d_ff},
          {"rotary_fraction", c.rotary_fraction}, {"layernorm_eps", c.layernorm_eps},
          {"rope_base", c.rope_base}};
}

LoraAdapter random_adapter(const ModelConfig& config, std::size_t rank, float alpha,
                           std::uint64_t seed, std::vector<std::string> targets) {
  if (targets.empty()) targets = default_lora_targets(config);
  std::map<std::string, std::vector<std::size_t>> shapes;
  for (auto& [name, dims] : expected_tensors(config)) shapes[name] = dims;
  LoraAdapter out;
  out.rank = rank;
  out.alpha = alpha;
  Uniform u(seed);
  for (const auto& name : targets) {
    const auto it = shapes.find(name);
    if (it == shapes.end() || it->second.size() != 2) fail(ErrorCode::MissingTensor, "no 2-D tensor named " + name);
    const auto [rows, cols] = std::pair{it->second[0], it->second[1]};
    const float a = std::sqrt(3.0f / static_cast<float>(cols));
    out.targets[name] = {filled({rank, cols}, u, -a, a), filled({rows, rank}, u, -0.2f, 0.2f)};
  }
  out.validate();
  return out;
}

Model random_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.d_model % kBlockSize != 0 || config.d_ff % kBlockSize != 0) {
    fail(ErrorCode::ShapeError, "fixture dims d_model and d_ff must be multiples of 32");
  }
  Model m{config, {}, Vocab::fixture(config.vocab_size)};
  if (m.vocab.size() != config.vocab_size) {
    fail(ErrorCode::InvalidArgument, "vocab_size must be at least 262 for the fixture vocabulary");
  }
  Uniform u(seed);
  for (const auto& [name, dims] : expected_tensors(config)) {
    if (dims.size() == 1) {
      const bool gain = name.ends_with("ln1.weight") || name.ends_with("ln2.weight") ||
                        name == names::kFinalNormWeight;
      m.weights.set(name, gain ? filled(dims, u, 0.9f, 1.1f) : filled(dims, u, -0.1f, 0.1f));
    } else if (name == names::kEmbed) {
      m.weights.set(name, filled(dims, u, -1.0f, 1.0f));
    } else {
      const float a = std::sqrt(3.0f / static_cast<float>(dims[1]));
      m.weights.set(name, filled(dims, u, -a, a));
    }
  }
  return m;
}

std::vector<std::string> split_pieces(const std::string& text) {
  static const std::string_view kTags[] = {special::kCall, special::kSearch, special::kCalendar,
                                           special::kHuman, special::kBot, special::kEndOfText};
  std::vector<std::string> out;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) out.push_back(std::move(cur));
    cur.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    bool tag = false;
    for (std::string_view t : kTags) {
      if (text.compare(i, t.size(), t) == 0) {
        flush();
        out.emplace_back(t);
        i += t.size();
        tag = true;
        break;
      }
    }
    if (tag) continue;
    cur.push_back(text[i]);
    if (text[i] == ' ') flush();
    ++i;
  }
  flush();
  return out;
}

Script script_from_json(const nlohmann::json& j) {
  auto pieces_of = [](const nlohmann::json& reply) {
    if (reply.is_string()) return split_pieces(reply.get<std::string>());
    return reply.get<std::vector<std::string>>();
  };
  Script s;
  for (const auto& r : j.at("rules")) {
    const std::string trigger = r.at("trigger").get<std::string>();
    if (trigger.size() != 1) fail(ErrorCode::InvalidArgument, "script trigger must be one byte");
    s.rules.push_back({trigger[0], pieces_of(r.at("reply")), r.value("loop", false)});
  }
  if (j.contains("fallback")) s.fallback = pieces_of(j.at("fallback"));
  return s;
}

Model scripted_model(const ModelConfig& config, const Script& script) {
  config.validate();
  const std::size_t d = config.d_model;
  if (std::popcount(d) != 1 || d % kBlockSize != 0) {
    fail(ErrorCode::InvalidArgument, "scripted fixture needs a power-of-two d_model >= 32");
  }

  Model m{config, {}, Vocab::fixture()};
  const TokenId colon = m.vocab.byte_id(':');
  const TokenId eos = m.vocab.eos();

  // Each designated token owns one zero-mean Hadamard row (row 0 is all ones).
  std::map<TokenId, std::size_t> row_of;
  auto designate = [&](TokenId id) {
    if (row_of.contains(id)) return;
    if (row_of.size() + 1 >= d) fail(ErrorCode::InvalidArgument, "script too long for d_model");
    row_of.emplace(id, row_of.size() + 1);
  };
  designate(colon);

  struct Chain {
    std::vector<TokenId> ids;
    bool loop;
  };
  auto add_chain = [&](const std::vector<std::string>& pieces, bool loop) {
    Chain c{{}, loop};
    for (const std::string& p : pieces) {
      c.ids.push_back(m.vocab.add_piece(p));
      designate(c.ids.back());
    }
    return c;
  };

  std::vector<std::pair<TokenId, Chain>> rules;
  for (const ScriptRule& r : script.rules) {
    if (r.trigger == ':' || r.trigger == '\n') {
      fail(ErrorCode::InvalidArgument, "script trigger may not be ':' or newline");
    }
    const TokenId trig = m.vocab.byte_id(static_cast<unsigned char>(r.trigger));
    designate(trig);
    rules.emplace_back(trig, add_chain(r.pieces, r.loop));
  }
  const Chain fallback = add_chain(script.fallback, false);

  if (m.vocab.size() > config.vocab_size) {
    fail(ErrorCode::InvalidArgument, "vocab_size too small for the script");
  }
  while (m.vocab.size() < config.vocab_size) m.vocab.add_piece("");

  for (const auto& [name, dims] : expected_tensors(config)) m.weights.set(name, DenseTensor(dims));
  auto dense = [&](std::string_view name) -> DenseTensor& {
    return m.weights.dense_mut(name);
  };
  auto fill_ones = [](DenseTensor& t) { std::fill(t.data.begin(), t.data.end(), 1.0f); };
  fill_ones(dense(names::kFinalNormWeight));
  for (std::size_t l = 0; l < config.n_layers; ++l) {
    fill_ones(dense(names::layer(l, names::kNorm1Weight)));
    fill_ones(dense(names::layer(l, names::kNorm2Weight)));
  }

  auto hrow = [&](TokenId id) { return row_of.at(id); };
  DenseTensor& embed = dense(names::kEmbed);
  for (const auto& [id, row] : row_of) {
    for (std::size_t j = 0; j < d; ++j) embed.data[id * d + j] = hadamard(row, j);
  }

  // Layer 0 attention: constant q/k (biases only) whose rotary phase offset
  // peaks the score at a distance of exactly 3 positions; V copies the
  // normalized input; the output projection scales it by kCopy.
  constexpr float kCopy = 0.5f;
  constexpr double kPairStrength = 330.0;  // |q_i||k_i| per rotary pair
  constexpr double kOffset = 3.0;
  DenseTensor& qkv_w = dense(names::layer(0, names::kQkvWeight));
  DenseTensor& qkv_b = dense(names::layer(0, names::kQkvBias));
  for (std::size_t i = 0; i < d; ++i) qkv_w.data[(2 * d + i) * d + i] = 1.0f;
  const std::size_t hd = config.head_dim();
  const std::size_t half = config.rotary_dims() / 2;
  const double amp = std::sqrt(kPairStrength);
  for (std::size_t h = 0; h < config.n_heads; ++h) {
    for (std::size_t i = 0; i < half; ++i) {
      const double theta = std::pow(static_cast<double>(config.rope_base),
                                    -2.0 * static_cast<double>(i) / static_cast<double>(2 * half));
      qkv_b.data[h * hd + i] = static_cast<float>(amp * std::cos(-kOffset * theta));
      qkv_b.data[h * hd + i + half] = static_cast<float>(amp * std::sin(-kOffset * theta));
      qkv_b.data[d + h * hd + i] = static_cast<float>(amp);
    }
  }
  DenseTensor& out_w = dense(names::layer(0, names::kAttnOutWeight));
  for (std::size_t i = 0; i < d; ++i) out_w.data[i * d + i] = kCopy;

  // Unembedding. At a reply piece the residual is h(piece) + 0.5 h(token 3
  // back); at the final ':' it is h(':') + 0.5 h(trigger). Weights chosen so
  // the intended successor wins by a wide margin in every case.
  constexpr float kChain = 1.0f;
  constexpr float kColon = 1.0f;
  constexpr float kTrigger = 1.0f;
  constexpr float kFallback = kColon + kCopy * kTrigger / 2.0f;
  DenseTensor& unembed = dense(names::kUnembed);
  auto add_pattern = [&](TokenId target, TokenId source, float weight) {
    for (std::size_t j = 0; j < d; ++j) unembed.data[target * d + j] += weight * hadamard(hrow(source), j);
  };
  auto wire_chain = [&](const Chain& c) {
    for (std::size_t k = 0; k + 1 < c.ids.size(); ++k) add_pattern(c.ids[k + 1], c.ids[k], kChain);
    if (!c.ids.empty()) add_pattern(c.loop ? c.ids.front() : eos, c.ids.back(), kChain);
  };
  for (const auto& [trig, chain] : rules) {
    const TokenId first = chain.ids.empty() ? eos : chain.ids.front();
    add_pattern(first, colon, kColon);
    add_pattern(first, trig, kTrigger);
    wire_chain(chain);
  }
  add_pattern(fallback.ids.empty() ? eos : fallback.ids.front(), colon, kFallback);
  wire_chain(fallback);

  m.weights.validate(config);
  return m;
}

}  // namespace stlm::fixture
