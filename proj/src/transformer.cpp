#include "stlm/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "stlm/error.hpp"
#include "stlm/kernels.hpp"

namespace stlm {
namespace {

void layer_norm(std::span<const float> x, const DenseTensor& gain, const DenseTensor& bias,
                float eps, std::span<float> out) {
  const std::size_t n = x.size();
  float mean = 0.0f;
  for (float v : x) mean += v;
  mean /= static_cast<float>(n);
  float var = 0.0f;
  for (float v : x) var += (v - mean) * (v - mean);
  var /= static_cast<float>(n);
  const float inv = 1.0f / std::sqrt(var + eps);
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = (x[i] - mean) * inv * gain.data[i] + bias.data[i];
  }
}

void add_in_place(std::span<float> y, const DenseTensor& bias) {
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += bias.data[i];
}

float gelu(float v) {
  return 0.5f * v * (1.0f + std::erf(v * 0.70710678118654752f));
}

void embedding_row(const Tensor& embed, TokenId id, std::span<float> out) {
  if (const auto* q = std::get_if<QTensor>(&embed)) {
    const auto blocks = q->row_blocks(id);
    kernels::active().dequantize_row(blocks.data(), blocks.size(), out.data());
  } else {
    const auto row = std::get<DenseTensor>(embed).row(id);
    std::copy(row.begin(), row.end(), out.begin());
  }
}

}  // namespace

std::size_t ModelConfig::rotary_dims() const {
  return static_cast<std::size_t>(std::lround(static_cast<double>(head_dim()) * rotary_fraction));
}

void ModelConfig::validate() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::InvalidArgument, "model config: " + what); };
  if (n_layers == 0 || n_heads == 0 || d_model == 0 || vocab_size == 0 || d_ff == 0) {
    bad("dimensions must be positive");
  }
  if (d_model % n_heads != 0) bad("d_model must be divisible by n_heads");
  if (max_context < 1) bad("max_context must be at least 1");
  if (!(rotary_fraction > 0.0f && rotary_fraction <= 1.0f)) bad("rotary_fraction must be in (0, 1]");
  const double rot = static_cast<double>(head_dim()) * rotary_fraction;
  if (std::fabs(rot - std::round(rot)) > 1e-6 || rotary_dims() == 0 || rotary_dims() % 2 != 0) {
    bad("head_dim * rotary_fraction must be a positive even integer");
  }
  if (!(layernorm_eps > 0.0f)) bad("layernorm_eps must be positive");
  if (!(rope_base > 0.0f)) bad("rope_base must be positive");
}

std::vector<std::size_t> tensor_dims(const Tensor& t) {
  if (const auto* q = std::get_if<QTensor>(&t)) return {q->rows(), q->cols()};
  return std::get<DenseTensor>(t).dims;
}

bool is_quantized(const Tensor& t) { return std::holds_alternative<QTensor>(t); }

DenseTensor to_dense(const Tensor& t) {
  if (const auto* q = std::get_if<QTensor>(&t)) return dequantize(*q);
  return std::get<DenseTensor>(t);
}

std::string names::layer(std::size_t i, std::string_view suffix) {
  return "layers." + std::to_string(i) + "." + std::string(suffix);
}

std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_tensors(
    const ModelConfig& c) {
  std::vector<std::pair<std::string, std::vector<std::size_t>>> out;
  out.emplace_back(std::string(names::kEmbed), std::vector<std::size_t>{c.vocab_size, c.d_model});
  for (std::size_t l = 0; l < c.n_layers; ++l) {
    out.emplace_back(names::layer(l, names::kNorm1Weight), std::vector<std::size_t>{c.d_model});
    out.emplace_back(names::layer(l, names::kNorm1Bias), std::vector<std::size_t>{c.d_model});
    out.emplace_back(names::layer(l, names::kNorm2Weight), std::vector<std::size_t>{c.d_model});
    out.emplace_back(names::layer(l, names::kNorm2Bias), std::vector<std::size_t>{c.d_model});
    out.emplace_back(names::layer(l, names::kQkvWeight), std::vector<std::size_t>{3 * c.d_model, c.d_model});
    out.emplace_back(names::layer(l, names::kQkvBias), std::vector<std::size_t>{3 * c.d_model});
    out.emplace_back(names::layer(l, names::kAttnOutWeight), std::vector<std::size_t>{c.d_model, c.d_model});
    out.emplace_back(names::layer(l, names::kAttnOutBias), std::vector<std::size_t>{c.d_model});
    out.emplace_back(names::layer(l, names::kMlpUpWeight), std::vector<std::size_t>{c.d_ff, c.d_model});
    out.emplace_back(names::layer(l, names::kMlpUpBias), std::vector<std::size_t>{c.d_ff});
    out.emplace_back(names::layer(l, names::kMlpDownWeight), std::vector<std::size_t>{c.d_model, c.d_ff});
    out.emplace_back(names::layer(l, names::kMlpDownBias), std::vector<std::size_t>{c.d_model});
  }
  out.emplace_back(std::string(names::kFinalNormWeight), std::vector<std::size_t>{c.d_model});
  out.emplace_back(std::string(names::kFinalNormBias), std::vector<std::size_t>{c.d_model});
  out.emplace_back(std::string(names::kUnembed), std::vector<std::size_t>{c.vocab_size, c.d_model});
  return out;
}

const Tensor& ModelWeights::get(std::string_view name) const {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) fail(ErrorCode::MissingTensor, "missing tensor " + std::string(name));
  return it->second;
}

const DenseTensor& ModelWeights::dense(std::string_view name) const {
  const Tensor& t = get(name);
  if (const auto* d = std::get_if<DenseTensor>(&t)) return *d;
  fail(ErrorCode::ShapeError, "tensor " + std::string(name) + " must be dense");
}

DenseTensor& ModelWeights::dense_mut(std::string_view name) {
  const auto it = tensors_.find(name);
  if (it == tensors_.end()) fail(ErrorCode::MissingTensor, "missing tensor " + std::string(name));
  if (auto* d = std::get_if<DenseTensor>(&it->second)) return *d;
  fail(ErrorCode::ShapeError, "tensor " + std::string(name) + " must be dense");
}

void ModelWeights::validate(const ModelConfig& config) const {
  config.validate();
  const auto expected = expected_tensors(config);
  for (const auto& [name, dims] : expected) {
    const Tensor& t = get(name);
    if (tensor_dims(t) != dims) {
      fail(ErrorCode::ShapeError, "tensor " + name + " has the wrong shape");
    }
    if (dims.size() == 1 && is_quantized(t)) {
      fail(ErrorCode::ShapeError, "1-D tensor " + name + " cannot be quantized");
    }
  }
  if (tensors_.size() != expected.size()) {
    fail(ErrorCode::ShapeError, "model has tensors the decoder does not use");
  }
}

KVCache::KVCache(const ModelConfig& config)
    : capacity_(config.max_context),
      d_model_(config.d_model),
      keys_(config.n_layers, std::vector<float>(config.max_context * config.d_model)),
      values_(config.n_layers, std::vector<float>(config.max_context * config.d_model)) {}

std::vector<float> linear(const Tensor& w, std::span<const float> x) {
  if (const auto* q = std::get_if<QTensor>(&w)) return qmatvec(*q, x);
  return matvec(std::get<DenseTensor>(w), x);
}

std::vector<float> forward(const Model& model, std::span<const TokenId> tokens, KVCache& cache) {
  const ModelConfig& c = model.config;
  const ModelWeights& w = model.weights;
  if (cache.length() + tokens.size() > c.max_context) {
    fail(ErrorCode::ContextFull, "context window of " + std::to_string(c.max_context) +
                                     " tokens would overflow");
  }
  const std::size_t d = c.d_model;
  const std::size_t hd = c.head_dim();
  const std::size_t rot = c.rotary_dims();
  const float inv_sqrt_hd = 1.0f / std::sqrt(static_cast<float>(hd));

  std::vector<float> logits;
  logits.reserve(tokens.size() * c.vocab_size);
  std::vector<float> x(d), h(d), attn(d), scores;

  for (TokenId tok : tokens) {
    if (tok >= c.vocab_size) fail(ErrorCode::InvalidToken, "token id outside model vocabulary");
    const std::size_t pos = cache.length();
    embedding_row(w.get(names::kEmbed), tok, x);

    for (std::size_t l = 0; l < c.n_layers; ++l) {
      layer_norm(x, w.dense(names::layer(l, names::kNorm1Weight)),
                 w.dense(names::layer(l, names::kNorm1Bias)), c.layernorm_eps, h);
      std::vector<float> qkv = linear(w.get(names::layer(l, names::kQkvWeight)), h);
      add_in_place(qkv, w.dense(names::layer(l, names::kQkvBias)));
      std::span<float> q(qkv.data(), d);
      std::span<float> k(qkv.data() + d, d);
      std::span<float> v(qkv.data() + 2 * d, d);
      for (std::size_t head = 0; head < c.n_heads; ++head) {
        apply_rotary(q.subspan(head * hd, hd), rot, pos, c.rope_base);
        apply_rotary(k.subspan(head * hd, hd), rot, pos, c.rope_base);
      }
      std::copy(k.begin(), k.end(), cache.key(l, pos));
      std::copy(v.begin(), v.end(), cache.value(l, pos));

      scores.resize(pos + 1);
      for (std::size_t head = 0; head < c.n_heads; ++head) {
        const float* qh = q.data() + head * hd;
        for (std::size_t s = 0; s <= pos; ++s) {
          const float* ks = cache.key(l, s) + head * hd;
          float dot = 0.0f;
          for (std::size_t i = 0; i < hd; ++i) dot += qh[i] * ks[i];
          scores[s] = dot * inv_sqrt_hd;
        }
        const std::vector<float> probs = softmax(scores);
        float* out = attn.data() + head * hd;
        std::fill(out, out + hd, 0.0f);
        for (std::size_t s = 0; s <= pos; ++s) {
          const float* vs = cache.value(l, s) + head * hd;
          for (std::size_t i = 0; i < hd; ++i) out[i] += probs[s] * vs[i];
        }
      }
      std::vector<float> attn_out = linear(w.get(names::layer(l, names::kAttnOutWeight)), attn);
      add_in_place(attn_out, w.dense(names::layer(l, names::kAttnOutBias)));

      layer_norm(x, w.dense(names::layer(l, names::kNorm2Weight)),
                 w.dense(names::layer(l, names::kNorm2Bias)), c.layernorm_eps, h);
      std::vector<float> up = linear(w.get(names::layer(l, names::kMlpUpWeight)), h);
      add_in_place(up, w.dense(names::layer(l, names::kMlpUpBias)));
      for (float& u : up) u = gelu(u);
      std::vector<float> down = linear(w.get(names::layer(l, names::kMlpDownWeight)), up);
      add_in_place(down, w.dense(names::layer(l, names::kMlpDownBias)));

      // parallel residual: x + attn(ln1(x)) + mlp(ln2(x))
      for (std::size_t i = 0; i < d; ++i) x[i] = x[i] + attn_out[i] + down[i];
    }
    cache.advance();

    layer_norm(x, w.dense(names::kFinalNormWeight), w.dense(names::kFinalNormBias),
               c.layernorm_eps, h);
    const std::vector<float> row = linear(w.get(names::kUnembed), h);
    logits.insert(logits.end(), row.begin(), row.end());
  }
  return logits;
}

void apply_rotary(std::span<float> head, std::size_t rot, std::size_t pos, float base) {
  const std::size_t half = rot / 2;
  for (std::size_t i = 0; i < half; ++i) {
    const double theta =
        static_cast<double>(pos) *
        std::pow(static_cast<double>(base), -2.0 * static_cast<double>(i) / static_cast<double>(rot));
    const float c = static_cast<float>(std::cos(theta));
    const float s = static_cast<float>(std::sin(theta));
    const float a = head[i];
    const float b = head[i + half];
    head[i] = a * c - b * s;
    head[i + half] = b * c + a * s;
  }
}

std::vector<float> softmax(std::span<const float> logits) {
  std::vector<float> out(logits.size());
  if (logits.empty()) return out;
  const float m = *std::max_element(logits.begin(), logits.end());
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - m);
    sum += out[i];
  }
  const auto inv = static_cast<float>(1.0 / sum);
  for (float& p : out) p *= inv;
  return out;
}

TokenId argmax(std::span<const float> logits) {
  // strict > keeps the lowest id on ties
  std::size_t best = 0;
  for (std::size_t i = 1; i < logits.size(); ++i) {
    if (logits[i] > logits[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

TokenId Sampler::sample(std::span<const float> logits) {
  if (params_.temperature <= 0.0f || params_.top_k == 1) return argmax(logits);

  std::vector<TokenId> order(logits.size());
  std::iota(order.begin(), order.end(), TokenId{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](TokenId a, TokenId b) { return logits[a] > logits[b]; });
  if (params_.top_k > 0 && params_.top_k < order.size()) order.resize(params_.top_k);

  const double t = params_.temperature;
  const double top = logits[order.front()];
  std::vector<double> weights(order.size());
  double total = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    weights[i] = std::exp((logits[order[i]] - top) / t);
    total += weights[i];
  }
  // 53 random bits -> [0, 1); std distributions are not portable bit-for-bit
  const double u = static_cast<double>(rng_() >> 11) * 0x1.0p-53 * total;
  double acc = 0.0;
  for (std::size_t i = 0; i < order.size(); ++i) {
    acc += weights[i];
    if (u < acc) return order[i];
  }
  return order.back();
}

std::string_view to_string(StopReason reason) {
  switch (reason) {
    case StopReason::EndOfText: return "EndOfText";
    case StopReason::StopSequence: return "StopSequence";
    case StopReason::MaxContext: return "MaxContext";
    case StopReason::MaxTokens: return "MaxTokens";
    case StopReason::Cancelled: return "Cancelled";
  }
  return "Unknown";
}

GenerationResult generate(const Model& model, const TokenSeq& prompt, const SamplerParams& params,
                          const StopSpec& stop, const TokenCallback& on_token,
                          std::stop_token cancel) {
  if (prompt.empty()) fail(ErrorCode::InvalidArgument, "generate: empty prompt");
  if (prompt.size() >= model.config.max_context) {
    fail(ErrorCode::ContextFull, "prompt of " + std::to_string(prompt.size()) +
                                     " tokens leaves no room in the context window");
  }
  const TokenId eos = model.vocab.eos();
  KVCache cache(model.config);
  Sampler sampler(params);
  GenerationResult result;
  std::string pending;  // decoded text not yet delivered

  auto deliver = [&](std::optional<TokenId> id, std::size_t n) {
    const std::string chunk = pending.substr(0, n);
    pending.erase(0, n);
    result.text += chunk;
    if (on_token) on_token(TokenEvent{id, chunk});
  };
  auto finish = [&](StopReason reason) {
    if (!pending.empty()) deliver(std::nullopt, pending.size());
    result.reason = reason;
    return result;
  };

  std::vector<float> logits = forward(model, prompt, cache);
  std::span<const float> last(logits.data() + (prompt.size() - 1) * model.config.vocab_size,
                              model.config.vocab_size);
  while (true) {
    if (cancel.stop_requested()) return finish(StopReason::Cancelled);
    const TokenId tok = sampler.sample(last);
    if (tok == eos) return finish(StopReason::EndOfText);
    ++result.token_count;
    pending += token_bytes(tok, model.vocab);

    std::size_t hit = std::string::npos;
    for (const std::string& seq : stop.sequences) {
      if (!seq.empty()) hit = std::min(hit, pending.find(seq));
    }
    if (hit != std::string::npos) {
      deliver(tok, hit);
      pending.clear();
      result.reason = StopReason::StopSequence;
      return result;
    }
    // hold back the longest tail that is still a prefix of some stop sequence
    std::size_t hold = 0;
    for (const std::string& seq : stop.sequences) {
      for (std::size_t n = std::min(seq.size() - (seq.empty() ? 0 : 1), pending.size()); n > hold; --n) {
        if (pending.compare(pending.size() - n, n, seq, 0, n) == 0) {
          hold = n;
          break;
        }
      }
    }
    deliver(tok, pending.size() - hold);

    if (stop.max_new_tokens > 0 && result.token_count >= stop.max_new_tokens) {
      return finish(StopReason::MaxTokens);
    }
    if (cache.length() >= model.config.max_context) return finish(StopReason::MaxContext);
    const TokenId next[1] = {tok};
    logits = forward(model, next, cache);
    last = std::span<const float>(logits.data(), model.config.vocab_size);
  }
}

}  // namespace stlm
