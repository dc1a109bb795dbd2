#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <random>
#include <span>
#include <stop_token>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "stlm/qtensor.hpp"
#include "stlm/tokenizer.hpp"

namespace stlm {

struct ModelConfig {
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t d_model = 128;
  std::size_t vocab_size = 512;
  std::size_t max_context = 256;
  std::size_t d_ff = 512;  // MLP hidden width, 4 * d_model in GPT-NeoX
  float rotary_fraction = 1.0f;
  float layernorm_eps = 1e-5f;
  float rope_base = 10000.0f;

  std::size_t head_dim() const { return d_model / n_heads; }
  std::size_t rotary_dims() const;
  // Throws InvalidArgument on a violated invariant.
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

using Tensor = std::variant<DenseTensor, QTensor>;

std::vector<std::size_t> tensor_dims(const Tensor& t);
bool is_quantized(const Tensor& t);
DenseTensor to_dense(const Tensor& t);

// Tensor names used by the decoder. The fused QKV projection stacks Q, K and
// V row blocks: rows [0,d) are Q, [d,2d) K, [2d,3d) V.
namespace names {
inline constexpr std::string_view kEmbed = "embed.weight";
inline constexpr std::string_view kFinalNormWeight = "final_norm.weight";
inline constexpr std::string_view kFinalNormBias = "final_norm.bias";
inline constexpr std::string_view kUnembed = "unembed.weight";
std::string layer(std::size_t i, std::string_view suffix);
inline constexpr std::string_view kNorm1Weight = "ln1.weight";
inline constexpr std::string_view kNorm1Bias = "ln1.bias";
inline constexpr std::string_view kNorm2Weight = "ln2.weight";
inline constexpr std::string_view kNorm2Bias = "ln2.bias";
inline constexpr std::string_view kQkvWeight = "attn.qkv.weight";
inline constexpr std::string_view kQkvBias = "attn.qkv.bias";
inline constexpr std::string_view kAttnOutWeight = "attn.out.weight";
inline constexpr std::string_view kAttnOutBias = "attn.out.bias";
inline constexpr std::string_view kMlpUpWeight = "mlp.up.weight";
inline constexpr std::string_view kMlpUpBias = "mlp.up.bias";
inline constexpr std::string_view kMlpDownWeight = "mlp.down.weight";
inline constexpr std::string_view kMlpDownBias = "mlp.down.bias";
}  // namespace names

// Every tensor the decoder reads, with its shape, in canonical order.
std::vector<std::pair<std::string, std::vector<std::size_t>>> expected_tensors(
    const ModelConfig& config);

class ModelWeights {
 public:
  using Map = std::map<std::string, Tensor, std::less<>>;

  void set(std::string name, Tensor t) { tensors_.insert_or_assign(std::move(name), std::move(t)); }
  bool contains(std::string_view name) const { return tensors_.find(name) != tensors_.end(); }
  // Throws MissingTensor.
  const Tensor& get(std::string_view name) const;
  const DenseTensor& dense(std::string_view name) const;
  DenseTensor& dense_mut(std::string_view name);
  const Map& tensors() const { return tensors_; }

  // Throws MissingTensor / ShapeError when the set does not match config.
  void validate(const ModelConfig& config) const;

  friend bool operator==(const ModelWeights&, const ModelWeights&) = default;

 private:
  Map tensors_;
};

struct Model {
  ModelConfig config;
  ModelWeights weights;
  Vocab vocab = Vocab::fixture();
};

class KVCache {
 public:
  explicit KVCache(const ModelConfig& config);

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }
  void clear() { length_ = 0; }

  float* key(std::size_t layer, std::size_t pos) { return keys_[layer].data() + pos * d_model_; }
  float* value(std::size_t layer, std::size_t pos) { return values_[layer].data() + pos * d_model_; }
  const float* key(std::size_t layer, std::size_t pos) const {
    return keys_[layer].data() + pos * d_model_;
  }
  const float* value(std::size_t layer, std::size_t pos) const {
    return values_[layer].data() + pos * d_model_;
  }
  // Marks one more position filled in every layer.
  void advance() { ++length_; }

 private:
  std::size_t capacity_;
  std::size_t d_model_;
  std::size_t length_ = 0;
  std::vector<std::vector<float>> keys_;  // [layer][pos * d_model + i]
  std::vector<std::vector<float>> values_;
};

// y = W x (+ b) for dense or quantized W; matches matvec/qmatvec exactly.
std::vector<float> linear(const Tensor& w, std::span<const float> x);

// Logits for each new token, row-major [tokens.size() x vocab_size]. Extends
// the cache by tokens.size(). Throws ContextFull.
std::vector<float> forward(const Model& model, std::span<const TokenId> tokens, KVCache& cache);

std::vector<float> softmax(std::span<const float> logits);

// Rotates the leading `rotary_dims` of one head in place for position `pos`;
// dimension i pairs with i + rotary_dims/2 (GPT-NeoX layout).
void apply_rotary(std::span<float> head, std::size_t rotary_dims, std::size_t pos, float base);

struct SamplerParams {
  float temperature = 0.0f;
  std::size_t top_k = 0;  // 0 disables the filter
  std::uint64_t seed = 0;
};

class Sampler {
 public:
  explicit Sampler(const SamplerParams& params) : params_(params), rng_(params.seed) {}
  TokenId sample(std::span<const float> logits);
  const SamplerParams& params() const { return params_; }

 private:
  SamplerParams params_;
  std::mt19937_64 rng_;
};

TokenId argmax(std::span<const float> logits);

enum class StopReason { EndOfText, StopSequence, MaxContext, MaxTokens, Cancelled };
std::string_view to_string(StopReason reason);

struct StopSpec {
  std::vector<std::string> sequences{std::string(special::kHuman)};
  std::size_t max_new_tokens = 0;  // 0 = until the context is full
};

struct GenerationResult {
  StopReason reason = StopReason::EndOfText;
  std::size_t token_count = 0;  // sampled tokens, excluding the end-of-text token
  std::string text;             // exactly what was delivered through the callback
};

// `id` is empty for the final flush of held-back text.
struct TokenEvent {
  std::optional<TokenId> id;
  std::string_view text;
};
using TokenCallback = std::function<void(const TokenEvent&)>;

// Streams sampled tokens through on_token. Text that could still turn into a
// stop sequence is held back until it is disambiguated; a matched stop
// sequence is never delivered. Throws ContextFull if the prompt leaves no room.
GenerationResult generate(const Model& model, const TokenSeq& prompt, const SamplerParams& params,
                          const StopSpec& stop, const TokenCallback& on_token,
                          std::stop_token cancel = {});

}  // namespace stlm
