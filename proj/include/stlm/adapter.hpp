#pragma once
// LoRA merge and the dialogue dataset pipeline.

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "stlm/transformer.hpp"

namespace stlm {

// Low-rank update for one base tensor W [rows x cols]: A is [rank x cols],
// B is [rows x rank].
struct LoraPair {
  DenseTensor a;
  DenseTensor b;
};

struct LoraAdapter {
  std::size_t rank = 1;
  float alpha = 1.0f;
  std::map<std::string, LoraPair, std::less<>> targets;

  float scale() const { return alpha / static_cast<float>(rank); }
  // Throws InvalidArgument / ShapeError when rank or the pair shapes disagree.
  void validate() const;
};

// The fused QKV projection of every layer.
std::vector<std::string> default_lora_targets(const ModelConfig& config);

// scale * (B A), each entry summed over the rank index left to right in f32.
DenseTensor lora_delta(const LoraPair& pair, float scale);

// W' = W + (alpha / rank) B A for every target; every other tensor is copied
// unchanged. Quantized targets are dequantized first, so targets come back
// dense. Throws MissingTensor for an unknown target and ShapeError when a
// pair does not fit its base tensor.
ModelWeights merge_lora(const ModelWeights& base, const LoraAdapter& adapter);

// Adapter files reuse the model container with kind = adapter and tensors
// named "<target>.lora_a" / "<target>.lora_b", stored as f32.
void write_adapter(const LoraAdapter& adapter, const ModelConfig& base_config,
                   const std::filesystem::path& path);
LoraAdapter read_adapter(const std::filesystem::path& path);

// Dialogue data.

enum class Speaker { Human, Bot };
std::string_view to_string(Speaker s);

struct Turn {
  Speaker speaker = Speaker::Human;
  std::string text;

  friend bool operator==(const Turn&, const Turn&) = default;
};

struct DialogueSample {
  std::vector<Turn> turns;

  // Throws InvalidValue unless nonempty and alternating from a human turn.
  void validate() const;
  friend bool operator==(const DialogueSample&, const DialogueSample&) = default;
};

// "<human>: {text}\n" / "<bot>: {text}\n" per turn, in order.
std::string render_turns(std::span<const Turn> turns);
// render_turns followed by "<|endoftext|>".
std::string render_dialogue(const DialogueSample& sample);

struct PaddedBatch {
  std::vector<TokenSeq> rows;
  std::vector<std::size_t> lengths;  // true length of each row
  TokenId pad_id = 0;
};

// Pads every row at the tail with pad_id up to the longest row. Throws
// InvalidValue on an empty list.
PaddedBatch pad_batch(std::span<const TokenSeq> samples, TokenId pad_id);

// Seeded Fisher-Yates shuffle, then the first round(train_fraction * n)
// samples train and the rest evaluate. Throws TooFewSamples when n < 2 and
// InvalidArgument unless 0 < train_fraction < 1.
std::pair<std::vector<DialogueSample>, std::vector<DialogueSample>> split_dataset(
    std::vector<DialogueSample> samples, double train_fraction, std::uint64_t seed);

nlohmann::json sample_to_json(const DialogueSample& s);
DialogueSample sample_from_json(const nlohmann::json& j);
// One JSON object per line. Throws FormatError naming the bad line.
std::vector<DialogueSample> read_dataset(const std::filesystem::path& path);
void write_dataset(const std::filesystem::path& path, std::span<const DialogueSample> samples);

}  // namespace stlm
