#pragma once

// Deterministic synthetic models for tests and demos.

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "stlm/adapter.hpp"
#include "stlm/transformer.hpp"

namespace stlm::fixture {

ModelConfig config_from_json(const nlohmann::json& j);
nlohmann::json config_to_json(const ModelConfig& c);

// Random weights from a seeded generator; byte-identical for the same
// (config, seed) on every platform. All 2-D tensors need cols % 32 == 0 to
// be quantizable later, which the generator enforces.
Model random_model(const ModelConfig& config, std::uint64_t seed);

// Random LoRA pairs for the named targets (default: every QKV projection).
LoraAdapter random_adapter(const ModelConfig& config, std::size_t rank, float alpha,
                           std::uint64_t seed, std::vector<std::string> targets = {});

// A reply the scripted model produces after a prompt whose human text ends
// with `trigger`.
struct ScriptRule {
  char trigger = '.';
  std::vector<std::string> pieces;
  bool loop = false;  // cycle forever instead of ending with <|endoftext|>
};

struct Script {
  std::vector<ScriptRule> rules;
  std::vector<std::string> fallback;  // reply when no trigger matches; empty = end immediately
};

// Splits reply text into pieces at spaces (kept on the preceding word) and
// around special literals.
std::vector<std::string> split_pieces(const std::string& text);
Script script_from_json(const nlohmann::json& j);

// A decoder whose greedy output follows the script exactly. One attention
// layer reads the token three positions back (the last character of the
// human turn when the prompt ends in "\n<bot>:"); every reply piece is its
// own vocabulary entry so the unembedding can chain them. Extra layers are
// zero and pass the residual through unchanged.
Model scripted_model(const ModelConfig& config, const Script& script);

}  // namespace stlm::fixture
