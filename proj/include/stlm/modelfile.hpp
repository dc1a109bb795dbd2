#pragma once

// STLM container: one file holding config, vocabulary and named tensors.
//
// Layout (all integers little-endian):
//   "STLM"  u32 version=1  u32 kind (0 model, 1 adapter)  u32 tensor_count
//   config: u32 n_layers n_heads d_model vocab_size max_context d_ff,
//           f32 rotary_fraction layernorm_eps rope_base
//   adapter: u32 rank, f32 alpha (zero for models)
//   u32 vocab_len, vocab text (stlm-vocab format)
//   tensor table, per entry: u16 name_len, name, u8 dtype (0 f32, 1 f16, 2 q4),
//           u8 ndim, u64 dims[ndim], u64 offset, u64 length
//   payload: entries in table order, each starting on a 32-byte boundary
//            (zero padding), offsets measured from the start of the file
//   footer: 16-byte MD5 of every preceding byte, then "END1"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "stlm/transformer.hpp"

namespace stlm {

inline constexpr std::uint32_t kFormatVersion = 1;
inline constexpr std::size_t kPayloadAlignment = 32;
inline constexpr std::size_t kFooterBytes = 20;

enum class Dtype : std::uint8_t { F32 = 0, F16 = 1, Q4 = 2 };
std::string_view to_string(Dtype dtype);
// Stored byte length of a tensor with these dims.
std::uint64_t storage_bytes(Dtype dtype, std::span<const std::size_t> dims);

enum class FileKind : std::uint32_t { Model = 0, Adapter = 1 };

struct TensorRecord {
  std::string name;
  Dtype dtype = Dtype::F32;
  std::vector<std::size_t> dims;
  std::uint64_t offset = 0;
  std::uint64_t length = 0;
};

struct ContainerHeader {
  FileKind kind = FileKind::Model;
  ModelConfig config;
  std::uint32_t lora_rank = 0;
  float lora_alpha = 0.0f;
  std::string vocab_text;
};

// In-memory image of a container: header plus the named tensors and the
// dtype each one is stored as. Dense tensors stored as f16 hold f16-exact
// values after reading.
struct Container {
  ContainerHeader header;
  std::vector<std::pair<std::string, Tensor>> tensors;  // file order
  std::map<std::string, Dtype, std::less<>> dtypes;
};

struct FileSummary {
  std::vector<TensorRecord> table;
  std::map<Dtype, std::uint64_t> bytes_by_dtype;  // payload bytes, excluding padding
  std::uint64_t file_bytes = 0;
};

std::vector<std::uint8_t> serialize_container(const Container& c, FileSummary* summary = nullptr);
// Throws FormatError (magic/version/structure), CorruptFile (truncation or
// checksum footer mismatch).
Container parse_container(std::span<const std::uint8_t> bytes, FileSummary* summary = nullptr);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
// Writes via a temp file and rename so readers never see a partial file.
void write_file_atomic(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

// Dense tensors are stored as `dense_dtype`, quantized ones as q4.
FileSummary write_model(const Model& model, const std::filesystem::path& path,
                        Dtype dense_dtype = Dtype::F32);

struct LoadedModel {
  Model model;
  FileSummary summary;
  std::optional<Dtype> dense_dtype;  // dtype of the dense entries, when uniform
};
LoadedModel read_model(const std::filesystem::path& path);

struct SizeRow {
  std::string name;
  std::vector<std::size_t> dims;
  Dtype before = Dtype::F32;
  Dtype after = Dtype::F32;
  std::uint64_t bytes_before = 0;
  std::uint64_t bytes_after = 0;
};

struct SizeReport {
  std::uint64_t before_bytes = 0;  // whole source file
  std::uint64_t after_bytes = 0;   // whole output file
  double ratio = 0.0;
  std::vector<SizeRow> tensors;
};

// 2-D tensors become q4; 1-D tensors are kept at 16 bits. Throws
// AlreadyQuantized when the source holds any q4 entry and ShapeError naming
// the offending tensor when cols % 32 != 0.
SizeReport quantize_model(const std::filesystem::path& src, const std::filesystem::path& dst);
Model quantize_weights(const Model& model);

// Reference numbers for the full-size model this pipeline mirrors:
// 16-bit 5.17 GB, 4-bit 1.6 GB.
inline constexpr double kReferenceF16Gb = 5.17;
inline constexpr double kReferenceQ4Gb = 1.6;

}  // namespace stlm
