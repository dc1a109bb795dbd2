#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace stlm {

inline constexpr std::size_t kBlockSize = 32;
// 2-byte f16 scale + 16 bytes of packed nibbles.
inline constexpr std::size_t kBlockBytes = 18;

// One quantized block of 32 weights. Codes are offset-binary: logical value
// is (code - 8) * scale, logical range -7..+7 for quantizer output.
struct Block4 {
  std::uint16_t scale_bits = 0;
  // low nibble = even index, high nibble = odd index
  std::array<std::uint8_t, kBlockSize / 2> packed{};

  float scale() const;
  std::uint8_t code(std::size_t i) const {
    const std::uint8_t byte = packed[i / 2];
    return (i & 1u) ? static_cast<std::uint8_t>(byte >> 4)
                    : static_cast<std::uint8_t>(byte & 0x0Fu);
  }
  void set_code(std::size_t i, std::uint8_t code);

  friend bool operator==(const Block4&, const Block4&) = default;
};
static_assert(sizeof(Block4) == kBlockBytes);

// Row-major f32 tensor of arbitrary rank.
struct DenseTensor {
  std::vector<std::size_t> dims;
  std::vector<float> data;

  DenseTensor() = default;
  explicit DenseTensor(std::vector<std::size_t> shape);
  DenseTensor(std::vector<std::size_t> shape, std::vector<float> values);

  std::size_t rank() const { return dims.size(); }
  std::size_t rows() const;  // 2-D only
  std::size_t cols() const;  // 2-D only
  std::size_t numel() const { return data.size(); }
  std::span<const float> row(std::size_t r) const;
  std::span<float> row(std::size_t r);

  friend bool operator==(const DenseTensor&, const DenseTensor&) = default;
};

std::size_t element_count(std::span<const std::size_t> dims);

// Block-quantized 2-D matrix; cols is a multiple of kBlockSize.
class QTensor {
 public:
  QTensor() = default;
  QTensor(std::size_t rows, std::size_t cols, std::vector<Block4> blocks);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t blocks_per_row() const { return cols_ / kBlockSize; }
  std::span<const Block4> blocks() const { return blocks_; }
  std::span<const Block4> row_blocks(std::size_t r) const {
    return std::span<const Block4>(blocks_).subspan(r * blocks_per_row(),
                                                    blocks_per_row());
  }
  std::size_t byte_size() const { return blocks_.size() * kBlockBytes; }

  friend bool operator==(const QTensor&, const QTensor&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<Block4> blocks_;
};

Block4 quantize_block(std::span<const float> values);
QTensor quantize_tensor(const DenseTensor& src);
DenseTensor dequantize(const QTensor& q);

// y = W x with the fixed accumulation contract shared by every kernel: each
// output row starts at 0.0f and adds w[r][j] * x[j] for j = 0..cols-1 in
// order, one f32 multiply and one f32 add per term (no fused multiply-add).
// Under that contract qmatvec(q, x) == matvec(dequantize(q), x) bit-for-bit.
std::vector<float> qmatvec(const QTensor& w, std::span<const float> x);
std::vector<float> matvec(const DenseTensor& w, std::span<const float> x);

// Wire layout: little-endian f16 scale, then the 16 packed bytes.
void encode_block(const Block4& block, std::span<std::uint8_t, kBlockBytes> out);
Block4 decode_block(std::span<const std::uint8_t, kBlockBytes> in);
std::vector<std::uint8_t> serialize(const QTensor& q);
QTensor deserialize(std::size_t rows, std::size_t cols,
                    std::span<const std::uint8_t> bytes);

}  // namespace stlm
