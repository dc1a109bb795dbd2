#include "stlm/qtensor.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "stlm/error.hpp"
#include "stlm/half.hpp"
#include "stlm/kernels.hpp"

namespace stlm {

float Block4::scale() const { return half_to_float(scale_bits); }

void Block4::set_code(std::size_t i, std::uint8_t code) {
  std::uint8_t& byte = packed[i / 2];
  if (i & 1u) {
    byte = static_cast<std::uint8_t>((byte & 0x0Fu) | ((code & 0x0Fu) << 4));
  } else {
    byte = static_cast<std::uint8_t>((byte & 0xF0u) | (code & 0x0Fu));
  }
}

std::size_t element_count(std::span<const std::size_t> dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return n;
}

DenseTensor::DenseTensor(std::vector<std::size_t> shape)
    : dims(std::move(shape)), data(element_count(dims), 0.0f) {}

DenseTensor::DenseTensor(std::vector<std::size_t> shape, std::vector<float> values)
    : dims(std::move(shape)), data(std::move(values)) {
  if (data.size() != element_count(dims)) {
    fail(ErrorCode::ShapeError, "tensor data length does not match its shape");
  }
}

std::size_t DenseTensor::rows() const {
  if (dims.size() != 2) fail(ErrorCode::ShapeError, "expected a 2-D tensor");
  return dims[0];
}

std::size_t DenseTensor::cols() const {
  if (dims.size() != 2) fail(ErrorCode::ShapeError, "expected a 2-D tensor");
  return dims[1];
}

std::span<const float> DenseTensor::row(std::size_t r) const {
  const std::size_t c = cols();
  return std::span<const float>(data).subspan(r * c, c);
}

std::span<float> DenseTensor::row(std::size_t r) {
  const std::size_t c = cols();
  return std::span<float>(data).subspan(r * c, c);
}

QTensor::QTensor(std::size_t rows, std::size_t cols, std::vector<Block4> blocks)
    : rows_(rows), cols_(cols), blocks_(std::move(blocks)) {
  if (cols_ % kBlockSize != 0) {
    fail(ErrorCode::ShapeError, "quantized tensor cols must be a multiple of 32");
  }
  if (blocks_.size() != rows_ * (cols_ / kBlockSize)) {
    fail(ErrorCode::ShapeError, "block count does not match rows x cols / 32");
  }
}

Block4 quantize_block(std::span<const float> values) {
  if (values.size() != kBlockSize) {
    fail(ErrorCode::ShapeError, "a block holds exactly 32 values");
  }
  float amax = 0.0f;
  for (float v : values) {
    if (!std::isfinite(v)) fail(ErrorCode::InvalidValue, "non-finite value in block");
    amax = std::max(amax, std::fabs(v));
  }

  Block4 block;
  block.packed.fill(0x88);  // all codes 8 == logical zero
  if (amax == 0.0f) return block;

  block.scale_bits = float_to_half(amax / 7.0f);
  // codes are computed against the stored scale so dequantization error is
  // bounded by half a step of the scale that is actually used
  const float d = half_to_float(block.scale_bits);
  if (d == 0.0f) {
    block.scale_bits = 0;  // underflowed scale: keep the zero-block invariant
    return block;
  }
  for (std::size_t i = 0; i < kBlockSize; ++i) {
    const float q = std::clamp(std::round(values[i] / d), -7.0f, 7.0f);
    block.set_code(i, static_cast<std::uint8_t>(static_cast<int>(q) + 8));
  }
  return block;
}

QTensor quantize_tensor(const DenseTensor& src) {
  if (src.rank() != 2) fail(ErrorCode::ShapeError, "quantize_tensor needs a 2-D tensor");
  const std::size_t rows = src.dims[0];
  const std::size_t cols = src.dims[1];
  if (cols % kBlockSize != 0) {
    fail(ErrorCode::ShapeError,
         "cols (" + std::to_string(cols) + ") is not a multiple of 32");
  }
  std::vector<Block4> blocks;
  blocks.reserve(rows * cols / kBlockSize);
  for (std::size_t i = 0; i < src.data.size(); i += kBlockSize) {
    blocks.push_back(quantize_block(std::span<const float>(src.data).subspan(i, kBlockSize)));
  }
  return QTensor(rows, cols, std::move(blocks));
}

DenseTensor dequantize(const QTensor& q) {
  DenseTensor out({q.rows(), q.cols()});
  kernels::active().dequantize_row(q.blocks().data(), q.blocks().size(), out.data.data());
  return out;
}

std::vector<float> qmatvec(const QTensor& w, std::span<const float> x) {
  if (x.size() != w.cols()) fail(ErrorCode::ShapeError, "qmatvec: x length != cols");
  std::vector<float> y(w.rows());
  kernels::active().qmatvec(w.blocks().data(), w.rows(), w.cols(), x.data(), y.data());
  return y;
}

std::vector<float> matvec(const DenseTensor& w, std::span<const float> x) {
  if (x.size() != w.cols()) fail(ErrorCode::ShapeError, "matvec: x length != cols");
  std::vector<float> y(w.rows());
  kernels::active().matvec(w.data.data(), w.rows(), w.cols(), x.data(), y.data());
  return y;
}

void encode_block(const Block4& block, std::span<std::uint8_t, kBlockBytes> out) {
  out[0] = static_cast<std::uint8_t>(block.scale_bits & 0xFFu);
  out[1] = static_cast<std::uint8_t>(block.scale_bits >> 8);
  std::copy(block.packed.begin(), block.packed.end(), out.begin() + 2);
}

Block4 decode_block(std::span<const std::uint8_t, kBlockBytes> in) {
  Block4 block;
  block.scale_bits = static_cast<std::uint16_t>(in[0] | (in[1] << 8));
  std::copy(in.begin() + 2, in.end(), block.packed.begin());
  return block;
}

std::vector<std::uint8_t> serialize(const QTensor& q) {
  std::vector<std::uint8_t> bytes(q.byte_size());
  for (std::size_t b = 0; b < q.blocks().size(); ++b) {
    encode_block(q.blocks()[b],
                 std::span<std::uint8_t, kBlockBytes>(bytes.data() + b * kBlockBytes, kBlockBytes));
  }
  return bytes;
}

QTensor deserialize(std::size_t rows, std::size_t cols, std::span<const std::uint8_t> bytes) {
  if (cols % kBlockSize != 0) fail(ErrorCode::ShapeError, "q4 cols must be a multiple of 32");
  const std::size_t nblocks = rows * cols / kBlockSize;
  if (bytes.size() != nblocks * kBlockBytes) {
    fail(ErrorCode::CorruptFile, "q4 payload length does not match 18 bytes per 32 weights");
  }
  std::vector<Block4> blocks(nblocks);
  for (std::size_t b = 0; b < nblocks; ++b) {
    blocks[b] = decode_block(
        std::span<const std::uint8_t, kBlockBytes>(bytes.data() + b * kBlockBytes, kBlockBytes));
  }
  return QTensor(rows, cols, std::move(blocks));
}

}  // namespace stlm
