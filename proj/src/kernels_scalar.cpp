#include <cstddef>

#include "stlm/kernels.hpp"

namespace stlm::kernels::scalar {

void dequantize_row(const Block4* blocks, std::size_t nblocks, float* out) {
  for (std::size_t b = 0; b < nblocks; ++b) {
    const float d = blocks[b].scale();
    for (std::size_t i = 0; i < kBlockSize; ++i) {
      out[b * kBlockSize + i] =
          static_cast<float>(static_cast<int>(blocks[b].code(i)) - 8) * d;
    }
  }
}

void qmatvec(const Block4* blocks, std::size_t rows, std::size_t cols,
             const float* x, float* y) {
  const std::size_t nb = cols / kBlockSize;
  for (std::size_t r = 0; r < rows; ++r) {
    const Block4* row = blocks + r * nb;
    float acc = 0.0f;
    for (std::size_t b = 0; b < nb; ++b) {
      const float d = row[b].scale();
      const float* xb = x + b * kBlockSize;
      for (std::size_t i = 0; i < kBlockSize; ++i) {
        const float w = static_cast<float>(static_cast<int>(row[b].code(i)) - 8) * d;
        acc += w * xb[i];
      }
    }
    y[r] = acc;
  }
}

void matvec(const float* w, std::size_t rows, std::size_t cols,
            const float* x, float* y) {
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = w + r * cols;
    float acc = 0.0f;
    for (std::size_t j = 0; j < cols; ++j) acc += row[j] * x[j];
    y[r] = acc;
  }
}

}  // namespace stlm::kernels::scalar
