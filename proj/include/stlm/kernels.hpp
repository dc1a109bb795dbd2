#pragma once

// Runtime-selected inner loops for the quantized and dense linear algebra.
//
// Every ISA variant implements the same arithmetic, in the same order, so
// results are bit-identical across variants. Selection happens once per
// process: the widest ISA the CPU reports, unless STLM_FORCE_SCALAR is set
// in the environment.

#include <cstddef>
#include <string_view>

#include "stlm/qtensor.hpp"

namespace stlm::kernels {

enum class Isa { Scalar, Avx2 };

struct KernelTable {
  Isa isa;
  std::string_view name;
  // out[0 .. nblocks*32) = dequantized values
  void (*dequantize_row)(const Block4* blocks, std::size_t nblocks, float* out);
  // y[r] = sum_j deq(w)[r][j] * x[j], left-to-right per row
  void (*qmatvec)(const Block4* blocks, std::size_t rows, std::size_t cols,
                  const float* x, float* y);
  void (*matvec)(const float* w, std::size_t rows, std::size_t cols,
                 const float* x, float* y);
};

bool supported(Isa isa);
// Throws InvalidArgument for an ISA this build or CPU cannot run.
const KernelTable& table(Isa isa);
const KernelTable& active();

namespace scalar {
void dequantize_row(const Block4* blocks, std::size_t nblocks, float* out);
void qmatvec(const Block4* blocks, std::size_t rows, std::size_t cols,
             const float* x, float* y);
void matvec(const float* w, std::size_t rows, std::size_t cols,
            const float* x, float* y);
}  // namespace scalar

#if defined(__x86_64__) || defined(_M_X64)
#define STLM_HAVE_AVX2_KERNELS 1
namespace avx2 {
void dequantize_row(const Block4* blocks, std::size_t nblocks, float* out);
void qmatvec(const Block4* blocks, std::size_t rows, std::size_t cols,
             const float* x, float* y);
void matvec(const float* w, std::size_t rows, std::size_t cols,
            const float* x, float* y);
}  // namespace avx2
#else
#define STLM_HAVE_AVX2_KERNELS 0
#endif

}  // namespace stlm::kernels
