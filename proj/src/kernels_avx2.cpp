// AVX2 variants. Compiled with -mavx2 and without FMA: every lane performs
// the exact multiply-then-add sequence of the scalar reference, vectorized
// across output rows (one row per lane) rather than across the reduction.

#include "stlm/kernels.hpp"

#if STLM_HAVE_AVX2_KERNELS

#include <immintrin.h>

#include <array>
#include <cstddef>
#include <cstdint>

namespace stlm::kernels::avx2 {
namespace {

constexpr std::size_t kLanes = 8;

// In-register transpose of an 8x8 float tile.
inline void transpose8(__m256& r0, __m256& r1, __m256& r2, __m256& r3,
                       __m256& r4, __m256& r5, __m256& r6, __m256& r7) {
  const __m256 t0 = _mm256_unpacklo_ps(r0, r1);
  const __m256 t1 = _mm256_unpackhi_ps(r0, r1);
  const __m256 t2 = _mm256_unpacklo_ps(r2, r3);
  const __m256 t3 = _mm256_unpackhi_ps(r2, r3);
  const __m256 t4 = _mm256_unpacklo_ps(r4, r5);
  const __m256 t5 = _mm256_unpackhi_ps(r4, r5);
  const __m256 t6 = _mm256_unpacklo_ps(r6, r7);
  const __m256 t7 = _mm256_unpackhi_ps(r6, r7);
  const __m256 s0 = _mm256_shuffle_ps(t0, t2, _MM_SHUFFLE(1, 0, 1, 0));
  const __m256 s1 = _mm256_shuffle_ps(t0, t2, _MM_SHUFFLE(3, 2, 3, 2));
  const __m256 s2 = _mm256_shuffle_ps(t1, t3, _MM_SHUFFLE(1, 0, 1, 0));
  const __m256 s3 = _mm256_shuffle_ps(t1, t3, _MM_SHUFFLE(3, 2, 3, 2));
  const __m256 s4 = _mm256_shuffle_ps(t4, t6, _MM_SHUFFLE(1, 0, 1, 0));
  const __m256 s5 = _mm256_shuffle_ps(t4, t6, _MM_SHUFFLE(3, 2, 3, 2));
  const __m256 s6 = _mm256_shuffle_ps(t5, t7, _MM_SHUFFLE(1, 0, 1, 0));
  const __m256 s7 = _mm256_shuffle_ps(t5, t7, _MM_SHUFFLE(3, 2, 3, 2));
  r0 = _mm256_permute2f128_ps(s0, s4, 0x20);
  r1 = _mm256_permute2f128_ps(s1, s5, 0x20);
  r2 = _mm256_permute2f128_ps(s2, s6, 0x20);
  r3 = _mm256_permute2f128_ps(s3, s7, 0x20);
  r4 = _mm256_permute2f128_ps(s0, s4, 0x31);
  r5 = _mm256_permute2f128_ps(s1, s5, 0x31);
  r6 = _mm256_permute2f128_ps(s2, s6, 0x31);
  r7 = _mm256_permute2f128_ps(s3, s7, 0x31);
}

// Accumulates 8 columns starting at x[0] into acc, rows given as 8 pointers
// to 8 consecutive floats each.
inline __m256 accumulate8x8(__m256 acc, const float* const* rows,
                            const float* x) {
  __m256 c0 = _mm256_loadu_ps(rows[0]);
  __m256 c1 = _mm256_loadu_ps(rows[1]);
  __m256 c2 = _mm256_loadu_ps(rows[2]);
  __m256 c3 = _mm256_loadu_ps(rows[3]);
  __m256 c4 = _mm256_loadu_ps(rows[4]);
  __m256 c5 = _mm256_loadu_ps(rows[5]);
  __m256 c6 = _mm256_loadu_ps(rows[6]);
  __m256 c7 = _mm256_loadu_ps(rows[7]);
  transpose8(c0, c1, c2, c3, c4, c5, c6, c7);
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c0, _mm256_broadcast_ss(x + 0)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c1, _mm256_broadcast_ss(x + 1)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c2, _mm256_broadcast_ss(x + 2)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c3, _mm256_broadcast_ss(x + 3)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c4, _mm256_broadcast_ss(x + 4)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c5, _mm256_broadcast_ss(x + 5)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c6, _mm256_broadcast_ss(x + 6)));
  acc = _mm256_add_ps(acc, _mm256_mul_ps(c7, _mm256_broadcast_ss(x + 7)));
  return acc;
}

inline void dequantize_block(const Block4& block, float* out) {
  const __m256 d = _mm256_set1_ps(block.scale());
  const __m128i bytes =
      _mm_loadu_si128(reinterpret_cast<const __m128i*>(block.packed.data()));
  const __m128i mask = _mm_set1_epi8(0x0F);
  const __m128i lo = _mm_and_si128(bytes, mask);
  const __m128i hi = _mm_and_si128(_mm_srli_epi16(bytes, 4), mask);
  // interleave back into element order 0..15 and 16..31
  const __m128i first = _mm_unpacklo_epi8(lo, hi);
  const __m128i second = _mm_unpackhi_epi8(lo, hi);
  const __m256i eight = _mm256_set1_epi32(8);
  const __m128i parts[4] = {first, _mm_srli_si128(first, 8), second,
                            _mm_srli_si128(second, 8)};
  for (int p = 0; p < 4; ++p) {
    const __m256i codes = _mm256_sub_epi32(_mm256_cvtepu8_epi32(parts[p]), eight);
    _mm256_storeu_ps(out + 8 * p, _mm256_mul_ps(_mm256_cvtepi32_ps(codes), d));
  }
}

}  // namespace

void dequantize_row(const Block4* blocks, std::size_t nblocks, float* out) {
  for (std::size_t b = 0; b < nblocks; ++b) {
    dequantize_block(blocks[b], out + b * kBlockSize);
  }
}

void qmatvec(const Block4* blocks, std::size_t rows, std::size_t cols,
             const float* x, float* y) {
  const std::size_t nb = cols / kBlockSize;
  const std::size_t full = rows - rows % kLanes;
  alignas(32) std::array<float, kLanes * kBlockSize> tile;

  for (std::size_t r0 = 0; r0 < full; r0 += kLanes) {
    __m256 acc = _mm256_setzero_ps();
    for (std::size_t b = 0; b < nb; ++b) {
      const float* row_ptrs[kLanes];
      for (std::size_t k = 0; k < kLanes; ++k) {
        dequantize_block(blocks[(r0 + k) * nb + b], tile.data() + k * kBlockSize);
        row_ptrs[k] = tile.data() + k * kBlockSize;
      }
      const float* xb = x + b * kBlockSize;
      for (std::size_t j = 0; j < kBlockSize; j += kLanes) {
        const float* sub[kLanes];
        for (std::size_t k = 0; k < kLanes; ++k) sub[k] = row_ptrs[k] + j;
        acc = accumulate8x8(acc, sub, xb + j);
      }
    }
    _mm256_storeu_ps(y + r0, acc);
  }
  if (full < rows) {
    scalar::qmatvec(blocks + full * nb, rows - full, cols, x, y + full);
  }
}

void matvec(const float* w, std::size_t rows, std::size_t cols,
            const float* x, float* y) {
  const std::size_t full = rows - rows % kLanes;
  const std::size_t vec_cols = cols - cols % kLanes;

  for (std::size_t r0 = 0; r0 < full; r0 += kLanes) {
    __m256 acc = _mm256_setzero_ps();
    const float* rows_ptr[kLanes];
    for (std::size_t j = 0; j < vec_cols; j += kLanes) {
      for (std::size_t k = 0; k < kLanes; ++k) rows_ptr[k] = w + (r0 + k) * cols + j;
      acc = accumulate8x8(acc, rows_ptr, x + j);
    }
    alignas(32) float lane[kLanes];
    _mm256_store_ps(lane, acc);
    for (std::size_t k = 0; k < kLanes; ++k) {
      const float* row = w + (r0 + k) * cols;
      for (std::size_t j = vec_cols; j < cols; ++j) lane[k] += row[j] * x[j];
      y[r0 + k] = lane[k];
    }
  }
  if (full < rows) {
    scalar::matvec(w + full * cols, rows - full, cols, x, y + full);
  }
}

}  // namespace stlm::kernels::avx2

#endif  // STLM_HAVE_AVX2_KERNELS
