#include "stlm/kernels.hpp"

#include <cstdlib>
#include <string>

#include "stlm/error.hpp"

namespace stlm::kernels {
namespace {

const KernelTable kScalar{Isa::Scalar, "scalar", &scalar::dequantize_row,
                          &scalar::qmatvec, &scalar::matvec};
#if STLM_HAVE_AVX2_KERNELS
const KernelTable kAvx2{Isa::Avx2, "avx2", &avx2::dequantize_row,
                        &avx2::qmatvec, &avx2::matvec};
#endif

bool force_scalar() {
  const char* env = std::getenv("STLM_FORCE_SCALAR");
  return env != nullptr && *env != '\0' && std::string(env) != "0";
}

}  // namespace

bool supported(Isa isa) {
  switch (isa) {
    case Isa::Scalar:
      return true;
    case Isa::Avx2:
#if STLM_HAVE_AVX2_KERNELS
      return __builtin_cpu_supports("avx2") != 0;
#else
      return false;
#endif
  }
  return false;
}

const KernelTable& table(Isa isa) {
  if (!supported(isa)) fail(ErrorCode::InvalidArgument, "kernel ISA not supported on this CPU");
#if STLM_HAVE_AVX2_KERNELS
  if (isa == Isa::Avx2) return kAvx2;
#endif
  return kScalar;
}

const KernelTable& active() {
  static const KernelTable& chosen =
      (!force_scalar() && supported(Isa::Avx2)) ? table(Isa::Avx2) : kScalar;
  return chosen;
}

}  // namespace stlm::kernels
