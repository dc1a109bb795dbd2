#pragma once

#include <cstdint>

namespace stlm {

// IEEE 754 binary16 <-> binary32, round-to-nearest-even on narrowing.
std::uint16_t float_to_half(float value);
float half_to_float(std::uint16_t bits);

inline float round_trip_half(float value) {
  return half_to_float(float_to_half(value));
}

}  // namespace stlm
