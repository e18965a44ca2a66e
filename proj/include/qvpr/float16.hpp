#pragma once

#include <bit>
#include <cstdint>

namespace qvpr {

// IEEE 754 binary16 (5 exponent bits, 10 mantissa bits) stored as raw
// uint16_t. Conversion from binary32 rounds to nearest-even; values beyond
// the f16 range saturate to infinity. Conversion back to binary32 is exact.

inline uint16_t f32_to_f16_bits(float value) {
  const uint32_t f = std::bit_cast<uint32_t>(value);
  const uint16_t sign = static_cast<uint16_t>((f & 0x80000000u) >> 16);
  const uint32_t exp = f & 0x7F800000u;
  uint32_t sig = f & 0x007FFFFFu;

  if (exp >= 0x47800000u) {  // |x| >= 2^16: overflow, inf or nan
    if (exp == 0x7F800000u && sig != 0) {
      uint16_t h = static_cast<uint16_t>(0x7C00u + (sig >> 13));
      if (h == 0x7C00u) h += 1;  // keep nan distinct from inf
      return static_cast<uint16_t>(sign | h);
    }
    return static_cast<uint16_t>(sign | 0x7C00u);
  }

  if (exp <= 0x38000000u) {  // |x| < 2^-14: subnormal half or zero
    if (exp < 0x33000000u) return sign;  // below half the smallest subnormal
    const uint32_t shift = 113u - (exp >> 23);
    sig |= 0x00800000u;
    sig >>= shift;
    // Round half to even; the shift may have dropped sticky bits, so the
    // original low bits decide whether an apparent tie really is one.
    if ((sig & 0x00003FFFu) != 0x00001000u || (f & 0x000007FFu) != 0) {
      sig += 0x00001000u;
    }
    return static_cast<uint16_t>(sign + (sig >> 13));
  }

  // Normal range. Rounding may carry into the exponent and, at the top of
  // the range, overflow to infinity; both fall out of the addition.
  const uint16_t hexp = static_cast<uint16_t>((exp - 0x38000000u) >> 13);
  if ((sig & 0x00003FFFu) != 0x00001000u) {
    sig += 0x00001000u;
  }
  return static_cast<uint16_t>(sign + hexp + (sig >> 13));
}

inline float f16_bits_to_f32(uint16_t h) {
  const uint32_t sign = static_cast<uint32_t>(h & 0x8000u) << 16;
  const uint32_t exp = (h >> 10) & 0x1Fu;
  uint32_t sig = h & 0x03FFu;

  uint32_t f;
  if (exp == 0) {
    if (sig == 0) {
      f = sign;
    } else {  // subnormal: renormalize
      uint32_t shift = 0;
      while ((sig & 0x0400u) == 0) {
        sig <<= 1;
        ++shift;
      }
      sig &= 0x03FFu;
      f = sign | ((113u - shift) << 23) | (sig << 13);
    }
  } else if (exp == 31) {
    f = sign | 0x7F800000u | (sig << 13);
  } else {
    f = sign | ((exp + 112u) << 23) | (sig << 13);
  }
  return std::bit_cast<float>(f);
}

inline float f16_round(float value) {
  return f16_bits_to_f32(f32_to_f16_bits(value));
}

}  // namespace qvpr
