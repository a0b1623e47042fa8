// SPDX-FileCopyrightText: Copyright (c) 2026 The chunkflow authors. All rights reserved.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <bit>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstring>
#include <limits>
#include <string>
#include <type_traits>

#include "chunkflow/error.hpp"

namespace chunkflow {

static_assert(std::endian::native == std::endian::little,
              "chunk payloads are stored little-endian and read in place");

// Numeric codes double as the on-disk element type code.
enum class ScalarKind : std::uint8_t { U8 = 0, I16 = 1, U16 = 2, F32 = 3, F64 = 4 };

constexpr std::size_t scalar_size(ScalarKind k) {
  switch (k) {
    case ScalarKind::U8: return 1;
    case ScalarKind::I16:
    case ScalarKind::U16: return 2;
    case ScalarKind::F32: return 4;
    case ScalarKind::F64: return 8;
  }
  return 0;
}

constexpr bool is_float(ScalarKind k) { return k == ScalarKind::F32 || k == ScalarKind::F64; }

// Element type: a scalar kind with 1 to 4 lanes (e.g. U8 x4 for RGBA pixels).
struct DataType {
  ScalarKind kind = ScalarKind::F32;
  std::uint8_t lanes = 1;

  static constexpr DataType u8(std::uint8_t n = 1) { return {ScalarKind::U8, n}; }
  static constexpr DataType i16(std::uint8_t n = 1) { return {ScalarKind::I16, n}; }
  static constexpr DataType u16(std::uint8_t n = 1) { return {ScalarKind::U16, n}; }
  static constexpr DataType f32(std::uint8_t n = 1) { return {ScalarKind::F32, n}; }
  static constexpr DataType f64(std::uint8_t n = 1) { return {ScalarKind::F64, n}; }

  constexpr DataType vec(std::uint8_t n) const { return {kind, n}; }
  constexpr std::size_t size() const { return scalar_size(kind) * lanes; }
  constexpr bool valid() const {
    return lanes >= 1 && lanes <= 4 && static_cast<std::uint8_t>(kind) <= 4;
  }
  friend constexpr bool operator==(DataType, DataType) = default;

  std::string name() const;
  static DataType parse(const std::string& s);
};

template <ScalarKind K> struct scalar_type;
template <> struct scalar_type<ScalarKind::U8> { using type = std::uint8_t; };
template <> struct scalar_type<ScalarKind::I16> { using type = std::int16_t; };
template <> struct scalar_type<ScalarKind::U16> { using type = std::uint16_t; };
template <> struct scalar_type<ScalarKind::F32> { using type = float; };
template <> struct scalar_type<ScalarKind::F64> { using type = double; };

// Calls f(std::type_identity<T>{}) with the C++ type for `k`.
template <class F>
decltype(auto) visit_scalar(ScalarKind k, F&& f) {
  switch (k) {
    case ScalarKind::U8: return f(std::type_identity<std::uint8_t>{});
    case ScalarKind::I16: return f(std::type_identity<std::int16_t>{});
    case ScalarKind::U16: return f(std::type_identity<std::uint16_t>{});
    case ScalarKind::F32: return f(std::type_identity<float>{});
    case ScalarKind::F64: return f(std::type_identity<double>{});
  }
  throw InvalidArgument("unknown scalar kind");
}

// Numeric conversion to T. Float to integer rounds to nearest (ties to even)
// and saturates; NaN becomes zero.
template <class T>
T convert_to(double v) {
  if constexpr (std::is_floating_point_v<T>) {
    return static_cast<T>(v);
  } else {
    if (std::isnan(v)) return T{0};
    constexpr double lo = static_cast<double>(std::numeric_limits<T>::min());
    constexpr double hi = static_cast<double>(std::numeric_limits<T>::max());
    double r = std::nearbyint(v);
    // nearbyint honours the current rounding mode; fix up if someone changed it.
    if (std::fabs(v - std::trunc(v)) == 0.5) {
      const double t = std::trunc(v);
      r = (std::fmod(t, 2.0) == 0.0) ? t : t + (v > 0 ? 1.0 : -1.0);
    }
    if (r <= lo) return std::numeric_limits<T>::min();
    if (r >= hi) return std::numeric_limits<T>::max();
    return static_cast<T>(r);
  }
}

// Value of `v` after conversion to the scalar kind, returned as double
// (every supported scalar value is exactly representable in double).
inline double round_to(ScalarKind k, double v) {
  return visit_scalar(k, [v]<class T>(std::type_identity<T>) {
    return static_cast<double>(convert_to<T>(v));
  });
}

inline double load_scalar(const std::byte* p, ScalarKind k) {
  return visit_scalar(k, [p]<class T>(std::type_identity<T>) {
    T t;
    std::memcpy(&t, p, sizeof(T));
    return static_cast<double>(t);
  });
}

inline void store_scalar(std::byte* p, ScalarKind k, double v) {
  visit_scalar(k, [p, v]<class T>(std::type_identity<T>) {
    const T t = convert_to<T>(v);
    std::memcpy(p, &t, sizeof(T));
  });
}

// Largest finite value of the kind (used as the non-uniform sentinel for integers).
inline double scalar_max(ScalarKind k) {
  return visit_scalar(k, []<class T>(std::type_identity<T>) {
    return static_cast<double>(std::numeric_limits<T>::max());
  });
}

inline double scalar_lowest(ScalarKind k) {
  return visit_scalar(k, []<class T>(std::type_identity<T>) {
    return static_cast<double>(std::numeric_limits<T>::lowest());
  });
}

}  // namespace chunkflow
