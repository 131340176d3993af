#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <type_traits>

namespace sal_lab::binary {

/// Writes an unsigned integer or IEEE float little-endian, byte by byte.
template <typename V>
void put(std::ostream& out, V value) {
  using U = std::conditional_t<sizeof(V) == 8, std::uint64_t,
                               std::conditional_t<sizeof(V) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(V) == 2, std::uint16_t, std::uint8_t>>>;
  const U bits = std::bit_cast<U>(value);
  char bytes[sizeof(V)];
  for (std::size_t i = 0; i < sizeof(V); ++i) bytes[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
  out.write(bytes, sizeof(V));
}

/// Reads the counterpart of put(). `what` names the field for error messages.
template <typename V>
V get(std::istream& in, const char* what) {
  using U = std::conditional_t<sizeof(V) == 8, std::uint64_t,
                               std::conditional_t<sizeof(V) == 4, std::uint32_t,
                                                  std::conditional_t<sizeof(V) == 2, std::uint16_t, std::uint8_t>>>;
  const auto offset = in.tellg();
  unsigned char bytes[sizeof(V)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(V))) {
    throw std::runtime_error(std::string("truncated input reading ") + what + " at byte offset " +
                             std::to_string(static_cast<long long>(offset)));
  }
  U bits = 0;
  for (std::size_t i = 0; i < sizeof(V); ++i) bits |= static_cast<U>(bytes[i]) << (8 * i);
  return std::bit_cast<V>(bits);
}

}  // namespace sal_lab::binary
