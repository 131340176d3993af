#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

namespace sal_lab::image {

// Row-major single-channel images. rot90 and transpose require square input.

std::vector<std::uint8_t> vflip(std::span<const std::uint8_t> px, std::size_t h, std::size_t w);
std::vector<std::uint8_t> hflip(std::span<const std::uint8_t> px, std::size_t h, std::size_t w);
/// Quarter turn clockwise.
std::vector<std::uint8_t> rot90(std::span<const std::uint8_t> px, std::size_t h, std::size_t w);
std::vector<std::uint8_t> transpose(std::span<const std::uint8_t> px, std::size_t h, std::size_t w);

}  // namespace sal_lab::image
