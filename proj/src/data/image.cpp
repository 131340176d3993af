#include "sal_lab/data/image.hpp"

#include <stdexcept>

namespace sal_lab::image {

namespace {

void require_size(std::span<const std::uint8_t> px, std::size_t h, std::size_t w) {
  if (px.size() != h * w) throw std::invalid_argument("image: pixel count does not match height x width");
}

void require_square(std::size_t h, std::size_t w) {
  if (h != w) throw std::invalid_argument("image: rotation and transposition need square panels");
}

}  // namespace

std::vector<std::uint8_t> vflip(std::span<const std::uint8_t> px, std::size_t h, std::size_t w) {
  require_size(px, h, w);
  std::vector<std::uint8_t> out(px.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = px[(h - 1 - y) * w + x];
  }
  return out;
}

std::vector<std::uint8_t> hflip(std::span<const std::uint8_t> px, std::size_t h, std::size_t w) {
  require_size(px, h, w);
  std::vector<std::uint8_t> out(px.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = px[y * w + (w - 1 - x)];
  }
  return out;
}

std::vector<std::uint8_t> rot90(std::span<const std::uint8_t> px, std::size_t h, std::size_t w) {
  require_size(px, h, w);
  require_square(h, w);
  const std::size_t n = h;
  std::vector<std::uint8_t> out(px.size());
  // Clockwise: output (y, x) takes input (n-1-x, y).
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) out[y * n + x] = px[(n - 1 - x) * n + y];
  }
  return out;
}

std::vector<std::uint8_t> transpose(std::span<const std::uint8_t> px, std::size_t h, std::size_t w) {
  require_size(px, h, w);
  require_square(h, w);
  std::vector<std::uint8_t> out(px.size());
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) out[y * w + x] = px[x * w + y];
  }
  return out;
}

}  // namespace sal_lab::image
