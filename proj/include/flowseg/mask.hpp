#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

namespace flowseg {

/// Binary per-pixel mask, row-major, bits are 0 or 1.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> bits;

  Mask() = default;
  Mask(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), bits(static_cast<std::size_t>(w) * h, fill) {}

  std::uint8_t& at(int x, int y) { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int x, int y) const { return bits[static_cast<std::size_t>(y) * width + x]; }
  std::size_t count() const;

  friend bool operator==(const Mask&, const Mask&) = default;
};

/// Writes binary PGM (P5, maxval 255): 0 = background, 255 = foreground.
void write_pgm(const std::filesystem::path& path, const Mask& mask);

/// Reads P5 (8- or 16-bit) or P2 PGM; any nonzero sample becomes foreground.
Mask read_pgm(const std::filesystem::path& path);

}  // namespace flowseg
