#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include <Eigen/Core>

namespace flowseg {

/// One displacement vector in pixels/frame.
struct FlowVector {
  float u = 0.0f;
  float v = 0.0f;

  friend bool operator==(const FlowVector&, const FlowVector&) = default;
};

/// Dense optical flow, row-major, vectors.size() == width * height.
struct FlowField {
  int width = 0;
  int height = 0;
  std::vector<FlowVector> vectors;

  FlowField() = default;
  FlowField(int w, int h, FlowVector fill = {});

  std::size_t size() const { return vectors.size(); }
  FlowVector& at(int x, int y) { return vectors[static_cast<std::size_t>(y) * width + x]; }
  const FlowVector& at(int x, int y) const {
    return vectors[static_cast<std::size_t>(y) * width + x];
  }

  friend bool operator==(const FlowField&, const FlowField&) = default;
};

/// Three-channel color-coded flow in [-1, 1]. values is 3 x (width*height),
/// one column per pixel (row-major pixel order), channels R, G, B.
struct FlowImage {
  int width = 0;
  int height = 0;
  Eigen::MatrixXd values;
};

inline constexpr std::int64_t kDefaultMaxFlowPixels = std::int64_t{1} << 26;

/// Decodes a Middlebury .flo buffer ("PIEH", int32 w, int32 h, float32 u/v pairs,
/// all little-endian). Throws Error with BadMagic, Truncated, Malformed,
/// NonFinite or Oversize.
FlowField read_flo(std::span<const std::byte> bytes,
                   std::int64_t max_pixels = kDefaultMaxFlowPixels);
std::vector<std::byte> write_flo(const FlowField& flow);

FlowField read_flo_file(const std::filesystem::path& path,
                        std::int64_t max_pixels = kDefaultMaxFlowPixels);
void write_flo_file(const std::filesystem::path& path, const FlowField& flow);

// Middlebury color circle with 55 hue bins (RY=15, YG=6, GC=4, CB=11, BM=13, MR=6).
// Entries are the canonical integer table scaled to [0, 1].
inline constexpr int kColorWheelBins = 55;
std::span<const std::array<double, 3>> color_wheel();

/// RGB in [0, 1] for a flow vector already divided by the normalizing radius.
std::array<double, 3> flow_color(double fx, double fy);

/// Color-codes a field with per-frame maximum magnitude normalization and maps
/// the result affinely to [-1, 1].
FlowImage flow_to_image(const FlowField& flow);

/// Pads right/bottom by mirror reflection (edge sample not repeated) until both
/// dimensions are multiples of `multiple`.
FlowField reflect_pad(const FlowField& flow, int multiple);
int padded_size(int n, int multiple);
/// Mirror index into [0, n) for i in [0, n + pad).
int reflect_index(int i, int n);

}  // namespace flowseg
