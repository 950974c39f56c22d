#include "flowseg/flow_io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <numbers>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

constexpr char kMagic[4] = {'P', 'I', 'E', 'H'};
constexpr std::size_t kHeaderBytes = 12;

std::uint32_t load_u32le(const std::byte* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

void store_u32le(std::byte* p, std::uint32_t value) {
  p[0] = static_cast<std::byte>(value & 0xffu);
  p[1] = static_cast<std::byte>((value >> 8) & 0xffu);
  p[2] = static_cast<std::byte>((value >> 16) & 0xffu);
  p[3] = static_cast<std::byte>((value >> 24) & 0xffu);
}

std::array<std::array<double, 3>, kColorWheelBins> make_color_wheel() {
  constexpr int RY = 15, YG = 6, GC = 4, CB = 11, BM = 13, MR = 6;
  std::array<std::array<double, 3>, kColorWheelBins> wheel{};
  int k = 0;
  auto set = [&](int r, int g, int b) {
    wheel[k++] = {r / 255.0, g / 255.0, b / 255.0};
  };
  for (int i = 0; i < RY; ++i) set(255, 255 * i / RY, 0);
  for (int i = 0; i < YG; ++i) set(255 - 255 * i / YG, 255, 0);
  for (int i = 0; i < GC; ++i) set(0, 255, 255 * i / GC);
  for (int i = 0; i < CB; ++i) set(0, 255 - 255 * i / CB, 255);
  for (int i = 0; i < BM; ++i) set(255 * i / BM, 0, 255);
  for (int i = 0; i < MR; ++i) set(255, 0, 255 - 255 * i / MR);
  return wheel;
}

}  // namespace

FlowField::FlowField(int w, int h, FlowVector fill)
    : width(w), height(h), vectors(static_cast<std::size_t>(w) * h, fill) {}

FlowField read_flo(std::span<const std::byte> bytes, std::int64_t max_pixels) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::BadMagic, "flow buffer does not start with PIEH");
  }
  if (bytes.size() < kHeaderBytes) {
    fail(ErrorCode::Truncated, "flow header is incomplete");
  }
  const auto width = static_cast<std::int32_t>(load_u32le(bytes.data() + 4));
  const auto height = static_cast<std::int32_t>(load_u32le(bytes.data() + 8));
  if (width <= 0 || height <= 0) {
    fail(ErrorCode::Malformed, "non-positive flow dimensions " + std::to_string(width) + "x" +
                                   std::to_string(height));
  }
  const std::int64_t pixels = std::int64_t{width} * height;
  if (pixels > max_pixels) {
    fail(ErrorCode::Oversize, std::to_string(pixels) + " pixels exceeds cap of " +
                                  std::to_string(max_pixels));
  }
  const std::size_t payload = static_cast<std::size_t>(pixels) * 8;
  if (bytes.size() - kHeaderBytes < payload) {
    fail(ErrorCode::Truncated, "flow payload shorter than header promises");
  }
  if (bytes.size() - kHeaderBytes > payload) {
    fail(ErrorCode::Malformed, "trailing bytes after flow payload");
  }

  FlowField flow(width, height);
  const std::byte* p = bytes.data() + kHeaderBytes;
  for (auto& vec : flow.vectors) {
    vec.u = std::bit_cast<float>(load_u32le(p));
    vec.v = std::bit_cast<float>(load_u32le(p + 4));
    p += 8;
    if (!std::isfinite(vec.u) || !std::isfinite(vec.v)) {
      fail(ErrorCode::NonFinite, "flow contains NaN or Inf");
    }
  }
  return flow;
}

std::vector<std::byte> write_flo(const FlowField& flow) {
  std::vector<std::byte> out(kHeaderBytes + flow.vectors.size() * 8);
  std::memcpy(out.data(), kMagic, 4);
  store_u32le(out.data() + 4, static_cast<std::uint32_t>(flow.width));
  store_u32le(out.data() + 8, static_cast<std::uint32_t>(flow.height));
  std::byte* p = out.data() + kHeaderBytes;
  for (const auto& vec : flow.vectors) {
    store_u32le(p, std::bit_cast<std::uint32_t>(vec.u));
    store_u32le(p + 4, std::bit_cast<std::uint32_t>(vec.v));
    p += 8;
  }
  return out;
}

FlowField read_flo_file(const std::filesystem::path& path, std::int64_t max_pixels) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return read_flo(std::as_bytes(std::span(raw)), max_pixels);
}

void write_flo_file(const std::filesystem::path& path, const FlowField& flow) {
  const auto bytes = write_flo(flow);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

std::span<const std::array<double, 3>> color_wheel() {
  static const auto wheel = make_color_wheel();
  return wheel;
}

std::array<double, 3> flow_color(double fx, double fy) {
  const auto wheel = color_wheel();
  const double rad = std::sqrt(fx * fx + fy * fy);
  const double a = std::atan2(-fy, -fx) / std::numbers::pi;
  const double fk = (a + 1.0) / 2.0 * (kColorWheelBins - 1);
  const int k0 = static_cast<int>(fk);
  const int k1 = (k0 + 1) % kColorWheelBins;
  const double f = fk - k0;
  std::array<double, 3> rgb{};
  for (int b = 0; b < 3; ++b) {
    double col = (1.0 - f) * wheel[k0][b] + f * wheel[k1][b];
    if (rad <= 1.0) {
      col = 1.0 - rad * (1.0 - col);
    } else {
      col *= 0.75;
    }
    rgb[b] = col;
  }
  return rgb;
}

FlowImage flow_to_image(const FlowField& flow) {
  double max_rad = 0.0;
  for (const auto& vec : flow.vectors) {
    max_rad = std::max(max_rad, std::hypot(double{vec.u}, double{vec.v}));
  }
  const double divisor = max_rad < 1e-9 ? 1.0 : max_rad;

  FlowImage image;
  image.width = flow.width;
  image.height = flow.height;
  image.values.resize(3, static_cast<Eigen::Index>(flow.size()));
  for (std::size_t i = 0; i < flow.size(); ++i) {
    const auto& vec = flow.vectors[i];
    const auto rgb = flow_color(vec.u / divisor, vec.v / divisor);
    for (int c = 0; c < 3; ++c) {
      image.values(c, static_cast<Eigen::Index>(i)) = std::clamp(2.0 * rgb[c] - 1.0, -1.0, 1.0);
    }
  }
  return image;
}

int padded_size(int n, int multiple) { return (n + multiple - 1) / multiple * multiple; }

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

FlowField reflect_pad(const FlowField& flow, int multiple) {
  const int w = padded_size(flow.width, multiple);
  const int h = padded_size(flow.height, multiple);
  if (w == flow.width && h == flow.height) return flow;
  FlowField out(w, h);
  for (int y = 0; y < h; ++y) {
    const int sy = reflect_index(y, flow.height);
    for (int x = 0; x < w; ++x) {
      out.at(x, y) = flow.at(reflect_index(x, flow.width), sy);
    }
  }
  return out;
}

}  // namespace flowseg
