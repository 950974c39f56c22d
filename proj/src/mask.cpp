#include "flowseg/mask.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <iterator>
#include <string>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

class PgmReader {
 public:
  PgmReader(std::vector<unsigned char> data, std::string name)
      : data_(std::move(data)), name_(std::move(name)) {}

  std::string token() {
    skip_space_and_comments();
    std::string out;
    while (pos_ < data_.size() && !std::isspace(data_[pos_])) out.push_back(static_cast<char>(data_[pos_++]));
    if (out.empty()) fail(ErrorCode::Truncated, name_ + ": unexpected end of PGM header");
    return out;
  }

  int number() {
    const auto tok = token();
    try {
      return std::stoi(tok);
    } catch (const std::exception&) {
      fail(ErrorCode::Malformed, name_ + ": bad PGM header field '" + tok + "'");
    }
  }

  // Exactly one whitespace byte separates the header from the raster.
  void skip_single_space() {
    if (pos_ >= data_.size()) fail(ErrorCode::Truncated, name_ + ": missing PGM raster");
    ++pos_;
  }

  std::size_t remaining() const { return data_.size() - pos_; }
  unsigned char byte() { return data_[pos_++]; }

 private:
  void skip_space_and_comments() {
    while (pos_ < data_.size()) {
      if (std::isspace(data_[pos_])) {
        ++pos_;
      } else if (data_[pos_] == '#') {
        while (pos_ < data_.size() && data_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
  }

  std::vector<unsigned char> data_;
  std::string name_;
  std::size_t pos_ = 0;
};

}  // namespace

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](auto b) { return b != 0; }));
}

void write_pgm(const std::filesystem::path& path, const Mask& mask) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  std::vector<char> raster(mask.bits.size());
  std::transform(mask.bits.begin(), mask.bits.end(), raster.begin(),
                 [](std::uint8_t b) { return static_cast<char>(b ? 255 : 0); });
  out.write(raster.data(), static_cast<std::streamsize>(raster.size()));
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

Mask read_pgm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::vector<unsigned char> data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  PgmReader reader(std::move(data), path.string());

  const auto magic = reader.token();
  if (magic != "P5" && magic != "P2") fail(ErrorCode::BadMagic, path.string() + ": not a PGM file");
  const int width = reader.number();
  const int height = reader.number();
  const int maxval = reader.number();
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 65535) {
    fail(ErrorCode::Malformed, path.string() + ": invalid PGM header");
  }

  Mask mask(width, height);
  if (magic == "P2") {
    for (auto& bit : mask.bits) bit = reader.number() != 0 ? 1 : 0;
    return mask;
  }
  reader.skip_single_space();
  const std::size_t bytes_per_sample = maxval > 255 ? 2 : 1;
  if (reader.remaining() < mask.bits.size() * bytes_per_sample) {
    fail(ErrorCode::Truncated, path.string() + ": PGM raster is short");
  }
  for (auto& bit : mask.bits) {
    unsigned value = reader.byte();
    if (bytes_per_sample == 2) value = (value << 8) | reader.byte();
    bit = value != 0 ? 1 : 0;
  }
  return mask;
}

}  // namespace flowseg
