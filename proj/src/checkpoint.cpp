#include "flowseg/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

constexpr char kMagic[4] = {'F', 'S', 'C', 'K'};

void put_u32(std::vector<std::byte>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((v >> (8 * i)) & 0xffu));
}

class Cursor {
 public:
  explicit Cursor(std::span<const std::byte> bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    if (bytes_.size() - pos_ < 4) fail(ErrorCode::Truncated, "checkpoint ends early");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += 4;
    return v;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  std::span<const std::byte> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::byte> encode_checkpoint(const NetParams<float>& params) {
  std::vector<std::byte> out;
  out.reserve(12 + static_cast<std::size_t>(params.parameter_count()) * 4 + kParamCount * 8);
  for (char c : kMagic) out.push_back(static_cast<std::byte>(c));
  put_u32(out, kCheckpointVersion);
  put_u32(out, kParamCount);
  for (const auto& t : params.tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.rows()));
    put_u32(out, static_cast<std::uint32_t>(t.cols()));
    for (Eigen::Index i = 0; i < t.size(); ++i) put_u32(out, std::bit_cast<std::uint32_t>(t.data()[i]));
  }
  return out;
}

NetParams<float> decode_checkpoint(std::span<const std::byte> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    fail(ErrorCode::BadMagic, "not a flowseg checkpoint");
  }
  Cursor cur(bytes.subspan(4));
  const auto version = cur.u32();
  if (version != kCheckpointVersion) {
    fail(ErrorCode::Malformed, "unsupported checkpoint version " + std::to_string(version));
  }
  if (cur.u32() != kParamCount) fail(ErrorCode::Malformed, "checkpoint tensor count mismatch");

  auto params = NetParams<float>::zeros();
  for (int i = 0; i < kParamCount; ++i) {
    const auto shape = param_shape(static_cast<Param>(i));
    const auto rows = cur.u32();
    const auto cols = cur.u32();
    if (rows != static_cast<std::uint32_t>(shape[0]) || cols != static_cast<std::uint32_t>(shape[1])) {
      fail(ErrorCode::Malformed, "shape mismatch for " + std::string(param_name(static_cast<Param>(i))));
    }
    auto& t = params.tensors[i];
    for (Eigen::Index j = 0; j < t.size(); ++j) {
      t.data()[j] = std::bit_cast<float>(cur.u32());
      if (!std::isfinite(t.data()[j])) fail(ErrorCode::NonFinite, "checkpoint holds non-finite weights");
    }
  }
  if (!cur.at_end()) fail(ErrorCode::Malformed, "trailing bytes in checkpoint");
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const NetParams<float>& params) {
  const auto bytes = encode_checkpoint(params);
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::Io, "cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::Io, "write failed for " + path.string());
}

NetParams<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::Io, "cannot open " + path.string());
  std::vector<char> raw((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_checkpoint(std::as_bytes(std::span(raw)));
}

}  // namespace flowseg
