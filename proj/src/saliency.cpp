#include "flowseg/saliency.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "flowseg/embed_net.hpp"
#include "flowseg/error.hpp"

namespace flowseg {

namespace {

constexpr double kZeroNorm = 1e-9;

MeanMotion masked_mean(const FlowField& flow, const Mask& mask, bool& empty) {
  double su = 0.0, sv = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < flow.size(); ++i) {
    if (!mask.bits[i]) continue;
    su += flow.vectors[i].u;
    sv += flow.vectors[i].v;
    ++n;
  }
  empty = n == 0;
  if (empty) return {};
  return {su / static_cast<double>(n), sv / static_cast<double>(n)};
}

}  // namespace

int default_band_width(int width, int height) {
  return std::max(1, static_cast<int>(std::lround(0.02 * std::min(width, height))));
}

MeanMotion boundary_mean_flow(const FlowField& flow, int band_width) {
  const int limit = std::min(flow.width, flow.height);
  if (band_width < 1 || 2 * band_width >= limit) {
    fail(ErrorCode::BandTooWide, "band width " + std::to_string(band_width) + " invalid for " +
                                     std::to_string(flow.width) + "x" + std::to_string(flow.height));
  }
  double su = 0.0, sv = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < flow.height; ++y) {
    const bool row_in_band = y < band_width || y >= flow.height - band_width;
    for (int x = 0; x < flow.width; ++x) {
      if (!row_in_band && x >= band_width && x < flow.width - band_width) continue;
      su += flow.at(x, y).u;
      sv += flow.at(x, y).v;
      ++n;
    }
  }
  return {su / static_cast<double>(n), sv / static_cast<double>(n)};
}

std::vector<double> dissimilarity_map(const FlowField& flow, MeanMotion m) {
  const double m_norm = std::hypot(m.u, m.v);
  std::vector<double> s(flow.size());
  for (std::size_t i = 0; i < flow.size(); ++i) {
    const double xu = flow.vectors[i].u;
    const double xv = flow.vectors[i].v;
    const double x_norm = std::hypot(xu, xv);
    if (x_norm * m_norm < kZeroNorm) {
      const bool x_zero = x_norm < kZeroNorm;
      const bool m_zero = m_norm < kZeroNorm;
      s[i] = (x_zero && m_zero) ? 0.0 : 1.0;
      continue;
    }
    const double cos = std::clamp((xu * m.u + xv * m.v) / (x_norm * m_norm), -1.0, 1.0);
    s[i] = 1.0 - cos;
  }
  return s;
}

Mask downsample_majority(const Mask& mask, int block) {
  const int pw = padded_size(mask.width, block);
  const int ph = padded_size(mask.height, block);
  const int gw = pw / block;
  const int gh = ph / block;
  Mask out(gw, gh);
  const int half = block * block / 2;
  for (int gy = 0; gy < gh; ++gy) {
    for (int gx = 0; gx < gw; ++gx) {
      int votes = 0;
      for (int dy = 0; dy < block; ++dy) {
        const int y = reflect_index(gy * block + dy, mask.height);
        for (int dx = 0; dx < block; ++dx) {
          votes += mask.at(reflect_index(gx * block + dx, mask.width), y) ? 1 : 0;
        }
      }
      out.at(gx, gy) = votes > half ? 1 : 0;
    }
  }
  return out;
}

SaliencyPartition partition(const FlowField& flow, const std::vector<double>& dissimilarity, double delta,
                            MeanMotion boundary_mean) {
  if (dissimilarity.size() != flow.size()) fail(ErrorCode::DimMismatch, "dissimilarity map size mismatch");
  if (!(delta > 0.0 && delta < 2.0)) fail(ErrorCode::InvalidArgument, "delta must lie in (0, 2)");
  SaliencyPartition out;
  out.boundary_mean = boundary_mean;
  out.fg_mask = Mask(flow.width, flow.height);
  out.bg_mask = Mask(flow.width, flow.height);
  for (std::size_t i = 0; i < flow.size(); ++i) {
    const bool background = dissimilarity[i] < delta;
    out.bg_mask.bits[i] = background ? 1 : 0;
    out.fg_mask.bits[i] = background ? 0 : 1;
  }
  out.fg_mean = masked_mean(flow, out.fg_mask, out.fg_empty);
  out.bg_mean = masked_mean(flow, out.bg_mask, out.bg_empty);

  out.fg_mask_embed = downsample_majority(out.fg_mask, kGridScale);
  out.bg_mask_embed = out.fg_mask_embed;
  for (auto& bit : out.bg_mask_embed.bits) bit = bit ? 0 : 1;
  return out;
}

SaliencyPartition boundary_saliency(const FlowField& flow, double delta) {
  const auto m = boundary_mean_flow(flow, default_band_width(flow.width, flow.height));
  return partition(flow, dissimilarity_map(flow, m), delta, m);
}

}  // namespace flowseg
