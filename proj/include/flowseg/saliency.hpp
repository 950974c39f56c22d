#pragma once

#include <vector>

#include "flowseg/flow_io.hpp"
#include "flowseg/mask.hpp"

namespace flowseg {

struct MeanMotion {
  double u = 0.0;
  double v = 0.0;
};

/// Boundary-prior split of one flow frame. Full-resolution masks cover the
/// flow's own dims; *_embed masks live on the reduced grid (padded dims / 4).
struct SaliencyPartition {
  Mask fg_mask;
  Mask bg_mask;
  MeanMotion boundary_mean;  // m
  MeanMotion fg_mean;        // m_f, zero when fg is empty
  MeanMotion bg_mean;        // m_b, zero when bg is empty
  bool fg_empty = true;
  bool bg_empty = true;
  Mask fg_mask_embed;
  Mask bg_mask_embed;
};

/// max(1, round(0.02 * min(width, height))).
int default_band_width(int width, int height);

/// Mean flow over the border ring of the given width. Throws BandTooWide unless
/// 1 <= band_width < min(width, height) / 2.
MeanMotion boundary_mean_flow(const FlowField& flow, int band_width);

/// s = 1 - cos(x, m) per pixel, in [0, 2]. When |x||m| is tiny: 0 if both
/// vectors are near zero, 1 if only one is.
std::vector<double> dissimilarity_map(const FlowField& flow, MeanMotion m);

/// Background = {s < delta}, foreground = the rest. The embedding-grid masks are
/// a 4x4 block majority vote over the reflect-padded masks, ties to background.
SaliencyPartition partition(const FlowField& flow, const std::vector<double>& dissimilarity, double delta,
                            MeanMotion boundary_mean = {});

/// boundary_mean_flow + dissimilarity_map + partition with the default band.
SaliencyPartition boundary_saliency(const FlowField& flow, double delta);

/// Majority vote of `mask` reflect-padded to multiples of `block`, ties -> 0.
Mask downsample_majority(const Mask& mask, int block);

}  // namespace flowseg
