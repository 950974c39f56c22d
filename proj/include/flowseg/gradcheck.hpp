#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace flowseg {

struct GradCheckOptions {
  double step = 1e-5;             // central difference half-width
  double tolerance = 1e-4;        // max relative error
  double denominator_floor = 1e-6;
  int coordinates = 64;           // checked coordinates per case
  int image_size = 8;             // composite-path input is image_size x image_size
};

struct GradCheckCase {
  std::string name;
  int checked = 0;
  int skipped = 0;                // coordinates whose perturbation crossed a ReLU/pool kink
  double max_relative_error = 0.0;
  bool passed = false;
};

struct GradCheckReport {
  std::uint64_t seed = 0;
  std::vector<GradCheckCase> cases;

  bool passed() const;
};

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Central finite differences against the analytic gradients of: the four
/// losses, l2 normalization, the attention branch on a 4x4 map, and the full
/// composite objective w.r.t. network parameters (labels, prototypes and
/// saliency anchors held fixed).
GradCheckReport run_gradcheck(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace flowseg
