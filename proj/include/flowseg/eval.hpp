#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flowseg/mask.hpp"

namespace flowseg {

/// |A and B| / |A or B|; 1 when both masks are empty. Throws DimMismatch.
double jaccard(const Mask& a, const Mask& b);

struct FrameScore {
  std::string frame;  // file stem
  double j = 0.0;
};

struct TimingStats {
  int frames = 0;
  double total_seconds = 0.0;
  double seconds_per_frame() const { return frames > 0 ? total_seconds / frames : 0.0; }
};

struct SequenceReport {
  std::string name;
  std::vector<FrameScore> frames;
  std::vector<std::string> skipped;  // predictions without ground truth
  double mean_j = 0.0;
  std::optional<TimingStats> timing;
};

struct EvalReport {
  std::vector<SequenceReport> sequences;
  double mean_j = 0.0;  // mean of the per-sequence means
  std::optional<TimingStats> timing;
};

/// Name of the per-frame timing file `segment` leaves next to its masks:
/// CSV with header "frame,seconds".
inline constexpr const char* kTimingFile = "timing.csv";

/// Pairs <stem>.pgm files by stem, ordered by frame number. Predictions with no
/// ground truth are skipped and listed; ground truth with no prediction throws
/// FrameCountMismatch. Throws EmptyDir if either directory has no masks.
SequenceReport evaluate_sequence(const std::filesystem::path& pred_dir, const std::filesystem::path& gt_dir);

/// A directory holding masks is one sequence; otherwise every subdirectory of
/// gt_root is a sequence matched by name under pred_root.
EvalReport evaluate_dataset(const std::filesystem::path& pred_root, const std::filesystem::path& gt_root);

/// Per-frame CSV: sequence,frame,j
void write_eval_csv(const std::filesystem::path& path, const EvalReport& report);

std::optional<TimingStats> read_timing(const std::filesystem::path& path);

/// Mask files (*.pgm) in a directory ordered by frame number, then by name.
std::vector<std::filesystem::path> list_frames(const std::filesystem::path& dir, const std::string& extension);

}  // namespace flowseg
