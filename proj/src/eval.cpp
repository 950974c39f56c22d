#include "flowseg/eval.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "flowseg/error.hpp"

namespace flowseg {

namespace fs = std::filesystem;

namespace {

std::optional<long long> frame_number(const std::string& stem) {
  long long value = 0;
  const char* end = stem.data() + stem.size();
  auto [ptr, ec] = std::from_chars(stem.data(), end, value);
  if (ec != std::errc() || ptr != end) return std::nullopt;
  return value;
}

bool frame_less(const fs::path& a, const fs::path& b) {
  const std::string sa = a.stem().string(), sb = b.stem().string();
  const auto na = frame_number(sa), nb = frame_number(sb);
  if (na && nb && *na != *nb) return *na < *nb;
  if (na.has_value() != nb.has_value()) return na.has_value();
  return sa < sb;
}

double mean(const std::vector<double>& values) {
  if (values.empty()) return 0.0;
  return std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
}

bool has_masks(const fs::path& dir) { return !list_frames(dir, ".pgm").empty(); }

}  // namespace

double jaccard(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height || a.bits.size() != b.bits.size()) {
    fail(ErrorCode::DimMismatch, "mask sizes differ");
  }
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.bits.size(); ++i) {
    const bool x = a.bits[i] != 0, y = b.bits[i] != 0;
    inter += x && y;
    uni += x || y;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<fs::path> list_frames(const fs::path& dir, const std::string& extension) {
  std::vector<fs::path> files;
  std::error_code ec;
  if (!fs::is_directory(dir, ec)) return files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file() && entry.path().extension() == extension) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end(), frame_less);
  return files;
}

std::optional<TimingStats> read_timing(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  TimingStats stats;
  std::string line;
  std::getline(in, line);  // header
  while (std::getline(in, line)) {
    const auto comma = line.find(',');
    if (comma == std::string::npos) continue;
    try {
      stats.total_seconds += std::stod(line.substr(comma + 1));
      ++stats.frames;
    } catch (const std::exception&) {
      fail(ErrorCode::Malformed, "bad timing row in " + path.string() + ": " + line);
    }
  }
  return stats;
}

SequenceReport evaluate_sequence(const fs::path& pred_dir, const fs::path& gt_dir) {
  const auto preds = list_frames(pred_dir, ".pgm");
  const auto gts = list_frames(gt_dir, ".pgm");
  if (preds.empty()) fail(ErrorCode::EmptyDir, "no masks in " + pred_dir.string());
  if (gts.empty()) fail(ErrorCode::EmptyDir, "no masks in " + gt_dir.string());

  std::map<std::string, fs::path> gt_by_stem;
  for (const auto& p : gts) gt_by_stem.emplace(p.stem().string(), p);

  SequenceReport report;
  report.name = pred_dir.filename().string();
  std::vector<double> scores;
  for (const auto& p : preds) {
    const std::string stem = p.stem().string();
    const auto it = gt_by_stem.find(stem);
    if (it == gt_by_stem.end()) {
      report.skipped.push_back(stem);
      continue;
    }
    const double j = jaccard(read_pgm(p), read_pgm(it->second));
    report.frames.push_back({stem, j});
    scores.push_back(j);
    gt_by_stem.erase(it);
  }
  if (!gt_by_stem.empty()) {
    fail(ErrorCode::FrameCountMismatch, std::to_string(gt_by_stem.size()) + " ground-truth frame(s) in " +
                                            gt_dir.string() + " have no prediction, first: " +
                                            gt_by_stem.begin()->first);
  }
  report.mean_j = mean(scores);
  report.timing = read_timing(pred_dir / kTimingFile);
  return report;
}

EvalReport evaluate_dataset(const fs::path& pred_root, const fs::path& gt_root) {
  EvalReport report;
  if (has_masks(gt_root) || has_masks(pred_root)) {
    report.sequences.push_back(evaluate_sequence(pred_root, gt_root));
  } else {
    std::vector<fs::path> dirs;
    std::error_code ec;
    if (fs::is_directory(gt_root, ec)) {
      for (const auto& entry : fs::directory_iterator(gt_root)) {
        if (entry.is_directory()) dirs.push_back(entry.path());
      }
    }
    if (dirs.empty()) fail(ErrorCode::EmptyDir, "no masks or sequences in " + gt_root.string());
    std::sort(dirs.begin(), dirs.end());
    for (const auto& gt_dir : dirs) {
      SequenceReport seq = evaluate_sequence(pred_root / gt_dir.filename(), gt_dir);
      seq.name = gt_dir.filename().string();
      report.sequences.push_back(std::move(seq));
    }
  }
  std::vector<double> means;
  for (const auto& seq : report.sequences) {
    means.push_back(seq.mean_j);
    if (seq.timing) {
      if (!report.timing) report.timing = TimingStats{};
      report.timing->frames += seq.timing->frames;
      report.timing->total_seconds += seq.timing->total_seconds;
    }
  }
  report.mean_j = mean(means);
  return report;
}

void write_eval_csv(const fs::path& path, const EvalReport& report) {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::Io, "cannot write " + path.string());
  out << "sequence,frame,j\n";
  out.precision(17);
  for (const auto& seq : report.sequences) {
    for (const auto& f : seq.frames) out << seq.name << ',' << f.frame << ',' << f.j << '\n';
  }
  if (!out) fail(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace flowseg
