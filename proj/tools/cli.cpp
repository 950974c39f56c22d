#include "cli.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include <CLI11.hpp>

#include "flowseg/checkpoint.hpp"
#include "flowseg/error.hpp"
#include "flowseg/eval.hpp"
#include "flowseg/flow_io.hpp"
#include "flowseg/gradcheck.hpp"
#include "flowseg/pipeline.hpp"
#include "flowseg/synth.hpp"

namespace flowseg::cli {

namespace fs = std::filesystem;

namespace {

struct PipelineFlags {
  PipelineConfig config;
  std::string init = "normal";
  std::string init_from;
};

void add_pipeline_flags(CLI::App* cmd, PipelineFlags& f) {
  auto& c = f.config;
  cmd->add_option("--k", c.k, "Number of prototypes")->capture_default_str();
  cmd->add_option("--kappa", c.weights.kappa, "Sinkhorn entropy weight")->capture_default_str();
  cmd->add_option("--delta", c.weights.delta, "Background threshold on 1 - cos")->capture_default_str();
  cmd->add_option("--eta", c.weights.eta, "Prototype background threshold")->capture_default_str();
  cmd->add_option("--lambda1", c.weights.lambda1, "Prototype loss weight")->capture_default_str();
  cmd->add_option("--lambda2", c.weights.lambda2, "Cluster contrastive loss weight")->capture_default_str();
  cmd->add_option("--lambda3", c.weights.lambda3, "Saliency contrastive loss weight")->capture_default_str();
  cmd->add_option("--tmax", c.weights.t_max, "Iterations on the first frame")->capture_default_str();
  cmd->add_option("--frame-iters", c.per_frame_iters, "Iterations on later frames")->capture_default_str();
  cmd->add_option("--pretrain-epochs", c.pretrain_epochs, "Reconstruction-only epochs before the first frame")
      ->capture_default_str();
  cmd->add_option("--init", f.init, "Prototype init")
      ->check(CLI::IsMember({"normal", "zeros", "ones", "orthogonal", "uniform01", "truncated_normal"}))
      ->capture_default_str();
  cmd->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  cmd->add_option("--init-from", f.init_from, "Checkpoint to start from (skips pretraining)");
}

SequenceState start_state(const PipelineFlags& f, const FlowField& first) {
  PipelineConfig config = f.config;
  config.init = parse_init_strategy(f.init);
  if (!f.init_from.empty()) return make_state(config, load_checkpoint(f.init_from));
  SequenceState state = make_state(config);
  pretrain(state, std::span<const FlowField>(&first, 1), config.pretrain_epochs);
  return state;
}

std::vector<fs::path> sequence_dirs(const fs::path& flows) {
  if (!list_frames(flows, ".flo").empty()) return {flows};
  std::vector<fs::path> dirs;
  std::error_code ec;
  if (fs::is_directory(flows, ec)) {
    for (const auto& entry : fs::directory_iterator(flows)) {
      if (entry.is_directory() && !list_frames(entry.path(), ".flo").empty()) dirs.push_back(entry.path());
    }
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) fail(ErrorCode::EmptyDir, "no .flo files in " + flows.string());
  return dirs;
}

void segment_sequence(const PipelineFlags& flags, const fs::path& flow_dir, const fs::path& out_dir,
                      std::ofstream* log, const std::string& checkpoint_out, std::ostream& out) {
  const auto files = list_frames(flow_dir, ".flo");
  if (files.empty()) fail(ErrorCode::EmptyDir, "no .flo files in " + flow_dir.string());
  fs::create_directories(out_dir);
  std::ofstream timing(out_dir / kTimingFile);
  if (!timing) fail(ErrorCode::Io, "cannot write " + (out_dir / kTimingFile).string());
  timing << "frame,seconds\n";

  IterationObserver observer;
  if (log) {
    observer = [log](const IterationRecord& r) {
      *log << r.iteration << ',' << r.losses.recon << ',' << r.losses.proto << ',' << r.losses.cluster << ','
           << r.losses.saliency << ',' << r.total << '\n';
    };
  }

  std::optional<SequenceState> state;
  double total = 0.0;
  for (const auto& file : files) {
    const FlowField flow = read_flo_file(file);
    const auto t0 = std::chrono::steady_clock::now();
    if (!state) state = start_state(flags, flow);
    const FrameResult result = process_frame(*state, flow, observer);
    const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    total += seconds;
    write_pgm(out_dir / (file.stem().string() + ".pgm"), result.mask);
    timing << file.stem().string() << ',' << seconds << '\n';
    if (result.prototype_labels.background_empty) {
      out << "warning: " << file.filename().string() << ": empty background set, all prototypes foreground\n";
    }
  }
  if (!checkpoint_out.empty()) save_checkpoint(checkpoint_out, state->params);
  out << flow_dir.string() << ": " << files.size() << " frames, " << total / static_cast<double>(files.size())
      << " s/frame\n";
}

void write_embedding(const fs::path& path, const EmbeddingMap& map) {
  std::ofstream file(path, std::ios::binary);
  if (!file) fail(ErrorCode::Io, "cannot write " + path.string());
  file << "flowseg-embedding\nwidth " << map.width << "\nheight " << map.height << "\ndim " << map.dim()
       << "\nnormalized " << (map.normalized ? 1 : 0) << "\ndtype float32-le\norder pixel-major\nend\n";
  std::vector<unsigned char> bytes;
  bytes.reserve(static_cast<std::size_t>(map.features.size()) * 4);
  for (Eigen::Index s = 0; s < map.features.cols(); ++s) {
    for (Eigen::Index d = 0; d < map.features.rows(); ++d) {
      const auto bits = std::bit_cast<std::uint32_t>(static_cast<float>(map.features(d, s)));
      for (int b = 0; b < 4; ++b) bytes.push_back(static_cast<unsigned char>(bits >> (8 * b)));
    }
  }
  file.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!file) fail(ErrorCode::Io, "write failed: " + path.string());
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Online motion segmentation of optical-flow sequences"};
  app.require_subcommand(1);

  std::string spec_path, synth_out;
  auto* synth = app.add_subcommand("synth", "Render a synthetic flow sequence with ground truth");
  synth->add_option("--spec", spec_path, "Scene spec (key=value)")->required();
  synth->add_option("--out", synth_out, "Output directory")->required();

  PipelineFlags seg_flags;
  std::string flows_dir, seg_out, log_path, checkpoint_out;
  auto* segment = app.add_subcommand("segment", "Segment every frame of a flow sequence");
  segment->add_option("--flows", flows_dir, "Directory of .flo files (or of sequence directories)")->required();
  segment->add_option("--out", seg_out, "Mask output directory")->required();
  add_pipeline_flags(segment, seg_flags);
  segment->add_option("--log", log_path, "Per-iteration loss CSV");
  segment->add_option("--save-checkpoint", checkpoint_out, "Write final network weights");

  std::string pred_dir, gt_dir, csv_path;
  auto* eval = app.add_subcommand("eval", "Region similarity of predicted masks");
  eval->add_option("--pred", pred_dir, "Predicted masks")->required();
  eval->add_option("--gt", gt_dir, "Ground-truth masks")->required();
  eval->add_option("--csv", csv_path, "Per-frame CSV output");

  std::uint64_t grad_seed = 0;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_option("--seed", grad_seed, "Random seed")->capture_default_str();

  PipelineFlags dump_flags;
  std::string dump_flows, dump_out;
  int dump_frame = 0;
  auto* dump = app.add_subcommand("dump-embeddings", "Write the embedding grid of one frame");
  dump->add_option("--flows", dump_flows, "Directory of .flo files")->required();
  dump->add_option("--frame", dump_frame, "Frame index (0-based)")->required()->check(CLI::NonNegativeNumber);
  dump->add_option("--out", dump_out, "Output file")->required();
  add_pipeline_flags(dump, dump_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*synth) {
      const SceneSpec spec = read_scene_spec(spec_path);
      write_sequence(synth_out, generate(spec));
      out << "wrote " << spec.frames << " frames to " << synth_out << '\n';
    } else if (*segment) {
      std::optional<std::ofstream> log;
      if (!log_path.empty()) {
        log.emplace(log_path);
        if (!*log) fail(ErrorCode::Io, "cannot write " + log_path);
        *log << "iteration,L_c,L_pc,L_cc,L_sc,total\n";
        log->precision(10);
      }
      const auto dirs = sequence_dirs(flows_dir);
      const bool single = dirs.size() == 1 && dirs.front() == fs::path(flows_dir);
      if (!single && !checkpoint_out.empty()) {
        fail(ErrorCode::InvalidArgument, "--save-checkpoint needs a single sequence");
      }
      for (const auto& dir : dirs) {
        segment_sequence(seg_flags, dir, single ? fs::path(seg_out) : fs::path(seg_out) / dir.filename(),
                         log ? &*log : nullptr, checkpoint_out, out);
      }
    } else if (*eval) {
      const EvalReport report = evaluate_dataset(pred_dir, gt_dir);
      for (const auto& seq : report.sequences) {
        out << "sequence " << seq.name << ": frames " << seq.frames.size() << ", mean J " << seq.mean_j << '\n';
        for (const auto& s : seq.skipped) out << "  skipped " << s << " (no ground truth)\n";
      }
      out << "mean J " << report.mean_j << '\n';
      if (report.timing) out << "seconds/frame " << report.timing->seconds_per_frame() << '\n';
      if (!csv_path.empty()) write_eval_csv(csv_path, report);
    } else if (*gradcheck) {
      const GradCheckReport report = run_gradcheck(grad_seed);
      for (const auto& c : report.cases) {
        char line[160];
        std::snprintf(line, sizeof line, "%-4s %-28s checked %3d skipped %3d max rel err %.3e",
                      c.passed ? "ok" : "FAIL", c.name.c_str(), c.checked, c.skipped, c.max_relative_error);
        out << line << '\n';
      }
      return report.passed() ? 0 : 1;
    } else if (*dump) {
      const auto files = list_frames(dump_flows, ".flo");
      if (files.empty()) fail(ErrorCode::EmptyDir, "no .flo files in " + dump_flows);
      if (dump_frame >= static_cast<int>(files.size())) {
        fail(ErrorCode::FrameCountMismatch, "frame " + std::to_string(dump_frame) + " out of range");
      }
      std::optional<SequenceState> state;
      for (int t = 0; t <= dump_frame; ++t) {
        const FlowField flow = read_flo_file(files[static_cast<std::size_t>(t)]);
        if (!state) state = start_state(dump_flags, flow);
        process_frame(*state, flow);
        if (t == dump_frame) write_embedding(dump_out, embed(*state, flow, true));
      }
    }
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}

}  // namespace flowseg::cli
