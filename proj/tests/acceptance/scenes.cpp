#include "scenes.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numbers>
#include <random>
#include <span>

#include "flowseg/eval.hpp"

namespace acceptance {

using namespace flowseg;

SceneSpec scene(int index) {
  constexpr double pi = std::numbers::pi;
  std::mt19937_64 rng(static_cast<std::uint64_t>(index) * 7919 + 13);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  SceneSpec s;
  s.width = 128;
  s.height = 128;
  s.frames = 20;
  s.noise_sigma = 0.1;
  s.seed = static_cast<std::uint64_t>(index);

  const double bg_angle = u(rng) * 2 * pi;
  const double bg_speed = 1 + u(rng);
  double offset = pi / 4 + u(rng) * (3 * pi / 4);
  if (u(rng) < 0.5) offset = -offset;
  const double obj_speed = 1 + u(rng);
  s.background_motion = {static_cast<float>(bg_speed * std::cos(bg_angle)),
                         static_cast<float>(bg_speed * std::sin(bg_angle))};

  SceneObject o;
  o.shape = u(rng) < 0.5 ? ShapeKind::Rectangle : ShapeKind::Ellipse;
  o.w = 40 + std::floor(u(rng) * 17);
  o.h = 40 + std::floor(u(rng) * 17);
  o.motion = {static_cast<float>(obj_speed * std::cos(bg_angle + offset)),
              static_cast<float>(obj_speed * std::sin(bg_angle + offset))};
  o.trajectory = o.motion;
  const double tx = o.motion.u * (s.frames - 1);
  const double ty = o.motion.v * (s.frames - 1);
  const double margin = 6;
  const double xlo = margin - std::min(0.0, tx), xhi = s.width - margin - o.w - std::max(0.0, tx);
  const double ylo = margin - std::min(0.0, ty), yhi = s.height - margin - o.h - std::max(0.0, ty);
  o.x = std::floor(xlo + u(rng) * (xhi - xlo));
  o.y = std::floor(ylo + u(rng) * (yhi - ylo));
  s.objects = {o};
  return s;
}

SceneRun run_scene(const LabeledSequence& sequence, const PipelineConfig& config, int frames) {
  const auto t0 = std::chrono::steady_clock::now();
  const int n = frames < 0 ? static_cast<int>(sequence.flows.size()) : frames;
  SequenceState state = make_state(config);
  pretrain(state, std::span<const FlowField>(sequence.flows.data(), 1), config.pretrain_epochs);
  SceneRun run;
  double sum = 0.0;
  for (int t = 0; t < n; ++t) {
    FrameResult r = process_frame(state, sequence.flows[static_cast<std::size_t>(t)]);
    run.j.push_back(jaccard(r.mask, sequence.masks[static_cast<std::size_t>(t)]));
    sum += run.j.back();
    run.masks.push_back(std::move(r.mask));
  }
  run.mean_j = n > 0 ? sum / n : 0.0;
  run.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return run;
}

SuiteRun run_suite(const std::vector<LabeledSequence>& sequences, PipelineConfig config) {
  SuiteRun suite;
  double sum = 0.0;
  for (std::size_t i = 0; i < sequences.size(); ++i) {
    config.seed = i;
    suite.scenes.push_back(run_scene(sequences[i], config));
    sum += suite.scenes.back().mean_j;
    suite.seconds += suite.scenes.back().seconds;
  }
  suite.mean_j = sequences.empty() ? 0.0 : sum / static_cast<double>(sequences.size());
  return suite;
}

}  // namespace acceptance
