#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "flowseg/error.hpp"
#include "flowseg/eval.hpp"
#include "flowseg/flow_io.hpp"
#include "flowseg/gradcheck.hpp"
#include "flowseg/pipeline.hpp"
#include "flowseg/proto_cluster.hpp"
#include "flowseg/saliency.hpp"
#include "flowseg/synth.hpp"
#include "scenes.hpp"

using namespace flowseg;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// Shared across the scene-based criteria.
struct SceneSuite {
  std::vector<LabeledSequence> sequences;
  std::optional<acceptance::SuiteRun> normal;
};

SceneSuite& suite() {
  static SceneSuite s = [] {
    SceneSuite out;
    for (int i = 0; i < acceptance::kSceneCount; ++i) out.sequences.push_back(generate(acceptance::scene(i)));
    return out;
  }();
  return s;
}

const acceptance::SuiteRun& normal_run() {
  SceneSuite& s = suite();
  if (!s.normal) s.normal = acceptance::run_suite(s.sequences, PipelineConfig{});
  return *s.normal;
}

// ---------------------------------------------------------------------------

ErrorCode decode_error(const std::vector<std::byte>& bytes) {
  try {
    read_flo(bytes);
  } catch (const Error& e) {
    return e.code();
  }
  return ErrorCode::Io;
}

std::vector<std::byte> raw_header(const char* magic, std::int32_t w, std::int32_t h, int floats) {
  std::vector<std::byte> out;
  auto put = [&](std::uint32_t x) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>((x >> (8 * i)) & 0xff));
  };
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::byte>(magic[i]));
  put(static_cast<std::uint32_t>(w));
  put(static_cast<std::uint32_t>(h));
  for (int i = 0; i < floats; ++i) put(0);
  return out;
}

Outcome codec_exactness() {
  const auto t0 = std::chrono::steady_clock::now();
  std::mt19937_64 rng(1001);
  int exact = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 64);
    const int h = 1 + static_cast<int>(rng() % 64);
    FlowField f(w, h);
    auto finite_bits = [&] {
      for (;;) {
        const auto x = std::bit_cast<float>(static_cast<std::uint32_t>(rng()));
        if (std::isfinite(x)) return x;
      }
    };
    for (auto& v : f.vectors) v = {finite_bits(), finite_bits()};
    const FlowField g = read_flo(write_flo(f));
    exact += g.width == w && g.height == h &&
             std::memcmp(g.vectors.data(), f.vectors.data(), f.vectors.size() * sizeof(FlowVector)) == 0;
  }

  int errors_ok = 0;
  auto short_header = raw_header("PIEH", 1, 1, 0);
  short_header.resize(6);
  auto nan = raw_header("PIEH", 1, 1, 0);
  const auto nan_bits = std::bit_cast<std::uint32_t>(std::numeric_limits<float>::quiet_NaN());
  for (int i = 0; i < 4; ++i) nan.push_back(static_cast<std::byte>((nan_bits >> (8 * i)) & 0xff));
  for (int i = 0; i < 4; ++i) nan.push_back(std::byte{0});
  const std::pair<std::vector<std::byte>, ErrorCode> cases[] = {
      {raw_header("XXXX", 1, 1, 2), ErrorCode::BadMagic},
      {short_header, ErrorCode::Truncated},
      {raw_header("PIEH", 2, 2, 3), ErrorCode::Truncated},
      {raw_header("PIEH", 0, 3, 0), ErrorCode::Malformed},
      {raw_header("PIEH", -2, 3, 0), ErrorCode::Malformed},
      {raw_header("PIEH", 1, 1, 3), ErrorCode::Malformed},
      {nan, ErrorCode::NonFinite},
      {raw_header("PIEH", 1 << 14, 1 << 13, 0), ErrorCode::Oversize},
  };
  for (const auto& [bytes, code] : cases) errors_ok += decode_error(bytes) == code;
  const int n_cases = static_cast<int>(std::size(cases));
  const double secs = seconds_since(t0);
  return {exact == 1000 && errors_ok == n_cases && secs < 5.0,
          fmt("%d/1000 bit-exact roundtrips, %d/%d malformed buffers rejected with the right error, %.2f s (< 5 s)",
              exact, errors_ok, n_cases, secs)};
}

Outcome gradient_integrity() {
  const auto t0 = std::chrono::steady_clock::now();
  const char* required[] = {"recon_loss", "proto_loss", "cluster_contrastive_loss", "saliency_contrastive_loss",
                            "composite"};
  bool ok = true;
  double worst = 0.0;
  int min_checked = std::numeric_limits<int>::max();
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    const GradCheckReport r = run_gradcheck(seed);
    ok = ok && r.passed();
    for (const char* name : required) {
      const auto it = std::find_if(r.cases.begin(), r.cases.end(), [&](const auto& c) { return c.name == name; });
      if (it == r.cases.end()) {
        ok = false;
        continue;
      }
      min_checked = std::min(min_checked, it->checked);
      worst = std::max(worst, it->max_relative_error);
    }
  }
  const double secs = seconds_since(t0);
  ok = ok && min_checked >= 64 && worst <= 1e-4 && secs < 60.0;
  return {ok, fmt("5 seeds, min %d coordinates per check, max rel err %.2e (<= 1e-4), %.2f s (< 60 s)", min_checked,
                  worst, secs)};
}

Eigen::MatrixXd random_matrix(std::mt19937_64& rng, int rows, int cols, double lo, double hi) {
  std::uniform_real_distribution<double> u(lo, hi);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

std::vector<int> best_equal_bipartition(const Eigen::MatrixXd& aff) {
  std::vector<int> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (unsigned mask = 0; mask < 64; ++mask) {
    if (std::popcount(mask) != 3) continue;
    std::vector<int> labels(6);
    double score = 0;
    for (int s = 0; s < 6; ++s) {
      labels[static_cast<std::size_t>(s)] = (mask >> s) & 1;
      score += aff(s, labels[static_cast<std::size_t>(s)]);
    }
    if (score > best_score) {
      best_score = score;
      best = labels;
    }
  }
  return best;
}

Outcome sinkhorn_correctness() {
  std::mt19937_64 rng(3003);
  int marginals_ok = 0;
  double worst_row = 0.0, worst_col_ratio = 0.0;
  for (int trial = 0; trial < 100; ++trial) {
    const int s = 1 + static_cast<int>(rng() % 256);
    const int k = 1 + static_cast<int>(rng() % 8);
    const Eigen::MatrixXd aff = random_matrix(rng, s, k, -1, 1);
    const TransportPlan plan = sinkhorn_assign(aff, 0.05);
    const double row_err = (plan.values.rowwise().sum().array() - 1.0).abs().maxCoeff();
    const double col_err =
        (plan.values.colwise().sum().array() - static_cast<double>(s) / k).abs().maxCoeff();
    worst_row = std::max(worst_row, row_err);
    worst_col_ratio = std::max(worst_col_ratio, col_err / s);
    marginals_ok += row_err <= 1e-6 && col_err <= 1e-6 * s;
  }

  int oracle = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const Eigen::MatrixXd aff = random_matrix(rng, 6, 2, -1, 1);
    oracle += harden(sinkhorn_assign(aff, 0.01).values) == best_equal_bipartition(aff);
  }

  int shifts_ok = 0;
  std::uniform_real_distribution<double> shift(-5, 5);
  for (int trial = 0; trial < 50; ++trial) {
    const int s = 2 + static_cast<int>(rng() % 100);
    const int k = 2 + static_cast<int>(rng() % 7);
    const Eigen::MatrixXd aff = random_matrix(rng, s, k, -1, 1);
    Eigen::MatrixXd shifted = aff;
    for (Eigen::Index r = 0; r < s; ++r) shifted.row(r).array() += shift(rng);
    shifts_ok += harden(sinkhorn_assign(aff, 0.05).values) == harden(sinkhorn_assign(shifted, 0.05).values);
  }
  return {marginals_ok == 100 && oracle >= 95 && shifts_ok == 50,
          fmt("(a) %d/100 plans within marginal tolerance (worst row %.1e, col/S %.1e); (b) %d/100 match the "
              "equal-partition oracle (>= 95); (c) %d/50 shift trials unchanged",
              marginals_ok, worst_row, worst_col_ratio, oracle, shifts_ok)};
}

Outcome prototype_invariants() {
  SceneSpec spec = acceptance::scene(0);
  spec.frames = 1;
  const LabeledSequence seq = generate(spec);
  PipelineConfig cfg;
  cfg.weights.t_max = 200;
  SequenceState state = make_state(cfg);
  pretrain(state, std::span<const FlowField>(seq.flows.data(), 1), cfg.pretrain_epochs);
  int updates = 0, empty_clusters = 0, stale_ok = 0;
  double worst = 0.0;
  process_frame(state, seq.flows[0], [&](const IterationRecord& r) {
    ++updates;
    std::vector<int> counts(static_cast<std::size_t>(r.bank_after->k()), 0);
    for (int l : *r.labels) ++counts[static_cast<std::size_t>(l)];
    for (int j = 0; j < r.bank_after->k(); ++j) {
      worst = std::max(worst, std::abs(r.bank_after->prototypes.col(j).norm() - 1.0));
      if (counts[static_cast<std::size_t>(j)] == 0) {
        ++empty_clusters;
        stale_ok += r.bank_after->prototypes.col(j) == r.bank_before->prototypes.col(j);
      }
    }
  });

  // Forced empty clusters: every pixel assigned to prototype 0.
  const EmbeddingMap z = embed(state, seq.flows[0]);
  const std::vector<int> all_zero(static_cast<std::size_t>(z.pixels()), 0);
  const PrototypeBank forced = update_prototypes(z, all_zero, state.bank);
  int forced_stale = 0;
  for (int j = 1; j < forced.k(); ++j) forced_stale += forced.prototypes.col(j) == state.bank.prototypes.col(j);
  worst = std::max(worst, std::abs(forced.prototypes.col(0).norm() - 1.0));

  const bool ok = updates == 200 && worst <= 1e-9 && stale_ok == empty_clusters && forced_stale == forced.k() - 1;
  return {ok, fmt("%d updates, max |norm - 1| = %.1e (<= 1e-9), %d/%d empty clusters kept stale prototypes, "
                  "%d/%d in a forced single-cluster update",
                  updates, worst, stale_ok, empty_clusters, forced_stale, forced.k() - 1)};
}

Outcome synthetic_end_to_end() {
  const acceptance::SuiteRun& run = normal_run();
  std::string per_scene;
  for (const auto& s : run.scenes) per_scene += fmt(" %.3f", s.mean_j);
  return {run.mean_j >= 0.85 && run.seconds <= 600.0,
          fmt("mean J %.4f (>= 0.85), %.1f s (<= 600 s); per scene:%s", run.mean_j, run.seconds, per_scene.c_str())};
}

Outcome ablation_trend() {
  const acceptance::SuiteRun& normal = normal_run();
  PipelineConfig zeros;
  zeros.init = InitStrategy::Zeros;
  const acceptance::SuiteRun zero_run = acceptance::run_suite(suite().sequences, zeros);
  PipelineConfig two;
  two.k = 2;
  const acceptance::SuiteRun k2_run = acceptance::run_suite(suite().sequences, two);
  const double gap = normal.mean_j - zero_run.mean_j;
  return {gap >= 0.10 && normal.mean_j >= k2_run.mean_j,
          fmt("normal init %.4f vs zeros init %.4f (gap %.4f, need >= 0.10); k=30 %.4f vs k=2 %.4f", normal.mean_j,
              zero_run.mean_j, gap, normal.mean_j, k2_run.mean_j)};
}

Outcome boundary_prior() {
  long bg_total = 0, bg_covered = 0, obj_total = 0, obj_in_bg = 0;
  double worst_cover = 1.0, worst_leak = 0.0;
  for (const LabeledSequence& seq : suite().sequences) {
    long sb = 0, sc = 0, so = 0, sl = 0;
    for (std::size_t t = 0; t < seq.flows.size(); ++t) {
      const SaliencyPartition p = boundary_saliency(seq.flows[t], LossWeights{}.delta);
      const Mask& gt = seq.masks[t];
      for (std::size_t i = 0; i < gt.bits.size(); ++i) {
        if (gt.bits[i]) {
          ++so;
          sl += p.bg_mask.bits[i];
        } else {
          ++sb;
          sc += p.bg_mask.bits[i];
        }
      }
    }
    worst_cover = std::min(worst_cover, static_cast<double>(sc) / static_cast<double>(sb));
    worst_leak = std::max(worst_leak, static_cast<double>(sl) / static_cast<double>(so));
    bg_total += sb;
    bg_covered += sc;
    obj_total += so;
    obj_in_bg += sl;
  }
  const double cover = static_cast<double>(bg_covered) / static_cast<double>(bg_total);
  const double leak = static_cast<double>(obj_in_bg) / static_cast<double>(obj_total);
  return {worst_cover >= 0.95 && worst_leak <= 0.05,
          fmt("background coverage %.4f (worst scene %.4f, >= 0.95), object pixels in background %.4f "
              "(worst scene %.4f, <= 0.05)",
              cover, worst_cover, leak, worst_leak)};
}

Outcome causality_and_determinism() {
  const LabeledSequence& seq = suite().sequences.front();
  const PipelineConfig cfg;
  const acceptance::SceneRun& full = normal_run().scenes.front();
  const acceptance::SceneRun again = acceptance::run_scene(seq, cfg);
  int truncations_ok = 0;
  const int cuts[] = {1, 7};
  for (int cut : cuts) {
    const acceptance::SceneRun part = acceptance::run_scene(seq, cfg, cut);
    truncations_ok += std::equal(part.masks.begin(), part.masks.end(), full.masks.begin());
  }
  const bool identical = again.masks == full.masks;
  const int n_cuts = static_cast<int>(std::size(cuts));
  return {identical && truncations_ok == n_cuts,
          fmt("repeat run %s; %d/%d truncated runs (after frames 1 and 7) match the full run",
              identical ? "bit-identical" : "DIFFERS", truncations_ok, n_cuts)};
}

Outcome evaluator_exactness() {
  std::mt19937_64 rng(9009);
  int exact = 0;
  for (int trial = 0; trial < 500; ++trial) {
    const int w = 1 + static_cast<int>(rng() % 64);
    const int h = 1 + static_cast<int>(rng() % 64);
    const unsigned density_a = 1 + static_cast<unsigned>(rng() % 9);
    const unsigned density_b = 1 + static_cast<unsigned>(rng() % 9);
    Mask a(w, h), b(w, h);
    long inter = 0, uni = 0;
    for (std::size_t i = 0; i < a.bits.size(); ++i) {
      a.bits[i] = rng() % 10 < density_a;
      b.bits[i] = rng() % 10 < density_b;
      inter += a.bits[i] & b.bits[i];
      uni += a.bits[i] | b.bits[i];
    }
    const double oracle = uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
    exact += jaccard(a, b) == oracle;
  }
  const double empty = jaccard(Mask(13, 7), Mask(13, 7));
  return {exact == 500 && empty == 1.0,
          fmt("%d/500 pairs equal the pixel-count oracle exactly; both empty -> %.1f", exact, empty)};
}

}  // namespace

int main() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
  const std::pair<const char*, std::function<Outcome()>> criteria[] = {
      {"1 codec exactness", codec_exactness},
      {"2 gradient integrity", gradient_integrity},
      {"3 sinkhorn correctness", sinkhorn_correctness},
      {"4 prototype invariants", prototype_invariants},
      {"5 synthetic end-to-end", synthetic_end_to_end},
      {"6 ablation trend", ablation_trend},
      {"7 boundary prior", boundary_prior},
      {"8 online causality and determinism", causality_and_determinism},
      {"9 evaluator exactness", evaluator_exactness},
  };
  int failed = 0;
  for (const auto& [name, check] : criteria) {
    Outcome o;
    try {
      o = check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %s: %s\n", o.pass ? "PASS" : "FAIL", name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", static_cast<int>(std::size(criteria)) - failed,
              static_cast<int>(std::size(criteria)));
  return failed == 0 ? 0 : 1;
}
