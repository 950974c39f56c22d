#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "flowseg/embed_net.hpp"
#include "flowseg/flow_io.hpp"
#include "flowseg/losses.hpp"
#include "flowseg/mask.hpp"
#include "flowseg/proto_cluster.hpp"
#include "flowseg/saliency.hpp"

namespace flowseg {

struct PipelineConfig {
  int k = 30;
  LossWeights weights;
  InitStrategy init = InitStrategy::Normal;
  int per_frame_iters = 10;
  int pretrain_epochs = 10;
  std::uint64_t seed = 0;
  AdamConfig adam;
  SinkhornOptions sinkhorn;
  NetOptions net;
};

/// Everything carried from one frame to the next within a sequence.
struct SequenceState {
  PipelineConfig config;
  NetParams<float> params;
  PrototypeBank bank;
  bool coherence_fallback = false;
  Eigen::VectorXd sinkhorn_potential;  // warm start for the next transport solve
  bool pretrained = false;
  int frame_index = 0;       // frames processed so far
  std::int64_t iteration = 0;  // optimization iterations across all frames
  int width = 0;             // flow dims fixed by the first processed frame
  int height = 0;
};

/// Kaiming network weights and prototypes drawn per config.init, both seeded
/// from config.seed. Throws InvalidArgument on a bad config.
SequenceState make_state(const PipelineConfig& config);
/// Same, but starting from the given network weights. The state counts as
/// pretrained.
SequenceState make_state(const PipelineConfig& config, const NetParams<float>& params);

/// Reconstruction loss of the network on each frame, in order.
std::vector<double> reconstruction_losses(const SequenceState& state, std::span<const FlowField> flows);

/// `epochs` passes of Adam on the reconstruction loss over `flows` (one step
/// per frame per pass). Prototypes are untouched. Marks the state pretrained.
void pretrain(SequenceState& state, std::span<const FlowField> flows, int epochs);

/// Seen by the observer after each optimization iteration.
struct IterationRecord {
  int frame = 0;
  std::int64_t iteration = 0;
  LossComponents losses;
  double total = 0.0;
  int sinkhorn_iterations = 0;
  const std::vector<int>* labels = nullptr;          // hardened transport plan
  const PrototypeBank* bank_before = nullptr;
  const PrototypeBank* bank_after = nullptr;
};
using IterationObserver = std::function<void(const IterationRecord&)>;

struct PrototypeLabels {
  std::vector<std::uint8_t> foreground;  // one flag per prototype
  bool background_empty = false;         // no background grid pixel: all prototypes foreground
};

/// mu_b = normalized mean embedding over the background grid set; prototype j
/// is background iff P_j . mu_b >= eta.
PrototypeLabels label_prototypes(const PrototypeBank& bank, const SaliencyPartition& partition,
                                 const EmbeddingMap& embedding, double eta);

/// Nearest-neighbour x4 expansion of an embedding-grid mask, cropped to
/// width x height. Throws DimMismatch unless the grid is the padded size / 4.
Mask upsample_mask(const Mask& grid, int width, int height);

struct FrameResult {
  Mask mask;
  Mask grid_mask;
  std::vector<int> labels;  // final per-grid-pixel prototype ids
  PrototypeLabels prototype_labels;
  SaliencyPartition partition;
  int iterations = 0;
};

/// Runs the frame's iteration budget (weights.t_max on the first frame,
/// config.per_frame_iters afterwards) and emits its foreground mask. Throws
/// UninitializedState before pretraining, DimMismatch if the flow size
/// changes within the sequence.
FrameResult process_frame(SequenceState& state, const FlowField& flow, const IterationObserver& observer = {});

/// Network input for a flow: reflect-padded to multiples of 4 and color coded.
FlowImage network_input(const FlowField& flow);

/// Raw and normalized embedding of the current network for a flow.
EmbeddingMap embed(const SequenceState& state, const FlowField& flow, bool normalized = true);

}  // namespace flowseg
