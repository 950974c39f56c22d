#include "flowseg/pipeline.hpp"

#include <string>
#include <utility>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

void validate(const PipelineConfig& config) {
  config.weights.validate();
  if (config.k < 2) fail(ErrorCode::InvalidDims, "k must be >= 2");
  if (config.per_frame_iters < 0) fail(ErrorCode::InvalidArgument, "per-frame iterations must be >= 0");
  if (config.pretrain_epochs < 0) fail(ErrorCode::InvalidArgument, "pretraining epochs must be >= 0");
}

// Seeds for the two independent random draws of a sequence.
std::uint64_t net_seed(std::uint64_t seed) { return seed * 2 + 1; }
std::uint64_t prototype_seed(std::uint64_t seed) { return seed * 2 + 2; }

struct Prepared {
  FlowImage image;
  Mat<float> input;
};

Prepared prepare(const FlowField& flow) {
  Prepared p{network_input(flow), {}};
  p.input = p.image.values.cast<float>();
  return p;
}

double recon_step(NetParams<float>& params, const Prepared& frame, const SequenceState& state) {
  const ForwardOutput<float> out = forward(params, frame.input, frame.image.width, frame.image.height, state.config.net);
  const LossValue lc = recon_loss(frame.image.values, out.reconstruction.cast<double>());
  const Mat<float> d_embedding = Mat<float>::Zero(out.embedding.rows(), out.embedding.cols());
  adam_step(params, backward(params, out, d_embedding, Mat<float>(lc.grad.cast<float>())), state.config.adam);
  return lc.value;
}

}  // namespace

SequenceState make_state(const PipelineConfig& config) {
  return make_state(config, NetParams<float>::kaiming(net_seed(config.seed)));
}

SequenceState make_state(const PipelineConfig& config, const NetParams<float>& params) {
  validate(config);
  SequenceState state;
  state.config = config;
  state.params = params;
  PrototypeInit init = init_prototypes(config.init, config.k, kEmbedDim, prototype_seed(config.seed));
  state.bank = std::move(init.bank);
  state.coherence_fallback = init.coherence_fallback;
  return state;
}

FlowImage network_input(const FlowField& flow) { return flow_to_image(reflect_pad(flow, kGridScale)); }

EmbeddingMap embed(const SequenceState& state, const FlowField& flow, bool normalized) {
  const Prepared frame = prepare(flow);
  const ForwardOutput<float> out =
      forward(state.params, frame.input, frame.image.width, frame.image.height, state.config.net);
  const EmbeddingMap raw = to_embedding_map(out);
  return normalized ? l2_normalize(raw) : raw;
}

std::vector<double> reconstruction_losses(const SequenceState& state, std::span<const FlowField> flows) {
  std::vector<double> losses;
  for (const FlowField& flow : flows) {
    const Prepared frame = prepare(flow);
    const ForwardOutput<float> out =
        forward(state.params, frame.input, frame.image.width, frame.image.height, state.config.net);
    losses.push_back(recon_loss(frame.image.values, out.reconstruction.cast<double>()).value);
  }
  return losses;
}

void pretrain(SequenceState& state, std::span<const FlowField> flows, int epochs) {
  if (epochs < 0) fail(ErrorCode::InvalidArgument, "epochs must be >= 0");
  if (flows.empty()) fail(ErrorCode::InvalidArgument, "pretraining needs at least one frame");
  std::vector<Prepared> frames;
  frames.reserve(flows.size());
  for (const FlowField& flow : flows) frames.push_back(prepare(flow));
  for (int e = 0; e < epochs; ++e) {
    for (const Prepared& frame : frames) recon_step(state.params, frame, state);
  }
  state.pretrained = true;
}

PrototypeLabels label_prototypes(const PrototypeBank& bank, const SaliencyPartition& partition,
                                 const EmbeddingMap& embedding, double eta) {
  const Mask& bg = partition.bg_mask_embed;
  if (static_cast<int>(bg.bits.size()) != embedding.pixels()) {
    fail(ErrorCode::DimMismatch, "partition grid does not match embedding grid");
  }
  if (embedding.dim() != bank.dim()) fail(ErrorCode::DimMismatch, "embedding/prototype dim mismatch");
  Eigen::VectorXd mu = Eigen::VectorXd::Zero(embedding.dim());
  for (Eigen::Index s = 0; s < embedding.pixels(); ++s) {
    if (bg.bits[static_cast<std::size_t>(s)]) mu += embedding.features.col(s);
  }
  PrototypeLabels out;
  out.foreground.assign(static_cast<std::size_t>(bank.k()), 1);
  const double norm = mu.norm();
  if (norm < kNormFloor) {
    out.background_empty = true;
    return out;
  }
  mu /= norm;
  const Eigen::VectorXd sim = bank.prototypes.transpose() * mu;
  for (int j = 0; j < bank.k(); ++j) out.foreground[static_cast<std::size_t>(j)] = sim(j) >= eta ? 0 : 1;
  return out;
}

Mask upsample_mask(const Mask& grid, int width, int height) {
  if (width < 1 || height < 1) fail(ErrorCode::DimMismatch, "target dims must be positive");
  if (grid.width * kGridScale != padded_size(width, kGridScale) ||
      grid.height * kGridScale != padded_size(height, kGridScale)) {
    fail(ErrorCode::DimMismatch, "grid " + std::to_string(grid.width) + "x" + std::to_string(grid.height) +
                                     " does not match target " + std::to_string(width) + "x" +
                                     std::to_string(height));
  }
  Mask mask(width, height);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) mask.at(x, y) = grid.at(x / kGridScale, y / kGridScale);
  }
  return mask;
}

FrameResult process_frame(SequenceState& state, const FlowField& flow, const IterationObserver& observer) {
  if (!state.pretrained) fail(ErrorCode::UninitializedState, "process_frame called before pretrain");
  if (state.frame_index > 0 && (flow.width != state.width || flow.height != state.height)) {
    fail(ErrorCode::DimMismatch, "flow size changed within the sequence");
  }
  state.width = flow.width;
  state.height = flow.height;

  const PipelineConfig& cfg = state.config;
  const LossWeights& w = cfg.weights;
  const Prepared frame = prepare(flow);
  FrameResult result;
  result.partition = boundary_saliency(flow, w.delta);
  const int budget = state.frame_index == 0 ? w.t_max : cfg.per_frame_iters;

  for (int it = 0; it < budget; ++it) {
    const ForwardOutput<float> out = forward(state.params, frame.input, frame.image.width, frame.image.height, cfg.net);
    const EmbeddingMap raw = to_embedding_map(out);
    const EmbeddingMap z = l2_normalize(raw);
    const TransportPlan plan =
        sinkhorn_assign(affinity(z, state.bank), w.kappa, cfg.sinkhorn, &state.sinkhorn_potential);
    state.sinkhorn_potential = plan.column_potential;
    const std::vector<int> labels = harden(plan.values);
    PrototypeBank before = std::move(state.bank);
    state.bank = update_prototypes(z, labels, before);

    const LossValue lc = recon_loss(frame.image.values, out.reconstruction.cast<double>());
    const LossValue lpc = proto_loss(z, labels, state.bank);
    const LossValue lcc = cluster_contrastive_loss(z, labels, state.bank);
    const LossValue lsc = saliency_contrastive_loss(z, result.partition);
    const Eigen::MatrixXd dz = l2_normalize_backward(raw, total_embedding_grad(lpc, lcc, lsc, w));
    const NetTensors<float> grads =
        backward(state.params, out, Mat<float>(dz.cast<float>()), Mat<float>(lc.grad.cast<float>()));
    adam_step(state.params, grads, cfg.adam);

    ++state.iteration;
    ++result.iterations;
    if (observer) {
      IterationRecord record;
      record.frame = state.frame_index;
      record.iteration = state.iteration;
      record.losses = {lc.value, lpc.value, lcc.value, lsc.value};
      record.total = total_loss(record.losses, w);
      record.sinkhorn_iterations = plan.iterations;
      record.labels = &labels;
      record.bank_before = &before;
      record.bank_after = &state.bank;
      observer(record);
    }
  }

  const EmbeddingMap z = embed(state, flow, true);
  result.labels = harden(affinity(z, state.bank));
  result.prototype_labels = label_prototypes(state.bank, result.partition, z, w.eta);
  result.grid_mask = Mask(z.width, z.height);
  for (std::size_t s = 0; s < result.labels.size(); ++s) {
    result.grid_mask.bits[s] = result.prototype_labels.foreground[static_cast<std::size_t>(result.labels[s])];
  }
  result.mask = upsample_mask(result.grid_mask, flow.width, flow.height);
  ++state.frame_index;
  return result;
}

}  // namespace flowseg
