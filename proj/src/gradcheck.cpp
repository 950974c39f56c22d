#include "flowseg/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>

#include "flowseg/embed_net.hpp"
#include "flowseg/losses.hpp"
#include "flowseg/proto_cluster.hpp"
#include "flowseg/saliency.hpp"

namespace flowseg {

namespace {

using Rng = std::mt19937_64;

Eigen::MatrixXd random_matrix(Rng& rng, int rows, int cols, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
  return m;
}

std::vector<int> random_labels(Rng& rng, int count, int k) {
  std::uniform_int_distribution<int> dist(0, k - 1);
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (int& l : labels) l = dist(rng);
  return labels;
}

EmbeddingMap random_unit_embedding(Rng& rng, int width, int height, int dim) {
  EmbeddingMap raw;
  raw.width = width;
  raw.height = height;
  raw.features = random_matrix(rng, dim, width * height);
  return l2_normalize(raw);
}

// Checks `analytic` against central differences of `loss` over the entries of
// `x`. `smooth` may veto a coordinate whose perturbation leaves the current
// smooth piece; vetoed coordinates are replaced by fresh ones.
GradCheckCase check_coordinates(const std::string& name, Eigen::MatrixXd& x, const Eigen::MatrixXd& analytic,
                                const std::function<double()>& loss, const std::function<bool()>& smooth,
                                Rng& rng, const GradCheckOptions& opt) {
  GradCheckCase result;
  result.name = name;
  std::vector<Eigen::Index> order(static_cast<std::size_t>(x.size()));
  for (Eigen::Index i = 0; i < x.size(); ++i) order[static_cast<std::size_t>(i)] = i;
  std::shuffle(order.begin(), order.end(), rng);

  // Small tensors are cycled so that at least opt.coordinates checks happen.
  const std::size_t budget = std::max<std::size_t>(order.size(), static_cast<std::size_t>(opt.coordinates)) * 4;
  for (std::size_t n = 0; n < budget && result.checked < opt.coordinates; ++n) {
    const Eigen::Index i = order[n % order.size()];
    const double saved = x.data()[i];
    x.data()[i] = saved + opt.step;
    const double plus = loss();
    bool ok = smooth();
    x.data()[i] = saved - opt.step;
    const double minus = loss();
    ok = ok && smooth();
    x.data()[i] = saved;
    if (!ok) {
      ++result.skipped;
      continue;
    }
    const double numeric = (plus - minus) / (2.0 * opt.step);
    result.max_relative_error =
        std::max(result.max_relative_error, relative_error(analytic.data()[i], numeric, opt.denominator_floor));
    ++result.checked;
  }
  result.passed = result.checked >= opt.coordinates && result.max_relative_error <= opt.tolerance;
  return result;
}

const std::function<bool()> kAlwaysSmooth = [] { return true; };

GradCheckCase check_recon(Rng& rng, const GradCheckOptions& opt) {
  const Eigen::MatrixXd target = random_matrix(rng, 3, 64);
  Eigen::MatrixXd recon = random_matrix(rng, 3, 64);
  const Eigen::MatrixXd grad = recon_loss(target, recon).grad;
  return check_coordinates("recon_loss", recon, grad, [&] { return recon_loss(target, recon).value; },
                           kAlwaysSmooth, rng, opt);
}

GradCheckCase check_proto(Rng& rng, const GradCheckOptions& opt) {
  EmbeddingMap z = random_unit_embedding(rng, 4, 4, kEmbedDim);
  const PrototypeBank bank = init_prototypes(InitStrategy::Normal, 5, kEmbedDim, rng()).bank;
  const std::vector<int> labels = random_labels(rng, z.pixels(), bank.k());
  const Eigen::MatrixXd grad = proto_loss(z, labels, bank).grad;
  return check_coordinates("proto_loss", z.features, grad, [&] { return proto_loss(z, labels, bank).value; },
                           kAlwaysSmooth, rng, opt);
}

GradCheckCase check_cluster(Rng& rng, const GradCheckOptions& opt) {
  EmbeddingMap z = random_unit_embedding(rng, 4, 4, kEmbedDim);
  const PrototypeBank bank = init_prototypes(InitStrategy::Normal, 5, kEmbedDim, rng()).bank;
  const std::vector<int> labels = random_labels(rng, z.pixels(), bank.k());
  const Eigen::MatrixXd grad = cluster_contrastive_loss(z, labels, bank).grad;
  return check_coordinates("cluster_contrastive_loss", z.features, grad,
                           [&] { return cluster_contrastive_loss(z, labels, bank).value; }, kAlwaysSmooth, rng,
                           opt);
}

SaliencyPartition random_embed_partition(Rng& rng, int width, int height) {
  SaliencyPartition part;
  part.fg_mask_embed = Mask(width, height);
  part.bg_mask_embed = Mask(width, height);
  std::bernoulli_distribution coin(0.4);
  for (std::size_t i = 0; i < part.fg_mask_embed.bits.size(); ++i) {
    const bool fg = i == 0 || (i != 1 && coin(rng));
    part.fg_mask_embed.bits[i] = fg ? 1 : 0;
    part.bg_mask_embed.bits[i] = fg ? 0 : 1;
  }
  part.fg_empty = false;
  part.bg_empty = false;
  return part;
}

GradCheckCase check_saliency(Rng& rng, const GradCheckOptions& opt) {
  EmbeddingMap z = random_unit_embedding(rng, 4, 4, kEmbedDim);
  const SaliencyPartition part = random_embed_partition(rng, 4, 4);
  const SaliencyAnchors anchors = saliency_anchors(z, part);
  const Eigen::MatrixXd grad = saliency_contrastive_loss(z, part, anchors).grad;
  return check_coordinates("saliency_contrastive_loss", z.features, grad,
                           [&] { return saliency_contrastive_loss(z, part, anchors).value; }, kAlwaysSmooth, rng,
                           opt);
}

GradCheckCase check_l2_normalize(Rng& rng, const GradCheckOptions& opt) {
  EmbeddingMap raw;
  raw.width = 4;
  raw.height = 4;
  raw.features = random_matrix(rng, kEmbedDim, 16);
  const Eigen::MatrixXd weights = random_matrix(rng, kEmbedDim, 16);
  const Eigen::MatrixXd grad = l2_normalize_backward(raw, weights);
  return check_coordinates("l2_normalize", raw.features, grad,
                           [&] { return (l2_normalize(raw).features.array() * weights.array()).sum(); },
                           kAlwaysSmooth, rng, opt);
}

GradCheckCase check_attention(Rng& rng, const GradCheckOptions& opt) {
  const int w = 4, h = 4;
  Eigen::MatrixXd f = random_matrix(rng, kEmbedDim, w * h);
  const Eigen::MatrixXd weights = random_matrix(rng, kEmbedDim, w * h);
  AttentionCache<double> base;
  attention_forward<double>(f, w, h, &base);
  const Eigen::MatrixXd grad = attention_backward<double>(weights, base);
  AttentionCache<double> probe;
  return check_coordinates(
      "attention", f, grad,
      [&] { return (attention_forward<double>(f, w, h, &probe).array() * weights.array()).sum(); },
      [&] { return probe.max_index == base.max_index; }, rng, opt);
}

// Full objective: reconstruction + weighted prototype, cluster and saliency
// terms through normalization, attention, MLP, encoder and decoder.
std::vector<GradCheckCase> check_composite(Rng& rng, const GradCheckOptions& opt) {
  const int size = opt.image_size;
  NetParams<double> params = NetParams<double>::kaiming(rng());
  const Eigen::MatrixXd image = random_matrix(rng, 3, size * size);

  LossWeights weights;
  weights.lambda1 = 0.5;
  weights.lambda2 = 0.7;
  weights.lambda3 = 0.9;

  const ForwardOutput<double> base = forward(params, image, size, size);
  const EmbeddingMap base_norm = l2_normalize(to_embedding_map(base));
  const PrototypeBank bank = init_prototypes(InitStrategy::Normal, 3, kEmbedDim, rng()).bank;
  const std::vector<int> labels = random_labels(rng, base_norm.pixels(), bank.k());
  const SaliencyPartition part = random_embed_partition(rng, base.grid_width, base.grid_height);
  const SaliencyAnchors anchors = saliency_anchors(base_norm, part);

  auto objective = [&](const ForwardOutput<double>& out, NetTensors<double>* grads) {
    const EmbeddingMap raw = to_embedding_map(out);
    const EmbeddingMap z = l2_normalize(raw);
    const LossValue lc = recon_loss(image, out.reconstruction);
    const LossValue lpc = proto_loss(z, labels, bank);
    const LossValue lcc = cluster_contrastive_loss(z, labels, bank);
    const LossValue lsc = saliency_contrastive_loss(z, part, anchors);
    if (grads) {
      const Eigen::MatrixXd dz = l2_normalize_backward(raw, total_embedding_grad(lpc, lcc, lsc, weights));
      *grads = backward(params, out, dz, lc.grad);
    }
    return total_loss({lc.value, lpc.value, lcc.value, lsc.value}, weights);
  };

  NetTensors<double> grads;
  objective(base, &grads);

  std::vector<GradCheckCase> cases;
  ForwardCache<double> probe;
  // Coordinates spread over every tensor so each layer is exercised.
  GradCheckOptions per_tensor = opt;
  per_tensor.coordinates = std::max(4, (opt.coordinates + kParamCount - 1) / kParamCount);
  GradCheckCase total;
  total.name = "composite";
  for (int t = 0; t < kParamCount; ++t) {
    Eigen::MatrixXd& tensor = params.tensors[static_cast<std::size_t>(t)];
    GradCheckCase c = check_coordinates(
        std::string(param_name(static_cast<Param>(t))), tensor, grads[static_cast<std::size_t>(t)],
        [&] {
          ForwardOutput<double> out = forward(params, image, size, size);
          const double value = objective(out, nullptr);
          probe = std::move(out.cache);
          return value;
        },
        [&] { return same_activation_pattern(probe, base.cache); }, rng, per_tensor);
    total.checked += c.checked;
    total.skipped += c.skipped;
    total.max_relative_error = std::max(total.max_relative_error, c.max_relative_error);
    cases.push_back(std::move(c));
  }
  total.passed = total.checked >= opt.coordinates && total.max_relative_error <= opt.tolerance &&
                 std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.passed; });
  cases.insert(cases.begin(), std::move(total));
  return cases;
}

}  // namespace

bool GradCheckReport::passed() const {
  return !cases.empty() && std::all_of(cases.begin(), cases.end(), [](const GradCheckCase& c) { return c.passed; });
}

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

GradCheckReport run_gradcheck(std::uint64_t seed, const GradCheckOptions& options) {
  Rng rng(seed);
  GradCheckReport report;
  report.seed = seed;
  report.cases.push_back(check_recon(rng, options));
  report.cases.push_back(check_proto(rng, options));
  report.cases.push_back(check_cluster(rng, options));
  report.cases.push_back(check_saliency(rng, options));
  report.cases.push_back(check_l2_normalize(rng, options));
  report.cases.push_back(check_attention(rng, options));
  for (GradCheckCase& c : check_composite(rng, options)) report.cases.push_back(std::move(c));
  return report;
}

}  // namespace flowseg
