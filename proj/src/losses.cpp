#include "flowseg/losses.hpp"

#include <cmath>
#include <string>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

void check_labels(const EmbeddingMap& embedding, std::span<const int> labels, const PrototypeBank& bank) {
  if (static_cast<int>(labels.size()) != embedding.pixels()) {
    fail(ErrorCode::DimMismatch, "label count does not match embedding pixels");
  }
  if (embedding.dim() != bank.dim()) fail(ErrorCode::DimMismatch, "embedding/prototype dim mismatch");
  for (int label : labels) {
    if (label < 0 || label >= bank.k()) fail(ErrorCode::DimMismatch, "label out of range");
  }
}

// log(1 + exp(x)) without overflow.
double softplus(double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); }

double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

void LossWeights::validate() const {
  if (!(lambda1 >= 0.0 && lambda2 >= 0.0 && lambda3 >= 0.0)) {
    fail(ErrorCode::InvalidArgument, "loss weights must be nonnegative");
  }
  if (!(kappa > 0.0)) fail(ErrorCode::InvalidArgument, "kappa must be positive");
  if (!(delta > 0.0 && delta < 2.0)) fail(ErrorCode::InvalidArgument, "delta must lie in (0, 2)");
  if (!(eta > -1.0 && eta < 1.0)) fail(ErrorCode::InvalidArgument, "eta must lie in (-1, 1)");
  if (t_max < 1) fail(ErrorCode::InvalidArgument, "t_max must be >= 1");
}

LossValue recon_loss(const Eigen::MatrixXd& target, const Eigen::MatrixXd& reconstruction) {
  if (target.rows() != reconstruction.rows() || target.cols() != reconstruction.cols()) {
    fail(ErrorCode::ShapeMismatch, "reconstruction shape differs from target");
  }
  const double pixels = static_cast<double>(target.cols());
  const Eigen::MatrixXd diff = reconstruction - target;
  return {diff.squaredNorm() / pixels, 2.0 * diff / pixels};
}

LossValue proto_loss(const EmbeddingMap& embedding, std::span<const int> labels, const PrototypeBank& bank) {
  check_labels(embedding, labels, bank);
  const double n = static_cast<double>(embedding.pixels());
  LossValue out{0.0, Eigen::MatrixXd::Zero(embedding.dim(), embedding.pixels())};
  for (Eigen::Index s = 0; s < embedding.pixels(); ++s) {
    const auto proto = bank.prototypes.col(labels[static_cast<std::size_t>(s)]);
    const double r = 1.0 - embedding.features.col(s).dot(proto);
    out.value += r * r;
    out.grad.col(s) = (-2.0 * r / n) * proto;
  }
  out.value /= n;
  return out;
}

LossValue cluster_contrastive_loss(const EmbeddingMap& embedding, std::span<const int> labels,
                                   const PrototypeBank& bank) {
  check_labels(embedding, labels, bank);
  const double n = static_cast<double>(embedding.pixels());
  const Eigen::MatrixXd aff = affinity(embedding, bank);
  const Eigen::MatrixXd prob = assignment_distribution(aff);
  LossValue out{0.0, Eigen::MatrixXd::Zero(embedding.dim(), embedding.pixels())};
  for (Eigen::Index s = 0; s < embedding.pixels(); ++s) {
    const int a = labels[static_cast<std::size_t>(s)];
    const double mx = aff.row(s).maxCoeff();
    const double lse = mx + std::log((aff.row(s).array() - mx).exp().sum());
    out.value += lse - aff(s, a);
    // d/dz [lse - z.P_a] = sum_j p_j P_j - P_a
    out.grad.col(s) = (bank.prototypes * prob.row(s).transpose() - bank.prototypes.col(a)) / n;
  }
  out.value /= n;
  return out;
}

SaliencyAnchors saliency_anchors(const EmbeddingMap& embedding, const SaliencyPartition& partition) {
  const auto& bg = partition.bg_mask_embed;
  const auto& fg = partition.fg_mask_embed;
  if (static_cast<int>(bg.bits.size()) != embedding.pixels() || static_cast<int>(fg.bits.size()) != embedding.pixels()) {
    fail(ErrorCode::DimMismatch, "partition grid does not match embedding grid");
  }
  SaliencyAnchors anchors;
  anchors.background = Eigen::VectorXd::Zero(embedding.dim());
  anchors.foreground = Eigen::VectorXd::Zero(embedding.dim());
  for (Eigen::Index s = 0; s < embedding.pixels(); ++s) {
    if (bg.bits[static_cast<std::size_t>(s)]) {
      anchors.background += embedding.features.col(s);
      ++anchors.background_count;
    }
    if (fg.bits[static_cast<std::size_t>(s)]) {
      anchors.foreground += embedding.features.col(s);
      ++anchors.foreground_count;
    }
  }
  if (anchors.background_count > 0) anchors.background /= anchors.background_count;
  if (anchors.foreground_count > 0) anchors.foreground /= anchors.foreground_count;
  return anchors;
}

LossValue saliency_contrastive_loss(const EmbeddingMap& embedding, const SaliencyPartition& partition,
                                    const SaliencyAnchors& anchors) {
  if (anchors.background_count == 0 && anchors.foreground_count == 0) {
    fail(ErrorCode::BothSetsEmpty, "saliency partition has neither foreground nor background pixels");
  }
  if (anchors.background.size() != embedding.dim() || anchors.foreground.size() != embedding.dim()) {
    fail(ErrorCode::DimMismatch, "anchor dim does not match embedding dim");
  }
  const auto& bg = partition.bg_mask_embed;
  const auto& fg = partition.fg_mask_embed;
  if (static_cast<int>(bg.bits.size()) != embedding.pixels() || static_cast<int>(fg.bits.size()) != embedding.pixels()) {
    fail(ErrorCode::DimMismatch, "partition grid does not match embedding grid");
  }

  // Each set contributes mean_s -log sigmoid(z.own - z.other) = softplus(z.other - z.own).
  const Eigen::VectorXd bg_dir = anchors.foreground - anchors.background;
  LossValue out{0.0, Eigen::MatrixXd::Zero(embedding.dim(), embedding.pixels())};
  for (Eigen::Index s = 0; s < embedding.pixels(); ++s) {
    const auto z = embedding.features.col(s);
    if (bg.bits[static_cast<std::size_t>(s)] && anchors.background_count > 0) {
      const double margin = z.dot(bg_dir);
      out.value += softplus(margin) / anchors.background_count;
      out.grad.col(s) += (sigmoid(margin) / anchors.background_count) * bg_dir;
    }
    if (fg.bits[static_cast<std::size_t>(s)] && anchors.foreground_count > 0) {
      const double margin = -z.dot(bg_dir);
      out.value += softplus(margin) / anchors.foreground_count;
      out.grad.col(s) -= (sigmoid(margin) / anchors.foreground_count) * bg_dir;
    }
  }
  return out;
}

LossValue saliency_contrastive_loss(const EmbeddingMap& embedding, const SaliencyPartition& partition) {
  return saliency_contrastive_loss(embedding, partition, saliency_anchors(embedding, partition));
}

double total_loss(const LossComponents& c, const LossWeights& w) {
  return c.recon + w.lambda1 * c.proto + w.lambda2 * c.cluster + w.lambda3 * c.saliency;
}

Eigen::MatrixXd total_embedding_grad(const LossValue& proto, const LossValue& cluster, const LossValue& saliency,
                                     const LossWeights& w) {
  return w.lambda1 * proto.grad + w.lambda2 * cluster.grad + w.lambda3 * saliency.grad;
}

}  // namespace flowseg
