#pragma once

#include <span>

#include <Eigen/Core>

#include "flowseg/embed_net.hpp"
#include "flowseg/proto_cluster.hpp"
#include "flowseg/saliency.hpp"

namespace flowseg {

struct LossWeights {
  double lambda1 = 0.01;  // prototype loss
  double lambda2 = 0.01;  // cluster contrastive loss
  double lambda3 = 0.01;  // saliency contrastive loss
  double kappa = 0.05;    // Sinkhorn entropy weight
  double delta = 0.1;     // background threshold
  double eta = 0.5;       // FG/BG prototype threshold
  int t_max = 100;        // iterations on the first frame

  /// Throws InvalidArgument when a field is outside its domain.
  void validate() const;
};

/// A scalar loss and its gradient w.r.t. the loss input.
struct LossValue {
  double value = 0.0;
  Eigen::MatrixXd grad;
};

/// Mean squared l2 distance per pixel: (1/S) sum_s |x_s - x_hat_s|^2, gradient
/// taken w.r.t. the reconstruction. Both inputs are channels x pixels.
LossValue recon_loss(const Eigen::MatrixXd& target, const Eigen::MatrixXd& reconstruction);

/// (1/S) sum_s (1 - z_s . P_label(s))^2; gradient w.r.t. the normalized embedding.
LossValue proto_loss(const EmbeddingMap& embedding, std::span<const int> labels, const PrototypeBank& bank);

/// Cross-entropy of the assigned prototype under the row softmax of affinities.
LossValue cluster_contrastive_loss(const EmbeddingMap& embedding, std::span<const int> labels,
                                   const PrototypeBank& bank);

/// Mean embeddings of the embedding-grid fg/bg sets, treated as constants by
/// the saliency loss.
struct SaliencyAnchors {
  Eigen::VectorXd background;
  Eigen::VectorXd foreground;
  int background_count = 0;
  int foreground_count = 0;
};

SaliencyAnchors saliency_anchors(const EmbeddingMap& embedding, const SaliencyPartition& partition);

/// Two-term contrastive loss on embeddings: background pixels are pulled toward
/// the background anchor and away from the foreground anchor, and vice versa.
/// An empty set contributes zero. Throws BothSetsEmpty.
LossValue saliency_contrastive_loss(const EmbeddingMap& embedding, const SaliencyPartition& partition,
                                    const SaliencyAnchors& anchors);
LossValue saliency_contrastive_loss(const EmbeddingMap& embedding, const SaliencyPartition& partition);

struct LossComponents {
  double recon = 0.0;
  double proto = 0.0;
  double cluster = 0.0;
  double saliency = 0.0;
};

double total_loss(const LossComponents& components, const LossWeights& weights);

/// Weighted gradient w.r.t. the normalized embedding.
Eigen::MatrixXd total_embedding_grad(const LossValue& proto, const LossValue& cluster, const LossValue& saliency,
                                     const LossWeights& weights);

}  // namespace flowseg
