#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Core>

#include "flowseg/embed_net.hpp"

namespace flowseg {

enum class InitStrategy { Zeros, Ones, Orthogonal, Uniform01, Normal, TruncatedNormal };

InitStrategy parse_init_strategy(std::string_view name);  // throws UnknownStrategy
std::string_view to_string(InitStrategy strategy);

/// k unit-norm prototypes stored as the columns of a p x k matrix.
struct PrototypeBank {
  Eigen::MatrixXd prototypes;
  double tau = 0.5;  // separation threshold used only by separation_report

  int k() const { return static_cast<int>(prototypes.cols()); }
  int dim() const { return static_cast<int>(prototypes.rows()); }
};

struct PrototypeInit {
  PrototypeBank bank;
  // Set for the orthogonal strategy when k > p and exact orthogonality is
  // impossible; prototypes then minimize pairwise coherence instead.
  bool coherence_fallback = false;
};

/// Draws k p-vectors and l2-normalizes them (zeros stay zero). Throws
/// InvalidDims when k < 2 or p < 2.
PrototypeInit init_prototypes(InitStrategy strategy, int k, int p, std::uint64_t seed);

/// Fraction of prototype pairs whose |dot| exceeds bank.tau.
double separation_report(const PrototypeBank& bank);

/// S x k matrix of z^T P_j. Throws DimMismatch.
Eigen::MatrixXd affinity(const EmbeddingMap& embedding, const PrototypeBank& bank);

struct SinkhornOptions {
  double tolerance = 1e-6;
  int max_iterations = 200;
  double fail_threshold = 1e-3;
  // Scaling iterations before the column step switches to Newton updates on
  // the column potentials; >= max_iterations gives plain Sinkhorn-Knopp.
  int newton_after = 20;
};

struct TransportPlan {
  Eigen::MatrixXd values;  // S x k
  int iterations = 0;
  double violation = 0.0;  // max(|row - 1|, |col - S/k| / S)
  Eigen::VectorXd column_potential;  // log column scaling, reusable as a warm start

  int rows() const { return static_cast<int>(values.rows()); }
  int cols() const { return static_cast<int>(values.cols()); }
};

/// Entropy-regularized transport of S pixels onto k prototypes with rows summing
/// to 1 and columns to S/k. Scaling iterations run on a kernel whose potentials
/// are absorbed in the log domain whenever they drift, so large affinity/kappa
/// ratios do not overflow. Past options.newton_after iterations the column
/// step becomes a Newton step on the log column scaling. `warm_start` is the column_potential of an earlier
/// solve with the same k; it changes only the starting point. Throws
/// NotConverged or NonFinite.
TransportPlan sinkhorn_assign(const Eigen::MatrixXd& affinity, double kappa, const SinkhornOptions& options = {},
                              const Eigen::VectorXd* warm_start = nullptr);

/// Row-wise argmax, ties resolved toward the lowest column.
std::vector<int> harden(const Eigen::MatrixXd& plan);

/// P_j <- normalized mean of the embeddings labelled j; empty clusters (and
/// clusters whose mean vanishes) keep their previous prototype.
PrototypeBank update_prototypes(const EmbeddingMap& embedding, std::span<const int> labels, const PrototypeBank& bank);

/// Row-wise softmax of the affinity (temperature 1).
Eigen::MatrixXd assignment_distribution(const Eigen::MatrixXd& affinity);

}  // namespace flowseg
