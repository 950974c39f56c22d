#include "flowseg/proto_cluster.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include <Eigen/QR>

#include "flowseg/error.hpp"

namespace flowseg {

namespace {

void normalize_columns(Eigen::MatrixXd& m) {
  for (Eigen::Index j = 0; j < m.cols(); ++j) {
    const double n = m.col(j).norm();
    if (n > 0.0) m.col(j) /= n;
  }
}

// Gradient descent on the frame potential sum_{i != j} (P_i . P_j)^2 over the
// unit sphere; its minimizers are the least coherent configurations.
void minimize_coherence(Eigen::MatrixXd& m) {
  constexpr int kSteps = 500;
  constexpr double kStep = 0.05;
  for (int it = 0; it < kSteps; ++it) {
    Eigen::MatrixXd gram = m.transpose() * m;
    gram.diagonal().setZero();
    m -= kStep * (m * gram);
    normalize_columns(m);
  }
}

double logsumexp(const double* v, Eigen::Index n, Eigen::Index stride) {
  double mx = -std::numeric_limits<double>::infinity();
  for (Eigen::Index i = 0; i < n; ++i) mx = std::max(mx, v[i * stride]);
  if (!std::isfinite(mx)) return mx;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) sum += std::exp(v[i * stride] - mx);
  return mx + std::log(sum);
}

}  // namespace

InitStrategy parse_init_strategy(std::string_view name) {
  if (name == "zeros") return InitStrategy::Zeros;
  if (name == "ones") return InitStrategy::Ones;
  if (name == "orthogonal") return InitStrategy::Orthogonal;
  if (name == "uniform01") return InitStrategy::Uniform01;
  if (name == "normal") return InitStrategy::Normal;
  if (name == "truncated_normal") return InitStrategy::TruncatedNormal;
  fail(ErrorCode::UnknownStrategy, "unknown prototype init '" + std::string(name) + "'");
}

std::string_view to_string(InitStrategy strategy) {
  switch (strategy) {
    case InitStrategy::Zeros: return "zeros";
    case InitStrategy::Ones: return "ones";
    case InitStrategy::Orthogonal: return "orthogonal";
    case InitStrategy::Uniform01: return "uniform01";
    case InitStrategy::Normal: return "normal";
    case InitStrategy::TruncatedNormal: return "truncated_normal";
  }
  return "unknown";
}

PrototypeInit init_prototypes(InitStrategy strategy, int k, int p, std::uint64_t seed) {
  if (k < 2 || p < 2) {
    fail(ErrorCode::InvalidDims, "prototype bank needs k >= 2 and p >= 2, got k=" + std::to_string(k) +
                                     " p=" + std::to_string(p));
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);

  PrototypeInit init;
  Eigen::MatrixXd& m = init.bank.prototypes;
  m.resize(p, k);
  switch (strategy) {
    case InitStrategy::Zeros:
      m.setZero();
      break;
    case InitStrategy::Ones:
      m.setOnes();
      break;
    case InitStrategy::Uniform01:
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = uniform(rng);
      break;
    case InitStrategy::Normal:
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(rng);
      break;
    case InitStrategy::TruncatedNormal:
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std::clamp(normal(rng), -2.0, 2.0);
      break;
    case InitStrategy::Orthogonal: {
      const int n = std::max(k, p);
      Eigen::MatrixXd g(n, n);
      for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
      const Eigen::MatrixXd q = Eigen::HouseholderQR<Eigen::MatrixXd>(g).householderQ();
      if (k <= p) {
        m = q.topLeftCorner(p, k);
      } else {
        m = q.topLeftCorner(p, k);
        normalize_columns(m);
        minimize_coherence(m);
        init.coherence_fallback = true;
      }
      break;
    }
  }
  normalize_columns(m);
  return init;
}

double separation_report(const PrototypeBank& bank) {
  const int k = bank.k();
  if (k < 2) return 0.0;
  const Eigen::MatrixXd gram = bank.prototypes.transpose() * bank.prototypes;
  int over = 0;
  for (int i = 0; i < k; ++i) {
    for (int j = i + 1; j < k; ++j) over += std::abs(gram(i, j)) > bank.tau ? 1 : 0;
  }
  return static_cast<double>(over) / (k * (k - 1) / 2);
}

Eigen::MatrixXd affinity(const EmbeddingMap& embedding, const PrototypeBank& bank) {
  if (embedding.dim() != bank.dim()) {
    fail(ErrorCode::DimMismatch, "embedding dim " + std::to_string(embedding.dim()) + " vs prototype dim " +
                                     std::to_string(bank.dim()));
  }
  return embedding.features.transpose() * bank.prototypes;
}

TransportPlan sinkhorn_assign(const Eigen::MatrixXd& affinity, double kappa, const SinkhornOptions& options,
                              const Eigen::VectorXd* warm_start) {
  if (!(kappa > 0.0)) fail(ErrorCode::InvalidArgument, "kappa must be positive");
  if (!affinity.allFinite()) fail(ErrorCode::NonFinite, "affinity contains NaN or Inf");
  const Eigen::Index S = affinity.rows();
  const Eigen::Index k = affinity.cols();
  if (S == 0 || k == 0) fail(ErrorCode::DimMismatch, "empty affinity matrix");

  const Eigen::MatrixXd scores = affinity / kappa;
  const double col_target = static_cast<double>(S) / static_cast<double>(k);
  const double log_col_target = std::log(col_target);
  const double score_range = std::max(1.0, scores.maxCoeff() - scores.minCoeff());

  // plan = diag(u) exp(scores + f 1^T + 1 g^T) diag(v); f, g absorb the
  // scalings whenever u or v leave a safe range.
  Eigen::VectorXd f = -scores.rowwise().maxCoeff();
  Eigen::VectorXd g = Eigen::VectorXd::Zero(k);
  const bool warm = warm_start != nullptr && warm_start->size() == k && warm_start->allFinite();
  if (warm) g = *warm_start;
  Eigen::MatrixXd kernel(S, k);
  Eigen::VectorXd u = Eigen::VectorXd::Ones(S);
  Eigen::VectorXd v = Eigen::VectorXd::Ones(k);

  auto rebuild_kernel = [&] {
    kernel = ((scores.colwise() + f).rowwise() + g.transpose()).array().exp().matrix();
  };
  // Exact log-domain half steps, used to (re)seat the potentials.
  auto log_update_columns = [&] {
    Eigen::MatrixXd logits = (scores.colwise() + f).rowwise() + g.transpose();
    for (Eigen::Index j = 0; j < k; ++j) g(j) += log_col_target - logsumexp(logits.col(j).data(), S, 1);
  };
  auto log_update_rows = [&] {
    Eigen::MatrixXd logits = (scores.colwise() + f).rowwise() + g.transpose();
    for (Eigen::Index s = 0; s < S; ++s) f(s) -= logsumexp(logits.data() + s, k, S);
  };
  auto absorb = [&] {
    f.array() += u.array().log();
    g.array() += v.array().log();
    u.setOnes();
    v.setOnes();
  };
  constexpr double kBound = 1e50;
  auto out_of_range = [&](const Eigen::VectorXd& x) {
    return !x.allFinite() || x.maxCoeff() > kBound || x.minCoeff() < 1.0 / kBound;
  };
  auto measure = [&] {
    const Eigen::VectorXd cols = v.asDiagonal() * (kernel.transpose() * u);
    const Eigen::VectorXd rows = u.asDiagonal() * (kernel * v);
    return std::max((rows.array() - 1.0).abs().maxCoeff(),
                    (cols.array() - col_target).abs().maxCoeff() / static_cast<double>(S));
  };

  // Row-eliminated dual: phi(g) = c * sum(g) - sum_s logsumexp_j(scores_sj + g_j).
  auto dual = [&](const Eigen::VectorXd& gg) {
    const Eigen::MatrixXd logits = scores.rowwise() + gg.transpose();
    double value = col_target * gg.sum();
    for (Eigen::Index s = 0; s < S; ++s) value -= logsumexp(logits.data() + s, k, S);
    return value;
  };
  // Newton ascent on the column potentials followed by an exact row step.
  // Same fixed point as the scaling iteration, but it does not stall when
  // near-duplicate prototypes make the dual almost flat.
  auto newton_columns = [&] {
    absorb();
    const Eigen::MatrixXd plan = ((scores.colwise() + f).rowwise() + g.transpose()).array().exp().matrix();
    const Eigen::VectorXd mass = plan.colwise().sum().transpose();
    const Eigen::VectorXd grad = (col_target - mass.array()).matrix();
    Eigen::MatrixXd hess = Eigen::MatrixXd(mass.asDiagonal()) - plan.transpose() * plan;
    const double trace = hess.trace();
    // The dual is flat along the all-ones direction; pin it down.
    hess.array() += trace / static_cast<double>(k * k);
    hess.diagonal().array() += 1e-12 * trace + std::numeric_limits<double>::min();
    Eigen::VectorXd step = hess.ldlt().solve(grad);
    bool moved = false;
    if (step.allFinite()) {
      // A nearly hard plan has a nearly singular Hessian; no potential needs
      // to move further than the score range.
      const double largest = step.cwiseAbs().maxCoeff();
      if (largest > score_range) step *= score_range / largest;
      const double base = dual(g);
      const double slope = grad.dot(step);
      double t = 1.0;
      for (int tries = 0; tries < 60 && !moved; ++tries, t *= 0.5) {
        const Eigen::VectorXd trial = g + t * step;
        if (dual(trial) >= base + 1e-4 * t * slope) {
          g = trial;
          moved = true;
        }
      }
    }
    if (!moved) log_update_columns();
    log_update_rows();
    rebuild_kernel();
  };

  if (!warm) log_update_columns();
  log_update_rows();
  rebuild_kernel();

  TransportPlan plan;
  double violation = std::numeric_limits<double>::infinity();
  int it = 0;
  while (it < options.max_iterations) {
    ++it;
    if (it > options.newton_after) {
      newton_columns();
    } else {
      const Eigen::VectorXd col_mass = kernel.transpose() * u;
      v = (col_target / col_mass.array()).matrix();
      if (out_of_range(v)) {
        absorb();
        log_update_columns();
        rebuild_kernel();
      }
      const Eigen::VectorXd row_mass = kernel * v;
      u = (1.0 / row_mass.array()).matrix();
      if (out_of_range(u)) {
        absorb();
        log_update_rows();
        rebuild_kernel();
      }
    }
    // Rows are exact after the row step; this mostly measures the columns.
    violation = measure();
    if (violation <= options.tolerance) break;
  }

  plan.values = u.asDiagonal() * kernel * v.asDiagonal();
  plan.iterations = it;
  plan.violation = violation;
  plan.column_potential = g.array() + v.array().log();
  if (!plan.values.allFinite()) fail(ErrorCode::NonFinite, "transport plan is not finite");
  if (violation > options.fail_threshold) {
    fail(ErrorCode::NotConverged, "Sinkhorn marginal violation " + std::to_string(violation) + " after " +
                                      std::to_string(it) + " iterations");
  }
  return plan;
}

std::vector<int> harden(const Eigen::MatrixXd& plan) {
  std::vector<int> labels(static_cast<std::size_t>(plan.rows()), 0);
  for (Eigen::Index s = 0; s < plan.rows(); ++s) {
    int best = 0;
    for (Eigen::Index j = 1; j < plan.cols(); ++j) {
      if (plan(s, j) > plan(s, best)) best = static_cast<int>(j);
    }
    labels[static_cast<std::size_t>(s)] = best;
  }
  return labels;
}

PrototypeBank update_prototypes(const EmbeddingMap& embedding, std::span<const int> labels,
                                const PrototypeBank& bank) {
  if (static_cast<int>(labels.size()) != embedding.pixels()) {
    fail(ErrorCode::DimMismatch, "label count does not match embedding pixels");
  }
  if (embedding.dim() != bank.dim()) fail(ErrorCode::DimMismatch, "embedding/prototype dim mismatch");
  Eigen::MatrixXd sums = Eigen::MatrixXd::Zero(bank.dim(), bank.k());
  std::vector<int> counts(static_cast<std::size_t>(bank.k()), 0);
  for (std::size_t s = 0; s < labels.size(); ++s) {
    const int j = labels[s];
    if (j < 0 || j >= bank.k()) fail(ErrorCode::DimMismatch, "label out of range");
    sums.col(j) += embedding.features.col(static_cast<Eigen::Index>(s));
    ++counts[static_cast<std::size_t>(j)];
  }
  PrototypeBank out = bank;
  for (int j = 0; j < bank.k(); ++j) {
    if (counts[static_cast<std::size_t>(j)] == 0) continue;
    const double n = sums.col(j).norm();
    if (n < kNormFloor) continue;
    out.prototypes.col(j) = sums.col(j) / n;
  }
  return out;
}

Eigen::MatrixXd assignment_distribution(const Eigen::MatrixXd& affinity) {
  Eigen::MatrixXd out(affinity.rows(), affinity.cols());
  for (Eigen::Index s = 0; s < affinity.rows(); ++s) {
    const double mx = affinity.row(s).maxCoeff();
    const Eigen::RowVectorXd e = (affinity.row(s).array() - mx).exp().matrix();
    out.row(s) = e / e.sum();
  }
  return out;
}

}  // namespace flowseg
