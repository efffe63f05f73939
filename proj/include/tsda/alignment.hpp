#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tsda/autograd.hpp"
#include "tsda/tensor.hpp"

namespace tsda::alignment {

/// Pairwise costs C[i, j] = ||zs_i - zt_j||^p.
struct CostMatrix {
  Tensor cost;  // [n x m]
  double exponent = 2.0;
};

CostMatrix cost_matrix(const Tensor& source, const Tensor& target, double p);

/// Coupling with its prescribed marginals.
struct TransportPlan {
  Tensor plan;  // [n x m]
  std::vector<double> mu;
  std::vector<double> nu;

  double row_violation() const;
  double column_violation() const;
};

enum class SinkhornDomain { automatic, naive, log };

struct SinkhornOptions {
  double eta = 1e-3;
  std::size_t max_iterations = 100;
  /// Early stop once the row-marginal violation drops below this; 0 disables.
  double tolerance = 1e-6;
  double p = 2.0;
  SinkhornDomain domain = SinkhornDomain::automatic;
  /// Log-domain eps-scaling from eta = max(C) down to `eta`. Plain iterations
  /// converge like 1/k once eta << C, this reaches the same fixed point far
  /// sooner. Not differentiable: sinkhorn_loss rejects it.
  bool anneal = false;
};

struct SinkhornResult {
  double loss = 0.0;
  TransportPlan plan;
  std::size_t iterations = 0;
  bool log_domain = false;
};

/// Entropic transport cost with uniform marginals: scaling iterations
/// a <- mu / (K b), b <- nu / (K^T a) with K = exp(-C / eta), then
/// loss = sum(C o diag(a) K diag(b)).
///
/// In `automatic` mode the iterations run on log potentials whenever
/// min(C)/eta > 30 or max(C)/eta is large enough to underflow K; `naive`
/// throws std::runtime_error when K b has a zero entry.
SinkhornResult sinkhorn(const Tensor& source, const Tensor& target, const SinkhornOptions& options = {});

/// Same as `sinkhorn` on a precomputed cost matrix.
SinkhornResult sinkhorn_from_cost(const Tensor& cost, const SinkhornOptions& options = {});

/// Differentiable loss; gradients are propagated through every scaling
/// iteration (the unrolled map C -> loss), not through a fixed plan.
Var sinkhorn_loss(Var source, Var target, const SinkhornOptions& options = {}, SinkhornResult* info = nullptr);

/// Biased squared MMD with k(x, y) = exp(-||x - y||^2 / (2 sigma^2)).
double mmd_loss(const Tensor& source, const Tensor& target, double sigma);
Var mmd_loss(Var source, Var target, double sigma);

/// Median of all pairwise distances in source u target (bandwidth heuristic).
double median_pairwise_distance(const Tensor& source, const Tensor& target);

/// Exact optimal transport cost between two equal-size uniform point sets by
/// enumerating permutation couplings. Intended for n <= 8.
double exact_transport_cost(const Tensor& cost);

enum class ProbeDivergence { sinkhorn, mmd, kl_on_histograms };

std::string to_string(ProbeDivergence d);

struct ProbeOptions {
  std::size_t points = 32;
  std::size_t dimension = 2;
  double cloud_sigma = 1.0;
  std::uint64_t seed = 0;
  SinkhornOptions sinkhorn{};
  std::size_t histogram_bins = 64;
};

struct ProbeRecord {
  double shift = 0.0;
  ProbeDivergence divergence = ProbeDivergence::sinkhorn;
  double loss = 0.0;
  double gradient_norm = 0.0;
};

/// Gaussian source cloud and a copy translated by `shift` (in units of the
/// cloud sigma) along the first axis; reports the norm of the divergence
/// gradient with respect to the source points.
ProbeRecord gradient_probe(double shift, ProbeDivergence divergence, const ProbeOptions& options = {});

}  // namespace tsda::alignment
