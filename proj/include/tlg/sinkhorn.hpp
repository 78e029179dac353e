#pragma once

#include <vector>

#include <torch/torch.h>

namespace tlg::ht {

struct SinkhornOptions {
  double lambda = 10.0;  // inverse entropic temperature: K = exp(-lambda * cost)
  int max_iters = 200;
  double tol = 1e-6;     // stop once the max marginal violation drops below this
  bool record_traces = false;
  bool force_log_domain = false;
  bool warn_on_nonconvergence = true;
};

// Entropic transport plan between two discrete marginals.
struct TransportPlan {
  torch::Tensor coupling;      // (N, M), nonnegative
  torch::Tensor row_marginal;  // (N)
  torch::Tensor col_marginal;  // (M)
  double lambda = 0.0;
  int iterations_used = 0;
  bool converged = false;
  bool log_domain = false;
  double marginal_violation = 0.0;
  // Per full iteration: primal objective <tau, C> - H(tau)/lambda of the feasible rounding of the
  // iterate, and the dual objective. The first is nonincreasing, the second nondecreasing.
  std::vector<double> objective_trace;
  std::vector<double> dual_trace;
};

// Alternating row/column scaling. Marginals default to uniform. Falls back to log-domain updates
// when exp(-lambda * cost) underflows a whole row or column.
TransportPlan sinkhorn(const torch::Tensor& cost, const SinkhornOptions& opts = {},
                       const torch::Tensor& row_marginal = {}, const torch::Tensor& col_marginal = {});

// Same fixed point computed entirely with log-sum-exp updates.
TransportPlan sinkhorn_log_domain(const torch::Tensor& cost, const SinkhornOptions& opts = {},
                                  const torch::Tensor& row_marginal = {}, const torch::Tensor& col_marginal = {});

// Batched (B, N, M) log-domain Sinkhorn with uniform marginals for exactly `iters` iterations.
// Differentiable with respect to `cost`.
torch::Tensor sinkhorn_unrolled(const torch::Tensor& cost, double lambda, int iters);

// Batched (B, N, M), uniform marginals, iterated until every plan meets `tol` or `max_iters`.
// Returns the couplings; `iterations_used` receives the iteration count when non-null.
torch::Tensor sinkhorn_converged(const torch::Tensor& cost, double lambda, int max_iters, double tol,
                                 int* iterations_used = nullptr);

// H(tau) = -sum tau log tau with 0 log 0 = 0.
double entropy(const torch::Tensor& coupling);
double entropic_objective(const torch::Tensor& coupling, const torch::Tensor& cost, double lambda);
double marginal_violation(const torch::Tensor& coupling, const torch::Tensor& row_marginal,
                          const torch::Tensor& col_marginal);

// Projects a positive matrix onto the transport polytope U(r, c) (row/column shrink, then a
// rank-one correction of the remaining deficit).
torch::Tensor round_to_feasible(const torch::Tensor& coupling, const torch::Tensor& row_marginal,
                                const torch::Tensor& col_marginal);

}  // namespace tlg::ht
