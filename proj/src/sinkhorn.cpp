#include "tlg/sinkhorn.hpp"

#include <cmath>
#include <iostream>

#include "tlg/errors.hpp"

namespace tlg::ht {

namespace {

struct Prepared {
  torch::Tensor cost, r, c;
};

Prepared prepare(const torch::Tensor& cost, const SinkhornOptions& opts, const torch::Tensor& row,
                 const torch::Tensor& col) {
  check_shape(cost.dim() == 2, "sinkhorn: cost must be a matrix");
  if (!(opts.lambda > 0.0)) throw std::invalid_argument("sinkhorn: lambda must be positive");
  if (opts.max_iters < 1) throw std::invalid_argument("sinkhorn: max_iters must be positive");
  Prepared p;
  p.cost = cost.detach().to(torch::kFloat64).contiguous();
  if (!torch::isfinite(p.cost).all().item<bool>()) throw DataError("sinkhorn: non-finite cost");
  const auto n = cost.size(0), m = cost.size(1);
  p.r = row.defined() ? row.detach().to(torch::kFloat64) : torch::full({n}, 1.0 / static_cast<double>(n), torch::kFloat64);
  p.c = col.defined() ? col.detach().to(torch::kFloat64) : torch::full({m}, 1.0 / static_cast<double>(m), torch::kFloat64);
  check_shape(p.r.dim() == 1 && p.r.size(0) == n && p.c.dim() == 1 && p.c.size(0) == m,
              "sinkhorn: marginal lengths must match the cost matrix");
  if (!(p.r.min().item<double>() > 0.0) || !(p.c.min().item<double>() > 0.0))
    throw DataError("sinkhorn: marginals must be strictly positive");
  if (std::abs(p.r.sum().item<double>() - 1.0) > 1e-9 || std::abs(p.c.sum().item<double>() - 1.0) > 1e-9)
    throw DataError("sinkhorn: marginals must each sum to 1");
  return p;
}

double dual_value(const torch::Tensor& log_u, const torch::Tensor& log_v, const torch::Tensor& r,
                  const torch::Tensor& c, const torch::Tensor& tau, double lambda) {
  return ((r * log_u).sum().item<double>() + (c * log_v).sum().item<double>() + 1.0 - tau.sum().item<double>()) /
         lambda;
}

void finish(TransportPlan& plan, const torch::Tensor& cost_in, const SinkhornOptions& opts) {
  if (!plan.converged && opts.warn_on_nonconvergence)
    std::clog << "[tlg] warning: sinkhorn stopped after " << plan.iterations_used
              << " iterations with marginal violation " << plan.marginal_violation << " (tol " << opts.tol << ")\n";
  if (cost_in.scalar_type() != torch::kFloat64) plan.coupling = plan.coupling.to(cost_in.scalar_type());
}

}  // namespace

double entropy(const torch::Tensor& coupling) {
  const auto t = coupling.detach().to(torch::kFloat64);
  const auto pos = t > 0;
  const auto safe = torch::where(pos, t, torch::ones_like(t));
  return -(t * torch::log(safe)).sum().item<double>();
}

double entropic_objective(const torch::Tensor& coupling, const torch::Tensor& cost, double lambda) {
  const auto t = coupling.detach().to(torch::kFloat64);
  return (t * cost.detach().to(torch::kFloat64)).sum().item<double>() - entropy(t) / lambda;
}

double marginal_violation(const torch::Tensor& coupling, const torch::Tensor& r, const torch::Tensor& c) {
  const auto t = coupling.detach().to(torch::kFloat64);
  const double row = (t.sum(1) - r.to(torch::kFloat64)).abs().max().item<double>();
  const double col = (t.sum(0) - c.to(torch::kFloat64)).abs().max().item<double>();
  return std::max(row, col);
}

torch::Tensor round_to_feasible(const torch::Tensor& coupling, const torch::Tensor& r, const torch::Tensor& c) {
  auto t = coupling.detach().to(torch::kFloat64);
  const auto r64 = r.to(torch::kFloat64), c64 = c.to(torch::kFloat64);
  const auto x = torch::clamp_max(r64 / t.sum(1), 1.0);
  t = t * x.unsqueeze(1);
  const auto y = torch::clamp_max(c64 / t.sum(0), 1.0);
  t = t * y.unsqueeze(0);
  const auto er = r64 - t.sum(1);
  const auto ec = c64 - t.sum(0);
  const double mass = er.sum().item<double>();
  if (mass > 0.0) t = t + torch::outer(er, ec) / mass;
  return t;
}

TransportPlan sinkhorn(const torch::Tensor& cost_in, const SinkhornOptions& opts, const torch::Tensor& row,
                       const torch::Tensor& col) {
  if (opts.force_log_domain) return sinkhorn_log_domain(cost_in, opts, row, col);
  const auto p = prepare(cost_in, opts, row, col);
  const auto kernel = torch::exp(-opts.lambda * p.cost);
  if (!(kernel.sum(1).min().item<double>() > 0.0) || !(kernel.sum(0).min().item<double>() > 0.0))
    return sinkhorn_log_domain(cost_in, opts, row, col);

  TransportPlan plan;
  plan.row_marginal = p.r;
  plan.col_marginal = p.c;
  plan.lambda = opts.lambda;
  auto u = torch::ones_like(p.r);
  auto v = torch::ones_like(p.c);
  torch::Tensor tau;
  for (int it = 1; it <= opts.max_iters; ++it) {
    u = p.r / torch::mv(kernel, v);
    v = p.c / torch::mv(kernel.t(), u);
    if (!torch::isfinite(u).all().item<bool>() || !torch::isfinite(v).all().item<bool>() ||
        !(u.min().item<double>() > 0.0) || !(v.min().item<double>() > 0.0))
      return sinkhorn_log_domain(cost_in, opts, row, col);
    tau = u.unsqueeze(1) * kernel * v.unsqueeze(0);
    plan.iterations_used = it;
    plan.marginal_violation = marginal_violation(tau, p.r, p.c);
    if (opts.record_traces) {
      plan.objective_trace.push_back(entropic_objective(round_to_feasible(tau, p.r, p.c), p.cost, opts.lambda));
      plan.dual_trace.push_back(dual_value(torch::log(u), torch::log(v), p.r, p.c, tau, opts.lambda));
    }
    if (plan.marginal_violation < opts.tol) {
      plan.converged = true;
      break;
    }
  }
  plan.coupling = tau;
  finish(plan, cost_in, opts);
  return plan;
}

TransportPlan sinkhorn_log_domain(const torch::Tensor& cost_in, const SinkhornOptions& opts, const torch::Tensor& row,
                                  const torch::Tensor& col) {
  const auto p = prepare(cost_in, opts, row, col);
  TransportPlan plan;
  plan.row_marginal = p.r;
  plan.col_marginal = p.c;
  plan.lambda = opts.lambda;
  plan.log_domain = true;
  const auto log_k = -opts.lambda * p.cost;
  const auto log_r = torch::log(p.r), log_c = torch::log(p.c);
  auto log_u = torch::zeros_like(p.r);
  auto log_v = torch::zeros_like(p.c);
  torch::Tensor tau;
  for (int it = 1; it <= opts.max_iters; ++it) {
    log_u = log_r - torch::logsumexp(log_k + log_v.unsqueeze(0), 1);
    log_v = log_c - torch::logsumexp(log_k + log_u.unsqueeze(1), 0);
    tau = torch::exp(log_u.unsqueeze(1) + log_k + log_v.unsqueeze(0));
    plan.iterations_used = it;
    plan.marginal_violation = marginal_violation(tau, p.r, p.c);
    if (opts.record_traces) {
      plan.objective_trace.push_back(entropic_objective(round_to_feasible(tau, p.r, p.c), p.cost, opts.lambda));
      plan.dual_trace.push_back(dual_value(log_u, log_v, p.r, p.c, tau, opts.lambda));
    }
    if (plan.marginal_violation < opts.tol) {
      plan.converged = true;
      break;
    }
  }
  plan.coupling = tau;
  finish(plan, cost_in, opts);
  return plan;
}

torch::Tensor sinkhorn_unrolled(const torch::Tensor& cost, double lambda, int iters) {
  check_shape(cost.dim() == 3, "sinkhorn_unrolled: expected (B, N, M) costs");
  const auto n = cost.size(1), m = cost.size(2);
  const double log_r = -std::log(static_cast<double>(n));
  const double log_c = -std::log(static_cast<double>(m));
  const auto log_k = -lambda * cost;
  auto log_v = torch::zeros({cost.size(0), m}, cost.options());
  torch::Tensor log_u;
  for (int it = 0; it < iters; ++it) {
    log_u = log_r - torch::logsumexp(log_k + log_v.unsqueeze(1), 2);
    log_v = log_c - torch::logsumexp(log_k + log_u.unsqueeze(2), 1);
  }
  return torch::exp(log_u.unsqueeze(2) + log_k + log_v.unsqueeze(1));
}

torch::Tensor sinkhorn_converged(const torch::Tensor& cost, double lambda, int max_iters, double tol,
                                 int* iterations_used) {
  check_shape(cost.dim() == 3, "sinkhorn_converged: expected (B, N, M) costs");
  torch::NoGradGuard no_grad;
  const auto c64 = cost.detach().to(torch::kFloat64);
  const auto n = c64.size(1), m = c64.size(2);
  const double rn = 1.0 / static_cast<double>(n), cm = 1.0 / static_cast<double>(m);
  const auto log_k = -lambda * c64;
  auto log_v = torch::zeros({c64.size(0), m}, c64.options());
  torch::Tensor log_u, tau;
  int it = 0;
  while (it < max_iters) {
    ++it;
    log_u = std::log(rn) - torch::logsumexp(log_k + log_v.unsqueeze(1), 2);
    log_v = std::log(cm) - torch::logsumexp(log_k + log_u.unsqueeze(2), 1);
    tau = torch::exp(log_u.unsqueeze(2) + log_k + log_v.unsqueeze(1));
    const double row_viol = (tau.sum(2) - rn).abs().max().item<double>();
    const double col_viol = (tau.sum(1) - cm).abs().max().item<double>();
    if (std::max(row_viol, col_viol) < tol) break;
  }
  if (iterations_used) *iterations_used = it;
  return tau.to(cost.scalar_type());
}

}  // namespace tlg::ht
