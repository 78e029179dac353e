#include <gtest/gtest.h>

#include "tlg/sinkhorn.hpp"
#include "util.hpp"

using namespace tlg::ht;

namespace {

SinkhornOptions quiet(double lambda = 10.0) {
  SinkhornOptions o;
  o.lambda = lambda;
  o.warn_on_nonconvergence = false;
  return o;
}

}  // namespace

TEST(Sinkhorn, UniformCostGivesUniformPlan) {
  const auto plan = sinkhorn(torch::full({6, 6}, 0.3, torch::kFloat64), quiet());
  EXPECT_LT(max_abs_diff(plan.coupling, torch::full({6, 6}, 1.0 / 36.0, torch::kFloat64)), 1e-12);
  EXPECT_TRUE(plan.converged);
}

TEST(Sinkhorn, TwoByTwoConcentratesOnDiagonalAsLambdaGrows) {
  const auto cost = torch::tensor({{0.0, 1.0}, {1.0, 0.0}}, torch::kFloat64);
  double prev_off = 1.0;
  for (double lambda : {1.0, 5.0, 20.0, 80.0}) {
    const auto p = sinkhorn(cost, quiet(lambda)).coupling;
    const double off = p[0][1].item<double>() + p[1][0].item<double>();
    EXPECT_LT(off, prev_off);
    prev_off = off;
  }
  EXPECT_LT(prev_off, 1e-10);
}

TEST(Sinkhorn, MatchesDenseOracleOnRandomCosts) {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const auto c = oracle::random_matrix(rng, 10, 10);
    const auto plan = sinkhorn(to_tensor(c), quiet());
    const auto ref = oracle::sinkhorn(c, 10.0, 1e-6, 200);
    EXPECT_LT(plan.marginal_violation, 1e-6);
    EXPECT_LE(plan.iterations_used, 200);
    EXPECT_LT(max_abs_diff(plan.coupling, to_tensor(ref)), 1e-6);
    EXPECT_NEAR(plan.coupling.sum().item<double>(), 1.0, 1e-6);
    EXPECT_GE(plan.coupling.min().item<double>(), 0.0);
  }
}

TEST(Sinkhorn, LogDomainAgreesWithStandardDomain) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 10; ++trial) {
    const auto c = to_tensor(oracle::random_matrix(rng, 7, 9));
    const auto a = sinkhorn(c, quiet());
    const auto b = sinkhorn_log_domain(c, quiet());
    EXPECT_FALSE(a.log_domain);
    EXPECT_TRUE(b.log_domain);
    EXPECT_LT(max_abs_diff(a.coupling, b.coupling), 1e-6);
  }
}

TEST(Sinkhorn, ConstantCostShiftLeavesPlanUnchanged) {
  std::mt19937_64 rng(5);
  const auto c = to_tensor(oracle::random_matrix(rng, 8, 8));
  const auto a = sinkhorn(c, quiet()).coupling;
  const auto b = sinkhorn(c + 0.7, quiet()).coupling;
  EXPECT_LT(max_abs_diff(a, b), 1e-8);
}

TEST(Sinkhorn, UnderflowFallsBackToLogDomain) {
  // exp(-2000 * 1) underflows for every entry of the second row
  auto c = torch::zeros({3, 3}, torch::kFloat64);
  c[1] = 1.0;
  c[0][0] = 0.5;
  const auto plan = sinkhorn(c, quiet(2000.0));
  EXPECT_TRUE(plan.log_domain);
  EXPECT_TRUE(torch::isfinite(plan.coupling).all().item<bool>());
  EXPECT_LT(plan.marginal_violation, 1e-6);
}

TEST(Sinkhorn, NonConvergenceIsReportedNotThrown) {
  std::mt19937_64 rng(9);
  auto o = quiet(200.0);
  o.max_iters = 2;
  const auto plan = sinkhorn(to_tensor(oracle::random_matrix(rng, 12, 12)), o);
  EXPECT_FALSE(plan.converged);
  EXPECT_EQ(plan.iterations_used, 2);
  EXPECT_GT(plan.marginal_violation, 1e-6);
}

TEST(Sinkhorn, RoundedObjectiveNonincreasingAndDualNondecreasing) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    auto o = quiet();
    o.record_traces = true;
    o.tol = 1e-12;
    o.max_iters = 60;
    const auto plan = sinkhorn(to_tensor(oracle::random_matrix(rng, 10, 10)), o);
    ASSERT_GE(plan.objective_trace.size(), 2u);
    for (std::size_t i = 1; i < plan.objective_trace.size(); ++i) {
      EXPECT_LE(plan.objective_trace[i], plan.objective_trace[i - 1] + 1e-9);
      EXPECT_GE(plan.dual_trace[i], plan.dual_trace[i - 1] - 1e-9);
    }
  }
}

TEST(Sinkhorn, EntropyConventions) {
  EXPECT_DOUBLE_EQ(entropy(torch::tensor({{0.5, 0.0}, {0.0, 0.5}}, torch::kFloat64)), std::log(2.0));
  const auto u = torch::full({2, 2}, 0.25, torch::kFloat64);
  EXPECT_NEAR(entropic_objective(u, torch::ones({2, 2}, torch::kFloat64), 2.0), 1.0 - std::log(4.0) / 2.0, 1e-12);
}

TEST(Sinkhorn, RoundToFeasibleHitsMarginalsExactly) {
  std::mt19937_64 rng(4);
  const auto m = to_tensor(oracle::random_matrix(rng, 6, 5, 0.01, 0.1));
  const auto r = torch::full({6}, 1.0 / 6, torch::kFloat64), c = torch::full({5}, 0.2, torch::kFloat64);
  const auto f = round_to_feasible(m, r, c);
  EXPECT_LT(marginal_violation(f, r, c), 1e-14);
  EXPECT_GE(f.min().item<double>(), 0.0);
}

TEST(Sinkhorn, BatchedVariantsAgreeWithSingleInstance) {
  std::mt19937_64 rng(8);
  auto c = torch::stack({to_tensor(oracle::random_matrix(rng, 6, 6)), to_tensor(oracle::random_matrix(rng, 6, 6))});
  int iters = 0;
  const auto conv = sinkhorn_converged(c, 10.0, 500, 1e-10, &iters);
  const auto unrolled = sinkhorn_unrolled(c, 10.0, 500);
  for (int b = 0; b < 2; ++b) {
    auto o = quiet();
    o.tol = 1e-10;
    o.max_iters = 500;
    const auto single = sinkhorn(c[b], o).coupling;
    EXPECT_LT(max_abs_diff(conv[b], single), 1e-8);
    EXPECT_LT(max_abs_diff(unrolled[b], single), 1e-8);
  }
  EXPECT_GT(iters, 0);
}

TEST(Sinkhorn, RejectsInvalidInput) {
  EXPECT_ANY_THROW(sinkhorn(torch::ones({3, 3}, torch::kFloat64), quiet(-1.0)));
  auto bad = torch::ones({3, 3}, torch::kFloat64);
  bad[0][0] = std::numeric_limits<double>::quiet_NaN();
  EXPECT_ANY_THROW(sinkhorn(bad, quiet()));
}
