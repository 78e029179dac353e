#include <gtest/gtest.h>

#include "tlg/errors.hpp"
#include "tlg/ha_aggregation.hpp"
#include "util.hpp"

using namespace tlg;
using namespace tlg::ha;
using backbone::Level;

namespace {

// cos(a[:, i, j], b[:, k, l]) clamped at 0, zero vectors give 0
double cos_oracle(const torch::Tensor& a, const torch::Tensor& b, long n, long i, long j, long k, long l) {
  double dot = 0, na = 0, nb = 0;
  for (long c = 0; c < a.size(1); ++c) {
    const double x = a[n][c][i][j].item<double>(), y = b[n][c][k][l].item<double>();
    dot += x * y;
    na += x * x;
    nb += y * y;
  }
  if (na == 0 || nb == 0) return 0.0;
  return std::max(0.0, dot / std::sqrt(na * nb));
}

}  // namespace

TEST(HaChannels, ReductionMatchesLevelExponent) {
  EXPECT_EQ(reduced_channels(64, Level::low), 4);
  EXPECT_EQ(reduced_channels(512, Level::high), 256);
  for (Level l : {Level::low, Level::middle, Level::high})
    for (int c : {16, 64, 256, 1024, 2048}) EXPECT_EQ(reduced_channels(c, l) * (1 << level_alpha(l)), c);
  EXPECT_EQ(level_alpha(Level::low), 4);
  EXPECT_EQ(level_alpha(Level::middle), 2);
  EXPECT_EQ(level_alpha(Level::high), 1);
  EXPECT_THROW(reduced_channels(24, Level::low), ConfigError);
  EXPECT_THROW(reduced_channels(7, Level::high), ConfigError);
}

TEST(HaProjection, AlignsOntoGrid) {
  LevelProjection high(512, Level::high, 32);
  const auto a = high->project_and_align(torch::randn({2, 512, 4, 4}), 8);
  EXPECT_EQ(a.value.sizes(), (std::vector<int64_t>{2, 256, 8, 8}));
  EXPECT_EQ(high->equalize(a).sizes(), (std::vector<int64_t>{2, 32, 8, 8}));
  LevelProjection low(64, Level::low, 32);
  EXPECT_EQ(low->project_and_align(torch::randn({1, 64, 16, 16}), 8).value.sizes(),
            (std::vector<int64_t>{1, 4, 8, 8}));
  EXPECT_THROW(high->project_and_align(torch::randn({1, 64, 4, 4}), 8), ShapeError);
}

TEST(HaProjection, BilinearKeepsConstants) {
  const auto x = torch::full({1, 3, 4, 4}, 0.37, torch::kFloat64);
  const auto y = resize_to_grid(x, 11);
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{1, 3, 11, 11}));
  EXPECT_LT(max_abs_diff(y, torch::full_like(y, 0.37)), 1e-12);
  EXPECT_TRUE(torch::equal(resize_to_grid(x, 4), x));
}

TEST(HaSum, IdentitiesAndOracle) {
  const auto z = torch::zeros({1, 4, 5, 5});
  EXPECT_TRUE(torch::equal(sum_levels({z, z, z}), z));
  const auto x = torch::randn({1, 4, 5, 5});
  EXPECT_TRUE(torch::equal(sum_levels({x, z, z}), x));
  torch::manual_seed(4);
  for (int t = 0; t < 10; ++t) {
    const auto a = torch::randn({2, 3, 4, 4}, torch::kFloat64), b = torch::randn({2, 3, 4, 4}, torch::kFloat64),
               c = torch::randn({2, 3, 4, 4}, torch::kFloat64);
    const auto s = sum_levels({a, b, c});
    auto aa = a.accessor<double, 4>(), bb = b.accessor<double, 4>(), cc = c.accessor<double, 4>();
    auto ss = s.accessor<double, 4>();
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < 3; ++ch)
        for (int i = 0; i < 4; ++i)
          for (int j = 0; j < 4; ++j) EXPECT_EQ(ss[n][ch][i][j], aa[n][ch][i][j] + bb[n][ch][i][j] + cc[n][ch][i][j]);
  }
  EXPECT_THROW(sum_levels({x, torch::zeros({1, 4, 4, 4})}), ShapeError);
}

TEST(HaCorrelation, SelfDiagonalIsOne) {
  const auto a = torch::randn({1, 8, 5, 5}, torch::kFloat64);
  const auto v = raw_correlation(a, a);
  for (int i = 0; i < 5; ++i)
    for (int j = 0; j < 5; ++j) EXPECT_NEAR(v[0][i][j][i][j].item<double>(), 1.0, 1e-12);
  EXPECT_GE(v.min().item<double>(), 0.0);
  EXPECT_LE(v.max().item<double>(), 1.0 + 1e-12);
}

TEST(HaCorrelation, OrthogonalAndZeroVectors) {
  auto a = torch::zeros({1, 2, 1, 2}, torch::kFloat64), b = torch::zeros({1, 2, 1, 2}, torch::kFloat64);
  a[0][0][0][0] = 1.0;
  b[0][1][0][0] = 2.0;  // orthogonal to a(0,0)
  b[0][0][0][1] = 3.0;  // parallel to a(0,0)
  const auto v = raw_correlation(a, b);
  EXPECT_EQ(v[0][0][0][0][0].item<double>(), 0.0);
  EXPECT_NEAR(v[0][0][0][0][1].item<double>(), 1.0, 1e-12);
  EXPECT_EQ(v[0][0][1][0][1].item<double>(), 0.0);  // a(0,1) is the zero vector
  EXPECT_TRUE(torch::isfinite(v).all().item<bool>());
}

TEST(HaCorrelation, MatchesQuadrupleLoopOracle) {
  torch::manual_seed(7);
  const auto a = torch::randn({2, 5, 6, 6}, torch::kFloat64);
  const auto b = torch::randn({2, 5, 6, 6}, torch::kFloat64);
  const auto v = raw_correlation(a, b);
  double worst = 0;
  for (long n = 0; n < 2; ++n)
    for (long i = 0; i < 6; ++i)
      for (long j = 0; j < 6; ++j)
        for (long k = 0; k < 6; ++k)
          for (long l = 0; l < 6; ++l)
            worst = std::max(worst, std::abs(v[n][i][j][k][l].item<double>() - cos_oracle(a, b, n, i, j, k, l)));
  EXPECT_LT(worst, 1e-6);
}

TEST(HaCorrelation, SqueezeShapeAndGradient) {
  torch::manual_seed(2);
  CorrelationSqueeze sq(3, 4);
  sq->to(torch::kFloat64);
  auto x = torch::rand({1, 3, 6, 6, 6, 6}, torch::TensorOptions().dtype(torch::kFloat64).requires_grad(true));
  const auto y = sq->forward(x);
  EXPECT_EQ(y.sizes(), (std::vector<int64_t>{1, 4, 6, 6}));
  const auto w = torch::randn_like(y);
  auto loss = (y * w).sum();
  loss.backward();
  const auto grad = x.grad().clone();
  torch::NoGradGuard ng;
  const double h = 1e-6;
  auto flat = x.detach().reshape(-1);
  for (int s = 0; s < 25; ++s) {
    const long idx = (s * 7919L) % flat.numel();
    auto xp = flat.clone(), xm = flat.clone();
    xp[idx] += h;
    xm[idx] -= h;
    const double fp = (sq->forward(xp.reshape(x.sizes())) * w).sum().item<double>();
    const double fm = (sq->forward(xm.reshape(x.sizes())) * w).sum().item<double>();
    const double fd = (fp - fm) / (2 * h);
    const double an = grad.reshape(-1)[idx].item<double>();
    EXPECT_LT(std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-8}), 1e-3) << "index " << idx;
  }
}

TEST(HaAssembly, SupportAndQuery) {
  const auto f = torch::randn({2, 6, 4, 4}), corr = torch::randn({2, 3, 4, 4});
  const auto zero_init = gaussian_init(6, 4, 0.0, 1);
  const auto s = assemble_support(f, corr, zero_init);
  EXPECT_EQ(s.size(1), 9);
  EXPECT_TRUE(torch::equal(s, torch::cat({f, corr}, 1)));
  EXPECT_TRUE(torch::equal(assemble_query(f, corr), torch::cat({f, corr}, 1)));
  EXPECT_EQ(assemble_query(torch::zeros({1, 2, 3, 3}), torch::zeros({1, 5, 3, 3})).abs().sum().item<double>(), 0.0);
  const auto init = gaussian_init(6, 4, 0.02, 9);
  EXPECT_TRUE(torch::equal(init, gaussian_init(6, 4, 0.02, 9)));
  EXPECT_FALSE(torch::equal(init, gaussian_init(6, 4, 0.02, 10)));
  EXPECT_NEAR(init.std().item<double>(), 0.02, 0.008);
  EXPECT_TRUE(torch::equal(assemble_support(f, corr, init), torch::cat({f + init, corr}, 1)));
  EXPECT_THROW(assemble_query(f, torch::randn({1, 3, 4, 4})), ShapeError);
  EXPECT_THROW(assemble_support(f, corr, gaussian_init(5, 4, 0.02, 0)), ShapeError);
}

TEST(HaModule, ShapesAsymmetryAndLayerSwap) {
  torch::manual_seed(0);
  const auto bb = backbone::toy_backbone(0, 1);
  HaOptions o;
  o.grid = 8;
  o.channels = 16;
  o.squeeze_width = 4;
  const auto img = torch::rand({2, 3, 64, 64});
  const auto taps = bb->extract(img, {0, 3, 4, 9, 10, 12});
  const auto masks = torch::ones({2, 64, 64});
  HeterogeneousAggregation ha(*bb, backbone::LayerSelection::standard(), o);
  const auto out = ha->forward(taps, taps, masks, 1);
  EXPECT_EQ(out.support.sizes(), (std::vector<int64_t>{2, 20, 8, 8}));
  EXPECT_EQ(out.query.sizes(), (std::vector<int64_t>{2, 20, 8, 8}));
  EXPECT_EQ(out.support_volume.sizes(), (std::vector<int64_t>{2, 3, 8, 8, 8, 8}));
  EXPECT_TRUE(torch::isfinite(out.support).all().item<bool>());
  EXPECT_GT((out.support - out.query).norm().item<double>(), 0.0);

  torch::manual_seed(0);
  HeterogeneousAggregation swapped(*bb, backbone::LayerSelection::standard().swapped(), o);
  const auto out2 = swapped->forward(taps, taps, masks, 1);
  EXPECT_GT((out2.support - out.support).norm().item<double>(), 0.0);

  EXPECT_THROW(ha->forward(taps, taps, torch::ones({2, 64, 64}), 2), ShapeError);
}

TEST(HaModule, FiveShotQueryVolumeAveragesShots) {
  const auto bb = backbone::toy_backbone(0, 1);
  HaOptions o;
  o.channels = 8;
  o.squeeze_width = 2;
  o.mask_support = false;
  HeterogeneousAggregation ha(*bb, backbone::LayerSelection::standard(), o);
  const auto s_img = torch::rand({5, 3, 64, 64}), q_img = torch::rand({1, 3, 64, 64});
  const auto st = bb->extract(s_img, {3, 9, 12, 0, 4, 10}), qt = bb->extract(q_img, {3, 9, 12, 0, 4, 10});
  const auto out = ha->forward(st, qt, torch::ones({5, 64, 64}), 5);
  EXPECT_EQ(out.support.size(0), 5);
  EXPECT_EQ(out.query.size(0), 1);
  const auto manual = out.support_volume.permute({0, 1, 4, 5, 2, 3}).mean(0, true);
  EXPECT_LT(max_abs_diff(out.query_volume, manual), 1e-6);
}
