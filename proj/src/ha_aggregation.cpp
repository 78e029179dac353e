#include "tlg/ha_aggregation.hpp"

#include "tlg/errors.hpp"

namespace tlg::ha {

namespace F = torch::nn::functional;

int level_alpha(Level level) {
  switch (level) {
    case Level::low: return 4;
    case Level::middle: return 2;
    case Level::high: return 1;
  }
  return 0;
}

int reduced_channels(int in_channels, Level level) {
  const int factor = 1 << level_alpha(level);
  if (in_channels % factor != 0)
    throw ConfigError(std::to_string(in_channels) + " channels at the " + backbone::level_name(level) +
                      " level are not divisible by 2^" + std::to_string(level_alpha(level)));
  return in_channels / factor;
}

torch::Tensor resize_to_grid(const torch::Tensor& x, int grid) {
  check_shape(x.dim() == 4, "resize_to_grid: expected (N, C, H, W)");
  if (x.size(2) == grid && x.size(3) == grid) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{grid, grid})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

// ---------------- projection ----------------

LevelProjectionImpl::LevelProjectionImpl(int in_channels, Level level, int common_channels)
    : level_(level), reduced_(reduced_channels(in_channels, level)) {
  reduce_ = register_module("reduce", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, reduced_, 1)));
  equalize_ = register_module("equalize", torch::nn::Conv2d(torch::nn::Conv2dOptions(reduced_, common_channels, 1)));
}

AlignedFeature LevelProjectionImpl::project_and_align(const torch::Tensor& tap_feature, int grid) {
  check_shape(tap_feature.dim() == 4 && tap_feature.size(1) == reduce_->options.in_channels(),
              "project_and_align: channel count does not match the projection");
  return {level_, resize_to_grid(reduce_->forward(tap_feature), grid)};
}

torch::Tensor LevelProjectionImpl::equalize(const AlignedFeature& aligned) { return equalize_->forward(aligned.value); }

torch::Tensor sum_levels(const std::vector<torch::Tensor>& aligned) {
  check_shape(!aligned.empty(), "sum_levels: no inputs");
  torch::Tensor out = aligned.front();
  for (std::size_t i = 1; i < aligned.size(); ++i) {
    check_shape(aligned[i].sizes() == out.sizes(), "sum_levels: shape mismatch between levels");
    out = out + aligned[i];
  }
  return out;
}

// ---------------- correlation ----------------

torch::Tensor raw_correlation(const torch::Tensor& a, const torch::Tensor& b) {
  check_shape(a.dim() == 4 && b.dim() == 4 && a.size(0) == b.size(0) && a.size(1) == b.size(1),
              "raw_correlation: expected (N, C, H, W) pairs with matching N and C");
  const auto n = a.size(0), c = a.size(1);
  const auto fa = a.reshape({n, c, -1});
  const auto fb = b.reshape({n, c, -1});
  // zero vectors: the clamped norm keeps the quotient finite and the dot product is 0
  const double eps = 1e-12;
  const auto na = fa.norm(2, 1, true).clamp_min(eps);
  const auto nb = fb.norm(2, 1, true).clamp_min(eps);
  const auto cos = torch::bmm((fa / na).transpose(1, 2), fb / nb);
  return torch::relu(cos).reshape({n, a.size(2), a.size(3), b.size(2), b.size(3)});
}

CenterPivotConv4dImpl::CenterPivotConv4dImpl(int in_channels, int out_channels) {
  conv_a_ = register_module("conv_a", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  conv_b_ = register_module(
      "conv_b", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, out_channels, 3).padding(1).bias(false)));
}

torch::Tensor CenterPivotConv4dImpl::forward(const torch::Tensor& x) {
  check_shape(x.dim() == 6, "CenterPivotConv4d: expected (N, C, Ha, Wa, Hb, Wb)");
  const auto n = x.size(0), c = x.size(1), ha = x.size(2), wa = x.size(3), hb = x.size(4), wb = x.size(5);
  const auto cout = conv_a_->options.out_channels();
  auto xa = x.permute({0, 4, 5, 1, 2, 3}).reshape({n * hb * wb, c, ha, wa});
  auto ya = conv_a_->forward(xa).reshape({n, hb, wb, cout, ha, wa}).permute({0, 3, 4, 5, 1, 2});
  auto xb = x.permute({0, 2, 3, 1, 4, 5}).reshape({n * ha * wa, c, hb, wb});
  auto yb = conv_b_->forward(xb).reshape({n, ha, wa, cout, hb, wb}).permute({0, 3, 1, 2, 4, 5});
  return ya + yb;
}

CorrelationSqueezeImpl::CorrelationSqueezeImpl(int in_levels, int width) {
  stage1_ = register_module("stage1", CenterPivotConv4d(in_levels, width));
  stage2_ = register_module("stage2", CenterPivotConv4d(width, width));
}

torch::Tensor CorrelationSqueezeImpl::forward(const torch::Tensor& volume) {
  auto y = torch::relu(stage1_->forward(volume));
  y = torch::relu(stage2_->forward(y));
  return y.mean({4, 5});
}

// ---------------- assembly ----------------

torch::Tensor gaussian_init(int channels, int grid, double sigma, std::uint64_t seed) {
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randn({1, channels, grid, grid}, gen, torch::TensorOptions().dtype(torch::kFloat32)) * sigma;
}

torch::Tensor assemble_support(const torch::Tensor& summed, const torch::Tensor& corr, const torch::Tensor& init) {
  check_shape(summed.dim() == 4 && corr.dim() == 4 && summed.size(0) == corr.size(0) &&
                  summed.sizes().slice(2) == corr.sizes().slice(2),
              "assemble_support: summed and correlation features disagree in batch or grid");
  check_shape(init.size(1) == summed.size(1) && init.sizes().slice(2) == summed.sizes().slice(2),
              "assemble_support: init shape does not match the summed feature");
  return torch::cat({summed + init, corr}, 1);
}

torch::Tensor assemble_query(const torch::Tensor& summed, const torch::Tensor& corr) {
  check_shape(summed.dim() == 4 && corr.dim() == 4 && summed.size(0) == corr.size(0) &&
                  summed.sizes().slice(2) == corr.sizes().slice(2),
              "assemble_query: summed and correlation features disagree in batch or grid");
  return torch::cat({summed, corr}, 1);
}

// ---------------- module ----------------

HeterogeneousAggregationImpl::HeterogeneousAggregationImpl(const backbone::FeatureExtractor& extractor,
                                                           const backbone::LayerSelection& layers,
                                                           const HaOptions& opts)
    : layers_(layers), opts_(opts) {
  layers_.validate();
  for (int t : layers_.support) {
    const auto& s = extractor.spec(t);
    support_proj_.emplace(t, register_module("support_tap" + std::to_string(t),
                                             LevelProjection(s.channels, s.level, opts.channels)));
  }
  for (int t : layers_.query) {
    const auto& s = extractor.spec(t);
    query_proj_.emplace(t, register_module("query_tap" + std::to_string(t),
                                           LevelProjection(s.channels, s.level, opts.channels)));
  }
  squeeze_support_ = register_module("squeeze_support", CorrelationSqueeze(3, opts.squeeze_width));
  squeeze_query_ = register_module("squeeze_query", CorrelationSqueeze(3, opts.squeeze_width));
  init_ = register_parameter("init", gaussian_init(opts.channels, opts.grid, opts.init_sigma, opts.init_seed));
}

std::vector<torch::Tensor> HeterogeneousAggregationImpl::branch_levels(const backbone::FeatureTapSet& taps,
                                                                       const std::vector<int>& layers,
                                                                       std::map<int, LevelProjection>& projections) {
  std::vector<torch::Tensor> levels(3);
  for (int t : layers) {
    auto f = projections.at(t)->forward(taps.at(t), opts_.grid);
    auto& slot = levels[static_cast<std::size_t>(backbone::level_of(t))];
    slot = slot.defined() ? slot + f : f;
  }
  return levels;
}

HaOutput HeterogeneousAggregationImpl::forward(const backbone::FeatureTapSet& support_taps,
                                               const backbone::FeatureTapSet& query_taps,
                                               const torch::Tensor& support_masks, int shots) {
  HaOutput out;
  out.support_levels = branch_levels(support_taps, layers_.support, support_proj_);
  out.query_levels = branch_levels(query_taps, layers_.query, query_proj_);
  const auto fs = sum_levels(out.support_levels);
  const auto fq = sum_levels(out.query_levels);
  const auto bk = fs.size(0);
  const auto b = fq.size(0);
  check_shape(bk == b * shots, "HA: support batch must be query batch x shots");
  const int g = opts_.grid;

  std::vector<torch::Tensor> vs, vq;
  for (std::size_t l = 0; l < 3; ++l) {
    if (opts_.cross) {
      vs.push_back(raw_correlation(out.support_levels[l], out.query_levels[l].repeat_interleave(shots, 0)));
    } else {
      vs.push_back(raw_correlation(out.support_levels[l], out.support_levels[l]));
      vq.push_back(raw_correlation(out.query_levels[l], out.query_levels[l]));
    }
  }
  out.support_volume = torch::stack(vs, 1);  // (B*K, 3, Gs, Gs, Gq, Gq)
  if (opts_.cross) {
    auto q = out.support_volume.permute({0, 1, 4, 5, 2, 3});  // query-major
    if (opts_.mask_support && support_masks.defined()) {
      auto m = resize_to_grid(support_masks.unsqueeze(1).to(q.dtype()), g);  // (B*K, 1, G, G)
      q = q * m.reshape({bk, 1, 1, 1, g, g});
    }
    out.query_volume = q.reshape({b, shots, 3, g, g, g, g}).mean(1);
  } else {
    out.query_volume = torch::stack(vq, 1);
  }
  const auto corr_s = squeeze_support_->forward(out.support_volume);
  const auto corr_q = squeeze_query_->forward(out.query_volume);
  out.support = assemble_support(fs, corr_s, init_);
  out.query = assemble_query(fq, corr_q);
  return out;
}

}  // namespace tlg::ha
