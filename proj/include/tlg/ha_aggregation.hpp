#pragma once

#include <map>
#include <vector>

#include <torch/torch.h>

#include "tlg/backbone.hpp"

namespace tlg::ha {

using backbone::Level;

// Channel reduction exponent: 4 / 2 / 1 for low / middle / high.
int level_alpha(Level level);
// in_channels / 2^alpha; ConfigError when not divisible.
int reduced_channels(int in_channels, Level level);

// Bilinear (align_corners = false) resize of (N, C, H, W) to grid x grid; identity when already there.
torch::Tensor resize_to_grid(const torch::Tensor& x, int grid);

struct AlignedFeature {
  Level level = Level::low;
  torch::Tensor value;  // (N, in_channels / 2^alpha, grid, grid)
};

// 1x1 channel reduction by 2^alpha followed by resizing onto the canonical grid, then a second
// 1x1 projection to the common width so that the levels can be summed.
class LevelProjectionImpl : public torch::nn::Module {
 public:
  LevelProjectionImpl(int in_channels, Level level, int common_channels);

  AlignedFeature project_and_align(const torch::Tensor& tap_feature, int grid);
  torch::Tensor equalize(const AlignedFeature& aligned);
  torch::Tensor forward(const torch::Tensor& tap_feature, int grid) { return equalize(project_and_align(tap_feature, grid)); }

  Level level() const { return level_; }
  int reduced() const { return reduced_; }

 private:
  Level level_;
  int reduced_;
  torch::nn::Conv2d reduce_{nullptr};
  torch::nn::Conv2d equalize_{nullptr};
};
TORCH_MODULE(LevelProjection);

// Elementwise sum; ShapeError on mismatched shapes.
torch::Tensor sum_levels(const std::vector<torch::Tensor>& aligned);

// relu(cosine) between every position of `a` and every position of `b`:
// (N, C, Ha, Wa) x (N, C, Hb, Wb) -> (N, Ha, Wa, Hb, Wb). Zero-norm vectors give 0.
torch::Tensor raw_correlation(const torch::Tensor& a, const torch::Tensor& b);

// Separable 4D convolution: a 3x3 conv over the (Ha, Wa) pivot plus one over (Hb, Wb).
class CenterPivotConv4dImpl : public torch::nn::Module {
 public:
  CenterPivotConv4dImpl(int in_channels, int out_channels);
  // (N, Cin, Ha, Wa, Hb, Wb) -> (N, Cout, Ha, Wa, Hb, Wb)
  torch::Tensor forward(const torch::Tensor& x);

 private:
  torch::nn::Conv2d conv_a_{nullptr};
  torch::nn::Conv2d conv_b_{nullptr};
};
TORCH_MODULE(CenterPivotConv4d);

// Two center-pivot stages then a mean over the (Hb, Wb) dimensions.
class CorrelationSqueezeImpl : public torch::nn::Module {
 public:
  CorrelationSqueezeImpl(int in_levels, int width);
  // (N, L, Ha, Wa, Hb, Wb) -> (N, width, Ha, Wa)
  torch::Tensor forward(const torch::Tensor& volume);

 private:
  CenterPivotConv4d stage1_{nullptr};
  CenterPivotConv4d stage2_{nullptr};
};
TORCH_MODULE(CorrelationSqueeze);

// N(0, sigma^2) tensor of shape (1, channels, grid, grid) drawn from `seed`.
torch::Tensor gaussian_init(int channels, int grid, double sigma, std::uint64_t seed);

// concat(f_s + init, corr_s) along channels.
torch::Tensor assemble_support(const torch::Tensor& summed, const torch::Tensor& corr, const torch::Tensor& init);
// concat(f_q, corr_q) along channels.
torch::Tensor assemble_query(const torch::Tensor& summed, const torch::Tensor& corr);

struct HaOptions {
  int grid = 8;
  int channels = 64;
  int squeeze_width = 16;
  double init_sigma = 0.02;
  std::uint64_t init_seed = 0;
  bool cross = true;
  bool mask_support = true;
};

struct HaOutput {
  torch::Tensor support;  // A_s: (B*K, channels + squeeze_width, grid, grid)
  torch::Tensor query;    // A_q: (B, channels + squeeze_width, grid, grid)
  std::vector<torch::Tensor> support_levels;  // per-level aligned+equalized features
  std::vector<torch::Tensor> query_levels;
  torch::Tensor support_volume;  // raw correlation volumes fed to the squeeze stacks
  torch::Tensor query_volume;
};

// Heterogeneous aggregation over both branches with branch-specific projections.
class HeterogeneousAggregationImpl : public torch::nn::Module {
 public:
  HeterogeneousAggregationImpl(const backbone::FeatureExtractor& extractor, const backbone::LayerSelection& layers,
                               const HaOptions& opts);

  // support_masks: (B*K, H, W) pseudo-masks (used when masking the cross correlation).
  HaOutput forward(const backbone::FeatureTapSet& support_taps, const backbone::FeatureTapSet& query_taps,
                   const torch::Tensor& support_masks, int shots);

  int output_channels() const { return opts_.channels + opts_.squeeze_width; }
  const torch::Tensor& init() const { return init_; }

 private:
  std::vector<torch::Tensor> branch_levels(const backbone::FeatureTapSet& taps, const std::vector<int>& layers,
                                           std::map<int, LevelProjection>& projections);

  backbone::LayerSelection layers_;
  HaOptions opts_;
  std::map<int, LevelProjection> support_proj_;
  std::map<int, LevelProjection> query_proj_;
  CorrelationSqueeze squeeze_support_{nullptr};
  CorrelationSqueeze squeeze_query_{nullptr};
  torch::Tensor init_;
};
TORCH_MODULE(HeterogeneousAggregation);

}  // namespace tlg::ha
