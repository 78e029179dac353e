#pragma once

#include <torch/torch.h>

#include "tlg/sinkhorn.hpp"

namespace tlg::ht {

struct AttentionResult {
  torch::Tensor output;   // (B, N, Dv)
  torch::Tensor weights;  // (B, N, N) softmax rows
};

// softmax((X'' Wq)(X' Wk)^T / sqrt(dk)) (X' Wv) with X'', X' as (B, N, D) token matrices and
// projection matrices of shape (D, dk) / (D, dv).
AttentionResult cross_attention(const torch::Tensor& attention_input, const torch::Tensor& context,
                                const torch::Tensor& w_query, const torch::Tensor& w_key,
                                const torch::Tensor& w_value);

// (B, C, H, W) or (C, H, W) -> (B, HW, HW) cost 1 - max(cos, 0) between spatial positions.
// Zero vectors are maximally costly (cost 1), including against themselves.
torch::Tensor foreground_cost(const torch::Tensor& feature);

// Scales each position's channel vector by the fraction of its transported mass that travels on
// edges with cost below `threshold`. feature (B, N, D), coupling/cost (B, N, N).
torch::Tensor ot_denoise(const torch::Tensor& feature, const torch::Tensor& coupling, const torch::Tensor& cost,
                         double threshold);

// Channels 0, 3, 6, ... (ceil(C / 3) of them).
torch::Tensor select_third(const torch::Tensor& x);

// window x window, stride 1, same padding. The average ignores padded cells.
torch::Tensor avg_pool_same(const torch::Tensor& x, int window);
torch::Tensor max_pool_same(const torch::Tensor& x, int window);

enum class PoolKind { average, max };

// OT' = OT + resize(proj(pool(select_third(tap)))); the projection has no bias so a zero tap adds nothing.
class HeterogeneousResidualImpl : public torch::nn::Module {
 public:
  HeterogeneousResidualImpl(int tap_channels, int out_channels, PoolKind pool, int window);
  torch::Tensor forward(const torch::Tensor& transported, const torch::Tensor& tap_feature);
  torch::Tensor pooled(const torch::Tensor& tap_feature) const;

 private:
  PoolKind pool_;
  int window_;
  torch::nn::Conv2d proj_{nullptr};
};
TORCH_MODULE(HeterogeneousResidual);

struct HtOptions {
  double lambda = 10.0;
  double tol = 1e-6;
  int max_iters = 200;
  int unrolled_iters = 20;
  double cost_threshold = 0.5;
  int pool_window = 3;
};

struct HtOutput {
  torch::Tensor output;     // OT' (B, D, G, G)
  torch::Tensor attention;  // (B, N, N)
  torch::Tensor coupling;   // (B, N, N)
  torch::Tensor cost;       // (B, N, N)
  int sinkhorn_iterations = 0;
};

// One branch of heterogeneous transport: attention, Sinkhorn denoising, pooled residual.
// In training mode Sinkhorn runs a fixed number of differentiable iterations; in eval mode it
// iterates to tolerance.
class HeterogeneousTransportImpl : public torch::nn::Module {
 public:
  HeterogeneousTransportImpl(int channels, int residual_tap_channels, PoolKind pool, const HtOptions& opts);

  HtOutput forward(const torch::Tensor& aggregated, const torch::Tensor& residual_tap);

 private:
  HtOptions opts_;
  torch::Tensor w_query_, w_key_, w_value_;
  HeterogeneousResidual residual_{nullptr};
};
TORCH_MODULE(HeterogeneousTransport);

}  // namespace tlg::ht
