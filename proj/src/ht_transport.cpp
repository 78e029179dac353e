#include "tlg/ht_transport.hpp"

#include <cmath>

#include "tlg/errors.hpp"
#include "tlg/ha_aggregation.hpp"

namespace tlg::ht {

namespace F = torch::nn::functional;

AttentionResult cross_attention(const torch::Tensor& attention_input, const torch::Tensor& context,
                                const torch::Tensor& w_query, const torch::Tensor& w_key,
                                const torch::Tensor& w_value) {
  check_shape(attention_input.dim() == 3 && context.dim() == 3 && attention_input.sizes() == context.sizes(),
              "cross_attention: expected matching (B, N, D) token matrices");
  check_shape(w_query.dim() == 2 && w_key.dim() == 2 && w_value.dim() == 2 &&
                  w_query.size(0) == context.size(2) && w_key.size(0) == context.size(2) &&
                  w_value.size(0) == context.size(2) && w_query.size(1) == w_key.size(1),
              "cross_attention: projection shapes do not match the token width");
  const auto dk = static_cast<double>(w_key.size(1));
  check_shape(dk > 0, "cross_attention: d_k must be positive");
  const auto q = torch::matmul(attention_input, w_query);
  const auto k = torch::matmul(context, w_key);
  const auto v = torch::matmul(context, w_value);
  auto weights = torch::softmax(torch::bmm(q, k.transpose(1, 2)) / std::sqrt(dk), -1);
  return {torch::bmm(weights, v), weights};
}

torch::Tensor foreground_cost(const torch::Tensor& feature) {
  const auto f = feature.dim() == 3 ? feature.unsqueeze(0) : feature;
  check_shape(f.dim() == 4, "foreground_cost: expected (B, C, H, W)");
  if (!torch::isfinite(f).all().item<bool>()) throw DataError("foreground_cost: non-finite feature");
  const auto flat = f.reshape({f.size(0), f.size(1), -1});
  const auto norm = flat.norm(2, 1, true);
  const auto unit = flat / norm.clamp_min(1e-12);
  const auto sim = torch::clamp_min(torch::bmm(unit.transpose(1, 2), unit), 0.0);
  return torch::clamp(1.0 - sim, 0.0, 1.0);
}

torch::Tensor ot_denoise(const torch::Tensor& feature, const torch::Tensor& coupling, const torch::Tensor& cost,
                         double threshold) {
  check_shape(feature.dim() == 3 && coupling.dim() == 3 && coupling.sizes() == cost.sizes() &&
                  coupling.size(0) == feature.size(0) && coupling.size(1) == feature.size(1),
              "ot_denoise: plan spatial dimension must match the feature");
  const auto keep = (cost.detach() < threshold).to(coupling.dtype());
  const auto total = coupling.sum(2);
  const auto kept = (coupling * keep).sum(2);
  const auto weight = kept / total.clamp_min(1e-30);
  return feature * weight.unsqueeze(2);
}

torch::Tensor select_third(const torch::Tensor& x) {
  check_shape(x.dim() == 4 && x.size(1) >= 1, "select_third: expected (N, C, H, W) with C >= 1");
  const auto idx = torch::arange(0, x.size(1), 3, torch::TensorOptions().dtype(torch::kLong));
  return x.index_select(1, idx);
}

torch::Tensor avg_pool_same(const torch::Tensor& x, int window) {
  return F::avg_pool2d(x, F::AvgPool2dFuncOptions(window).stride(1).padding(window / 2).count_include_pad(false));
}

torch::Tensor max_pool_same(const torch::Tensor& x, int window) {
  return F::max_pool2d(x, F::MaxPool2dFuncOptions(window).stride(1).padding(window / 2));
}

HeterogeneousResidualImpl::HeterogeneousResidualImpl(int tap_channels, int out_channels, PoolKind pool, int window)
    : pool_(pool), window_(window) {
  const int kept = (tap_channels + 2) / 3;
  proj_ = register_module("proj", torch::nn::Conv2d(torch::nn::Conv2dOptions(kept, out_channels, 1).bias(false)));
}

torch::Tensor HeterogeneousResidualImpl::pooled(const torch::Tensor& tap_feature) const {
  const auto sel = select_third(tap_feature);
  return pool_ == PoolKind::average ? avg_pool_same(sel, window_) : max_pool_same(sel, window_);
}

torch::Tensor HeterogeneousResidualImpl::forward(const torch::Tensor& transported, const torch::Tensor& tap_feature) {
  check_shape(transported.dim() == 4 && tap_feature.dim() == 4 && transported.size(0) == tap_feature.size(0),
              "heterogeneous residual: batch mismatch");
  const auto r = ha::resize_to_grid(proj_->forward(pooled(tap_feature)), static_cast<int>(transported.size(2)));
  return transported + r;
}

HeterogeneousTransportImpl::HeterogeneousTransportImpl(int channels, int residual_tap_channels, PoolKind pool,
                                                       const HtOptions& opts)
    : opts_(opts) {
  // scaled identity plus small noise: distinct per-position queries from the first step, and a
  // value path that starts close to the input
  auto init = [&] { return 2.0 * torch::eye(channels) + 0.02 * torch::randn({channels, channels}); };
  w_query_ = register_parameter("w_query", init());
  w_key_ = register_parameter("w_key", init());
  w_value_ = register_parameter("w_value", init());
  residual_ = register_module("residual", HeterogeneousResidual(residual_tap_channels, channels, pool, opts.pool_window));
}

HtOutput HeterogeneousTransportImpl::forward(const torch::Tensor& aggregated, const torch::Tensor& residual_tap) {
  check_shape(aggregated.dim() == 4, "HT: expected (B, D, G, G)");
  const auto b = aggregated.size(0), d = aggregated.size(1), gh = aggregated.size(2), gw = aggregated.size(3);
  HtOutput out;
  const auto tokens = aggregated.reshape({b, d, gh * gw}).transpose(1, 2);  // (B, N, D)
  auto att = cross_attention(tokens, tokens, w_query_, w_key_, w_value_);
  out.attention = att.weights;
  out.cost = foreground_cost(aggregated);
  if (is_training()) {
    out.coupling = sinkhorn_unrolled(out.cost, opts_.lambda, opts_.unrolled_iters);
    out.sinkhorn_iterations = opts_.unrolled_iters;
  } else {
    out.coupling = sinkhorn_converged(out.cost, opts_.lambda, opts_.max_iters, opts_.tol, &out.sinkhorn_iterations);
  }
  const auto denoised = ot_denoise(att.output, out.coupling, out.cost, opts_.cost_threshold);
  const auto grid_feature = denoised.transpose(1, 2).reshape({b, d, gh, gw});
  out.output = residual_->forward(grid_feature, residual_tap);
  return out;
}

}  // namespace tlg::ht
