#include "tlg/head_and_loss.hpp"

#include "tlg/errors.hpp"

namespace tlg::head {

namespace F = torch::nn::functional;

namespace {

torch::Tensor upsample(const torch::Tensor& x, std::int64_t size) {
  if (x.size(2) == size && x.size(3) == size) return x;
  return F::interpolate(x, F::InterpolateFuncOptions()
                               .size(std::vector<int64_t>{size, size})
                               .mode(torch::kBilinear)
                               .align_corners(false));
}

}  // namespace

MaskPrediction make_prediction(const torch::Tensor& logits) {
  check_shape(logits.dim() == 4 && logits.size(1) == 2, "mask logits must be (B, 2, H, W)");
  return {logits, torch::softmax(logits, 1), logits.argmax(1)};
}

MaskHeadImpl::MaskHeadImpl(int in_channels, int hidden) {
  conv1_ = register_module("conv1", torch::nn::Conv2d(torch::nn::Conv2dOptions(in_channels, hidden, 3).padding(1)));
  conv2_ = register_module("conv2", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, 2, 3).padding(1)));
}

torch::Tensor MaskHeadImpl::logits(const torch::Tensor& feature, int image_size) {
  check_shape(feature.dim() == 4 && feature.size(1) == conv1_->options.in_channels(),
              "mask head: feature channels do not match");
  check_shape(image_size >= 4, "mask head: image size must be at least 4");
  auto x = upsample(torch::relu(conv1_->forward(feature)), image_size / 4);
  return upsample(conv2_->forward(x), image_size);
}

torch::Tensor bce(const torch::Tensor& p, const torch::Tensor& y, double eps) {
  check_shape(p.sizes() == y.sizes(), "bce: prediction and target shapes differ");
  const auto pc = p.clamp(eps, 1.0 - eps);
  const auto t = y.to(p.dtype());
  return -(t * torch::log(pc) + (1.0 - t) * torch::log(1.0 - pc)).mean();
}

void LossWeights::validate() const {
  if (!(alpha >= 0.0) || !(beta >= 0.0)) throw ConfigError("loss weights alpha and beta must be >= 0");
}

torch::Tensor episode_loss(const std::vector<torch::Tensor>& support_probs,
                           const std::vector<torch::Tensor>& support_masks, const torch::Tensor& query_prob,
                           const torch::Tensor& query_mask, const LossWeights& weights, bool binarize_targets) {
  weights.validate();
  check_shape(!support_probs.empty() && support_probs.size() == support_masks.size(),
              "episode_loss: need one support mask per support prediction");
  auto target = [&](const torch::Tensor& m) { return binarize_targets ? (m >= 0.5).to(m.dtype()) : m; };
  torch::Tensor support = bce(support_probs[0], target(support_masks[0]));
  for (std::size_t k = 1; k < support_probs.size(); ++k) support = support + bce(support_probs[k], target(support_masks[k]));
  support = support / static_cast<double>(support_probs.size());
  return weights.alpha * support + weights.beta * bce(query_prob, target(query_mask));
}

}  // namespace tlg::head
