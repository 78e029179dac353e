#pragma once

#include <vector>

#include <torch/torch.h>

namespace tlg::head {

struct MaskPrediction {
  torch::Tensor logits;         // (B, 2, H, W): background, foreground
  torch::Tensor probabilities;  // softmax over dim 1
  torch::Tensor hard_mask;      // (B, H, W) int64 argmax in {0, 1}

  torch::Tensor foreground() const { return probabilities.select(1, 1); }
};

MaskPrediction make_prediction(const torch::Tensor& logits);

// conv3x3 -> relu -> upsample to size/4 -> conv3x3 -> upsample to size.
class MaskHeadImpl : public torch::nn::Module {
 public:
  MaskHeadImpl(int in_channels, int hidden);
  torch::Tensor logits(const torch::Tensor& feature, int image_size);
  MaskPrediction forward(const torch::Tensor& feature, int image_size) {
    return make_prediction(logits(feature, image_size));
  }

 private:
  torch::nn::Conv2d conv1_{nullptr};
  torch::nn::Conv2d conv2_{nullptr};
};
TORCH_MODULE(MaskHead);

inline constexpr double kBceEpsilon = 1e-7;

// Mean pixelwise binary cross-entropy of foreground probabilities against (soft) targets,
// probabilities clamped to [eps, 1 - eps]. Shapes must match exactly.
torch::Tensor bce(const torch::Tensor& foreground_probability, const torch::Tensor& target,
                  double eps = kBceEpsilon);

struct LossWeights {
  double alpha = 1.4;  // support
  double beta = 0.6;   // query
  void validate() const;
};

// alpha * mean_k bce(support_k) + beta * bce(query). Targets are binarized at 0.5 when requested.
// support_probs: K x (B, H, W) or a single (B*K, H, W) tensor split by the caller.
torch::Tensor episode_loss(const std::vector<torch::Tensor>& support_probs,
                           const std::vector<torch::Tensor>& support_masks, const torch::Tensor& query_prob,
                           const torch::Tensor& query_mask, const LossWeights& weights,
                           bool binarize_targets = false);

}  // namespace tlg::head
