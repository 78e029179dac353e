#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tlg/backbone.hpp"
#include "tlg/config.hpp"
#include "tlg/episodic_data.hpp"
#include "tlg/ha_aggregation.hpp"
#include "tlg/hc_prompts.hpp"
#include "tlg/head_and_loss.hpp"
#include "tlg/ht_transport.hpp"

namespace tlg {

// Episodes stacked along the batch axis. Support tensors are ordered (episode, shot).
struct EpisodeBatch {
  torch::Tensor support_images;  // (B*K, 3, H, W)
  torch::Tensor support_masks;   // (B*K, H, W) pseudo-masks
  torch::Tensor support_gt;      // (B*K, H, W)
  torch::Tensor query_images;    // (B, 3, H, W)
  torch::Tensor query_masks;     // (B, H, W) pseudo-masks
  torch::Tensor query_gt;        // (B, H, W)
  std::vector<int> categories;
  std::vector<data::EpisodeId> ids;
  int shots = 1;

  std::int64_t size() const { return query_images.size(0); }
};

EpisodeBatch make_batch(const std::vector<data::Episode>& episodes);

struct ModelOutput {
  head::MaskPrediction support;  // (B*K, ...)
  head::MaskPrediction query;    // (B, ...)
  backbone::FeatureTapSet support_taps;
  backbone::FeatureTapSet query_taps;
  std::optional<ha::HaOutput> ha;
  std::optional<ht::HtOutput> ht_support;
  std::optional<ht::HtOutput> ht_query;
  torch::Tensor support_feature;  // what the head sees
  torch::Tensor query_feature;
};

// Full pipeline: frozen backbone taps -> HA -> HT (per branch) -> HC adapters -> shared head.
// Disabled modules are skipped; with HA off the resized raw taps are concatenated instead.
class TlgModelImpl : public torch::nn::Module {
 public:
  TlgModelImpl(const Config& cfg, std::shared_ptr<backbone::FeatureExtractor> extractor,
               const std::vector<std::string>& category_names,
               std::shared_ptr<hc::TextEncoder> text_encoder = nullptr);

  ModelOutput forward(const EpisodeBatch& batch);

  // Moves every parameter, buffer and the backbone to `dtype`.
  void to_dtype(torch::Dtype dtype);
  torch::Dtype dtype() const { return dtype_; }

  // Stops gradient flow into a top-level submodule ("ha", "ht_support", "ht_query",
  // "adapter_support", "adapter_query", "head"). ConfigError for unknown names.
  void freeze(const std::string& submodule);
  std::vector<std::string> submodule_names() const;

  const Config& config() const { return cfg_; }
  const backbone::LayerSelection& layers() const { return layers_; }
  const backbone::FeatureExtractor& extractor() const { return *extractor_; }
  const hc::PromptBank* prompt_bank() const { return bank_ ? &*bank_ : nullptr; }
  int feature_channels() const { return feature_channels_; }

 private:
  torch::Tensor raw_branch(const backbone::FeatureTapSet& taps, const std::vector<int>& layers) const;

  Config cfg_;
  backbone::LayerSelection layers_;
  std::shared_ptr<backbone::FeatureExtractor> extractor_;
  std::shared_ptr<hc::TextEncoder> encoder_;
  std::optional<hc::PromptBank> bank_;
  int grid_ = 0;
  int feature_channels_ = 0;
  torch::Dtype dtype_ = torch::kFloat32;

  ha::HeterogeneousAggregation ha_{nullptr};
  ht::HeterogeneousTransport ht_support_{nullptr};
  ht::HeterogeneousTransport ht_query_{nullptr};
  hc::Adapter adapter_support_{nullptr};
  hc::Adapter adapter_query_{nullptr};
  head::MaskHead head_{nullptr};
  torch::Tensor gain_text_;        // (C, d_text) fine-grained prompts
  torch::Tensor query_text_;       // (C, 2 d_text) [foreground; mean background]
};
TORCH_MODULE(TlgModel);

// Parameters with requires_grad; the backbone and text encoder are never counted.
std::int64_t count_learnable_parameters(const torch::nn::Module& model);

// Builds the configured backbone plus model; category names come from the dataset.
TlgModel build_model(const Config& cfg, const std::vector<std::string>& category_names,
                     std::shared_ptr<backbone::FeatureExtractor> extractor = nullptr);

}  // namespace tlg
