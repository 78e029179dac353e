#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tlg/config.hpp"

namespace tlg::backbone {

inline constexpr int kNumTaps = 13;

enum class Level { low, middle, high };

// low = {0..3}, middle = {4..9}, high = {10..12}. Throws ConfigError outside 0..12.
Level level_of(int tap);
std::string level_name(Level level);

struct TapSpec {
  int tap_index = 0;
  Level level = Level::low;
  int channels = 0;
  int stride = 1;

  int spatial(int image_size) const { return image_size / stride; }
};

// Tap indices feeding each branch. Triples hold exactly one tap per level; the "all taps"
// form (Table-4 style 0-12 rows) lists every tap of every level.
struct LayerSelection {
  std::vector<int> support = {3, 9, 12};
  std::vector<int> query = {0, 4, 10};

  static LayerSelection standard() { return {}; }
  static LayerSelection all_taps();
  static LayerSelection from_config(const LayerConfig& cfg);

  // Every level covered, no duplicates; three-element lists must be one-per-level.
  void validate() const;
  LayerSelection swapped() const { return {query, support}; }
};

struct FeatureTapSet {
  std::map<int, torch::Tensor> features;  // tap -> (N, C, H, W)
  std::map<int, TapSpec> specs;

  const torch::Tensor& at(int tap) const;
  bool contains(int tap) const { return features.count(tap) != 0; }
};

// Real pretrained extractors attach through this interface: given images, return tap maps.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::string name() const = 0;
  virtual std::vector<TapSpec> tap_specs() const = 0;
  // images: (N, 3, H, W) in [0, 1]. Only requested taps appear in the result.
  virtual FeatureTapSet extract(const torch::Tensor& images, const std::set<int>& requested_taps) const = 0;
  virtual void to(torch::Dtype dtype) = 0;

  const TapSpec& spec(int tap) const;
  int total_stride() const;

 protected:
  std::vector<TapSpec> cached_specs_;
};

// Frozen, never-trained 13-tap conv pyramid. Channels 16w / 32w / 64w and strides 4 / 8 / 16 for
// low / middle / high; weights drawn from `seed`. Every stage output is rescaled to unit RMS.
class ToyBackbone final : public FeatureExtractor {
 public:
  ToyBackbone(std::uint64_t seed, int width_multiplier);

  std::string name() const override { return "toy"; }
  std::vector<TapSpec> tap_specs() const override { return cached_specs_; }
  FeatureTapSet extract(const torch::Tensor& images, const std::set<int>& requested_taps) const override;
  void to(torch::Dtype dtype) override;

  std::int64_t parameter_count() const;

 private:
  std::vector<torch::Tensor> weights_;  // one 3x3 kernel per stage; stem uses two
  std::vector<int> strides_;
};

// Declared tap layout of a real backbone (channel/stride tables only). extract() throws until
// an external extractor is attached in its place.
class LayoutOnlyBackbone final : public FeatureExtractor {
 public:
  explicit LayoutOnlyBackbone(const std::string& kind);

  std::string name() const override { return kind_; }
  std::vector<TapSpec> tap_specs() const override { return cached_specs_; }
  FeatureTapSet extract(const torch::Tensor& images, const std::set<int>& requested_taps) const override;
  void to(torch::Dtype) override {}

 private:
  std::string kind_;
};

std::shared_ptr<ToyBackbone> toy_backbone(std::uint64_t seed, int width_multiplier);
std::shared_ptr<FeatureExtractor> make_backbone(const BackboneConfig& cfg);

}  // namespace tlg::backbone
