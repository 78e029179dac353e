#include "tlg/backbone.hpp"

#include <algorithm>
#include <cmath>

#include "tlg/errors.hpp"

namespace tlg::backbone {

Level level_of(int tap) {
  if (tap < 0 || tap >= kNumTaps) throw ConfigError("tap index " + std::to_string(tap) + " outside 0..12");
  if (tap <= 3) return Level::low;
  if (tap <= 9) return Level::middle;
  return Level::high;
}

std::string level_name(Level level) {
  switch (level) {
    case Level::low: return "low";
    case Level::middle: return "middle";
    case Level::high: return "high";
  }
  return "?";
}

LayerSelection LayerSelection::all_taps() {
  LayerSelection s;
  s.support.clear();
  for (int t = 0; t < kNumTaps; ++t) s.support.push_back(t);
  s.query = s.support;
  return s;
}

LayerSelection LayerSelection::from_config(const LayerConfig& cfg) {
  LayerSelection s{cfg.support, cfg.query};
  s.validate();
  return s;
}

void LayerSelection::validate() const {
  for (const auto* side : {&support, &query}) {
    const std::string which = side == &support ? "support" : "query";
    int counts[3] = {0, 0, 0};
    std::set<int> seen;
    for (int t : *side) {
      counts[static_cast<int>(level_of(t))]++;
      if (!seen.insert(t).second) throw ConfigError("'layers." + which + "' repeats tap " + std::to_string(t));
    }
    for (int l = 0; l < 3; ++l)
      if (counts[l] == 0)
        throw ConfigError("'layers." + which + "' has no " + level_name(static_cast<Level>(l)) + "-level tap");
    if (side->size() == 3 && !(counts[0] == 1 && counts[1] == 1 && counts[2] == 1))
      throw ConfigError("'layers." + which + "' triple must hold one tap per level");
  }
}

const torch::Tensor& FeatureTapSet::at(int tap) const {
  const auto it = features.find(tap);
  if (it == features.end()) throw ConfigError("tap " + std::to_string(tap) + " was not extracted");
  return it->second;
}

const TapSpec& FeatureExtractor::spec(int tap) const {
  level_of(tap);
  return cached_specs_.at(static_cast<std::size_t>(tap));
}

int FeatureExtractor::total_stride() const {
  int s = 1;
  for (const auto& t : cached_specs_) s = std::max(s, t.stride);
  return s;
}

// ---------------- toy backbone ----------------

ToyBackbone::ToyBackbone(std::uint64_t seed, int width_multiplier) {
  if (width_multiplier < 1) throw ConfigError("'backbone.width_multiplier' must be >= 1");
  const int c_low = 16 * width_multiplier, c_mid = 32 * width_multiplier, c_high = 64 * width_multiplier;
  auto gen = at::make_generator<at::CPUGeneratorImpl>(seed);
  auto kernel = [&](int out, int in) {
    const double scale = std::sqrt(2.0 / (in * 9.0));
    return torch::randn({out, in, 3, 3}, gen, torch::TensorOptions().dtype(torch::kFloat32)) * scale;
  };
  // stem (two stride-2 convs) -> tap 0
  weights_.push_back(kernel(c_low, 3));
  strides_.push_back(2);
  weights_.push_back(kernel(c_low, c_low));
  strides_.push_back(2);
  for (int t = 1; t < kNumTaps; ++t) {
    if (t == 4) {
      weights_.push_back(kernel(c_mid, c_low));
      strides_.push_back(2);
    } else if (t == 10) {
      weights_.push_back(kernel(c_high, c_mid));
      strides_.push_back(2);
    } else {
      const int c = t < 4 ? c_low : (t < 10 ? c_mid : c_high);
      weights_.push_back(kernel(c, c));
      strides_.push_back(1);
    }
  }
  for (int t = 0; t < kNumTaps; ++t) {
    const Level l = level_of(t);
    const int c = l == Level::low ? c_low : (l == Level::middle ? c_mid : c_high);
    const int stride = l == Level::low ? 4 : (l == Level::middle ? 8 : 16);
    cached_specs_.push_back({t, l, c, stride});
  }
}

FeatureTapSet ToyBackbone::extract(const torch::Tensor& images, const std::set<int>& requested) const {
  for (int t : requested) level_of(t);
  if (images.dim() != 4 || images.size(1) != 3) throw ShapeError("extract: expected (N, 3, H, W) images");
  const int stride = total_stride();
  if (images.size(2) % stride != 0 || images.size(3) % stride != 0)
    throw ShapeError("extract: image size " + std::to_string(images.size(2)) + "x" + std::to_string(images.size(3)) +
                     " not divisible by total stride " + std::to_string(stride));
  FeatureTapSet out;
  if (requested.empty()) return out;
  const int last = *requested.rbegin();

  torch::NoGradGuard no_grad;
  const auto& w0 = weights_[0];
  auto x = images.to(w0.dtype()) * 2.0 - 1.0;
  x = torch::relu(torch::conv2d(x, w0, {}, 2, 1));
  x = torch::relu(torch::conv2d(x, weights_[1], {}, 2, 1));
  for (int t = 0; t <= last; ++t) {
    if (t > 0) {
      const auto& w = weights_[static_cast<std::size_t>(t + 1)];
      const int s = strides_[static_cast<std::size_t>(t + 1)];
      if (s == 2)
        x = torch::relu(torch::conv2d(x, w, {}, 2, 1));
      else
        x = 0.5 * (x + torch::relu(torch::conv2d(x, w, {}, 1, 1)));
    }
    // unit RMS per sample keeps deep taps from fading
    x = x / x.pow(2).mean({1, 2, 3}, true).sqrt().clamp_min(1e-6);
    if (requested.count(t)) {
      out.features.emplace(t, x);
      out.specs.emplace(t, cached_specs_[static_cast<std::size_t>(t)]);
    }
  }
  return out;
}

void ToyBackbone::to(torch::Dtype dtype) {
  for (auto& w : weights_) w = w.to(dtype);
}

std::int64_t ToyBackbone::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& w : weights_) n += w.numel();
  return n;
}

// ---------------- declared layouts ----------------

LayoutOnlyBackbone::LayoutOnlyBackbone(const std::string& kind) : kind_(kind) {
  if (kind == "resnet50") {
    // layer2 (4 blocks), layer3 (6 blocks), layer4 (3 blocks) bottleneck outputs
    for (int t = 0; t < kNumTaps; ++t) {
      const Level l = level_of(t);
      const int c = l == Level::low ? 512 : (l == Level::middle ? 1024 : 2048);
      const int s = l == Level::low ? 8 : (l == Level::middle ? 16 : 32);
      cached_specs_.push_back({t, l, c, s});
    }
  } else if (kind == "vgg16") {
    // the thirteen conv layers conv1_1 .. conv5_3
    const int channels[kNumTaps] = {64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512};
    const int strides[kNumTaps] = {1, 1, 2, 2, 4, 4, 4, 8, 8, 8, 16, 16, 16};
    for (int t = 0; t < kNumTaps; ++t) cached_specs_.push_back({t, level_of(t), channels[t], strides[t]});
  } else {
    throw ConfigError("unknown backbone layout '" + kind + "'");
  }
}

FeatureTapSet LayoutOnlyBackbone::extract(const torch::Tensor&, const std::set<int>&) const {
  throw ConfigError("backbone '" + kind_ + "' is a declared layout only; attach an external FeatureExtractor");
}

std::shared_ptr<ToyBackbone> toy_backbone(std::uint64_t seed, int width_multiplier) {
  return std::make_shared<ToyBackbone>(seed, width_multiplier);
}

std::shared_ptr<FeatureExtractor> make_backbone(const BackboneConfig& cfg) {
  if (cfg.kind == "toy") return toy_backbone(cfg.seed, cfg.width_multiplier);
  return std::make_shared<LayoutOnlyBackbone>(cfg.kind);
}

}  // namespace tlg::backbone
