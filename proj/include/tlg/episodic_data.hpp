#pragma once

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace tlg::data {

struct Sample {
  std::string id;
  int category_id = 0;
  torch::Tensor image;        // (3, H, W) float32 in [0, 1]
  torch::Tensor gt_mask;      // (H, W) float32 in {0, 1}
  torch::Tensor pseudo_mask;  // (H, W) float32 in [0, 1]
};

// Immutable after construction; safe to share between samplers.
struct Dataset {
  int image_size = 0;
  std::vector<std::string> category_names;
  std::vector<Sample> samples;
  std::vector<std::vector<std::size_t>> by_category;

  int n_categories() const { return static_cast<int>(category_names.size()); }
  void reindex();
};

struct FoldSplit {
  int fold_id = 0;
  std::vector<int> train_categories;
  std::vector<int> test_categories;
};

enum class SplitPart { train, test };

// Fold f tests on the f-th contiguous chunk of category ids, or on `explicit_folds[f]` when given.
FoldSplit make_fold_split(int n_categories, int n_folds, int fold,
                          const std::vector<std::vector<int>>& explicit_folds = {});

// (fold, seed, index) fully determine an episode; stream separates train/val/eval draws.
struct EpisodeId {
  int fold = 0;
  std::uint64_t seed = 0;
  std::uint64_t index = 0;
  std::uint64_t stream = 0;

  std::uint64_t rng_seed() const;
  std::string str() const;
};

struct Episode {
  std::vector<torch::Tensor> support_images;        // K x (3, H, W)
  std::vector<torch::Tensor> support_pseudo_masks;  // K x (H, W)
  std::vector<torch::Tensor> support_gt_masks;
  torch::Tensor query_image;
  torch::Tensor query_pseudo_mask;
  torch::Tensor query_gt_mask;
  int category_id = 0;
  int fold_id = 0;
  int shot_count = 1;
  std::vector<std::string> support_ids;
  std::string query_id;
  EpisodeId id;
};

// relu(x) / max(relu(x)); all zeros when nothing is positive. Throws DataError on non-finite input.
torch::Tensor normalize_cam(const torch::Tensor& raw_activation);

// Throws DataError unless finite and within [0, 1].
void validate_pseudo_mask(const torch::Tensor& mask, const std::string& what);

Episode sample_episode(const Dataset& dataset, const FoldSplit& split, SplitPart part, int shot_count,
                       std::uint64_t rng_seed);
Episode sample_episode(const Dataset& dataset, const FoldSplit& split, SplitPart part, int shot_count,
                       const EpisodeId& id);

// Shape generators available to the synthetic dataset, in category-id order.
const std::vector<std::string>& synthetic_shape_names();

Dataset make_synthetic_dataset(int n_categories, int exemplars_per_category, int image_size,
                               std::uint64_t rng_seed);

// Mean filter of radius `radius` with edge clamping, then normalize_cam.
torch::Tensor soften_mask(const torch::Tensor& binary_mask, int radius = 2);

// root/categories.csv (id, category_name, category_id) lists the images; root/masks/<id>.png holds
// each pseudo-mask. Missing masks throw LoadError listing every missing id.
std::map<std::string, torch::Tensor> load_precomputed_masks(const std::string& root);

// Full directory dataset: images/, masks/ and optional gt/ (binarized at 128; falls back to
// pseudo-mask >= 0.5 when absent).
Dataset load_dataset_directory(const std::string& root);

void save_dataset_directory(const Dataset& dataset, const std::string& root);

// Small deterministic RNG helpers over mt19937_64 (distribution output identical across std libs).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform();  // [0, 1)
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double normal();
  std::size_t index(std::size_t n);  // [0, n)
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts);

}  // namespace tlg::data
