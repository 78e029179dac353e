#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

namespace tlg {

struct DataConfig {
  std::string kind = "synthetic";  // synthetic | directory
  std::string root;                // dataset directory when kind == directory
  int n_categories = 4;
  int exemplars_per_category = 20;
  int image_size = 64;
  std::uint64_t seed = 0;
  int n_folds = 4;
  std::vector<std::vector<int>> folds;  // explicit test categories per fold; empty = contiguous chunks
};

struct BackboneConfig {
  std::string kind = "toy";  // toy | resnet50 | vgg16 (layout only, weights attach externally)
  std::uint64_t seed = 0;
  int width_multiplier = 1;
};

struct LayerConfig {
  std::vector<int> support = {3, 9, 12};
  std::vector<int> query = {0, 4, 10};
};

struct ModulesConfig {
  bool ha = true;
  bool ht = true;
  bool hc = true;
};

struct HaConfig {
  int channels = 64;  // common width after per-level equalization
  double init_sigma = 0.02;
  int squeeze_width = 16;
  std::string corr_mode = "cross";  // cross | self
  int grid = 0;                     // 0 = image_size / 8
  std::uint64_t init_seed = 0;
  bool mask_support = true;
};

struct HtConfig {
  double lambda = 10.0;
  double tol = 1e-6;
  int max_iters = 200;
  int unrolled_iters = 20;
  double cost_threshold = 0.5;
  int support_residual_tap = 9;
  int query_residual_tap = 4;
  int pool_window = 3;
};

struct HcConfig {
  std::string prompt_bank = "prompts/synthetic.csv";
  int d_text = 64;
  int bottleneck_ratio = 4;
  double rho_init = 0.2;
  std::string encoder = "stub";  // stub | external
};

struct HeadConfig {
  int hidden = 32;
};

struct LossConfig {
  double alpha = 1.4;
  double beta = 0.6;
  bool binarize_targets = false;
};

struct TrainConfig {
  int epochs = 80;
  int batch_size = 16;
  double learning_rate = 4e-4;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;
  int episodes_per_epoch = 200;
  int val_episodes = 50;
  int shots = 1;
  int fold = 0;
};

struct EvalConfig {
  int episodes = 1000;
  std::uint64_t seed = 0;
  std::vector<int> shots = {1};
  std::vector<int> folds;  // empty = train.fold
};

struct Config {
  DataConfig data;
  BackboneConfig backbone;
  LayerConfig layers;
  ModulesConfig modules;
  HaConfig ha;
  HtConfig ht;
  HcConfig hc;
  HeadConfig head;
  LossConfig loss;
  TrainConfig train;
  EvalConfig eval;

  // Side length of the canonical aggregation grid.
  int grid() const { return ha.grid > 0 ? ha.grid : (data.image_size == 400 ? 50 : data.image_size / 8); }
};

nlohmann::json to_json(const Config& cfg);

// Merges `j` over the defaults. Unknown keys and wrongly typed values throw
// ConfigError; `source_text` (optional) is used to attach line numbers.
Config config_from_json(const nlohmann::json& j, const std::string& source_text = {});

// Reads a JSON config file, or a run manifest (its "config" member).
Config load_config(const std::string& path);

// `section.key=value`; the value is parsed as JSON and falls back to a string.
void apply_override(nlohmann::json& j, const std::string& assignment);
Config apply_overrides(const Config& cfg, const std::vector<std::string>& assignments);

// Throws ConfigError naming the offending key.
void validate(const Config& cfg);

// FNV-1a over the canonical JSON dump.
std::string config_hash(const Config& cfg);
// Same, restricted to sections that determine the parameter layout.
std::string model_hash(const Config& cfg);

// Flattened `section.key = default` lines for --help.
std::vector<std::string> describe_config_keys();

std::string fnv1a_hex(const std::string& text);

// Resolves a data file path: as given, relative to `base_dir`, then under the shipped data directory.
std::string resolve_data_path(const std::string& path, const std::string& base_dir = {});

}  // namespace tlg
