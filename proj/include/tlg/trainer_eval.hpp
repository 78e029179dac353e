#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "tlg/config.hpp"
#include "tlg/episodic_data.hpp"
#include "tlg/model.hpp"

namespace tlg::train {

// Episode streams keep train, validation and test draws independent.
inline constexpr std::uint64_t kTrainStream = 0;
inline constexpr std::uint64_t kValStream = 1;
inline constexpr std::uint64_t kEvalStream = 2;

struct EpochMetrics {
  int epoch = 0;
  double train_loss = 0.0;
  double val_miou = 0.0;
  double elapsed_s = 0.0;
};

struct TrainResult {
  std::vector<EpochMetrics> history;
  int best_epoch = 0;
  double best_val_miou = -1.0;
  std::string checkpoint_path;
};

struct TrainOptions {
  std::string run_dir;  // empty: nothing written to disk
  std::ostream* log = nullptr;
};

// AdamW over the learnable parameters; episodes are drawn from the fold's training categories.
// The model ends up holding the best-on-validation parameters. Non-finite losses abort with
// TrainingError after dumping diagnostic.json (offending episode ids) into run_dir.
TrainResult train(const Config& cfg, const data::Dataset& dataset, TlgModel& model, const TrainOptions& opts = {});

// |a & b| / |a | b|; both empty gives 1. Masks are treated as binary (nonzero = foreground).
double compute_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt);
double compute_iou(const torch::Tensor& pred, const torch::Tensor& gt);

struct EvalReport {
  std::vector<int> folds;
  std::vector<double> fold_miou;
  double mean_miou = 0.0;
  std::map<int, double> per_category_iou;  // mean episode IoU per test category
  std::int64_t episodes = 0;
  int shots = 1;
  std::string config_hash;
  std::int64_t learnable_parameters = 0;
  double wall_clock_s = 0.0;
};

// Hard query masks (B, H, W) for a batch of episodes.
using Predictor = std::function<torch::Tensor(const EpisodeBatch&)>;

Predictor model_predictor(TlgModel& model);

// Fold mIoU: per-category mean of episode query IoUs, averaged over the fold's categories.
EvalReport evaluate(const Predictor& predict, const data::Dataset& dataset, const data::FoldSplit& split,
                    data::SplitPart part, int shots, int n_episodes, std::uint64_t seed, int batch_size = 16);
EvalReport evaluate(TlgModel& model, const Config& cfg, const data::Dataset& dataset, int fold, int shots,
                    int n_episodes, std::uint64_t seed);

// Concatenates single-fold reports; mean_miou is the arithmetic mean of the fold values.
EvalReport combine_reports(const std::vector<EvalReport>& per_fold);

void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path);
void write_report_csv(const EvalReport& report, const std::string& path);
nlohmann::json report_to_json(const EvalReport& report);

data::FoldSplit fold_split(const Config& cfg, const data::Dataset& dataset, int fold);
data::Dataset load_dataset(const Config& cfg);

}  // namespace tlg::train
