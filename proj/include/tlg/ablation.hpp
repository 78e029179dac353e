#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "tlg/config.hpp"
#include "tlg/episodic_data.hpp"
#include "tlg/trainer_eval.hpp"

namespace tlg::ablation {

struct GridPoint {
  std::string table;  // "modules", "layers" or "loss"
  std::string label;
  Config cfg;
};

// "modules": backbone+head, +HA, +HA+HT, +HA+HC, +HA+HT+HC.
// "layers": the four support/query layer rows (0-12 / 0-12, 0,4,10 / 3,9,12, ...).
// "loss": (alpha, beta) pairs around the 1.4 / 0.6 default.
std::vector<GridPoint> preset(const std::string& name, const Config& base);
std::vector<std::string> preset_names();

struct Row {
  GridPoint point;
  std::optional<train::EvalReport> report;
  std::string skipped_reason;
  std::int64_t learnable_parameters = 0;
};

struct Options {
  bool train = true;  // false: evaluate freshly initialized models
  std::ostream* log = nullptr;
};

// Each point is trained on its train.fold and evaluated on eval.folds (or train.fold). Points whose
// config fails validation or model construction are skipped with the reason logged.
std::vector<Row> run(const std::vector<GridPoint>& grid, const data::Dataset& dataset, const Options& opts = {});

void write_csv(const std::vector<Row>& rows, const std::string& path);

}  // namespace tlg::ablation
