#include "tlg/trainer_eval.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>

#include "tlg/checkpoint.hpp"
#include "tlg/errors.hpp"

namespace tlg::train {

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<data::Episode> draw(const data::Dataset& ds, const data::FoldSplit& split, data::SplitPart part,
                                int shots, std::uint64_t seed, std::uint64_t stream, std::uint64_t first, int count) {
  std::vector<data::Episode> eps;
  for (int i = 0; i < count; ++i) {
    data::EpisodeId id{split.fold_id, seed, first + static_cast<std::uint64_t>(i), stream};
    eps.push_back(data::sample_episode(ds, split, part, shots, id));
  }
  return eps;
}

std::vector<torch::Tensor> per_shot(const torch::Tensor& x, std::int64_t b, int k) {
  const auto r = x.reshape({b, k, x.size(1), x.size(2)});
  std::vector<torch::Tensor> out;
  for (int s = 0; s < k; ++s) out.push_back(r.select(1, s));
  return out;
}

void dump_diagnostic(const std::string& run_dir, int epoch, const EpisodeBatch& batch, double loss) {
  if (run_dir.empty()) return;
  nlohmann::json j;
  j["epoch"] = epoch;
  j["loss"] = std::isnan(loss) ? "nan" : (loss > 0 ? "inf" : "-inf");
  for (const auto& id : batch.ids) j["episodes"].push_back(id.str());
  std::ofstream(run_dir + "/diagnostic.json") << j.dump(2) << "\n";
}

}  // namespace

data::FoldSplit fold_split(const Config& cfg, const data::Dataset& dataset, int fold) {
  return data::make_fold_split(dataset.n_categories(), cfg.data.n_folds, fold, cfg.data.folds);
}

data::Dataset load_dataset(const Config& cfg) {
  if (cfg.data.kind == "synthetic")
    return data::make_synthetic_dataset(cfg.data.n_categories, cfg.data.exemplars_per_category, cfg.data.image_size,
                                        cfg.data.seed);
  auto ds = data::load_dataset_directory(resolve_data_path(cfg.data.root));
  if (ds.image_size != cfg.data.image_size)
    throw ConfigError("dataset images are " + std::to_string(ds.image_size) + " px but data.image_size is " +
                      std::to_string(cfg.data.image_size));
  return ds;
}

// ---------------- training ----------------

TrainResult train(const Config& cfg, const data::Dataset& dataset, TlgModel& model, const TrainOptions& opts) {
  const auto& tc = cfg.train;
  const auto split = fold_split(cfg, dataset, tc.fold);
  head::LossWeights weights{cfg.loss.alpha, cfg.loss.beta};
  weights.validate();

  std::vector<torch::Tensor> params;
  for (auto& p : model->parameters())
    if (p.requires_grad()) params.push_back(p);
  if (params.empty()) throw ConfigError("nothing to train: every parameter is frozen");
  torch::optim::AdamW optim(params, torch::optim::AdamWOptions(tc.learning_rate).weight_decay(tc.weight_decay));

  TrainResult result;
  std::map<std::string, torch::Tensor> best;
  auto snapshot = [&] {
    torch::NoGradGuard g;
    best.clear();
    for (const auto& p : model->named_parameters()) best[p.key()] = p.value().detach().clone();
  };
  const auto t0 = std::chrono::steady_clock::now();
  const auto dtype = model->dtype();

  for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
    model->train();
    double loss_sum = 0.0;
    int batches = 0;
    for (int start = 0; start < tc.episodes_per_epoch; start += tc.batch_size) {
      const int n = std::min(tc.batch_size, tc.episodes_per_epoch - start);
      const auto first = static_cast<std::uint64_t>(epoch - 1) * static_cast<std::uint64_t>(tc.episodes_per_epoch) +
                         static_cast<std::uint64_t>(start);
      const auto batch = make_batch(draw(dataset, split, data::SplitPart::train, tc.shots, tc.seed, kTrainStream, first, n));
      torch::Tensor loss;
      double value = std::numeric_limits<double>::quiet_NaN();
      try {
        auto out = model->forward(batch);
        const auto b = batch.size();
        loss = head::episode_loss(per_shot(out.support.foreground(), b, batch.shots),
                                  per_shot(batch.support_masks.to(dtype), b, batch.shots), out.query.foreground(),
                                  batch.query_masks.to(dtype), weights, cfg.loss.binarize_targets);
        value = loss.item<double>();
      } catch (const DataError&) {
        // diverged parameters can poison the features before the loss is ever formed
      }
      if (!std::isfinite(value)) {
        dump_diagnostic(opts.run_dir, epoch, batch, value);
        std::string ids;
        for (const auto& id : batch.ids) ids += (ids.empty() ? "" : ", ") + id.str();
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + " in episodes [" + ids + "]");
      }
      optim.zero_grad();
      loss.backward();
      optim.step();
      loss_sum += value;
      ++batches;
    }

    EpochMetrics m;
    m.epoch = epoch;
    m.train_loss = loss_sum / std::max(1, batches);
    if (tc.val_episodes > 0) {
      const auto val = evaluate(model_predictor(model), dataset, split, data::SplitPart::train, tc.shots,
                                tc.val_episodes, tc.seed, tc.batch_size);
      m.val_miou = val.mean_miou;
    }
    m.elapsed_s = seconds_since(t0);
    result.history.push_back(m);
    if (opts.log)
      *opts.log << "epoch " << epoch << "/" << tc.epochs << "  loss " << std::setprecision(6) << m.train_loss
                << "  val_miou " << m.val_miou << "  (" << std::setprecision(3) << m.elapsed_s << " s)" << std::endl;

    // ties keep the later epoch so that without validation the last state wins
    if (tc.val_episodes == 0 || m.val_miou >= result.best_val_miou) {
      result.best_val_miou = m.val_miou;
      result.best_epoch = epoch;
      snapshot();
      if (!opts.run_dir.empty()) {
        result.checkpoint_path = opts.run_dir + "/checkpoint.bin";
        save_checkpoint(*model, cfg, result.checkpoint_path, {{"epoch", epoch}, {"val_miou", m.val_miou}});
      }
    }
    if (!opts.run_dir.empty()) write_metrics_csv(result.history, opts.run_dir + "/metrics.csv");
  }

  if (!best.empty()) {
    torch::NoGradGuard g;
    for (auto& p : model->named_parameters()) p.value().copy_(best.at(p.key()));
  }
  model->eval();
  return result;
}

// ---------------- metrics ----------------

double compute_iou(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt) {
  check_shape(pred.size() == gt.size(), "compute_iou: masks differ in size");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool a = pred[i] != 0, b = gt[i] != 0;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double compute_iou(const torch::Tensor& pred, const torch::Tensor& gt) {
  check_shape(pred.sizes() == gt.sizes(), "compute_iou: masks differ in shape");
  const auto a = (pred != 0).contiguous().to(torch::kUInt8);
  const auto b = (gt != 0).contiguous().to(torch::kUInt8);
  const auto n = static_cast<std::size_t>(a.numel());
  return compute_iou(std::span<const std::uint8_t>(a.data_ptr<std::uint8_t>(), n),
                     std::span<const std::uint8_t>(b.data_ptr<std::uint8_t>(), n));
}

Predictor model_predictor(TlgModel& model) {
  return [model](const EpisodeBatch& batch) mutable {
    torch::NoGradGuard g;
    const bool was_training = model->is_training();
    model->eval();
    auto mask = model->forward(batch).query.hard_mask;
    if (was_training) model->train();
    return mask;
  };
}

EvalReport evaluate(const Predictor& predict, const data::Dataset& dataset, const data::FoldSplit& split,
                    data::SplitPart part, int shots, int n_episodes, std::uint64_t seed, int batch_size) {
  const auto& cats = part == data::SplitPart::test ? split.test_categories : split.train_categories;
  if (cats.empty()) throw SamplingError("evaluate: fold " + std::to_string(split.fold_id) + " has no categories");
  if (n_episodes < 1) throw ConfigError("evaluate: episode count must be positive");
  const auto t0 = std::chrono::steady_clock::now();
  const auto stream = part == data::SplitPart::test ? kEvalStream : kValStream;

  std::map<int, std::pair<double, int>> acc;
  for (int start = 0; start < n_episodes; start += batch_size) {
    const int n = std::min(batch_size, n_episodes - start);
    const auto batch = make_batch(draw(dataset, split, part, shots, seed, stream, static_cast<std::uint64_t>(start), n));
    const auto masks = predict(batch);
    check_shape(masks.dim() == 3 && masks.size(0) == n, "predictor returned the wrong number of masks");
    for (int i = 0; i < n; ++i) {
      auto& slot = acc[batch.categories[static_cast<std::size_t>(i)]];
      slot.first += compute_iou(masks[i], batch.query_gt[i]);
      slot.second += 1;
    }
  }

  EvalReport r;
  r.folds = {split.fold_id};
  r.shots = shots;
  r.episodes = n_episodes;
  double sum = 0.0;
  for (const auto& [cat, v] : acc) {
    r.per_category_iou[cat] = v.first / v.second;
    sum += r.per_category_iou[cat];
  }
  r.fold_miou = {sum / static_cast<double>(acc.size())};
  r.mean_miou = r.fold_miou[0];
  r.wall_clock_s = seconds_since(t0);
  return r;
}

EvalReport evaluate(TlgModel& model, const Config& cfg, const data::Dataset& dataset, int fold, int shots,
                    int n_episodes, std::uint64_t seed) {
  auto r = evaluate(model_predictor(model), dataset, fold_split(cfg, dataset, fold), data::SplitPart::test, shots,
                    n_episodes, seed, cfg.train.batch_size);
  r.config_hash = config_hash(cfg);
  r.learnable_parameters = count_learnable_parameters(*model);
  return r;
}

EvalReport combine_reports(const std::vector<EvalReport>& per_fold) {
  if (per_fold.empty()) throw ConfigError("combine_reports: no reports");
  EvalReport r = per_fold.front();
  r.folds.clear();
  r.fold_miou.clear();
  r.per_category_iou.clear();
  r.episodes = 0;
  r.wall_clock_s = 0.0;
  for (const auto& f : per_fold) {
    r.folds.insert(r.folds.end(), f.folds.begin(), f.folds.end());
    r.fold_miou.insert(r.fold_miou.end(), f.fold_miou.begin(), f.fold_miou.end());
    for (const auto& [c, v] : f.per_category_iou) r.per_category_iou[c] = v;
    r.episodes += f.episodes;
    r.wall_clock_s += f.wall_clock_s;
  }
  r.mean_miou = std::accumulate(r.fold_miou.begin(), r.fold_miou.end(), 0.0) / static_cast<double>(r.fold_miou.size());
  return r;
}

// ---------------- persistence ----------------

void write_metrics_csv(const std::vector<EpochMetrics>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << "epoch,train_loss,val_miou,elapsed_s\n" << std::setprecision(17);
  for (const auto& m : history) out << m.epoch << "," << m.train_loss << "," << m.val_miou << "," << m.elapsed_s << "\n";
}

void write_report_csv(const EvalReport& report, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write '" + path + "'");
  out << "fold,miou,shots,episodes\n" << std::setprecision(17);
  for (std::size_t i = 0; i < report.folds.size(); ++i)
    out << report.folds[i] << "," << report.fold_miou[i] << "," << report.shots << ","
        << report.episodes / static_cast<std::int64_t>(report.folds.size()) << "\n";
  out << "mean," << report.mean_miou << "," << report.shots << "," << report.episodes << "\n";
}

nlohmann::json report_to_json(const EvalReport& r) {
  nlohmann::json j;
  j["folds"] = r.folds;
  j["fold_miou"] = r.fold_miou;
  j["mean_miou"] = r.mean_miou;
  for (const auto& [c, v] : r.per_category_iou) j["per_category_iou"][std::to_string(c)] = v;
  j["episodes"] = r.episodes;
  j["shots"] = r.shots;
  j["config_hash"] = r.config_hash;
  j["learnable_parameters"] = r.learnable_parameters;
  j["wall_clock_s"] = r.wall_clock_s;
  return j;
}

}  // namespace tlg::train
