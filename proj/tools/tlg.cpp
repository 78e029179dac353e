// tlg: train / eval / ablate / inspect / validate-prompts
//
// Exit codes: 0 ok, 1 runtime failure, 2 configuration error.

#include <filesystem>
#include <iomanip>
#include <iostream>
#include <regex>
#include <sstream>

#include <CLI11.hpp>
#include <torch/torch.h>

#include "tlg/ablation.hpp"
#include "tlg/checkpoint.hpp"
#include "tlg/config.hpp"
#include "tlg/errors.hpp"
#include "tlg/hc_prompts.hpp"
#include "tlg/image_io.hpp"
#include "tlg/model.hpp"
#include "tlg/run_dir.hpp"
#include "tlg/trainer_eval.hpp"

namespace fs = std::filesystem;
using namespace tlg;

namespace {

struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
  std::string run_id;
};

Config resolve_config(const Common& c, const Config* fallback = nullptr) {
  Config cfg = fallback ? *fallback : Config{};
  if (!c.config_path.empty()) cfg = load_config(c.config_path);
  cfg = apply_overrides(cfg, c.overrides);
  validate(cfg);
  return cfg;
}

void record_config(run::RunDir& dir, const Config& cfg, const Common& c) {
  auto& m = dir.manifest();
  m["config_path"] = c.config_path;
  m["overrides"] = c.overrides;
  m["config"] = to_json(cfg);
  m["model_hash"] = model_hash(cfg);
  m["seed"] = cfg.train.seed;
  m["outputs"] = nlohmann::json::object();
}

void finish(run::RunDir& dir) {
  dir.manifest()["finished"] = run::timestamp_utc();
  dir.write_manifest();
  std::cout << dir.path() << "\n";
}

// ---------------- train ----------------

int cmd_train(const Common& c) {
  const auto cfg = resolve_config(c);
  torch::set_num_threads(1);
  run::RunDir dir(run::runs_root(), "train", config_hash(cfg), c.run_id);
  record_config(dir, cfg, c);
  dir.write_manifest();
  const auto dataset = train::load_dataset(cfg);
  auto model = build_model(cfg, dataset.category_names);
  std::clog << "learnable parameters: " << count_learnable_parameters(*model) << std::endl;
  const auto result = train::train(cfg, dataset, model, {dir.path(), &std::clog});
  auto& m = dir.manifest();
  m["outputs"]["metrics"] = dir.file("metrics.csv");
  m["outputs"]["checkpoint"] = result.checkpoint_path;
  m["best_epoch"] = result.best_epoch;
  m["best_val_miou"] = result.best_val_miou;
  m["learnable_parameters"] = count_learnable_parameters(*model);
  finish(dir);
  return 0;
}

// ---------------- eval ----------------

struct EvalArgs {
  std::string checkpoint;
  std::vector<int> shots;
  std::vector<int> folds;
  int episodes = 0;
};

int cmd_eval(const Common& c, const EvalArgs& a) {
  const auto info = read_checkpoint_info(a.checkpoint);
  const auto cfg = resolve_config(c, &info.config);
  torch::set_num_threads(1);
  const auto dataset = train::load_dataset(cfg);
  auto model = build_model(cfg, dataset.category_names);
  load_checkpoint(*model, cfg, a.checkpoint);  // refuses on model-hash mismatch
  model->eval();

  run::RunDir dir(run::runs_root(), "eval", config_hash(cfg), c.run_id);
  record_config(dir, cfg, c);
  dir.manifest()["checkpoint"] = a.checkpoint;
  const auto shots = a.shots.empty() ? cfg.eval.shots : a.shots;
  auto folds = a.folds.empty() ? cfg.eval.folds : a.folds;
  if (folds.empty()) folds = {cfg.train.fold};
  const int episodes = a.episodes > 0 ? a.episodes : cfg.eval.episodes;
  std::cout << "learnable parameters: " << count_learnable_parameters(*model) << "\n";
  for (int k : shots) {
    std::vector<train::EvalReport> per_fold;
    for (int f : folds) per_fold.push_back(train::evaluate(model, cfg, dataset, f, k, episodes, cfg.eval.seed));
    const auto report = train::combine_reports(per_fold);
    const auto stem = "report_" + std::to_string(k) + "shot";
    train::write_report_csv(report, dir.file(stem + ".csv"));
    std::ofstream(dir.file(stem + ".json")) << train::report_to_json(report).dump(2) << "\n";
    dir.manifest()["outputs"][stem] = dir.file(stem + ".csv");
    std::cout << k << "-shot mIoU " << std::setprecision(6) << report.mean_miou << " over folds";
    for (std::size_t i = 0; i < report.folds.size(); ++i) std::cout << " " << report.folds[i] << ":" << report.fold_miou[i];
    std::cout << "\n";
  }
  finish(dir);
  return 0;
}

// ---------------- ablate ----------------

int cmd_ablate(const Common& c, const std::vector<std::string>& presets, bool no_train) {
  const auto cfg = resolve_config(c);
  torch::set_num_threads(1);
  std::vector<ablation::GridPoint> grid;
  for (const auto& p : presets) {
    auto g = ablation::preset(p, cfg);
    grid.insert(grid.end(), g.begin(), g.end());
  }
  run::RunDir dir(run::runs_root(), "ablate", config_hash(cfg), c.run_id);
  record_config(dir, cfg, c);
  dir.manifest()["presets"] = presets;
  dir.manifest()["train"] = !no_train;
  dir.write_manifest();
  const auto dataset = train::load_dataset(cfg);
  const auto rows = ablation::run(grid, dataset, {!no_train, &std::clog});
  ablation::write_csv(rows, dir.file("ablation.csv"));
  dir.manifest()["outputs"]["ablation"] = dir.file("ablation.csv");
  finish(dir);
  return 0;
}

// ---------------- inspect ----------------

// "fold=F seed=S index=I stream=T" (the format episode ids are logged in) or "F:S:I[:T]".
data::EpisodeId parse_episode_id(const std::string& text) {
  std::smatch m;
  static const std::regex named(R"(^\s*fold=(\d+)\s+seed=(\d+)\s+index=(\d+)(?:\s+stream=(\d+))?\s*$)");
  static const std::regex compact(R"(^\s*(\d+):(\d+):(\d+)(?::(\d+))?\s*$)");
  if (!std::regex_match(text, m, named) && !std::regex_match(text, m, compact))
    throw ConfigError("episode id '" + text + "' is not of the form fold:seed:index[:stream]");
  data::EpisodeId id;
  id.fold = std::stoi(m[1]);
  id.seed = std::stoull(m[2]);
  id.index = std::stoull(m[3]);
  id.stream = m[4].matched ? std::stoull(m[4]) : train::kEvalStream;
  return id;
}

Image8 heat_png(const torch::Tensor& map2d) {
  auto x = map2d.detach().to(torch::kFloat64).cpu();
  const double lo = x.min().item<double>(), hi = x.max().item<double>();
  x = hi > lo ? (x - lo) / (hi - lo) : torch::zeros_like(x);
  Image8 img;
  img.height = static_cast<int>(x.size(0));
  img.width = static_cast<int>(x.size(1));
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  auto acc = x.accessor<double, 2>();
  for (int y = 0; y < img.height; ++y)
    for (int c = 0; c < img.width; ++c)
      img.pixels[static_cast<std::size_t>(y) * img.width + c] = static_cast<std::uint8_t>(std::lround(255.0 * acc[y][c]));
  return img;
}

int cmd_inspect(const Common& c, const std::string& checkpoint, const std::string& episode,
                std::vector<int> taps) {
  const auto info = read_checkpoint_info(checkpoint);
  const auto cfg = resolve_config(c, &info.config);
  const auto id = parse_episode_id(episode);
  const auto dataset = train::load_dataset(cfg);
  if (id.fold < 0 || id.fold >= cfg.data.n_folds)
    throw DataError("episode " + id.str() + " does not exist: fold outside [0, " + std::to_string(cfg.data.n_folds) + ")");
  if (id.stream > train::kEvalStream)
    throw DataError("episode " + id.str() + " does not exist: stream must be 0 (train), 1 (val) or 2 (eval)");
  auto model = build_model(cfg, dataset.category_names);
  load_checkpoint(*model, cfg, checkpoint);
  model->eval();
  const auto split = train::fold_split(cfg, dataset, id.fold);
  const auto part = id.stream == train::kEvalStream ? data::SplitPart::test : data::SplitPart::train;
  const auto ep = data::sample_episode(dataset, split, part, cfg.train.shots, id);
  const auto batch = make_batch({ep});

  run::RunDir dir(run::runs_root(), "inspect", config_hash(cfg), c.run_id);
  record_config(dir, cfg, c);
  dir.manifest()["checkpoint"] = checkpoint;
  dir.manifest()["episode"] = id.str();
  torch::NoGradGuard guard;
  const auto out = model->forward(batch);

  std::vector<std::string> written;
  auto save = [&](const std::string& name, const torch::Tensor& map2d) {
    write_png(dir.file(name), heat_png(map2d));
    written.push_back(dir.file(name));
  };
  if (taps.empty()) {
    for (int t : model->layers().support) taps.push_back(t);
    for (int t : model->layers().query) taps.push_back(t);
  }
  for (int t : taps) {
    backbone::level_of(t);  // range check
    const auto f = model->extractor().extract(batch.query_images.to(model->dtype()), {t}).at(t);
    save("tap" + std::to_string(t) + ".png", f[0].abs().mean(0));
  }
  nlohmann::json check;
  auto plans = [&](const std::string& branch, const std::optional<ht::HtOutput>& ht) {
    if (!ht) return;
    save("attention_" + branch + ".png", ht->attention[0]);
    save("plan_" + branch + ".png", ht->coupling[0]);
    const auto plan = ht->coupling[0].to(torch::kFloat64);
    const double target = 1.0 / static_cast<double>(plan.size(0));
    const double row_err = (plan.sum(1) - target).abs().max().item<double>();
    const double col_err = (plan.sum(0) - target).abs().max().item<double>();
    check[branch] = {{"marginal", target}, {"max_row_sum_error", row_err}, {"max_col_sum_error", col_err},
                     {"iterations", ht->sinkhorn_iterations}};
    std::cout << "plan_" << branch << ": row sums within " << row_err << " of " << target << ", columns within "
              << col_err << "\n";
  };
  plans("support", out.ht_support);
  plans("query", out.ht_query);
  save("pred_query.png", out.query.hard_mask[0].to(torch::kFloat64));
  save("pseudo_query.png", batch.query_masks[0]);
  save("gt_query.png", batch.query_gt[0]);
  save("prob_query.png", out.query.foreground()[0]);
  if (!check.empty()) std::ofstream(dir.file("plan_check.json")) << check.dump(2) << "\n";
  dir.manifest()["outputs"]["images"] = written;
  dir.manifest()["query_iou"] = train::compute_iou(out.query.hard_mask[0], batch.query_gt[0]);
  finish(dir);
  return 0;
}

// ---------------- validate-prompts ----------------

int cmd_validate_prompts(const Common& c, std::string bank) {
  const auto cfg = resolve_config(c);
  if (bank.empty()) bank = cfg.hc.prompt_bank;
  std::vector<std::string> names;
  if (cfg.data.kind == "synthetic") {
    const auto& all = data::synthetic_shape_names();
    names.assign(all.begin(), all.begin() + std::min<std::size_t>(all.size(), static_cast<std::size_t>(cfg.data.n_categories)));
  } else {
    names = train::load_dataset(cfg).category_names;
  }
  const auto pb = hc::build_prompt_bank(names, bank);
  hc::HashingTextEncoder enc(cfg.hc.d_text);
  enc.encode(pb.fine_grained_prompts());
  for (const auto& r : pb.records())
    std::cout << r.category_id << "  " << r.category_name << "  | " << r.fine_grained_prompt << " | "
              << r.background_prompts[0] << ", " << r.background_prompts[1] << "\n";
  std::cout << "prompt bank OK: " << pb.size() << " categories covered\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"tlg: heterogeneous few-shot segmentation (train, eval, ablate, inspect, validate-prompts)"};
  app.require_subcommand(1);
  std::ostringstream keys;
  keys << "\nConfig keys (override with --set section.key=value):\n";
  for (const auto& k : describe_config_keys()) keys << "  " << k << "\n";
  keys << "\nEnvironment: TLG_RUNS_DIR sets the runs root (default ./runs).\n"
       << "Exit codes: 0 ok, 1 runtime failure, 2 configuration error.\n";
  app.footer(keys.str());

  Common common;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", common.config_path, "JSON config file or a run manifest");
    sub->add_option("--set", common.overrides, "section.key=value override (repeatable, last wins)");
    sub->add_option("--run-id", common.run_id, "run directory name (default: generated)");
    sub->footer(keys.str());
  };

  auto* train_cmd = app.add_subcommand("train", "episodic training; writes metrics.csv, checkpoint.bin, manifest");
  add_common(train_cmd);

  EvalArgs eval_args;
  auto* eval_cmd = app.add_subcommand("eval", "meta-test a checkpoint on held-out categories");
  add_common(eval_cmd);
  eval_cmd->add_option("--checkpoint", eval_args.checkpoint, "checkpoint.bin")->required();
  eval_cmd->add_option("--shots", eval_args.shots, "shot counts, one report each (default eval.shots)");
  eval_cmd->add_option("--folds", eval_args.folds, "folds to test (default eval.folds or train.fold)");
  eval_cmd->add_option("--episodes", eval_args.episodes, "episodes per fold (default eval.episodes)");

  std::vector<std::string> presets{"modules"};
  bool no_train = false;
  auto* ablate_cmd = app.add_subcommand("ablate", "train and evaluate an ablation grid; writes ablation.csv");
  add_common(ablate_cmd);
  ablate_cmd->add_option("--preset", presets, "modules | layers | loss (repeatable)");
  ablate_cmd->add_flag("--no-train", no_train, "evaluate untrained models only");

  std::string inspect_ckpt, episode;
  std::vector<int> taps;
  auto* inspect_cmd = app.add_subcommand("inspect", "write tap, attention, transport-plan and mask images");
  add_common(inspect_cmd);
  inspect_cmd->add_option("--checkpoint", inspect_ckpt, "checkpoint.bin")->required();
  inspect_cmd->add_option("--episode", episode, "episode id fold:seed:index[:stream]")->required();
  inspect_cmd->add_option("--taps", taps, "backbone taps to render (default: the selected layers)");

  std::string bank;
  auto* prompts_cmd = app.add_subcommand("validate-prompts", "check a prompt bank against the dataset categories");
  add_common(prompts_cmd);
  prompts_cmd->add_option("--bank", bank, "prompt bank CSV (default hc.prompt_bank)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*train_cmd) return cmd_train(common);
    if (*eval_cmd) return cmd_eval(common, eval_args);
    if (*ablate_cmd) return cmd_ablate(common, presets, no_train);
    if (*inspect_cmd) return cmd_inspect(common, inspect_ckpt, episode, taps);
    if (*prompts_cmd) return cmd_validate_prompts(common, bank);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
