#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "tlg/ablation.hpp"
#include "tlg/checkpoint.hpp"
#include "tlg/errors.hpp"
#include "tlg/run_dir.hpp"
#include "tlg/trainer_eval.hpp"
#include "util.hpp"

using namespace tlg;
namespace fs = std::filesystem;

namespace {

Config smoke() { return load_config(std::string(TLG_CONFIG_DIR) + "/smoke.json"); }

fs::path scratch(const std::string& name) {
  const auto p = fs::temp_directory_path() / ("tlg_" + name + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::int64_t numel_of(const torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

}  // namespace

TEST(Iou, Conventions) {
  const auto a = torch::tensor({1, 1, 0, 0}), b = torch::tensor({0, 0, 1, 1});
  EXPECT_EQ(train::compute_iou(a, a), 1.0);
  EXPECT_EQ(train::compute_iou(a, b), 0.0);
  EXPECT_EQ(train::compute_iou(torch::zeros({4, 4}), torch::zeros({4, 4})), 1.0);
  EXPECT_EQ(train::compute_iou(torch::tensor({1, 1, 1, 0}), torch::tensor({0, 1, 1, 1})), 0.5);
  EXPECT_THROW(train::compute_iou(torch::zeros({4}), torch::zeros({5})), ShapeError);
}

TEST(Iou, MatchesPixelCountingOracleExactly) {
  std::mt19937_64 rng(3);
  std::bernoulli_distribution coin(0.4);
  for (int t = 0; t < 1000; ++t) {
    std::vector<std::uint8_t> a(256), b(256);
    for (auto& x : a) x = coin(rng);
    for (auto& x : b) x = coin(rng);
    const double ref = oracle::iou(a, b);
    EXPECT_EQ(train::compute_iou(a, b), ref);
    EXPECT_EQ(train::compute_iou(b, a), ref);
    const auto ta = torch::from_blob(a.data(), {16, 16}, torch::kUInt8).clone();
    const auto tb = torch::from_blob(b.data(), {16, 16}, torch::kUInt8).clone();
    EXPECT_EQ(train::compute_iou(ta.to(torch::kLong), tb.to(torch::kFloat32)), ref);
  }
}

TEST(Evaluate, OracleAndConstantPredictors) {
  const auto ds = data::make_synthetic_dataset(4, 6, 32, 0);
  const auto split = data::make_fold_split(4, 4, 1);
  const train::Predictor oracle_model = [](const EpisodeBatch& b) { return b.query_gt.to(torch::kLong); };
  const train::Predictor background = [](const EpisodeBatch& b) { return torch::zeros_like(b.query_gt, torch::kLong); };
  const auto good = train::evaluate(oracle_model, ds, split, data::SplitPart::test, 1, 20, 0);
  EXPECT_EQ(good.mean_miou, 1.0);
  EXPECT_EQ(good.episodes, 20);
  const auto bad = train::evaluate(background, ds, split, data::SplitPart::test, 5, 20, 0);
  EXPECT_EQ(bad.mean_miou, 0.0);
  EXPECT_EQ(bad.per_category_iou.size(), 1u);
  EXPECT_EQ(bad.per_category_iou.begin()->first, 1);
  EXPECT_THROW(train::evaluate(oracle_model, ds, data::FoldSplit{}, data::SplitPart::test, 1, 4, 0), SamplingError);
}

TEST(Evaluate, DeterministicForFixedSeed) {
  const auto cfg = smoke();
  const auto ds = train::load_dataset(cfg);
  auto model = build_model(cfg, ds.category_names);
  const auto a = train::evaluate(model, cfg, ds, 0, 1, 24, 5);
  const auto b = train::evaluate(model, cfg, ds, 0, 1, 24, 5);
  EXPECT_EQ(a.mean_miou, b.mean_miou);
  EXPECT_EQ(a.per_category_iou, b.per_category_iou);
  EXPECT_EQ(a.learnable_parameters, count_learnable_parameters(*model));
  EXPECT_EQ(a.config_hash, config_hash(cfg));
}

TEST(Evaluate, CombinedMeanIsMeanOfFolds) {
  std::vector<train::EvalReport> parts(4);
  const double vals[4] = {0.1, 0.37, 0.52, 0.9};
  for (int f = 0; f < 4; ++f) {
    parts[static_cast<std::size_t>(f)].folds = {f};
    parts[static_cast<std::size_t>(f)].fold_miou = {vals[f]};
    parts[static_cast<std::size_t>(f)].episodes = 10;
  }
  const auto r = train::combine_reports(parts);
  EXPECT_NEAR(r.mean_miou, (0.1 + 0.37 + 0.52 + 0.9) / 4, 1e-12);
  EXPECT_EQ(r.episodes, 40);
  const auto dir = scratch("report");
  train::write_report_csv(r, (dir / "report.csv").string());
  std::ifstream in(dir / "report.csv");
  std::string line;
  std::getline(in, line);
  double sum = 0, mean = -1;
  int rows = 0;
  while (std::getline(in, line)) {
    std::stringstream ss(line);
    std::string fold, miou;
    std::getline(ss, fold, ',');
    std::getline(ss, miou, ',');
    if (fold == "mean")
      mean = std::stod(miou);
    else
      sum += std::stod(miou), ++rows;
  }
  EXPECT_EQ(rows, 4);
  EXPECT_NEAR(mean, sum / rows, 1e-9);
  fs::remove_all(dir);
}

TEST(Parameters, HeadOnlyMatchesHandCount) {
  auto cfg = smoke();
  cfg.modules = {false, false, false};
  cfg.layers.query = cfg.layers.support;
  const auto ds = data::make_synthetic_dataset(4, 4, 64, 0);
  auto model = build_model(cfg, ds.category_names);
  const std::int64_t in = model->feature_channels(), hidden = cfg.head.hidden;
  EXPECT_EQ(count_learnable_parameters(*model), in * hidden * 9 + hidden + hidden * 2 * 9 + 2);
}

TEST(Parameters, FreezingAndTogglesAreAdditive) {
  const auto cfg = smoke();
  const auto ds = data::make_synthetic_dataset(4, 4, 64, 0);
  auto model = build_model(cfg, ds.category_names);
  const auto total = count_learnable_parameters(*model);
  std::int64_t sum = 0;
  for (const auto& item : model->named_children()) sum += numel_of(*item.value());
  EXPECT_EQ(total, sum);
  auto no_hc = cfg;
  no_hc.modules.hc = false;
  auto smaller = build_model(no_hc, ds.category_names);
  EXPECT_LT(count_learnable_parameters(*smaller), total);
  const auto names = model->submodule_names();
  std::int64_t running = total;
  for (const auto& name : names) {
    std::int64_t size = 0;
    for (const auto& item : model->named_children())
      if (item.key() == name) size = numel_of(*item.value());
    model->freeze(name);
    EXPECT_EQ(count_learnable_parameters(*model), running - size) << name;
    running -= size;
  }
  EXPECT_EQ(running, 0);
  EXPECT_THROW(model->freeze("backbone"), ConfigError);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  const auto cfg = smoke();
  const auto ds = data::make_synthetic_dataset(4, 4, 64, 0);
  auto a = build_model(cfg, ds.category_names);
  {
    torch::NoGradGuard g;
    for (auto& p : a->parameters()) p.add_(torch::randn_like(p));
  }
  const auto dir = scratch("ckpt");
  const auto path = (dir / "c.bin").string();
  save_checkpoint(*a, cfg, path, {{"note", "x"}});
  auto cfg_b = cfg;
  cfg_b.train.seed = 99;  // different init, same layout
  auto b = build_model(cfg_b, ds.category_names);
  const auto info = load_checkpoint(*b, cfg_b, path);
  EXPECT_EQ(info.model_hash, model_hash(cfg));
  EXPECT_EQ(info.header["extra"]["note"], "x");
  const auto pa = a->named_parameters(), pb = b->named_parameters();
  for (const auto& p : pa) EXPECT_TRUE(torch::equal(p.value(), pb[p.key()])) << p.key();
  for (const auto& buf : a->named_buffers()) EXPECT_TRUE(torch::equal(buf.value(), b->named_buffers()[buf.key()]));

  auto other = cfg;
  other.ha.channels = 8;
  auto c = build_model(other, ds.category_names);
  try {
    load_checkpoint(*c, other, path);
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("hash"), std::string::npos);
  }
  fs::resize_file(path, fs::file_size(path) - 10);
  EXPECT_THROW(load_checkpoint(*b, cfg, path), LoadError);
  EXPECT_THROW(load_checkpoint(*b, cfg, (dir / "missing.bin").string()), LoadError);
  fs::remove_all(dir);
}

TEST(Train, SmokeRunLearnsAndIsDeterministic) {
  torch::set_num_threads(1);
  const auto cfg = smoke();
  const auto ds = train::load_dataset(cfg);
  const auto dir = scratch("train");
  auto m1 = build_model(cfg, ds.category_names);
  const auto r1 = train::train(cfg, ds, m1, {dir.string(), nullptr});
  ASSERT_EQ(r1.history.size(), 2u);
  EXPECT_LT(r1.history[1].train_loss, r1.history[0].train_loss);
  EXPECT_TRUE(fs::exists(dir / "metrics.csv"));
  EXPECT_TRUE(fs::exists(dir / "checkpoint.bin"));
  EXPECT_FALSE(m1->is_training());

  auto m2 = build_model(cfg, ds.category_names);
  const auto r2 = train::train(cfg, ds, m2, {});
  EXPECT_NEAR(r2.history.back().train_loss, r1.history.back().train_loss, 1e-6);

  // the best epoch is what the model holds and what the checkpoint stores
  auto m3 = build_model(cfg, ds.category_names);
  load_checkpoint(*m3, cfg, r1.checkpoint_path);
  const auto e1 = train::evaluate(m1, cfg, ds, 0, 1, 16, 0);
  const auto e3 = train::evaluate(m3, cfg, ds, 0, 1, 16, 0);
  EXPECT_EQ(e1.mean_miou, e3.mean_miou);
  fs::remove_all(dir);
}

TEST(Train, NonFiniteLossAbortsWithDiagnostic) {
  auto cfg = smoke();
  cfg.train.learning_rate = 1e30;
  cfg.train.weight_decay = 0;
  cfg.train.epochs = 3;
  const auto ds = train::load_dataset(cfg);
  auto model = build_model(cfg, ds.category_names);
  const auto dir = scratch("nan");
  try {
    train::train(cfg, ds, model, {dir.string(), nullptr});
    FAIL() << "expected TrainingError";
  } catch (const TrainingError& e) {
    EXPECT_NE(std::string(e.what()).find("fold=0"), std::string::npos);
  }
  std::ifstream in(dir / "diagnostic.json");
  ASSERT_TRUE(in.good());
  const auto j = nlohmann::json::parse(in);
  EXPECT_FALSE(j["episodes"].empty());
  fs::remove_all(dir);
}

TEST(Ablation, PresetsMatchTables) {
  const auto base = smoke();
  const auto layers = ablation::preset("layers", base);
  ASSERT_EQ(layers.size(), 4u);
  EXPECT_EQ(layers[0].cfg.layers.support.size(), 13u);
  EXPECT_EQ(layers[1].cfg.layers.support, (std::vector<int>{0, 4, 10}));
  EXPECT_EQ(layers[2].cfg.layers.support, (std::vector<int>{3, 9, 12}));
  EXPECT_EQ(layers[2].cfg.layers.query, (std::vector<int>{0, 4, 10}));
  EXPECT_EQ(ablation::preset("modules", base).size(), 5u);
  const auto loss = ablation::preset("loss", base);
  EXPECT_EQ(loss.size(), 7u);
  EXPECT_TRUE(std::any_of(loss.begin(), loss.end(),
                          [](const auto& p) { return p.cfg.loss.alpha == 1.4 && p.cfg.loss.beta == 0.6; }));
  EXPECT_THROW(ablation::preset("nope", base), ConfigError);
}

TEST(Ablation, RunsGridAndSkipsInvalidPoints) {
  auto base = smoke();
  base.eval.episodes = 4;
  const auto ds = train::load_dataset(base);
  auto grid = ablation::preset("layers", base);
  auto broken = grid[1];
  broken.label = "broken";
  broken.cfg.ha.channels = 0;
  grid.push_back(broken);
  std::ostringstream log;
  const auto rows = ablation::run(grid, ds, {false, &log});
  ASSERT_EQ(rows.size(), 5u);
  int ok = 0;
  for (const auto& r : rows) ok += r.report.has_value();
  EXPECT_EQ(ok, 4);
  EXPECT_FALSE(rows.back().report.has_value());
  EXPECT_FALSE(rows.back().skipped_reason.empty());
  EXPECT_NE(log.str().find("broken"), std::string::npos);
  const auto dir = scratch("abl");
  ablation::write_csv(rows, (dir / "ablation.csv").string());
  std::ifstream in(dir / "ablation.csv");
  int lines = 0;
  for (std::string l; std::getline(in, l);) ++lines;
  EXPECT_EQ(lines, 6);
  fs::remove_all(dir);
}

TEST(RunDir, LockAndManifest) {
  const auto root = scratch("runs");
  {
    run::RunDir rd(root.string(), "train", "abc", "r1");
    rd.manifest()["seed"] = 3;
    rd.write_manifest();
    EXPECT_THROW(run::RunDir(root.string(), "train", "abc", "r1"), std::runtime_error);
    std::ifstream in(rd.file("manifest"));
    const auto j = nlohmann::json::parse(in);
    EXPECT_EQ(j["seed"], 3);
    EXPECT_EQ(j["command"], "train");
  }
  EXPECT_NO_THROW(run::RunDir(root.string(), "eval", "abc", "r1"));
  int manifests = 0;
  for (const auto& e : fs::directory_iterator(root / "r1")) manifests += e.path().filename() == "manifest";
  EXPECT_EQ(manifests, 1);
  fs::remove_all(root);
}
