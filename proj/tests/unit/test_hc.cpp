#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "tlg/config.hpp"
#include "tlg/errors.hpp"
#include "tlg/hc_prompts.hpp"
#include "util.hpp"

using namespace tlg;
using namespace tlg::hc;

namespace {

double cosine(const torch::Tensor& a, const torch::Tensor& b) {
  return (a.to(torch::kFloat64) * b.to(torch::kFloat64)).sum().item<double>() /
         (a.to(torch::kFloat64).norm().item<double>() * b.to(torch::kFloat64).norm().item<double>());
}

std::string temp_file(const std::string& name, const std::string& body) {
  const auto p = (std::filesystem::temp_directory_path() / name).string();
  std::ofstream(p) << body;
  return p;
}

}  // namespace

TEST(PromptBank, PascalRecords) {
  std::vector<std::string> names = {"aeroplane", "bicycle", "bird"};
  const auto bank = build_prompt_bank(names, "prompts/pascal.csv");
  ASSERT_EQ(bank.size(), 3u);
  EXPECT_EQ(bank.at(0).fine_grained_prompt, "aeroplane with wings");
  const auto& bird = bank.at(2);
  EXPECT_EQ(bird.category_id, 2);
  const std::set<std::string> bgs(bird.background_prompts.begin(), bird.background_prompts.end());
  EXPECT_EQ(bgs, (std::set<std::string>{"tree", "sky"}));
}

TEST(PromptBank, ReindexesByDatasetOrderCaseInsensitively) {
  const auto bank = build_prompt_bank({"BIRD", "Aeroplane"}, "prompts/pascal.csv");
  EXPECT_EQ(bank.at(0).category_name, "bird");
  EXPECT_EQ(bank.at(1).category_id, 1);
  EXPECT_THROW(bank.at(2), DataError);
}

TEST(PromptBank, ShippedBanksAreComplete) {
  for (const auto& [file, count] : std::vector<std::pair<std::string, std::size_t>>{
           {"prompts/pascal.csv", 20}, {"prompts/coco.csv", 80}, {"prompts/synthetic.csv", 8}}) {
    const auto raw = PromptBank::load(resolve_data_path(file));
    ASSERT_EQ(raw.size(), count) << file;
    std::vector<std::string> names;
    for (const auto& r : raw.records()) names.push_back(r.category_name);
    const auto bank = build_prompt_bank(names, file);
    for (const auto& r : bank.records()) {
      EXPECT_FALSE(r.fine_grained_prompt.empty());
      EXPECT_FALSE(r.background_prompts[0].empty());
      EXPECT_NE(r.background_prompts[0], r.background_prompts[1]);
    }
  }
}

TEST(PromptBank, FallbackUncoveredAndDuplicateBackgrounds) {
  const auto p = temp_file("tlg_bank.csv",
                           "category_id,category_name,fine_grained_prompt,bg1,bg2\n"
                           "0,disk,,grass,\"sky, cloudy\"\n"
                           "1,bar,a bar,wall,wall\n");
  const auto bank = build_prompt_bank({"disk"}, p);
  EXPECT_EQ(bank.at(0).fine_grained_prompt, "a photo of a disk");
  EXPECT_EQ(bank.at(0).background_prompts[1], "sky, cloudy");
  try {
    build_prompt_bank({"disk", "ring"}, p);
    FAIL();
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("ring"), std::string::npos);
  }
  EXPECT_THROW(build_prompt_bank({"bar"}, p), DataError);
  EXPECT_THROW(PromptBank::load(p + ".nope"), LoadError);
  std::filesystem::remove(p);
}

TEST(PromptBank, RoundTripsThroughFile) {
  const auto bank = build_prompt_bank({"disk", "ring"}, "prompts/synthetic.csv");
  const auto p = (std::filesystem::temp_directory_path() / "tlg_bank_rt.csv").string();
  bank.save(p);
  const auto back = PromptBank::load(p);
  ASSERT_EQ(back.size(), 2u);
  for (int i = 0; i < 2; ++i) {
    EXPECT_EQ(back.at(i).category_name, bank.at(i).category_name);
    EXPECT_EQ(back.at(i).fine_grained_prompt, bank.at(i).fine_grained_prompt);
    EXPECT_EQ(back.at(i).background_prompts, bank.at(i).background_prompts);
  }
  std::filesystem::remove(p);
}

TEST(TextEncoder, StubProperties) {
  const HashingTextEncoder enc(64);
  const auto e = enc.encode({"bird", "bird", "bird with feathers", "bus", "a photo of a cat"});
  EXPECT_EQ(e.source, TextEmbedding::Source::stub);
  EXPECT_EQ(e.rows.sizes(), (std::vector<int64_t>{5, 64}));
  EXPECT_LT((e.rows.norm(2, 1) - 1).abs().max().item<double>(), 1e-6);
  EXPECT_TRUE(torch::equal(e.rows[0], e.rows[1]));
  EXPECT_GT(cosine(e.rows[0], e.rows[2]), cosine(e.rows[0], e.rows[3]));
  EXPECT_FALSE(torch::equal(e.rows[3], e.rows[4]));
  EXPECT_TRUE(torch::equal(HashingTextEncoder(64).encode({"bird"}).rows[0], e.rows[0]));
  EXPECT_THROW(enc.encode({}), DataError);
  EXPECT_THROW(enc.encode({"ok", "  "}), DataError);
}

TEST(TextEncoder, ExternalCallbackIsNormalized) {
  ExternalTextEncoder enc(3, [](const std::vector<std::string>& p) {
    return torch::full({static_cast<long>(p.size()), 3}, 2.0);
  });
  const auto e = enc.encode({"x", "y"});
  EXPECT_EQ(e.source, TextEmbedding::Source::external);
  EXPECT_LT((e.rows.norm(2, 1) - 1).abs().max().item<double>(), 1e-6);
  ExternalTextEncoder bad(3, [](const std::vector<std::string>&) { return torch::ones({1, 4}); });
  EXPECT_ANY_THROW(bad.encode({"x"}));
}

TEST(MaxMatch, SelfMatchTieBreakAndOracle) {
  torch::manual_seed(3);
  const auto fg = torch::nn::functional::normalize(torch::randn({6, 8}), torch::nn::functional::NormalizeFuncOptions().dim(1));
  const auto bg = torch::randn({6, 2, 8});
  for (int c = 0; c < 6; ++c) {
    const auto m = max_match(fg[c], fg, bg);
    EXPECT_EQ(m.category, c);
    EXPECT_TRUE(torch::equal(m.backgrounds[1], bg[c][1]));
  }
  EXPECT_EQ(max_match(torch::zeros({8}), fg, bg).category, 0);
  // orthogonal to every row
  auto axes = torch::eye(8).slice(0, 1, 4);
  EXPECT_EQ(max_match(torch::eye(8)[0], axes, torch::zeros({3, 2, 8})).category, 0);
  for (int t = 0; t < 200; ++t) {
    const auto s = torch::randn({8});
    int best = 0;
    double best_v = -2;
    for (int c = 0; c < 6; ++c) {
      const double v = cosine(s, fg[c]);
      if (v > best_v) best_v = v, best = c;
    }
    EXPECT_EQ(max_match(s, fg, bg).category, best);
    EXPECT_EQ(max_match(s * 37.5, fg, bg).category, best);
  }
}

TEST(Adapter, RhoExtremesAndShapes) {
  torch::manual_seed(0);
  Adapter a(16, 8, 4, 0.2);
  const auto v = torch::randn({2, 16, 5, 5}), t = torch::randn({2, 8});
  EXPECT_EQ(a->forward(v, t).sizes(), v.sizes());
  {
    torch::NoGradGuard ng;
    a->rho().fill_(0.0);
  }
  EXPECT_TRUE(torch::equal(a->forward(v, t), v));
  {
    torch::NoGradGuard ng;
    a->rho().fill_(1.0);
  }
  EXPECT_LT(max_abs_diff(a->forward(v, torch::zeros({2, 8})), a->bottleneck(v, torch::zeros({2, 8}))), 1e-6);
  EXPECT_THROW(a->forward(v, torch::randn({2, 7})), ShapeError);
  auto huge = torch::full({1, 16, 3, 3}, 1e6);
  EXPECT_TRUE(torch::isfinite(a->forward(huge, torch::randn({1, 8}))).all().item<bool>());
}

TEST(Adapter, SupportAndQueryAreStructurallyDifferent) {
  const int d_text = 12;
  Adapter support(16, d_text, 4, 0.2), query(16, 2 * d_text, 4, 0.2);
  EXPECT_EQ(support->cond_width(), d_text);
  EXPECT_EQ(query->cond_width(), 2 * d_text);
  const auto v = torch::randn({1, 16, 4, 4}), t = torch::randn({1, d_text});
  const auto so = support->forward(v, t);
  const auto qo = query->forward(v, torch::cat({t, t}, 1));
  EXPECT_GT((so - qo).norm().item<double>(), 0.0);
  EXPECT_FALSE(so.sizes() != qo.sizes());
  EXPECT_NEAR(support->rho().item<double>(), 0.2, 1e-7);
}
