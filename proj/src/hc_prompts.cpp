#include "tlg/hc_prompts.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>

#include "tlg/config.hpp"
#include "tlg/errors.hpp"

namespace tlg::hc {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  std::string out = s.substr(b, e - b + 1);
  if (out.size() >= 2 && out.front() == '"' && out.back() == '"') out = out.substr(1, out.size() - 2);
  return out;
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

// Splits on commas outside double quotes.
std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cols;
  std::string cur;
  bool quoted = false;
  for (char ch : line) {
    if (ch == '"') quoted = !quoted;
    if (ch == ',' && !quoted) {
      cols.push_back(trim(cur));
      cur.clear();
    } else {
      cur.push_back(ch);
    }
  }
  cols.push_back(trim(cur));
  return cols;
}

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char ch : text) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
    } else if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  }
  if (!cur.empty()) tokens.push_back(cur);
  return tokens;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---------------- prompt bank ----------------

PromptBank PromptBank::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot open prompt bank '" + path + "'");
  PromptBank bank;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty() || trim(line)[0] == '#') continue;
    auto cols = split_csv(line);
    if (lineno == 1 && lower(cols[0]) == "category_id") continue;
    if (cols.size() != 5)
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 5 columns, found " + std::to_string(cols.size()));
    PromptRecord r;
    try {
      r.category_id = std::stoi(cols[0]);
    } catch (const std::exception&) {
      throw DataError(path + ":" + std::to_string(lineno) + ": bad category_id '" + cols[0] + "'");
    }
    r.category_name = cols[1];
    r.fine_grained_prompt = cols[2];
    r.background_prompts = {cols[3], cols[4]};
    if (r.category_name.empty()) throw DataError(path + ":" + std::to_string(lineno) + ": empty category name");
    bank.records_.push_back(std::move(r));
  }
  return bank;
}

const PromptRecord& PromptBank::at(int category_id) const {
  if (category_id < 0 || static_cast<std::size_t>(category_id) >= records_.size())
    throw DataError("prompt bank has no record for category id " + std::to_string(category_id));
  return records_[static_cast<std::size_t>(category_id)];
}

void PromptBank::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw LoadError("cannot write prompt bank '" + path + "'");
  out << "category_id,category_name,fine_grained_prompt,bg1,bg2\n";
  for (const auto& r : records_)
    out << r.category_id << "," << r.category_name << "," << r.fine_grained_prompt << ","
        << r.background_prompts[0] << "," << r.background_prompts[1] << "\n";
}

std::vector<std::string> PromptBank::fine_grained_prompts() const {
  std::vector<std::string> out;
  for (const auto& r : records_) out.push_back(r.fine_grained_prompt);
  return out;
}

std::vector<std::string> PromptBank::foreground_prompts() const {
  std::vector<std::string> out;
  for (const auto& r : records_) out.push_back(r.category_name);
  return out;
}

std::vector<std::string> PromptBank::background_prompts(int which) const {
  std::vector<std::string> out;
  for (const auto& r : records_) out.push_back(r.background_prompts[static_cast<std::size_t>(which)]);
  return out;
}

PromptBank build_prompt_bank(const std::vector<std::string>& category_names, const std::string& bank_file) {
  const auto raw = PromptBank::load(resolve_data_path(bank_file));
  PromptBank bank;
  for (std::size_t id = 0; id < category_names.size(); ++id) {
    const auto want = lower(category_names[id]);
    const auto it = std::find_if(raw.records_.begin(), raw.records_.end(),
                                 [&](const PromptRecord& r) { return lower(r.category_name) == want; });
    if (it == raw.records_.end())
      throw DataError("prompt bank '" + bank_file + "' has no record for category '" + category_names[id] + "'");
    PromptRecord r = *it;
    r.category_id = static_cast<int>(id);
    if (r.fine_grained_prompt.empty()) r.fine_grained_prompt = "a photo of a " + r.category_name;
    if (r.background_prompts[0].empty() || r.background_prompts[1].empty())
      throw DataError("category '" + r.category_name + "' needs two non-empty background prompts");
    if (lower(r.background_prompts[0]) == lower(r.background_prompts[1]))
      throw DataError("category '" + r.category_name + "' repeats background prompt '" + r.background_prompts[0] + "'");
    bank.records_.push_back(std::move(r));
  }
  return bank;
}

// ---------------- text encoders ----------------

HashingTextEncoder::HashingTextEncoder(int d_text) : d_text_(d_text) {
  if (d_text < 1) throw ConfigError("'hc.d_text' must be positive");
}

TextEmbedding HashingTextEncoder::encode(const std::vector<std::string>& prompts) const {
  if (prompts.empty()) throw DataError("encode_text: empty prompt list");
  auto rows = torch::zeros({static_cast<std::int64_t>(prompts.size()), d_text_}, torch::kFloat64);
  auto acc = rows.accessor<double, 2>();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto tokens = tokenize(prompts[i]);
    if (tokens.empty()) throw DataError("encode_text: prompt " + std::to_string(i) + " is empty");
    for (std::size_t t = 0; t < tokens.size(); ++t) {
      acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(fnv1a("u:" + tokens[t]) % static_cast<std::uint64_t>(d_text_))] += 1.0;
      if (t + 1 < tokens.size())
        acc[static_cast<std::int64_t>(i)][static_cast<std::int64_t>(fnv1a("b:" + tokens[t] + " " + tokens[t + 1]) %
                                                                   static_cast<std::uint64_t>(d_text_))] += 0.5;
    }
  }
  rows = rows / rows.norm(2, 1, true);
  return {rows.to(torch::kFloat32), TextEmbedding::Source::stub};
}

TextEmbedding ExternalTextEncoder::encode(const std::vector<std::string>& prompts) const {
  if (prompts.empty()) throw DataError("encode_text: empty prompt list");
  if (!fn_) throw ConfigError("external text encoder has no callback attached");
  auto rows = fn_(prompts).to(torch::kFloat32);
  check_shape(rows.dim() == 2 && rows.size(0) == static_cast<std::int64_t>(prompts.size()) && rows.size(1) == d_text_,
              "external text encoder returned the wrong shape");
  return {rows / rows.norm(2, 1, true).clamp_min(1e-12), TextEmbedding::Source::external};
}

// ---------------- matching ----------------

MatchResult max_match(const torch::Tensor& summary, const torch::Tensor& fg, const torch::Tensor& bg) {
  check_shape(summary.dim() == 1 && fg.dim() == 2 && fg.size(1) == summary.size(0) && fg.size(0) >= 1,
              "max_match: summary (d) and foreground rows (C, d) required");
  check_shape(bg.dim() == 3 && bg.size(0) == fg.size(0) && bg.size(1) == 2 && bg.size(2) == fg.size(1),
              "max_match: background embeddings must be (C, 2, d)");
  const auto s = summary.to(torch::kFloat64);
  const double sn = s.norm().item<double>();
  const auto f = fg.to(torch::kFloat64);
  const auto fn = f.norm(2, 1).clamp_min(1e-300);
  const auto scores = sn > 0.0 ? torch::mv(f, s) / (fn * sn) : torch::zeros({fg.size(0)}, torch::kFloat64);
  auto acc = scores.accessor<double, 1>();
  int best = 0;
  for (int c = 1; c < fg.size(0); ++c)
    if (acc[c] > acc[best]) best = c;
  return {best, fg[best], {bg[best][0], bg[best][1]}};
}

// ---------------- adapter ----------------

AdapterImpl::AdapterImpl(int visual_channels, int cond_width, int bottleneck_ratio, double rho_init)
    : cond_width_(cond_width) {
  const int hidden = std::max(1, visual_channels / std::max(1, bottleneck_ratio));
  down_ = register_module("down", torch::nn::Conv2d(torch::nn::Conv2dOptions(visual_channels + cond_width, hidden, 1)));
  up_ = register_module("up", torch::nn::Conv2d(torch::nn::Conv2dOptions(hidden, visual_channels, 1)));
  rho_ = register_parameter("rho", torch::full({1}, rho_init));
}

torch::Tensor AdapterImpl::bottleneck(const torch::Tensor& visual, const torch::Tensor& condition) {
  check_shape(visual.dim() == 4 && condition.dim() == 2 && condition.size(0) == visual.size(0) &&
                  condition.size(1) == cond_width_,
              "adapter: expected visual (B, D, H, W) and condition (B, cond_width)");
  const auto tiled = condition.to(visual.dtype()).unsqueeze(2).unsqueeze(3).expand(
      {condition.size(0), condition.size(1), visual.size(2), visual.size(3)});
  return up_->forward(torch::relu(down_->forward(torch::cat({visual, tiled}, 1))));
}

torch::Tensor AdapterImpl::forward(const torch::Tensor& visual, const torch::Tensor& condition) {
  return rho_ * bottleneck(visual, condition) + (1.0 - rho_) * visual;
}

}  // namespace tlg::hc
