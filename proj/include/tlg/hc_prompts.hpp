#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace tlg::hc {

struct PromptRecord {
  int category_id = 0;
  std::string category_name;
  std::string fine_grained_prompt;
  std::array<std::string, 2> background_prompts;
};

// One record per dataset category, indexed by dataset category id.
class PromptBank {
 public:
  // Raw CSV: category_id, category_name, fine_grained_prompt, bg1, bg2 (header optional).
  static PromptBank load(const std::string& path);

  const PromptRecord& at(int category_id) const;
  const std::vector<PromptRecord>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }
  void save(const std::string& path) const;

  std::vector<std::string> fine_grained_prompts() const;
  std::vector<std::string> foreground_prompts() const;  // category names
  std::vector<std::string> background_prompts(int which) const;

 private:
  friend PromptBank build_prompt_bank(const std::vector<std::string>&, const std::string&);
  std::vector<PromptRecord> records_;
};

// Matches bank records to dataset categories by name (case-insensitive) and re-indexes them by
// dataset id. DataError names the first uncovered category; an empty fine-grained prompt becomes
// "a photo of a <category>".
PromptBank build_prompt_bank(const std::vector<std::string>& category_names, const std::string& bank_file);

struct TextEmbedding {
  enum class Source { stub, external };
  torch::Tensor rows;  // (count, d_text), unit rows
  Source source = Source::stub;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual int dim() const = 0;
  virtual TextEmbedding encode(const std::vector<std::string>& prompts) const = 0;
};

// Deterministic stand-in: lowercase word unigrams and bigrams hashed into d_text buckets,
// then L2-normalized. Equal prompts give equal rows; sharing words raises cosine similarity.
class HashingTextEncoder final : public TextEncoder {
 public:
  explicit HashingTextEncoder(int d_text = 64);
  int dim() const override { return d_text_; }
  TextEmbedding encode(const std::vector<std::string>& prompts) const override;

 private:
  int d_text_;
};

// Wraps a user-supplied encoder (e.g. a CLIP text tower) behind the same interface.
class ExternalTextEncoder final : public TextEncoder {
 public:
  using Fn = std::function<torch::Tensor(const std::vector<std::string>&)>;
  ExternalTextEncoder(int d_text, Fn fn) : d_text_(d_text), fn_(std::move(fn)) {}
  int dim() const override { return d_text_; }
  TextEmbedding encode(const std::vector<std::string>& prompts) const override;

 private:
  int d_text_;
  Fn fn_;
};

struct MatchResult {
  int category = 0;
  torch::Tensor foreground;  // (d)
  std::array<torch::Tensor, 2> backgrounds;
};

// Picks the foreground row with maximal cosine similarity to `summary`; ties go to the lowest id.
// `bg_embeddings` is (C, 2, d) holding each category's two bank-linked backgrounds.
MatchResult max_match(const torch::Tensor& summary, const torch::Tensor& fg_embeddings,
                      const torch::Tensor& bg_embeddings);

// Bottleneck fusion of a visual map with a tiled text condition:
// out = rho * up(relu(down([visual; text]))) + (1 - rho) * visual.
class AdapterImpl : public torch::nn::Module {
 public:
  AdapterImpl(int visual_channels, int cond_width, int bottleneck_ratio, double rho_init);

  // visual (B, D, H, W); condition (B, cond_width)
  torch::Tensor forward(const torch::Tensor& visual, const torch::Tensor& condition);
  torch::Tensor bottleneck(const torch::Tensor& visual, const torch::Tensor& condition);

  int cond_width() const { return cond_width_; }
  torch::Tensor& rho() { return rho_; }

 private:
  int cond_width_;
  torch::nn::Conv2d down_{nullptr};
  torch::nn::Conv2d up_{nullptr};
  torch::Tensor rho_;
};
TORCH_MODULE(Adapter);

}  // namespace tlg::hc
