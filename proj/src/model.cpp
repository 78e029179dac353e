#include "tlg/model.hpp"

#include <set>

#include "tlg/errors.hpp"

namespace tlg {

EpisodeBatch make_batch(const std::vector<data::Episode>& episodes) {
  check_shape(!episodes.empty(), "make_batch: no episodes");
  EpisodeBatch b;
  b.shots = episodes.front().shot_count;
  std::vector<torch::Tensor> si, sm, sg, qi, qm, qg;
  for (const auto& ep : episodes) {
    check_shape(ep.shot_count == b.shots, "make_batch: mixed shot counts");
    for (int k = 0; k < ep.shot_count; ++k) {
      si.push_back(ep.support_images[static_cast<std::size_t>(k)]);
      sm.push_back(ep.support_pseudo_masks[static_cast<std::size_t>(k)]);
      sg.push_back(ep.support_gt_masks[static_cast<std::size_t>(k)]);
    }
    qi.push_back(ep.query_image);
    qm.push_back(ep.query_pseudo_mask);
    qg.push_back(ep.query_gt_mask);
    b.categories.push_back(ep.category_id);
    b.ids.push_back(ep.id);
  }
  b.support_images = torch::stack(si);
  b.support_masks = torch::stack(sm);
  b.support_gt = torch::stack(sg);
  b.query_images = torch::stack(qi);
  b.query_masks = torch::stack(qm);
  b.query_gt = torch::stack(qg);
  return b;
}

TlgModelImpl::TlgModelImpl(const Config& cfg, std::shared_ptr<backbone::FeatureExtractor> extractor,
                           const std::vector<std::string>& category_names,
                           std::shared_ptr<hc::TextEncoder> text_encoder)
    : cfg_(cfg), layers_(backbone::LayerSelection::from_config(cfg.layers)), extractor_(std::move(extractor)),
      encoder_(std::move(text_encoder)), grid_(cfg.grid()) {
  if (!extractor_) throw ConfigError("model needs a feature extractor");
  layers_.validate();

  if (cfg.modules.ha) {
    ha::HaOptions o;
    o.grid = grid_;
    o.channels = cfg.ha.channels;
    o.squeeze_width = cfg.ha.squeeze_width;
    o.init_sigma = cfg.ha.init_sigma;
    o.init_seed = cfg.ha.init_seed;
    o.cross = cfg.ha.corr_mode == "cross";
    o.mask_support = cfg.ha.mask_support;
    ha_ = register_module("ha", ha::HeterogeneousAggregation(*extractor_, layers_, o));
    feature_channels_ = ha_->output_channels();
  } else {
    int cs = 0, cq = 0;
    for (int t : layers_.support) cs += extractor_->spec(t).channels;
    for (int t : layers_.query) cq += extractor_->spec(t).channels;
    if (cs != cq)
      throw ConfigError("with modules.ha off the support and query taps must have equal total channels (" +
                        std::to_string(cs) + " vs " + std::to_string(cq) + ")");
    feature_channels_ = cs;
  }

  if (cfg.modules.ht) {
    ht::HtOptions o;
    o.lambda = cfg.ht.lambda;
    o.tol = cfg.ht.tol;
    o.max_iters = cfg.ht.max_iters;
    o.unrolled_iters = cfg.ht.unrolled_iters;
    o.cost_threshold = cfg.ht.cost_threshold;
    o.pool_window = cfg.ht.pool_window;
    ht_support_ = register_module(
        "ht_support", ht::HeterogeneousTransport(feature_channels_, extractor_->spec(cfg.ht.support_residual_tap).channels,
                                                 ht::PoolKind::average, o));
    ht_query_ = register_module(
        "ht_query", ht::HeterogeneousTransport(feature_channels_, extractor_->spec(cfg.ht.query_residual_tap).channels,
                                               ht::PoolKind::max, o));
  }

  if (cfg.modules.hc) {
    if (!encoder_) {
      if (cfg.hc.encoder == "external")
        throw ConfigError("hc.encoder = external but no text encoder was attached");
      encoder_ = std::make_shared<hc::HashingTextEncoder>(cfg.hc.d_text);
    }
    if (encoder_->dim() != cfg.hc.d_text) throw ConfigError("text encoder width differs from hc.d_text");
    bank_ = hc::build_prompt_bank(category_names, cfg.hc.prompt_bank);
    gain_text_ = encoder_->encode(bank_->fine_grained_prompts()).rows;
    const auto fg = encoder_->encode(bank_->foreground_prompts()).rows;
    auto bg = encoder_->encode(bank_->background_prompts(0)).rows + encoder_->encode(bank_->background_prompts(1)).rows;
    bg = bg / bg.norm(2, 1, true).clamp_min(1e-12);
    query_text_ = torch::cat({fg, bg}, 1);
    register_buffer("gain_text", gain_text_);
    register_buffer("query_text", query_text_);
    adapter_support_ = register_module(
        "adapter_support", hc::Adapter(feature_channels_, cfg.hc.d_text, cfg.hc.bottleneck_ratio, cfg.hc.rho_init));
    adapter_query_ = register_module(
        "adapter_query", hc::Adapter(feature_channels_, 2 * cfg.hc.d_text, cfg.hc.bottleneck_ratio, cfg.hc.rho_init));
  }

  head_ = register_module("head", head::MaskHead(feature_channels_, cfg.head.hidden));
}

torch::Tensor TlgModelImpl::raw_branch(const backbone::FeatureTapSet& taps, const std::vector<int>& layers) const {
  std::vector<torch::Tensor> parts;
  for (int t : layers) parts.push_back(ha::resize_to_grid(taps.at(t), grid_));
  return torch::cat(parts, 1);
}

ModelOutput TlgModelImpl::forward(const EpisodeBatch& batch) {
  const int size = static_cast<int>(batch.query_images.size(3));
  const auto b = batch.size();
  const int k = batch.shots;
  check_shape(batch.support_images.size(0) == b * k, "model: support batch must be episodes x shots");

  std::set<int> s_taps(layers_.support.begin(), layers_.support.end());
  std::set<int> q_taps(layers_.query.begin(), layers_.query.end());
  if (cfg_.modules.ht) {
    s_taps.insert(cfg_.ht.support_residual_tap);
    q_taps.insert(cfg_.ht.query_residual_tap);
  }
  ModelOutput out;
  out.support_taps = extractor_->extract(batch.support_images.to(dtype_), s_taps);
  out.query_taps = extractor_->extract(batch.query_images.to(dtype_), q_taps);

  torch::Tensor fs, fq;
  if (cfg_.modules.ha) {
    out.ha = ha_->forward(out.support_taps, out.query_taps, batch.support_masks.to(dtype_), k);
    fs = out.ha->support;
    fq = out.ha->query;
  } else {
    fs = raw_branch(out.support_taps, layers_.support);
    fq = raw_branch(out.query_taps, layers_.query);
  }

  if (cfg_.modules.ht) {
    out.ht_support = ht_support_->forward(fs, out.support_taps.at(cfg_.ht.support_residual_tap));
    out.ht_query = ht_query_->forward(fq, out.query_taps.at(cfg_.ht.query_residual_tap));
    fs = out.ht_support->output;
    fq = out.ht_query->output;
  }

  if (cfg_.modules.hc) {
    auto cat = torch::tensor(std::vector<std::int64_t>(batch.categories.begin(), batch.categories.end()));
    fs = adapter_support_->forward(fs, gain_text_.index_select(0, cat).repeat_interleave(k, 0));
    fq = adapter_query_->forward(fq, query_text_.index_select(0, cat));
  }

  out.support_feature = fs;
  out.query_feature = fq;
  out.support = head_->forward(fs, size);
  out.query = head_->forward(fq, size);
  return out;
}

void TlgModelImpl::to_dtype(torch::Dtype dtype) {
  to(dtype);
  extractor_->to(dtype);
  if (gain_text_.defined()) {
    gain_text_ = named_buffers(false)["gain_text"];
    query_text_ = named_buffers(false)["query_text"];
  }
  dtype_ = dtype;
}

std::vector<std::string> TlgModelImpl::submodule_names() const {
  std::vector<std::string> out;
  for (const auto& item : named_children()) out.push_back(item.key());
  return out;
}

void TlgModelImpl::freeze(const std::string& name) {
  const auto children = named_children();
  if (!children.contains(name)) throw ConfigError("no submodule named '" + name + "' to freeze");
  for (auto& p : children[name]->parameters()) p.set_requires_grad(false);
}

std::int64_t count_learnable_parameters(const torch::nn::Module& model) {
  std::int64_t n = 0;
  for (const auto& p : model.parameters())
    if (p.requires_grad()) n += p.numel();
  return n;
}

TlgModel build_model(const Config& cfg, const std::vector<std::string>& category_names,
                     std::shared_ptr<backbone::FeatureExtractor> extractor) {
  if (!extractor) extractor = backbone::make_backbone(cfg.backbone);
  torch::manual_seed(cfg.train.seed);
  return TlgModel(cfg, std::move(extractor), category_names);
}

}  // namespace tlg
