#include "tlg/config.hpp"

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "tlg/errors.hpp"

namespace tlg {

using nlohmann::json;

namespace {

int line_of_key(const std::string& text, const std::string& key) {
  if (text.empty()) return 0;
  const auto pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

int line_of_offset(const std::string& text, std::size_t offset) {
  offset = std::min(offset, text.size());
  return 1 + static_cast<int>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(offset), '\n'));
}

void check_known_keys(const json& user, const json& defaults, const std::string& prefix, const std::string& text) {
  if (!user.is_object()) return;
  for (const auto& [key, value] : user.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (!defaults.contains(key)) throw ConfigError("unknown config key '" + path + "'", line_of_key(text, key));
    if (defaults[key].is_object()) {
      if (!value.is_object()) throw ConfigError("'" + path + "' must be an object", line_of_key(text, key));
      check_known_keys(value, defaults[key], path, text);
    }
  }
}

template <typename T>
void read(const json& section, const char* key, T& out, const std::string& sec, const std::string& text) {
  if (!section.contains(key)) return;
  try {
    out = section.at(key).get<T>();
  } catch (const json::exception&) {
    throw ConfigError("'" + sec + "." + key + "' has the wrong type (got " + section.at(key).dump() + ")",
                      line_of_key(text, key));
  }
}

std::vector<int> read_layers(const json& section, const char* key, const std::string& text) {
  const auto& v = section.at(key);
  if (v.is_string() && (v.get<std::string>() == "all" || v.get<std::string>() == "0-12")) {
    std::vector<int> all(13);
    for (int i = 0; i < 13; ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
  }
  try {
    return v.get<std::vector<int>>();
  } catch (const json::exception&) {
    throw ConfigError(std::string("'layers.") + key + "' must be a list of tap indices or \"all\"",
                      line_of_key(text, key));
  }
}

void flatten(const json& j, const std::string& prefix, std::vector<std::string>& out) {
  for (const auto& [key, value] : j.items()) {
    const std::string path = prefix.empty() ? key : prefix + "." + key;
    if (value.is_object())
      flatten(value, path, out);
    else
      out.push_back(path + " = " + value.dump());
  }
}

}  // namespace

json to_json(const Config& c) {
  json j;
  j["data"] = {{"kind", c.data.kind},
               {"root", c.data.root},
               {"n_categories", c.data.n_categories},
               {"exemplars_per_category", c.data.exemplars_per_category},
               {"image_size", c.data.image_size},
               {"seed", c.data.seed},
               {"n_folds", c.data.n_folds},
               {"folds", c.data.folds}};
  j["backbone"] = {{"kind", c.backbone.kind}, {"seed", c.backbone.seed}, {"width_multiplier", c.backbone.width_multiplier}};
  j["layers"] = {{"support", c.layers.support}, {"query", c.layers.query}};
  j["modules"] = {{"ha", c.modules.ha}, {"ht", c.modules.ht}, {"hc", c.modules.hc}};
  j["ha"] = {{"channels", c.ha.channels},         {"init_sigma", c.ha.init_sigma},
             {"squeeze_width", c.ha.squeeze_width}, {"corr_mode", c.ha.corr_mode},
             {"grid", c.ha.grid},                 {"init_seed", c.ha.init_seed},
             {"mask_support", c.ha.mask_support}};
  j["ht"] = {{"lambda", c.ht.lambda},
             {"tol", c.ht.tol},
             {"max_iters", c.ht.max_iters},
             {"unrolled_iters", c.ht.unrolled_iters},
             {"cost_threshold", c.ht.cost_threshold},
             {"support_residual_tap", c.ht.support_residual_tap},
             {"query_residual_tap", c.ht.query_residual_tap},
             {"pool_window", c.ht.pool_window}};
  j["hc"] = {{"prompt_bank", c.hc.prompt_bank},
             {"d_text", c.hc.d_text},
             {"bottleneck_ratio", c.hc.bottleneck_ratio},
             {"rho_init", c.hc.rho_init},
             {"encoder", c.hc.encoder}};
  j["head"] = {{"hidden", c.head.hidden}};
  j["loss"] = {{"alpha", c.loss.alpha}, {"beta", c.loss.beta}, {"binarize_targets", c.loss.binarize_targets}};
  j["train"] = {{"epochs", c.train.epochs},
                {"batch_size", c.train.batch_size},
                {"learning_rate", c.train.learning_rate},
                {"weight_decay", c.train.weight_decay},
                {"seed", c.train.seed},
                {"episodes_per_epoch", c.train.episodes_per_epoch},
                {"val_episodes", c.train.val_episodes},
                {"shots", c.train.shots},
                {"fold", c.train.fold}};
  j["eval"] = {{"episodes", c.eval.episodes}, {"seed", c.eval.seed}, {"shots", c.eval.shots}, {"folds", c.eval.folds}};
  return j;
}

Config config_from_json(const json& user, const std::string& text) {
  const json defaults = to_json(Config{});
  if (!user.is_object()) throw ConfigError("config root must be a JSON object");
  check_known_keys(user, defaults, "", text);
  json j = defaults;
  for (const auto& [section, body] : user.items())
    for (const auto& [key, value] : body.items()) j[section][key] = value;

  Config c;
  const auto& d = j["data"];
  read(d, "kind", c.data.kind, "data", text);
  read(d, "root", c.data.root, "data", text);
  read(d, "n_categories", c.data.n_categories, "data", text);
  read(d, "exemplars_per_category", c.data.exemplars_per_category, "data", text);
  read(d, "image_size", c.data.image_size, "data", text);
  read(d, "seed", c.data.seed, "data", text);
  read(d, "n_folds", c.data.n_folds, "data", text);
  read(d, "folds", c.data.folds, "data", text);
  const auto& b = j["backbone"];
  read(b, "kind", c.backbone.kind, "backbone", text);
  read(b, "seed", c.backbone.seed, "backbone", text);
  read(b, "width_multiplier", c.backbone.width_multiplier, "backbone", text);
  c.layers.support = read_layers(j["layers"], "support", text);
  c.layers.query = read_layers(j["layers"], "query", text);
  const auto& m = j["modules"];
  read(m, "ha", c.modules.ha, "modules", text);
  read(m, "ht", c.modules.ht, "modules", text);
  read(m, "hc", c.modules.hc, "modules", text);
  const auto& ha = j["ha"];
  read(ha, "channels", c.ha.channels, "ha", text);
  read(ha, "init_sigma", c.ha.init_sigma, "ha", text);
  read(ha, "squeeze_width", c.ha.squeeze_width, "ha", text);
  read(ha, "corr_mode", c.ha.corr_mode, "ha", text);
  read(ha, "grid", c.ha.grid, "ha", text);
  read(ha, "init_seed", c.ha.init_seed, "ha", text);
  read(ha, "mask_support", c.ha.mask_support, "ha", text);
  const auto& ht = j["ht"];
  read(ht, "lambda", c.ht.lambda, "ht", text);
  read(ht, "tol", c.ht.tol, "ht", text);
  read(ht, "max_iters", c.ht.max_iters, "ht", text);
  read(ht, "unrolled_iters", c.ht.unrolled_iters, "ht", text);
  read(ht, "cost_threshold", c.ht.cost_threshold, "ht", text);
  read(ht, "support_residual_tap", c.ht.support_residual_tap, "ht", text);
  read(ht, "query_residual_tap", c.ht.query_residual_tap, "ht", text);
  read(ht, "pool_window", c.ht.pool_window, "ht", text);
  const auto& hc = j["hc"];
  read(hc, "prompt_bank", c.hc.prompt_bank, "hc", text);
  read(hc, "d_text", c.hc.d_text, "hc", text);
  read(hc, "bottleneck_ratio", c.hc.bottleneck_ratio, "hc", text);
  read(hc, "rho_init", c.hc.rho_init, "hc", text);
  read(hc, "encoder", c.hc.encoder, "hc", text);
  read(j["head"], "hidden", c.head.hidden, "head", text);
  const auto& l = j["loss"];
  read(l, "alpha", c.loss.alpha, "loss", text);
  read(l, "beta", c.loss.beta, "loss", text);
  read(l, "binarize_targets", c.loss.binarize_targets, "loss", text);
  const auto& t = j["train"];
  read(t, "epochs", c.train.epochs, "train", text);
  read(t, "batch_size", c.train.batch_size, "train", text);
  read(t, "learning_rate", c.train.learning_rate, "train", text);
  read(t, "weight_decay", c.train.weight_decay, "train", text);
  read(t, "seed", c.train.seed, "train", text);
  read(t, "episodes_per_epoch", c.train.episodes_per_epoch, "train", text);
  read(t, "val_episodes", c.train.val_episodes, "train", text);
  read(t, "shots", c.train.shots, "train", text);
  read(t, "fold", c.train.fold, "train", text);
  const auto& e = j["eval"];
  read(e, "episodes", c.eval.episodes, "eval", text);
  read(e, "seed", c.eval.seed, "eval", text);
  if (e.contains("shots") && e["shots"].is_number_integer())
    c.eval.shots = {e["shots"].get<int>()};
  else
    read(e, "shots", c.eval.shots, "eval", text);
  read(e, "folds", c.eval.folds, "eval", text);

  try {
    validate(c);
  } catch (const ConfigError& err) {
    if (err.line() > 0 || text.empty()) throw;
    // attach the line of the last key named in the message, if any
    std::string msg = err.what();
    const auto q1 = msg.find('\'');
    const auto q2 = msg.find('\'', q1 + 1);
    int line = 0;
    if (q1 != std::string::npos && q2 != std::string::npos) {
      std::string path = msg.substr(q1 + 1, q2 - q1 - 1);
      line = line_of_key(text, path.substr(path.rfind('.') + 1));
    }
    throw ConfigError(msg, line);
  }
  return c;
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  const std::string text = ss.str();
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& err) {
    throw ConfigError(std::string("JSON parse error: ") + err.what(), line_of_offset(text, err.byte));
  }
  if (j.is_object() && j.contains("config") && j.contains("command")) return config_from_json(j["config"], text);
  return config_from_json(j, text);
}

void apply_override(json& j, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not of the form section.key=value");
  const std::string path = assignment.substr(0, eq);
  const std::string raw = assignment.substr(eq + 1);
  const auto dot = path.find('.');
  if (dot == std::string::npos) throw ConfigError("override key '" + path + "' must be section.key");
  const std::string section = path.substr(0, dot);
  const std::string key = path.substr(dot + 1);
  json value;
  try {
    value = json::parse(raw);
  } catch (const json::parse_error&) {
    value = raw;
  }
  if (!j.contains(section) || !j[section].contains(key)) throw ConfigError("unknown config key '" + path + "'");
  j[section][key] = value;
}

Config apply_overrides(const Config& cfg, const std::vector<std::string>& assignments) {
  json j = to_json(cfg);
  for (const auto& a : assignments) apply_override(j, a);
  return config_from_json(j);
}

void validate(const Config& c) {
  auto require = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  require(c.data.kind == "synthetic" || c.data.kind == "directory", "'data.kind' must be synthetic or directory");
  require(c.data.kind != "directory" || !c.data.root.empty(), "'data.root' is required for directory datasets");
  require(c.data.n_categories >= 1, "'data.n_categories' must be positive");
  require(c.data.exemplars_per_category >= 2, "'data.exemplars_per_category' must be at least 2");
  require(c.data.image_size >= 32, "'data.image_size' must be at least 32");
  require(c.data.n_folds >= 1, "'data.n_folds' must be positive");
  require(c.backbone.kind == "toy" || c.backbone.kind == "resnet50" || c.backbone.kind == "vgg16",
          "'backbone.kind' must be toy, resnet50 or vgg16");
  require(c.backbone.width_multiplier >= 1, "'backbone.width_multiplier' must be >= 1");
  for (const auto* side : {&c.layers.support, &c.layers.query}) {
    require(!side->empty(), "'layers.support' and 'layers.query' must be non-empty");
    for (int t : *side) require(t >= 0 && t <= 12, "'layers' tap index " + std::to_string(t) + " outside 0..12");
  }
  require(c.ha.channels >= 1, "'ha.channels' must be positive");
  require(c.ha.init_sigma >= 0.0, "'ha.init_sigma' must be >= 0");
  require(c.ha.squeeze_width >= 1, "'ha.squeeze_width' must be positive");
  require(c.ha.corr_mode == "cross" || c.ha.corr_mode == "self", "'ha.corr_mode' must be cross or self");
  require(c.ha.grid >= 0, "'ha.grid' must be >= 0");
  require(c.grid() >= 1, "'ha.grid' resolves to an empty grid");
  require(c.ht.lambda > 0.0, "'ht.lambda' must be positive");
  require(c.ht.tol > 0.0, "'ht.tol' must be positive");
  require(c.ht.max_iters >= 1, "'ht.max_iters' must be positive");
  require(c.ht.unrolled_iters >= 1, "'ht.unrolled_iters' must be positive");
  require(c.ht.support_residual_tap >= 0 && c.ht.support_residual_tap <= 12, "'ht.support_residual_tap' outside 0..12");
  require(c.ht.query_residual_tap >= 0 && c.ht.query_residual_tap <= 12, "'ht.query_residual_tap' outside 0..12");
  require(c.ht.pool_window >= 1 && c.ht.pool_window % 2 == 1, "'ht.pool_window' must be a positive odd number");
  require(c.hc.d_text >= 1, "'hc.d_text' must be positive");
  require(c.hc.bottleneck_ratio >= 1, "'hc.bottleneck_ratio' must be positive");
  require(c.hc.encoder == "stub" || c.hc.encoder == "external", "'hc.encoder' must be stub or external");
  require(c.head.hidden >= 1, "'head.hidden' must be positive");
  require(c.loss.alpha >= 0.0 && c.loss.beta >= 0.0, "'loss.alpha' and 'loss.beta' must be >= 0");
  require(c.train.epochs >= 1, "'train.epochs' must be positive");
  require(c.train.batch_size >= 1, "'train.batch_size' must be positive");
  require(c.train.learning_rate > 0.0, "'train.learning_rate' must be positive");
  require(c.train.weight_decay >= 0.0, "'train.weight_decay' must be >= 0");
  require(c.train.episodes_per_epoch >= 1, "'train.episodes_per_epoch' must be positive");
  require(c.train.val_episodes >= 0, "'train.val_episodes' must be >= 0");
  require(c.train.shots == 1 || c.train.shots == 5, "'train.shots' must be 1 or 5");
  require(c.train.fold >= 0 && c.train.fold < c.data.n_folds, "'train.fold' outside [0, data.n_folds)");
  require(c.eval.episodes >= 1, "'eval.episodes' must be positive");
  require(!c.eval.shots.empty(), "'eval.shots' must be non-empty");
  for (int k : c.eval.shots) require(k == 1 || k == 5, "'eval.shots' entries must be 1 or 5");
  for (int f : c.eval.folds) require(f >= 0 && f < c.data.n_folds, "'eval.folds' entry outside [0, data.n_folds)");
}

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex;
  os.width(16);
  os.fill('0');
  os << h;
  return os.str();
}

std::string config_hash(const Config& cfg) { return fnv1a_hex(to_json(cfg).dump()); }

std::string model_hash(const Config& cfg) {
  const json j = to_json(cfg);
  json sub;
  sub["image_size"] = j["data"]["image_size"];
  sub["n_categories"] = j["data"]["n_categories"];
  for (const char* s : {"backbone", "layers", "modules", "ha", "hc", "head"}) sub[s] = j[s];
  sub["ht"] = j["ht"];
  return fnv1a_hex(sub.dump());
}

std::vector<std::string> describe_config_keys() {
  std::vector<std::string> out;
  flatten(to_json(Config{}), "", out);
  return out;
}

std::string resolve_data_path(const std::string& path, const std::string& base_dir) {
  namespace fs = std::filesystem;
  if (path.empty()) return path;
  if (fs::exists(path)) return path;
  if (!base_dir.empty() && fs::exists(fs::path(base_dir) / path)) return (fs::path(base_dir) / path).string();
  const fs::path shipped = fs::path(TLG_DATA_DIR) / path;
  if (fs::exists(shipped)) return shipped.string();
  return path;
}

}  // namespace tlg
