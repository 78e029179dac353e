#include "tlg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "tlg/errors.hpp"

namespace tlg {

namespace {

constexpr char kMagic[8] = {'T', 'L', 'G', 'C', 'K', 'P', 'T', '1'};

std::map<std::string, torch::Tensor> state_of(const torch::nn::Module& model) {
  std::map<std::string, torch::Tensor> state;
  for (const auto& p : model.named_parameters()) state[p.key()] = p.value();
  for (const auto& b : model.named_buffers()) state["buffer:" + b.key()] = b.value();
  return state;
}

std::string dtype_name(torch::Dtype d) {
  if (d == torch::kFloat32) return "float32";
  if (d == torch::kFloat64) return "float64";
  throw LoadError("checkpoint: unsupported dtype");
}

torch::Dtype dtype_from(const std::string& s) {
  if (s == "float32") return torch::kFloat32;
  if (s == "float64") return torch::kFloat64;
  throw LoadError("checkpoint: unknown dtype '" + s + "'");
}

}  // namespace

void save_checkpoint(const torch::nn::Module& model, const Config& cfg, const std::string& path,
                     const nlohmann::json& extra) {
  const auto state = state_of(model);
  nlohmann::json header;
  header["model_hash"] = model_hash(cfg);
  header["config_hash"] = config_hash(cfg);
  header["config"] = to_json(cfg);
  header["extra"] = extra;
  std::uint64_t offset = 0;
  std::vector<torch::Tensor> blobs;
  for (const auto& [name, t] : state) {
    auto c = t.detach().contiguous().cpu();
    const auto bytes = static_cast<std::uint64_t>(c.numel() * c.element_size());
    header["tensors"].push_back({{"name", name},
                                 {"dtype", dtype_name(c.scalar_type())},
                                 {"shape", c.sizes().vec()},
                                 {"offset", offset},
                                 {"bytes", bytes}});
    offset += bytes;
    blobs.push_back(c);
  }
  const auto text = header.dump();
  const auto tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw LoadError("cannot write checkpoint '" + path + "'");
    const std::uint64_t len = text.size();
    out.write(kMagic, sizeof kMagic);
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& c : blobs)
      out.write(static_cast<const char*>(c.data_ptr()), static_cast<std::streamsize>(c.numel() * c.element_size()));
    if (!out) throw LoadError("short write on checkpoint '" + path + "'");
  }
  std::rename(tmp.c_str(), path.c_str());
}

namespace {

nlohmann::json read_header(std::ifstream& in, const std::string& path) {
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0 || len > (1u << 30))
    throw LoadError("'" + path + "' is not a checkpoint");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw LoadError("'" + path + "' is truncated");
  try {
    return nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw LoadError("'" + path + "' has a corrupt header: " + e.what());
  }
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  auto header = read_header(in, path);
  return {header.at("model_hash").get<std::string>(), config_from_json(header.at("config")), header};
}

CheckpointInfo load_checkpoint(torch::nn::Module& model, const Config& cfg, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot open checkpoint '" + path + "'");
  auto header = read_header(in, path);
  const auto stored = header.at("model_hash").get<std::string>();
  const auto expected = model_hash(cfg);
  if (stored != expected)
    throw ConfigError("checkpoint '" + path + "' was trained with model hash " + stored + " but the config gives " +
                      expected + "; the architecture sections (backbone, layers, modules, ha, ht, hc, head, " +
                      "image size, categories) must match");
  const auto base = in.tellg();
  auto state = state_of(model);
  const auto& table = header.at("tensors");
  if (table.size() != state.size())
    throw LoadError("checkpoint holds " + std::to_string(table.size()) + " tensors, model has " +
                    std::to_string(state.size()));
  torch::NoGradGuard guard;
  for (const auto& entry : table) {
    const auto name = entry.at("name").get<std::string>();
    auto it = state.find(name);
    if (it == state.end()) throw LoadError("checkpoint tensor '" + name + "' has no counterpart in the model");
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    if (it->second.sizes().vec() != shape) throw LoadError("checkpoint tensor '" + name + "' has a different shape");
    auto buf = torch::empty(shape, torch::TensorOptions().dtype(dtype_from(entry.at("dtype").get<std::string>())));
    in.seekg(base + static_cast<std::streamoff>(entry.at("offset").get<std::uint64_t>()));
    in.read(static_cast<char*>(buf.data_ptr()), static_cast<std::streamsize>(entry.at("bytes").get<std::uint64_t>()));
    if (!in) throw LoadError("checkpoint '" + path + "' is truncated at tensor '" + name + "'");
    it->second.copy_(buf);
  }
  return {stored, config_from_json(header.at("config")), header};
}

}  // namespace tlg
