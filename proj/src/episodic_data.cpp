#include "tlg/episodic_data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <set>
#include <sstream>

#include "tlg/errors.hpp"
#include "tlg/image_io.hpp"

namespace tlg::data {

namespace fs = std::filesystem;

// ---------------- rng ----------------

double Rng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double Rng::normal() {
  double u1 = uniform();
  while (u1 <= 0.0) u1 = uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

std::size_t Rng::index(std::size_t n) {
  if (n == 0) throw std::invalid_argument("Rng::index on empty range");
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t x = engine_();
  while (x >= limit) x = engine_();
  return static_cast<std::size_t>(x % n);
}

std::uint64_t mix_seed(std::initializer_list<std::uint64_t> parts) {
  std::uint64_t h = 0x9E3779B97F4A7C15ULL;
  for (std::uint64_t p : parts) {
    std::uint64_t z = h ^ (p + 0x9E3779B97F4A7C15ULL + (h << 6) + (h >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    h = z ^ (z >> 31);
  }
  return h;
}

std::uint64_t EpisodeId::rng_seed() const {
  return mix_seed({stream, static_cast<std::uint64_t>(fold), seed, index});
}

std::string EpisodeId::str() const {
  std::ostringstream os;
  os << "fold=" << fold << " seed=" << seed << " index=" << index << " stream=" << stream;
  return os.str();
}

// ---------------- dataset / folds ----------------

void Dataset::reindex() {
  by_category.assign(category_names.size(), {});
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const int c = samples[i].category_id;
    if (c < 0 || c >= n_categories())
      throw DataError("sample '" + samples[i].id + "' has category id " + std::to_string(c) + " outside [0, " +
                      std::to_string(n_categories()) + ")");
    by_category[static_cast<std::size_t>(c)].push_back(i);
  }
}

FoldSplit make_fold_split(int n_categories, int n_folds, int fold, const std::vector<std::vector<int>>& explicit_folds) {
  if (n_folds < 1 || fold < 0 || fold >= n_folds)
    throw ConfigError("fold " + std::to_string(fold) + " outside [0, " + std::to_string(n_folds) + ")");
  FoldSplit split;
  split.fold_id = fold;
  std::set<int> test;
  if (!explicit_folds.empty()) {
    if (static_cast<int>(explicit_folds.size()) != n_folds)
      throw ConfigError("'data.folds' lists " + std::to_string(explicit_folds.size()) + " folds, expected " +
                        std::to_string(n_folds));
    for (int c : explicit_folds[static_cast<std::size_t>(fold)]) {
      if (c < 0 || c >= n_categories) throw ConfigError("'data.folds' category " + std::to_string(c) + " out of range");
      test.insert(c);
    }
  } else {
    if (n_categories < n_folds)
      throw ConfigError("cannot split " + std::to_string(n_categories) + " categories into " +
                        std::to_string(n_folds) + " folds");
    const int lo = fold * n_categories / n_folds;
    const int hi = (fold + 1) * n_categories / n_folds;
    for (int c = lo; c < hi; ++c) test.insert(c);
  }
  if (test.empty()) throw ConfigError("fold " + std::to_string(fold) + " has no test categories");
  for (int c = 0; c < n_categories; ++c) {
    if (test.count(c))
      split.test_categories.push_back(c);
    else
      split.train_categories.push_back(c);
  }
  return split;
}

// ---------------- CAM normalization ----------------

torch::Tensor normalize_cam(const torch::Tensor& raw) {
  if (!torch::isfinite(raw).all().item<bool>()) throw DataError("normalize_cam: non-finite activation");
  auto pos = torch::relu(raw);
  const auto peak = pos.max();
  if (peak.item<double>() <= 0.0) return torch::zeros_like(raw);
  return pos / peak;
}

void validate_pseudo_mask(const torch::Tensor& mask, const std::string& what) {
  if (!torch::isfinite(mask).all().item<bool>()) throw DataError(what + ": non-finite pseudo-mask value");
  const double lo = mask.min().item<double>();
  const double hi = mask.max().item<double>();
  if (lo < 0.0 || hi > 1.0) {
    std::ostringstream os;
    os << what << ": pseudo-mask values outside [0,1] (min " << lo << ", max " << hi << ")";
    throw DataError(os.str());
  }
}

// ---------------- episode sampling ----------------

Episode sample_episode(const Dataset& dataset, const FoldSplit& split, SplitPart part, int shot_count,
                       std::uint64_t rng_seed) {
  if (shot_count < 1) throw SamplingError("shot_count must be positive");
  const auto& cats = part == SplitPart::train ? split.train_categories : split.test_categories;
  if (cats.empty()) throw SamplingError("split for fold " + std::to_string(split.fold_id) + " is empty");
  for (int c : cats) {
    if (c < 0 || c >= dataset.n_categories()) throw SamplingError("category id " + std::to_string(c) + " not in dataset");
    const auto n = dataset.by_category[static_cast<std::size_t>(c)].size();
    if (n < static_cast<std::size_t>(shot_count + 1))
      throw SamplingError("category '" + dataset.category_names[static_cast<std::size_t>(c)] + "' has " +
                          std::to_string(n) + " exemplars, need " + std::to_string(shot_count + 1));
  }
  Rng rng(rng_seed);
  const int category = cats[rng.index(cats.size())];
  std::vector<std::size_t> pool = dataset.by_category[static_cast<std::size_t>(category)];
  // partial Fisher-Yates: first K+1 entries become the draw
  for (int i = 0; i <= shot_count; ++i) {
    const std::size_t j = static_cast<std::size_t>(i) + rng.index(pool.size() - static_cast<std::size_t>(i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
  }
  Episode ep;
  ep.category_id = category;
  ep.fold_id = split.fold_id;
  ep.shot_count = shot_count;
  for (int k = 0; k < shot_count; ++k) {
    const auto& s = dataset.samples[pool[static_cast<std::size_t>(k)]];
    ep.support_images.push_back(s.image);
    ep.support_pseudo_masks.push_back(s.pseudo_mask);
    ep.support_gt_masks.push_back(s.gt_mask);
    ep.support_ids.push_back(s.id);
  }
  const auto& q = dataset.samples[pool[static_cast<std::size_t>(shot_count)]];
  ep.query_image = q.image;
  ep.query_pseudo_mask = q.pseudo_mask;
  ep.query_gt_mask = q.gt_mask;
  ep.query_id = q.id;
  return ep;
}

Episode sample_episode(const Dataset& dataset, const FoldSplit& split, SplitPart part, int shot_count,
                       const EpisodeId& id) {
  Episode ep = sample_episode(dataset, split, part, shot_count, id.rng_seed());
  ep.id = id;
  return ep;
}

// ---------------- synthetic shapes ----------------

namespace {

struct Pose {
  double cx, cy, r, cos_t, sin_t;
};

using ShapeFn = bool (*)(double u, double v, double r);

bool disk(double u, double v, double r) { return u * u + v * v <= r * r; }
bool bar(double u, double v, double r) { return std::abs(u) <= r && std::abs(v) <= 0.35 * r; }
bool ring(double u, double v, double r) {
  const double d2 = u * u + v * v;
  return d2 <= r * r && d2 >= 0.3 * r * r;
}
bool triangle(double u, double v, double r) {
  // equilateral, circumradius r, one vertex at +v
  const double s3 = std::sqrt(3.0);
  return v >= -0.5 * r && s3 * u + v <= r && -s3 * u + v <= r;
}
bool cross(double u, double v, double r) {
  return (std::abs(u) <= r && std::abs(v) <= 0.3 * r) || (std::abs(v) <= r && std::abs(u) <= 0.3 * r);
}
bool square(double u, double v, double r) { return std::abs(u) <= 0.75 * r && std::abs(v) <= 0.75 * r; }
bool ellipse(double u, double v, double r) { return (u * u) / (r * r) + (v * v) / (0.3 * r * r) <= 1.0; }
bool crescent(double u, double v, double r) {
  const double du = u - 0.5 * r;
  return u * u + v * v <= r * r && du * du + v * v > 0.64 * r * r;
}

const std::vector<ShapeFn>& shape_fns() {
  static const std::vector<ShapeFn> fns = {disk, bar, ring, triangle, cross, square, ellipse, crescent};
  return fns;
}

}  // namespace

const std::vector<std::string>& synthetic_shape_names() {
  static const std::vector<std::string> names = {"disk",  "bar",    "ring",    "triangle",
                                                 "cross", "square", "ellipse", "crescent"};
  return names;
}

torch::Tensor soften_mask(const torch::Tensor& binary_mask, int radius) {
  const auto m = binary_mask.to(torch::kFloat64).contiguous();
  const int h = static_cast<int>(m.size(0));
  const int w = static_cast<int>(m.size(1));
  const auto* src = m.data_ptr<double>();
  auto out = torch::zeros({h, w}, torch::kFloat64);
  auto* dst = out.data_ptr<double>();
  const double denom = static_cast<double>((2 * radius + 1) * (2 * radius + 1));
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int dy = -radius; dy <= radius; ++dy)
        for (int dx = -radius; dx <= radius; ++dx) {
          const int yy = std::clamp(y + dy, 0, h - 1);
          const int xx = std::clamp(x + dx, 0, w - 1);
          acc += src[yy * w + xx];
        }
      dst[y * w + x] = acc / denom;
    }
  return normalize_cam(out).to(torch::kFloat32);
}

Dataset make_synthetic_dataset(int n_categories, int exemplars_per_category, int image_size, std::uint64_t rng_seed) {
  const auto& names = synthetic_shape_names();
  if (n_categories < 1 || n_categories > static_cast<int>(names.size()))
    throw ConfigError("synthetic dataset supports 1.." + std::to_string(names.size()) + " categories, got " +
                      std::to_string(n_categories));
  if (image_size < 32) throw ConfigError("synthetic image_size must be >= 32, got " + std::to_string(image_size));
  if (exemplars_per_category < 1) throw ConfigError("exemplars_per_category must be positive");

  Dataset ds;
  ds.image_size = image_size;
  ds.category_names.assign(names.begin(), names.begin() + n_categories);
  const int s = image_size;
  const double total = static_cast<double>(s) * s;

  for (int c = 0; c < n_categories; ++c) {
    for (int e = 0; e < exemplars_per_category; ++e) {
      Rng rng(mix_seed({rng_seed, static_cast<std::uint64_t>(c), static_cast<std::uint64_t>(e)}));
      std::vector<std::uint8_t> mask(static_cast<std::size_t>(s) * s);
      // rejection-sample a pose whose foreground fraction lies in [0.05, 0.6]
      for (int attempt = 0;; ++attempt) {
        const double r = rng.uniform(0.2, 0.42) * s;
        Pose p{rng.uniform(0.3, 0.7) * s, rng.uniform(0.3, 0.7) * s, r, 0, 0};
        const double theta = rng.uniform(0.0, 2.0 * std::numbers::pi);
        p.cos_t = std::cos(theta);
        p.sin_t = std::sin(theta);
        std::size_t fg = 0;
        for (int y = 0; y < s; ++y)
          for (int x = 0; x < s; ++x) {
            const double dx = x + 0.5 - p.cx, dy = y + 0.5 - p.cy;
            const double u = p.cos_t * dx + p.sin_t * dy;
            const double v = -p.sin_t * dx + p.cos_t * dy;
            const bool in = shape_fns()[static_cast<std::size_t>(c)](u, v, p.r);
            mask[static_cast<std::size_t>(y) * s + x] = in ? 1 : 0;
            fg += in;
          }
        const double frac = static_cast<double>(fg) / total;
        if (frac >= 0.05 && frac <= 0.6) break;
        if (attempt > 1000) throw DataError("synthetic generator failed to place shape " + names[static_cast<std::size_t>(c)]);
      }

      // textured background; flat foreground at least 0.25 brighter on average, so objects are
      // salient without being tied to a category colour
      double bg[3], fgc[3];
      for (;;) {
        double diff = 0.0;
        for (int ch = 0; ch < 3; ++ch) {
          bg[ch] = rng.uniform(0.1, 0.9);
          fgc[ch] = rng.uniform(0.1, 0.9);
          diff += (fgc[ch] - bg[ch]) / 3.0;
        }
        if (diff >= 0.25) break;
      }
      const double freq = rng.uniform(0.4, 1.2);
      const double phi = rng.uniform(0.0, std::numbers::pi);
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      const double cphi = std::cos(phi), sphi = std::sin(phi);

      auto image = torch::empty({3, s, s}, torch::kFloat32);
      auto acc = image.accessor<float, 3>();
      auto gt = torch::empty({s, s}, torch::kFloat32);
      auto gacc = gt.accessor<float, 2>();
      for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
          const bool in = mask[static_cast<std::size_t>(y) * s + x] != 0;
          gacc[y][x] = in ? 1.0f : 0.0f;
          const double stripe = 0.12 * std::sin(freq * (cphi * x + sphi * y) + phase);
          for (int ch = 0; ch < 3; ++ch) {
            const double v = in ? fgc[ch] + 0.03 * rng.normal() : bg[ch] + stripe + 0.08 * rng.normal();
            acc[ch][y][x] = static_cast<float>(std::clamp(v, 0.0, 1.0));
          }
        }

      Sample smp;
      smp.id = names[static_cast<std::size_t>(c)] + "_" + std::to_string(e);
      smp.category_id = c;
      smp.image = image;
      smp.gt_mask = gt;
      smp.pseudo_mask = soften_mask(gt, 2);
      ds.samples.push_back(std::move(smp));
    }
  }
  ds.reindex();
  return ds;
}

// ---------------- directory layout ----------------

namespace {

struct CategoryRow {
  std::string id;
  std::string category_name;
  int category_id;
};

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r\n\"");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n\"");
  return s.substr(b, e - b + 1);
}

std::vector<CategoryRow> read_categories(const fs::path& root) {
  const fs::path path = root / "categories.csv";
  std::ifstream in(path);
  if (!in) throw LoadError("missing " + path.string());
  std::vector<CategoryRow> rows;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cols.push_back(trim(cell));
    if (lineno == 1 && !cols.empty() && cols[0] == "id") continue;
    if (cols.size() != 3) throw LoadError(path.string() + ":" + std::to_string(lineno) + ": expected 3 columns");
    try {
      rows.push_back({cols[0], cols[1], std::stoi(cols[2])});
    } catch (const std::exception&) {
      throw LoadError(path.string() + ":" + std::to_string(lineno) + ": bad category_id '" + cols[2] + "'");
    }
  }
  return rows;
}

torch::Tensor gray_to_tensor(const Image8& img) {
  auto t = torch::empty({img.height, img.width}, torch::kFloat32);
  auto a = t.accessor<float, 2>();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x) {
      int v = 0;
      for (int c = 0; c < img.channels; ++c) v += img.at(y, x, c);
      a[y][x] = static_cast<float>(v) / (255.0f * static_cast<float>(img.channels));
    }
  return t;
}

torch::Tensor rgb_to_tensor(const Image8& img) {
  auto t = torch::empty({3, img.height, img.width}, torch::kFloat32);
  auto a = t.accessor<float, 3>();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c) a[c][y][x] = static_cast<float>(img.at(y, x, img.channels == 3 ? c : 0)) / 255.0f;
  return t;
}

Image8 tensor_to_gray(const torch::Tensor& t) {
  const auto m = t.to(torch::kFloat32).contiguous();
  Image8 img;
  img.height = static_cast<int>(m.size(0));
  img.width = static_cast<int>(m.size(1));
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height);
  auto a = m.accessor<float, 2>();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      img.at(y, x) = static_cast<std::uint8_t>(std::lround(std::clamp(a[y][x], 0.0f, 1.0f) * 255.0f));
  return img;
}

Image8 tensor_to_rgb(const torch::Tensor& t) {
  const auto m = t.to(torch::kFloat32).contiguous();
  Image8 img;
  img.height = static_cast<int>(m.size(1));
  img.width = static_cast<int>(m.size(2));
  img.channels = 3;
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * 3);
  auto a = m.accessor<float, 3>();
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < 3; ++c)
        img.at(y, x, c) = static_cast<std::uint8_t>(std::lround(std::clamp(a[c][y][x], 0.0f, 1.0f) * 255.0f));
  return img;
}

}  // namespace

std::map<std::string, torch::Tensor> load_precomputed_masks(const std::string& root_dir) {
  const fs::path root(root_dir);
  const auto rows = read_categories(root);
  std::vector<std::string> missing;
  std::map<std::string, torch::Tensor> masks;
  for (const auto& row : rows) {
    const fs::path p = root / "masks" / (row.id + ".png");
    if (!fs::exists(p)) {
      missing.push_back(row.id);
      continue;
    }
    auto m = gray_to_tensor(read_png(p.string()));
    validate_pseudo_mask(m, "mask '" + row.id + "'");
    masks.emplace(row.id, m);
  }
  if (!missing.empty()) {
    std::string list;
    for (const auto& id : missing) list += (list.empty() ? "" : ", ") + id;
    throw LoadError("missing pseudo-masks for " + std::to_string(missing.size()) + " image(s): " + list);
  }
  return masks;
}

Dataset load_dataset_directory(const std::string& root_dir) {
  const fs::path root(root_dir);
  const auto rows = read_categories(root);
  if (rows.empty()) throw LoadError("no images listed in " + (root / "categories.csv").string());
  const auto masks = load_precomputed_masks(root_dir);

  Dataset ds;
  int max_cat = -1;
  for (const auto& r : rows) max_cat = std::max(max_cat, r.category_id);
  ds.category_names.assign(static_cast<std::size_t>(max_cat + 1), std::string{});
  for (const auto& r : rows) {
    auto& name = ds.category_names[static_cast<std::size_t>(r.category_id)];
    if (!name.empty() && name != r.category_name)
      throw LoadError("category id " + std::to_string(r.category_id) + " named both '" + name + "' and '" +
                      r.category_name + "'");
    name = r.category_name;

    Sample s;
    s.id = r.id;
    s.category_id = r.category_id;
    s.image = rgb_to_tensor(read_png((root / "images" / (r.id + ".png")).string()));
    s.pseudo_mask = masks.at(r.id);
    const fs::path gt = root / "gt" / (r.id + ".png");
    s.gt_mask = fs::exists(gt) ? (gray_to_tensor(read_png(gt.string())) >= 0.5).to(torch::kFloat32)
                               : (s.pseudo_mask >= 0.5).to(torch::kFloat32);
    if (s.image.size(1) != s.image.size(2)) throw DataError("image '" + r.id + "' is not square");
    if (s.pseudo_mask.sizes() != s.image.sizes().slice(1))
      throw DataError("mask '" + r.id + "' size does not match its image");
    if (ds.image_size == 0) ds.image_size = static_cast<int>(s.image.size(1));
    if (s.image.size(1) != ds.image_size) throw DataError("image '" + r.id + "' differs in size from the first image");
    ds.samples.push_back(std::move(s));
  }
  for (std::size_t c = 0; c < ds.category_names.size(); ++c)
    if (ds.category_names[c].empty()) ds.category_names[c] = "category_" + std::to_string(c);
  ds.reindex();
  return ds;
}

void save_dataset_directory(const Dataset& ds, const std::string& root_dir) {
  const fs::path root(root_dir);
  fs::create_directories(root / "images");
  fs::create_directories(root / "masks");
  fs::create_directories(root / "gt");
  std::ofstream csv(root / "categories.csv");
  csv << "id,category_name,category_id\n";
  for (const auto& s : ds.samples) {
    csv << s.id << "," << ds.category_names[static_cast<std::size_t>(s.category_id)] << "," << s.category_id << "\n";
    write_png((root / "images" / (s.id + ".png")).string(), tensor_to_rgb(s.image));
    write_png((root / "masks" / (s.id + ".png")).string(), tensor_to_gray(s.pseudo_mask));
    if (s.gt_mask.defined()) write_png((root / "gt" / (s.id + ".png")).string(), tensor_to_gray(s.gt_mask));
  }
}

}  // namespace tlg::data
