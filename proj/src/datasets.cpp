#include "partseg/datasets.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "partseg/error.hpp"
#include "partseg/tensor_archive.hpp"

namespace partseg {
namespace {

constexpr double kBackgroundChroma = 0.25;

double uniform(std::mt19937_64& rng, Range r) {
  if (r.hi <= r.lo) return r.lo;
  return std::uniform_real_distribution<double>(r.lo, r.hi)(rng);
}

std::string hex32(uint32_t v) {
  char buf[9];
  std::snprintf(buf, sizeof(buf), "%08x", v);
  return buf;
}

}  // namespace

void validate_config(const SyntheticPartsConfig& cfg) {
  require(cfg.resolution >= 8, ErrorCode::invalid_argument, "synthetic resolution must be >= 8");
  require(cfg.n_classes >= 2 && cfg.n_classes <= 4, ErrorCode::invalid_argument,
          "synthetic n_classes must be in [2, 4]");
  require(cfg.dataset_size >= 1, ErrorCode::invalid_argument, "dataset_size must be >= 1");
  for (const Range& r : {cfg.body_half_length, cfg.body_half_width, cfg.head_radius,
                         cfg.tail_half_length, cfg.tail_half_width}) {
    require(r.lo > 0.0 && r.hi >= r.lo, ErrorCode::invalid_argument,
            "degenerate part size range");
  }
}

std::vector<std::array<double, 3>> class_colors(int n_classes) {
  static const std::vector<std::array<double, 3>> all = {
      {0.42, 0.42, 0.42}, {0.85, 0.22, 0.18}, {0.22, 0.80, 0.22}, {0.20, 0.28, 0.85}};
  return {all.begin(), all.begin() + std::min<int>(n_classes, 4)};
}

std::vector<std::array<uint8_t, 3>> display_palette(int n_classes) {
  static const std::vector<std::array<uint8_t, 3>> base = {
      {0, 0, 0},     {230, 60, 50},  {60, 200, 60},  {50, 80, 220},  {230, 200, 40},
      {200, 60, 200}, {40, 200, 200}, {240, 140, 40}, {140, 90, 40},  {160, 160, 255}};
  std::vector<std::array<uint8_t, 3>> out;
  for (int i = 0; i < n_classes; ++i) {
    if (i < static_cast<int>(base.size())) {
      out.push_back(base[i]);
    } else {
      auto v = static_cast<uint8_t>((i * 97) % 256);
      out.push_back({v, static_cast<uint8_t>(255 - v), static_cast<uint8_t>((v * 3) % 256)});
    }
  }
  return out;
}

std::pair<Image, PartAnnotation> render_synthetic_sample(const SyntheticPartsConfig& cfg,
                                                         uint64_t sample_seed) {
  validate_config(cfg);
  std::mt19937_64 rng(sample_seed);
  const int64_t n = cfg.resolution;
  const double side = static_cast<double>(n);

  // Pose and shape.
  const double cx = side * (0.5 + uniform(rng, {-cfg.position_jitter, cfg.position_jitter}));
  const double cy = side * (0.5 + uniform(rng, {-cfg.position_jitter, cfg.position_jitter}));
  const double theta = uniform(rng, {-cfg.rotation_jitter_deg, cfg.rotation_jitter_deg}) *
                       std::numbers::pi / 180.0;
  const double a = side * uniform(rng, cfg.body_half_length);
  const double b = side * uniform(rng, cfg.body_half_width);
  const double rh = side * uniform(rng, cfg.head_radius);
  const double tl = side * uniform(rng, cfg.tail_half_length);
  const double tw = side * uniform(rng, cfg.tail_half_width);

  // Colours.
  const auto protos = class_colors(4);
  std::array<std::array<double, 3>, 4> colors{};
  const double grey = uniform(rng, {0.30, 0.55});
  for (int c = 0; c < 3; ++c) colors[0][c] = grey + uniform(rng, {-0.03, 0.03});
  for (int k = 1; k < 4; ++k)
    for (int c = 0; c < 3; ++c)
      colors[k][c] = protos[k][c] + uniform(rng, {-cfg.color_jitter, cfg.color_jitter});
  if (cfg.same_color_parts) colors[2] = colors[1];

  auto pixels = torch::empty({3, n, n}, torch::kFloat32);
  auto labels = torch::zeros({n, n}, torch::kUInt8);
  auto px = pixels.accessor<float, 3>();
  auto lab = labels.accessor<uint8_t, 2>();
  const double ux = std::cos(theta), uy = std::sin(theta);
  std::uniform_real_distribution<double> noise(-cfg.pixel_noise, cfg.pixel_noise);

  for (int64_t y = 0; y < n; ++y) {
    for (int64_t x = 0; x < n; ++x) {
      const double dx = x + 0.5 - cx, dy = y + 0.5 - cy;
      const double u = dx * ux + dy * uy;
      const double v = -dx * uy + dy * ux;
      int cls = 0;
      if ((u / a) * (u / a) + (v / b) * (v / b) <= 1.0) cls = 1;
      if (cfg.n_classes >= 4) {
        const double ut = u + a + 0.5 * tl;
        if ((ut / tl) * (ut / tl) + (v / tw) * (v / tw) <= 1.0) cls = 3;
      }
      if (cfg.n_classes >= 3) {
        const double uh = u - a - 0.5 * rh;
        if (uh * uh + v * v <= rh * rh) cls = 2;
      }
      const double shade = cls == 0 ? 0.1 * (static_cast<double>(y) / side - 0.5) : 0.0;
      for (int c = 0; c < 3; ++c) {
        const double value = colors[cls][c] + shade + noise(rng);
        px[c][y][x] = static_cast<float>(std::clamp(value, 0.0, 1.0) * 2.0 - 1.0);
      }
      lab[y][x] = static_cast<uint8_t>(cls);
    }
  }
  PartAnnotation ann{labels, cfg.n_classes, {}};
  static const std::vector<std::string> names = {"background", "body", "head", "tail"};
  ann.class_names.assign(names.begin(), names.begin() + cfg.n_classes);
  return {Image{pixels}, ann};
}

PartsDataset make_synthetic_parts_dataset(const SyntheticPartsConfig& cfg) {
  validate_config(cfg);
  PartsDataset ds;
  ds.images.reserve(cfg.dataset_size);
  ds.masks.reserve(cfg.dataset_size);
  for (int64_t i = 0; i < cfg.dataset_size; ++i) {
    auto [img, ann] = render_synthetic_sample(cfg, mix_seed(cfg.rng_seed, i));
    ds.images.push_back(std::move(img));
    ds.masks.push_back(std::move(ann));
  }
  return ds;
}

std::vector<double> class_fraction_bounds(const SyntheticPartsConfig& cfg) {
  const double pi = std::numbers::pi;
  std::vector<double> upper(cfg.n_classes, 0.0);
  upper[1] = pi * cfg.body_half_length.hi * cfg.body_half_width.hi;
  if (cfg.n_classes >= 3) upper[2] = pi * cfg.head_radius.hi * cfg.head_radius.hi;
  if (cfg.n_classes >= 4) upper[3] = pi * cfg.tail_half_length.hi * cfg.tail_half_width.hi;
  double objects = 0.0;
  for (int k = 1; k < cfg.n_classes; ++k) objects += upper[k];
  upper[0] = 1.0 - objects;
  return upper;
}

PartAnnotation label_by_palette(const Image& image, int n_classes) {
  require(n_classes >= 2 && n_classes <= 4, ErrorCode::invalid_argument,
          "palette labelling supports 2..4 classes");
  const auto protos = class_colors(n_classes);
  auto rgb = ((image.pixels.detach().to(torch::kFloat32).clamp(-1, 1) + 1.0) * 0.5).contiguous();
  const int64_t h = image.height(), w = image.width();
  auto labels = torch::zeros({h, w}, torch::kUInt8);
  auto px = rgb.accessor<float, 3>();
  auto lab = labels.accessor<uint8_t, 2>();
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const double r = px[0][y][x], g = px[1][y][x], b = px[2][y][x];
      const double chroma = std::max({r, g, b}) - std::min({r, g, b});
      if (chroma < kBackgroundChroma) continue;
      int best = 1;
      double best_d = 1e9;
      for (int k = 1; k < n_classes; ++k) {
        const double d = (r - protos[k][0]) * (r - protos[k][0]) +
                         (g - protos[k][1]) * (g - protos[k][1]) +
                         (b - protos[k][2]) * (b - protos[k][2]);
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      lab[y][x] = static_cast<uint8_t>(best);
    }
  }
  return PartAnnotation{labels, n_classes, {}};
}

void save_annotation(const std::filesystem::path& path, const PartAnnotation& ann) {
  validate_annotation(ann);
  write_file_atomic(path, encode_png_indexed(ann.labels, display_palette(ann.n_classes)));
}

PartAnnotation decode_annotation(std::string_view png_bytes, int n_classes) {
  PartAnnotation ann{decode_png_indexed(png_bytes), n_classes, {}};
  auto flat = ann.labels.contiguous();
  const uint8_t* p = flat.data_ptr<uint8_t>();
  for (int64_t i = 0; i < flat.numel(); ++i) {
    if (p[i] != kIgnoreLabel && p[i] >= n_classes)
      fail(ErrorCode::invalid_argument,
           "unknown palette index " + std::to_string(p[i]) + " at pixel " + std::to_string(i));
  }
  return ann;
}

PartAnnotation load_annotation(const std::filesystem::path& path, int n_classes) {
  return decode_annotation(read_file(path), n_classes);
}

std::string record_checksum(const std::filesystem::path& root, const ManifestRecord& rec) {
  std::string bytes = read_file(root / rec.image_path);
  bytes += read_file(root / rec.target_path);
  return hex32(crc32_of(bytes));
}

void append_manifest(const std::filesystem::path& root, const ManifestRecord& rec) {
  nlohmann::json j = {{"id", rec.id},
                      {"seed", rec.seed},
                      {"image", rec.image_path},
                      {"target", rec.target_path},
                      {"checksum", rec.checksum},
                      {"n_classes", rec.n_classes}};
  std::filesystem::create_directories(root);
  std::ofstream out(root / "manifest.jsonl", std::ios::app);
  if (!out) fail(ErrorCode::io, "cannot append to manifest in " + root.string());
  out << j.dump() << '\n';
  out.flush();
  if (!out) fail(ErrorCode::io, "manifest append failed in " + root.string());
}

ManifestReadResult read_manifest(const std::filesystem::path& root) {
  ManifestReadResult result;
  const auto path = root / "manifest.jsonl";
  if (!std::filesystem::exists(path)) return result;
  std::ifstream in(path);
  std::string line;
  int64_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    ManifestRecord rec;
    try {
      auto j = nlohmann::json::parse(line);
      rec.id = j.at("id").get<int64_t>();
      rec.seed = j.at("seed").get<uint64_t>();
      rec.image_path = j.at("image").get<std::string>();
      rec.target_path = j.at("target").get<std::string>();
      rec.checksum = j.at("checksum").get<std::string>();
      rec.n_classes = j.at("n_classes").get<int>();
    } catch (const nlohmann::json::exception& e) {
      result.errors.emplace_back(-line_no, std::string("malformed manifest line: ") + e.what());
      continue;
    }
    try {
      const auto actual = record_checksum(root, rec);
      if (actual != rec.checksum) {
        result.errors.emplace_back(rec.id, "checksum mismatch (stored " + rec.checksum +
                                               ", actual " + actual + ")");
        continue;
      }
    } catch (const Error& e) {
      result.errors.emplace_back(rec.id, e.what());
      continue;
    }
    result.records.push_back(std::move(rec));
  }
  return result;
}

std::vector<ManifestRecord> read_manifest_strict(const std::filesystem::path& root) {
  auto result = read_manifest(root);
  if (!result.errors.empty()) {
    const auto& [id, reason] = result.errors.front();
    fail(ErrorCode::corrupt, "manifest record " + std::to_string(id) + ": " + reason);
  }
  return std::move(result.records);
}

}  // namespace partseg
