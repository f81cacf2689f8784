#include "partseg/project.hpp"

#include <cstdio>
#include <fstream>

#include "partseg/error.hpp"

namespace partseg {

NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(Range, lo, hi)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(SyntheticPartsConfig, resolution, n_classes,
                                                body_half_length, body_half_width, head_radius,
                                                tail_half_length, tail_half_width, position_jitter,
                                                rotation_jitter_deg, color_jitter, pixel_noise,
                                                same_color_parts, dataset_size, rng_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyGanArch, latent_dim, resolution, base_channels,
                                                min_channels)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(ToyGanTrainConfig, arch, steps, batch_size, lr,
                                                beta1, beta2, r1_gamma, log_every)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(FewShotTrainConfig, epochs, base_lr,
                                                lr_decay_factor, lr_decay_every, lr_floor,
                                                weight_decay, standardize, rng_seed)
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AugmentationConfig, hflip_prob, scale,
                                                rotation_deg, translate_frac, fill_value,
                                                background_logit)
NLOHMANN_JSON_SERIALIZE_ENUM(TargetMode, {{TargetMode::logits, "logits"},
                                          {TargetMode::one_hot, "one_hot"}})
NLOHMANN_DEFINE_TYPE_NON_INTRUSIVE_WITH_DEFAULT(AutoShotTrainConfig, epochs, base_lr,
                                                plateau_decay_factor, plateau_patience,
                                                validation_fraction, target_mode, batch_size,
                                                augment, rng_seed)
NLOHMANN_JSON_SERIALIZE_ENUM(InversionInit, {{InversionInit::mean_latent, "mean_latent"},
                                             {InversionInit::random, "random"},
                                             {InversionInit::provided, "provided"}})

void to_json(nlohmann::json& j, const InversionConfig& c) {
  j = {{"steps", c.steps},
       {"step_size", c.step_size},
       {"pixel_weight", c.pixel_weight},
       {"perceptual_weight", c.perceptual_weight},
       {"init", c.init},
       {"mean_latent_samples", c.mean_latent_samples},
       {"early_stop_delta", c.early_stop_delta}};
}

void from_json(const nlohmann::json& j, InversionConfig& c) {
  c.steps = j.value("steps", c.steps);
  c.step_size = j.value("step_size", c.step_size);
  c.pixel_weight = j.value("pixel_weight", c.pixel_weight);
  c.perceptual_weight = j.value("perceptual_weight", c.perceptual_weight);
  c.init = j.value("init", c.init);
  c.mean_latent_samples = j.value("mean_latent_samples", c.mean_latent_samples);
  c.early_stop_delta = j.value("early_stop_delta", c.early_stop_delta);
}

namespace {

using nlohmann::json;

void reject_unknown(const json& given, const json& known, const std::string& where) {
  if (!given.is_object() || !known.is_object()) return;
  for (const auto& [key, value] : given.items()) {
    if (!known.contains(key))
      fail(ErrorCode::invalid_argument, "unknown config key " + where + key);
    reject_unknown(value, known.at(key), where + key + ".");
  }
}

std::string zero_pad(int64_t v, int width) {
  std::string s = std::to_string(v);
  return std::string(width > static_cast<int>(s.size()) ? width - s.size() : 0, '0') + s;
}

}  // namespace

std::vector<std::array<uint8_t, 3>> ProjectConfig::palette() const {
  std::vector<std::array<uint8_t, 3>> out;
  for (const auto& c : classes) out.push_back(c.color);
  return out;
}

ProjectConfig default_project_config() {
  ProjectConfig cfg;
  const auto colors = display_palette(cfg.dataset.n_classes);
  const char* names[] = {"background", "body", "head", "tail"};
  for (int i = 0; i < cfg.dataset.n_classes; ++i) cfg.classes.push_back({names[i], colors[i]});
  return cfg;
}

json config_to_json(const ProjectConfig& cfg) {
  json classes = json::array();
  for (const auto& c : cfg.classes) classes.push_back({{"name", c.name}, {"color", c.color}});
  return {{"dataset_root", cfg.dataset_root},
          {"generator_checkpoint", cfg.generator_checkpoint},
          {"layer_selection", to_string(cfg.layer_selection)},
          {"classes", classes},
          {"dataset", cfg.dataset},
          {"gan", cfg.gan},
          {"gan_seed", cfg.gan_seed},
          {"fewshot_arch", to_string(cfg.fewshot_arch)},
          {"fewshot", cfg.fewshot},
          {"inversion", cfg.inversion},
          {"unet_base_channels", cfg.unet_base_channels},
          {"autoshot", cfg.autoshot},
          {"augmentation", cfg.augmentation},
          {"seed", cfg.seed}};
}

ProjectConfig config_from_json(const json& j) {
  require(j.is_object(), ErrorCode::invalid_argument, "project config must be a JSON object");
  ProjectConfig cfg = default_project_config();
  json known = config_to_json(cfg);
  known["classes"] = json::object();
  reject_unknown(j, known, "");
  try {
    cfg.dataset_root = j.value("dataset_root", cfg.dataset_root);
    cfg.generator_checkpoint = j.value("generator_checkpoint", cfg.generator_checkpoint);
    if (j.contains("layer_selection"))
      cfg.layer_selection = parse_selection(j.at("layer_selection").get<std::string>());
    if (j.contains("classes")) {
      cfg.classes.clear();
      for (const auto& c : j.at("classes"))
        cfg.classes.push_back(
            {c.at("name").get<std::string>(), c.at("color").get<std::array<uint8_t, 3>>()});
    }
    cfg.dataset = j.value("dataset", cfg.dataset);
    cfg.gan = j.value("gan", cfg.gan);
    cfg.gan_seed = j.value("gan_seed", cfg.gan_seed);
    if (j.contains("fewshot_arch"))
      cfg.fewshot_arch = parse_variant(j.at("fewshot_arch").get<std::string>());
    cfg.fewshot = j.value("fewshot", cfg.fewshot);
    if (j.contains("inversion")) from_json(j.at("inversion"), cfg.inversion);
    cfg.unet_base_channels = j.value("unet_base_channels", cfg.unet_base_channels);
    cfg.autoshot = j.value("autoshot", cfg.autoshot);
    cfg.augmentation = j.value("augmentation", cfg.augmentation);
    cfg.seed = j.value("seed", cfg.seed);
  } catch (const json::exception& e) {
    fail(ErrorCode::invalid_argument, std::string("bad project config: ") + e.what());
  }
  validate(cfg);
  return cfg;
}

void validate(const ProjectConfig& cfg) {
  require(cfg.classes.size() >= 2 && cfg.classes.size() < kIgnoreLabel,
          ErrorCode::invalid_argument, "project needs between 2 and 254 classes");
  require(!cfg.dataset_root.empty(), ErrorCode::invalid_argument, "dataset_root is empty");
  require(!cfg.generator_checkpoint.empty(), ErrorCode::invalid_argument,
          "generator_checkpoint is empty");
  require(cfg.unet_base_channels >= 1, ErrorCode::invalid_argument,
          "unet_base_channels must be positive");
  require(cfg.dataset.n_classes == cfg.n_classes(), ErrorCode::invalid_argument,
          "dataset.n_classes differs from the class palette");
  validate_config(cfg.dataset);
  validate(cfg.inversion);
  validate(cfg.augmentation);
}

std::string sample_id(int64_t index) { return zero_pad(index, 6); }

Project::Project(std::filesystem::path root, ProjectConfig cfg)
    : root_(std::move(root)), cfg_(std::move(cfg)) {}

Project Project::init(const std::filesystem::path& root, const ProjectConfig& cfg) {
  validate(cfg);
  for (const char* dir : {"models", "samples/images", "samples/latents", "samples/masks",
                          "samples/reps", "distill", "reports", "predictions"})
    std::filesystem::create_directories(root / dir);
  write_file_atomic(root / "project.json", config_to_json(cfg).dump(2) + "\n");
  return Project(root, cfg);
}

Project Project::open(const std::filesystem::path& root, const std::filesystem::path& config_file) {
  const auto path = config_file.empty() ? root / "project.json" : config_file;
  if (!std::filesystem::exists(path))
    fail(ErrorCode::not_found, "missing project config " + path.string() + " (run init)");
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    fail(ErrorCode::invalid_argument, "cannot parse " + path.string() + ": " + e.what());
  }
  Project p(root, config_from_json(j));
  for (const char* dir : {"models", "samples/images", "samples/latents", "samples/masks",
                          "samples/reps", "distill", "reports", "predictions"})
    std::filesystem::create_directories(root / dir);
  return p;
}

std::filesystem::path Project::dataset_dir() const {
  std::filesystem::path p(cfg_.dataset_root);
  return p.is_absolute() ? p : root_ / p;
}

std::filesystem::path Project::generator_path() const {
  std::filesystem::path p(cfg_.generator_checkpoint);
  return p.is_absolute() ? p : root_ / p;
}

std::filesystem::path Project::image_path(const std::string& id) const {
  return root_ / "samples/images" / (id + ".png");
}
std::filesystem::path Project::latent_path(const std::string& id) const {
  return root_ / "samples/latents" / (id + ".psta");
}
std::filesystem::path Project::mask_path(const std::string& id) const {
  return root_ / "samples/masks" / (id + ".png");
}
std::filesystem::path Project::representation_path(const std::string& id) const {
  return root_ / "samples/reps" / (id + ".psta");
}

std::vector<SampleRecord> Project::samples() const {
  if (!std::filesystem::exists(registry_path())) return {};
  std::vector<SampleRecord> out;
  try {
    const auto doc = json::parse(read_file(registry_path()));
    for (const auto& r : doc.at("samples"))
      out.push_back({r.at("id").get<std::string>(), r.at("seed").get<uint64_t>()});
  } catch (const json::exception& e) {
    fail(ErrorCode::corrupt, "sample registry unreadable: " + std::string(e.what()));
  }
  return out;
}

std::optional<SampleRecord> Project::find_sample(const std::string& id) const {
  for (auto& r : samples())
    if (r.id == id) return r;
  return std::nullopt;
}

void Project::write_registry(const std::vector<SampleRecord>& records) const {
  json arr = json::array();
  for (const auto& r : records) arr.push_back({{"id", r.id}, {"seed", r.seed}});
  write_file_atomic(registry_path(), json{{"samples", arr}}.dump(2) + "\n");
}

bool Project::has_mask(const std::string& id) const {
  return std::filesystem::exists(mask_path(id));
}

std::vector<std::string> Project::annotated_ids() const {
  std::vector<std::string> out;
  for (const auto& r : samples())
    if (has_mask(r.id)) out.push_back(r.id);
  return out;
}

}  // namespace partseg
