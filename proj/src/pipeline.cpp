#include "partseg/pipeline.hpp"

#include <algorithm>
#include <fstream>

#include "partseg/desk_protocol.hpp"
#include "partseg/error.hpp"

namespace partseg {

namespace {

using nlohmann::json;

ExtractOptions extract_options(const GeneratorHandle& gen) {
  ExtractOptions opts;
  opts.target_res = gen.output_resolution();
  return opts;
}

int64_t selected_channels(const GeneratorHandle& gen, const LayerSelection& sel) {
  const auto ids = resolve_selection(sel, gen.layer_table());
  int64_t c = 0;
  for (const auto& l : gen.layer_table())
    if (std::find(ids.begin(), ids.end(), l.id) != ids.end()) c += l.channels;
  return c;
}

void write_report(const Project& project, const std::string& name, const json& j) {
  write_file_atomic(project.reports_dir() / name, j.dump(2) + "\n");
}

void require_artifact(const std::filesystem::path& path, const std::string& what,
                      const std::string& producer) {
  if (!std::filesystem::exists(path))
    fail(ErrorCode::not_found,
         "missing " + what + " " + path.string() + " (run " + producer + ")");
}

json autoshot_trace_json(const AutoShotTrace& t) {
  return {{"train_loss", t.train_loss},
          {"validation_loss", t.validation_loss},
          {"lr", t.lr},
          {"decay_epochs", t.decay_epochs}};
}

}  // namespace

int64_t make_dataset(const Project& project) {
  const auto& cfg = project.config().dataset;
  const auto dir = project.dataset_dir();
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  const auto palette = project.config().palette();
  for (int64_t i = 0; i < cfg.dataset_size; ++i) {
    auto [image, mask] = render_synthetic_sample(cfg, mix_seed(cfg.rng_seed, i));
    save_image(dir / "images" / (sample_id(i) + ".png"), quantize_8bit(image));
    write_file_atomic(dir / "masks" / (sample_id(i) + ".png"),
                      encode_png_indexed(mask.labels, palette));
  }
  write_file_atomic(dir / "dataset.json",
                    json{{"size", cfg.dataset_size}, {"resolution", cfg.resolution}}.dump() + "\n");
  return cfg.dataset_size;
}

PartsDataset load_dataset(const Project& project, int64_t limit) {
  const auto dir = project.dataset_dir();
  require_artifact(dir / "dataset.json", "dataset", "make-dataset");
  const auto meta = json::parse(read_file(dir / "dataset.json"));
  int64_t n = meta.at("size").get<int64_t>();
  if (limit >= 0) n = std::min(n, limit);
  PartsDataset ds;
  for (int64_t i = 0; i < n; ++i) {
    ds.images.push_back(load_image(dir / "images" / (sample_id(i) + ".png")));
    ds.masks.push_back(
        load_annotation(dir / "masks" / (sample_id(i) + ".png"), project.config().n_classes()));
  }
  return ds;
}

void train_gan(const Project& project, const StageProgress& progress) {
  const auto ds = load_dataset(project);
  ProgressFn fn;
  if (progress) fn = [&](int step, int total, double) { progress("train-gan", step, total); };
  auto result = train_toy_gan(ds.images, project.config().gan, project.config().gan_seed, fn);
  save_checkpoint(result.generator, project.generator_path());
  write_report(project, "gan_trace.json",
               {{"step", result.trace.step},
                {"d_loss", result.trace.d_loss},
                {"g_loss", result.trace.g_loss}});
}

GeneratorHandle require_generator(const Project& project) {
  require_artifact(project.generator_path(), "generator checkpoint", "train-gan");
  return load_checkpoint(project.generator_path());
}

std::vector<SampleRecord> gen_samples(const Project& project, int64_t n, uint64_t seed) {
  require(n >= 1, ErrorCode::invalid_argument, "--n must be >= 1");
  const auto gen = require_generator(project);
  const auto previous = project.samples();
  std::vector<SampleRecord> records;
  for (int64_t i = 0; i < n; ++i) {
    SampleRecord r{sample_id(i), mix_seed(seed, static_cast<uint64_t>(i))};
    const auto z = sample_latent(gen, r.seed);
    save_image(project.image_path(r.id), quantize_8bit(generate_image(gen, z)));
    latent_archive(z).save(project.latent_path(r.id));
    records.push_back(r);
  }
  for (const auto& old : previous) {
    const bool kept = std::any_of(records.begin(), records.end(), [&](const SampleRecord& r) {
      return r.id == old.id && r.seed == old.seed;
    });
    if (kept) continue;
    std::filesystem::remove(project.mask_path(old.id));
    std::filesystem::remove(project.representation_path(old.id));
    if (std::none_of(records.begin(), records.end(),
                     [&](const SampleRecord& r) { return r.id == old.id; })) {
      std::filesystem::remove(project.image_path(old.id));
      std::filesystem::remove(project.latent_path(old.id));
    }
  }
  project.write_registry(records);
  return records;
}

std::vector<std::string> auto_annotate(const Project& project, int64_t count) {
  const auto samples = project.samples();
  require(!samples.empty(), ErrorCode::not_found,
          "missing sample registry " + project.registry_path().string() + " (run gen-samples)");
  std::vector<std::string> ids;
  for (int64_t i = 0; i < std::min<int64_t>(count, samples.size()); ++i) {
    const auto& id = samples[i].id;
    store_mask(project, id, label_by_palette(load_image(project.image_path(id)),
                                             project.config().n_classes()));
    ids.push_back(id);
  }
  return ids;
}

void store_mask(const Project& project, const std::string& id, const PartAnnotation& ann) {
  require(project.find_sample(id).has_value(), ErrorCode::not_found, "unknown sample " + id);
  require(ann.n_classes == project.config().n_classes(), ErrorCode::invalid_argument,
          "mask class count differs from the project palette");
  validate_annotation(ann);
  const auto image = load_image(project.image_path(id));
  require(ann.height() == image.height() && ann.width() == image.width(),
          ErrorCode::shape_mismatch, "mask resolution differs from sample " + id);
  write_file_atomic(project.mask_path(id), encode_png_indexed(ann.labels, project.config().palette()));
}

PartAnnotation load_mask(const Project& project, const std::string& id) {
  require_artifact(project.mask_path(id), "mask", "annotation of sample " + id);
  auto ann = load_annotation(project.mask_path(id), project.config().n_classes());
  for (const auto& c : project.config().classes) ann.class_names.push_back(c.name);
  return ann;
}

PixelRepresentation sample_representation(const Project& project, const GeneratorHandle& gen,
                                          const std::string& id,
                                          const std::optional<LayerSelection>& sel) {
  require(project.find_sample(id).has_value(), ErrorCode::not_found, "unknown sample " + id);
  require_artifact(project.latent_path(id), "latent", "gen-samples");
  const auto z = latent_from_archive(TensorArchive::load(project.latent_path(id)));
  const auto selection = sel.value_or(project.config().layer_selection);
  auto g = generate_with_taps(gen, z, selection);
  return extract_representation(g.stack, selection, extract_options(gen));
}

std::vector<std::string> extract_representations(const Project& project,
                                                 const LayerSelection& sel,
                                                 const std::vector<std::string>& ids) {
  const auto gen = require_generator(project);
  std::vector<std::string> todo = ids;
  if (todo.empty())
    for (const auto& r : project.samples()) todo.push_back(r.id);
  require(!todo.empty(), ErrorCode::not_found,
          "missing sample registry " + project.registry_path().string() + " (run gen-samples)");
  for (const auto& id : todo)
    representation_archive(sample_representation(project, gen, id, sel))
        .save(project.representation_path(id));
  return todo;
}

InvertOutcome invert_image_file(const Project& project, const std::filesystem::path& image,
                                std::optional<int> steps, const std::string& name) {
  const auto gen = require_generator(project);
  auto cfg = project.config().inversion;
  if (steps) cfg.steps = *steps;
  InvertOutcome out;
  out.result = invert(gen, load_image(image), cfg, project.config().seed);
  const auto dir = project.root() / "inversions";
  out.latent_path = dir / (name + ".psta");
  out.trace_path = dir / (name + ".csv");
  std::filesystem::create_directories(dir);
  save_inversion(out.result, out.latent_path, out.trace_path);
  save_image(dir / (name + "_reconstruction.png"), out.result.reconstruction);
  return out;
}

FewShotOutcome train_fewshot_stage(const Project& project, std::optional<SegmenterVariant> arch,
                                   int shots, const EpochCallback& on_epoch) {
  require_artifact(project.registry_path(), "sample registry", "gen-samples");
  auto ids = project.annotated_ids();
  require(!ids.empty(), ErrorCode::precondition, "no annotations");
  if (shots > 0) {
    require(static_cast<size_t>(shots) <= ids.size(), ErrorCode::precondition,
            "requested " + std::to_string(shots) + " shots but only " +
                std::to_string(ids.size()) + " samples are annotated");
    ids.resize(shots);
  }
  const auto gen = require_generator(project);
  std::vector<TrainingPair> pairs;
  for (const auto& id : ids)
    pairs.push_back({sample_representation(project, gen, id), load_mask(project, id)});

  SegmenterSpec spec;
  spec.variant = arch.value_or(project.config().fewshot_arch);
  spec.input_channels = pairs.front().rep.channels();
  spec.n_classes = project.config().n_classes();
  FewShotOutcome out{build_segmenter(spec, project.config().seed), {}, ids};
  out.trace = train_fewshot(out.model, pairs, project.config().fewshot, on_epoch);
  save_segmenter(out.model, project.fewshot_model_path());
  write_report(project, "fewshot_trace.json",
               {{"variant", to_string(spec.variant)},
                {"samples", ids},
                {"epoch_loss", out.trace.epoch_loss},
                {"epoch_lr", out.trace.epoch_lr}});
  return out;
}

Prediction make_prediction(const LogitMap& logits, const std::string& model_name) {
  Prediction p;
  p.logits = logits;
  p.mask = logits_to_mask(logits);
  p.model = model_name;
  const auto probs = torch::softmax(logits.scores, 0);
  const auto top = std::get<0>(probs.max(0));
  p.confidence = Image{(top * 2 - 1).unsqueeze(0).expand({3, -1, -1}).contiguous()};
  const auto labels = p.mask.labels.to(torch::kInt64);
  for (int64_t c = 0; c < logits.n_classes(); ++c) {
    const auto where = labels == c;
    const int64_t count = where.sum().item<int64_t>();
    p.class_confidence.push_back(count ? top.masked_select(where).mean().item<double>() : 0.0);
  }
  return p;
}

SegmenterModel current_fewshot_model(const Project& project, const GeneratorHandle& gen) {
  if (std::filesystem::exists(project.fewshot_model_path()))
    return load_segmenter(project.fewshot_model_path());
  SegmenterSpec spec;
  spec.variant = project.config().fewshot_arch;
  spec.input_channels = selected_channels(gen, project.config().layer_selection);
  spec.n_classes = project.config().n_classes();
  return build_segmenter(spec, project.config().seed);
}

Prediction predict_sample(const Project& project, const std::string& id) {
  const auto gen = require_generator(project);
  const bool trained = std::filesystem::exists(project.fewshot_model_path());
  const auto model = current_fewshot_model(project, gen);
  return make_prediction(predict(model, sample_representation(project, gen, id)),
                         trained ? "fewshot" : "untrained");
}

Prediction predict_image(const Project& project, const Image& image, bool fast,
                         std::optional<int> steps) {
  if (fast && std::filesystem::exists(project.autoshot_model_path()))
    return make_prediction(unet_predict(load_unet(project.autoshot_model_path()), image),
                           "autoshot");
  const auto gen = require_generator(project);
  require(image.height() == gen.output_resolution().height &&
              image.width() == gen.output_resolution().width,
          ErrorCode::shape_mismatch, "image resolution differs from the generator output");
  auto cfg = project.config().inversion;
  if (steps) cfg.steps = *steps;
  const bool trained = std::filesystem::exists(project.fewshot_model_path());
  const auto model = current_fewshot_model(project, gen);
  const auto rep = represent_image(gen, image, project.config().layer_selection, cfg,
                                   project.config().seed, extract_options(gen));
  return make_prediction(predict(model, rep), trained ? "fewshot" : "untrained");
}

void write_prediction(const Project& project, const Prediction& p, const std::string& name) {
  write_file_atomic(project.predictions_dir() / (name + "_mask.png"),
                    encode_png_indexed(p.mask.labels, project.config().palette()));
  save_image(project.predictions_dir() / (name + "_confidence.png"), p.confidence);
}

std::vector<DistilledSample> gen_distill(const Project& project, int64_t n, uint64_t seed) {
  const auto gen = require_generator(project);
  require_artifact(project.fewshot_model_path(), "few-shot model", "train-fewshot");
  const auto teacher = load_segmenter(project.fewshot_model_path());
  std::filesystem::remove_all(project.distill_dir());
  DistillOptions opts;
  opts.extract = extract_options(gen);
  return generate_distilled_dataset(gen, teacher, project.config().layer_selection, n, seed,
                                    project.distill_dir(), opts);
}

AutoShotTrace train_autoshot_stage(const Project& project, std::optional<TargetMode> mode,
                                   const EpochLossFn& on_epoch) {
  require_artifact(project.distill_dir() / "manifest.jsonl", "distilled dataset", "gen-distill");
  const auto data = load_distilled_dataset(project.distill_dir());
  require(!data.empty(), ErrorCode::precondition, "distilled dataset is empty");
  auto cfg = project.config().autoshot;
  if (mode) cfg.target_mode = *mode;
  UNetSpec spec;
  spec.n_classes = data.front().target.n_classes();
  spec.base_channels = project.config().unet_base_channels;
  auto model = build_unet(spec, project.config().seed);
  auto trace = train_autoshot(model, data, project.config().augmentation, cfg, on_epoch);
  save_unet(model, project.autoshot_model_path());
  auto j = autoshot_trace_json(trace);
  j["target_mode"] = to_string(cfg.target_mode);
  write_report(project, "autoshot_trace.json", j);
  return trace;
}

AutoShotTrace train_supervised_stage(const Project& project, int64_t labels,
                                     const EpochLossFn& on_epoch) {
  require(labels >= 1, ErrorCode::invalid_argument, "--labels must be >= 1");
  const auto ds = load_dataset(project, labels);
  require(static_cast<int64_t>(ds.size()) == labels, ErrorCode::precondition,
          "dataset holds only " + std::to_string(ds.size()) + " labelled images");
  std::vector<LabeledImage> pairs;
  for (size_t i = 0; i < ds.size(); ++i) pairs.push_back({ds.images[i], ds.masks[i]});
  UNetSpec spec;
  spec.n_classes = project.config().n_classes();
  spec.base_channels = project.config().unet_base_channels;
  auto model = build_unet(spec, project.config().seed);
  auto trace = train_supervised_baseline(model, pairs, project.config().augmentation,
                                         project.config().autoshot, on_epoch);
  save_unet(model, project.supervised_model_path());
  auto j = autoshot_trace_json(trace);
  j["labels"] = labels;
  write_report(project, "supervised_trace.json", j);
  return trace;
}

EvalModel parse_eval_model(const std::string& text) {
  if (text == "fewshot") return EvalModel::fewshot;
  if (text == "autoshot") return EvalModel::autoshot;
  if (text == "supervised") return EvalModel::supervised;
  fail(ErrorCode::invalid_argument, "unknown model '" + text + "' (fewshot|autoshot|supervised)");
}

nlohmann::json evaluate_stage(const Project& project, EvalModel which, int n, uint64_t seed,
                              bool exclude_background, bool per_image) {
  const auto gen = require_generator(project);
  const auto examples = generated_examples(gen, project.config().layer_selection,
                                           extract_options(gen), n, seed,
                                           project.config().n_classes());
  std::set<int> excluded;
  if (exclude_background) excluded.insert(0);
  IouReport report;
  std::string name;
  std::vector<double> images;
  auto* sink = per_image ? &images : nullptr;
  switch (which) {
    case EvalModel::fewshot:
      require_artifact(project.fewshot_model_path(), "few-shot model", "train-fewshot");
      report = evaluate_segmenter(load_segmenter(project.fewshot_model_path()), examples, excluded, sink);
      name = "fewshot";
      break;
    case EvalModel::autoshot:
      require_artifact(project.autoshot_model_path(), "auto-shot model", "train-autoshot");
      report = evaluate_unet(load_unet(project.autoshot_model_path()), examples, excluded, sink);
      name = "autoshot";
      break;
    case EvalModel::supervised:
      require_artifact(project.supervised_model_path(), "supervised model", "train-supervised");
      report = evaluate_unet(load_unet(project.supervised_model_path()), examples, excluded, sink);
      name = "supervised";
      break;
  }
  auto j = report.to_json();
  j["model"] = name;
  j["samples"] = n;
  j["seed"] = seed;
  if (per_image) j["per_image"] = images;
  write_report(project, "eval_" + name + ".json", j);
  return j;
}

}  // namespace partseg
