#include <cstdio>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "partseg/error.hpp"
#include "partseg/pipeline.hpp"
#include "partseg/server.hpp"

using namespace partseg;
using nlohmann::json;

namespace {

void emit(const json& j) { std::cout << j.dump() << std::endl; }

void progress_line(const std::string& stage, int done, int total) {
  std::cerr << stage << " " << done << "/" << total << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"partseg: few-shot part segmentation from generator features"};
  app.require_subcommand(1);
  std::string root = ".";
  std::string config_file;
  bool verbose = false;
  app.add_option("--project", root, "Project root directory");
  app.add_option("--config", config_file, "Project config file (default <project>/project.json)");
  app.add_flag("-v,--verbose", verbose, "Progress on stderr");

  auto open = [&] { return Project::open(root, config_file); };
  StageProgress progress;
  EpochCallback on_epoch;
  EpochLossFn on_epoch_loss;

  std::string init_from;
  auto* init = app.add_subcommand("init", "Create a project with a config file");
  init->add_option("--from", init_from, "Start from this config instead of the defaults");

  auto* make_ds = app.add_subcommand("make-dataset", "Render the synthetic parts dataset");
  auto* train_gan_cmd = app.add_subcommand("train-gan", "Train the toy generator");

  int64_t n = 10;
  uint64_t seed = 0;
  auto* gen = app.add_subcommand("gen-samples", "Generate and register samples");
  gen->add_option("--n", n, "Number of samples")->check(CLI::PositiveNumber);
  gen->add_option("--seed", seed, "Sampling seed");

  int64_t count = 1;
  auto* annotate = app.add_subcommand("auto-annotate", "Write ground-truth masks for toy samples");
  annotate->add_option("--count", count, "Annotate the first N samples")->check(CLI::PositiveNumber);

  std::string layers;
  auto* extract = app.add_subcommand("extract", "Write pixel representations of the samples");
  extract->add_option("--layers", layers, "all | all_but_last | A | B | C | A-B | ids like 0,2");

  std::string image_path, name = "inversion";
  std::optional<int> steps;
  auto* invert_cmd = app.add_subcommand("invert", "Project an image into the latent space");
  invert_cmd->add_option("--image", image_path, "RGB PNG")->required()->check(CLI::ExistingFile);
  invert_cmd->add_option("--steps", steps, "Optimisation steps");
  invert_cmd->add_option("--name", name, "Output name under inversions/");

  std::string arch;
  int shots = 0;
  auto* fewshot = app.add_subcommand("train-fewshot", "Train the few-shot segmenter");
  fewshot->add_option("--arch", arch, "MLP0|MLP1|MLP2|CNN_S|CNN_M|CNN_L|CNN_DEFAULT");
  fewshot->add_option("--shots", shots, "Use the first k annotated samples (default all)");

  std::string sample;
  bool fast = false;
  auto* predict_cmd = app.add_subcommand("predict", "Segment a sample or an image");
  auto* sample_opt = predict_cmd->add_option("--sample", sample, "Registered sample id");
  auto* image_opt = predict_cmd->add_option("--image", image_path, "RGB PNG")->check(CLI::ExistingFile);
  sample_opt->excludes(image_opt);
  predict_cmd->add_option("--steps", steps, "Inversion steps for --image");
  predict_cmd->add_flag("--fast", fast, "Use the auto-shot model for --image when present");
  predict_cmd->add_option("--name", name, "Output name under predictions/");

  int64_t distill_n = 500;
  auto* distill = app.add_subcommand("gen-distill", "Generate the distilled dataset");
  distill->add_option("--n", distill_n, "Number of samples")->check(CLI::PositiveNumber);
  distill->add_option("--seed", seed, "Sampling seed");

  std::string target_mode;
  auto* autoshot = app.add_subcommand("train-autoshot", "Train the auto-shot UNet");
  autoshot->add_option("--target-mode", target_mode, "logits | one_hot")
      ->check(CLI::IsMember({"logits", "one_hot"}));

  int64_t labels = 0;
  auto* supervised = app.add_subcommand("train-supervised", "Train a UNet on labelled data");
  supervised->add_option("--labels", labels, "Number of labelled images")->required();

  std::string model = "fewshot";
  int eval_n = 50;
  bool exclude_background = false;
  auto* eval = app.add_subcommand("eval", "Weighted IOU on held-out generated samples");
  eval->add_option("--model", model, "fewshot | autoshot | supervised");
  eval->add_option("--n", eval_n, "Held-out samples")->check(CLI::PositiveNumber);
  eval->add_option("--seed", seed, "Held-out sampling seed");
  eval->add_flag("--exclude-background", exclude_background, "Leave class 0 out of the score");
  bool per_image = false;
  eval->add_flag("--per-image", per_image, "Also report each sample's weighted IOU");

  int port = 8080;
  std::string host = "127.0.0.1";
  auto* serve = app.add_subcommand("serve", "Run the HTTP service");
  serve->add_option("--port", port, "Port");
  serve->add_option("--host", host, "Bind address");

  CLI11_PARSE(app, argc, argv);

  if (verbose) {
    progress = progress_line;
    on_epoch = [](int e, int total, double loss) {
      std::cerr << "epoch " << e + 1 << "/" << total << " loss " << loss << "\n";
    };
    on_epoch_loss = [](int e, int total, double tr, double va) {
      std::cerr << "epoch " << e + 1 << "/" << total << " train " << tr << " val " << va << "\n";
    };
  }

  try {
    configure_deterministic_runtime();
    if (*init) {
      ProjectConfig cfg = default_project_config();
      if (!init_from.empty()) cfg = config_from_json(json::parse(read_file(init_from)));
      auto p = Project::init(root, cfg);
      emit({{"project", p.root().string()}, {"config", p.config_path().string()}});
    } else if (*make_ds) {
      auto p = open();
      emit({{"images", make_dataset(p)}, {"root", p.dataset_dir().string()}});
    } else if (*train_gan_cmd) {
      auto p = open();
      train_gan(p, progress);
      emit({{"checkpoint", p.generator_path().string()}});
    } else if (*gen) {
      auto p = open();
      json ids = json::array();
      for (const auto& r : gen_samples(p, n, seed)) ids.push_back(r.id);
      emit({{"samples", ids}});
    } else if (*annotate) {
      emit({{"annotated", auto_annotate(open(), count)}});
    } else if (*extract) {
      auto p = open();
      const auto sel = layers.empty() ? p.config().layer_selection : parse_selection(layers);
      emit({{"extracted", extract_representations(p, sel)}, {"layers", to_string(sel)}});
    } else if (*invert_cmd) {
      auto out = invert_image_file(open(), image_path, steps, name);
      emit({{"latent", out.latent_path.string()},
            {"trace", out.trace_path.string()},
            {"best_loss", out.result.best_loss},
            {"initial_loss", out.result.loss_trace.front()}});
    } else if (*fewshot) {
      std::optional<SegmenterVariant> variant;
      if (!arch.empty()) variant = parse_variant(arch);
      auto out = train_fewshot_stage(open(), variant, shots, on_epoch);
      emit({{"model", open().fewshot_model_path().string()},
            {"samples", out.used_ids},
            {"final_loss", out.trace.epoch_loss.back()}});
    } else if (*predict_cmd) {
      auto p = open();
      require(!sample.empty() || !image_path.empty(), ErrorCode::invalid_argument,
              "predict needs --sample or --image");
      auto pred = sample.empty() ? predict_image(p, load_image(image_path), fast, steps)
                                 : predict_sample(p, sample);
      const std::string out_name = sample.empty() ? name : sample;
      write_prediction(p, pred, out_name);
      emit({{"model", pred.model},
            {"mask", (p.predictions_dir() / (out_name + "_mask.png")).string()},
            {"class_confidence", pred.class_confidence}});
    } else if (*distill) {
      auto p = open();
      emit({{"samples", gen_distill(p, distill_n, seed).size()},
            {"root", p.distill_dir().string()}});
    } else if (*autoshot) {
      std::optional<TargetMode> mode;
      if (!target_mode.empty()) mode = parse_target_mode(target_mode);
      auto trace = train_autoshot_stage(open(), mode, on_epoch_loss);
      emit({{"model", open().autoshot_model_path().string()},
            {"final_validation_loss", trace.validation_loss.back()},
            {"decays", trace.decay_epochs.size()}});
    } else if (*supervised) {
      auto trace = train_supervised_stage(open(), labels, on_epoch_loss);
      emit({{"model", open().supervised_model_path().string()},
            {"final_validation_loss", trace.validation_loss.back()}});
    } else if (*eval) {
      emit(evaluate_stage(open(), parse_eval_model(model), eval_n, seed, exclude_background,
                          per_image));
    } else if (*serve) {
      PipelineServer server(open());
      std::cerr << "serving on http://" << host << ":" << port << "\n";
      server.serve_forever(host, port);
    }
  } catch (const Error& e) {
    std::cerr << "error: " << code_name(e.code()) << ": " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << std::endl;
    return 2;
  }
  return 0;
}
