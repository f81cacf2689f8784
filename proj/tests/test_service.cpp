#include <doctest.h>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <thread>

#include <httplib.h>

#include "helpers.hpp"
#include "partseg/server.hpp"

using namespace partseg;
using nlohmann::json;
using testing::error_code_of;
using testing::error_text_of;
using testing::TempDir;

namespace {

ProjectConfig small_config() {
  auto cfg = default_project_config();
  cfg.dataset.dataset_size = 256;
  cfg.gan.arch.latent_dim = 16;
  cfg.gan.arch.base_channels = 32;
  cfg.gan.arch.min_channels = 8;
  cfg.gan.steps = 2;
  cfg.gan.batch_size = 4;
  cfg.gan.log_every = 1;
  cfg.fewshot_arch = SegmenterVariant::CNN_S;
  cfg.fewshot.epochs = 3;
  cfg.inversion.steps = 3;
  cfg.inversion.mean_latent_samples = 16;
  cfg.unet_base_channels = 2;
  cfg.autoshot.epochs = 2;
  cfg.autoshot.batch_size = 2;
  return cfg;
}

// A project with an untrained small generator in place.
struct Fixture {
  TempDir dir;
  Project project;

  explicit Fixture(const std::string& tag, ProjectConfig cfg = small_config())
      : dir(tag), project(Project::init(dir.path(), cfg)) {
    save_checkpoint(make_toy_gan(cfg.gan.arch, 3), project.generator_path());
  }
};

std::string quote(const std::filesystem::path& p) { return "'" + p.string() + "'"; }

struct RunResult {
  int exit_code;
  std::string out;
  std::string err;
};

RunResult run_cli(const std::filesystem::path& project, const std::string& args,
                  const TempDir& scratch) {
  const auto out = scratch / "stdout.txt", err = scratch / "stderr.txt";
  const std::string cmd = quote(PARTSEG_CLI) + " --project " + quote(project) + " " + args +
                          " > " + quote(out) + " 2> " + quote(err);
  const int status = std::system(cmd.c_str());
  return {WEXITSTATUS(status), read_file(out), read_file(err)};
}

std::string base64_decode(const std::string& text) {
  static const std::string alphabet =
      "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  uint32_t buf = 0;
  int bits = 0;
  for (char c : text) {
    const auto v = alphabet.find(c);
    if (v == std::string::npos) continue;
    buf = (buf << 6) | static_cast<uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<char>((buf >> bits) & 0xff));
    }
  }
  return out;
}

PartAnnotation striped_mask(int64_t h, int64_t w, int n) {
  auto labels = torch::zeros({h, w}, torch::kUInt8);
  for (int64_t y = 0; y < h; ++y) labels[y] = static_cast<int>(y % n);
  return {labels, n, {}};
}

}  // namespace

TEST_CASE("project config round trips and rejects unknown keys") {
  const auto cfg = small_config();
  const auto j = config_to_json(cfg);
  CHECK(config_to_json(config_from_json(j)) == j);
  CHECK(config_from_json(json::object()).fewshot.epochs == default_project_config().fewshot.epochs);

  auto bad = j;
  bad["fewshot"]["epoch"] = 3;
  CHECK(error_text_of([&] { config_from_json(bad); }).find("fewshot.epoch") != std::string::npos);
  bad = j;
  bad["colour"] = 1;
  CHECK(error_code_of([&] { config_from_json(bad); }) == ErrorCode::invalid_argument);
  bad = j;
  bad["fewshot"]["epochs"] = "many";
  CHECK(error_code_of([&] { config_from_json(bad); }) == ErrorCode::invalid_argument);
  bad = j;
  bad["classes"].erase(3);
  CHECK(error_code_of([&] { config_from_json(bad); }) == ErrorCode::invalid_argument);
  bad = j;
  bad["layer_selection"] = "Z";
  CHECK(error_code_of([&] { config_from_json(bad); }) == ErrorCode::invalid_argument);
}

TEST_CASE("opening a directory without a config names the missing file") {
  TempDir dir("noproj");
  auto text = error_text_of([&] { Project::open(dir.path()); });
  CHECK(text.find("project.json") != std::string::npos);
  CHECK(error_code_of([&] { Project::open(dir.path()); }) == ErrorCode::not_found);
  CHECK(sample_id(7) == "000007");
}

TEST_CASE("missing prerequisites name the artifact") {
  TempDir dir("prereq");
  auto p = Project::init(dir.path(), small_config());
  CHECK(error_text_of([&] { gen_samples(p, 2, 1); }).find("generator") != std::string::npos);
  CHECK(error_text_of([&] { train_gan(p); }).find("dataset") != std::string::npos);
  CHECK(error_text_of([&] { train_fewshot_stage(p); }).find("registry") != std::string::npos);
  CHECK(error_text_of([&] { train_autoshot_stage(p); }).find("distilled dataset") !=
        std::string::npos);
}

TEST_CASE("dataset and generator stages write their artifacts") {
  TempDir dir("gan");
  auto p = Project::init(dir.path(), small_config());
  CHECK(make_dataset(p) == 256);
  CHECK(load_dataset(p).size() == 256);
  CHECK(load_dataset(p, 3).size() == 3);
  int calls = 0;
  train_gan(p, [&](const std::string&, int, int) { ++calls; });
  CHECK(calls > 0);
  CHECK(std::filesystem::exists(p.generator_path()));
  CHECK(std::filesystem::exists(p.reports_dir() / "gan_trace.json"));
  CHECK(require_generator(p).output_resolution() == Resolution{32, 32});
}

TEST_CASE("sample generation is deterministic and keeps masks of unchanged samples") {
  Fixture f("samples");
  auto& p = f.project;
  auto recs = gen_samples(p, 10, 1);
  REQUIRE(recs.size() == 10);
  CHECK(p.samples().size() == 10);
  for (const auto& r : recs) CHECK(std::filesystem::exists(p.image_path(r.id)));
  const auto first = read_file(p.image_path("000004"));

  CHECK(error_code_of([&] { train_fewshot_stage(p); }) == ErrorCode::precondition);
  CHECK(error_text_of([&] { train_fewshot_stage(p); }) == "no annotations");

  auto_annotate(p, 3);
  CHECK(p.annotated_ids() == std::vector<std::string>{"000000", "000001", "000002"});
  gen_samples(p, 10, 1);
  CHECK(read_file(p.image_path("000004")) == first);
  CHECK(p.annotated_ids().size() == 3);
  gen_samples(p, 2, 2);
  CHECK(p.samples().size() == 2);
  CHECK(p.annotated_ids().empty());
  CHECK_FALSE(std::filesystem::exists(p.image_path("000004")));
}

TEST_CASE("masks are validated before they are stored") {
  Fixture f("masks");
  auto& p = f.project;
  gen_samples(p, 2, 1);
  auto ok = striped_mask(32, 32, 4);
  ok.labels[0][0] = kIgnoreLabel;
  store_mask(p, "000001", ok);
  CHECK(torch::equal(load_mask(p, "000001").labels, ok.labels));
  CHECK(error_code_of([&] { store_mask(p, "000009", ok); }) == ErrorCode::not_found);
  CHECK(error_code_of([&] { store_mask(p, "000000", striped_mask(16, 32, 4)); }) ==
        ErrorCode::shape_mismatch);
  auto wrong = striped_mask(32, 32, 4);
  wrong.labels[3][5] = 6;
  CHECK(error_code_of([&] { store_mask(p, "000000", wrong); }) == ErrorCode::invalid_argument);
  CHECK(error_code_of([&] { load_mask(p, "000000"); }) == ErrorCode::not_found);
}

TEST_CASE("few-shot, distillation and evaluation stages chain through the project") {
  Fixture f("chain");
  auto& p = f.project;
  gen_samples(p, 4, 1);
  auto_annotate(p, 2);
  CHECK(extract_representations(p, LayerSelection::group('B')).size() == 4);
  CHECK(std::filesystem::exists(p.representation_path("000003")));

  auto before = predict_sample(p, "000003");
  CHECK(before.model == "untrained");
  auto out = train_fewshot_stage(p, {}, 1);
  CHECK(out.used_ids == std::vector<std::string>{"000000"});
  CHECK(out.trace.epoch_loss.size() == 3);
  CHECK(error_code_of([&] { train_fewshot_stage(p, {}, 3); }) == ErrorCode::precondition);
  CHECK(std::filesystem::exists(p.fewshot_model_path()));

  auto pred = predict_sample(p, "000003");
  CHECK(pred.model == "fewshot");
  CHECK(pred.mask.resolution() == Resolution{32, 32});
  CHECK(pred.class_confidence.size() == 4);
  CHECK(pred.confidence.pixels.min().item<float>() >= -1.0f);
  write_prediction(p, pred, "s3");
  CHECK(std::filesystem::exists(p.predictions_dir() / "s3_mask.png"));

  auto report = evaluate_stage(p, EvalModel::fewshot, 3, 9, true);
  CHECK(report["per_class"].contains("0"));
  CHECK_FALSE(report.contains("per_image"));
  auto images = evaluate_stage(p, EvalModel::fewshot, 3, 9, false, true)["per_image"];
  REQUIRE(images.size() == 3);
  for (const auto& v : images) CHECK(v.get<double>() <= 1.0);
  CHECK(std::filesystem::exists(p.reports_dir() / "eval_fewshot.json"));

  CHECK(gen_distill(p, 3, 2).size() == 3);
  auto trace = train_autoshot_stage(p, TargetMode::logits);
  CHECK(trace.train_loss.size() == 2);
  CHECK(std::filesystem::exists(p.autoshot_model_path()));
  auto fast = predict_image(p, load_image(p.image_path("000001")), true);
  CHECK(fast.model == "autoshot");
  auto slow = predict_image(p, load_image(p.image_path("000001")), false, 2);
  CHECK(slow.model == "fewshot");
  evaluate_stage(p, EvalModel::autoshot, 2, 9, false);
  CHECK(parse_eval_model("supervised") == EvalModel::supervised);
  CHECK(error_code_of([] { parse_eval_model("best"); }) == ErrorCode::invalid_argument);
}

TEST_CASE("inversion stage writes latent, trace and reconstruction") {
  Fixture f("invert");
  auto& p = f.project;
  gen_samples(p, 1, 4);
  auto out = invert_image_file(p, p.image_path("000000"), 4, "probe");
  CHECK(out.result.loss_trace.size() <= 5);
  CHECK(std::filesystem::exists(out.latent_path));
  CHECK(read_file(out.trace_path).rfind("step,loss\n", 0) == 0);
}

TEST_CASE("supervised baseline stage reads the labelled dataset") {
  Fixture f("supervised");
  auto& p = f.project;
  CHECK(error_text_of([&] { train_supervised_stage(p, 2); }).find("make-dataset") !=
        std::string::npos);
  make_dataset(p);
  CHECK(error_code_of([&] { train_supervised_stage(p, 300); }) == ErrorCode::precondition);
  train_supervised_stage(p, 4);
  CHECK(std::filesystem::exists(p.supervised_model_path()));
}

TEST_CASE("command line stages report JSON and machine-readable errors") {
  TempDir scratch("cli");
  TempDir root("cliproj");
  std::ofstream(scratch / "cfg.json") << config_to_json(small_config()).dump();
  auto r = run_cli(root.path(), "init --from " + quote(scratch / "cfg.json"), scratch);
  REQUIRE(r.exit_code == 0);
  CHECK(json::parse(r.out).contains("config"));

  r = run_cli(root.path(), "gen-samples --n 10 --seed 1", scratch);
  CHECK(r.exit_code == 2);
  CHECK(r.err.rfind("error: not_found: missing generator", 0) == 0);
  CHECK(std::count(r.err.begin(), r.err.end(), '\n') == 1);

  auto p = Project::open(root.path());
  save_checkpoint(make_toy_gan(p.config().gan.arch, 3), p.generator_path());
  r = run_cli(root.path(), "gen-samples --n 10 --seed 1", scratch);
  REQUIRE(r.exit_code == 0);
  CHECK(json::parse(r.out).at("samples").size() == 10);
  CHECK(p.samples().size() == 10);
  for (const auto& s : p.samples()) CHECK(std::filesystem::exists(p.image_path(s.id)));
  const auto image = read_file(p.image_path("000009"));
  REQUIRE(run_cli(root.path(), "gen-samples --n 10 --seed 1", scratch).exit_code == 0);
  CHECK(read_file(p.image_path("000009")) == image);

  r = run_cli(root.path(), "train-fewshot", scratch);
  CHECK(r.exit_code == 2);
  CHECK(r.err == "error: precondition: no annotations\n");

  REQUIRE(run_cli(root.path(), "auto-annotate --count 1", scratch).exit_code == 0);
  r = run_cli(root.path(), "train-fewshot --arch MLP1", scratch);
  REQUIRE(r.exit_code == 0);
  CHECK(json::parse(r.out).at("samples") == json::array({"000000"}));
  r = run_cli(root.path(), "predict --sample 000002", scratch);
  REQUIRE(r.exit_code == 0);
  CHECK(json::parse(r.out).at("model") == "fewshot");
  r = run_cli(root.path(), "eval --model fewshot --n 2 --exclude-background --per-image", scratch);
  REQUIRE(r.exit_code == 0);
  CHECK(json::parse(r.out).contains("weighted"));
  CHECK(json::parse(r.out).at("per_image").size() == 2);

  r = run_cli(root.path(), "train-autoshot --target-mode soft", scratch);
  CHECK(r.exit_code != 0);
  r = run_cli(root.path(), "--bogus", scratch);
  CHECK(r.exit_code != 0);
}

TEST_CASE("HTTP service drives the annotate, train and preview loop") {
  auto cfg = small_config();
  cfg.fewshot.epochs = 60;
  Fixture f("http", cfg);
  auto& p = f.project;
  gen_samples(p, 3, 1);
  PipelineServer server(p);
  const int port = server.start();
  httplib::Client cli("127.0.0.1", port);

  auto res = cli.Get("/classes");
  REQUIRE(res);
  CHECK(res->status == 200);
  auto classes = json::parse(res->body);
  CHECK(classes.at("classes").size() == 4);
  CHECK(classes.at("classes")[2].at("name") == "head");
  CHECK(classes.at("ignore") == 255);

  res = cli.Get("/samples");
  REQUIRE(res);
  auto listing = json::parse(res->body).at("samples");
  CHECK(listing.size() == 3);
  CHECK(listing[0].at("has_mask") == false);
  CHECK(cli.Get("/samples/000001")->status == 200);
  CHECK(cli.Get("/samples/000042")->status == 404);
  CHECK(cli.Get("/samples/000042/image")->status == 404);
  res = cli.Get("/samples/000001/image");
  CHECK(res->status == 200);
  CHECK(res->body == read_file(p.image_path("000001")));
  CHECK(cli.Get("/samples/000000/mask")->status == 404);

  CHECK(server.status().state == JobState::idle);
  res = cli.Post("/train", "", "application/json");
  CHECK(res->status == 422);
  CHECK(json::parse(res->body).at("message") == "no annotations");

  const auto palette = cfg.palette();
  auto labels = striped_mask(32, 32, 4).labels;
  labels[7][3] = kIgnoreLabel;
  const auto mask_png = encode_png_indexed(labels, palette);
  res = cli.Put("/samples/000000/mask", mask_png, "image/png");
  CHECK(res->status == 200);
  res = cli.Get("/samples/000000/mask");
  CHECK(res->status == 200);
  CHECK(res->body == mask_png);
  CHECK(json::parse(cli.Get("/samples/000000")->body).at("has_mask") == true);

  auto bad = labels.clone();
  bad[5][9] = 4;
  res = cli.Put("/samples/000001/mask", encode_png_indexed(bad, display_palette(5)), "image/png");
  CHECK(res->status == 422);
  auto err = json::parse(res->body);
  CHECK(err.at("value") == 4);
  CHECK(err.at("x") == 9);
  CHECK(err.at("y") == 5);
  CHECK(cli.Put("/samples/000001/mask", std::string("not a png"), "image/png")->status == 422);
  CHECK(cli.Put("/samples/000001/mask", encode_png_indexed(torch::zeros({8, 8}, torch::kUInt8), palette),
                "image/png")->status == 422);
  CHECK(cli.Put("/samples/000077/mask", mask_png, "image/png")->status == 404);
  CHECK_FALSE(p.has_mask("000001"));

  res = cli.Post("/predict", json{{"sample_id", "000002"}}.dump(), "application/json");
  REQUIRE(res->status == 200);
  CHECK(json::parse(res->body).at("model") == "untrained");

  res = cli.Post("/train", json{{"arch", "CNN_M"}}.dump(), "application/json");
  REQUIRE(res->status == 202);
  CHECK(json::parse(res->body).at("state") == "running");
  res = cli.Post("/train", "", "application/json");
  CHECK(res->status == 409);
  std::vector<std::string> seen{"running"};
  for (int i = 0; i < 600; ++i) {
    auto st = json::parse(cli.Get("/train/status")->body);
    const auto state = st.at("state").get<std::string>();
    if (seen.empty() || seen.back() != state) seen.push_back(state);
    if (state == "done" || state == "failed") break;
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  CHECK(seen == std::vector<std::string>{"running", "done"});
  auto done = json::parse(cli.Get("/train/status")->body);
  CHECK(done.at("metrics").at("variant") == "CNN_M");
  CHECK(done.at("progress").at("epoch") == 60);
  CHECK(cli.Post("/train", "{not json", "application/json")->status == 400);

  res = cli.Post("/predict", json{{"sample_id", "000002"}}.dump(), "application/json");
  REQUIRE(res->status == 200);
  auto pred = json::parse(res->body);
  CHECK(pred.at("model") == "fewshot");
  CHECK(pred.at("sample_id") == "000002");
  CHECK(pred.at("class_confidence").size() == 4);
  auto mask = decode_png_indexed(base64_decode(pred.at("mask_png").get<std::string>()));
  CHECK(mask.sizes() == torch::IntArrayRef{32, 32});
  auto conf = decode_png_rgb(base64_decode(pred.at("confidence_png").get<std::string>()));
  CHECK(conf.height() == 32);
  CHECK(cli.Post("/predict", json{{"sample_id", "000099"}}.dump(), "application/json")->status ==
        404);

  res = cli.Post("/predict?steps=2", read_file(p.image_path("000001")), "image/png");
  REQUIRE(res->status == 200);
  CHECK(json::parse(res->body).at("width") == 32);
  CHECK(cli.Post("/predict", std::string("xx"), "image/png")->status == 422);
  server.stop();
}
