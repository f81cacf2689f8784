#include "partseg/server.hpp"

#include <httplib.h>

#include "partseg/error.hpp"

namespace partseg {

namespace {

using nlohmann::json;

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::not_found: return 404;
    case ErrorCode::conflict: return 409;
    case ErrorCode::precondition: return 412;
    case ErrorCode::invalid_argument:
    case ErrorCode::shape_mismatch:
    case ErrorCode::corrupt:
    case ErrorCode::version_mismatch: return 422;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code,
                const std::string& message, json extra = json::object()) {
  extra["error"] = std::string(code);
  extra["message"] = message;
  send_json(res, status, extra);
}

void send_png(httplib::Response& res, const std::string& bytes) {
  res.status = 200;
  res.set_content(bytes, "image/png");
}

json prediction_json(const Prediction& p, const std::vector<std::array<uint8_t, 3>>& palette) {
  return {{"model", p.model},
          {"width", p.mask.width()},
          {"height", p.mask.height()},
          {"mask_png", httplib::detail::base64_encode(encode_png_indexed(p.mask.labels, palette))},
          {"confidence_png", httplib::detail::base64_encode(encode_png_rgb(p.confidence))},
          {"class_confidence", p.class_confidence}};
}

// Runs a handler, mapping library errors onto HTTP statuses.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    send_error(res, http_status(e.code()), code_name(e.code()), e.what());
  } catch (const json::exception& e) {
    send_error(res, 400, "bad_request", e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, "internal", e.what());
  }
}

}  // namespace

std::string to_string(JobState s) {
  switch (s) {
    case JobState::idle: return "idle";
    case JobState::running: return "running";
    case JobState::done: return "done";
    case JobState::failed: return "failed";
  }
  return "idle";
}

json JobStatus::to_json() const {
  json j = {{"state", to_string(state)}, {"generation", generation}};
  if (state == JobState::running || state == JobState::done)
    j["progress"] = {{"epoch", epoch}, {"epochs", epochs}, {"loss", loss}};
  if (state == JobState::failed) j["reason"] = reason;
  if (state == JobState::done) j["metrics"] = metrics;
  return j;
}

PipelineServer::PipelineServer(Project project)
    : project_(std::move(project)), http_(std::make_unique<httplib::Server>()) {
  install_routes();
}

PipelineServer::~PipelineServer() {
  stop();
  wait_for_job();
}

int PipelineServer::start(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = http_->bind_to_any_port(host);
  } else if (!http_->bind_to_port(host, port)) {
    bound = -1;
  }
  require(bound > 0, ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
  listener_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return bound;
}

void PipelineServer::serve_forever(const std::string& host, int port) {
  if (!http_->listen(host, port))
    fail(ErrorCode::io, "cannot bind " + host + ":" + std::to_string(port));
}

void PipelineServer::stop() {
  if (http_) http_->stop();
  if (listener_.joinable()) listener_.join();
}

JobStatus PipelineServer::status() const {
  std::lock_guard<std::mutex> lock(state_mutex_);
  return status_;
}

void PipelineServer::wait_for_job() {
  std::thread job;
  {
    std::lock_guard<std::mutex> lock(state_mutex_);
    job = std::move(job_);
  }
  if (job.joinable()) job.join();
}

bool PipelineServer::start_training(std::optional<SegmenterVariant> arch, int shots,
                                    std::string& error) {
  std::lock_guard<std::mutex> lock(state_mutex_);
  if (status_.state == JobState::running) {
    error = "a training job is already running";
    return false;
  }
  if (job_.joinable()) job_.join();  // finished, state already published
  status_ = JobStatus{JobState::running, 0, project_.config().fewshot.epochs, 0.0, {}, {},
                      status_.generation + 1};
  job_ = std::thread([this, arch, shots] {
    try {
      auto out = train_fewshot_stage(project_, arch, shots, [this](int epoch, int epochs, double loss) {
        std::lock_guard<std::mutex> l(state_mutex_);
        status_.epoch = epoch + 1;
        status_.epochs = epochs;
        status_.loss = loss;
      });
      std::lock_guard<std::mutex> l(state_mutex_);
      status_.state = JobState::done;
      status_.metrics = {{"final_loss", out.trace.epoch_loss.empty() ? 0.0 : out.trace.epoch_loss.back()},
                         {"samples", out.used_ids},
                         {"variant", to_string(out.model.spec().variant)}};
      ++status_.generation;
    } catch (const std::exception& e) {
      std::lock_guard<std::mutex> l(state_mutex_);
      status_.state = JobState::failed;
      status_.reason = e.what();
      ++status_.generation;
    }
  });
  return true;
}

void PipelineServer::install_routes() {
  auto& s = *http_;

  s.Get("/samples", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] {
      json arr = json::array();
      std::lock_guard<std::mutex> lock(state_mutex_);
      for (const auto& r : project_.samples())
        arr.push_back({{"id", r.id}, {"seed", r.seed}, {"has_mask", project_.has_mask(r.id)}});
      send_json(res, 200, {{"samples", arr}});
    });
  });

  s.Get(R"(/samples/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      std::lock_guard<std::mutex> lock(state_mutex_);
      const auto r = project_.find_sample(id);
      if (!r) return send_error(res, 404, "not_found", "unknown sample " + id);
      send_json(res, 200,
                {{"id", r->id},
                 {"seed", r->seed},
                 {"has_mask", project_.has_mask(id)},
                 {"image", "/samples/" + id + "/image"},
                 {"mask", "/samples/" + id + "/mask"}});
    });
  });

  s.Get(R"(/samples/([^/]+)/image)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      std::lock_guard<std::mutex> lock(state_mutex_);
      if (!project_.find_sample(id)) return send_error(res, 404, "not_found", "unknown sample " + id);
      send_png(res, read_file(project_.image_path(id)));
    });
  });

  s.Get(R"(/samples/([^/]+)/mask)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      std::lock_guard<std::mutex> lock(state_mutex_);
      if (!project_.find_sample(id)) return send_error(res, 404, "not_found", "unknown sample " + id);
      if (!project_.has_mask(id))
        return send_error(res, 404, "not_found", "sample " + id + " has no mask");
      send_png(res, read_file(project_.mask_path(id)));
    });
  });

  s.Put(R"(/samples/([^/]+)/mask)", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      std::lock_guard<std::mutex> lock(state_mutex_);
      if (!project_.find_sample(id)) return send_error(res, 404, "not_found", "unknown sample " + id);
      torch::Tensor labels;
      try {
        labels = decode_png_indexed(req.body);
      } catch (const Error& e) {
        return send_error(res, 422, code_name(e.code()), e.what());
      }
      const int n = project_.config().n_classes();
      auto flat = labels.contiguous();
      const uint8_t* p = flat.data_ptr<uint8_t>();
      for (int64_t i = 0; i < flat.numel(); ++i) {
        if (p[i] != kIgnoreLabel && p[i] >= n)
          return send_error(res, 422, "invalid_mask_value",
                            "mask value " + std::to_string(p[i]) + " is outside the palette",
                            {{"value", p[i]},
                             {"x", i % flat.size(1)},
                             {"y", i / flat.size(1)}});
      }
      const auto image = load_image(project_.image_path(id));
      if (labels.size(0) != image.height() || labels.size(1) != image.width())
        return send_error(res, 422, "shape_mismatch",
                          "mask is " + std::to_string(labels.size(1)) + "x" +
                              std::to_string(labels.size(0)) + " but the sample is " +
                              std::to_string(image.width()) + "x" + std::to_string(image.height()));
      write_file_atomic(project_.mask_path(id), req.body);
      send_json(res, 200, {{"id", id}, {"bytes", req.body.size()}});
    });
  });

  s.Post("/train", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      std::optional<SegmenterVariant> arch;
      int shots = 0;
      if (!req.body.empty()) {
        const auto body = json::parse(req.body);
        if (body.contains("arch")) arch = parse_variant(body.at("arch").get<std::string>());
        shots = body.value("shots", 0);
      }
      if (!std::filesystem::exists(project_.generator_path()))
        return send_error(res, 412, "precondition",
                          "missing generator checkpoint " + project_.generator_path().string());
      {
        std::lock_guard<std::mutex> lock(state_mutex_);
        if (status_.state != JobState::running && project_.annotated_ids().empty())
          return send_error(res, 422, "precondition", "no annotations");
      }
      std::string error;
      if (!start_training(arch, shots, error)) return send_error(res, 409, "conflict", error);
      send_json(res, 202, status().to_json());
    });
  });

  s.Get("/train/status", [this](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, status().to_json());
  });

  s.Post("/predict", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto palette = project_.config().palette();
      const auto type = req.get_header_value("Content-Type");
      std::lock_guard<std::mutex> lock(predict_mutex_);
      if (type.rfind("image/png", 0) == 0) {
        Image image;
        try {
          image = decode_png_rgb(req.body);
        } catch (const Error& e) {
          return send_error(res, 422, code_name(e.code()), e.what());
        }
        const bool fast = req.get_param_value("fast") == "1";
        std::optional<int> steps;
        if (req.has_param("steps")) steps = std::stoi(req.get_param_value("steps"));
        return send_json(res, 200, prediction_json(predict_image(project_, image, fast, steps), palette));
      }
      const auto body = json::parse(req.body);
      const auto id = body.at("sample_id").get<std::string>();
      if (!project_.find_sample(id)) return send_error(res, 404, "not_found", "unknown sample " + id);
      auto j = prediction_json(predict_sample(project_, id), palette);
      j["sample_id"] = id;
      send_json(res, 200, j);
    });
  });

  s.Get("/classes", [this](const httplib::Request&, httplib::Response& res) {
    json arr = json::array();
    const auto& classes = project_.config().classes;
    for (size_t i = 0; i < classes.size(); ++i)
      arr.push_back({{"index", i}, {"name", classes[i].name}, {"color", classes[i].color}});
    send_json(res, 200, {{"classes", arr}, {"ignore", kIgnoreLabel}});
  });
}

}  // namespace partseg
