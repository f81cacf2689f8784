#pragma once

// HTTP front for the annotate -> train -> preview loop. JSON bodies except
// image and mask payloads, which are PNG (RGB images, indexed masks).

#include <atomic>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>

#include <json.hpp>

#include "partseg/pipeline.hpp"

namespace httplib {
class Server;
}

namespace partseg {

enum class JobState { idle, running, done, failed };
std::string to_string(JobState s);

struct JobStatus {
  JobState state = JobState::idle;
  int epoch = 0;
  int epochs = 0;
  double loss = 0.0;
  std::string reason;     // failed only
  nlohmann::json metrics;  // done only
  uint64_t generation = 0;  // bumps on every state change

  nlohmann::json to_json() const;
};

class PipelineServer {
 public:
  explicit PipelineServer(Project project);
  ~PipelineServer();

  PipelineServer(const PipelineServer&) = delete;
  PipelineServer& operator=(const PipelineServer&) = delete;

  // Binds and serves on a background thread; port 0 picks a free port.
  // Returns the bound port.
  int start(const std::string& host = "127.0.0.1", int port = 0);
  // Blocks serving on the calling thread.
  void serve_forever(const std::string& host, int port);
  void stop();

  JobStatus status() const;
  // Blocks until the current job (if any) has finished.
  void wait_for_job();

 private:
  void install_routes();
  bool start_training(std::optional<SegmenterVariant> arch, int shots, std::string& error);

  Project project_;
  std::unique_ptr<httplib::Server> http_;
  std::thread listener_;

  mutable std::mutex state_mutex_;  // guards status_ and registry/mask writes
  JobStatus status_;
  std::thread job_;
  std::mutex predict_mutex_;
};

}  // namespace partseg
