#pragma once

#include <filesystem>
#include <random>
#include <string>

#include <torch/torch.h>

#include "partseg/error.hpp"

namespace testing {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::mt19937_64 rng(std::random_device{}());
    path_ = std::filesystem::temp_directory_path() /
            ("partseg_" + tag + "_" + std::to_string(rng()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename Fn>
partseg::ErrorCode error_code_of(Fn&& fn) {
  try {
    fn();
  } catch (const partseg::Error& e) {
    return e.code();
  }
  throw std::runtime_error("expected partseg::Error");
}

template <typename Fn>
std::string error_text_of(Fn&& fn) {
  try {
    fn();
  } catch (const partseg::Error& e) {
    return e.what();
  }
  throw std::runtime_error("expected partseg::Error");
}

inline torch::Tensor random_labels(int64_t h, int64_t w, int n, uint64_t seed) {
  auto g = at::make_generator<at::CPUGeneratorImpl>(seed);
  return torch::randint(0, n, {h, w}, g, torch::kUInt8);
}

}  // namespace testing
