#pragma once

// Single-file tensor archive used for generator checkpoints, segmenter
// models, latent files, distillation targets and representation spills.
//
// Layout (little endian):
//   magic "PSTA" | u32 format_version | u64 payload_size | payload | u32 crc32
// payload:
//   u32 header_size | header (JSON text) | u32 tensor_count |
//   tensor_count x { u32 name_size | name | u8 dtype | u32 ndim |
//                    ndim x i64 dims | raw data }
// dtype: 0 = float32, 1 = int64, 2 = uint8. The CRC covers the payload only.

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>
#include <torch/torch.h>

namespace partseg {

inline constexpr std::uint32_t kArchiveFormatVersion = 1;

struct TensorArchive {
  nlohmann::json header = nlohmann::json::object();
  std::vector<std::pair<std::string, torch::Tensor>> tensors;

  void put(std::string name, const torch::Tensor& t);
  bool has(const std::string& name) const;
  // Throws not_found naming the tensor.
  const torch::Tensor& get(const std::string& name) const;

  std::string serialize() const;
  static TensorArchive deserialize(std::string_view bytes);

  void save(const std::filesystem::path& path) const;
  static TensorArchive load(const std::filesystem::path& path);
};

std::uint32_t crc32_of(std::string_view bytes);

std::string read_file(const std::filesystem::path& path);
// Writes to a sibling temp file and renames, so readers never observe a
// partially written file.
void write_file_atomic(const std::filesystem::path& path, std::string_view bytes);

}  // namespace partseg
