#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <torch/torch.h>

namespace partseg {

// RGB image, float32 tensor (3, H, W) with values in [-1, 1] (generator range).
struct Image {
  torch::Tensor pixels;

  int64_t height() const { return pixels.size(1); }
  int64_t width() const { return pixels.size(2); }
};

// 8-bit RGB PNG <-> Image.
std::string encode_png_rgb(const Image& image);
Image decode_png_rgb(std::string_view bytes);

// Single-channel indexed-palette PNG. `labels` is uint8 (H, W); `palette`
// supplies RGB colors for the first entries, the rest are filled in grey.
std::string encode_png_indexed(const torch::Tensor& labels,
                               const std::vector<std::array<uint8_t, 3>>& palette);
torch::Tensor decode_png_indexed(std::string_view bytes);

void save_image(const std::filesystem::path& path, const Image& image);
Image load_image(const std::filesystem::path& path);

}  // namespace partseg
