#include "partseg/image_io.hpp"

#include <csetjmp>
#include <cstring>

#include <png.h>

#include "partseg/error.hpp"
#include "partseg/tensor_archive.hpp"

namespace partseg {
namespace {

struct MemoryReader {
  std::string_view bytes;
  size_t pos = 0;
};

void read_callback(png_structp png, png_bytep out, png_size_t n) {
  auto* r = static_cast<MemoryReader*>(png_get_io_ptr(png));
  if (n > r->bytes.size() - r->pos) png_error(png, "truncated PNG data");
  std::memcpy(out, r->bytes.data() + r->pos, n);
  r->pos += n;
}

void write_callback(png_structp png, png_bytep data, png_size_t n) {
  auto* out = static_cast<std::string*>(png_get_io_ptr(png));
  out->append(reinterpret_cast<const char*>(data), n);
}

void flush_callback(png_structp) {}

void error_callback(png_structp png, png_const_charp msg) {
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void warning_callback(png_structp, png_const_charp) {}

struct DecodedPng {
  uint32_t width = 0;
  uint32_t height = 0;
  int color_type = 0;
  std::vector<uint8_t> rows;  // tightly packed, channels per color type
  int channels = 0;
};

// Decodes without any palette expansion so indexed images keep their indices.
DecodedPng decode(std::string_view bytes, bool expand_to_rgb) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0)
    fail(ErrorCode::corrupt, "not a PNG file");

  std::string message;
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, &message, error_callback, warning_callback);
  png_infop info = png_create_info_struct(png);
  MemoryReader reader{bytes};
  DecodedPng out;
  std::vector<png_bytep> row_ptrs;

  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::corrupt, "PNG decode failed: " + message);
  }
  png_set_read_fn(png, &reader, read_callback);
  png_read_info(png, info);
  out.width = png_get_image_width(png, info);
  out.height = png_get_image_height(png, info);
  out.color_type = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (static_cast<uint64_t>(out.width) * out.height > (1ull << 28)) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(ErrorCode::invalid_argument, "PNG too large");
  }

  if (expand_to_rgb) {
    if (depth == 16) png_set_strip_16(png);
    if (out.color_type == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (out.color_type == PNG_COLOR_TYPE_GRAY || out.color_type == PNG_COLOR_TYPE_GRAY_ALPHA)
      png_set_gray_to_rgb(png);
    if (out.color_type == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
    png_set_strip_alpha(png);
  } else if (depth < 8) {
    png_set_packing(png);
  } else if (depth == 16) {
    png_set_strip_16(png);
  }
  png_read_update_info(png, info);
  out.channels = png_get_channels(png, info);
  const size_t rowbytes = png_get_rowbytes(png, info);
  out.rows.resize(rowbytes * out.height);
  row_ptrs.resize(out.height);
  for (uint32_t y = 0; y < out.height; ++y) row_ptrs[y] = out.rows.data() + y * rowbytes;
  png_read_image(png, row_ptrs.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

std::string encode(uint32_t width, uint32_t height, int color_type, const uint8_t* data,
                   int channels, const std::vector<png_color>* palette) {
  std::string bytes;
  std::string message;
  png_structp png =
      png_create_write_struct(PNG_LIBPNG_VER_STRING, &message, error_callback, warning_callback);
  png_infop info = png_create_info_struct(png);
  std::vector<png_bytep> rows(height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    fail(ErrorCode::io, "PNG encode failed: " + message);
  }
  png_set_write_fn(png, &bytes, write_callback, flush_callback);
  png_set_IHDR(png, info, width, height, 8, color_type, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  if (palette)
    png_set_PLTE(png, info, palette->data(), static_cast<int>(palette->size()));
  png_write_info(png, info);
  for (uint32_t y = 0; y < height; ++y)
    rows[y] = const_cast<png_bytep>(data + static_cast<size_t>(y) * width * channels);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return bytes;
}

}  // namespace

std::string encode_png_rgb(const Image& image) {
  require(image.pixels.dim() == 3 && image.pixels.size(0) == 3, ErrorCode::shape_mismatch,
          "encode_png_rgb: expected (3,H,W)");
  auto hwc = ((image.pixels.detach().cpu().to(torch::kFloat32).clamp(-1, 1) + 1) * 127.5)
                 .round()
                 .to(torch::kUInt8)
                 .permute({1, 2, 0})
                 .contiguous();
  return encode(static_cast<uint32_t>(image.width()), static_cast<uint32_t>(image.height()),
                PNG_COLOR_TYPE_RGB, hwc.data_ptr<uint8_t>(), 3, nullptr);
}

Image decode_png_rgb(std::string_view bytes) {
  auto png = decode(bytes, true);
  require(png.channels == 3, ErrorCode::corrupt, "decode_png_rgb: unexpected channel count");
  auto hwc = torch::from_blob(png.rows.data(), {png.height, png.width, 3}, torch::kUInt8).clone();
  return Image{hwc.permute({2, 0, 1}).contiguous().to(torch::kFloat32) / 127.5 - 1.0};
}

std::string encode_png_indexed(const torch::Tensor& labels,
                               const std::vector<std::array<uint8_t, 3>>& palette) {
  require(labels.dim() == 2 && labels.scalar_type() == torch::kUInt8, ErrorCode::shape_mismatch,
          "encode_png_indexed: expected uint8 (H,W)");
  std::vector<png_color> colors(256);
  for (int i = 0; i < 256; ++i) {
    if (i < static_cast<int>(palette.size())) {
      colors[i] = {palette[i][0], palette[i][1], palette[i][2]};
    } else {
      auto g = static_cast<png_byte>(i);
      colors[i] = {g, g, g};
    }
  }
  auto c = labels.contiguous();
  return encode(static_cast<uint32_t>(c.size(1)), static_cast<uint32_t>(c.size(0)),
                PNG_COLOR_TYPE_PALETTE, c.data_ptr<uint8_t>(), 1, &colors);
}

torch::Tensor decode_png_indexed(std::string_view bytes) {
  auto png = decode(bytes, false);
  require(png.color_type == PNG_COLOR_TYPE_PALETTE || png.color_type == PNG_COLOR_TYPE_GRAY,
          ErrorCode::corrupt, "annotation PNG must be indexed or 8-bit grey");
  require(png.channels == 1, ErrorCode::corrupt, "annotation PNG must have one channel");
  return torch::from_blob(png.rows.data(), {png.height, png.width}, torch::kUInt8).clone();
}

void save_image(const std::filesystem::path& path, const Image& image) {
  write_file_atomic(path, encode_png_rgb(image));
}

Image load_image(const std::filesystem::path& path) {
  return decode_png_rgb(read_file(path));
}

}  // namespace partseg
