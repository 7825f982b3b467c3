#include "slrf/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "slrf/common.hpp"

namespace slrf {

uint8_t quantize8(float v) {
  float c = v < 0.0f ? 0.0f : (v > 1.0f ? 1.0f : v);
  return static_cast<uint8_t>(std::lround(c * 255.0f));
}

float max_abs_diff(const Image& a, const Image& b) {
  if (!a.same_dims(b)) fail_usage("max_abs_diff: image dimensions differ");
  float m = 0.0f;
  for (size_t i = 0; i < a.pixels.size(); ++i)
    m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

void save_png(const Image& img, const std::string& path) {
  if (img.channels != 1 && img.channels != 3 && img.channels != 4)
    fail_usage("save_png: unsupported channel count");
  std::string tmp = path + ".tmp";
  FILE* fp = std::fopen(tmp.c_str(), "wb");
  if (!fp) fail_io("cannot open for write: " + tmp);

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                            nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    std::fclose(fp);
    png_destroy_write_struct(&png, &info);
    fail_io("png write failure: " + path);
  }
  png_init_io(png, fp);
  int color = img.channels == 1 ? PNG_COLOR_TYPE_GRAY
              : img.channels == 3 ? PNG_COLOR_TYPE_RGB
                                  : PNG_COLOR_TYPE_RGBA;
  png_set_IHDR(png, info, img.width, img.height, 8, color,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);

  std::vector<uint8_t> row(static_cast<size_t>(img.width) * img.channels);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[static_cast<size_t>(x) * img.channels + c] = quantize8(img.at(x, y, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);

  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) fail_io("cannot move image into place: " + path + ": " + ec.message());
}

Image load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) fail_io("cannot open image: " + path);
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr,
                                           nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    std::fclose(fp);
    png_destroy_read_struct(&png, &info, nullptr);
    fail_io("png read failure: " + path);
  }
  png_init_io(png, fp);
  png_read_info(png, info);

  png_uint_32 w = png_get_image_width(png, info);
  png_uint_32 h = png_get_image_height(png, info);
  png_byte color = png_get_color_type(png, info);
  png_byte depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_read_update_info(png, info);

  int channels = png_get_channels(png, info);
  Image img(static_cast<int>(w), static_cast<int>(h), channels);
  std::vector<uint8_t> row(static_cast<size_t>(w) * channels);
  for (png_uint_32 y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 x = 0; x < w; ++x)
      for (int c = 0; c < channels; ++c)
        img.at(static_cast<int>(x), static_cast<int>(y), c) =
            row[static_cast<size_t>(x) * channels + c] / 255.0f;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

}  // namespace slrf
