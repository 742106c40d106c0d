#include <harmonia/image_io.hpp>

#include <harmonia/error.hpp>

#include <png.h>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <vector>

namespace harmonia {
namespace {

struct ReadCursor {
  std::string_view bytes;
  std::size_t offset = 0;
};

void read_callback(png_structp png, png_bytep out, png_size_t count) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + count > cursor->bytes.size()) png_error(png, "unexpected end of data");
  std::memcpy(out, cursor->bytes.data() + cursor->offset, count);
  cursor->offset += count;
}

void write_callback(png_structp png, png_bytep data, png_size_t count) {
  auto* sink = static_cast<std::string*>(png_get_io_ptr(png));
  sink->append(reinterpret_cast<const char*>(data), count);
}

void flush_callback(png_structp) {}

[[noreturn]] void error_callback(png_structp, png_const_charp msg) {
  throw std::runtime_error(msg);
}

void warning_callback(png_structp, png_const_charp) {}

bool has_png_extension(const std::string& path) {
  auto ext = std::filesystem::path(path).extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(),
                 [](unsigned char ch) { return char(std::tolower(ch)); });
  return ext == ".png";
}

std::string encode_raw(const float* data, int height, int width, int channels, int bit_depth) {
  if (bit_depth != 8 && bit_depth != 16) throw std::invalid_argument("encode_png: bit depth must be 8 or 16");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback,
                                            warning_callback);
  if (!png) throw std::runtime_error("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  std::string sink;
  try {
    png_set_write_fn(png, &sink, write_callback, flush_callback);
    const int color = channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB;
    png_set_IHDR(png, info, png_uint_32(width), png_uint_32(height), bit_depth, color,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const double scale = bit_depth == 8 ? 255.0 : 65535.0;
    const std::size_t bytes_per = bit_depth == 8 ? 1 : 2;
    std::vector<png_byte> row(std::size_t(width) * channels * bytes_per);
    for (int y = 0; y < height; ++y) {
      const float* src = data + std::ptrdiff_t(y) * width * channels;
      for (int i = 0; i < width * channels; ++i) {
        const double v = std::clamp(double(src[i]), 0.0, 1.0);
        const auto q = static_cast<unsigned>(std::lround(v * scale));
        if (bit_depth == 8) {
          row[std::size_t(i)] = png_byte(q);
        } else {
          row[2 * std::size_t(i)] = png_byte(q >> 8);
          row[2 * std::size_t(i) + 1] = png_byte(q & 0xff);
        }
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return sink;
}

}  // namespace

DecodedImage decode_png(std::string_view bytes, const std::string& source) {
  if (bytes.size() < 8 || png_sig_cmp(reinterpret_cast<png_const_bytep>(bytes.data()), 0, 8) != 0) {
    throw IoError(source, "not a PNG stream");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, error_callback,
                                           warning_callback);
  if (!png) throw IoError(source, "png_create_read_struct failed");
  png_infop info = png_create_info_struct(png);
  ReadCursor cursor{bytes, 0};
  DecodedImage out;
  try {
    png_set_read_fn(png, &cursor, read_callback);
    png_read_info(png, info);
    const int color = png_get_color_type(png, info);
    int depth = png_get_bit_depth(png, info);
    if (color == PNG_COLOR_TYPE_PALETTE) {
      png_set_palette_to_rgb(png);
      depth = 8;
    }
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) {
      png_set_expand_gray_1_2_4_to_8(png);
      depth = 8;
    }
    if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    png_read_update_info(png, info);
    const int width = int(png_get_image_width(png, info));
    const int height = int(png_get_image_height(png, info));
    const int channels = int(png_get_channels(png, info));
    depth = png_get_bit_depth(png, info);
    if (channels != 1 && channels != 3) throw std::runtime_error("unsupported channel layout");
    const std::size_t rowbytes = png_get_rowbytes(png, info);
    std::vector<png_byte> buffer(rowbytes * std::size_t(height));
    std::vector<png_bytep> rows(static_cast<std::size_t>(height));
    for (int y = 0; y < height; ++y) rows[std::size_t(y)] = buffer.data() + rowbytes * std::size_t(y);
    png_read_image(png, rows.data());
    png_read_end(png, nullptr);

    out.bit_depth = depth;
    out.image = ImageTensor(height, width, channels);
    auto& data = out.image.data();
    const std::size_t n = std::size_t(width) * height * channels;
    if (depth == 16) {
      for (std::size_t i = 0; i < n; ++i) {
        const unsigned v = (unsigned(buffer[2 * i]) << 8) | buffer[2 * i + 1];
        data[Eigen::Index(i)] = float(v / 65535.0);
      }
    } else {
      for (std::size_t i = 0; i < n; ++i) data[Eigen::Index(i)] = float(buffer[i] / 255.0);
    }
  } catch (const std::exception& e) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(source, std::string("decode failed: ") + e.what());
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return out;
}

std::string encode_png(const ImageTensor& img, int bit_depth) {
  return encode_raw(img.data().data(), img.height(), img.width(), img.channels(), bit_depth);
}

std::string encode_png(const MaskTensor& mask, int bit_depth) {
  return encode_raw(mask.data().data(), mask.height(), mask.width(), 1, bit_depth);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(path, "cannot open for reading");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError(path, "cannot open for writing");
  out.write(bytes.data(), std::streamsize(bytes.size()));
  if (!out) throw IoError(path, "write failed");
}

DecodedImage load_image_with_depth(const std::string& path) {
  if (!has_png_extension(path)) throw IoError(path, "unsupported extension (expected .png)");
  return decode_png(read_file(path), path);
}

ImageTensor load_image(const std::string& path) { return load_image_with_depth(path).image; }

MaskTensor mask_from_image(const ImageTensor& img) {
  const ImageTensor luma = to_luma(img);
  MaskTensor mask = MaskTensor::from_data(luma.height(), luma.width(), luma.data());
  if (img.channels() == 3) {
    // Gray-valued RGB masks keep their exact stored value.
    for (Eigen::Index p = 0; p < img.pixels(); ++p) {
      const float r = img.data()[3 * p];
      if (r == img.data()[3 * p + 1] && r == img.data()[3 * p + 2]) mask.data()[p] = r;
    }
  }
  mask.data() = mask.data().max(0.0f).min(1.0f);
  return mask;
}

MaskTensor load_mask(const std::string& path) { return mask_from_image(load_image(path)); }

void save_image(const ImageTensor& img, const std::string& path, int bit_depth) {
  if (!has_png_extension(path)) throw IoError(path, "unsupported extension (expected .png)");
  write_file(path, encode_png(img, bit_depth));
}

void save_mask(const MaskTensor& mask, const std::string& path, int bit_depth) {
  if (!has_png_extension(path)) throw IoError(path, "unsupported extension (expected .png)");
  write_file(path, encode_png(mask, bit_depth));
}

}  // namespace harmonia
