#pragma once

#include <harmonia/image.hpp>

#include <string>
#include <string_view>

namespace harmonia {

struct DecodedImage {
  ImageTensor image;
  int bit_depth = 8;
};

/// Decodes 8- or 16-bit PNG. Palettes expand to RGB; alpha is dropped.
/// `source` names the origin in error messages.
DecodedImage decode_png(std::string_view bytes, const std::string& source = "<memory>");
std::string encode_png(const ImageTensor& img, int bit_depth = 8);
std::string encode_png(const MaskTensor& mask, int bit_depth = 8);

DecodedImage load_image_with_depth(const std::string& path);
ImageTensor load_image(const std::string& path);
/// Loads a mask; RGB inputs are reduced to luma.
MaskTensor load_mask(const std::string& path);
MaskTensor mask_from_image(const ImageTensor& img);

void save_image(const ImageTensor& img, const std::string& path, int bit_depth = 8);
void save_mask(const MaskTensor& mask, const std::string& path, int bit_depth = 8);

std::string read_file(const std::string& path);
void write_file(const std::string& path, std::string_view bytes);

}  // namespace harmonia
