#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace nnc {

// Decoded 8-bit RGB image, row-major, interleaved channels.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> rgb;  // height * width * 3
};

// Throws DataError on undecodable input, IoError on filesystem failure.
Image decode_image(const std::string& path);

// Cheap signature check used while scanning dataset folders.
bool looks_decodable(const std::string& path);

Image decode_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

}  // namespace nnc
