#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "lara/common.hpp"

namespace lara {

/// Row-major 8-bit image, 1 (gray) or 3 (RGB) channels.
struct ImageU8 {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<uint8_t> data;

  uint8_t& at(int row, int col, int ch) {
    return data[static_cast<size_t>((row * width + col) * channels + ch)];
  }
  uint8_t at(int row, int col, int ch) const {
    return data[static_cast<size_t>((row * width + col) * channels + ch)];
  }
};

/// Minimal PNG codec: 8-bit gray or RGB, non-interlaced. The writer always
/// emits filter type 0; the reader handles all five standard filters.
std::vector<uint8_t> encode_png(const ImageU8& img);
ImageU8 decode_png(const std::vector<uint8_t>& bytes);
void write_png(const ImageU8& img, const std::string& path);
ImageU8 read_png(const std::string& path);

/// Binary PGM (P5, maxval 255), single channel.
void write_pgm(const ImageU8& img, const std::string& path);
ImageU8 read_pgm(const std::string& path);

std::vector<uint8_t> read_file_bytes(const std::string& path);
void write_file_bytes(const std::string& path, const std::vector<uint8_t>& bytes);

}  // namespace lara
