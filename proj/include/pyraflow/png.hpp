#pragma once

#include <png.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <span>
#include <string>
#include <vector>

#include "pyraflow/error.hpp"
#include "pyraflow/raster.hpp"

namespace pyraflow::png {

namespace detail {

inline std::uint32_t format_for(int channels) {
  switch (channels) {
    case 1: return PNG_FORMAT_GRAY;
    case 2: return PNG_FORMAT_GA;
    case 3: return PNG_FORMAT_RGB;
    default: throw TypeError("png: unsupported channel count " + std::to_string(channels));
  }
}

}  // namespace detail

// Lossless 8-bit encode. Channels 1 (gray), 2 (gray + alpha) or 3 (RGB).
inline std::vector<std::uint8_t> encode(const Raster& r) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = std::uint32_t(r.width);
  image.height = std::uint32_t(r.height);
  image.format = detail::format_for(r.channels);

  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, r.data.data(), 0, nullptr))
    throw FormatError(std::string("png encode: ") + image.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, r.data.data(), 0, nullptr))
    throw FormatError(std::string("png encode: ") + image.message);
  out.resize(size);
  return out;
}

// Decodes to the file's native layout: gray stays 1 channel, gray+alpha stays 2,
// colour becomes 3 channels (an alpha channel is composited onto white).
inline Raster decode(std::span<const std::uint8_t> bytes) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&image, bytes.data(), bytes.size()))
    throw FormatError(std::string("png decode: ") + image.message);

  int channels = 3;
  if (!(image.format & PNG_FORMAT_FLAG_COLOR))
    channels = (image.format & PNG_FORMAT_FLAG_ALPHA) ? 2 : 1;
  image.format = detail::format_for(channels);

  Raster out(int(image.width), int(image.height), channels);
  png_color white{255, 255, 255};
  if (!png_image_finish_read(&image, &white, out.data.data(), 0, nullptr)) {
    png_image_free(&image);
    throw FormatError(std::string("png decode: ") + image.message);
  }
  return out;
}

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), std::streamsize(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

inline Raster read_file(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  try {
    return decode(bytes);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

inline void write_file(const std::filesystem::path& path, const Raster& r) {
  write_file_bytes(path, encode(r));
}

}  // namespace pyraflow::png
