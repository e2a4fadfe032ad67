#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "pyraflow/png.hpp"
#include "pyraflow/pyramid.hpp"

// On-disk slide container:
//
//   <dir>/manifest.json
//   <dir>/level_<l>/<col>_<row>.png
//
// Tiles are lossless 8-bit PNGs with the manifest's channel count; edge tiles
// keep their true (smaller) size.

namespace pyraflow {

inline constexpr int kContainerFormatVersion = 1;

namespace detail {

inline std::filesystem::path tile_path(const std::filesystem::path& dir, const TileKey& k) {
  return dir / ("level_" + std::to_string(k.level)) / (std::to_string(k.col) + "_" + std::to_string(k.row) + ".png");
}

}  // namespace detail

// Level backed by the tile files of a container; decodes on every read.
class ContainerStore final : public LevelStore {
 public:
  ContainerStore(std::filesystem::path dir, int level, int width, int height, int channels, int tile_size,
                 std::atomic<std::uint64_t>& counter)
      : dir_(std::move(dir)), level_(level), width_(width), height_(height), channels_(channels),
        tile_size_(tile_size), counter_(&counter) {}

  StorageKind kind() const override { return StorageKind::tiled_file; }
  bool writable() const override { return false; }
  void write(const Rect&, std::span<const std::uint8_t>) override {
    throw Error("container level " + std::to_string(level_) + " is read-only");
  }

  void read(const Rect& r, std::span<std::uint8_t> out) const override {
    const int ts = tile_size_;
    for (int row = r.y / ts; row <= (r.bottom() - 1) / ts; ++row) {
      for (int col = r.x / ts; col <= (r.right() - 1) / ts; ++col) {
        const Rect tr{col * ts, row * ts, std::min(ts, width_ - col * ts), std::min(ts, height_ - row * ts)};
        const Raster tile = load({level_, col, row}, tr);
        const Rect part = intersect(tr, r);
        const std::size_t bytes = std::size_t(part.w) * channels_;
        for (int y = part.y; y < part.bottom(); ++y) {
          const auto* src = tile.row(y - tr.y) + std::size_t(part.x - tr.x) * channels_;
          auto* dst = out.data() + (std::size_t(y - r.y) * r.w + (part.x - r.x)) * channels_;
          std::copy_n(src, bytes, dst);
        }
      }
    }
  }

  Raster load(const TileKey& k, const Rect& expected) const {
    const auto path = detail::tile_path(dir_, k);
    if (!std::filesystem::exists(path)) throw FormatError("missing tile file " + path.string());
    Raster tile = png::read_file(path);
    counter_->fetch_add(1, std::memory_order_relaxed);
    if (tile.width != expected.w || tile.height != expected.h)
      throw FormatError("tile size mismatch in " + path.string() + ": expected " + std::to_string(expected.w) +
                        "x" + std::to_string(expected.h) + ", found " + std::to_string(tile.width) + "x" +
                        std::to_string(tile.height));
    if (tile.channels != channels_)
      throw FormatError("channel mismatch in " + path.string() + ": expected " + std::to_string(channels_) +
                        ", found " + std::to_string(tile.channels));
    return tile;
  }

 private:
  std::filesystem::path dir_;
  int level_, width_, height_, channels_, tile_size_;
  std::atomic<std::uint64_t>* counter_;
};

inline nlohmann::ordered_json manifest_json(const ImagePyramid& p) {
  nlohmann::ordered_json m;
  m["format_version"] = kContainerFormatVersion;
  m["width"] = p.width();
  m["height"] = p.height();
  m["channels"] = p.channels();
  m["tile_size"] = p.tile_size();
  m["base_magnification"] = p.base_magnification();
  auto levels = nlohmann::ordered_json::array();
  for (const auto& lv : p.levels()) {
    levels.push_back({{"index", lv.index},
                      {"width", lv.width},
                      {"height", lv.height},
                      {"cols", p.tile_cols(lv.index)},
                      {"rows", p.tile_rows(lv.index)}});
  }
  m["levels"] = std::move(levels);
  return m;
}

inline void save_container(const ImagePyramid& p, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& lv : p.levels()) {
    const auto level_dir = dir / ("level_" + std::to_string(lv.index));
    std::filesystem::create_directories(level_dir);
    for (int row = 0; row < p.tile_rows(lv.index); ++row) {
      for (int col = 0; col < p.tile_cols(lv.index); ++col) {
        const Tile t = p.read_tile({lv.index, col, row});
        Raster r;
        r.width = t.width;
        r.height = t.height;
        r.channels = t.channels;
        r.data = t.pixels;
        png::write_file(detail::tile_path(dir, t.key), r);
      }
    }
  }
  // Manifest last: a directory with a manifest is a complete container.
  std::ofstream out(dir / "manifest.json", std::ios::trunc);
  if (!out) throw FormatError("cannot write manifest in " + dir.string());
  out << manifest_json(p).dump(2) << "\n";
}

namespace detail {

template <typename T>
T manifest_field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("manifest: missing field '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception&) {
    throw FormatError(std::string("manifest: field '") + key + "' has the wrong type");
  }
}

}  // namespace detail

// Opens a container lazily: only the lowest-resolution level is decoded up
// front, finer tiles are decoded on access.
inline ImagePyramid open_container(const std::filesystem::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  std::ifstream in(manifest_path);
  if (!in) throw FormatError("missing manifest " + manifest_path.string());
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("corrupt manifest " + manifest_path.string() + ": " + e.what());
  }

  if (detail::manifest_field<int>(m, "format_version") != kContainerFormatVersion)
    throw FormatError("manifest: unsupported format_version");
  PyramidInfo info;
  info.width = detail::manifest_field<int>(m, "width");
  info.height = detail::manifest_field<int>(m, "height");
  info.channels = detail::manifest_field<int>(m, "channels");
  info.tile_size = detail::manifest_field<int>(m, "tile_size");
  info.base_magnification = detail::manifest_field<double>(m, "base_magnification");
  if (info.width < 1 || info.height < 1) throw FormatError("manifest: dimensions must be >= 1");
  if (info.channels != 1 && info.channels != 3) throw FormatError("manifest: channels must be 1 or 3");
  if (info.tile_size <= 0 || (info.tile_size & (info.tile_size - 1)) != 0)
    throw FormatError("manifest: tile_size must be a power of two");
  if (!(info.base_magnification > 0)) throw FormatError("manifest: base_magnification must be > 0");

  const auto& jl = m.contains("levels") ? m["levels"] : throw FormatError("manifest: missing field 'levels'");
  if (!jl.is_array() || jl.empty()) throw FormatError("manifest: 'levels' must be a non-empty array");

  auto counter = std::make_shared<std::atomic<std::uint64_t>>(0);
  std::vector<PyramidLevel> levels;
  std::vector<std::unique_ptr<LevelStore>> stores;
  for (std::size_t l = 0; l < jl.size(); ++l) {
    const auto& e = jl[l];
    const int index = detail::manifest_field<int>(e, "index");
    const int w = detail::manifest_field<int>(e, "width");
    const int h = detail::manifest_field<int>(e, "height");
    const int cols = detail::manifest_field<int>(e, "cols");
    const int rows = detail::manifest_field<int>(e, "rows");
    if (index != int(l)) throw FormatError("manifest: levels must be listed in order from 0");
    if (l >= 31 || w != ceil_div(info.width, std::int64_t(1) << l) || h != ceil_div(info.height, std::int64_t(1) << l))
      throw FormatError("manifest: level " + std::to_string(l) + " size " + std::to_string(w) + "x" +
                        std::to_string(h) + " violates the halving rule");
    if (cols != ceil_div(w, info.tile_size) || rows != ceil_div(h, info.tile_size))
      throw FormatError("manifest: level " + std::to_string(l) + " tile grid does not match tile_size");
    levels.push_back({int(l), w, h, StorageKind::tiled_file, std::uint64_t(w) * h * info.channels});
    stores.push_back(std::make_unique<ContainerStore>(dir, int(l), w, h, info.channels, info.tile_size, *counter));
  }

  // The lowest level is decoded up front and kept in RAM.
  auto& lowest = levels.back();
  const Rect all{0, 0, lowest.width, lowest.height};
  Raster pixels(lowest.width, lowest.height, info.channels);
  stores.back()->read(all, pixels.data);
  auto ram = std::make_unique<RamStore>(lowest.width, lowest.height, info.channels);
  ram->write(all, pixels.data);
  lowest.storage = StorageKind::ram;
  stores.back() = std::move(ram);
  return ImagePyramid(info, std::move(levels), std::move(stores), nullptr, std::move(counter));
}

namespace detail {

// Binary PGM (P5) / PPM (P6), 8-bit.
inline Raster decode_pnm(std::span<const std::uint8_t> bytes) {
  std::string head(bytes.begin(), bytes.begin() + std::min<std::size_t>(bytes.size(), 512));
  std::istringstream ss(head);
  std::string magic;
  ss >> magic;
  const int channels = magic == "P5" ? 1 : magic == "P6" ? 3 : 0;
  if (!channels) throw FormatError("not a binary PGM/PPM image");
  auto next_int = [&]() {
    ss >> std::ws;
    while (ss.peek() == '#') {
      std::string comment;
      std::getline(ss, comment);
      ss >> std::ws;
    }
    int v = -1;
    if (!(ss >> v)) throw FormatError("truncated PNM header");
    return v;
  };
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (w < 1 || h < 1 || maxval != 255) throw FormatError("unsupported PNM header");
  const auto data_start = std::size_t(ss.tellg()) + 1;
  const std::size_t need = std::size_t(w) * h * channels;
  if (bytes.size() < data_start + need) throw FormatError("truncated PNM payload");
  Raster r(w, h, channels);
  std::copy_n(bytes.begin() + std::ptrdiff_t(data_start), need, r.data.begin());
  return r;
}

inline Raster decode_flat(std::span<const std::uint8_t> bytes) {
  static constexpr std::uint8_t png_sig[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::equal(std::begin(png_sig), std::end(png_sig), bytes.begin())) {
    Raster r = png::decode(bytes);
    if (r.channels == 2) {  // composite gray + alpha onto white
      Raster g(r.width, r.height, 1);
      for (std::size_t i = 0; i < g.data.size(); ++i) {
        const unsigned v = r.data[2 * i], a = r.data[2 * i + 1];
        g.data[i] = std::uint8_t((v * a + 255u * (255u - a) + 127u) / 255u);
      }
      return g;
    }
    return r;
  }
  if (bytes.size() >= 2 && bytes[0] == 'P') return decode_pnm(bytes);
  throw FormatError("undecodable image (expected PNG or binary PGM/PPM)");
}

}  // namespace detail

// Level 0 is the source image; each coarser level is the 2x2 box average of
// the one above it.
inline ImagePyramid import_flat_image(const std::filesystem::path& path, const PyramidPolicy& policy = {},
                                      double base_magnification = 40.0) {
  Raster src;
  try {
    src = detail::decode_flat(png::read_file_bytes(path));
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  ImagePyramid p = create_pyramid(src.width, src.height, src.channels, policy, base_magnification);
  p.write_region(0, 0, 0, src);
  rebuild_lower_levels(p);
  return p;
}

}  // namespace pyraflow
