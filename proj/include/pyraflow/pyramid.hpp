#pragma once

#include <fcntl.h>
#include <sys/mman.h>
#include <sys/statvfs.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "pyraflow/error.hpp"
#include "pyraflow/raster.hpp"

namespace pyraflow {

enum class StorageKind {
  ram,          // heap buffer
  file_mapped,  // memory-mapped scratch file
  tiled_file,   // lazily decoded tiles of an on-disk container
  procedural,   // pixels computed on demand
};

inline const char* to_string(StorageKind k) {
  switch (k) {
    case StorageKind::ram: return "ram";
    case StorageKind::file_mapped: return "file_mapped";
    case StorageKind::tiled_file: return "tiled_file";
    case StorageKind::procedural: return "procedural";
  }
  return "?";
}

struct PyramidPolicy {
  std::uint64_t memory_map_threshold_bytes = 512ull << 20;
  int min_level_extent = 4096;
  int tile_size = 256;
  // Where file-mapped levels put their backing files; empty means the system temp dir.
  std::filesystem::path scratch_root;

  void validate() const {
    if (memory_map_threshold_bytes == 0) throw ConfigError("memory_map_threshold_bytes must be > 0");
    if (min_level_extent <= 0) throw ConfigError("min_level_extent must be > 0");
    if (tile_size <= 0 || (tile_size & (tile_size - 1)) != 0)
      throw ConfigError("tile_size must be a positive power of two");
  }
};

struct LevelExtent {
  int width = 0;
  int height = 0;
  friend bool operator==(const LevelExtent&, const LevelExtent&) = default;
};

// Halving ladder: level l is ceil(w/2^l) x ceil(h/2^l). A level is only added
// while at least one of its dimensions reaches min_level_extent; level 0 always
// exists. The ladder also ends once a 1x1 level has been produced.
inline std::vector<LevelExtent> plan_levels(int width, int height, const PyramidPolicy& policy) {
  if (width < 1 || height < 1) throw RangeError("plan_levels: dimensions must be >= 1");
  policy.validate();
  std::vector<LevelExtent> levels{{width, height}};
  for (int l = 1; l < 31; ++l) {
    const auto& prev = levels.back();
    if (prev.width == 1 && prev.height == 1) break;
    const LevelExtent next{ceil_div(width, std::int64_t(1) << l), ceil_div(height, std::int64_t(1) << l)};
    if (next.width < policy.min_level_extent && next.height < policy.min_level_extent) break;
    levels.push_back(next);
  }
  return levels;
}

struct TileKey {
  int level = 0;
  int col = 0;
  int row = 0;
  friend bool operator==(const TileKey&, const TileKey&) = default;
  friend auto operator<=>(const TileKey&, const TileKey&) = default;
};

struct TileKeyHash {
  std::size_t operator()(const TileKey& k) const noexcept {
    std::uint64_t h = std::uint64_t(std::uint32_t(k.level)) * 0x9E3779B97F4A7C15ull;
    h ^= (std::uint64_t(std::uint32_t(k.col)) << 32 | std::uint32_t(k.row)) + 0x7F4A7C15ull + (h << 6) + (h >> 2);
    return std::size_t(h);
  }
};

struct Tile {
  TileKey key;
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<std::uint8_t> pixels;

  std::size_t byte_size() const noexcept { return pixels.size(); }
};

struct PyramidLevel {
  int index = 0;
  int width = 0;
  int height = 0;
  StorageKind storage = StorageKind::ram;
  std::uint64_t byte_size = 0;
};

// Pixel storage for one level. Implementations must tolerate concurrent reads
// and concurrent writes to disjoint regions.
class LevelStore {
 public:
  virtual ~LevelStore() = default;
  virtual StorageKind kind() const = 0;
  virtual void read(const Rect& r, std::span<std::uint8_t> out) const = 0;
  virtual void write(const Rect& r, std::span<const std::uint8_t> in) = 0;
  virtual bool writable() const { return true; }
};

// Contiguous row-major level: the RAM and memory-mapped cases.
class DenseStore : public LevelStore {
 public:
  void read(const Rect& r, std::span<std::uint8_t> out) const override {
    const std::size_t row = std::size_t(r.w) * channels_;
    for (int y = 0; y < r.h; ++y)
      std::memcpy(out.data() + y * row, at(r.x, r.y + y), row);
  }

  void write(const Rect& r, std::span<const std::uint8_t> in) override {
    const std::size_t row = std::size_t(r.w) * channels_;
    for (int y = 0; y < r.h; ++y)
      std::memcpy(at(r.x, r.y + y), in.data() + y * row, row);
  }

 protected:
  DenseStore(int width, int channels) : width_(width), channels_(channels) {}

  std::uint8_t* at(int x, int y) const {
    return base_ + (std::size_t(y) * width_ + x) * channels_;
  }

  std::uint8_t* base_ = nullptr;
  int width_;
  int channels_;
};

class RamStore final : public DenseStore {
 public:
  RamStore(int width, int height, int channels) : DenseStore(width, channels) {
    const std::size_t bytes = std::size_t(width) * height * channels;
    // calloc hands back lazily zeroed pages for large blocks.
    buffer_.reset(static_cast<std::uint8_t*>(std::calloc(bytes ? bytes : 1, 1)));
    if (!buffer_) throw std::bad_alloc();
    base_ = buffer_.get();
  }

  StorageKind kind() const override { return StorageKind::ram; }

 private:
  struct Free {
    void operator()(std::uint8_t* p) const noexcept { std::free(p); }
  };
  std::unique_ptr<std::uint8_t, Free> buffer_;
};

class MappedStore final : public DenseStore {
 public:
  MappedStore(int level, const std::filesystem::path& file, int width, int height, int channels)
      : DenseStore(width, channels), path_(file), bytes_(std::size_t(width) * height * channels) {
    struct statvfs vfs {};
    if (::statvfs(file.parent_path().c_str(), &vfs) == 0) {
      const std::uint64_t avail = std::uint64_t(vfs.f_bavail) * vfs.f_frsize;
      if (avail < bytes_)
        throw CreationError(level, "insufficient disk space for " + std::to_string(bytes_) +
                                       " byte backing file " + file.string());
    }
    fd_ = ::open(file.c_str(), O_RDWR | O_CREAT | O_TRUNC | O_CLOEXEC, 0600);
    if (fd_ < 0) throw CreationError(level, "cannot create " + file.string() + ": " + std::strerror(errno));
    if (::ftruncate(fd_, off_t(bytes_)) != 0) {
      const int err = errno;
      cleanup();
      throw CreationError(level, "cannot size " + file.string() + ": " + std::strerror(err));
    }
    void* p = ::mmap(nullptr, bytes_, PROT_READ | PROT_WRITE, MAP_SHARED, fd_, 0);
    if (p == MAP_FAILED) {
      const int err = errno;
      cleanup();
      throw CreationError(level, "mmap failed for " + file.string() + ": " + std::strerror(err));
    }
    base_ = static_cast<std::uint8_t*>(p);
  }

  MappedStore(const MappedStore&) = delete;
  MappedStore& operator=(const MappedStore&) = delete;
  ~MappedStore() override { cleanup(); }

  StorageKind kind() const override { return StorageKind::file_mapped; }

 private:
  void cleanup() noexcept {
    if (base_) ::munmap(base_, bytes_);
    base_ = nullptr;
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

  std::filesystem::path path_;
  std::size_t bytes_;
  int fd_ = -1;
};

// Temporary directory removed with its contents on destruction.
class ScratchDir {
 public:
  explicit ScratchDir(const std::filesystem::path& root) {
    const auto base = root.empty() ? std::filesystem::temp_directory_path() : root;
    std::filesystem::create_directories(base);
    std::string templ = (base / "pyraflow-XXXXXX").string();
    if (!::mkdtemp(templ.data())) throw CreationError(0, "cannot create scratch dir under " + base.string());
    path_ = templ;
  }
  ScratchDir(const ScratchDir&) = delete;
  ScratchDir& operator=(const ScratchDir&) = delete;
  ~ScratchDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const noexcept { return path_; }

 private:
  std::filesystem::path path_;
};

struct PyramidInfo {
  int width = 0;
  int height = 0;
  int channels = 3;
  int tile_size = 256;
  double base_magnification = 40.0;
};

class ImagePyramid {
 public:
  ImagePyramid(PyramidInfo info, std::vector<PyramidLevel> levels,
               std::vector<std::unique_ptr<LevelStore>> stores,
               std::shared_ptr<ScratchDir> scratch = nullptr,
               std::shared_ptr<std::atomic<std::uint64_t>> tile_reads = nullptr)
      : scratch_(std::move(scratch)),
        info_(info),
        levels_(std::move(levels)),
        stores_(std::move(stores)),
        tile_reads_(tile_reads ? std::move(tile_reads) : std::make_shared<std::atomic<std::uint64_t>>(0)) {
    if (levels_.empty() || levels_.size() != stores_.size())
      throw ConfigError("pyramid needs one store per level");
    if (info_.channels != 1 && info_.channels != 3) throw TypeError("channels must be 1 or 3");
  }

  ImagePyramid(ImagePyramid&&) noexcept = default;
  ImagePyramid& operator=(ImagePyramid&&) noexcept = default;

  const PyramidInfo& info() const noexcept { return info_; }
  int width() const noexcept { return info_.width; }
  int height() const noexcept { return info_.height; }
  int channels() const noexcept { return info_.channels; }
  int tile_size() const noexcept { return info_.tile_size; }
  double base_magnification() const noexcept { return info_.base_magnification; }
  int level_count() const noexcept { return int(levels_.size()); }
  const std::vector<PyramidLevel>& levels() const noexcept { return levels_; }
  const PyramidLevel& level(int l) const {
    check_level(l);
    return levels_[std::size_t(l)];
  }

  double magnification(int l) const { return info_.base_magnification / double(std::int64_t(1) << l); }
  int tile_cols(int l) const { return ceil_div(level(l).width, info_.tile_size); }
  int tile_rows(int l) const { return ceil_div(level(l).height, info_.tile_size); }

  bool valid(const TileKey& k) const noexcept {
    return k.level >= 0 && k.level < level_count() && k.col >= 0 && k.row >= 0 &&
           k.col < tile_cols(k.level) && k.row < tile_rows(k.level);
  }

  Rect tile_rect(const TileKey& k) const {
    if (!valid(k)) throw RangeError("tile key outside grid");
    const auto& lv = levels_[std::size_t(k.level)];
    const int ts = info_.tile_size;
    const int x = k.col * ts;
    const int y = k.row * ts;
    return {x, y, std::min(ts, lv.width - x), std::min(ts, lv.height - y)};
  }

  void read_region(int l, const Rect& r, std::span<std::uint8_t> out) const {
    check_region(l, r, out.size());
    stores_[std::size_t(l)]->read(r, out);
  }

  Raster read_region(int l, const Rect& r) const {
    Raster out(r.w, r.h, info_.channels);
    read_region(l, r, out.data);
    return out;
  }

  void write_region(int l, const Rect& r, std::span<const std::uint8_t> in) {
    check_region(l, r, in.size());
    auto& store = *stores_[std::size_t(l)];
    if (!store.writable()) throw Error("level " + std::to_string(l) + " is read-only");
    store.write(r, in);
  }

  void write_region(int l, int x, int y, const Raster& block) {
    if (block.channels != info_.channels) throw TypeError("write_region: channel mismatch");
    write_region(l, Rect{x, y, block.width, block.height}, block.data);
  }

  Tile read_tile(const TileKey& k) const {
    const Rect r = tile_rect(k);
    Tile t{k, r.w, r.h, info_.channels, std::vector<std::uint8_t>(std::size_t(r.area()) * info_.channels)};
    stores_[std::size_t(k.level)]->read(r, t.pixels);
    return t;
  }

  // Number of tiles decoded from backing tile files (lazy container reads).
  std::uint64_t tile_reads() const noexcept { return tile_reads_->load(); }

  bool writable() const {
    for (const auto& s : stores_)
      if (!s->writable()) return false;
    return true;
  }

 private:
  void check_level(int l) const {
    if (l < 0 || l >= level_count()) throw RangeError("level " + std::to_string(l) + " out of range");
  }

  void check_region(int l, const Rect& r, std::size_t buffer_bytes) const {
    check_level(l);
    const auto& lv = levels_[std::size_t(l)];
    if (r.w <= 0 || r.h <= 0 || !Rect{0, 0, lv.width, lv.height}.contains(r))
      throw RangeError("region outside level " + std::to_string(l));
    if (buffer_bytes != std::size_t(r.area()) * info_.channels)
      throw RangeError("buffer size does not match region");
  }

  // Declared first so backing files outlive the stores that map them.
  std::shared_ptr<ScratchDir> scratch_;
  PyramidInfo info_;
  std::vector<PyramidLevel> levels_;
  std::vector<std::unique_ptr<LevelStore>> stores_;
  std::shared_ptr<std::atomic<std::uint64_t>> tile_reads_;
};

inline StorageKind storage_for(std::uint64_t byte_size, const PyramidPolicy& policy) {
  return byte_size < policy.memory_map_threshold_bytes ? StorageKind::ram : StorageKind::file_mapped;
}

// Allocates every planned level, zero-filled. Levels of at least
// memory_map_threshold_bytes live in memory-mapped scratch files.
inline ImagePyramid create_pyramid(int width, int height, int channels, const PyramidPolicy& policy,
                                   double base_magnification = 40.0) {
  if (channels != 1 && channels != 3) throw TypeError("channels must be 1 or 3");
  const auto plan = plan_levels(width, height, policy);

  std::shared_ptr<ScratchDir> scratch;
  std::vector<PyramidLevel> levels;
  std::vector<std::unique_ptr<LevelStore>> stores;
  for (std::size_t l = 0; l < plan.size(); ++l) {
    const auto [w, h] = plan[l];
    PyramidLevel lv{int(l), w, h, StorageKind::ram, std::uint64_t(w) * h * channels};
    lv.storage = storage_for(lv.byte_size, policy);
    if (lv.storage == StorageKind::ram) {
      stores.push_back(std::make_unique<RamStore>(w, h, channels));
    } else {
      if (!scratch) scratch = std::make_shared<ScratchDir>(policy.scratch_root);
      stores.push_back(std::make_unique<MappedStore>(
          int(l), scratch->path() / ("level_" + std::to_string(l) + ".bin"), w, h, channels));
    }
    levels.push_back(lv);
  }
  return ImagePyramid({width, height, channels, policy.tile_size, base_magnification}, std::move(levels),
                      std::move(stores), std::move(scratch));
}

// Recomputes levels first_level..L-1 from their finer neighbour with the 2x2
// box filter, in horizontal bands so huge levels are never fully resident.
inline void rebuild_lower_levels(ImagePyramid& p, int first_level = 1) {
  constexpr int band_rows = 256;
  for (int l = std::max(first_level, 1); l < p.level_count(); ++l) {
    const auto& src = p.level(l - 1);
    const auto& dst = p.level(l);
    for (int oy = 0; oy < dst.height; oy += band_rows) {
      const int oh = std::min(band_rows, dst.height - oy);
      const int sy = oy * 2;
      const int sh = std::min(oh * 2, src.height - sy);
      const Raster band = p.read_region(l - 1, Rect{0, sy, src.width, sh});
      Raster out(dst.width, oh, p.channels());
      downsample_box2(band.data, band.width, band.height, band.channels, out.data);
      p.write_region(l, 0, oy, out);
    }
  }
}

}  // namespace pyraflow
