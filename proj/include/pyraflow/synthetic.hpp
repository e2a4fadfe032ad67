#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <memory>
#include <numbers>
#include <vector>

#include "pyraflow/pyramid.hpp"

namespace pyraflow {

// Parameters of the procedural test slide: white glass, elliptical tissue blobs
// on a jittered lattice, dark nuclei dotted inside the tissue. All lengths are
// level-0 pixels.
struct SyntheticSpec {
  int cell_size = 1024;             // blob lattice spacing
  double blob_probability = 0.6;    // 0 gives an all-white slide
  double min_radius = 0.22;         // ellipse semi-axes as a fraction of cell_size
  double max_radius = 0.48;
  int nucleus_spacing = 20;
  double nucleus_probability = 0.4;
  int min_nucleus_radius = 2;
  int max_nucleus_radius = 5;
  int noise_amplitude = 10;
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline std::uint64_t hash4(std::uint64_t seed, std::int64_t a, std::int64_t b, std::uint64_t salt) {
  std::uint64_t h = splitmix64(seed ^ (salt * 0xD6E8FEB86659FD93ull));
  h = splitmix64(h ^ std::uint64_t(a));
  return splitmix64(h ^ std::uint64_t(b) * 0x9E3779B97F4A7C15ull);
}

// Uniform in [0, 1) from the k-th 16-bit lane of a hash.
inline double lane(std::uint64_t h, int k) { return double((h >> (16 * k)) & 0xFFFF) / 65536.0; }

inline std::uint8_t clamp_u8(int v) { return std::uint8_t(std::clamp(v, 0, 255)); }

}  // namespace detail

// Deterministic, position-hashed slide that can be evaluated at any level
// without materialising the finer ones. Pixel (x, y) of level l samples the
// level-0 point (x*2^l + 2^l/2, y*2^l + 2^l/2).
class ProceduralSlide {
 public:
  ProceduralSlide(std::uint64_t seed, SyntheticSpec spec) : seed_(seed), spec_(spec) {}

  const SyntheticSpec& spec() const noexcept { return spec_; }
  std::uint64_t seed() const noexcept { return seed_; }

  // Renders an RGB block of level `level` covering rect r.
  void render(int level, const Rect& r, std::span<std::uint8_t> out) const {
    const std::int64_t step = std::int64_t(1) << level;
    const std::int64_t off = step / 2;
    const std::int64_t X0 = r.x * step + off;
    const std::int64_t Y0 = r.y * step + off;
    const std::int64_t X1 = (r.x + r.w - 1) * step + off;
    const std::int64_t Y1 = (r.y + r.h - 1) * step + off;

    std::fill(out.begin(), out.end(), std::uint8_t(255));
    std::vector<std::uint8_t> tissue(std::size_t(r.area()), 0);

    const auto blobs = blobs_near(X0, Y0, X1, Y1);
    if (blobs.empty()) return;

    for (int y = 0; y < r.h; ++y) {
      const double Y = double(Y0 + y * step);
      for (int x = 0; x < r.w; ++x) {
        const double X = double(X0 + x * step);
        for (const auto& b : blobs) {
          if (X < b.bx0 || X > b.bx1 || Y < b.by0 || Y > b.by1) continue;
          const double dx = X - b.cx;
          const double dy = Y - b.cy;
          const double u = (dx * b.cos_t + dy * b.sin_t) / b.a;
          const double v = (-dx * b.sin_t + dy * b.cos_t) / b.b;
          if (u * u + v * v > 1.0) continue;
          const std::size_t i = std::size_t(y) * r.w + x;
          tissue[i] = 1;
          paint(out, i, b.color, std::int64_t(X), std::int64_t(Y));
          break;
        }
      }
    }

    // Nuclei are rasterised per disc rather than searched per pixel.
    const int ns = spec_.nucleus_spacing;
    if (ns <= 0 || spec_.nucleus_probability <= 0) return;
    const int rmax = spec_.max_nucleus_radius;
    const std::int64_t ncx0 = floor_div(X0 - rmax, ns), ncx1 = floor_div(X1 + rmax, ns);
    const std::int64_t ncy0 = floor_div(Y0 - rmax, ns), ncy1 = floor_div(Y1 + rmax, ns);
    for (std::int64_t cy = ncy0; cy <= ncy1; ++cy) {
      for (std::int64_t cx = ncx0; cx <= ncx1; ++cx) {
        const std::uint64_t h = detail::hash4(seed_, cx, cy, 2);
        if (detail::lane(h, 0) >= spec_.nucleus_probability) continue;
        const double ncx = double(cx * ns) + detail::lane(h, 1) * ns;
        const double ncy = double(cy * ns) + detail::lane(h, 2) * ns;
        const int span_r = spec_.max_nucleus_radius - spec_.min_nucleus_radius + 1;
        const double rad = spec_.min_nucleus_radius + int(detail::lane(h, 3) * span_r);
        const std::int64_t sx0 = ceil_div_signed(std::int64_t(std::ceil(ncx - rad)) - off, step);
        const std::int64_t sx1 = floor_div(std::int64_t(std::floor(ncx + rad)) - off, step);
        const std::int64_t sy0 = ceil_div_signed(std::int64_t(std::ceil(ncy - rad)) - off, step);
        const std::int64_t sy1 = floor_div(std::int64_t(std::floor(ncy + rad)) - off, step);
        for (std::int64_t sy = std::max<std::int64_t>(sy0, r.y); sy <= std::min<std::int64_t>(sy1, r.y + r.h - 1); ++sy) {
          for (std::int64_t sx = std::max<std::int64_t>(sx0, r.x); sx <= std::min<std::int64_t>(sx1, r.x + r.w - 1); ++sx) {
            const std::int64_t X = sx * step + off;
            const std::int64_t Y = sy * step + off;
            const double dx = double(X) - ncx, dy = double(Y) - ncy;
            if (dx * dx + dy * dy > rad * rad) continue;
            const std::size_t i = std::size_t(sy - r.y) * r.w + std::size_t(sx - r.x);
            if (!tissue[i]) continue;
            const std::array<int, 3> dark{70 + int(detail::lane(h, 1) * 40), 40 + int(detail::lane(h, 2) * 30),
                                          110 + int(detail::lane(h, 3) * 40)};
            paint(out, i, dark, X, Y);
          }
        }
      }
    }
  }

 private:
  struct Blob {
    double cx, cy, a, b, cos_t, sin_t;
    double bx0, by0, bx1, by1;
    std::array<int, 3> color;
  };

  static std::int64_t floor_div(std::int64_t a, std::int64_t b) {
    return a >= 0 ? a / b : -((-a + b - 1) / b);
  }
  static std::int64_t ceil_div_signed(std::int64_t a, std::int64_t b) { return -floor_div(-a, b); }

  void paint(std::span<std::uint8_t> out, std::size_t i, const std::array<int, 3>& color, std::int64_t X,
             std::int64_t Y) const {
    const int amp = spec_.noise_amplitude;
    const std::uint64_t n = amp > 0 ? detail::hash4(seed_, X, Y, 3) : 0;
    for (int c = 0; c < 3; ++c) {
      const int noise = amp > 0 ? int(detail::lane(n, c) * (2 * amp + 1)) - amp : 0;
      out[i * 3 + std::size_t(c)] = detail::clamp_u8(color[std::size_t(c)] + noise);
    }
  }

  std::vector<Blob> blobs_near(std::int64_t X0, std::int64_t Y0, std::int64_t X1, std::int64_t Y1) const {
    std::vector<Blob> out;
    const int cs = spec_.cell_size;
    if (cs <= 0 || spec_.blob_probability <= 0) return out;
    const double rmax = spec_.max_radius * cs;
    const auto reach = std::int64_t(std::ceil(rmax)) + 1;
    for (std::int64_t cy = floor_div(Y0 - reach, cs); cy <= floor_div(Y1 + reach, cs); ++cy) {
      for (std::int64_t cx = floor_div(X0 - reach, cs); cx <= floor_div(X1 + reach, cs); ++cx) {
        if (cx < 0 || cy < 0) continue;
        const std::uint64_t h = detail::hash4(seed_, cx, cy, 1);
        if (detail::lane(h, 0) >= spec_.blob_probability) continue;
        const std::uint64_t g = detail::splitmix64(h);
        Blob b{};
        b.cx = (double(cx) + 0.15 + 0.7 * detail::lane(h, 1)) * cs;
        b.cy = (double(cy) + 0.15 + 0.7 * detail::lane(h, 2)) * cs;
        b.a = (spec_.min_radius + (spec_.max_radius - spec_.min_radius) * detail::lane(h, 3)) * cs;
        b.b = (spec_.min_radius + (spec_.max_radius - spec_.min_radius) * detail::lane(g, 0)) * cs;
        const double theta = detail::lane(g, 1) * std::numbers::pi;
        b.cos_t = std::cos(theta);
        b.sin_t = std::sin(theta);
        const double ext = std::max(b.a, b.b);
        b.bx0 = b.cx - ext;
        b.bx1 = b.cx + ext;
        b.by0 = b.cy - ext;
        b.by1 = b.cy + ext;
        if (b.bx1 < double(X0) || b.bx0 > double(X1) || b.by1 < double(Y0) || b.by0 > double(Y1)) continue;
        b.color = {225 + int(detail::lane(g, 2) * 25), 150 + int(detail::lane(g, 3) * 40),
                   190 + int(detail::lane(h, 1) * 30)};
        out.push_back(b);
      }
    }
    return out;
  }

  std::uint64_t seed_;
  SyntheticSpec spec_;
};

class ProceduralStore final : public LevelStore {
 public:
  ProceduralStore(std::shared_ptr<const ProceduralSlide> slide, int level)
      : slide_(std::move(slide)), level_(level) {}

  StorageKind kind() const override { return StorageKind::procedural; }
  bool writable() const override { return false; }
  void read(const Rect& r, std::span<std::uint8_t> out) const override { slide_->render(level_, r, out); }
  void write(const Rect&, std::span<const std::uint8_t>) override {
    throw Error("procedural level is read-only");
  }

 private:
  std::shared_ptr<const ProceduralSlide> slide_;
  int level_;
};

// Materialised synthetic slide: level 0 is rendered, coarser levels are box
// downsampled from it exactly like an imported image.
inline ImagePyramid generate_synthetic_slide(std::uint64_t seed, int width, int height,
                                             const SyntheticSpec& spec = {},
                                             const PyramidPolicy& policy = {},
                                             double base_magnification = 40.0) {
  if (width < 1 || height < 1) throw RangeError("synthetic slide dimensions must be >= 1");
  ImagePyramid p = create_pyramid(width, height, 3, policy, base_magnification);
  const ProceduralSlide slide(seed, spec);
  constexpr int band_rows = 256;
  for (int y = 0; y < height; y += band_rows) {
    const Rect band{0, y, width, std::min(band_rows, height - y)};
    Raster block(band.w, band.h, 3);
    slide.render(0, band, block.data);
    p.write_region(0, band, block.data);
  }
  rebuild_lower_levels(p);
  return p;
}

// Virtual slide whose every level is rendered on demand; used where the
// materialised image would not fit in memory or on disk.
inline ImagePyramid make_virtual_slide(std::uint64_t seed, int width, int height,
                                       const SyntheticSpec& spec = {},
                                       const PyramidPolicy& policy = {},
                                       double base_magnification = 40.0) {
  const auto plan = plan_levels(width, height, policy);
  auto slide = std::make_shared<const ProceduralSlide>(seed, spec);
  std::vector<PyramidLevel> levels;
  std::vector<std::unique_ptr<LevelStore>> stores;
  for (std::size_t l = 0; l < plan.size(); ++l) {
    levels.push_back({int(l), plan[l].width, plan[l].height, StorageKind::procedural,
                      std::uint64_t(plan[l].width) * plan[l].height * 3});
    stores.push_back(std::make_unique<ProceduralStore>(slide, int(l)));
  }
  return ImagePyramid({width, height, 3, policy.tile_size, base_magnification}, std::move(levels),
                      std::move(stores));
}

}  // namespace pyraflow
