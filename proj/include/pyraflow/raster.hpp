#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pyraflow/error.hpp"

namespace pyraflow {

// Half-open integer rectangle [x, x+w) x [y, y+h).
struct Rect {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;

  bool empty() const noexcept { return w <= 0 || h <= 0; }
  std::int64_t area() const noexcept { return empty() ? 0 : std::int64_t(w) * h; }
  int right() const noexcept { return x + w; }
  int bottom() const noexcept { return y + h; }

  bool contains(const Rect& o) const noexcept {
    return o.x >= x && o.y >= y && o.right() <= right() && o.bottom() <= bottom();
  }

  friend bool operator==(const Rect&, const Rect&) = default;
};

inline Rect intersect(const Rect& a, const Rect& b) {
  const int x0 = std::max(a.x, b.x);
  const int y0 = std::max(a.y, b.y);
  const int x1 = std::min(a.right(), b.right());
  const int y1 = std::min(a.bottom(), b.bottom());
  if (x1 <= x0 || y1 <= y0) return {};
  return {x0, y0, x1 - x0, y1 - y0};
}

inline constexpr int ceil_div(std::int64_t a, std::int64_t b) { return int((a + b - 1) / b); }

// 8-bit interleaved raster, row-major.
struct Raster {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<std::uint8_t> data;

  Raster() = default;
  Raster(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), data(std::size_t(w) * h * c, fill) {}

  std::size_t byte_size() const noexcept { return data.size(); }
  std::uint8_t* row(int y) noexcept { return data.data() + std::size_t(y) * width * channels; }
  const std::uint8_t* row(int y) const noexcept {
    return data.data() + std::size_t(y) * width * channels;
  }
  std::uint8_t& at(int x, int y, int c = 0) noexcept {
    return data[(std::size_t(y) * width + x) * channels + c];
  }
  std::uint8_t at(int x, int y, int c = 0) const noexcept {
    return data[(std::size_t(y) * width + x) * channels + c];
  }

  friend bool operator==(const Raster&, const Raster&) = default;
};

// Copies src into dst at (dx, dy); the block must fit.
inline void blit(const Raster& src, Raster& dst, int dx, int dy) {
  if (src.channels != dst.channels) throw TypeError("blit: channel mismatch");
  if (dx < 0 || dy < 0 || dx + src.width > dst.width || dy + src.height > dst.height)
    throw RangeError("blit: block outside destination");
  const std::size_t row_bytes = std::size_t(src.width) * src.channels;
  for (int y = 0; y < src.height; ++y)
    std::copy_n(src.row(y), row_bytes, dst.row(dy + y) + std::size_t(dx) * dst.channels);
}

inline Raster crop(const Raster& src, const Rect& r) {
  if (!Rect{0, 0, src.width, src.height}.contains(r)) throw RangeError("crop outside raster");
  Raster out(r.w, r.h, src.channels);
  const std::size_t row_bytes = std::size_t(r.w) * src.channels;
  for (int y = 0; y < r.h; ++y)
    std::copy_n(src.row(r.y + y) + std::size_t(r.x) * src.channels, row_bytes, out.row(y));
  return out;
}

// 2x2 box average with output ceil(w/2) x ceil(h/2). Edge cells average the
// pixels that exist; the integer mean rounds half up.
inline void downsample_box2(std::span<const std::uint8_t> src, int w, int h, int channels,
                            std::span<std::uint8_t> dst) {
  const int ow = ceil_div(w, 2);
  const int oh = ceil_div(h, 2);
  for (int oy = 0; oy < oh; ++oy) {
    const int y0 = oy * 2;
    const int ny = std::min(2, h - y0);
    for (int ox = 0; ox < ow; ++ox) {
      const int x0 = ox * 2;
      const int nx = std::min(2, w - x0);
      const unsigned n = unsigned(nx * ny);
      for (int c = 0; c < channels; ++c) {
        unsigned sum = 0;
        for (int j = 0; j < ny; ++j)
          for (int i = 0; i < nx; ++i)
            sum += src[(std::size_t(y0 + j) * w + (x0 + i)) * channels + c];
        dst[(std::size_t(oy) * ow + ox) * channels + c] = std::uint8_t((sum + n / 2) / n);
      }
    }
  }
}

inline Raster downsample_box2(const Raster& src) {
  Raster out(ceil_div(src.width, 2), ceil_div(src.height, 2), src.channels);
  downsample_box2(src.data, src.width, src.height, src.channels, out.data);
  return out;
}

// Bilinear resampling with pixel-center alignment (no corner alignment),
// edge samples clamped.
inline std::vector<float> resize_bilinear(std::span<const float> src, int w, int h, int channels,
                                          int ow, int oh) {
  std::vector<float> out(std::size_t(ow) * oh * channels);
  const double sx = double(w) / ow;
  const double sy = double(h) / oh;
  for (int oy = 0; oy < oh; ++oy) {
    const double fy = std::clamp((oy + 0.5) * sy - 0.5, 0.0, double(h - 1));
    const int y0 = int(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double ty = fy - y0;
    for (int ox = 0; ox < ow; ++ox) {
      const double fx = std::clamp((ox + 0.5) * sx - 0.5, 0.0, double(w - 1));
      const int x0 = int(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double tx = fx - x0;
      for (int c = 0; c < channels; ++c) {
        auto px = [&](int x, int y) { return double(src[(std::size_t(y) * w + x) * channels + c]); };
        const double top = px(x0, y0) * (1 - tx) + px(x1, y0) * tx;
        const double bot = px(x0, y1) * (1 - tx) + px(x1, y1) * tx;
        out[(std::size_t(oy) * ow + ox) * channels + c] = float(top * (1 - ty) + bot * ty);
      }
    }
  }
  return out;
}

inline Raster resize_bilinear(const Raster& src, int ow, int oh) {
  if (src.width == ow && src.height == oh) return src;
  std::vector<float> f(src.data.begin(), src.data.end());
  const auto r = resize_bilinear(f, src.width, src.height, src.channels, ow, oh);
  Raster out(ow, oh, src.channels);
  for (std::size_t i = 0; i < r.size(); ++i)
    out.data[i] = std::uint8_t(std::clamp(std::lround(r[i]), 0L, 255L));
  return out;
}

// Nearest-neighbour resampling; used for label rasters.
inline Raster resize_nearest(const Raster& src, int ow, int oh) {
  if (src.width == ow && src.height == oh) return src;
  Raster out(ow, oh, src.channels);
  for (int oy = 0; oy < oh; ++oy) {
    const int sy = std::min(int(std::int64_t(oy) * src.height / oh), src.height - 1);
    for (int ox = 0; ox < ow; ++ox) {
      const int sx = std::min(int(std::int64_t(ox) * src.width / ow), src.width - 1);
      for (int c = 0; c < src.channels; ++c) out.at(ox, oy, c) = src.at(sx, sy, c);
    }
  }
  return out;
}

}  // namespace pyraflow
