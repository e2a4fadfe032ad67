#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "pyraflow/pyramid.hpp"

namespace pyraflow {

struct Rgb {
  std::uint8_t r = 255, g = 255, b = 255;
};

inline constexpr double kMaxColorDistance = 441.6729559300637;  // sqrt(3 * 255^2)

struct TissueParams {
  double threshold = 30.0;
  int closing_radius = 2;
  Rgb reference_color{};

  void validate() const {
    if (!(threshold >= 0.0 && threshold <= kMaxColorDistance))
      throw ConfigError("tissue threshold must lie in [0, " + std::to_string(kMaxColorDistance) + "]");
    if (closing_radius < 0) throw ConfigError("closing radius must be >= 0");
  }
};

// Binary mask, 1 = tissue.
using TissueMask = Raster;

inline double color_distance(Rgb px, Rgb ref = {}) {
  const double dr = double(ref.r) - px.r;
  const double dg = double(ref.g) - px.g;
  const double db = double(ref.b) - px.b;
  return std::sqrt(dr * dr + dg * dg + db * db);
}

// distance >= threshold, compared on squared integer distances so the
// decision does not depend on sqrt rounding.
inline TissueMask threshold_distance(const Raster& rgb, const TissueParams& params) {
  if (rgb.channels != 3) throw TypeError("tissue segmentation needs an RGB image");
  TissueMask mask(rgb.width, rgb.height, 1);
  const double t2 = params.threshold * params.threshold;
  const auto& ref = params.reference_color;
  for (std::size_t i = 0; i < mask.data.size(); ++i) {
    const int dr = int(ref.r) - rgb.data[3 * i];
    const int dg = int(ref.g) - rgb.data[3 * i + 1];
    const int db = int(ref.b) - rgb.data[3 * i + 2];
    mask.data[i] = double(dr * dr + dg * dg + db * db) >= t2 ? 1 : 0;
  }
  return mask;
}

namespace detail {

// One separable pass of a binary square window of half-width r, clipped to
// the image. dilate: any 1 in the window; erode: all 1 in the window.
inline void morph_pass(const std::vector<std::uint8_t>& in, std::vector<std::uint8_t>& out, int w, int h,
                       int r, bool horizontal, bool dilate) {
  const int n = horizontal ? w : h;
  const int lines = horizontal ? h : w;
  std::vector<int> prefix(std::size_t(n) + 1);
  for (int line = 0; line < lines; ++line) {
    auto idx = [&](int k) {
      return horizontal ? std::size_t(line) * w + k : std::size_t(k) * w + line;
    };
    prefix[0] = 0;
    for (int k = 0; k < n; ++k) prefix[std::size_t(k) + 1] = prefix[std::size_t(k)] + in[idx(k)];
    for (int k = 0; k < n; ++k) {
      const int lo = std::max(0, k - r);
      const int hi = std::min(n - 1, k + r);
      const int ones = prefix[std::size_t(hi) + 1] - prefix[std::size_t(lo)];
      out[idx(k)] = dilate ? (ones > 0) : (ones == hi - lo + 1);
    }
  }
}

inline TissueMask morph(const TissueMask& m, int r, bool dilate) {
  if (r == 0) return m;
  TissueMask tmp = m, out = m;
  morph_pass(m.data, tmp.data, m.width, m.height, r, true, dilate);
  morph_pass(tmp.data, out.data, m.width, m.height, r, false, dilate);
  return out;
}

}  // namespace detail

inline TissueMask dilate(const TissueMask& m, int radius) { return detail::morph(m, radius, true); }
inline TissueMask erode(const TissueMask& m, int radius) { return detail::morph(m, radius, false); }

// Dilation then erosion with a (2r+1)^2 square; windows are clipped at the
// image border.
inline TissueMask close_mask(const TissueMask& m, int radius) { return erode(dilate(m, radius), radius); }

inline TissueMask segment_tissue(const Raster& rgb, const TissueParams& params) {
  params.validate();
  return close_mask(threshold_distance(rgb, params), params.closing_radius);
}

// Segments the lowest-resolution level of the pyramid.
inline TissueMask segment_tissue(const ImagePyramid& p, const TissueParams& params = {}) {
  if (p.channels() != 3) throw TypeError("tissue segmentation needs an RGB pyramid");
  const auto& low = p.level(p.level_count() - 1);
  return segment_tissue(p.read_region(low.index, Rect{0, 0, low.width, low.height}), params);
}

// Box-averaged copy reduced by an integer factor (ceil dimensions).
inline Raster downsample_box(const Raster& src, int factor) {
  if (factor < 1) throw ConfigError("downsample factor must be >= 1");
  if (factor == 1) return src;
  const int ow = ceil_div(src.width, factor);
  const int oh = ceil_div(src.height, factor);
  Raster out(ow, oh, src.channels);
  for (int oy = 0; oy < oh; ++oy) {
    const int y0 = oy * factor, y1 = std::min(src.height, y0 + factor);
    for (int ox = 0; ox < ow; ++ox) {
      const int x0 = ox * factor, x1 = std::min(src.width, x0 + factor);
      const unsigned n = unsigned((y1 - y0) * (x1 - x0));
      for (int c = 0; c < src.channels; ++c) {
        unsigned sum = 0;
        for (int y = y0; y < y1; ++y)
          for (int x = x0; x < x1; ++x) sum += src.at(x, y, c);
        out.at(ox, oy, c) = std::uint8_t((sum + n / 2) / n);
      }
    }
  }
  return out;
}

// Interactive preview: the same segmentation on a further-downsampled copy of
// the lowest level. The mask has the downsampled dimensions.
inline TissueMask preview_tissue(const ImagePyramid& p, const TissueParams& params, int downsample) {
  if (downsample < 1) throw ConfigError("downsample factor must be >= 1");
  if (p.channels() != 3) throw TypeError("tissue segmentation needs an RGB pyramid");
  const auto& low = p.level(p.level_count() - 1);
  const Raster rgb = p.read_region(low.index, Rect{0, 0, low.width, low.height});
  return segment_tissue(downsample_box(rgb, downsample), params);
}

// Rounded mean of the channels.
inline Raster to_gray(const Raster& rgb) {
  if (rgb.channels == 1) return rgb;
  Raster g(rgb.width, rgb.height, 1);
  for (std::size_t i = 0; i < g.data.size(); ++i) {
    unsigned s = 0;
    for (int c = 0; c < rgb.channels; ++c) s += rgb.data[i * std::size_t(rgb.channels) + std::size_t(c)];
    g.data[i] = std::uint8_t((s + unsigned(rgb.channels) / 2) / unsigned(rgb.channels));
  }
  return g;
}

using Histogram = std::array<std::uint64_t, 256>;

inline Histogram gray_histogram(const Raster& gray) {
  Histogram h{};
  for (auto v : gray.data) ++h[v];
  return h;
}

// Otsu: threshold t maximising the between-class variance where class 0 is
// {v <= t}. Ties resolve to the smallest t.
inline int otsu_threshold(const Histogram& hist) {
  std::uint64_t total = 0;
  long double total_sum = 0;
  for (int i = 0; i < 256; ++i) {
    total += hist[std::size_t(i)];
    total_sum += (long double)i * hist[std::size_t(i)];
  }
  if (total == 0) throw ConfigError("otsu_threshold: empty histogram");

  int best_t = 0;
  long double best = -1;
  std::uint64_t w0 = 0;
  long double s0 = 0;
  for (int t = 0; t < 256; ++t) {
    w0 += hist[std::size_t(t)];
    s0 += (long double)t * hist[std::size_t(t)];
    const std::uint64_t w1 = total - w0;
    long double var = 0;
    if (w0 > 0 && w1 > 0) {
      // (w1*s0 - w0*s1)^2 / (w0*w1) is proportional to w0*w1*(mu0-mu1)^2.
      const long double s1 = total_sum - s0;
      const long double d = (long double)w1 * s0 - (long double)w0 * s1;
      var = d * d / ((long double)w0 * (long double)w1);
    }
    if (var > best) {
      best = var;
      best_t = t;
    }
  }
  return best_t;
}

// Otsu variant of the tissue mask: gray <= t is tissue (glass is bright).
inline TissueMask segment_tissue_otsu(const ImagePyramid& p, int closing_radius) {
  if (p.channels() != 3) throw TypeError("tissue segmentation needs an RGB pyramid");
  const auto& low = p.level(p.level_count() - 1);
  const Raster gray = to_gray(p.read_region(low.index, Rect{0, 0, low.width, low.height}));
  const int t = otsu_threshold(gray_histogram(gray));
  TissueMask m(gray.width, gray.height, 1);
  for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = gray.data[i] <= t ? 1 : 0;
  return close_mask(m, closing_radius);
}

}  // namespace pyraflow
