#pragma once

// Independent reference implementations used as test oracles. They favour
// obviousness over speed and share no code with the library beyond plain
// data types.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "pyraflow/pyraflow.hpp"

namespace oracle {

using pyraflow::Raster;

// Level count from the closed form: level l >= 1 exists iff the larger
// dimension exceeds (E - 1) * 2^l, i.e. ceil(max / 2^l) >= E.
inline std::vector<std::pair<int, int>> levels_closed_form(std::int64_t w, std::int64_t h, std::int64_t extent) {
  const std::int64_t m = std::max(w, h);
  std::vector<std::pair<int, int>> out{{int(w), int(h)}};
  for (int l = 1; l < 62; ++l) {
    if (!((extent - 1) << l < m)) break;
    const std::int64_t d = std::int64_t(1) << l;
    out.emplace_back(int((w + d - 1) / d), int((h + d - 1) / d));
  }
  return out;
}

// 2x2 box average with float arithmetic and explicit half-up rounding.
inline Raster downsample(const Raster& src) {
  Raster out((src.width + 1) / 2, (src.height + 1) / 2, src.channels);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      for (int c = 0; c < src.channels; ++c) {
        double sum = 0;
        int n = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const int sx = 2 * x + dx, sy = 2 * y + dy;
            if (sx < src.width && sy < src.height) {
              sum += src.at(sx, sy, c);
              ++n;
            }
          }
        out.at(x, y, c) = std::uint8_t(std::floor(sum / n + 0.5));
      }
  return out;
}

// Per-pixel distance threshold using floating-point sqrt.
inline Raster threshold(const Raster& rgb, double t, int rr = 255, int rg = 255, int rb = 255) {
  Raster m(rgb.width, rgb.height, 1);
  for (int y = 0; y < rgb.height; ++y)
    for (int x = 0; x < rgb.width; ++x) {
      const double d = std::sqrt(std::pow(rr - rgb.at(x, y, 0), 2) + std::pow(rg - rgb.at(x, y, 1), 2) +
                                 std::pow(rb - rgb.at(x, y, 2), 2));
      m.at(x, y) = d >= t ? 1 : 0;
    }
  return m;
}

// Naive morphology: scan the full (2r+1)^2 window for every pixel.
inline Raster morph(const Raster& m, int r, bool dilate) {
  Raster out(m.width, m.height, 1);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      bool any = false, all = true;
      for (int dy = -r; dy <= r; ++dy)
        for (int dx = -r; dx <= r; ++dx) {
          const int sx = x + dx, sy = y + dy;
          if (sx < 0 || sy < 0 || sx >= m.width || sy >= m.height) continue;
          any = any || m.at(sx, sy);
          all = all && m.at(sx, sy);
        }
      out.at(x, y) = dilate ? any : all;
    }
  return out;
}

inline Raster closing(const Raster& m, int r) { return morph(morph(m, r, true), r, false); }

// Otsu by direct evaluation of w0 * w1 * (mu0 - mu1)^2 at every threshold.
inline int otsu(const std::array<std::uint64_t, 256>& h) {
  int best_t = 0;
  double best = -1;
  for (int t = 0; t < 256; ++t) {
    double w0 = 0, w1 = 0, s0 = 0, s1 = 0;
    for (int i = 0; i < 256; ++i) {
      if (i <= t) {
        w0 += double(h[std::size_t(i)]);
        s0 += double(i) * double(h[std::size_t(i)]);
      } else {
        w1 += double(h[std::size_t(i)]);
        s1 += double(i) * double(h[std::size_t(i)]);
      }
    }
    double var = 0;
    if (w0 > 0 && w1 > 0) {
      const double n = w0 + w1;
      var = (w0 / n) * (w1 / n) * std::pow(s0 / w0 - s1 / w1, 2);
    }
    // Relative tolerance so that ties computed in a different order still tie.
    if (var > best * (1 + 1e-12) + 1e-300) {
      best = var;
      best_t = t;
    }
  }
  return best_t;
}

struct Box {
  double x, y, w, h;
};

inline double iou(const Box& a, const Box& b) {
  const double x0 = std::max(a.x, b.x), y0 = std::max(a.y, b.y);
  const double x1 = std::min(a.x + a.w, b.x + b.w), y1 = std::min(a.y + a.h, b.y + b.h);
  const double inter = (x1 > x0 && y1 > y0) ? (x1 - x0) * (y1 - y0) : 0.0;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// O(n^2) NMS: a box survives iff no surviving box of its class that precedes
// it in (score desc, x asc, y asc, input index) order overlaps it at or above
// the threshold. Evaluated in order with an explicit survivor flag array.
inline pyraflow::Detections nms(const pyraflow::Detections& in, double thr) {
  std::vector<std::size_t> idx(in.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  auto before = [&](std::size_t a, std::size_t b) {
    const auto &p = in[a], &q = in[b];
    if (p.score != q.score) return p.score > q.score;
    if (p.box.x != q.box.x) return p.box.x < q.box.x;
    if (p.box.y != q.box.y) return p.box.y < q.box.y;
    return a < b;
  };
  std::vector<char> alive(in.size(), 0);
  // Rank each box by counting predecessors, then decide in rank order.
  std::vector<std::size_t> order(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) {
    std::size_t rank = 0;
    for (std::size_t j = 0; j < in.size(); ++j)
      if (j != i && before(j, i)) ++rank;
    order[rank] = i;
  }
  pyraflow::Detections out;
  for (std::size_t r = 0; r < order.size(); ++r) {
    const auto i = order[r];
    bool keep = true;
    for (std::size_t s = 0; s < r; ++s) {
      const auto j = order[s];
      if (alive[j] && in[j].class_id == in[i].class_id &&
          iou({in[j].box.x, in[j].box.y, in[j].box.w, in[j].box.h}, {in[i].box.x, in[i].box.y, in[i].box.w, in[i].box.h}) >= thr)
        keep = false;
    }
    alive[i] = keep;
    if (keep) out.push_back(in[i]);
  }
  return out;
}

// Connected components by recursive-free flood fill with an explicit stack.
struct Component {
  int x0, y0, x1, y1;  // inclusive bounds
  int area;
};

inline std::vector<Component> components(const std::vector<std::uint8_t>& mask, int w, int h) {
  std::vector<int> label(mask.size(), 0);
  std::vector<Component> out;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto i = std::size_t(y) * w + x;
      if (!mask[i] || label[i]) continue;
      Component c{x, y, x, y, 0};
      std::vector<std::pair<int, int>> stack{{x, y}};
      label[i] = int(out.size()) + 1;
      while (!stack.empty()) {
        auto [cx, cy] = stack.back();
        stack.pop_back();
        ++c.area;
        c.x0 = std::min(c.x0, cx);
        c.y0 = std::min(c.y0, cy);
        c.x1 = std::max(c.x1, cx);
        c.y1 = std::max(c.y1, cy);
        const int nx[4] = {cx - 1, cx + 1, cx, cx};
        const int ny[4] = {cy, cy, cy - 1, cy + 1};
        for (int k = 0; k < 4; ++k) {
          if (nx[k] < 0 || ny[k] < 0 || nx[k] >= w || ny[k] >= h) continue;
          const auto j = std::size_t(ny[k]) * w + nx[k];
          if (mask[j] && !label[j]) {
            label[j] = int(out.size()) + 1;
            stack.emplace_back(nx[k], ny[k]);
          }
        }
      }
      out.push_back(c);
    }
  return out;
}

// Byte-budgeted LRU queue simulation over plain vectors.
struct LruSim {
  std::uint64_t budget;
  std::vector<std::pair<pyraflow::TileKey, std::uint64_t>> queue;  // front = oldest
  std::uint64_t bytes = 0;
  std::vector<pyraflow::TileKey> evicted;

  bool access(const pyraflow::TileKey& k, std::uint64_t size) {
    for (std::size_t i = 0; i < queue.size(); ++i)
      if (queue[i].first == k) {
        auto e = queue[i];
        queue.erase(queue.begin() + std::ptrdiff_t(i));
        queue.push_back(e);
        return true;
      }
    queue.emplace_back(k, size);
    bytes += size;
    while (bytes > budget && queue.size() > 1) {
      bytes -= queue.front().second;
      evicted.push_back(queue.front().first);
      queue.erase(queue.begin());
    }
    return false;
  }
};

}  // namespace oracle

namespace testutil {

inline pyraflow::Raster random_raster(std::mt19937_64& rng, int w, int h, int c) {
  pyraflow::Raster r(w, h, c);
  std::uniform_int_distribution<int> d(0, 255);
  for (auto& v : r.data) v = std::uint8_t(d(rng));
  return r;
}

// Temporary directory removed on scope exit.
class TempDir {
 public:
  TempDir() {
    std::string templ = (std::filesystem::temp_directory_path() / "pyraflow-test-XXXXXX").string();
    if (!::mkdtemp(templ.data())) throw std::runtime_error("mkdtemp failed");
    path_ = templ;
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

// Small pyramids with several levels: the level floor is lowered.
inline pyraflow::PyramidPolicy small_policy(int min_extent = 64, int tile = 64) {
  pyraflow::PyramidPolicy p;
  p.min_level_extent = min_extent;
  p.tile_size = tile;
  return p;
}

}  // namespace testutil
