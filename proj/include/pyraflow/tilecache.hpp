#pragma once

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <functional>
#include <future>
#include <list>
#include <memory>
#include <mutex>
#include <stop_token>
#include <thread>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "pyraflow/pyramid.hpp"

namespace pyraflow {

struct CacheBudget {
  std::uint64_t max_bytes = 256ull << 20;
};

// What the user is looking at: a level-0 centre, the level-0 width spanned,
// and the size of the output surface in screen pixels.
struct Viewport {
  double center_x = 0;
  double center_y = 0;
  double view_width_l0 = 0;
  int out_width_px = 0;
  int out_height_px = 0;

  bool valid() const noexcept {
    return view_width_l0 > 0 && out_width_px > 0 && out_height_px > 0;
  }
};

// Coarsest level whose pixel density still meets the output's:
// clamp(floor(log2(view_width_l0 / out_width_px)), 0, L-1).
inline int select_level(const ImagePyramid& p, const Viewport& v) {
  if (!v.valid()) throw ConfigError("invalid viewport");
  const double ratio = v.view_width_l0 / double(v.out_width_px);
  int l = 0;
  while (l + 1 < p.level_count() && ratio >= std::ldexp(1.0, l + 1)) ++l;
  return l;
}

// Level-0 rectangle seen by the viewport, shifted to lie inside the slide
// where it fits and cropped where it does not.
inline Rect viewport_rect_l0(const ImagePyramid& p, const Viewport& v) {
  const double vw = v.view_width_l0;
  const double vh = vw * double(v.out_height_px) / double(v.out_width_px);
  double x0 = v.center_x - vw / 2;
  double y0 = v.center_y - vh / 2;
  x0 = std::clamp(x0, 0.0, std::max(0.0, double(p.width()) - vw));
  y0 = std::clamp(y0, 0.0, std::max(0.0, double(p.height()) - vh));
  const int ix0 = int(std::floor(x0));
  const int iy0 = int(std::floor(y0));
  const int ix1 = int(std::min(double(p.width()), std::ceil(x0 + vw)));
  const int iy1 = int(std::min(double(p.height()), std::ceil(y0 + vh)));
  return intersect(Rect{ix0, iy0, ix1 - ix0, iy1 - iy0}, Rect{0, 0, p.width(), p.height()});
}

// Tiles of select_level(v) intersecting the view, row-major.
inline std::vector<TileKey> tiles_for_viewport(const ImagePyramid& p, const Viewport& v) {
  const int l = select_level(p, v);
  const Rect r0 = viewport_rect_l0(p, v);
  std::vector<TileKey> keys;
  if (r0.empty()) return keys;
  const std::int64_t scale = std::int64_t(1) << l;
  const auto& lv = p.level(l);
  const int lx0 = int(r0.x / scale);
  const int ly0 = int(r0.y / scale);
  const int lx1 = std::min(lv.width, ceil_div(r0.right(), scale));
  const int ly1 = std::min(lv.height, ceil_div(r0.bottom(), scale));
  const int ts = p.tile_size();
  for (int row = ly0 / ts; row <= (ly1 - 1) / ts; ++row)
    for (int col = lx0 / ts; col <= (lx1 - 1) / ts; ++col) keys.push_back({l, col, row});
  return keys;
}

struct CacheStats {
  std::uint64_t hits = 0;         // queue hits, including coalesced waits
  std::uint64_t pinned_hits = 0;  // lowest-level requests
  std::uint64_t misses = 0;       // loads started
  std::uint64_t evictions = 0;
  std::uint64_t resident_bytes = 0;
  std::uint64_t peak_resident_bytes = 0;
  std::uint64_t pinned_bytes = 0;
  std::size_t resident_tiles = 0;

  double hit_ratio() const noexcept {
    const auto total = hits + pinned_hits + misses;
    return total ? double(hits + pinned_hits) / double(total) : 0.0;
  }
};

struct FallbackTile {
  std::shared_ptr<const Tile> tile;  // sized like the requested tile
  int actual_level = 0;
};

// Byte-budgeted tile cache. Used tiles move to the back of a queue; when the
// queue outgrows max_bytes, tiles leave from the front. All tiles of the
// lowest-resolution level are loaded at construction, stay resident, and do
// not count against the budget.
class TileCache {
 public:
  TileCache(std::shared_ptr<const ImagePyramid> pyramid, CacheBudget budget)
      : pyramid_(std::move(pyramid)), budget_(budget) {
    const std::uint64_t one_tile =
        std::uint64_t(pyramid_->tile_size()) * pyramid_->tile_size() * pyramid_->channels();
    if (budget_.max_bytes < one_tile)
      throw ConfigError("cache budget of " + std::to_string(budget_.max_bytes) +
                        " bytes is smaller than one tile (" + std::to_string(one_tile) + " bytes)");
    const int low = pyramid_->level_count() - 1;
    for (int row = 0; row < pyramid_->tile_rows(low); ++row) {
      for (int col = 0; col < pyramid_->tile_cols(low); ++col) {
        auto t = std::make_shared<const Tile>(pyramid_->read_tile({low, col, row}));
        stats_.pinned_bytes += t->byte_size();
        pinned_.emplace(t->key, std::move(t));
      }
    }
  }

  TileCache(const TileCache&) = delete;
  TileCache& operator=(const TileCache&) = delete;

  ~TileCache() {
    if (loader_.joinable()) {
      loader_.request_stop();
      loader_cv_.notify_all();
      loader_.join();
    }
  }

  const ImagePyramid& pyramid() const noexcept { return *pyramid_; }
  const CacheBudget& budget() const noexcept { return budget_; }

  std::shared_ptr<const Tile> get_tile(const TileKey& key) {
    if (!pyramid_->valid(key)) throw RangeError("tile key outside grid");
    if (auto it = pinned_.find(key); it != pinned_.end()) {
      std::lock_guard lk(mu_);
      ++stats_.pinned_hits;
      return it->second;
    }

    std::unique_lock lk(mu_);
    if (auto it = entries_.find(key); it != entries_.end()) {
      ++stats_.hits;
      touch(it->second);
      return it->second.tile;
    }
    if (auto it = inflight_.find(key); it != inflight_.end()) {
      ++stats_.hits;
      auto fut = it->second;
      lk.unlock();
      return fut.get();
    }

    ++stats_.misses;
    std::promise<std::shared_ptr<const Tile>> promise;
    inflight_.emplace(key, promise.get_future().share());
    lk.unlock();

    std::shared_ptr<const Tile> tile;
    try {
      tile = std::make_shared<const Tile>(pyramid_->read_tile(key));
    } catch (...) {
      lk.lock();
      inflight_.erase(key);
      lk.unlock();
      promise.set_exception(std::current_exception());
      throw;
    }

    lk.lock();
    insert(tile);
    inflight_.erase(key);
    lk.unlock();
    promise.set_value(tile);
    return tile;
  }

  // The requested tile when resident; otherwise a crop of the nearest resident
  // coarser ancestor scaled up to the requested size, with the real tile
  // queued for background loading.
  FallbackTile resolve_with_fallback(const TileKey& key) {
    if (!pyramid_->valid(key)) throw RangeError("tile key outside grid");
    if (auto it = pinned_.find(key); it != pinned_.end()) {
      std::lock_guard lk(mu_);
      ++stats_.pinned_hits;
      return {it->second, key.level};
    }

    std::shared_ptr<const Tile> ancestor;
    {
      std::lock_guard lk(mu_);
      if (auto it = entries_.find(key); it != entries_.end()) {
        ++stats_.hits;
        touch(it->second);
        return {it->second.tile, key.level};
      }
      for (int l = key.level + 1; l < pyramid_->level_count() && !ancestor; ++l) {
        const int d = l - key.level;
        const TileKey ak{l, key.col >> d, key.row >> d};
        if (auto p = pinned_.find(ak); p != pinned_.end()) {
          ancestor = p->second;
        } else if (auto e = entries_.find(ak); e != entries_.end()) {
          touch(e->second);
          ancestor = e->second.tile;
        }
      }
    }
    schedule(key);
    return {std::make_shared<const Tile>(upscale_from(*ancestor, key)), ancestor->key.level};
  }

  bool resident(const TileKey& key) const {
    if (pinned_.contains(key)) return true;
    std::lock_guard lk(mu_);
    return entries_.contains(key);
  }

  bool pinned(const TileKey& key) const { return pinned_.contains(key); }

  // Front (next eviction candidate) first.
  std::vector<TileKey> queue_snapshot() const {
    std::lock_guard lk(mu_);
    return {queue_.begin(), queue_.end()};
  }

  CacheStats stats() const {
    std::lock_guard lk(mu_);
    CacheStats s = stats_;
    s.resident_tiles = entries_.size();
    return s;
  }

  // Called under the cache lock for each evicted key, in eviction order.
  void set_eviction_listener(std::function<void(const TileKey&)> fn) {
    std::lock_guard lk(mu_);
    on_evict_ = std::move(fn);
  }

  // Blocks until the background loader has drained its queue.
  void wait_idle() {
    std::unique_lock lk(loader_mu_);
    idle_cv_.wait(lk, [&] { return pending_.empty() && !loader_busy_; });
  }

 private:
  struct Entry {
    std::shared_ptr<const Tile> tile;
    std::list<TileKey>::iterator pos;
  };

  void touch(Entry& e) { queue_.splice(queue_.end(), queue_, e.pos); }

  void insert(std::shared_ptr<const Tile> tile) {
    const TileKey key = tile->key;
    queue_.push_back(key);
    stats_.resident_bytes += tile->byte_size();
    entries_.emplace(key, Entry{std::move(tile), std::prev(queue_.end())});
    while (stats_.resident_bytes > budget_.max_bytes && queue_.size() > 1) {
      const TileKey victim = queue_.front();
      queue_.pop_front();
      auto it = entries_.find(victim);
      stats_.resident_bytes -= it->second.tile->byte_size();
      entries_.erase(it);
      ++stats_.evictions;
      if (on_evict_) on_evict_(victim);
    }
    stats_.peak_resident_bytes = std::max(stats_.peak_resident_bytes, stats_.resident_bytes);
  }

  Tile upscale_from(const Tile& anc, const TileKey& key) const {
    const Rect r = pyramid_->tile_rect(key);
    const int d = anc.key.level - key.level;
    const int ts = pyramid_->tile_size();
    const int ax0 = anc.key.col * ts;
    const int ay0 = anc.key.row * ts;
    const int ch = anc.channels;
    Tile out{key, r.w, r.h, ch, std::vector<std::uint8_t>(std::size_t(r.area()) * ch)};
    for (int j = 0; j < r.h; ++j) {
      const int sy = std::min(((r.y + j) >> d) - ay0, anc.height - 1);
      for (int i = 0; i < r.w; ++i) {
        const int sx = std::min(((r.x + i) >> d) - ax0, anc.width - 1);
        std::copy_n(anc.pixels.data() + (std::size_t(sy) * anc.width + sx) * ch, ch,
                    out.pixels.data() + (std::size_t(j) * r.w + i) * ch);
      }
    }
    return out;
  }

  void schedule(const TileKey& key) {
    std::lock_guard lk(loader_mu_);
    if (!loader_.joinable()) loader_ = std::jthread([this](std::stop_token st) { loader_loop(st); });
    if (queued_.insert(key).second) pending_.push_back(key);
    loader_cv_.notify_one();
  }

  void loader_loop(std::stop_token st) {
    std::unique_lock lk(loader_mu_);
    while (!st.stop_requested()) {
      loader_cv_.wait(lk, st, [&] { return !pending_.empty(); });
      if (st.stop_requested()) break;
      const TileKey key = pending_.front();
      pending_.pop_front();
      loader_busy_ = true;
      lk.unlock();
      try {
        get_tile(key);
      } catch (...) {
        // Read failures surface on the next synchronous request.
      }
      lk.lock();
      queued_.erase(key);
      loader_busy_ = false;
      if (pending_.empty()) idle_cv_.notify_all();
    }
  }

  std::shared_ptr<const ImagePyramid> pyramid_;
  CacheBudget budget_;
  std::unordered_map<TileKey, std::shared_ptr<const Tile>, TileKeyHash> pinned_;

  mutable std::mutex mu_;
  std::list<TileKey> queue_;
  std::unordered_map<TileKey, Entry, TileKeyHash> entries_;
  std::unordered_map<TileKey, std::shared_future<std::shared_ptr<const Tile>>, TileKeyHash> inflight_;
  CacheStats stats_;
  std::function<void(const TileKey&)> on_evict_;

  std::mutex loader_mu_;
  std::condition_variable_any loader_cv_;
  std::condition_variable_any idle_cv_;
  std::deque<TileKey> pending_;
  std::unordered_set<TileKey, TileKeyHash> queued_;
  bool loader_busy_ = false;
  std::jthread loader_;
};

}  // namespace pyraflow
