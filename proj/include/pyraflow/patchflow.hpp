#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <iostream>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <thread>
#include <variant>
#include <vector>

#include "pyraflow/channel.hpp"
#include "pyraflow/models.hpp"
#include "pyraflow/pyramid.hpp"
#include "pyraflow/tissue.hpp"

namespace pyraflow {

// ---------------------------------------------------------------------------
// Patch planning
// ---------------------------------------------------------------------------

struct PatchDescriptor {
  int level = 0;
  int origin_x = 0;  // level pixels, = grid_col * footprint_w
  int origin_y = 0;
  int valid_w = 0;   // footprint clipped to the level
  int valid_h = 0;
  int grid_col = 0;
  int grid_row = 0;

  Rect rect() const noexcept { return {origin_x, origin_y, valid_w, valid_h}; }
};

struct PatchPlan {
  int level = 0;
  int level_width = 0;
  int level_height = 0;
  int footprint_w = 0;  // patch extent at the source level
  int footprint_h = 0;
  int patch_w = 0;      // pixel size of the patch handed on (after resizing)
  int patch_h = 0;
  int grid_cols = 0;
  int grid_rows = 0;
  double target_magnification = 0;
  std::vector<PatchDescriptor> patches;  // row-major
};

struct Patch {
  PatchDescriptor desc;
  Raster pixels;  // patch_w x patch_h
};

// Coarsest level whose magnification still reaches the target; an exact
// match when one exists.
inline int source_level_for(const ImagePyramid& p, double target_magnification) {
  if (!(target_magnification > 0)) throw ConfigError("target magnification must be > 0");
  constexpr double eps = 1e-9;
  if (target_magnification > p.base_magnification() * (1 + eps))
    throw ConfigError("target magnification " + std::to_string(target_magnification) +
                      " exceeds the slide's base magnification " + std::to_string(p.base_magnification()));
  int l = 0;
  while (l + 1 < p.level_count() && p.magnification(l + 1) >= target_magnification * (1 - eps)) ++l;
  return l;
}

namespace detail {

inline double mask_fraction(const TissueMask& mask, const Rect& r, int level_w, int level_h) {
  const int mx0 = int(std::int64_t(r.x) * mask.width / level_w);
  const int my0 = int(std::int64_t(r.y) * mask.height / level_h);
  const int mx1 = std::max(mx0 + 1, ceil_div(std::int64_t(r.right()) * mask.width, level_w));
  const int my1 = std::max(my0 + 1, ceil_div(std::int64_t(r.bottom()) * mask.height, level_h));
  std::int64_t ones = 0, total = 0;
  for (int y = my0; y < std::min(my1, mask.height); ++y)
    for (int x = mx0; x < std::min(mx1, mask.width); ++x) {
      ones += mask.at(x, y) != 0;
      ++total;
    }
  return total ? double(ones) / double(total) : 0.0;
}

}  // namespace detail

// Non-overlapping grid over the source level. With a mask (any resolution
// covering the whole slide), a patch is kept when at least keep_fraction of
// its projected mask area is tissue.
inline PatchPlan plan_patches(const ImagePyramid& p, const TissueMask* mask, int patch_size,
                              double target_magnification, double keep_fraction = 0.1) {
  if (patch_size <= 0) throw ConfigError("patch_size must be > 0");
  PatchPlan plan;
  plan.level = source_level_for(p, target_magnification);
  const auto& lv = p.level(plan.level);
  plan.level_width = lv.width;
  plan.level_height = lv.height;
  plan.target_magnification = target_magnification;
  const double scale = p.magnification(plan.level) / target_magnification;
  plan.footprint_w = plan.footprint_h = std::max(1, int(std::lround(patch_size * scale)));
  plan.patch_w = plan.patch_h = patch_size;
  plan.grid_cols = ceil_div(lv.width, plan.footprint_w);
  plan.grid_rows = ceil_div(lv.height, plan.footprint_h);
  for (int row = 0; row < plan.grid_rows; ++row) {
    for (int col = 0; col < plan.grid_cols; ++col) {
      PatchDescriptor d;
      d.level = plan.level;
      d.grid_col = col;
      d.grid_row = row;
      d.origin_x = col * plan.footprint_w;
      d.origin_y = row * plan.footprint_h;
      d.valid_w = std::min(plan.footprint_w, lv.width - d.origin_x);
      d.valid_h = std::min(plan.footprint_h, lv.height - d.origin_y);
      if (mask && detail::mask_fraction(*mask, d.rect(), lv.width, lv.height) < keep_fraction) continue;
      plan.patches.push_back(d);
    }
  }
  return plan;
}

// One patch spanning the whole lowest-resolution level, resized to the given
// size (whole-image segmentation).
inline PatchPlan plan_whole_level(const ImagePyramid& p, int out_w, int out_h) {
  PatchPlan plan;
  plan.level = p.level_count() - 1;
  const auto& lv = p.level(plan.level);
  plan.level_width = plan.footprint_w = lv.width;
  plan.level_height = plan.footprint_h = lv.height;
  plan.patch_w = out_w;
  plan.patch_h = out_h;
  plan.grid_cols = plan.grid_rows = 1;
  plan.target_magnification = p.magnification(plan.level);
  plan.patches.push_back({plan.level, 0, 0, lv.width, lv.height, 0, 0});
  return plan;
}

// Reads the patch, pads edge patches with white up to the full footprint and
// resizes (bilinear) to the patch size when the footprint differs.
inline Patch read_patch(const ImagePyramid& p, const PatchPlan& plan, const PatchDescriptor& d) {
  Raster block = p.read_region(d.level, d.rect());
  if (d.valid_w != plan.footprint_w || d.valid_h != plan.footprint_h) {
    Raster padded(plan.footprint_w, plan.footprint_h, block.channels, 255);
    blit(block, padded, 0, 0);
    block = std::move(padded);
  }
  return {d, resize_bilinear(block, plan.patch_w, plan.patch_h)};
}

// Network input: resized to the descriptor's input size when needed and
// scaled v/255 into [0, 1], channel order preserved.
inline Tensor preprocess(const Raster& pixels, const ModelDescriptor& desc) {
  std::vector<float> f(pixels.data.size());
  for (std::size_t i = 0; i < f.size(); ++i) f[i] = float(pixels.data[i]) / 255.0f;
  int channels = pixels.channels;
  if (desc.input_channels == 1 && channels == 3) {
    std::vector<float> g(f.size() / 3);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] = (f[3 * i] + f[3 * i + 1] + f[3 * i + 2]) / 3.0f;
    f = std::move(g);
    channels = 1;
  } else if (desc.input_channels == 3 && channels == 1) {
    std::vector<float> c(f.size() * 3);
    for (std::size_t i = 0; i < f.size(); ++i) c[3 * i] = c[3 * i + 1] = c[3 * i + 2] = f[i];
    f = std::move(c);
    channels = 3;
  }
  Tensor t{pixels.width, pixels.height, channels, std::move(f)};
  if (t.width != desc.input_width || t.height != desc.input_height) {
    t.data = resize_bilinear(t.data, t.width, t.height, channels, desc.input_width, desc.input_height);
    t.width = desc.input_width;
    t.height = desc.input_height;
  }
  return t;
}

inline Tensor preprocess(const Patch& patch, const ModelDescriptor& desc) { return preprocess(patch.pixels, desc); }

// Groups items in order; the last batch may be short.
template <typename T>
std::vector<std::vector<T>> make_batches(std::vector<T> items, std::size_t batch_size) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::vector<T>> out;
  for (std::size_t i = 0; i < items.size(); i += batch_size) {
    const auto end = std::min(items.size(), i + batch_size);
    out.emplace_back(std::make_move_iterator(items.begin() + std::ptrdiff_t(i)),
                     std::make_move_iterator(items.begin() + std::ptrdiff_t(end)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Result layers
// ---------------------------------------------------------------------------

inline void log_warning(const std::string& msg) { std::clog << "pyraflow: warning: " << msg << "\n"; }

// Plain heatmap values: cols x rows cells of C confidences.
struct HeatmapData {
  int cols = 0;
  int rows = 0;
  int classes = 0;
  std::vector<float> values;            // (row * cols + col) * classes + c
  std::vector<std::uint8_t> processed;  // 0 = not (yet) classified

  HeatmapData() = default;
  HeatmapData(int c, int r, int k)
      : cols(c), rows(r), classes(k), values(std::size_t(c) * r * k, 0.0f), processed(std::size_t(c) * r, 0) {}

  std::size_t cell(int col, int row) const { return std::size_t(row) * cols + col; }
  bool is_processed(int col, int row) const { return processed[cell(col, row)] != 0; }
  std::span<const float> probabilities(int col, int row) const {
    return {values.data() + cell(col, row) * classes, std::size_t(classes)};
  }

  // -1 for unprocessed cells; ties resolve to the lowest class.
  int argmax(int col, int row) const {
    if (!is_processed(col, row)) return -1;
    const auto p = probabilities(col, row);
    return int(std::max_element(p.begin(), p.end()) - p.begin());
  }

  std::size_t processed_count() const {
    return std::size_t(std::count_if(processed.begin(), processed.end(), [](auto v) { return v != 0; }));
  }

  friend bool operator==(const HeatmapData&, const HeatmapData&) = default;
};

// Heatmap shared between the stitcher (single writer) and readers; a cell
// becomes visible all at once when committed.
class Heatmap {
 public:
  Heatmap(int cols, int rows, int classes) : data_(cols, rows, classes) {}

  void commit(int col, int row, std::span<const float> probs) {
    if (col < 0 || row < 0 || col >= data_.cols || row >= data_.rows)
      throw RangeError("heatmap cell outside grid");
    if (int(probs.size()) != data_.classes) throw RangeError("heatmap commit: wrong class count");
    std::unique_lock lk(mu_);
    const auto c = data_.cell(col, row);
    if (data_.processed[c]) {
      ++duplicates_;
      log_warning("heatmap cell (" + std::to_string(col) + ", " + std::to_string(row) +
                  ") written twice; keeping the last value");
    }
    std::copy(probs.begin(), probs.end(), data_.values.begin() + std::ptrdiff_t(c * data_.classes));
    data_.processed[c] = 1;
  }

  HeatmapData snapshot() const {
    std::shared_lock lk(mu_);
    return data_;
  }

  template <typename Fn>
  auto read(Fn&& fn) const {
    std::shared_lock lk(mu_);
    return fn(static_cast<const HeatmapData&>(data_));
  }

  int cols() const noexcept { return data_.cols; }
  int rows() const noexcept { return data_.rows; }
  int classes() const noexcept { return data_.classes; }
  std::uint64_t duplicate_commits() const {
    std::shared_lock lk(mu_);
    return duplicates_;
  }

 private:
  mutable std::shared_mutex mu_;
  HeatmapData data_;
  std::uint64_t duplicates_ = 0;
};

// Folds independent (col, row, probabilities) results into a heatmap; the
// outcome does not depend on arrival order.
inline HeatmapData stitch_classification(int cols, int rows, int classes,
                                         const std::vector<std::tuple<int, int, Probabilities>>& results) {
  Heatmap h(cols, rows, classes);
  for (const auto& [c, r, p] : results) h.commit(c, r, p);
  return h.snapshot();
}

inline constexpr std::uint8_t kUnprocessed = 255;

// Most frequent label among up to four children, ignoring unprocessed ones;
// ties go to the larger class id.
inline std::uint8_t majority_label(std::span<const std::uint8_t> children) {
  std::array<int, 256> counts{};
  std::uint8_t best = kUnprocessed;
  int best_count = 0;
  for (auto v : children) {
    if (v == kUnprocessed) continue;
    const int c = ++counts[v];
    if (c > best_count || (c == best_count && v > best)) {
      best = v;
      best_count = c;
    }
  }
  return best;
}

// Stitched per-pixel classes laid out as a 1-channel pyramid over the
// processed level. Unwritten pixels hold kUnprocessed. Coarser levels are
// refreshed by majority-of-4 as regions are committed.
class SegmentationLayer {
 public:
  SegmentationLayer(int width, int height, const PyramidPolicy& policy = {}, double magnification = 0)
      : pyramid_(create_pyramid(width, height, 1, policy, magnification > 0 ? magnification : 1.0)) {
    for (const auto& lv : pyramid_.levels()) {
      constexpr int band = 256;
      for (int y = 0; y < lv.height; y += band) {
        const Raster fill(lv.width, std::min(band, lv.height - y), 1, kUnprocessed);
        pyramid_.write_region(lv.index, 0, y, fill);
      }
    }
  }

  int width() const noexcept { return pyramid_.width(); }
  int height() const noexcept { return pyramid_.height(); }

  void commit(int x, int y, const Raster& labels) {
    if (labels.channels != 1) throw TypeError("segmentation labels must be 1 channel");
    std::unique_lock lk(mu_);
    pyramid_.write_region(0, x, y, labels);
    Rect dirty{x, y, labels.width, labels.height};
    for (int l = 1; l < pyramid_.level_count(); ++l) {
      const auto& lv = pyramid_.level(l);
      const Rect coarse{dirty.x / 2, dirty.y / 2, 0, 0};
      const int x1 = std::min(lv.width, ceil_div(dirty.right(), 2));
      const int y1 = std::min(lv.height, ceil_div(dirty.bottom(), 2));
      const Rect dst{coarse.x, coarse.y, x1 - coarse.x, y1 - coarse.y};
      const auto& fine = pyramid_.level(l - 1);
      const Rect src = intersect(Rect{dst.x * 2, dst.y * 2, dst.w * 2, dst.h * 2}, Rect{0, 0, fine.width, fine.height});
      const Raster children = pyramid_.read_region(l - 1, src);
      Raster out(dst.w, dst.h, 1);
      for (int j = 0; j < dst.h; ++j) {
        for (int i = 0; i < dst.w; ++i) {
          std::array<std::uint8_t, 4> c{};
          std::size_t n = 0;
          for (int dy = 0; dy < 2; ++dy)
            for (int dx = 0; dx < 2; ++dx) {
              const int sx = i * 2 + dx, sy = j * 2 + dy;
              if (sx < children.width && sy < children.height) c[n++] = children.at(sx, sy);
            }
          out.at(i, j) = majority_label({c.data(), n});
        }
      }
      pyramid_.write_region(l, dst.x, dst.y, out);
      dirty = dst;
    }
  }

  Raster read(int level, const Rect& r) const {
    std::shared_lock lk(mu_);
    return pyramid_.read_region(level, r);
  }

  Raster read_level(int level) const {
    const auto& lv = pyramid_.level(level);
    return read(level, Rect{0, 0, lv.width, lv.height});
  }

  // Unsynchronised access to metadata (immutable after construction).
  const ImagePyramid& pyramid() const noexcept { return pyramid_; }

 private:
  mutable std::shared_mutex mu_;
  ImagePyramid pyramid_;
};

// ---------------------------------------------------------------------------
// Detections
// ---------------------------------------------------------------------------

inline double iou(const Box& a, const Box& b) {
  const double ix = std::max(0.0, std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x));
  const double iy = std::max(0.0, std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y));
  const double inter = ix * iy;
  const double uni = a.w * a.h + b.w * b.h - inter;
  return uni > 0 ? inter / uni : 0.0;
}

// Greedy class-aware NMS. Candidates are visited by (score desc, x asc,
// y asc); a box is dropped when it overlaps a kept box of its class with
// IoU >= threshold.
inline Detections nms(Detections dets, double iou_threshold) {
  if (!(iou_threshold >= 0 && iou_threshold <= 1)) throw ConfigError("IoU threshold must lie in [0, 1]");
  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x != b.box.x) return a.box.x < b.box.x;
    return a.box.y < b.box.y;
  });
  Detections kept;
  for (const auto& d : dets) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) >= iou_threshold;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

// Maps a patch-local box to level-0 pixels: local coordinates are scaled from
// network-input to footprint pixels, offset by the patch origin and
// multiplied by 2^level.
inline Box to_level0(const PatchDescriptor& d, const Box& local, double sx = 1.0, double sy = 1.0) {
  const double f = double(std::int64_t(1) << d.level);
  return {(d.origin_x + local.x * sx) * f, (d.origin_y + local.y * sy) * f, local.w * sx * f, local.h * sy * f};
}

// Concatenates per-patch detections in level-0 coordinates; NMS is applied
// once over the union.
class DetectionLayer {
 public:
  explicit DetectionLayer(double nms_threshold = 0.5) : nms_threshold_(nms_threshold) {}

  void add(const Detections& level0_boxes) {
    std::lock_guard lk(mu_);
    raw_.insert(raw_.end(), level0_boxes.begin(), level0_boxes.end());
    final_.reset();
  }

  Detections raw() const {
    std::lock_guard lk(mu_);
    return raw_;
  }

  Detections final_set() const {
    std::lock_guard lk(mu_);
    if (!final_) final_ = nms(raw_, nms_threshold_);
    return *final_;
  }

  double nms_threshold() const noexcept { return nms_threshold_; }

 private:
  double nms_threshold_;
  mutable std::mutex mu_;
  Detections raw_;
  mutable std::optional<Detections> final_;
};

inline Detections accumulate_detections(const std::vector<std::pair<PatchDescriptor, Detections>>& stream,
                                        double nms_threshold = 0.5) {
  DetectionLayer layer(nms_threshold);
  for (const auto& [desc, boxes] : stream) {
    Detections mapped;
    for (auto d : boxes) {
      d.box = to_level0(desc, d.box);
      mapped.push_back(d);
    }
    layer.add(mapped);
  }
  return layer.final_set();
}

// ---------------------------------------------------------------------------
// Streaming run
// ---------------------------------------------------------------------------

using ResultLayer =
    std::variant<std::shared_ptr<Heatmap>, std::shared_ptr<SegmentationLayer>, std::shared_ptr<DetectionLayer>>;

struct DirtyRegion {
  int level = 0;
  Rect rect;
};

struct RunProgress {
  std::uint64_t patches_done = 0;
  std::uint64_t patches_total = 0;
  std::vector<DirtyRegion> dirty_regions;  // since the previous poll
};

struct RunObserver {
  std::function<void(std::uint64_t done, std::uint64_t total)> on_progress;
  std::function<void(const DirtyRegion&)> on_region;
};

enum class RunState { pending, running, halted, finished, failed };

inline const char* to_string(RunState s) {
  switch (s) {
    case RunState::pending: return "pending";
    case RunState::running: return "running";
    case RunState::halted: return "halted";
    case RunState::finished: return "finished";
    case RunState::failed: return "failed";
  }
  return "?";
}

// Milliseconds spent in each stage during one run (stages overlap in time).
struct StageTotals {
  double patch_generator_ms = 0;
  double nn_input_ms = 0;
  double nn_inference_ms = 0;
  double nn_output_ms = 0;
  double patch_stitcher_ms = 0;
  double total_ms = 0;
};

struct PipelineConfig {
  TaskType task = TaskType::patch_classification;
  PatchPlan plan;
  int batch_size = 1;
  std::size_t buffer_capacity = 64;  // per inter-stage channel
  double nms_threshold = 0.5;
  PyramidPolicy result_policy{};
};

// One execution of generate -> preprocess -> infer -> stitch. The stages run
// on their own threads (stitching on the caller's) and talk over bounded
// channels, so the result layer fills while patches are still generated.
class PipelineRun {
 public:
  PipelineRun(std::shared_ptr<const ImagePyramid> slide, PipelineConfig cfg, std::shared_ptr<ModelRunner> runner)
      : slide_(std::move(slide)), cfg_(std::move(cfg)), runner_(std::move(runner)) {
    if (!slide_ || !runner_) throw ConfigError("pipeline needs a slide and a runner");
    if (cfg_.batch_size < 1) throw ConfigError("batch_size must be >= 1");
    const auto& d = runner_->descriptor();
    total_ = cfg_.plan.patches.size();
    switch (cfg_.task) {
      case TaskType::patch_classification:
        result_ = std::make_shared<Heatmap>(cfg_.plan.grid_cols, cfg_.plan.grid_rows, d.num_classes);
        break;
      case TaskType::image_segmentation:
      case TaskType::patch_segmentation:
        result_ = std::make_shared<SegmentationLayer>(cfg_.plan.level_width, cfg_.plan.level_height,
                                                      cfg_.result_policy, slide_->magnification(cfg_.plan.level));
        break;
      case TaskType::detection: result_ = std::make_shared<DetectionLayer>(cfg_.nms_threshold); break;
    }
    if (d.task != cfg_.task && !(is_segmentation(d.task) && is_segmentation(cfg_.task)))
      throw ConfigError(std::string("model task ") + to_string(d.task) + " does not match pipeline task " +
                        to_string(cfg_.task));
  }

  PipelineRun(const PipelineRun&) = delete;
  PipelineRun& operator=(const PipelineRun&) = delete;

  const ResultLayer& result() const noexcept { return result_; }
  const PipelineConfig& config() const noexcept { return cfg_; }
  const ImagePyramid& slide() const noexcept { return *slide_; }

  // Stops generation; patches already in flight are still stitched.
  void halt() noexcept { halt_.store(true); }
  bool halt_requested() const noexcept { return halt_.load(); }

  RunState state() const noexcept { return state_.load(); }
  std::uint64_t patches_done() const noexcept { return done_.load(); }
  std::uint64_t patches_total() const noexcept { return total_; }
  std::size_t peak_resident_patches() const noexcept { return peak_resident_.load(); }

  RunProgress poll() {
    std::lock_guard lk(progress_mu_);
    RunProgress p{done_.load(), total_, std::move(pending_regions_)};
    pending_regions_.clear();
    return p;
  }

  StageTotals timings() const {
    auto ms = [](const std::atomic<std::int64_t>& ns) { return double(ns.load()) / 1e6; };
    return {ms(ns_generate_), ms(ns_input_), ms(ns_infer_), ms(ns_output_), ms(ns_stitch_), ms(ns_total_)};
  }

  std::optional<StageError> error() const {
    std::lock_guard lk(error_mu_);
    return error_;
  }

  // Runs to completion, halt, or failure on the calling thread. Throws the
  // failing stage's StageError; the partial result stays readable.
  RunState execute(const RunObserver& observer = {}) {
    RunState expected = RunState::pending;
    if (!state_.compare_exchange_strong(expected, RunState::running))
      throw Error("pipeline run already started");
    const auto t0 = Clock::now();

    BoundedChannel<Patch> patches(cfg_.buffer_capacity);
    BoundedChannel<std::pair<PatchDescriptor, Tensor>> tensors(cfg_.buffer_capacity);
    BoundedChannel<std::pair<PatchDescriptor, ModelOutput>> outputs(cfg_.buffer_capacity);
    auto abort_all = [&] {
      patches.cancel();
      tensors.cancel();
      outputs.cancel();
    };

    std::jthread generator([&] {
      try {
        for (const auto& d : cfg_.plan.patches) {
          if (halt_.load() || failed_.load()) break;
          const auto s = Clock::now();
          Patch p = read_patch(*slide_, cfg_.plan, d);
          add_ns(ns_generate_, s);
          enter_patch();
          if (!patches.push(std::move(p))) {
            leave_patch();
            break;
          }
        }
      } catch (const std::exception& e) {
        fail("patch_generator", e.what());
        abort_all();
      }
      patches.close();
    });

    std::jthread preprocessor([&] {
      try {
        const auto& desc = runner_->descriptor();
        while (auto p = patches.pop()) {
          const auto s = Clock::now();
          Tensor t = preprocess(*p, desc);
          add_ns(ns_input_, s);
          if (!tensors.push({p->desc, std::move(t)})) break;
        }
      } catch (const std::exception& e) {
        fail("nn_input", e.what());
        abort_all();
      }
      tensors.close();
    });

    std::jthread inference([&] {
      try {
        std::vector<PatchDescriptor> descs;
        std::vector<Tensor> batch;
        auto flush = [&]() -> bool {
          if (batch.empty()) return true;
          const auto s = Clock::now();
          std::vector<ModelOutput> out;
          if (runner_->concurrent_safe()) {
            out = runner_->invoke(batch);
          } else {
            std::lock_guard lk(runner_mu_);
            out = runner_->invoke(batch);
          }
          add_ns(ns_infer_, s);
          if (out.size() != batch.size())
            throw Error("runner returned " + std::to_string(out.size()) + " outputs for a batch of " +
                        std::to_string(batch.size()));
          for (std::size_t i = 0; i < out.size(); ++i)
            if (!outputs.push({descs[i], std::move(out[i])})) return false;
          descs.clear();
          batch.clear();
          return true;
        };
        while (auto item = tensors.pop()) {
          descs.push_back(item->first);
          batch.push_back(std::move(item->second));
          if (int(batch.size()) >= cfg_.batch_size && !flush()) break;
        }
        flush();
      } catch (const std::exception& e) {
        fail("nn_inference", e.what());
        abort_all();
      }
      outputs.close();
    });

    const char* stage = "nn_output";
    try {
      while (auto item = outputs.pop()) {
        stage = "nn_output";
        auto s = Clock::now();
        auto stitched = postprocess(item->first, std::move(item->second));
        add_ns(ns_output_, s);
        stage = "patch_stitcher";
        s = Clock::now();
        commit(item->first, stitched);
        add_ns(ns_stitch_, s);
        leave_patch();
        const auto done = done_.fetch_add(1) + 1;
        const DirtyRegion region{item->first.level, item->first.rect()};
        {
          std::lock_guard lk(progress_mu_);
          pending_regions_.push_back(region);
        }
        if (observer.on_region) observer.on_region(region);
        if (observer.on_progress) observer.on_progress(done, total_);
      }
    } catch (const std::exception& e) {
      fail(stage, e.what());
      abort_all();
    }

    generator.join();
    preprocessor.join();
    inference.join();
    ns_total_.store((Clock::now() - t0).count());

    if (auto err = error()) {
      state_.store(RunState::failed);
      throw *err;
    }
    state_.store(halt_.load() && done_.load() < total_ ? RunState::halted : RunState::finished);
    return state_.load();
  }

 private:
  using Clock = std::chrono::steady_clock;
  using Stitched = std::variant<Probabilities, Raster, Detections>;

  static void add_ns(std::atomic<std::int64_t>& acc, Clock::time_point since) {
    acc.fetch_add(std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - since).count());
  }

  void enter_patch() {
    const auto now = resident_.fetch_add(1) + 1;
    auto peak = peak_resident_.load();
    while (now > peak && !peak_resident_.compare_exchange_weak(peak, now)) {}
  }
  void leave_patch() { resident_.fetch_sub(1); }

  void fail(const std::string& stage, const std::string& what) {
    std::lock_guard lk(error_mu_);
    if (!error_) error_.emplace(stage, what);
    failed_.store(true);
  }

  // Maps a model output from network-input space back onto the patch's
  // footprint at the source level.
  Stitched postprocess(const PatchDescriptor& d, ModelOutput out) const {
    const auto& desc = runner_->descriptor();
    const auto& plan = cfg_.plan;
    return std::visit(
        [&](auto&& v) -> Stitched {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, Probabilities>) {
            if (cfg_.task != TaskType::patch_classification) throw Error("unexpected classification output");
            if (int(v.size()) != desc.num_classes)
              throw Error("classifier returned " + std::to_string(v.size()) + " probabilities, expected " +
                          std::to_string(desc.num_classes));
            return std::move(v);
          } else if constexpr (std::is_same_v<V, LabelRaster>) {
            if (!is_segmentation(cfg_.task)) throw Error("unexpected segmentation output");
            if (v.channels != 1 || v.width != desc.input_width || v.height != desc.input_height)
              throw Error("label raster " + std::to_string(v.width) + "x" + std::to_string(v.height) +
                          " does not match the model input for patch (" + std::to_string(d.grid_col) + ", " +
                          std::to_string(d.grid_row) + ")");
            const Raster full = resize_nearest(v, plan.footprint_w, plan.footprint_h);
            return crop(full, Rect{0, 0, d.valid_w, d.valid_h});
          } else {
            if (cfg_.task != TaskType::detection) throw Error("unexpected detection output");
            const double sx = double(plan.footprint_w) / desc.input_width;
            const double sy = double(plan.footprint_h) / desc.input_height;
            Detections mapped;
            for (auto det : v) {
              Box b{det.box.x, det.box.y, det.box.w, det.box.h};
              // Clip to the valid part of the patch (in input pixels).
              const double vx = d.valid_w / sx, vy = d.valid_h / sy;
              const double x1 = std::min(b.x + b.w, vx), y1 = std::min(b.y + b.h, vy);
              b.x = std::max(0.0, b.x);
              b.y = std::max(0.0, b.y);
              if (x1 <= b.x || y1 <= b.y) continue;
              b.w = x1 - b.x;
              b.h = y1 - b.y;
              det.box = to_level0(d, b, sx, sy);
              det.score = std::clamp(det.score, 0.0, 1.0);
              mapped.push_back(det);
            }
            return mapped;
          }
        },
        std::move(out));
  }

  void commit(const PatchDescriptor& d, const Stitched& s) {
    std::visit(
        [&](const auto& v) {
          using V = std::decay_t<decltype(v)>;
          if constexpr (std::is_same_v<V, Probabilities>) {
            std::get<std::shared_ptr<Heatmap>>(result_)->commit(d.grid_col, d.grid_row, v);
          } else if constexpr (std::is_same_v<V, Raster>) {
            std::get<std::shared_ptr<SegmentationLayer>>(result_)->commit(d.origin_x, d.origin_y, v);
          } else {
            std::get<std::shared_ptr<DetectionLayer>>(result_)->add(v);
          }
        },
        s);
  }

  std::shared_ptr<const ImagePyramid> slide_;
  PipelineConfig cfg_;
  std::shared_ptr<ModelRunner> runner_;
  ResultLayer result_;
  std::uint64_t total_ = 0;

  std::atomic<RunState> state_{RunState::pending};
  std::atomic<bool> halt_{false};
  std::atomic<bool> failed_{false};
  std::atomic<std::uint64_t> done_{0};
  std::atomic<std::size_t> resident_{0};
  std::atomic<std::size_t> peak_resident_{0};
  std::mutex runner_mu_;

  std::atomic<std::int64_t> ns_generate_{0}, ns_input_{0}, ns_infer_{0}, ns_output_{0}, ns_stitch_{0}, ns_total_{0};

  std::mutex progress_mu_;
  std::vector<DirtyRegion> pending_regions_;

  mutable std::mutex error_mu_;
  std::optional<StageError> error_;
};

// Builds and executes a run; returns it for result access.
inline std::shared_ptr<PipelineRun> run_pipeline(std::shared_ptr<const ImagePyramid> slide, PipelineConfig cfg,
                                                 std::shared_ptr<ModelRunner> runner,
                                                 const RunObserver& observer = {}) {
  auto run = std::make_shared<PipelineRun>(std::move(slide), std::move(cfg), std::move(runner));
  run->execute(observer);
  return run;
}

}  // namespace pyraflow
