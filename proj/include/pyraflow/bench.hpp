#pragma once

#include <array>
#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cmath>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <unistd.h>

#include <boost/math/distributions/students_t.hpp>

#include "pyraflow/patchflow.hpp"
#include "pyraflow/synthetic.hpp"
#include "pyraflow/tilecache.hpp"

namespace pyraflow {

// ---------------------------------------------------------------------------
// Runtime benchmark
// ---------------------------------------------------------------------------

inline constexpr std::array<const char*, 5> kStageNames{"patch_generator", "nn_input", "nn_inference", "nn_output",
                                                        "patch_stitcher"};

struct StageTimings {
  std::array<std::vector<double>, 5> stages;  // ms, indexed like kStageNames
  std::vector<double> total_s;

  std::size_t runs() const noexcept { return total_s.size(); }

  void add(const StageTotals& t) {
    stages[0].push_back(t.patch_generator_ms);
    stages[1].push_back(t.nn_input_ms);
    stages[2].push_back(t.nn_inference_ms);
    stages[3].push_back(t.nn_output_ms);
    stages[4].push_back(t.patch_stitcher_ms);
    total_s.push_back(t.total_ms / 1000.0);
  }
};

// Runs the launcher warmups times (discarded), then runs times in sequence.
inline StageTimings run_benchmark(const std::function<StageTotals()>& launcher, int warmups, int runs) {
  if (warmups < 0) throw ConfigError("warmups must be >= 0");
  if (runs < 1) throw ConfigError("runs must be >= 1");
  for (int i = 0; i < warmups; ++i) launcher();
  StageTimings t;
  for (int i = 0; i < runs; ++i) t.add(launcher());
  return t;
}

struct SampleSummary {
  std::size_t n = 0;
  double mean = 0;
  double stddev = 0;      // sample standard deviation (n - 1)
  double half_width = 0;  // 95% CI half-width; 0 when n < 2
  bool degenerate = false;
};

inline double t_quantile_975(std::size_t dof) {
  const boost::math::students_t dist{static_cast<double>(dof)};
  return boost::math::quantile(dist, 0.975);
}

// Mean and t_{0.975, n-1} * s / sqrt(n).
inline SampleSummary summarize(std::span<const double> samples) {
  if (samples.empty()) throw ConfigError("summarize needs at least one sample");
  SampleSummary s;
  s.n = samples.size();
  double sum = 0;
  for (double v : samples) sum += v;
  s.mean = sum / double(s.n);
  if (s.n < 2) {
    s.degenerate = true;
    return s;
  }
  double ss = 0;
  for (double v : samples) ss += (v - s.mean) * (v - s.mean);
  s.stddev = std::sqrt(ss / double(s.n - 1));
  s.half_width = t_quantile_975(s.n - 1) * s.stddev / std::sqrt(double(s.n));
  return s;
}

struct Summary {
  std::array<SampleSummary, 5> stages;
  SampleSummary total_s;
};

inline Summary summarize(const StageTimings& t) {
  Summary s;
  for (std::size_t i = 0; i < t.stages.size(); ++i) s.stages[i] = summarize(t.stages[i]);
  s.total_s = summarize(t.total_s);
  return s;
}

// Columns run, stage, sample_ms; one row per run and stage plus a "total" row.
inline std::string timings_csv(const StageTimings& t) {
  std::ostringstream os;
  os << "run,stage,sample_ms\n";
  os.precision(9);
  for (std::size_t r = 0; r < t.runs(); ++r) {
    for (std::size_t s = 0; s < t.stages.size(); ++s) os << r << "," << kStageNames[s] << "," << t.stages[s][r] << "\n";
    os << r << ",total," << t.total_s[r] * 1000.0 << "\n";
  }
  return os.str();
}

inline std::string summary_text(const Summary& s) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(3);
  auto line = [&](const std::string& name, const SampleSummary& x, const char* unit) {
    os << name << ": " << x.mean << " " << unit << " +/- " << x.half_width << " (95% CI, n=" << x.n << ")"
       << (x.degenerate ? " [n < 2: interval undefined]" : "") << "\n";
  };
  for (std::size_t i = 0; i < s.stages.size(); ++i) line(kStageNames[i], s.stages[i], "ms");
  line("total", s.total_s, "s");
  return os.str();
}

// ---------------------------------------------------------------------------
// Resident memory
// ---------------------------------------------------------------------------

// Resident set size in bytes, nullopt where /proc is unavailable.
inline std::optional<std::uint64_t> resident_bytes() {
  std::ifstream in("/proc/self/statm");
  std::uint64_t size = 0, resident = 0;
  if (!(in >> size >> resident)) return std::nullopt;
  return resident * std::uint64_t(::sysconf(_SC_PAGESIZE));
}

// Samples the resident set on a background thread at a fixed cadence.
class ResidentSampler {
 public:
  explicit ResidentSampler(std::chrono::milliseconds period = std::chrono::milliseconds(100))
      : supported_(resident_bytes().has_value()) {
    if (!supported_) return;
    sample();
    thread_ = std::jthread([this, period](std::stop_token st) {
      while (!st.stop_requested()) {
        std::unique_lock lk(mu_);
        cv_.wait_for(lk, st, period, [] { return false; });
        lk.unlock();
        sample();
      }
    });
  }

  ~ResidentSampler() { stop(); }

  void stop() {
    if (thread_.joinable()) {
      thread_.request_stop();
      thread_.join();
    }
    if (supported_) sample();
  }

  void sample() {
    if (auto r = resident_bytes()) {
      std::uint64_t cur = peak_.load();
      while (*r > cur && !peak_.compare_exchange_weak(cur, *r)) {}
      last_.store(*r);
      samples_.fetch_add(1);
    }
  }

  bool supported() const noexcept { return supported_; }
  std::uint64_t peak() const noexcept { return peak_.load(); }
  std::uint64_t last() const noexcept { return last_.load(); }
  std::uint64_t samples() const noexcept { return samples_.load(); }

 private:
  bool supported_;
  std::atomic<std::uint64_t> peak_{0};
  std::atomic<std::uint64_t> last_{0};
  std::atomic<std::uint64_t> samples_{0};
  std::mutex mu_;
  std::condition_variable_any cv_;
  std::jthread thread_;
};

enum class MemoryScenario { startup, open_slide, zoom_pan };

inline std::optional<MemoryScenario> parse_memory_scenario(std::string_view s) {
  if (s == "startup") return MemoryScenario::startup;
  if (s == "open_slide") return MemoryScenario::open_slide;
  if (s == "zoom_pan") return MemoryScenario::zoom_pan;
  return std::nullopt;
}

struct MemoryScenarioConfig {
  MemoryScenario scenario = MemoryScenario::zoom_pan;
  double seconds = 150;        // simulated trace length
  double frames_per_second = 10;
  bool realtime = false;       // pace frames by wall clock
  std::uint64_t budget_bytes = 256ull << 20;
  int slide_width = 100000;
  int slide_height = 100000;
  std::uint64_t slide_seed = 42;
  std::uint64_t trace_seed = 7;
  int screen_width = 1920;
  int screen_height = 1080;
  SyntheticSpec slide_spec{};
};

struct MemoryReport {
  bool supported = true;
  std::uint64_t peak_bytes = 0;
  std::uint64_t final_bytes = 0;
  std::uint64_t samples = 0;
  std::uint64_t frames = 0;
  std::uint64_t tile_requests = 0;
  std::uint64_t tile_loads = 0;  // cache misses
  std::uint64_t peak_cache_bytes = 0;
  std::uint64_t pinned_bytes = 0;
};

// Deterministic zoom/pan trace: the view glides between random targets with
// geometric zoom interpolation, two simulated seconds per segment.
inline std::vector<Viewport> zoom_pan_trace(const ImagePyramid& p, const MemoryScenarioConfig& cfg) {
  const auto frames = std::size_t(std::llround(cfg.seconds * cfg.frames_per_second));
  const std::size_t per_segment = std::max<std::size_t>(1, std::size_t(std::llround(2 * cfg.frames_per_second)));
  std::mt19937_64 rng(cfg.trace_seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const double full = double(std::max(p.width(), p.height()));
  const double closest = double(cfg.screen_width);  // 1 screen px per level-0 px
  auto random_target = [&] {
    // Zoom drawn log-uniformly between full view and level 0.
    const double zoom = closest * std::pow(full / closest, u(rng));
    return std::array<double, 3>{u(rng) * p.width(), u(rng) * p.height(), zoom};
  };
  std::vector<Viewport> out;
  out.reserve(frames);
  std::array<double, 3> from{p.width() / 2.0, p.height() / 2.0, full};
  auto to = random_target();
  for (std::size_t f = 0, k = 0; f < frames; ++f, ++k) {
    if (k == per_segment) {
      from = to;
      to = random_target();
      k = 0;
    }
    const double t = double(k + 1) / double(per_segment);
    out.push_back({from[0] + (to[0] - from[0]) * t, from[1] + (to[1] - from[1]) * t,
                   from[2] * std::pow(to[2] / from[2], t), cfg.screen_width, cfg.screen_height});
  }
  return out;
}

// Runs a scenario headless and reports resident memory sampled every 100 ms.
inline MemoryReport memory_scenario(const MemoryScenarioConfig& cfg) {
  MemoryReport rep;
  ResidentSampler sampler;
  if (!sampler.supported()) {
    rep.supported = false;
    return rep;
  }
  if (cfg.scenario != MemoryScenario::startup) {
    auto slide = std::make_shared<const ImagePyramid>(
        make_virtual_slide(cfg.slide_seed, cfg.slide_width, cfg.slide_height, cfg.slide_spec));
    TileCache cache(slide, CacheBudget{cfg.budget_bytes});
    if (cfg.scenario == MemoryScenario::zoom_pan) {
      const auto trace = zoom_pan_trace(*slide, cfg);
      const auto frame_period = std::chrono::duration<double>(1.0 / cfg.frames_per_second);
      auto next = std::chrono::steady_clock::now();
      for (const auto& v : trace) {
        for (const auto& key : tiles_for_viewport(*slide, v)) {
          cache.get_tile(key);
          ++rep.tile_requests;
        }
        ++rep.frames;
        if (cfg.realtime) {
          next += std::chrono::duration_cast<std::chrono::steady_clock::duration>(frame_period);
          std::this_thread::sleep_until(next);
        }
      }
    }
    const auto st = cache.stats();
    rep.tile_loads = st.misses;
    rep.peak_cache_bytes = st.peak_resident_bytes;
    rep.pinned_bytes = st.pinned_bytes;
    sampler.sample();
    rep.final_bytes = sampler.last();  // while the slide is still open
  }
  sampler.stop();
  rep.peak_bytes = sampler.peak();
  if (cfg.scenario == MemoryScenario::startup) rep.final_bytes = sampler.last();
  rep.samples = sampler.samples();
  return rep;
}

}  // namespace pyraflow
