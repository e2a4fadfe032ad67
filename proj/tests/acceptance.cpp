// Acceptance checks: one PASS/FAIL line per criterion. Exit status is the
// number of failures.

#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#include "support.hpp"

using namespace pyraflow;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

int g_failures = 0;

void report(const std::string& name, const std::function<Outcome()>& fn) {
  Outcome o;
  try {
    o = fn();
  } catch (const std::exception& e) {
    o = {false, std::string("exception: ") + e.what()};
  }
  std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << name << ": " << o.detail << std::endl;
  if (!o.pass) ++g_failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// --- memory-bounded viewing --------------------------------------------------

constexpr std::uint64_t kOverheadAllowance = 512ull << 20;

Outcome memory_viewing() {
  MemoryScenarioConfig cfg;  // 100000^2 seed 42, 150 s trace, 256 MB budget
  cfg.scenario = MemoryScenario::zoom_pan;
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = memory_scenario(cfg);
  if (!rep.supported) return {false, "resident-set sampling unsupported on this platform"};
  const auto bound = cfg.budget_bytes + kOverheadAllowance;
  return {rep.peak_bytes <= bound,
          fmt("peak RSS %llu MiB <= %llu MiB (budget 256 + 512 allowance); %llu frames, %llu tile loads, "
              "cache peak %llu MiB + %llu MiB pinned, %.1f s",
              (unsigned long long)(rep.peak_bytes >> 20), (unsigned long long)(bound >> 20),
              (unsigned long long)rep.frames, (unsigned long long)rep.tile_loads,
              (unsigned long long)(rep.peak_cache_bytes >> 20), (unsigned long long)(rep.pinned_bytes >> 20),
              seconds_since(t0))};
}

// --- stitch / whole-level equivalence -------------------------------------

Outcome stitch_equivalence() {
  auto slide = std::make_shared<const ImagePyramid>(generate_synthetic_slide(42, 4096, 4096));
  auto d = *builtin_models().descriptor("mock_segmenter_v1");
  d.target_magnification = slide->base_magnification();  // footprint == network input
  PipelineConfig cfg;
  cfg.task = TaskType::patch_segmentation;
  cfg.plan = plan_patches(*slide, nullptr, d.input_width, d.target_magnification);
  cfg.batch_size = 4;
  const auto t0 = std::chrono::steady_clock::now();
  auto run = run_pipeline(slide, cfg, std::make_shared<MockSegmenter>(d));
  const double elapsed = seconds_since(t0);
  const Raster stitched = std::get<std::shared_ptr<SegmentationLayer>>(run->result())->read_level(0);

  auto whole_desc = d;
  whole_desc.input_width = slide->width();
  whole_desc.input_height = slide->height();
  MockSegmenter whole(whole_desc);
  Raster reference;
  {
    const Tensor t = preprocess(slide->read_region(0, Rect{0, 0, slide->width(), slide->height()}), whole_desc);
    reference = std::get<LabelRaster>(whole.invoke({&t, 1})[0]);
  }
  std::size_t diff = 0;
  for (std::size_t i = 0; i < reference.data.size(); ++i) diff += stitched.data[i] != reference.data[i];
  const bool same = stitched.width == reference.width && stitched.height == reference.height && diff == 0;
  return {same && elapsed < 60.0,
          fmt("%zu patches, %zu differing pixels of %zu, pipeline %.2f s (< 60 s)", cfg.plan.patches.size(), diff,
              reference.data.size(), elapsed)};
}

// --- pyramid level rule ---------------------------------------------------

Outcome level_rule() {
  std::mt19937_64 rng(1000);
  PyramidPolicy policy;
  int mismatches = 0;
  for (int i = 0; i < 1000; ++i) {
    // Log-uniform dimensions from 1 to 10^6 so small and huge slides both occur.
    auto dim = [&] { return int(std::clamp(std::exp(std::uniform_real_distribution<double>(0, std::log(1e6))(rng)), 1.0, 1e6)); };
    const int w = dim(), h = dim();
    const auto got = plan_levels(w, h, policy);
    const auto want = oracle::levels_closed_form(w, h, policy.min_level_extent);
    bool ok = got.size() == want.size();
    for (std::size_t l = 0; ok && l < got.size(); ++l)
      ok = got[l].width == want[l].first && got[l].height == want[l].second;
    mismatches += !ok;
  }
  return {mismatches == 0, fmt("%d mismatches over 1000 randomized dimensions", mismatches)};
}

// --- cache budget ----------------------------------------------------------

Outcome cache_budget() {
  auto slide = std::make_shared<const ImagePyramid>(
      make_virtual_slide(42, 32768, 32768, {}, testutil::small_policy(512, 64)));
  const std::uint64_t budget = 64ull << 20;
  TileCache cache(slide, CacheBudget{budget});
  oracle::LruSim sim{budget, {}, 0, {}};
  std::vector<TileKey> evicted;
  cache.set_eviction_listener([&](const TileKey& k) { evicted.push_back(k); });
  std::mt19937_64 rng(64);
  const int low = slide->level_count() - 1;
  // A hot region that fits the budget plus uniformly random cold accesses.
  std::vector<TileKey> hot;
  for (int i = 0; i < 3000; ++i) {
    const int l = int(rng() % std::uint64_t(low));
    hot.push_back({l, int(rng() % std::uint64_t(slide->tile_cols(l))), int(rng() % std::uint64_t(slide->tile_rows(l)))});
  }
  std::uint64_t over = 0, peak = 0;
  for (int i = 0; i < 100000; ++i) {
    TileKey k;
    if (rng() % 10 < 7) {
      k = hot[rng() % hot.size()];
    } else {
      const int l = int(rng() % std::uint64_t(low + 1));
      k = {l, int(rng() % std::uint64_t(slide->tile_cols(l))), int(rng() % std::uint64_t(slide->tile_rows(l)))};
    }
    cache.get_tile(k);
    if (!cache.pinned(k)) sim.access(k, std::uint64_t(slide->tile_rect(k).area()) * std::uint64_t(slide->channels()));
    const auto resident = cache.stats().resident_bytes;
    peak = std::max(peak, resident);
    over += resident > budget;
  }
  std::vector<TileKey> want_queue;
  for (const auto& [k, _] : sim.queue) want_queue.push_back(k);
  const bool order = evicted == sim.evicted && cache.queue_snapshot() == want_queue;
  return {over == 0 && order,
          fmt("10^5 accesses, %llu over-budget observations, peak %.1f MiB of 64, %zu evictions %s reference",
              (unsigned long long)over, double(peak) / (1 << 20), evicted.size(), order ? "equal to" : "DIFFER from")};
}

// --- tissue ----------------------------------------------------------------

Outcome tissue_oracle() {
  std::mt19937_64 rng(100);
  int mask_mismatch = 0, otsu_mismatch = 0;
  for (int i = 0; i < 100; ++i) {
    const int w = 1 + int(rng() % 512), h = 1 + int(rng() % 512);
    // Mix of near-white background and random tissue so both classes occur.
    Raster img(w, h, 3);
    std::uniform_int_distribution<int> any(0, 255), light(200, 255);
    const bool mostly_white = i % 2;
    for (std::size_t p = 0; p < std::size_t(w) * h; ++p) {
      const bool bg = mostly_white ? (rng() % 4 != 0) : (rng() % 4 == 0);
      for (int c = 0; c < 3; ++c) img.data[3 * p + std::size_t(c)] = std::uint8_t(bg ? light(rng) : any(rng));
    }
    TissueParams params;
    params.threshold = double(rng() % 200) + std::uniform_real_distribution<double>(0, 1)(rng);
    params.closing_radius = int(rng() % 4);
    params.reference_color = {std::uint8_t(200 + rng() % 56), std::uint8_t(200 + rng() % 56), std::uint8_t(200 + rng() % 56)};
    const auto got = segment_tissue(img, params);
    const auto want = oracle::closing(oracle::threshold(img, params.threshold, params.reference_color.r,
                                                        params.reference_color.g, params.reference_color.b),
                                      params.closing_radius);
    mask_mismatch += !(got == want);
  }
  for (int i = 0; i < 1000; ++i) {
    std::array<std::uint64_t, 256> hist{};
    const int mode = i % 3;
    for (auto& v : hist) v = mode == 0 ? rng() % 1000 : mode == 1 ? (rng() % 5 == 0 ? rng() % 100000 : 0) : rng() % 3;
    otsu_mismatch += otsu_threshold(hist) != oracle::otsu(hist);
  }
  return {mask_mismatch == 0 && otsu_mismatch == 0,
          fmt("%d/100 mask mismatches, %d/1000 Otsu mismatches", mask_mismatch, otsu_mismatch)};
}

// --- NMS -------------------------------------------------------------------

Outcome nms_oracle() {
  const double fixture = iou(Box{0, 0, 10, 10}, Box{5, 5, 10, 10});
  std::mt19937_64 rng(500);
  int mismatches = 0;
  for (int t = 0; t < 500; ++t) {
    const std::size_t n = rng() % 201;
    Detections d;
    for (std::size_t i = 0; i < n; ++i)
      d.push_back({{double(rng() % 50) * 4, double(rng() % 50) * 4, double(1 + rng() % 60), double(1 + rng() % 60)},
                   int(rng() % 3), double(rng() % 20) / 20.0});
    const double thr = double(rng() % 11) / 10.0;
    mismatches += !(nms(d, thr) == oracle::nms(d, thr));
  }
  const bool fx = std::abs(fixture - 25.0 / 175.0) < 1e-12 && std::abs(fixture - 0.142857) < 1e-6;
  return {mismatches == 0 && fx, fmt("%d/500 mismatches; IoU fixture %.6f", mismatches, fixture)};
}

// --- benchmark methodology -------------------------------------------------

Outcome bench_methodology() {
  // Same path as `bench run --warmups 1 --runs 10` on the built-in
  // classification pipeline.
  auto slide = std::make_shared<const ImagePyramid>(generate_synthetic_slide(42, 4096, 4096));
  const auto reg = builtin_models();
  PipelineSpec spec;
  for (const auto& [name, text] : builtin_pipeline_texts())
    if (name == "classification") spec = parse_pipeline(text, reg, name);
  const auto t = run_benchmark([&] { return execute_pipeline(spec, slide, reg)->timings(); }, 1, 10);
  bool samples_ok = t.runs() == 10;
  for (const auto& s : t.stages) samples_ok = samples_ok && s.size() == 10;
  const auto csv = timings_csv(t);
  for (const char* name : kStageNames)
    samples_ok = samples_ok && csv.find(std::string(",") + name + ",") != std::string::npos;

  const std::vector<double> ten{1, 2, 3, 4, 5, 6, 7, 8, 9, 10};
  const auto s = summarize(ten);
  // Reference: t_{0.975,9} * s / sqrt(10) with s = sqrt(110/12).
  const double want_hw = 2.2621571627409915 * std::sqrt(110.0 / 12.0) / std::sqrt(10.0);
  const bool ci = std::abs(s.mean - 5.5) < 1e-6 && std::abs(s.half_width - want_hw) < 1e-6 &&
                  std::abs(s.half_width - 2.166) < 1e-3;
  const auto total = summarize(t).total_s;
  return {samples_ok && ci, fmt("10 samples x 5 stages: %s; CI fixture mean %.6f half-width %.6f; pipeline %.3f +/- %.3f s",
                                samples_ok ? "yes" : "NO", s.mean, s.half_width, total.mean, total.half_width)};
}

// --- format round trips ------------------------------------------------------

Outcome format_round_trips() {
  std::mt19937_64 rng(866);
  testutil::TempDir dir;
  std::vector<std::string> failed;

  // Container.
  for (int k = 0; k < 5; ++k) {
    SyntheticSpec s;
    s.cell_size = 128 + int(rng() % 256);
    const auto p = generate_synthetic_slide(rng(), 200 + int(rng() % 600), 200 + int(rng() % 600), s,
                                            testutil::small_policy(64 + int(rng() % 64), 64), 40);
    const auto path = dir / ("c" + std::to_string(k));
    save_container(p, path);
    const auto q = open_container(path);
    bool ok = q.level_count() == p.level_count();
    for (int l = 0; ok && l < p.level_count(); ++l) {
      const Rect all{0, 0, p.level(l).width, p.level(l).height};
      ok = q.read_region(l, all) == p.read_region(l, all);
    }
    if (!ok) failed.push_back("container");
  }
  // MetaImage.
  if (metaimage_header(4, 2, "m.raw") !=
      "ObjectType = Image\nNDims = 2\nDimSize = 4 2\nElementType = MET_UCHAR\nElementDataFile = m.raw\n")
    failed.push_back("metaimage header");
  for (int k = 0; k < 20; ++k) {
    const auto r = testutil::random_raster(rng, 1 + int(rng() % 400), 1 + int(rng() % 400), 1);
    export_metaimage(r, dir / "m.mhd");
    if (!(import_metaimage(dir / "m.mhd") == r)) failed.push_back("metaimage");
  }
  // CSV.
  for (int k = 0; k < 20; ++k) {
    Detections d;
    for (std::size_t i = 0, n = rng() % 200; i < n; ++i)
      d.push_back({{double(rng() % 100000), double(rng() % 100000), double(1 + rng() % 400), double(1 + rng() % 400)},
                   int(rng() % 4), double(rng() % 1000001) / 1e6});
    export_detections_csv(d, dir / "d.csv");
    if (!(import_detections_csv(dir / "d.csv") == d)) failed.push_back("csv");
  }
  // Tensor container.
  for (int k = 0; k < 20; ++k) {
    std::vector<std::uint64_t> shape;
    for (std::size_t r = 0, n = 1 + rng() % 3; r < n; ++r) shape.push_back(1 + rng() % 20);
    std::uint64_t count = 1;
    for (auto v : shape) count *= v;
    std::vector<float> vals(count);
    for (auto& v : vals) v = std::uniform_real_distribution<float>(-1, 1)(rng);
    const auto t = TensorContainer::from_floats(shape, vals);
    export_tensor(t, dir / "t.ptns");
    if (!(import_tensor(dir / "t.ptns") == t)) failed.push_back("tensor");
  }
  // Pipeline scripts.
  for (const auto& [name, text] : builtin_pipeline_texts()) {
    const auto spec = parse_pipeline(text, name);
    if (!(parse_pipeline(print_pipeline(spec), name) == spec)) failed.push_back("pipeline " + name);
  }
  std::string detail = "container x5, MetaImage x20 + template, CSV x20, tensor x20, pipeline scripts x4";
  if (!failed.empty()) {
    detail += "; failed:";
    for (const auto& f : failed) detail += " " + f;
  }
  return {failed.empty(), detail};
}

// --- halt semantics --------------------------------------------------------

Outcome halt_semantics() {
  SyntheticSpec s;
  s.cell_size = 256;
  auto slide = std::make_shared<const ImagePyramid>(
      generate_synthetic_slide(42, 2048, 2048, s, testutil::small_policy(256, 256), 40));
  auto d = *builtin_models().descriptor("mock_classifier_v1");
  d.input_width = d.input_height = 32;
  PipelineConfig cfg;
  cfg.task = TaskType::patch_classification;
  cfg.plan = plan_patches(*slide, nullptr, 64, 40);
  cfg.buffer_capacity = 4;
  const auto full = std::get<std::shared_ptr<Heatmap>>(run_pipeline(slide, cfg, std::make_shared<MockClassifier>(d))->result())
                        ->snapshot();
  std::mt19937_64 rng(867);
  int inconsistent = 0, partial = 0;
  for (int k = 0; k < 50; ++k) {
    const std::uint64_t at = 1 + rng() % (cfg.plan.patches.size() - 1);
    auto run = std::make_shared<PipelineRun>(slide, cfg, std::make_shared<MockClassifier>(d));
    RunObserver obs;
    obs.on_progress = [&](std::uint64_t n, std::uint64_t) {
      if (n == at) run->halt();
    };
    const auto st = run->execute(obs);
    partial += st == RunState::halted;
    const auto got = std::get<std::shared_ptr<Heatmap>>(run->result())->snapshot();
    bool ok = got.processed_count() == run->patches_done();
    for (int r = 0; ok && r < got.rows; ++r)
      for (int c = 0; ok && c < got.cols; ++c)
        if (got.is_processed(c, r)) {
          const auto a = got.probabilities(c, r), b = full.probabilities(c, r);
          ok = std::equal(a.begin(), a.end(), b.begin());
        }
    inconsistent += !ok;
  }
  return {inconsistent == 0 && partial > 0,
          fmt("%d/50 halted runs inconsistent with the full run (%d ended partial)", inconsistent, partial)};
}

}  // namespace

int main() {
  // Memory first, before other criteria grow the heap.
  report("Memory-bounded viewing", memory_viewing);
  report("Stitch/oracle equivalence", stitch_equivalence);
  report("Level-rule conformance", level_rule);
  report("Cache budget safety", cache_budget);
  report("Tissue oracle", tissue_oracle);
  report("NMS oracle", nms_oracle);
  report("Benchmark methodology", bench_methodology);
  report("Format round trips", format_round_trips);
  report("Halt semantics", halt_semantics);
  std::cout << (g_failures == 0 ? "all acceptance criteria passed" : std::to_string(g_failures) + " criteria failed")
            << std::endl;
  return g_failures;
}
