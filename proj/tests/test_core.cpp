#include <gtest/gtest.h>

#include <fstream>

#include "support.hpp"

using namespace pyraflow;
using testutil::TempDir;

// ---------------------------------------------------------------------------
// Raster helpers
// ---------------------------------------------------------------------------

TEST(Raster, DownsampleFixtures) {
  Raster r(2, 2, 1);
  r.data = {10, 20, 30, 40};
  EXPECT_EQ(downsample_box2(r).data, std::vector<std::uint8_t>{25});
  r.data = {0, 0, 0, 255};
  EXPECT_EQ(downsample_box2(r).data, std::vector<std::uint8_t>{64});
}

TEST(Raster, DownsampleMatchesOracleOnOddSizes) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 40; ++trial) {
    const int w = 1 + int(rng() % 37), h = 1 + int(rng() % 29), c = trial % 2 ? 3 : 1;
    const auto src = testutil::random_raster(rng, w, h, c);
    const auto got = downsample_box2(src);
    ASSERT_EQ(got, oracle::downsample(src)) << w << "x" << h;
  }
}

TEST(Raster, CropAndBlitRoundTrip) {
  std::mt19937_64 rng(2);
  const auto src = testutil::random_raster(rng, 20, 15, 3);
  const Rect r{3, 4, 9, 7};
  const auto part = crop(src, r);
  Raster dst(20, 15, 3);
  blit(part, dst, r.x, r.y);
  for (int y = 0; y < r.h; ++y)
    for (int x = 0; x < r.w; ++x)
      for (int c = 0; c < 3; ++c) ASSERT_EQ(dst.at(r.x + x, r.y + y, c), src.at(r.x + x, r.y + y, c));
  EXPECT_THROW(crop(src, Rect{15, 0, 9, 1}), RangeError);
  EXPECT_THROW(blit(part, dst, 15, 0), RangeError);
}

TEST(Raster, ResizeIdentityAndConstant) {
  std::mt19937_64 rng(3);
  const auto src = testutil::random_raster(rng, 17, 9, 3);
  EXPECT_EQ(resize_bilinear(src, 17, 9), src);
  EXPECT_EQ(resize_nearest(src, 17, 9), src);
  const Raster flat(13, 7, 3, 77);
  EXPECT_EQ(resize_bilinear(flat, 40, 3), Raster(40, 3, 3, 77));
  EXPECT_EQ(resize_nearest(flat, 5, 21), Raster(5, 21, 3, 77));
}

TEST(Raster, NearestUpscaleReplicates) {
  Raster r(2, 1, 1);
  r.data = {1, 2};
  EXPECT_EQ(resize_nearest(r, 4, 2).data, (std::vector<std::uint8_t>{1, 1, 2, 2, 1, 1, 2, 2}));
}

// ---------------------------------------------------------------------------
// Level planning and storage
// ---------------------------------------------------------------------------

TEST(Pyramid, PlanLevelsReferenceSizes) {
  const PyramidPolicy p;
  const auto a = plan_levels(100000, 80000, p);
  ASSERT_EQ(a.size(), 5u);
  EXPECT_EQ(a[4], (LevelExtent{6250, 5000}));
  const auto b = plan_levels(4095, 4095, p);
  EXPECT_EQ(b.size(), 1u);
  const auto c = plan_levels(8192, 100, p);
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c[1], (LevelExtent{4096, 50}));
  EXPECT_EQ(plan_levels(8191, 8191, p).size(), 2u);
  EXPECT_EQ(plan_levels(8190, 8190, p).size(), 1u);
}

TEST(Pyramid, PlanLevelsMatchesClosedForm) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 2000; ++trial) {
    const int w = 1 + int(rng() % 300000), h = 1 + int(rng() % 300000);
    const int extent = 1 + int(rng() % 5000);
    PyramidPolicy pol;
    pol.min_level_extent = extent;
    const auto got = plan_levels(w, h, pol);
    auto want = oracle::levels_closed_form(w, h, extent);
    // The ladder also stops at a 1x1 level.
    while (want.size() > 1 && want[want.size() - 2] == std::pair{1, 1}) want.pop_back();
    ASSERT_EQ(got.size(), want.size()) << w << "x" << h << " E=" << extent;
    for (std::size_t l = 0; l < got.size(); ++l) {
      ASSERT_EQ(got[l].width, want[l].first);
      ASSERT_EQ(got[l].height, want[l].second);
    }
  }
}

TEST(Pyramid, PlanLevelsInvariants) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 500; ++trial) {
    const int w = 1 + int(rng() % 200000), h = 1 + int(rng() % 200000);
    const auto lv = plan_levels(w, h, {});
    for (std::size_t l = 1; l < lv.size(); ++l) {
      ASSERT_EQ(lv[l].width, (lv[l - 1].width + 1) / 2);
      ASSERT_EQ(lv[l].height, (lv[l - 1].height + 1) / 2);
      ASSERT_GE(std::max(lv[l].width, lv[l].height), 4096);
    }
  }
}

TEST(Pyramid, PolicyValidation) {
  PyramidPolicy p;
  p.tile_size = 100;
  EXPECT_THROW(plan_levels(10, 10, p), ConfigError);
  EXPECT_THROW(plan_levels(0, 10, PyramidPolicy{}), RangeError);
  EXPECT_THROW(create_pyramid(10, 10, 2, PyramidPolicy{}), TypeError);
}

TEST(Pyramid, StorageThreshold) {
  const PyramidPolicy p;
  EXPECT_EQ(storage_for(2'000'000'000ull, p), StorageKind::file_mapped);
  EXPECT_EQ(storage_for(500'000'000ull, p), StorageKind::ram);
  EXPECT_EQ(storage_for(512ull << 20, p), StorageKind::file_mapped);
  EXPECT_EQ(storage_for((512ull << 20) - 1, p), StorageKind::ram);
  const auto small = create_pyramid(64, 64, 3, p);
  EXPECT_EQ(small.level(0).byte_size, 12288u);
  EXPECT_EQ(small.level(0).storage, StorageKind::ram);
}

TEST(Pyramid, MappedLevelsRoundTrip) {
  TempDir dir;
  PyramidPolicy p = testutil::small_policy(16, 16);
  p.memory_map_threshold_bytes = 1000;  // level 0 (40x30x3 = 3600) maps, level 1 (20x15x3 = 900) stays in RAM
  p.scratch_root = dir.path();
  auto pyr = create_pyramid(40, 30, 3, p);
  ASSERT_EQ(pyr.level_count(), 2);
  EXPECT_EQ(pyr.level(0).storage, StorageKind::file_mapped);
  EXPECT_EQ(pyr.level(1).storage, StorageKind::ram);
  std::mt19937_64 rng(6);
  const auto img = testutil::random_raster(rng, 40, 30, 3);
  pyr.write_region(0, 0, 0, img);
  rebuild_lower_levels(pyr);
  EXPECT_EQ(pyr.read_region(0, Rect{0, 0, 40, 30}), img);
  EXPECT_EQ(pyr.read_region(1, Rect{0, 0, 20, 15}), oracle::downsample(img));
}

TEST(Pyramid, ScratchFilesRemovedOnDestruction) {
  TempDir dir;
  PyramidPolicy p = testutil::small_policy(16, 16);
  p.memory_map_threshold_bytes = 1;
  p.scratch_root = dir.path();
  {
    auto pyr = create_pyramid(32, 32, 1, p);
    EXPECT_FALSE(std::filesystem::is_empty(dir.path()));
  }
  EXPECT_TRUE(std::filesystem::is_empty(dir.path()));
}

TEST(Pyramid, RegionAndTileBounds) {
  auto p = create_pyramid(100, 70, 3, testutil::small_policy(16, 32));
  EXPECT_EQ(p.tile_cols(0), 4);
  EXPECT_EQ(p.tile_rows(0), 3);
  EXPECT_EQ(p.tile_rect({0, 3, 2}), (Rect{96, 64, 4, 6}));
  EXPECT_THROW(p.tile_rect({0, 4, 0}), RangeError);
  EXPECT_THROW(p.read_region(0, Rect{90, 0, 20, 1}), RangeError);
  EXPECT_THROW(p.read_region(9, Rect{0, 0, 1, 1}), RangeError);
  EXPECT_THROW(p.write_region(0, 0, 0, Raster(2, 2, 1)), TypeError);
}

TEST(Pyramid, MagnificationHalvesPerLevel) {
  const auto p = create_pyramid(256, 256, 1, testutil::small_policy(32, 32), 40.0);
  ASSERT_EQ(p.level_count(), 4);
  EXPECT_DOUBLE_EQ(p.magnification(0), 40.0);
  EXPECT_DOUBLE_EQ(p.magnification(1), 20.0);
  EXPECT_DOUBLE_EQ(p.magnification(3), 5.0);
}

TEST(Pyramid, RebuildMatchesOracleChain) {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    const int w = 50 + int(rng() % 200), h = 50 + int(rng() % 200);
    auto p = create_pyramid(w, h, 3, testutil::small_policy(8, 16));
    const auto img = testutil::random_raster(rng, w, h, 3);
    p.write_region(0, 0, 0, img);
    rebuild_lower_levels(p);
    Raster want = img;
    for (int l = 1; l < p.level_count(); ++l) {
      want = oracle::downsample(want);
      const auto& lv = p.level(l);
      ASSERT_EQ(p.read_region(l, Rect{0, 0, lv.width, lv.height}), want) << "level " << l;
    }
  }
}

// ---------------------------------------------------------------------------
// PNG and synthetic slides
// ---------------------------------------------------------------------------

TEST(Png, RoundTripGrayAndRgb) {
  std::mt19937_64 rng(8);
  for (int c : {1, 3}) {
    const auto r = testutil::random_raster(rng, 33, 21, c);
    EXPECT_EQ(png::decode(png::encode(r)), r);
  }
  EXPECT_THROW(png::decode(std::vector<std::uint8_t>{1, 2, 3}), FormatError);
}

TEST(Synthetic, DeterministicPerSeed) {
  const auto a = generate_synthetic_slide(42, 600, 500, {}, testutil::small_policy(64, 64));
  const auto b = generate_synthetic_slide(42, 600, 500, {}, testutil::small_policy(64, 64));
  const auto c = generate_synthetic_slide(43, 600, 500, {}, testutil::small_policy(64, 64));
  const Rect all{0, 0, 600, 500};
  EXPECT_EQ(a.read_region(0, all), b.read_region(0, all));
  EXPECT_NE(a.read_region(0, all), c.read_region(0, all));
}

TEST(Synthetic, BlankSpecIsWhite) {
  SyntheticSpec s;
  s.blob_probability = 0;
  s.noise_amplitude = 0;
  const auto p = generate_synthetic_slide(1, 128, 128, s, testutil::small_policy(32, 32));
  EXPECT_EQ(p.read_region(0, Rect{0, 0, 128, 128}), Raster(128, 128, 3, 255));
}

TEST(Synthetic, VirtualSlideMatchesMaterialisedLevelZero) {
  const auto pol = testutil::small_policy(64, 64);
  const auto mat = generate_synthetic_slide(9, 700, 400, {}, pol);
  const auto virt = make_virtual_slide(9, 700, 400, {}, pol);
  ASSERT_EQ(virt.level_count(), mat.level_count());
  const Rect r{123, 77, 300, 200};
  EXPECT_EQ(virt.read_region(0, r), mat.read_region(0, r));
  EXPECT_EQ(virt.level(virt.level_count() - 1).storage, StorageKind::procedural);
}

// ---------------------------------------------------------------------------
// Container
// ---------------------------------------------------------------------------

TEST(Container, SaveOpenRoundTripAllLevels) {
  TempDir dir;
  const auto src = generate_synthetic_slide(5, 300, 200, {}, testutil::small_policy(32, 64), 20.0);
  save_container(src, dir.path());
  const auto p = open_container(dir.path());
  ASSERT_EQ(p.level_count(), src.level_count());
  EXPECT_DOUBLE_EQ(p.base_magnification(), 20.0);
  EXPECT_DOUBLE_EQ(p.magnification(1), 10.0);
  for (int l = 0; l < p.level_count(); ++l) {
    const auto& lv = p.level(l);
    ASSERT_EQ(p.read_region(l, Rect{0, 0, lv.width, lv.height}), src.read_region(l, Rect{0, 0, lv.width, lv.height}));
  }
}

TEST(Container, OpenDecodesOnlyLowestLevel) {
  TempDir dir;
  const auto src = generate_synthetic_slide(5, 512, 512, {}, testutil::small_policy(64, 64));
  save_container(src, dir.path());
  const auto p = open_container(dir.path());
  const int low = p.level_count() - 1;
  const auto low_tiles = std::uint64_t(p.tile_cols(low) * p.tile_rows(low));
  EXPECT_EQ(p.tile_reads(), low_tiles);
  EXPECT_EQ(p.level(low).storage, StorageKind::ram);
  EXPECT_EQ(p.level(0).storage, StorageKind::tiled_file);
  p.read_tile({0, 2, 3});
  EXPECT_EQ(p.tile_reads(), low_tiles + 1);
}

TEST(Container, ManifestErrors) {
  TempDir dir;
  EXPECT_THROW(open_container(dir.path()), FormatError);
  std::ofstream(dir / "manifest.json") << "{ not json";
  EXPECT_THROW(open_container(dir.path()), FormatError);
  std::ofstream(dir / "manifest.json", std::ios::trunc)
      << R"({"format_version":1,"width":100,"height":100,"channels":3,"tile_size":64,"base_magnification":40,)"
         R"("levels":[{"index":0,"width":100,"height":100,"cols":2,"rows":2},{"index":1,"width":49,"height":50,"cols":1,"rows":1}]})";
  EXPECT_THROW(open_container(dir.path()), FormatError);
  std::ofstream(dir / "manifest.json", std::ios::trunc) << R"({"format_version":1,"width":100})";
  EXPECT_THROW(open_container(dir.path()), FormatError);
}

TEST(Container, MissingTileIsFormatError) {
  TempDir dir;
  const auto src = generate_synthetic_slide(5, 256, 256, {}, testutil::small_policy(64, 64));
  save_container(src, dir.path());
  std::filesystem::remove(dir / "level_0/1_1.png");
  const auto p = open_container(dir.path());
  EXPECT_NO_THROW(p.read_tile({0, 0, 0}));
  EXPECT_THROW(p.read_tile({0, 1, 1}), FormatError);
}

TEST(Container, ImportFlatImagePng) {
  TempDir dir;
  std::mt19937_64 rng(10);
  const auto img = testutil::random_raster(rng, 130, 90, 3);
  png::write_file(dir / "in.png", img);
  const auto p = import_flat_image(dir / "in.png", testutil::small_policy(32, 32));
  EXPECT_EQ(p.read_region(0, Rect{0, 0, 130, 90}), img);
  EXPECT_EQ(p.read_region(1, Rect{0, 0, 65, 45}), oracle::downsample(img));
}

TEST(Container, ImportPgm) {
  TempDir dir;
  {
    std::ofstream out(dir / "in.pgm", std::ios::binary);
    out << "P5\n# comment\n3 2\n255\n";
    const char px[6] = {1, 2, 3, 4, 5, 6};
    out.write(px, 6);
  }
  const auto p = import_flat_image(dir / "in.pgm", testutil::small_policy(1, 16));
  EXPECT_EQ(p.channels(), 1);
  EXPECT_EQ(p.read_region(0, Rect{0, 0, 3, 2}).data, (std::vector<std::uint8_t>{1, 2, 3, 4, 5, 6}));
  std::ofstream(dir / "bad.png") << "garbage";
  EXPECT_THROW(import_flat_image(dir / "bad.png"), FormatError);
}
