#pragma once

#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pyraflow/patchflow.hpp"
#include "pyraflow/png.hpp"

namespace pyraflow {

// ---------------------------------------------------------------------------
// MetaImage (.mhd + .raw), 2-D 8-bit single channel
// ---------------------------------------------------------------------------

inline std::string metaimage_header(int width, int height, const std::string& raw_name) {
  return "ObjectType = Image\nNDims = 2\nDimSize = " + std::to_string(width) + " " + std::to_string(height) +
         "\nElementType = MET_UCHAR\nElementDataFile = " + raw_name + "\n";
}

// Writes <path> (header) and the payload next to it with the .raw extension.
inline void export_metaimage(const Raster& r, const std::filesystem::path& mhd_path) {
  if (r.channels != 1) throw TypeError("MetaImage export needs a 1-channel raster");
  auto raw_path = mhd_path;
  raw_path.replace_extension(".raw");
  png::write_file_bytes(raw_path, r.data);
  const auto header = metaimage_header(r.width, r.height, raw_path.filename().string());
  png::write_file_bytes(mhd_path, std::vector<std::uint8_t>(header.begin(), header.end()));
}

struct MetaImageHeader {
  std::map<std::string, std::string> fields;
  int width = 0;
  int height = 0;
  std::string data_file;
};

inline MetaImageHeader parse_metaimage_header(std::string_view text) {
  MetaImageHeader h;
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (detail::trim(line).empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(line_no, "expected 'Key = Value'");
    h.fields[std::string(detail::trim(std::string_view(line).substr(0, eq)))] =
        std::string(detail::trim(std::string_view(line).substr(eq + 1)));
  }
  auto need = [&](const char* key) -> const std::string& {
    auto it = h.fields.find(key);
    if (it == h.fields.end()) throw FormatError(std::string("MetaImage header lacks ") + key);
    return it->second;
  };
  if (need("ObjectType") != "Image") throw FormatError("MetaImage ObjectType must be Image");
  if (need("NDims") != "2") throw FormatError("only 2-D MetaImage files are supported");
  if (need("ElementType") != "MET_UCHAR")
    throw FormatError("unsupported MetaImage ElementType " + h.fields["ElementType"]);
  if (auto it = h.fields.find("ElementNumberOfChannels"); it != h.fields.end() && it->second != "1")
    throw FormatError("only single-channel MetaImage files are supported");
  const auto dims = detail::split_ws(need("DimSize"));
  if (dims.size() != 2) throw FormatError("DimSize needs two values");
  const auto w = detail::parse_number<int>(dims[0]);
  const auto hh = detail::parse_number<int>(dims[1]);
  if (!w || !hh || *w < 1 || *hh < 1) throw FormatError("bad DimSize");
  h.width = *w;
  h.height = *hh;
  h.data_file = need("ElementDataFile");
  if (h.data_file == "LOCAL") throw FormatError("inline MetaImage payloads are not supported");
  return h;
}

inline Raster import_metaimage(const std::filesystem::path& mhd_path) {
  const auto bytes = png::read_file_bytes(mhd_path);
  const auto h = parse_metaimage_header(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
  const auto payload = png::read_file_bytes(mhd_path.parent_path() / h.data_file);
  const std::size_t expected = std::size_t(h.width) * std::size_t(h.height);
  if (payload.size() != expected)
    throw FormatError("MetaImage payload has " + std::to_string(payload.size()) + " bytes, header implies " +
                      std::to_string(expected));
  Raster r(h.width, h.height, 1);
  r.data = payload;
  return r;
}

// ---------------------------------------------------------------------------
// Detections CSV
// ---------------------------------------------------------------------------

inline constexpr const char* kDetectionsCsvHeader = "x,y,w,h,class,score";

// Level-0 integer coordinates (rounded), score with six decimals.
inline std::string detections_csv(const Detections& dets) {
  std::ostringstream os;
  os << kDetectionsCsvHeader << "\n";
  os << std::fixed << std::setprecision(6);
  for (const auto& d : dets)
    os << std::llround(d.box.x) << "," << std::llround(d.box.y) << "," << std::llround(d.box.w) << ","
       << std::llround(d.box.h) << "," << d.class_id << "," << d.score << "\n";
  return os.str();
}

inline Detections parse_detections_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  int line_no = 0;
  Detections out;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line_no == 1) {
      if (line != kDetectionsCsvHeader) throw ParseError(1, "expected header '" + std::string(kDetectionsCsvHeader) + "'");
      continue;
    }
    if (line.empty()) continue;
    const auto f = detail::split(line, ',');
    if (f.size() != 6) throw ParseError(line_no, "expected 6 fields");
    const auto x = detail::parse_number<double>(f[0]), y = detail::parse_number<double>(f[1]),
               w = detail::parse_number<double>(f[2]), h = detail::parse_number<double>(f[3]),
               s = detail::parse_number<double>(f[5]);
    const auto c = detail::parse_number<int>(f[4]);
    if (!x || !y || !w || !h || !c || !s) throw ParseError(line_no, "malformed number");
    out.push_back({{*x, *y, *w, *h}, *c, *s});
  }
  if (line_no == 0) throw ParseError(1, "empty detections file");
  return out;
}

inline void export_detections_csv(const Detections& dets, const std::filesystem::path& path) {
  const auto s = detections_csv(dets);
  png::write_file_bytes(path, std::vector<std::uint8_t>(s.begin(), s.end()));
}

inline Detections import_detections_csv(const std::filesystem::path& path) {
  const auto b = png::read_file_bytes(path);
  return parse_detections_csv(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()));
}

// ---------------------------------------------------------------------------
// Tensor container: "PTNS1", u8 dtype, u8 rank, rank x u64 LE dims, payload
// ---------------------------------------------------------------------------

enum class DType : std::uint8_t { u8 = 0, f32 = 1 };

inline std::size_t dtype_size(DType t) {
  switch (t) {
    case DType::u8: return 1;
    case DType::f32: return 4;
  }
  throw FormatError("unknown dtype code " + std::to_string(int(t)));
}

struct TensorContainer {
  DType dtype = DType::u8;
  std::vector<std::uint64_t> shape;
  std::vector<std::uint8_t> payload;  // row-major, little-endian elements

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }

  static TensorContainer from_floats(std::vector<std::uint64_t> shape, std::span<const float> values) {
    static_assert(std::endian::native == std::endian::little, "tensor container assumes a little-endian host");
    TensorContainer t{DType::f32, std::move(shape), std::vector<std::uint8_t>(values.size() * 4)};
    std::memcpy(t.payload.data(), values.data(), t.payload.size());
    return t;
  }

  std::vector<float> floats() const {
    if (dtype != DType::f32) throw TypeError("tensor is not float32");
    std::vector<float> v(payload.size() / 4);
    std::memcpy(v.data(), payload.data(), v.size() * 4);
    return v;
  }

  friend bool operator==(const TensorContainer&, const TensorContainer&) = default;
};

inline constexpr std::array<char, 5> kTensorMagic{'P', 'T', 'N', 'S', '1'};

inline std::vector<std::uint8_t> encode_tensor(const TensorContainer& t) {
  if (t.shape.size() > 255) throw RangeError("tensor rank exceeds 255");
  if (t.payload.size() != t.element_count() * dtype_size(t.dtype))
    throw FormatError("tensor payload size does not match its shape");
  std::vector<std::uint8_t> out(kTensorMagic.begin(), kTensorMagic.end());
  out.push_back(std::uint8_t(t.dtype));
  out.push_back(std::uint8_t(t.shape.size()));
  for (auto d : t.shape)
    for (int b = 0; b < 8; ++b) out.push_back(std::uint8_t(d >> (8 * b)));
  out.insert(out.end(), t.payload.begin(), t.payload.end());
  return out;
}

inline TensorContainer decode_tensor(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 7 || !std::equal(kTensorMagic.begin(), kTensorMagic.end(), bytes.begin()))
    throw FormatError("not a tensor container (bad magic)");
  TensorContainer t;
  t.dtype = DType(bytes[5]);
  const std::size_t elem = dtype_size(t.dtype);
  const std::size_t rank = bytes[6];
  std::size_t pos = 7;
  if (bytes.size() < pos + 8 * rank) throw FormatError("truncated tensor shape");
  for (std::size_t i = 0; i < rank; ++i) {
    std::uint64_t d = 0;
    for (int b = 0; b < 8; ++b) d |= std::uint64_t(bytes[pos + std::size_t(b)]) << (8 * b);
    t.shape.push_back(d);
    pos += 8;
  }
  const auto n = t.element_count();
  if (bytes.size() - pos != n * elem)
    throw FormatError("tensor payload has " + std::to_string(bytes.size() - pos) + " bytes, shape implies " +
                      std::to_string(n * elem));
  t.payload.assign(bytes.begin() + std::ptrdiff_t(pos), bytes.end());
  return t;
}

inline void export_tensor(const TensorContainer& t, const std::filesystem::path& path) {
  png::write_file_bytes(path, encode_tensor(t));
}

inline TensorContainer import_tensor(const std::filesystem::path& path) {
  return decode_tensor(png::read_file_bytes(path));
}

// Heatmap as a rows x cols x classes float32 tensor.
inline TensorContainer heatmap_tensor(const HeatmapData& h) {
  return TensorContainer::from_floats({std::uint64_t(h.rows), std::uint64_t(h.cols), std::uint64_t(h.classes)},
                                      h.values);
}

// ---------------------------------------------------------------------------
// Heatmap rasters and statistics
// ---------------------------------------------------------------------------

// Argmax class per cell (kUnprocessed for unprocessed cells).
inline Raster heatmap_class_raster(const HeatmapData& h) {
  Raster r(h.cols, h.rows, 1, kUnprocessed);
  for (int y = 0; y < h.rows; ++y)
    for (int x = 0; x < h.cols; ++x)
      if (h.is_processed(x, y)) r.at(x, y) = std::uint8_t(h.argmax(x, y));
  return r;
}

// round(255 * max confidence); 0 for unprocessed cells.
inline Raster heatmap_confidence_raster(const HeatmapData& h) {
  Raster r(h.cols, h.rows, 1, 0);
  for (int y = 0; y < h.rows; ++y)
    for (int x = 0; x < h.cols; ++x) {
      if (!h.is_processed(x, y)) continue;
      const auto p = h.probabilities(x, y);
      const float m = *std::max_element(p.begin(), p.end());
      r.at(x, y) = std::uint8_t(std::lround(255.0 * std::clamp(double(m), 0.0, 1.0)));
    }
  return r;
}

// Writes <stem>_class.mhd/.raw and <stem>_confidence.mhd/.raw.
inline void export_heatmap(const HeatmapData& h, const std::filesystem::path& dir, const std::string& stem) {
  export_metaimage(heatmap_class_raster(h), dir / (stem + "_class.mhd"));
  export_metaimage(heatmap_confidence_raster(h), dir / (stem + "_confidence.mhd"));
}

using ClassHistogram = std::vector<std::uint64_t>;

// Argmax counts over processed cells.
inline ClassHistogram class_histogram(const HeatmapData& h) {
  ClassHistogram counts(std::size_t(std::max(h.classes, 0)), 0);
  for (int y = 0; y < h.rows; ++y)
    for (int x = 0; x < h.cols; ++x)
      if (const int c = h.argmax(x, y); c >= 0) ++counts[std::size_t(c)];
  return counts;
}

// Recount from an exported class raster; kUnprocessed cells are skipped.
inline ClassHistogram class_histogram(const Raster& class_raster, int classes) {
  ClassHistogram counts(std::size_t(classes), 0);
  for (auto v : class_raster.data)
    if (v != kUnprocessed && v < classes) ++counts[v];
  return counts;
}

// Argmax of the histogram over classes not in exclude; ties go to the lowest
// id. nullopt when no eligible cell exists.
inline std::optional<int> slide_level_call(const ClassHistogram& hist, const std::set<int>& exclude = {}) {
  std::optional<int> best;
  std::uint64_t best_count = 0;
  for (std::size_t c = 0; c < hist.size(); ++c) {
    if (exclude.contains(int(c)) || hist[c] == 0) continue;
    if (!best || hist[c] > best_count) {
      best = int(c);
      best_count = hist[c];
    }
  }
  return best;
}

inline std::optional<int> slide_level_call(const HeatmapData& h, const std::set<int>& exclude = {}) {
  return slide_level_call(class_histogram(h), exclude);
}

}  // namespace pyraflow
