#pragma once

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "pyraflow/error.hpp"
#include "pyraflow/raster.hpp"

namespace pyraflow {

enum class TaskType { patch_classification, image_segmentation, patch_segmentation, detection };

inline const char* to_string(TaskType t) {
  switch (t) {
    case TaskType::patch_classification: return "patch_classification";
    case TaskType::image_segmentation: return "image_segmentation";
    case TaskType::patch_segmentation: return "patch_segmentation";
    case TaskType::detection: return "detection";
  }
  return "?";
}

inline std::optional<TaskType> parse_task(std::string_view s) {
  if (s == "patch_classification") return TaskType::patch_classification;
  if (s == "image_segmentation") return TaskType::image_segmentation;
  if (s == "patch_segmentation") return TaskType::patch_segmentation;
  if (s == "detection") return TaskType::detection;
  return std::nullopt;
}

inline bool is_segmentation(TaskType t) {
  return t == TaskType::image_segmentation || t == TaskType::patch_segmentation;
}

struct ModelDescriptor {
  std::string name;
  TaskType task = TaskType::patch_classification;
  int input_width = 0;
  int input_height = 0;
  int input_channels = 3;
  int num_classes = 0;
  std::vector<std::string> class_names;
  double target_magnification = 0;
  int patch_size = 0;
  int batch_size = 1;
  // Keys the parser did not recognise, as "line N: key".
  std::vector<std::string> warnings;

  bool operator==(const ModelDescriptor& o) const {
    return name == o.name && task == o.task && input_width == o.input_width &&
           input_height == o.input_height && input_channels == o.input_channels &&
           num_classes == o.num_classes && class_names == o.class_names &&
           target_magnification == o.target_magnification && patch_size == o.patch_size &&
           batch_size == o.batch_size;
  }
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
std::optional<T> parse_number(std::string_view s) {
  s = trim(s);
  T v{};
  const auto* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc{} || p != end || s.empty()) return std::nullopt;
  return v;
}

inline std::vector<std::string_view> split(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = s.find(sep, start);
    out.push_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline std::vector<std::string_view> split_ws(std::string_view s) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && (s[i] == ' ' || s[i] == '\t')) ++i;
    const std::size_t j = s.find_first_of(" \t", i);
    if (i < s.size()) out.push_back(s.substr(i, j == std::string_view::npos ? std::string_view::npos : j - i));
    i = j == std::string_view::npos ? s.size() : j;
  }
  return out;
}

}  // namespace detail

// Model description file: one `key: value` per line, `#` starts a comment.
//   name, task, input_size (w h c), num_classes, class_names (a;b;c),
//   magnification, patch_size are required; batch_size defaults to 1.
inline ModelDescriptor parse_descriptor(std::string_view text) {
  ModelDescriptor d;
  std::map<std::string, int, std::less<>> seen;  // key -> line
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto colon = line.find(':');
    if (colon == std::string_view::npos) throw ParseError(line_no, "expected 'key: value'");
    const std::string key(detail::trim(line.substr(0, colon)));
    const std::string_view value = detail::trim(line.substr(colon + 1));
    if (key.empty()) throw ParseError(line_no, "empty key");
    if (seen.contains(key)) throw ParseError(line_no, "duplicate key '" + key + "'");
    seen.emplace(key, line_no);

    auto need_int = [&](int min) {
      const auto v = detail::parse_number<int>(value);
      if (!v || *v < min) throw ParseError(line_no, "'" + key + "' must be an integer >= " + std::to_string(min));
      return *v;
    };

    if (key == "name") {
      if (value.empty()) throw ParseError(line_no, "'name' must not be empty");
      d.name = value;
    } else if (key == "task") {
      const auto t = parse_task(value);
      if (!t) throw ParseError(line_no, "unknown task '" + std::string(value) + "'");
      d.task = *t;
    } else if (key == "input_size") {
      const auto parts = detail::split_ws(value);
      std::array<int, 3> v{};
      if (parts.size() != 3) throw ParseError(line_no, "'input_size' needs three integers (width height channels)");
      for (std::size_t i = 0; i < 3; ++i) {
        const auto n = detail::parse_number<int>(parts[i]);
        if (!n || *n <= 0) throw ParseError(line_no, "'input_size' values must be positive integers");
        v[i] = *n;
      }
      d.input_width = v[0];
      d.input_height = v[1];
      d.input_channels = v[2];
      if (d.input_channels != 1 && d.input_channels != 3)
        throw ParseError(line_no, "'input_size' channels must be 1 or 3");
    } else if (key == "num_classes") {
      d.num_classes = need_int(1);
    } else if (key == "class_names") {
      d.class_names.clear();
      for (auto part : detail::split(value, ';')) {
        const auto n = detail::trim(part);
        if (n.empty()) throw ParseError(line_no, "empty class name");
        d.class_names.emplace_back(n);
      }
    } else if (key == "magnification") {
      const auto v = detail::parse_number<double>(value);
      if (!v || !(*v > 0)) throw ParseError(line_no, "'magnification' must be a positive number");
      d.target_magnification = *v;
    } else if (key == "patch_size") {
      d.patch_size = need_int(1);
    } else if (key == "batch_size") {
      d.batch_size = need_int(1);
    } else {
      d.warnings.push_back("line " + std::to_string(line_no) + ": unknown key '" + key + "'");
    }
  }

  for (const char* key : {"name", "task", "input_size", "num_classes", "class_names", "magnification", "patch_size"})
    if (!seen.contains(key)) throw ParseError(0, std::string("missing required key '") + key + "'");
  if (int(d.class_names.size()) != d.num_classes)
    throw ParseError(seen.at("class_names"), "class_names lists " + std::to_string(d.class_names.size()) +
                                                 " names but num_classes is " + std::to_string(d.num_classes));
  return d;
}

inline std::string print_descriptor(const ModelDescriptor& d) {
  std::ostringstream os;
  os << "name: " << d.name << "\n"
     << "task: " << to_string(d.task) << "\n"
     << "input_size: " << d.input_width << " " << d.input_height << " " << d.input_channels << "\n"
     << "num_classes: " << d.num_classes << "\n"
     << "class_names: ";
  for (std::size_t i = 0; i < d.class_names.size(); ++i) os << (i ? ";" : "") << d.class_names[i];
  os << "\n"
     << "magnification: " << d.target_magnification << "\n"
     << "patch_size: " << d.patch_size << "\n"
     << "batch_size: " << d.batch_size << "\n";
  return os.str();
}

// Normalised network input, HWC, values in [0, 1].
struct Tensor {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<float> data;

  float at(int x, int y, int c) const { return data[(std::size_t(y) * width + x) * channels + c]; }
};

struct Box {
  double x = 0, y = 0, w = 0, h = 0;
  friend bool operator==(const Box&, const Box&) = default;
};

struct Detection {
  Box box;
  int class_id = 0;
  double score = 0;
  friend bool operator==(const Detection&, const Detection&) = default;
};

using Probabilities = std::vector<float>;
using LabelRaster = Raster;  // 1 channel, class index per pixel
using Detections = std::vector<Detection>;
using ModelOutput = std::variant<Probabilities, LabelRaster, Detections>;

class ModelRunner {
 public:
  virtual ~ModelRunner() = default;
  virtual const ModelDescriptor& descriptor() const = 0;
  virtual std::vector<ModelOutput> invoke(std::span<const Tensor> batch) = 0;
  // False when invoke must not be entered from two threads at once.
  virtual bool concurrent_safe() const { return true; }
};

namespace detail {

inline double channel_mean(const Tensor& t, std::size_t pixel) {
  double s = 0;
  for (int c = 0; c < t.channels; ++c) s += t.data[pixel * std::size_t(t.channels) + std::size_t(c)];
  return s / t.channels;
}

}  // namespace detail

// Mean normalised intensity m -> class clamp(floor(4m), 0, 3), one-hot.
class MockClassifier final : public ModelRunner {
 public:
  explicit MockClassifier(ModelDescriptor d) : d_(std::move(d)) {
    if (d_.task != TaskType::patch_classification || d_.num_classes != 4)
      throw ConfigError("mock classifier needs a 4-class patch_classification descriptor");
  }
  const ModelDescriptor& descriptor() const override { return d_; }

  std::vector<ModelOutput> invoke(std::span<const Tensor> batch) override {
    std::vector<ModelOutput> out;
    out.reserve(batch.size());
    for (const auto& t : batch) {
      double sum = 0;
      for (float v : t.data) sum += v;
      const double m = t.data.empty() ? 0.0 : sum / double(t.data.size());
      const int cls = std::clamp(int(std::floor(m * 4.0)), 0, 3);
      Probabilities p(4, 0.0f);
      p[std::size_t(cls)] = 1.0f;
      out.emplace_back(std::move(p));
    }
    return out;
  }

 private:
  ModelDescriptor d_;
};

// Pixel is class 1 iff its normalised channel mean is below 0.5.
class MockSegmenter final : public ModelRunner {
 public:
  explicit MockSegmenter(ModelDescriptor d) : d_(std::move(d)) {
    if (!is_segmentation(d_.task) || d_.num_classes != 2)
      throw ConfigError("mock segmenter needs a 2-class segmentation descriptor");
  }
  const ModelDescriptor& descriptor() const override { return d_; }

  std::vector<ModelOutput> invoke(std::span<const Tensor> batch) override {
    std::vector<ModelOutput> out;
    out.reserve(batch.size());
    for (const auto& t : batch) {
      LabelRaster r(t.width, t.height, 1);
      for (std::size_t i = 0; i < r.data.size(); ++i) r.data[i] = detail::channel_mean(t, i) < 0.5 ? 1 : 0;
      out.emplace_back(std::move(r));
    }
    return out;
  }

 private:
  ModelDescriptor d_;
};

// 4-connected components of the dark mask (channel mean < 0.5). Components of
// at least min_area pixels become boxes of class 0 scored area / box area.
inline Detections detect_dark_components(const Tensor& t, int min_area) {
  const int w = t.width, h = t.height;
  std::vector<std::uint8_t> dark(std::size_t(w) * h);
  for (std::size_t i = 0; i < dark.size(); ++i) dark[i] = detail::channel_mean(t, i) < 0.5;
  std::vector<std::uint8_t> seen(dark.size(), 0);
  Detections out;
  std::vector<int> stack;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const std::size_t start = std::size_t(y) * w + x;
      if (!dark[start] || seen[start]) continue;
      int x0 = x, x1 = x, y0 = y, y1 = y, area = 0;
      seen[start] = 1;
      stack.assign(1, int(start));
      while (!stack.empty()) {
        const int i = stack.back();
        stack.pop_back();
        const int px = i % w, py = i / w;
        ++area;
        x0 = std::min(x0, px);
        x1 = std::max(x1, px);
        y0 = std::min(y0, py);
        y1 = std::max(y1, py);
        const int nbr[4][2] = {{px - 1, py}, {px + 1, py}, {px, py - 1}, {px, py + 1}};
        for (const auto& n : nbr) {
          if (n[0] < 0 || n[1] < 0 || n[0] >= w || n[1] >= h) continue;
          const std::size_t j = std::size_t(n[1]) * w + n[0];
          if (dark[j] && !seen[j]) {
            seen[j] = 1;
            stack.push_back(int(j));
          }
        }
      }
      if (area < min_area) continue;
      const double bw = x1 - x0 + 1, bh = y1 - y0 + 1;
      out.push_back({{double(x0), double(y0), bw, bh}, 0, double(area) / (bw * bh)});
    }
  }
  return out;
}

class MockDetector final : public ModelRunner {
 public:
  explicit MockDetector(ModelDescriptor d, int min_area = 4) : d_(std::move(d)), min_area_(min_area) {
    if (d_.task != TaskType::detection) throw ConfigError("mock detector needs a detection descriptor");
  }
  const ModelDescriptor& descriptor() const override { return d_; }

  std::vector<ModelOutput> invoke(std::span<const Tensor> batch) override {
    std::vector<ModelOutput> out;
    out.reserve(batch.size());
    for (const auto& t : batch) out.emplace_back(detect_dark_components(t, min_area_));
    return out;
  }

 private:
  ModelDescriptor d_;
  int min_area_;
};

// The mock matching a descriptor's task.
inline std::unique_ptr<ModelRunner> make_mock_runner(const ModelDescriptor& d) {
  switch (d.task) {
    case TaskType::patch_classification: return std::make_unique<MockClassifier>(d);
    case TaskType::image_segmentation:
    case TaskType::patch_segmentation: return std::make_unique<MockSegmenter>(d);
    case TaskType::detection: return std::make_unique<MockDetector>(d);
  }
  throw ConfigError("unknown task");
}

// Descriptors by name plus a factory producing a fresh runner per run.
class ModelRegistry {
 public:
  using Factory = std::function<std::unique_ptr<ModelRunner>(const ModelDescriptor&)>;

  ModelRegistry() = default;
  ModelRegistry(const ModelRegistry& o) {
    std::lock_guard lk(o.mu_);
    models_ = o.models_;
  }
  ModelRegistry& operator=(const ModelRegistry& o) {
    if (this != &o) {
      std::scoped_lock lk(mu_, o.mu_);
      models_ = o.models_;
    }
    return *this;
  }

  void add(ModelDescriptor d, Factory f = make_mock_runner) {
    const std::string name = d.name;
    std::lock_guard lk(mu_);
    models_[name] = {std::move(d), std::move(f)};
  }

  bool contains(std::string_view name) const {
    std::lock_guard lk(mu_);
    return models_.find(name) != models_.end();
  }

  std::optional<ModelDescriptor> descriptor(std::string_view name) const {
    std::lock_guard lk(mu_);
    const auto it = models_.find(name);
    if (it == models_.end()) return std::nullopt;
    return it->second.descriptor;
  }

  std::unique_ptr<ModelRunner> make_runner(std::string_view name) const {
    std::lock_guard lk(mu_);
    const auto it = models_.find(name);
    if (it == models_.end()) throw ConfigError("unknown model '" + std::string(name) + "'");
    return it->second.factory(it->second.descriptor);
  }

  std::vector<std::string> names() const {
    std::lock_guard lk(mu_);
    std::vector<std::string> out;
    for (const auto& [k, _] : models_) out.push_back(k);
    return out;
  }

 private:
  struct Item {
    ModelDescriptor descriptor;
    Factory factory;
  };
  mutable std::mutex mu_;
  std::map<std::string, Item, std::less<>> models_;
};

// Descriptors for the four built-in mocks, shaped like the reference use cases.
inline ModelRegistry builtin_models() {
  ModelRegistry reg;
  reg.add(parse_descriptor(
      "name: mock_classifier_v1\ntask: patch_classification\ninput_size: 512 512 3\nnum_classes: 4\n"
      "class_names: normal;benign;in_situ;invasive\nmagnification: 20\npatch_size: 512\nbatch_size: 4\n"));
  reg.add(parse_descriptor(
      "name: mock_lowres_segmenter_v1\ntask: image_segmentation\ninput_size: 1024 1024 3\nnum_classes: 2\n"
      "class_names: background;tumor\nmagnification: 1.25\npatch_size: 1024\n"));
  reg.add(parse_descriptor(
      "name: mock_segmenter_v1\ntask: patch_segmentation\ninput_size: 256 256 3\nnum_classes: 2\n"
      "class_names: background;nucleus\nmagnification: 20\npatch_size: 256\nbatch_size: 4\n"));
  reg.add(parse_descriptor(
      "name: mock_detector_v1\ntask: detection\ninput_size: 256 256 3\nnum_classes: 1\n"
      "class_names: nucleus\nmagnification: 20\npatch_size: 256\nbatch_size: 4\n"));
  return reg;
}

}  // namespace pyraflow
