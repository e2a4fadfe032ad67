#pragma once

#include <algorithm>
#include <filesystem>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "pyraflow/container.hpp"
#include "pyraflow/export.hpp"
#include "pyraflow/models.hpp"
#include "pyraflow/patchflow.hpp"
#include "pyraflow/tissue.hpp"

namespace pyraflow {

// ---------------------------------------------------------------------------
// Pipeline scripts
//
//   stage <name> <kind>
//     attr <key> <value...>
//
// Blank lines and '#' comments are ignored.
// ---------------------------------------------------------------------------

enum class StageKind {
  tissue_segmentation,
  patch_generator,
  batch_generator,
  neural_network,
  stitcher,
  accumulator,
  exporter
};

inline constexpr std::array<std::pair<StageKind, const char*>, 7> kStageKinds{{
    {StageKind::tissue_segmentation, "tissue_segmentation"},
    {StageKind::patch_generator, "patch_generator"},
    {StageKind::batch_generator, "batch_generator"},
    {StageKind::neural_network, "neural_network"},
    {StageKind::stitcher, "stitcher"},
    {StageKind::accumulator, "accumulator"},
    {StageKind::exporter, "exporter"},
}};

inline const char* to_string(StageKind k) {
  for (const auto& [kind, name] : kStageKinds)
    if (kind == k) return name;
  return "?";
}

inline std::optional<StageKind> parse_stage_kind(std::string_view s) {
  for (const auto& [kind, name] : kStageKinds)
    if (s == name) return kind;
  return std::nullopt;
}

struct StageSpec {
  std::string name;
  StageKind kind = StageKind::patch_generator;
  std::vector<std::pair<std::string, std::string>> attributes;  // declaration order
  int line = 0;                                                 // not compared

  const std::string* attr(std::string_view key) const {
    for (const auto& [k, v] : attributes)
      if (k == key) return &v;
    return nullptr;
  }

  bool operator==(const StageSpec& o) const {
    return name == o.name && kind == o.kind && attributes == o.attributes;
  }
};

struct PipelineSpec {
  std::string name;
  std::vector<StageSpec> stages;

  const StageSpec* find(StageKind k) const {
    for (const auto& s : stages)
      if (s.kind == k) return &s;
    return nullptr;
  }
  std::vector<const StageSpec*> all(StageKind k) const {
    std::vector<const StageSpec*> out;
    for (const auto& s : stages)
      if (s.kind == k) out.push_back(&s);
    return out;
  }
  const std::string& model() const { return *find(StageKind::neural_network)->attr("model"); }

  bool operator==(const PipelineSpec& o) const { return name == o.name && stages == o.stages; }
};

namespace detail {

enum class AttrType { real, integer, text, color, choice };

struct AttrRule {
  const char* key;
  AttrType type;
  bool required;
  double lo = 0, hi = 0;             // numeric range (inclusive)
  const char* choices = nullptr;     // '|'-separated
};

inline std::vector<AttrRule> rules_for(StageKind k) {
  switch (k) {
    case StageKind::tissue_segmentation:
      return {{"threshold", AttrType::real, false, 0, kMaxColorDistance},
              {"closing_radius", AttrType::integer, false, 0, 1 << 20},
              {"method", AttrType::choice, false, 0, 0, "distance|otsu"},
              {"reference_color", AttrType::color, false}};
    case StageKind::patch_generator:
      return {{"patch_size", AttrType::integer, true, 1, 1 << 16},
              {"magnification", AttrType::real, true, 1e-9, 1e9},
              {"keep_fraction", AttrType::real, false, 0, 1},
              {"buffer", AttrType::integer, false, 1, 1 << 20}};
    case StageKind::batch_generator: return {{"size", AttrType::integer, true, 1, 1 << 16}};
    case StageKind::neural_network: return {{"model", AttrType::text, true}};
    case StageKind::stitcher: return {{"kind", AttrType::choice, true, 0, 0, "classification|segmentation"}};
    case StageKind::accumulator: return {{"nms_threshold", AttrType::real, false, 0, 1}};
    case StageKind::exporter:
      return {{"format", AttrType::choice, true, 0, 0, "mhd|csv|tensor"}, {"name", AttrType::text, false}};
  }
  return {};
}

inline void check_attr(const AttrRule& rule, const std::string& value, int line) {
  const std::string what = std::string("attribute '") + rule.key + "'";
  switch (rule.type) {
    case AttrType::real: {
      const auto v = parse_number<double>(value);
      if (!v) throw ParseError(line, what + " must be a number, got '" + value + "'");
      if (*v < rule.lo || *v > rule.hi) throw ParseError(line, what + " out of range: " + value);
      break;
    }
    case AttrType::integer: {
      const auto v = parse_number<long long>(value);
      if (!v) throw ParseError(line, what + " must be an integer, got '" + value + "'");
      if (double(*v) < rule.lo || double(*v) > rule.hi) throw ParseError(line, what + " out of range: " + value);
      break;
    }
    case AttrType::text:
      if (value.empty()) throw ParseError(line, what + " must not be empty");
      break;
    case AttrType::color: {
      const auto parts = split_ws(value);
      bool ok = parts.size() == 3;
      for (auto p : parts) {
        const auto v = parse_number<int>(p);
        ok = ok && v && *v >= 0 && *v <= 255;
      }
      if (!ok) throw ParseError(line, what + " must be three integers in [0, 255]");
      break;
    }
    case AttrType::choice: {
      const auto options = split(rule.choices, '|');
      if (std::find(options.begin(), options.end(), std::string_view(value)) == options.end())
        throw ParseError(line, what + " must be one of " + rule.choices + ", got '" + value + "'");
      break;
    }
  }
}

// Position of each kind in a chain; exporters may repeat at the end.
inline int chain_rank(StageKind k) {
  switch (k) {
    case StageKind::tissue_segmentation: return 0;
    case StageKind::patch_generator: return 1;
    case StageKind::batch_generator: return 2;
    case StageKind::neural_network: return 3;
    case StageKind::stitcher:
    case StageKind::accumulator: return 4;
    case StageKind::exporter: return 5;
  }
  return 0;
}

}  // namespace detail

// Validates the text and the chain against the models in the registry.
inline PipelineSpec parse_pipeline(std::string_view text, const ModelRegistry& registry,
                                   std::string name = "pipeline") {
  PipelineSpec spec;
  spec.name = std::move(name);
  std::istringstream in{std::string(text)};
  std::string raw;
  int line_no = 0;
  std::set<std::string, std::less<>> names;
  while (std::getline(in, raw)) {
    ++line_no;
    std::string_view line = raw;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const auto tokens = detail::split_ws(detail::trim(line));
    if (tokens.empty()) continue;
    if (tokens[0] == "stage") {
      if (tokens.size() != 3) throw ParseError(line_no, "expected 'stage <name> <kind>'");
      const auto kind = parse_stage_kind(tokens[2]);
      if (!kind) throw ParseError(line_no, "unknown stage kind '" + std::string(tokens[2]) + "'");
      if (!names.insert(std::string(tokens[1])).second)
        throw ParseError(line_no, "duplicate stage name '" + std::string(tokens[1]) + "'");
      spec.stages.push_back({std::string(tokens[1]), *kind, {}, line_no});
    } else if (tokens[0] == "attr") {
      if (spec.stages.empty()) throw ParseError(line_no, "'attr' before any stage");
      if (line.empty() || (line[0] != ' ' && line[0] != '\t'))
        throw ParseError(line_no, "'attr' lines must be indented");
      if (tokens.size() < 3) throw ParseError(line_no, "expected 'attr <key> <value>'");
      auto& stage = spec.stages.back();
      const std::string key(tokens[1]);
      if (stage.attr(key)) throw ParseError(line_no, "duplicate attribute '" + key + "'");
      std::string value(tokens[2]);
      for (std::size_t i = 3; i < tokens.size(); ++i) value += " " + std::string(tokens[i]);
      const auto rules = detail::rules_for(stage.kind);
      const auto rule = std::find_if(rules.begin(), rules.end(), [&](const auto& r) { return key == r.key; });
      if (rule == rules.end())
        throw ParseError(line_no, "unknown attribute '" + key + "' for " + to_string(stage.kind) + " stage");
      detail::check_attr(*rule, value, line_no);
      stage.attributes.emplace_back(key, std::move(value));
    } else {
      throw ParseError(line_no, "expected 'stage' or 'attr', got '" + std::string(tokens[0]) + "'");
    }
  }
  const int last_line = std::max(line_no, 1);

  for (const auto& s : spec.stages)
    for (const auto& r : detail::rules_for(s.kind))
      if (r.required && !s.attr(r.key))
        throw ParseError(s.line, std::string("stage '") + s.name + "' lacks required attribute '" + r.key + "'");

  // Chain shape.
  int rank = -1;
  for (const auto& s : spec.stages) {
    const int r = detail::chain_rank(s.kind);
    if (r < rank || (r == rank && s.kind != StageKind::exporter))
      throw ParseError(s.line, std::string("stage '") + s.name + "' (" + to_string(s.kind) + ") is out of order");
    rank = r;
  }
  const auto* net = spec.find(StageKind::neural_network);
  if (!net) throw ParseError(last_line, "pipeline has no neural_network stage");
  const auto model = registry.descriptor(*net->attr("model"));
  if (!model) throw ParseError(net->line, "unknown model '" + *net->attr("model") + "'");
  const auto task = model->task;

  const auto* gen = spec.find(StageKind::patch_generator);
  const auto* stitch = spec.find(StageKind::stitcher);
  const auto* acc = spec.find(StageKind::accumulator);
  if (task == TaskType::image_segmentation) {
    if (gen) throw ParseError(gen->line, "image_segmentation models process the whole level; remove the patch_generator");
    if (const auto* t = spec.find(StageKind::tissue_segmentation))
      throw ParseError(t->line, "image_segmentation models do not use a tissue mask");
    if (const auto* b = spec.find(StageKind::batch_generator))
      throw ParseError(b->line, "image_segmentation models take a single input; remove the batch_generator");
  } else if (!gen) {
    throw ParseError(net->line, std::string(to_string(task)) + " pipelines need a patch_generator before the network");
  }
  if (task == TaskType::detection) {
    if (stitch) throw ParseError(stitch->line, "detection results are accumulated, not stitched");
    if (!acc) throw ParseError(last_line, "detection pipeline has no accumulator stage");
  } else {
    if (acc) throw ParseError(acc->line, "accumulator stages only follow detection models");
    if (!stitch) throw ParseError(last_line, "pipeline has no stitcher stage");
    const std::string want = task == TaskType::patch_classification ? "classification" : "segmentation";
    if (*stitch->attr("kind") != want)
      throw ParseError(stitch->line, "stitcher kind must be '" + want + "' for model '" + model->name + "'");
  }
  for (const auto* e : spec.all(StageKind::exporter)) {
    const auto& f = *e->attr("format");
    const bool ok = task == TaskType::detection ? f == "csv"
                    : task == TaskType::patch_classification ? (f == "mhd" || f == "tensor")
                                                             : f == "mhd";
    if (!ok) throw ParseError(e->line, "format '" + f + "' cannot export a " + to_string(task) + " result");
  }
  return spec;
}

inline PipelineSpec parse_pipeline(std::string_view text, std::string name = "pipeline") {
  return parse_pipeline(text, builtin_models(), std::move(name));
}

inline std::string print_pipeline(const PipelineSpec& spec) {
  std::ostringstream os;
  for (const auto& s : spec.stages) {
    os << "stage " << s.name << " " << to_string(s.kind) << "\n";
    for (const auto& [k, v] : s.attributes) os << "  attr " << k << " " << v << "\n";
  }
  return os.str();
}

inline PipelineSpec load_pipeline(const std::filesystem::path& file, const ModelRegistry& registry) {
  const auto b = png::read_file_bytes(file);
  return parse_pipeline(std::string_view(reinterpret_cast<const char*>(b.data()), b.size()), registry,
                        file.stem().string());
}

// Ready-made pipelines for the built-in mock models, by name.
inline std::vector<std::pair<std::string, std::string>> builtin_pipeline_texts() {
  return {
      {"classification",
       "stage tissue tissue_segmentation\n  attr threshold 30.0\n  attr closing_radius 2\n"
       "stage gen patch_generator\n  attr patch_size 512\n  attr magnification 20.0\n"
       "stage net neural_network\n  attr model mock_classifier_v1\n"
       "stage out stitcher\n  attr kind classification\n"},
      {"patch_segmentation",
       "stage tissue tissue_segmentation\n  attr threshold 30.0\n  attr closing_radius 2\n"
       "stage gen patch_generator\n  attr patch_size 256\n  attr magnification 20.0\n"
       "stage batch batch_generator\n  attr size 4\n"
       "stage net neural_network\n  attr model mock_segmenter_v1\n"
       "stage out stitcher\n  attr kind segmentation\n"},
      {"lowres_segmentation",
       "stage net neural_network\n  attr model mock_lowres_segmenter_v1\n"
       "stage out stitcher\n  attr kind segmentation\n"},
      {"detection",
       "stage tissue tissue_segmentation\n  attr threshold 30.0\n  attr closing_radius 2\n"
       "stage gen patch_generator\n  attr patch_size 256\n  attr magnification 20.0\n"
       "stage net neural_network\n  attr model mock_detector_v1\n"
       "stage acc accumulator\n  attr nms_threshold 0.5\n"
       "stage out exporter\n  attr format csv\n"},
  };
}

// ---------------------------------------------------------------------------
// Execution
// ---------------------------------------------------------------------------

namespace detail {

inline double attr_real(const StageSpec* s, std::string_view key, double fallback) {
  if (!s) return fallback;
  const auto* v = s->attr(key);
  return v ? *parse_number<double>(*v) : fallback;
}

inline int attr_int(const StageSpec* s, std::string_view key, int fallback) {
  if (!s) return fallback;
  const auto* v = s->attr(key);
  return v ? int(*parse_number<long long>(*v)) : fallback;
}

}  // namespace detail

// Tissue mask for the spec's tissue stage, or nullopt without one.
inline std::optional<TissueMask> tissue_mask_for(const PipelineSpec& spec, const ImagePyramid& slide) {
  const auto* t = spec.find(StageKind::tissue_segmentation);
  if (!t) return std::nullopt;
  const int radius = detail::attr_int(t, "closing_radius", TissueParams{}.closing_radius);
  if (const auto* m = t->attr("method"); m && *m == "otsu") return segment_tissue_otsu(slide, radius);
  TissueParams params;
  params.threshold = detail::attr_real(t, "threshold", params.threshold);
  params.closing_radius = radius;
  if (const auto* c = t->attr("reference_color")) {
    const auto parts = detail::split_ws(*c);
    params.reference_color = {std::uint8_t(*detail::parse_number<int>(parts[0])),
                              std::uint8_t(*detail::parse_number<int>(parts[1])),
                              std::uint8_t(*detail::parse_number<int>(parts[2]))};
  }
  return segment_tissue(slide, params);
}

// Builds the patchflow configuration the spec describes.
inline PipelineConfig config_for(const PipelineSpec& spec, const ImagePyramid& slide, const ModelDescriptor& model) {
  PipelineConfig cfg;
  cfg.task = model.task;
  const auto* gen = spec.find(StageKind::patch_generator);
  if (model.task == TaskType::image_segmentation) {
    cfg.plan = plan_whole_level(slide, model.input_width, model.input_height);
  } else {
    const auto mask = tissue_mask_for(spec, slide);
    cfg.plan = plan_patches(slide, mask ? &*mask : nullptr, detail::attr_int(gen, "patch_size", model.patch_size),
                            detail::attr_real(gen, "magnification", model.target_magnification),
                            detail::attr_real(gen, "keep_fraction", 0.1));
  }
  cfg.batch_size = detail::attr_int(spec.find(StageKind::batch_generator), "size", model.batch_size);
  cfg.buffer_capacity = std::size_t(detail::attr_int(gen, "buffer", 64));
  cfg.nms_threshold = detail::attr_real(spec.find(StageKind::accumulator), "nms_threshold", 0.5);
  return cfg;
}

// A run ready to execute (nothing has been processed yet).
inline std::shared_ptr<PipelineRun> prepare_pipeline(const PipelineSpec& spec,
                                                     std::shared_ptr<const ImagePyramid> slide,
                                                     const ModelRegistry& registry) {
  const auto model = registry.descriptor(spec.model());
  if (!model) throw ConfigError("unknown model '" + spec.model() + "'");
  auto cfg = config_for(spec, *slide, *model);
  std::shared_ptr<ModelRunner> runner = registry.make_runner(spec.model());
  return std::make_shared<PipelineRun>(std::move(slide), std::move(cfg), std::move(runner));
}

inline std::shared_ptr<PipelineRun> execute_pipeline(const PipelineSpec& spec,
                                                     std::shared_ptr<const ImagePyramid> slide,
                                                     const ModelRegistry& registry,
                                                     const RunObserver& observer = {}) {
  auto run = prepare_pipeline(spec, std::move(slide), registry);
  run->execute(observer);
  return run;
}

// Histogram and slide-level call of a heatmap as JSON.
inline nlohmann::ordered_json heatmap_stats_json(const HeatmapData& h, const std::vector<std::string>& class_names,
                                                 const std::set<int>& exclude = {}) {
  nlohmann::ordered_json j;
  const auto hist = class_histogram(h);
  j["processed_cells"] = h.processed_count();
  j["total_cells"] = std::uint64_t(h.cols) * std::uint64_t(h.rows);
  auto& arr = j["histogram"] = nlohmann::ordered_json::array();
  for (std::size_t c = 0; c < hist.size(); ++c)
    arr.push_back({{"class", int(c)}, {"name", c < class_names.size() ? class_names[c] : ""}, {"count", hist[c]}});
  const auto call = slide_level_call(hist, exclude);
  j["slide_level_call"] = call ? nlohmann::ordered_json(*call) : nlohmann::ordered_json(nullptr);
  return j;
}

// Writes the exporter stages' files (or every applicable format when the spec
// has no exporter) into dir; returns the file names.
inline std::vector<std::string> export_results(const PipelineSpec& spec, const PipelineRun& run,
                                               const ModelDescriptor& model, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::pair<std::string, std::string>> jobs;  // format, stem
  for (const auto* e : spec.all(StageKind::exporter)) {
    const auto* n = e->attr("name");
    jobs.emplace_back(*e->attr("format"), n ? *n : "");
  }
  if (jobs.empty()) {
    if (model.task == TaskType::detection) jobs = {{"csv", ""}};
    else if (model.task == TaskType::patch_classification) jobs = {{"mhd", ""}, {"tensor", ""}};
    else jobs = {{"mhd", ""}};
  }
  std::vector<std::string> files;
  std::visit(
      [&](const auto& layer) {
        using L = std::decay_t<decltype(*layer)>;
        for (const auto& [format, name] : jobs) {
          if constexpr (std::is_same_v<L, Heatmap>) {
            const auto data = layer->snapshot();
            const std::string stem = name.empty() ? "heatmap" : name;
            if (format == "mhd") {
              export_heatmap(data, dir, stem);
              for (auto s : {"_class.mhd", "_class.raw", "_confidence.mhd", "_confidence.raw"})
                files.push_back(stem + s);
            } else {
              export_tensor(heatmap_tensor(data), dir / (stem + ".ptns"));
              files.push_back(stem + ".ptns");
            }
            const auto stats = heatmap_stats_json(data, model.class_names).dump(2) + "\n";
            png::write_file_bytes(dir / "stats.json", std::vector<std::uint8_t>(stats.begin(), stats.end()));
            if (std::find(files.begin(), files.end(), "stats.json") == files.end()) files.push_back("stats.json");
          } else if constexpr (std::is_same_v<L, SegmentationLayer>) {
            const std::string stem = name.empty() ? "segmentation" : name;
            export_metaimage(layer->read_level(0), dir / (stem + ".mhd"));
            files.push_back(stem + ".mhd");
            files.push_back(stem + ".raw");
          } else {
            const std::string stem = name.empty() ? "detections" : name;
            export_detections_csv(layer->final_set(), dir / (stem + ".csv"));
            files.push_back(stem + ".csv");
          }
        }
      },
      run.result());
  return files;
}

// ---------------------------------------------------------------------------
// Projects
// ---------------------------------------------------------------------------

// project.json: {"name": "...", "slides": ["relative/or/absolute/container", ...]}
struct Project {
  std::string name;
  std::filesystem::path root;
  std::vector<std::filesystem::path> slides;  // resolved
};

inline Project load_project(const std::filesystem::path& root) {
  const auto file = root / "project.json";
  if (!std::filesystem::is_directory(root)) throw Error("project root " + root.string() + " is not a directory");
  Project p;
  p.root = root;
  p.name = root.filename().string();
  if (!std::filesystem::exists(file)) return p;
  nlohmann::json j;
  try {
    const auto b = png::read_file_bytes(file);
    j = nlohmann::json::parse(b.begin(), b.end());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("project.json: " + std::string(e.what()));
  }
  p.name = j.value("name", p.name);
  for (const auto& s : j.value("slides", nlohmann::json::array())) {
    std::filesystem::path path = s.get<std::string>();
    p.slides.push_back(path.is_absolute() ? path : root / path);
  }
  return p;
}

inline void save_project(const Project& p) {
  nlohmann::ordered_json j;
  j["name"] = p.name;
  j["slides"] = nlohmann::ordered_json::array();
  for (const auto& s : p.slides) {
    const auto rel = s.lexically_relative(p.root);
    j["slides"].push_back((rel.empty() || *rel.begin() == "..") ? s.string() : rel.string());
  }
  const auto text = j.dump(2) + "\n";
  std::filesystem::create_directories(p.root);
  png::write_file_bytes(p.root / "project.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

struct SlideOutcome {
  std::string slide;  // as resolved
  std::string stem;   // result directory under results/
  bool ok = false;
  bool skipped = false;  // resumed from an earlier run
  std::string error;
  std::vector<std::string> files;
  std::uint64_t patches_done = 0;
  std::uint64_t patches_total = 0;
};

struct ProjectRunOptions {
  bool resume = false;
  std::function<void(const SlideOutcome&)> on_slide;
};

namespace detail {

// Unique, filesystem-safe result directory names in slide order.
inline std::vector<std::string> result_stems(const std::vector<std::filesystem::path>& slides) {
  std::vector<std::string> out;
  std::set<std::string> used;
  for (const auto& s : slides) {
    auto base = (s.has_filename() ? s : s.parent_path()).stem().string();
    if (base.empty()) base = "slide";
    std::string stem = base;
    for (int k = 2; used.contains(stem); ++k) stem = base + "_" + std::to_string(k);
    used.insert(stem);
    out.push_back(stem);
  }
  return out;
}

}  // namespace detail

// Runs the pipeline on every slide in list order, one at a time. Failures are
// recorded and the run continues. Writes results/manifest.json.
inline std::vector<SlideOutcome> run_for_project(const Project& project, const PipelineSpec& spec,
                                                 const ModelRegistry& registry, const ProjectRunOptions& opt = {}) {
  if (!std::filesystem::is_directory(project.root))
    throw Error("project root " + project.root.string() + " is not readable");
  const auto results = project.root / "results";
  const auto manifest_path = results / "manifest.json";
  std::filesystem::create_directories(results);

  std::set<std::string> done_before;
  if (opt.resume && std::filesystem::exists(manifest_path)) {
    try {
      const auto b = png::read_file_bytes(manifest_path);
      const auto j = nlohmann::json::parse(b.begin(), b.end());
      if (j.value("pipeline", "") == spec.name)
        for (const auto& e : j.value("slides", nlohmann::json::array()))
          if (e.value("status", "") == "ok") done_before.insert(e.value("slide", ""));
    } catch (const std::exception&) {
      // Unreadable manifest: start over.
    }
  }

  const auto model = registry.descriptor(spec.model());
  if (!model) throw ConfigError("unknown model '" + spec.model() + "'");
  const auto stems = detail::result_stems(project.slides);
  std::vector<SlideOutcome> outcomes;
  auto write_manifest = [&] {
    nlohmann::ordered_json j;
    j["project"] = project.name;
    j["pipeline"] = spec.name;
    j["model"] = spec.model();
    j["slides"] = nlohmann::ordered_json::array();
    for (const auto& o : outcomes) {
      nlohmann::ordered_json e;
      e["slide"] = o.slide;
      e["results"] = "results/" + o.stem;
      e["status"] = o.ok ? "ok" : "failed";
      if (!o.ok) e["error"] = o.error;
      e["files"] = o.files;
      e["patches_done"] = o.patches_done;
      e["patches_total"] = o.patches_total;
      j["slides"].push_back(e);
    }
    const auto text = j.dump(2) + "\n";
    png::write_file_bytes(manifest_path, std::vector<std::uint8_t>(text.begin(), text.end()));
  };

  std::map<std::string, nlohmann::json> previous;
  if (opt.resume && std::filesystem::exists(manifest_path)) {
    try {
      const auto b = png::read_file_bytes(manifest_path);
      for (const auto& e : nlohmann::json::parse(b.begin(), b.end()).value("slides", nlohmann::json::array()))
        previous[e.value("slide", "")] = e;
    } catch (const std::exception&) {
    }
  }

  for (std::size_t i = 0; i < project.slides.size(); ++i) {
    SlideOutcome o;
    o.slide = project.slides[i].string();
    o.stem = stems[i];
    if (done_before.contains(o.slide) && std::filesystem::is_directory(results / o.stem)) {
      const auto& e = previous[o.slide];
      o.ok = true;
      o.skipped = true;
      o.files = e.value("files", std::vector<std::string>{});
      o.patches_done = e.value("patches_done", std::uint64_t(0));
      o.patches_total = e.value("patches_total", std::uint64_t(0));
    } else {
      try {
        auto slide = std::make_shared<const ImagePyramid>(open_container(project.slides[i]));
        auto run = execute_pipeline(spec, slide, registry);
        o.files = export_results(spec, *run, *model, results / o.stem);
        o.patches_done = run->patches_done();
        o.patches_total = run->patches_total();
        o.ok = true;
      } catch (const std::exception& e) {
        o.ok = false;
        o.error = e.what();
      }
    }
    outcomes.push_back(o);
    write_manifest();
    if (opt.on_slide) opt.on_slide(o);
  }
  write_manifest();
  return outcomes;
}

}  // namespace pyraflow
