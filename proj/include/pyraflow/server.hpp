#pragma once

#include <algorithm>
#include <atomic>
#include <charconv>
#include <condition_variable>
#include <cstdlib>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "pyraflow/container.hpp"
#include "pyraflow/export.hpp"
#include "pyraflow/orchestration.hpp"
#include "pyraflow/png.hpp"
#include "pyraflow/tilecache.hpp"
#include "pyraflow/tissue.hpp"

namespace pyraflow {

struct ServerConfig {
  std::filesystem::path data_dir;  // slides/<id>/ containers, pipelines/*.txt; empty = in-memory only
  CacheBudget cache_budget{};
  std::size_t max_concurrent_runs = 1;
  ModelRegistry models = builtin_models();
  bool builtin_pipelines = true;
};

// Data root from PYRAFLOW_DATA_DIR, or empty.
inline std::filesystem::path data_dir_from_env() {
  const char* v = std::getenv("PYRAFLOW_DATA_DIR");
  return v ? std::filesystem::path(v) : std::filesystem::path();
}

// HTTP front end over slides, tile caches, pipeline runs and their results.
class Server {
 public:
  using json = nlohmann::ordered_json;

  explicit Server(ServerConfig cfg = {}) : cfg_(std::move(cfg)) {
    if (cfg_.max_concurrent_runs == 0) throw ConfigError("max_concurrent_runs must be >= 1");
    if (cfg_.builtin_pipelines)
      for (const auto& [name, text] : builtin_pipeline_texts()) add_pipeline(name, text);
    if (!cfg_.data_dir.empty()) load_data_dir();
    routes();
  }

  ~Server() {
    stop();
    std::vector<std::shared_ptr<RunEntry>> runs;
    {
      std::lock_guard lk(mu_);
      for (auto& [id, r] : runs_) runs.push_back(r);
    }
    for (auto& r : runs) r->run->halt();
    for (auto& r : runs)
      if (r->worker.joinable()) r->worker.join();
  }

  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  // -- registration ---------------------------------------------------------

  void add_slide(const std::string& id, std::shared_ptr<const ImagePyramid> slide) {
    if (!valid_id(id)) throw ConfigError("invalid slide id '" + id + "'");
    auto entry = std::make_shared<SlideEntry>();
    entry->id = id;
    entry->pyramid = slide;
    entry->cache = std::make_unique<TileCache>(slide, cfg_.cache_budget);
    std::lock_guard lk(mu_);
    slides_[id] = std::move(entry);
  }

  // Parses against the server's models; throws ParseError.
  PipelineSpec add_pipeline(const std::string& name, const std::string& text) {
    if (!valid_id(name)) throw ConfigError("invalid pipeline name '" + name + "'");
    auto spec = parse_pipeline(text, cfg_.models, name);
    std::lock_guard lk(mu_);
    pipelines_[name] = {spec, text};
    return spec;
  }

  const TileCache* cache(const std::string& slide_id) const {
    std::lock_guard lk(mu_);
    auto it = slides_.find(slide_id);
    return it == slides_.end() ? nullptr : it->second->cache.get();
  }

  // -- lifecycle ------------------------------------------------------------

  httplib::Server& http() noexcept { return http_; }

  // Binds to host:port (0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    const int bound = port == 0 ? http_.bind_to_any_port(host) : (http_.bind_to_port(host, port) ? port : -1);
    if (bound < 0) throw Error("cannot bind " + host + ":" + std::to_string(port));
    listener_ = std::thread([this] { http_.listen_after_bind(); });
    http_.wait_until_ready();
    return bound;
  }

  // Serves on the calling thread until stop().
  bool listen(const std::string& host, int port) { return http_.listen(host, port); }

  void stop() {
    stopping_.store(true);
    {
      std::lock_guard lk(mu_);
      for (auto& [id, r] : runs_) r->events_cv.notify_all();
    }
    if (http_.is_running()) http_.stop();
    if (listener_.joinable()) listener_.join();
  }

  // Blocks until the run reaches a terminal state.
  void wait_run(const std::string& run_id) {
    std::shared_ptr<RunEntry> r;
    {
      std::lock_guard lk(mu_);
      auto it = runs_.find(run_id);
      if (it == runs_.end()) return;
      r = it->second;
    }
    std::unique_lock lk(r->events_mu);
    r->events_cv.wait(lk, [&] { return r->terminal; });
  }

 private:
  struct SlideEntry {
    std::string id;
    std::shared_ptr<const ImagePyramid> pyramid;
    std::unique_ptr<TileCache> cache;
    std::filesystem::path path;
  };

  struct PipelineEntry {
    PipelineSpec spec;
    std::string text;
  };

  struct RunEntry {
    std::string id;
    std::string slide_id;
    std::string pipeline;
    ModelDescriptor model;
    std::shared_ptr<PipelineRun> run;
    std::thread worker;

    std::mutex events_mu;
    std::condition_variable events_cv;
    std::vector<std::string> events;  // NDJSON lines
    bool terminal = false;
    std::string error;

    void emit(const json& e) {
      std::lock_guard lk(events_mu);
      events.push_back(e.dump() + "\n");
      if (e["type"] == "finished" || e["type"] == "halted" || e["type"] == "failed") terminal = true;
      events_cv.notify_all();
    }
  };

  static bool valid_id(const std::string& s) {
    return !s.empty() && s.size() <= 128 && std::all_of(s.begin(), s.end(), [](char c) {
      return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-' || c == '.';
    }) && s != "." && s != "..";
  }

  void load_data_dir() {
    namespace fs = std::filesystem;
    const auto slides = cfg_.data_dir / "slides";
    if (fs::is_directory(slides)) {
      std::vector<fs::path> dirs;
      for (const auto& e : fs::directory_iterator(slides))
        if (e.is_directory() && fs::exists(e.path() / "manifest.json")) dirs.push_back(e.path());
      std::sort(dirs.begin(), dirs.end());
      for (const auto& d : dirs) {
        try {
          add_slide(d.filename().string(), std::make_shared<const ImagePyramid>(open_container(d)));
          slides_[d.filename().string()]->path = d;
        } catch (const std::exception& e) {
          log_warning("skipping slide " + d.string() + ": " + e.what());
        }
      }
    }
    const auto pipes = cfg_.data_dir / "pipelines";
    if (fs::is_directory(pipes)) {
      for (const auto& e : fs::directory_iterator(pipes)) {
        if (e.path().extension() != ".txt") continue;
        try {
          const auto b = png::read_file_bytes(e.path());
          add_pipeline(e.path().stem().string(), std::string(b.begin(), b.end()));
        } catch (const std::exception& ex) {
          log_warning("skipping pipeline " + e.path().string() + ": " + ex.what());
        }
      }
    }
  }

  // -- helpers --------------------------------------------------------------

  static void send_json(httplib::Response& res, const json& j, int status = 200) {
    res.status = status;
    res.set_content(j.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& msg,
                         std::optional<int> line = std::nullopt) {
    json j{{"error", msg}};
    if (line) j["line"] = *line;
    send_json(res, j, status);
  }

  static std::optional<int> to_int(const std::string& s) {
    int v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc{} || p != s.data() + s.size()) return std::nullopt;
    return v;
  }

  std::shared_ptr<SlideEntry> slide(const std::string& id) const {
    std::lock_guard lk(mu_);
    auto it = slides_.find(id);
    return it == slides_.end() ? nullptr : it->second;
  }

  std::shared_ptr<RunEntry> run(const std::string& id) const {
    std::lock_guard lk(mu_);
    auto it = runs_.find(id);
    return it == runs_.end() ? nullptr : it->second;
  }

  static json slide_json(const SlideEntry& s) {
    json j = manifest_json(*s.pyramid);
    j["id"] = s.id;
    auto mags = json::array();
    for (int l = 0; l < s.pyramid->level_count(); ++l) mags.push_back(s.pyramid->magnification(l));
    j["magnifications"] = mags;
    return j;
  }

  static const char* state_name(RunState s) {
    return s == RunState::pending ? "running" : to_string(s);
  }

  json run_json(const RunEntry& r) const {
    const auto& cfg = r.run->config();
    json j;
    j["run_id"] = r.id;
    j["slide_id"] = r.slide_id;
    j["pipeline"] = r.pipeline;
    j["model"] = r.model.name;
    j["task"] = to_string(r.model.task);
    j["state"] = state_name(r.run->state());
    j["done"] = r.run->patches_done();
    j["total"] = r.run->patches_total();
    const auto t = r.run->timings();
    j["timings_ms"] = {{"patch_generator", t.patch_generator_ms}, {"nn_input", t.nn_input_ms},
                       {"nn_inference", t.nn_inference_ms},     {"nn_output", t.nn_output_ms},
                       {"patch_stitcher", t.patch_stitcher_ms}, {"total", t.total_ms}};
    json overlay;
    overlay["slide_level"] = cfg.plan.level;
    overlay["tile_size"] = r.run->slide().tile_size();
    std::visit(
        [&](const auto& layer) {
          using L = std::decay_t<decltype(*layer)>;
          if constexpr (std::is_same_v<L, Heatmap>) {
            overlay["kind"] = "heatmap";
            overlay["cols"] = layer->cols();
            overlay["rows"] = layer->rows();
            overlay["classes"] = layer->classes();
            overlay["cell_size_l0"] = std::int64_t(cfg.plan.footprint_w) << cfg.plan.level;
            overlay["levels"] = 1;
          } else if constexpr (std::is_same_v<L, SegmentationLayer>) {
            overlay["kind"] = "segmentation";
            overlay["width"] = layer->width();
            overlay["height"] = layer->height();
            overlay["levels"] = layer->pyramid().level_count();
            overlay["classes"] = r.model.num_classes;
          } else {
            overlay["kind"] = "detections";
            overlay["levels"] = 0;
          }
        },
        r.run->result());
    j["overlay"] = overlay;
    j["class_names"] = r.model.class_names;
    if (!r.error.empty()) j["error"] = r.error;
    return j;
  }

  // Class in the gray channel (255 = unprocessed), confidence in alpha.
  static std::vector<std::uint8_t> encode_overlay(const Raster& classes, const Raster& confidence) {
    Raster ga(classes.width, classes.height, 2);
    for (std::size_t i = 0; i < classes.data.size(); ++i) {
      ga.data[2 * i] = classes.data[i];
      ga.data[2 * i + 1] = confidence.data[i];
    }
    return png::encode(ga);
  }

  // -- routes ---------------------------------------------------------------

  void routes() {
    http_.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        send_error(res, 500, e.what());
      } catch (...) {
        send_error(res, 500, "unknown error");
      }
    });

    http_.Get("/slides", [this](const httplib::Request&, httplib::Response& res) {
      json arr = json::array();
      std::lock_guard lk(mu_);
      for (const auto& [id, s] : slides_) arr.push_back(slide_json(*s));
      send_json(res, arr);
    });

    http_.Get(R"(/slides/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = slide(req.matches[1]);
      if (!s) return send_error(res, 404, "unknown slide");
      send_json(res, slide_json(*s));
    });

    http_.Get(R"(/slides/([^/]+)/tiles/(\d+)/(\d+)/(\d+))",
              [this](const httplib::Request& req, httplib::Response& res) {
                auto s = slide(req.matches[1]);
                if (!s) return send_error(res, 404, "unknown slide");
                const auto l = to_int(req.matches[2]), c = to_int(req.matches[3]), r = to_int(req.matches[4]);
                if (!l || !c || !r || !s->pyramid->valid({*l, *c, *r})) return send_error(res, 404, "tile outside grid");
                const TileKey key{*l, *c, *r};
                std::shared_ptr<const Tile> tile;
                int actual = key.level;
                if (req.has_param("fallback") && req.get_param_value("fallback") == "1") {
                  auto fb = s->cache->resolve_with_fallback(key);
                  tile = fb.tile;
                  actual = fb.actual_level;
                } else {
                  tile = s->cache->get_tile(key);
                }
                Raster r8(tile->width, tile->height, tile->channels);
                r8.data = tile->pixels;
                res.set_header("X-Actual-Level", std::to_string(actual));
                const auto bytes = png::encode(r8);
                res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
              });

    http_.Get(R"(/slides/([^/]+)/tissue-preview)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = slide(req.matches[1]);
      if (!s) return send_error(res, 404, "unknown slide");
      TissueParams params;
      int downsample = 1;
      try {
        if (req.has_param("threshold")) {
          const auto v = detail::parse_number<double>(req.get_param_value("threshold"));
          if (!v) throw ConfigError("threshold must be a number");
          params.threshold = *v;
        }
        if (req.has_param("radius")) {
          const auto v = to_int(req.get_param_value("radius"));
          if (!v || *v < 0 || *v > 64) throw ConfigError("radius must be an integer in [0, 64]");
          params.closing_radius = *v;
        }
        if (req.has_param("downsample")) {
          const auto v = to_int(req.get_param_value("downsample"));
          if (!v || *v < 1 || *v > 64) throw ConfigError("downsample must be an integer in [1, 64]");
          downsample = *v;
        }
        params.validate();
      } catch (const ConfigError& e) {
        return send_error(res, 400, e.what());
      }
      auto mask = preview_tissue(*s->pyramid, params, downsample);
      for (auto& v : mask.data) v = v ? 255 : 0;
      const auto bytes = png::encode(mask);
      res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
    });

    http_.Get("/pipelines", [this](const httplib::Request&, httplib::Response& res) {
      json arr = json::array();
      std::lock_guard lk(mu_);
      for (const auto& [name, p] : pipelines_) {
        const auto d = cfg_.models.descriptor(p.spec.model());
        arr.push_back({{"name", name},
                       {"model", p.spec.model()},
                       {"task", d ? to_string(d->task) : "?"},
                       {"text", p.text}});
      }
      send_json(res, arr);
    });

    http_.Post("/pipelines", [this](const httplib::Request& req, httplib::Response& res) {
      std::string name, text;
      if (req.get_header_value("Content-Type").starts_with("application/json")) {
        try {
          const auto j = nlohmann::json::parse(req.body);
          name = j.at("name").get<std::string>();
          text = j.at("text").get<std::string>();
        } catch (const std::exception& e) {
          return send_error(res, 400, std::string("bad request body: ") + e.what());
        }
      } else {
        name = req.get_param_value("name");
        text = req.body;
      }
      try {
        const auto spec = add_pipeline(name, text);
        if (!cfg_.data_dir.empty()) {
          std::filesystem::create_directories(cfg_.data_dir / "pipelines");
          png::write_file_bytes(cfg_.data_dir / "pipelines" / (name + ".txt"),
                                std::vector<std::uint8_t>(text.begin(), text.end()));
        }
        send_json(res, {{"name", name}, {"model", spec.model()}, {"stages", spec.stages.size()}}, 201);
      } catch (const ParseError& e) {
        send_error(res, 400, e.what(), e.line());
      } catch (const ConfigError& e) {
        send_error(res, 400, e.what());
      }
    });

    http_.Post(R"(/slides/([^/]+)/runs)", [this](const httplib::Request& req, httplib::Response& res) {
      auto s = slide(req.matches[1]);
      if (!s) return send_error(res, 404, "unknown slide");
      std::string pipeline;
      try {
        pipeline = nlohmann::json::parse(req.body).at("pipeline").get<std::string>();
      } catch (const std::exception& e) {
        return send_error(res, 400, std::string("body must be {\"pipeline\": name}: ") + e.what());
      }
      std::optional<PipelineEntry> p;
      {
        std::lock_guard lk(mu_);
        if (auto it = pipelines_.find(pipeline); it != pipelines_.end()) p = it->second;
      }
      if (!p) return send_error(res, 404, "unknown pipeline '" + pipeline + "'");
      const auto model = cfg_.models.descriptor(p->spec.model());
      if (!model) return send_error(res, 404, "unknown model '" + p->spec.model() + "'");

      std::unique_lock lk(mu_);
      if (active_runs_ >= cfg_.max_concurrent_runs) {
        lk.unlock();
        return send_error(res, 409, "concurrent run limit (" + std::to_string(cfg_.max_concurrent_runs) + ") reached");
      }
      auto entry = std::make_shared<RunEntry>();
      try {
        entry->run = prepare_pipeline(p->spec, s->pyramid, cfg_.models);
      } catch (const std::exception& e) {
        lk.unlock();
        return send_error(res, 400, e.what());
      }
      ++active_runs_;
      entry->id = "run-" + std::to_string(++run_counter_);
      entry->slide_id = s->id;
      entry->pipeline = pipeline;
      entry->model = *model;
      runs_[entry->id] = entry;
      entry->emit({{"type", "start"}, {"run_id", entry->id}, {"total", entry->run->patches_total()}});
      entry->worker = std::thread([this, entry] { execute(entry); });
      lk.unlock();
      send_json(res, {{"run_id", entry->id}, {"slide_id", entry->slide_id}, {"pipeline", pipeline}, {"state", "running"}},
                202);
    });

    http_.Get("/runs", [this](const httplib::Request&, httplib::Response& res) {
      json arr = json::array();
      std::lock_guard lk(mu_);
      for (const auto& [id, r] : runs_) arr.push_back(run_json(*r));
      send_json(res, arr);
    });

    http_.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = run(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown run");
      std::lock_guard lk(r->events_mu);
      send_json(res, run_json(*r));
    });

    http_.Post(R"(/runs/([^/]+)/halt)", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = run(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown run");
      r->run->halt();
      send_json(res, {{"run_id", r->id}, {"halt_requested", true}, {"state", state_name(r->run->state())}});
    });

    http_.Get(R"(/runs/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = run(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown run");
      auto next = std::make_shared<std::size_t>(0);
      res.set_chunked_content_provider("application/x-ndjson", [this, r, next](std::size_t, httplib::DataSink& sink) {
        std::unique_lock lk(r->events_mu);
        r->events_cv.wait_for(lk, std::chrono::milliseconds(200),
                              [&] { return *next < r->events.size() || stopping_.load(); });
        while (*next < r->events.size()) {
          const auto& line = r->events[(*next)++];
          if (!sink.write(line.data(), line.size())) return false;
        }
        if ((r->terminal && *next == r->events.size()) || stopping_.load()) sink.done();
        return true;
      });
    });

    http_.Get(R"(/runs/([^/]+)/overlay/(\d+)/(\d+)/(\d+))",
              [this](const httplib::Request& req, httplib::Response& res) {
                auto r = run(req.matches[1]);
                if (!r) return send_error(res, 404, "unknown run");
                const auto l = to_int(req.matches[2]), c = to_int(req.matches[3]), row = to_int(req.matches[4]);
                if (!l || !c || !row) return send_error(res, 404, "tile outside grid");
                const int ts = r->run->slide().tile_size();
                std::optional<std::vector<std::uint8_t>> png_bytes;
                std::visit(
                    [&](const auto& layer) {
                      using L = std::decay_t<decltype(*layer)>;
                      if constexpr (std::is_same_v<L, Heatmap>) {
                        if (*l != 0) return;
                        const Rect all{0, 0, layer->cols(), layer->rows()};
                        const Rect t = intersect(Rect{*c * ts, *row * ts, ts, ts}, all);
                        if (t.empty()) return;
                        const auto data = layer->snapshot();
                        png_bytes = encode_overlay(crop(heatmap_class_raster(data), t),
                                                   crop(heatmap_confidence_raster(data), t));
                      } else if constexpr (std::is_same_v<L, SegmentationLayer>) {
                        const auto& p = layer->pyramid();
                        if (!p.valid({*l, *c, *row})) return;
                        const Raster cls = layer->read(*l, p.tile_rect({*l, *c, *row}));
                        Raster conf(cls.width, cls.height, 1);
                        for (std::size_t i = 0; i < cls.data.size(); ++i)
                          conf.data[i] = cls.data[i] == kUnprocessed ? 0 : 255;
                        png_bytes = encode_overlay(cls, conf);
                      }
                    },
                    r->run->result());
                if (!png_bytes) return send_error(res, 404, "no overlay tile at this key");
                res.set_content(std::string(png_bytes->begin(), png_bytes->end()), "image/png");
              });

    http_.Get(R"(/runs/([^/]+)/detections)", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = run(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown run");
      const auto* layer = std::get_if<std::shared_ptr<DetectionLayer>>(&r->run->result());
      if (!layer) return send_error(res, 404, "not a detection run");
      const bool running = r->run->state() == RunState::running || r->run->state() == RunState::pending;
      json arr = json::array();
      for (const auto& d : running ? (*layer)->raw() : (*layer)->final_set())
        arr.push_back({{"x", d.box.x}, {"y", d.box.y}, {"w", d.box.w}, {"h", d.box.h}, {"class", d.class_id},
                       {"score", d.score}});
      send_json(res, {{"final", !running}, {"detections", arr}});
    });

    http_.Get(R"(/runs/([^/]+)/stats)", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = run(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown run");
      if (!snapshot_allowed(*r, req)) return send_error(res, 409, "run in progress; pass snapshot=1");
      std::set<int> exclude;
      if (req.has_param("exclude"))
        for (auto part : detail::split(req.get_param_value("exclude"), ','))
          if (auto v = detail::parse_number<int>(part)) exclude.insert(*v);
      json j;
      std::visit(
          [&](const auto& layer) {
            using L = std::decay_t<decltype(*layer)>;
            if constexpr (std::is_same_v<L, Heatmap>) {
              j = heatmap_stats_json(layer->snapshot(), r->model.class_names, exclude);
            } else if constexpr (std::is_same_v<L, SegmentationLayer>) {
              const auto ids = class_histogram(layer->read_level(0), r->model.num_classes);
              std::uint64_t total = 0;
              auto arr = json::array();
              for (std::size_t c = 0; c < ids.size(); ++c) {
                total += ids[c];
                arr.push_back({{"class", int(c)}, {"name", r->model.class_names[c]}, {"count", ids[c]}});
              }
              j["processed_pixels"] = total;
              j["histogram"] = arr;
              const auto call = slide_level_call(ids, exclude);
              j["slide_level_call"] = call ? json(*call) : json(nullptr);
            } else {
              const auto dets = layer->final_set();
              std::vector<std::uint64_t> counts(std::size_t(r->model.num_classes), 0);
              for (const auto& d : dets)
                if (d.class_id >= 0 && std::size_t(d.class_id) < counts.size()) ++counts[std::size_t(d.class_id)];
              auto arr = json::array();
              for (std::size_t c = 0; c < counts.size(); ++c)
                arr.push_back({{"class", int(c)}, {"name", r->model.class_names[c]}, {"count", counts[c]}});
              j["detections"] = dets.size();
              j["histogram"] = arr;
            }
          },
          r->run->result());
      j["state"] = state_name(r->run->state());
      send_json(res, j);
    });

    http_.Get(R"(/runs/([^/]+)/export)", [this](const httplib::Request& req, httplib::Response& res) {
      auto r = run(req.matches[1]);
      if (!r) return send_error(res, 404, "unknown run");
      if (!snapshot_allowed(*r, req)) return send_error(res, 409, "run in progress; pass snapshot=1");
      const auto format = req.get_param_value("format");
      const auto which = req.has_param("layer") ? req.get_param_value("layer") : "class";
      std::optional<std::string> body;
      std::string mime = "application/octet-stream", filename;
      std::visit(
          [&](const auto& layer) {
            using L = std::decay_t<decltype(*layer)>;
            Raster raster;
            std::string stem;
            if constexpr (std::is_same_v<L, Heatmap>) {
              const auto data = layer->snapshot();
              if (format == "tensor") {
                const auto bytes = encode_tensor(heatmap_tensor(data));
                body = std::string(bytes.begin(), bytes.end());
                filename = "heatmap.ptns";
                return;
              }
              if (which != "class" && which != "confidence") return;
              raster = which == "class" ? heatmap_class_raster(data) : heatmap_confidence_raster(data);
              stem = "heatmap_" + which;
            } else if constexpr (std::is_same_v<L, SegmentationLayer>) {
              raster = layer->read_level(0);
              stem = "segmentation";
            } else {
              if (format != "csv") return;
              body = detections_csv(layer->final_set());
              mime = "text/csv";
              filename = "detections.csv";
              return;
            }
            if (format == "mhd") {
              body = metaimage_header(raster.width, raster.height, stem + ".raw");
              mime = "text/plain";
              filename = stem + ".mhd";
            } else if (format == "raw") {
              body = std::string(raster.data.begin(), raster.data.end());
              filename = stem + ".raw";
            }
          },
          r->run->result());
      if (!body) return send_error(res, 400, "format '" + format + "' is not available for this run");
      res.set_header("Content-Disposition", "attachment; filename=\"" + filename + "\"");
      res.set_content(*body, mime);
    });
  }

  static bool snapshot_allowed(const RunEntry& r, const httplib::Request& req) {
    const auto st = r.run->state();
    const bool running = st == RunState::running || st == RunState::pending;
    return !running || (req.has_param("snapshot") && req.get_param_value("snapshot") == "1");
  }

  void execute(std::shared_ptr<RunEntry> entry) {
    RunObserver obs;
    obs.on_region = [&](const DirtyRegion& d) {
      entry->emit({{"type", "region"}, {"level", d.level}, {"x", d.rect.x}, {"y", d.rect.y}, {"w", d.rect.w},
                   {"h", d.rect.h}});
    };
    obs.on_progress = [&](std::uint64_t done, std::uint64_t total) {
      entry->emit({{"type", "progress"}, {"done", done}, {"total", total}});
    };
    json terminal;
    try {
      const auto st = entry->run->execute(obs);
      terminal = {{"type", to_string(st)}, {"done", entry->run->patches_done()}, {"total", entry->run->patches_total()}};
    } catch (const std::exception& e) {
      {
        std::lock_guard lk(entry->events_mu);
        entry->error = e.what();
      }
      terminal = {{"type", "failed"}, {"error", e.what()}};
      if (const auto* se = dynamic_cast<const StageError*>(&e)) terminal["stage"] = se->stage();
    }
    {
      std::lock_guard lk(mu_);
      --active_runs_;
    }
    entry->emit(terminal);
  }

  ServerConfig cfg_;
  httplib::Server http_;
  std::thread listener_;
  std::atomic<bool> stopping_{false};

  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<SlideEntry>> slides_;
  std::map<std::string, PipelineEntry> pipelines_;
  std::map<std::string, std::shared_ptr<RunEntry>> runs_;
  std::size_t active_runs_ = 0;
  std::uint64_t run_counter_ = 0;
};

}  // namespace pyraflow
