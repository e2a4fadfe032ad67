// pyraflow command-line driver.
#include <csignal>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "pyraflow/pyraflow.hpp"
#include "pyraflow/server.hpp"

namespace fs = std::filesystem;
using namespace pyraflow;

namespace {

ModelRegistry load_models(const std::vector<std::string>& descriptor_files) {
  ModelRegistry reg = builtin_models();
  for (const auto& f : descriptor_files) {
    const auto b = png::read_file_bytes(f);
    reg.add(parse_descriptor(std::string(b.begin(), b.end())));
  }
  return reg;
}

// A pipeline file, or the name of a built-in pipeline.
PipelineSpec resolve_pipeline(const std::string& arg, const ModelRegistry& reg) {
  if (fs::exists(arg)) return load_pipeline(arg, reg);
  for (const auto& [name, text] : builtin_pipeline_texts())
    if (name == arg) return parse_pipeline(text, reg, name);
  throw Error("no pipeline file or built-in pipeline named '" + arg + "'");
}

void print_info(const ImagePyramid& p) {
  std::cout << "size " << p.width() << " x " << p.height() << ", " << p.channels() << " channel(s), tile "
            << p.tile_size() << ", base magnification " << p.base_magnification() << "\n";
  for (const auto& lv : p.levels())
    std::cout << "  level " << lv.index << ": " << lv.width << " x " << lv.height << "  x"
              << p.magnification(lv.index) << "  " << to_string(lv.storage) << "  " << p.tile_cols(lv.index) << "x"
              << p.tile_rows(lv.index) << " tiles\n";
}

Server* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->http().stop();
}

}  // namespace

int main(int argc, char** argv) {
  const bool bench_alias = fs::path(argv[0]).filename() == "bench";
  CLI::App app{bench_alias ? "pyraflow benchmark driver" : "Tiled slide pyramids, patch pipelines and a tile server"};
  app.require_subcommand(1);

  // synth
  auto* synth = app.add_subcommand("synth", "Write a synthetic slide container");
  std::uint64_t seed = 42;
  int width = 4096, height = 4096;
  double magnification = 40;
  std::string out;
  bool blank = false;
  synth->add_option("--seed", seed, "Slide seed")->capture_default_str();
  synth->add_option("--width", width)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--height", height)->capture_default_str()->check(CLI::PositiveNumber);
  synth->add_option("--magnification", magnification)->capture_default_str();
  synth->add_flag("--blank", blank, "All-white slide (no tissue)");
  synth->add_option("--out", out, "Container directory")->required();

  // import
  auto* import = app.add_subcommand("import", "Convert a PNG/PNM image into a container");
  std::string input;
  import->add_option("input", input, "Image file")->required()->check(CLI::ExistingFile);
  import->add_option("--out", out, "Container directory")->required();
  import->add_option("--magnification", magnification)->capture_default_str();

  // info
  auto* info = app.add_subcommand("info", "Describe a container");
  std::string slide_dir;
  info->add_option("slide", slide_dir)->required()->check(CLI::ExistingDirectory);

  // run
  auto* run = app.add_subcommand("run", "Run a pipeline on one slide");
  std::string pipeline;
  std::vector<std::string> model_files;
  run->add_option("--pipeline", pipeline, "Pipeline file or built-in name")->required();
  run->add_option("--slide", slide_dir, "Container directory")->required()->check(CLI::ExistingDirectory);
  run->add_option("--out", out, "Result directory")->required();
  run->add_option("--model", model_files, "Extra model descriptor files");

  // project
  auto* project = app.add_subcommand("project", "Project management");
  project->require_subcommand(1);
  std::string root;
  auto* pinit = project->add_subcommand("init", "Create project.json listing slides");
  std::vector<std::string> slides;
  pinit->add_option("--root", root)->required();
  pinit->add_option("slides", slides, "Container directories");
  auto* prun = project->add_subcommand("run", "Run a pipeline on every slide in a project");
  bool resume = false;
  prun->add_option("--root", root)->required()->check(CLI::ExistingDirectory);
  prun->add_option("--pipeline", pipeline, "Pipeline file or built-in name")->required();
  prun->add_option("--model", model_files, "Extra model descriptor files");
  prun->add_flag("--resume", resume, "Skip slides already completed by the same pipeline");

  // serve
  auto* serve = app.add_subcommand("serve", "Start the HTTP server");
  int port = 8080;
  std::string host = "127.0.0.1", data_dir;
  std::uint64_t budget_mb = 256;
  std::size_t max_runs = 1;
  serve->add_option("--port", port)->capture_default_str();
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--data-dir", data_dir, "Data root (default: $PYRAFLOW_DATA_DIR)");
  serve->add_option("--budget-mb", budget_mb, "Tile cache budget per slide")->capture_default_str();
  serve->add_option("--max-runs", max_runs, "Concurrent pipeline runs")->capture_default_str();
  serve->add_option("--model", model_files, "Extra model descriptor files");

  // bench
  auto* bench = app.add_subcommand("bench", "Benchmarks");
  bench->require_subcommand(1);
  auto* brun = bench->add_subcommand("run", "Per-stage runtimes over repeated runs");
  int warmups = 1, runs = 10;
  brun->add_option("--pipeline", pipeline, "Pipeline file or built-in name")->required();
  brun->add_option("--slide", slide_dir, "Container directory")->required()->check(CLI::ExistingDirectory);
  brun->add_option("--warmups", warmups)->capture_default_str()->check(CLI::NonNegativeNumber);
  brun->add_option("--runs", runs)->capture_default_str()->check(CLI::PositiveNumber);
  brun->add_option("--out", out, "CSV of raw samples");
  brun->add_option("--model", model_files, "Extra model descriptor files");
  auto* bmem = bench->add_subcommand("memory", "Resident memory during a viewing scenario");
  std::string scenario = "zoom_pan";
  MemoryScenarioConfig mcfg;
  bmem->add_option("--scenario", scenario)->capture_default_str()->check(
      CLI::IsMember({"startup", "open_slide", "zoom_pan"}));
  bmem->add_option("--seconds", mcfg.seconds, "Simulated trace length")->capture_default_str();
  bmem->add_option("--budget-mb", budget_mb)->capture_default_str();
  bmem->add_flag("--realtime", mcfg.realtime, "Pace frames by the wall clock");

  if (bench_alias) {
    std::vector<std::string> args{argv[0], "bench"};
    for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
    std::vector<char*> ptrs;
    for (auto& a : args) ptrs.push_back(a.data());
    CLI11_PARSE(app, int(ptrs.size()), ptrs.data());
  } else {
    CLI11_PARSE(app, argc, argv);
  }

  try {
    if (*synth) {
      SyntheticSpec spec;
      if (blank) spec.blob_probability = 0;
      const auto p = generate_synthetic_slide(seed, width, height, spec, {}, magnification);
      save_container(p, out);
      print_info(p);
    } else if (*import) {
      const auto p = import_flat_image(input, {}, magnification);
      save_container(p, out);
      print_info(p);
    } else if (*info) {
      print_info(open_container(slide_dir));
    } else if (*run) {
      const auto reg = load_models(model_files);
      const auto spec = resolve_pipeline(pipeline, reg);
      auto slide = std::make_shared<const ImagePyramid>(open_container(slide_dir));
      std::uint64_t last = 0;
      RunObserver obs;
      obs.on_progress = [&](std::uint64_t done, std::uint64_t total) {
        if (done == total || done - last >= std::max<std::uint64_t>(1, total / 20)) {
          std::cerr << "\r" << done << "/" << total << std::flush;
          last = done;
        }
      };
      auto r = execute_pipeline(spec, slide, reg, obs);
      std::cerr << "\n";
      for (const auto& f : export_results(spec, *r, *reg.descriptor(spec.model()), out)) std::cout << (fs::path(out) / f).string() << "\n";
    } else if (*pinit) {
      Project p;
      p.root = root;
      p.name = fs::path(root).filename().string();
      for (const auto& s : slides) p.slides.push_back(fs::absolute(s));
      save_project(p);
    } else if (*prun) {
      const auto reg = load_models(model_files);
      const auto spec = resolve_pipeline(pipeline, reg);
      ProjectRunOptions opt;
      opt.resume = resume;
      opt.on_slide = [](const SlideOutcome& o) {
        std::cout << (o.ok ? (o.skipped ? "skip " : "ok   ") : "FAIL ") << o.slide
                  << (o.ok ? "" : ": " + o.error) << "\n";
      };
      const auto outcomes = run_for_project(load_project(root), spec, reg, opt);
      return std::all_of(outcomes.begin(), outcomes.end(), [](const auto& o) { return o.ok; }) ? 0 : 2;
    } else if (*serve) {
      ServerConfig cfg;
      cfg.data_dir = data_dir.empty() ? data_dir_from_env() : fs::path(data_dir);
      cfg.cache_budget.max_bytes = budget_mb << 20;
      cfg.max_concurrent_runs = max_runs;
      cfg.models = load_models(model_files);
      Server server(std::move(cfg));
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "listening on http://" << host << ":" << port << "\n";
      if (!server.listen(host, port)) {
        std::cerr << "error: cannot listen on " << host << ":" << port << "\n";
        return 1;
      }
      g_server = nullptr;
    } else if (*brun) {
      const auto reg = load_models(model_files);
      const auto spec = resolve_pipeline(pipeline, reg);
      auto slide = std::make_shared<const ImagePyramid>(open_container(slide_dir));
      const auto timings =
          run_benchmark([&] { return execute_pipeline(spec, slide, reg)->timings(); }, warmups, runs);
      if (!out.empty()) {
        const auto csv = timings_csv(timings);
        png::write_file_bytes(out, std::vector<std::uint8_t>(csv.begin(), csv.end()));
      }
      std::cout << summary_text(summarize(timings));
    } else if (*bmem) {
      mcfg.scenario = *parse_memory_scenario(scenario);
      mcfg.budget_bytes = budget_mb << 20;
      const auto rep = memory_scenario(mcfg);
      if (!rep.supported) {
        std::cerr << "resident-set sampling is not supported on this platform\n";
        return 3;
      }
      std::cout << "scenario " << scenario << ": peak " << (rep.peak_bytes >> 20) << " MiB, final "
                << (rep.final_bytes >> 20) << " MiB, " << rep.samples << " samples\n";
      if (mcfg.scenario == MemoryScenario::zoom_pan)
        std::cout << rep.frames << " frames, " << rep.tile_requests << " tile requests, " << rep.tile_loads
                  << " tile loads, cache peak " << (rep.peak_cache_bytes >> 20) << " MiB (+"
                  << (rep.pinned_bytes >> 20) << " MiB pinned)\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
