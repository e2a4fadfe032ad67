// Builds a synthetic slide, runs a classification pipeline with a custom
// runner and prints the class histogram and slide-level call.
//
//   demo [output-dir]

#include <iostream>

#include "pyraflow/pyraflow.hpp"

using namespace pyraflow;

namespace {

// Classifies a patch by its red-channel mean instead of overall intensity.
class RednessClassifier final : public ModelRunner {
 public:
  explicit RednessClassifier(ModelDescriptor d) : d_(std::move(d)) {}
  const ModelDescriptor& descriptor() const override { return d_; }
  std::vector<ModelOutput> invoke(std::span<const Tensor> batch) override {
    std::vector<ModelOutput> out;
    for (const auto& t : batch) {
      // Mean red minus green.
      double excess = 0;
      for (std::size_t i = 0; i + 1 < t.data.size(); i += std::size_t(t.channels)) excess += t.data[i] - t.data[i + 1];
      excess /= double(t.data.size() / std::size_t(t.channels));
      Probabilities p(std::size_t(d_.num_classes), 0.0f);
      p[excess > 0.1 ? 1 : 0] = 1.0f;
      out.emplace_back(std::move(p));
    }
    return out;
  }

 private:
  ModelDescriptor d_;
};

const char* kPipeline =
    "stage tissue tissue_segmentation\n"
    "  attr threshold 30\n"
    "stage gen patch_generator\n"
    "  attr patch_size 256\n"
    "  attr magnification 20\n"
    "stage net neural_network\n"
    "  attr model redness\n"
    "stage out stitcher\n"
    "  attr kind classification\n";

}  // namespace

int main(int argc, char** argv) {
  const std::filesystem::path out = argc > 1 ? argv[1] : "demo-out";

  auto slide = std::make_shared<const ImagePyramid>(generate_synthetic_slide(7, 8192, 6144));
  std::cout << "slide " << slide->width() << "x" << slide->height() << ", " << slide->level_count() << " levels\n";

  ModelRegistry models = builtin_models();
  models.add(parse_descriptor("name: redness\ntask: patch_classification\ninput_size: 64 64 3\n"
                              "num_classes: 2\nclass_names: pale;stained\nmagnification: 20\npatch_size: 256\n"),
             [](const ModelDescriptor& d) { return std::make_unique<RednessClassifier>(d); });

  const auto spec = parse_pipeline(kPipeline, models, "redness");
  RunObserver obs;
  obs.on_progress = [](std::uint64_t done, std::uint64_t total) {
    if (done == total || done % 50 == 0) std::cout << "\r" << done << "/" << total << std::flush;
  };
  auto run = execute_pipeline(spec, slide, models, obs);
  std::cout << "\n";

  const auto model = *models.descriptor("redness");
  for (const auto& f : export_results(spec, *run, model, out)) std::cout << "wrote " << (out / f).string() << "\n";

  const auto heatmap = std::get<std::shared_ptr<Heatmap>>(run->result())->snapshot();
  const auto hist = class_histogram(heatmap);
  for (std::size_t c = 0; c < hist.size(); ++c) std::cout << model.class_names[c] << ": " << hist[c] << "\n";
  if (const auto call = slide_level_call(hist)) std::cout << "slide-level call: " << model.class_names[std::size_t(*call)] << "\n";
  return 0;
}
