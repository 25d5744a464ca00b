#pragma once

// Grad-CAM heatmaps, CBAM channel/spatial attention and the lesion-aware
// fusion F' = CBAM(F) * (1 + alpha * M).

#include "lacap/encoder.hpp"
#include "lacap/image.hpp"
#include "lacap/nn.hpp"

#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace lacap {

struct GradCamResult {
  std::vector<double> heatmap;  // row-major, input resolution, values in [0,1]
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> channel_weights;
  int target_class = 0;
  std::string source_layer;
};

// Maps activations [N,C,h,w] to class scores [N,K].
using ClassifierHead = std::function<DiffArray(const DiffArray&)>;

// Grad-CAM on precomputed activations. The head is replayed on a detached
// copy, so the caller's graph is untouched. Targets default to argmax.
std::vector<GradCamResult> grad_cam(const DiffArray& activations, const ClassifierHead& head,
                                    std::size_t input_size, const std::optional<std::vector<int>>& targets = {},
                                    const std::string& source_layer = "");

// Convenience form running branch A of the encoder.
std::vector<GradCamResult> grad_cam(const Encoder& encoder, const DiffArray& images,
                                    const std::optional<std::vector<int>>& targets = {});

// Heatmaps resized to h x w and stacked as a constant [N,1,h,w].
DiffArray heatmap_batch(const std::vector<GradCamResult>& results, std::size_t height, std::size_t width);

struct CbamConfig {
  std::size_t reduction = 8;
  std::size_t kernel = 7;
  bool operator==(const CbamConfig&) const = default;
};

class Cbam {
 public:
  Cbam() = default;
  Cbam(const std::string& name, std::size_t channels, const CbamConfig& config, nn::Parameters& params,
       std::uint64_t seed);

  DiffArray operator()(const DiffArray& features) const;
  // [N,C,1,1]
  DiffArray channel_gate(const DiffArray& features) const;
  // [N,1,H,W]
  DiffArray spatial_gate(const DiffArray& features) const;

 private:
  nn::Linear fc1_, fc2_;
  nn::Conv spatial_;
};

// F' = cbam(F) * (1 + alpha * M); a null cbam skips the attention block.
// heatmaps: [N,1,H,W] matching F; alpha: [1].
DiffArray fuse(const DiffArray& features, const DiffArray& heatmaps, const Cbam* cbam, const DiffArray& alpha);

// Jet-style colour map blended over the image at the given opacity.
Image overlay_heatmap(const Image& image, const GradCamResult& cam, double opacity = 0.4);
// Original (left) beside its overlay (right), written as <out>/<id>_cam.png.
std::filesystem::path write_cam_panel(const Image& image, const GradCamResult& cam, const std::string& id,
                                      const std::filesystem::path& out_dir);

}  // namespace lacap
