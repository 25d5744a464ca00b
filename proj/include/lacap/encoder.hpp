#pragma once

// Dual-branch convolutional encoder. Branch A classifies MES and is the
// Grad-CAM source; branch B produces the feature map F that gets fused.

#include "lacap/diff.hpp"
#include "lacap/image.hpp"
#include "lacap/nn.hpp"

#include <random>
#include <string>
#include <vector>

namespace lacap {

using diff::DiffArray;

struct EncoderConfig {
  std::vector<std::size_t> channels = {8, 16, 32};
  std::size_t stages = 3;  // each stage halves the spatial size
  std::size_t input_size = 64;
  std::size_t num_classes = 4;
  bool share_stem = false;  // branch B reuses branch A's first stage
  bool residual = false;    // second conv per stage with a skip connection

  void validate() const;
  std::size_t output_size() const { return input_size >> stages; }
  std::size_t output_channels() const { return channels.back(); }
  bool operator==(const EncoderConfig&) const = default;
};

struct FeatureMap {
  DiffArray values;  // [N, C, H, W]
  std::string branch;
  std::string layer;
};

struct ClassifyOutput {
  DiffArray logits;  // [N, num_classes]
  FeatureMap activations;
};

// Stacks images into [N, 3, S, S].
DiffArray batch_images(const std::vector<Tensor3>& images);

class Encoder {
 public:
  // Registers parameters under "encoder.a.*" and "encoder.b.*".
  Encoder(const EncoderConfig& config, nn::Parameters& params, std::uint64_t seed);

  const EncoderConfig& config() const { return config_; }

  ClassifyOutput forward_classify(const DiffArray& images) const;
  FeatureMap forward_features(const DiffArray& images) const;

  // forward_classify split at the Grad-CAM layer: logits = head(trunk(x)).
  FeatureMap trunk(const DiffArray& images) const;
  // detach_params replays the head on constant weights so no parameter
  // gradient is touched (Grad-CAM).
  DiffArray head(const DiffArray& activations, bool detach_params = false) const;

  std::vector<std::string> branch_parameter_names(char branch) const;

 private:
  struct Stage {
    nn::Conv conv;
    nn::Conv conv2;  // residual only
  };

  DiffArray run_branch(const std::vector<Stage>& stages, const DiffArray& images) const;
  void check_input(const DiffArray& images) const;

  EncoderConfig config_;
  std::vector<Stage> branch_a_;
  std::vector<Stage> branch_b_;
  nn::Linear classifier_;
  std::vector<std::string> names_a_;
  std::vector<std::string> names_b_;
};

struct AugmentOptions {
  double flip_probability = 0.5;
  double brightness_min = 0.8;
  double brightness_max = 1.2;
  double crop_fraction = 0.9;  // 1.0 disables cropping
};

// Random horizontal flip, brightness scale clamped to [0,1], random crop
// resized back to the input size.
Tensor3 augment(const Tensor3& image, std::mt19937_64& rng, const AugmentOptions& options = {});

}  // namespace lacap
