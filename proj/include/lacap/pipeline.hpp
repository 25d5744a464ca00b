#pragma once

// The wired captioning model: encoder, Grad-CAM, fusion and captioner, with
// the ablation variants expressed as wiring switches.

#include "lacap/captioner.hpp"
#include "lacap/data.hpp"
#include "lacap/encoder.hpp"
#include "lacap/lesionattn.hpp"

#include <json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace lacap {

enum class Variant { full, no_cbam, no_gradcam, no_prompts, no_fusion, small_backbone };

std::string_view to_string(Variant v);
std::optional<Variant> parse_variant(std::string_view s);
const std::vector<Variant>& all_variants();
// Row label in the ablation table.
std::string_view display_name(Variant v);

struct VariantWiring {
  bool cbam = true;
  bool gradcam = true;  // heatmap modulation with learnable alpha
  bool prompts = true;
  bool fusion = true;   // false: raw F goes straight to the projection
};
VariantWiring wiring(Variant v);

struct ModelConfig {
  Variant variant = Variant::full;
  EncoderConfig encoder;
  CbamConfig cbam;
  DecoderConfig decoder;
  std::uint64_t init_seed = 0;
  // Grad-CAM target during training: ground truth (true) or prediction.
  bool gradcam_ground_truth = true;

  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
  bool operator==(const ModelConfig&) const = default;
};

// Applies the variant's architecture changes to base settings.
ModelConfig make_model_config(Variant variant, std::size_t image_size, std::size_t vocab_size,
                              std::uint64_t init_seed = 0);

struct Batch {
  std::vector<Tensor3> images;
  std::vector<ClinicalMetadata> metadata;
  std::vector<std::vector<int>> captions;  // token ids, no BOS/EOS
};

struct ForwardResult {
  DiffArray total;
  DiffArray caption_loss;
  DiffArray mes_loss;
  DiffArray mes_logits;  // [N,4]
  DiffArray fused;       // visual input to the projection
  std::vector<GradCamResult> cams;  // empty when the variant skips Grad-CAM
};

struct Prediction {
  int mes = 0;
  std::string prompt;
  std::string caption;
  std::vector<int> tokens;
  double logprob = 0.0;
  bool truncated = false;
  GradCamResult cam;  // predicted-class Grad-CAM, computed for every variant
};

class Model {
 public:
  Model(const ModelConfig& config, Vocabulary vocabulary);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return config_; }
  const Vocabulary& vocabulary() const { return vocabulary_; }
  nn::Parameters& parameters() { return params_; }
  const nn::Parameters& parameters() const { return params_; }
  const Encoder& encoder() const { return encoder_; }
  const Captioner& captioner() const { return captioner_; }

  std::vector<int> prompt_tokens(const ClinicalMetadata& m) const;

  // Teacher-forced forward pass with loss = caption + lambda * mes.
  ForwardResult forward(const Batch& batch, double lambda) const;
  std::vector<Prediction> predict(const std::vector<Tensor3>& images, const std::vector<ClinicalMetadata>& metadata,
                                  const GenerateOptions& options = {}) const;

 private:
  // Fused features per the variant wiring; cams filled when Grad-CAM runs.
  DiffArray fused_features(const DiffArray& images, const FeatureMap& activations,
                           const std::optional<std::vector<int>>& targets, std::vector<GradCamResult>& cams) const;
  DecoderMemory memory(const DiffArray& fused, const std::vector<ClinicalMetadata>& metadata) const;

  ModelConfig config_;
  Vocabulary vocabulary_;
  nn::Parameters params_;
  Encoder encoder_;
  std::optional<Cbam> cbam_;
  DiffArray alpha_;
  Captioner captioner_;
};

}  // namespace lacap
