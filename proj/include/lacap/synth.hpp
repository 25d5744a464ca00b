#pragma once

// Deterministic generator of endoscopy-like images with MES-correlated
// lesions, ground-truth lesion masks, metadata and template captions.
//
// MES -> findings table (randomness only inside the listed ranges):
//   MES 0  vessels visible, no lesions
//   MES 1  vessels partially drawn, 1-2 faint erythema patches (mild), low friability
//   MES 2  no vessels, 2-3 strong erythema patches (moderate|marked),
//          bleeding spots with probability 1/2, moderate friability
//   MES 3  no vessels, marked erythema, 1-2 ulcers (superficial|deep),
//          1-3 bleeding spots, high friability
// The mask is the union of lesion supports (erythema patches, bleeding spots,
// ulcers); vessels are not lesions. The background reddens slightly with MES.

#include "lacap/data.hpp"
#include "lacap/image.hpp"

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

namespace lacap {

struct SynthConfig {
  std::size_t image_size = 64;
  std::size_t samples_per_class = 25;
  std::uint64_t seed = 0;
  double noise_level = 0.2;

  void validate() const;
};

enum class LesionKind { erythema_patch, bleeding_spot, ulcer };

struct LesionSpec {
  LesionKind kind = LesionKind::erythema_patch;
  double center_x = 0.0;
  double center_y = 0.0;
  double radius = 0.0;
  double intensity = 0.0;
};

struct SynthSample {
  CaptionRecord record;
  Tensor3 image;  // 3 x S x S in [0,1]
  Image mask;     // 1 channel, 255 = lesion
  std::vector<LesionSpec> lesions;
};

std::string caption_template(const ClinicalMetadata& m);

// Stream for one record; parallel generation never changes output.
std::mt19937_64 record_rng(std::uint64_t seed, std::size_t record_index);

ClinicalMetadata sample_metadata(int mes, std::mt19937_64& rng);
SynthSample generate_sample(const SynthConfig& config, int mes, std::size_t index_in_class,
                            std::size_t record_index);
std::vector<SynthSample> generate_samples(const SynthConfig& config);

// Writes images/<id>.png, masks/<id>.png and manifest.jsonl under `out`.
std::vector<CaptionRecord> generate(const SynthConfig& config, const std::filesystem::path& out);

}  // namespace lacap
