#include "lacap/synth.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <numbers>

namespace lacap {

namespace fs = std::filesystem;

namespace {

constexpr int kPlacementRetries = 200;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

double uniform(std::mt19937_64& rng, double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(rng);
}

int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

using Rgb = std::array<double, 3>;

struct Canvas {
  std::size_t size;
  Tensor3 image;
  std::vector<std::uint8_t> mask;

  explicit Canvas(std::size_t s) : size(s), image{3, s, s, std::vector<double>(3 * s * s)}, mask(s * s, 0) {}

  void blend(std::size_t x, std::size_t y, const Rgb& color, double alpha) {
    alpha = std::clamp(alpha, 0.0, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
      double& v = image.at(c, y, x);
      v = v * (1.0 - alpha) + color[c] * alpha;
    }
  }
};

// Low-frequency value noise on a coarse lattice, bilinearly interpolated.
std::vector<double> value_noise(std::size_t size, std::size_t cells, std::mt19937_64& rng) {
  std::vector<double> lattice((cells + 1) * (cells + 1));
  for (auto& v : lattice) v = uniform(rng, -1.0, 1.0);
  std::vector<double> out(size * size);
  const double step = static_cast<double>(cells) / static_cast<double>(size);
  for (std::size_t y = 0; y < size; ++y) {
    const double fy = static_cast<double>(y) * step;
    const auto y0 = static_cast<std::size_t>(fy);
    const double ty = fy - static_cast<double>(y0);
    for (std::size_t x = 0; x < size; ++x) {
      const double fx = static_cast<double>(x) * step;
      const auto x0 = static_cast<std::size_t>(fx);
      const double tx = fx - static_cast<double>(x0);
      auto at = [&](std::size_t yy, std::size_t xx) { return lattice[yy * (cells + 1) + xx]; };
      const double top = at(y0, x0) * (1 - tx) + at(y0, x0 + 1) * tx;
      const double bottom = at(y0 + 1, x0) * (1 - tx) + at(y0 + 1, x0 + 1) * tx;
      out[y * size + x] = top * (1 - ty) + bottom * ty;
    }
  }
  return out;
}

// Diffuse hyperaemia: the mucosa gets redder and darker with MES.
void paint_background(Canvas& cv, int mes, std::mt19937_64& rng) {
  const std::size_t s = cv.size;
  const auto noise = value_noise(s, 4, rng);
  const double h = 0.04 * mes;
  const Rgb base = {0.86 - 0.25 * h + uniform(rng, -0.03, 0.03), 0.56 - h + uniform(rng, -0.03, 0.03),
                    0.54 - 0.8 * h + uniform(rng, -0.03, 0.03)};
  const double half = static_cast<double>(s) / 2.0;
  for (std::size_t y = 0; y < s; ++y) {
    for (std::size_t x = 0; x < s; ++x) {
      const double dx = (static_cast<double>(x) + 0.5 - half) / half;
      const double dy = (static_cast<double>(y) + 0.5 - half) / half;
      const double vignette = 1.0 - 0.3 * (dx * dx + dy * dy) / 2.0;
      const double n = 0.05 * noise[y * s + x];
      cv.image.at(0, y, x) = (base[0] + n) * vignette;
      cv.image.at(1, y, x) = (base[1] + 0.8 * n) * vignette;
      cv.image.at(2, y, x) = (base[2] + 0.8 * n) * vignette;
    }
  }
}

void stamp_disk(Canvas& cv, double cx, double cy, double r, const Rgb& color, double alpha) {
  const auto s = static_cast<double>(cv.size);
  const int x0 = std::max(0, static_cast<int>(std::floor(cx - r - 1)));
  const int x1 = std::min(static_cast<int>(s) - 1, static_cast<int>(std::ceil(cx + r + 1)));
  const int y0 = std::max(0, static_cast<int>(std::floor(cy - r - 1)));
  const int y1 = std::min(static_cast<int>(s) - 1, static_cast<int>(std::ceil(cy + r + 1)));
  for (int y = y0; y <= y1; ++y) {
    for (int x = x0; x <= x1; ++x) {
      const double d = std::hypot(x + 0.5 - cx, y + 0.5 - cy);
      const double cover = std::clamp(r + 0.5 - d, 0.0, 1.0);
      if (cover > 0) cv.blend(static_cast<std::size_t>(x), static_cast<std::size_t>(y), color, alpha * cover);
    }
  }
}

// A wandering vessel drawn as a chain of soft disks.
void draw_vessel(Canvas& cv, std::mt19937_64& rng, double length_fraction, double alpha) {
  const double s = static_cast<double>(cv.size);
  const double scale = s / 64.0;
  double x = uniform(rng, 0.1 * s, 0.9 * s);
  double y = uniform(rng, 0.1 * s, 0.9 * s);
  double heading = uniform(rng, 0.0, 2.0 * std::numbers::pi);
  const int steps = static_cast<int>(length_fraction * s / (0.5 * scale));
  const Rgb color = {0.50, 0.13, 0.20};
  const double width = uniform(rng, 0.55, 0.9) * scale;
  for (int i = 0; i < steps; ++i) {
    heading += uniform(rng, -0.35, 0.35);
    x += std::cos(heading) * 0.5 * scale;
    y += std::sin(heading) * 0.5 * scale;
    if (x < 0 || y < 0 || x >= s || y >= s) break;
    stamp_disk(cv, x, y, width, color, alpha * 0.35);
  }
}

void mark_disk(Canvas& cv, double cx, double cy, double r) {
  const int s = static_cast<int>(cv.size);
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      if (std::hypot(x + 0.5 - cx, y + 0.5 - cy) <= r) cv.mask[static_cast<std::size_t>(y * s + x)] = 255;
    }
  }
}

void paint_lesion(Canvas& cv, const LesionSpec& l) {
  const int s = static_cast<int>(cv.size);
  switch (l.kind) {
    case LesionKind::erythema_patch: {
      const Rgb red = {0.93, 0.20, 0.22};
      const double sigma = l.radius / 2.0;
      for (int y = 0; y < s; ++y) {
        for (int x = 0; x < s; ++x) {
          const double d = std::hypot(x + 0.5 - l.center_x, y + 0.5 - l.center_y);
          if (d > l.radius) continue;
          const double a = l.intensity * std::exp(-d * d / (2.0 * sigma * sigma));
          cv.blend(static_cast<std::size_t>(x), static_cast<std::size_t>(y), red, a);
        }
      }
      break;
    }
    case LesionKind::bleeding_spot:
      stamp_disk(cv, l.center_x, l.center_y, l.radius, {0.42, 0.02, 0.05}, l.intensity);
      break;
    case LesionKind::ulcer: {
      stamp_disk(cv, l.center_x, l.center_y, l.radius, {0.33, 0.09, 0.10}, l.intensity);
      stamp_disk(cv, l.center_x, l.center_y, l.radius * 0.7, {0.96, 0.93, 0.78}, l.intensity);
      break;
    }
  }
  mark_disk(cv, l.center_x, l.center_y, l.radius);
}

// Rejection-samples a lesion center so that it lies inside the image and does
// not overlap previously placed discrete lesions (spots, ulcers).
LesionSpec place(std::mt19937_64& rng, std::size_t size, LesionKind kind, double radius, double intensity,
                 const std::vector<LesionSpec>& existing, const std::string& id) {
  const double s = static_cast<double>(size);
  for (int attempt = 0; attempt < kPlacementRetries; ++attempt) {
    LesionSpec l{kind, uniform(rng, radius + 1.0, s - radius - 1.0), uniform(rng, radius + 1.0, s - radius - 1.0),
                 radius, intensity};
    bool clear = true;
    for (const auto& e : existing) {
      if (kind == LesionKind::erythema_patch || e.kind == LesionKind::erythema_patch) continue;
      if (std::hypot(l.center_x - e.center_x, l.center_y - e.center_y) < l.radius + e.radius + 1.0) clear = false;
    }
    if (clear) return l;
  }
  throw DataError("record " + id + ": lesion placement failed after " + std::to_string(kPlacementRetries) + " retries");
}

}  // namespace

void SynthConfig::validate() const {
  if (image_size < 32) throw std::invalid_argument("synth: image_size must be >= 32");
  if (samples_per_class < 4) throw std::invalid_argument("synth: samples_per_class must be >= 4");
  if (!(noise_level >= 0.0 && noise_level <= 1.0)) throw std::invalid_argument("synth: noise_level must be in [0,1]");
}

std::string caption_template(const ClinicalMetadata& m) {
  static constexpr std::array<const char*, 4> kSeverity = {"normal mucosal surface", "mild inflammation",
                                                          "moderate inflammation", "severe inflammation"};
  std::string vascular;
  switch (m.vascular_pattern) {
    case VascularPattern::visible: vascular = "visible vascular pattern"; break;
    case VascularPattern::partially_obliterated: vascular = "partial obliteration of the vascular pattern"; break;
    case VascularPattern::obliterated: vascular = "obliteration of the vascular pattern"; break;
  }
  std::vector<std::string> mucosa;
  if (m.erythema != Erythema::none) mucosa.push_back(std::string(to_string(m.erythema)) + " erythema");
  if (m.friability != Friability::none) mucosa.push_back(std::string(to_string(m.friability)) + " friability");
  const bool any_finding = !mucosa.empty() || m.bleeding || m.ulceration != Ulceration::none;
  const std::string severity = kSeverity[static_cast<std::size_t>(std::clamp(m.mes, 0, 3))];
  if (!any_finding) return severity + " with " + vascular;

  std::string out = severity;
  if (!mucosa.empty()) {
    out += "; mucosa shows " + mucosa[0];
    for (std::size_t i = 1; i < mucosa.size(); ++i) out += " and " + mucosa[i];
  }
  out += "; " + vascular;
  if (m.bleeding) out += "; spontaneous bleeding";
  if (m.ulceration != Ulceration::none) out += "; " + std::string(to_string(m.ulceration)) + " ulcers";
  return out;
}

std::mt19937_64 record_rng(std::uint64_t seed, std::size_t record_index) {
  return std::mt19937_64(splitmix64(seed ^ static_cast<std::uint64_t>(record_index)));
}

ClinicalMetadata sample_metadata(int mes, std::mt19937_64& rng) {
  ClinicalMetadata m;
  m.mes = mes;
  switch (mes) {
    case 0:
      break;
    case 1:
      m.vascular_pattern = VascularPattern::partially_obliterated;
      m.erythema = Erythema::mild;
      m.friability = Friability::low;
      break;
    case 2:
      m.vascular_pattern = VascularPattern::obliterated;
      m.erythema = uniform_int(rng, 0, 1) ? Erythema::marked : Erythema::moderate;
      m.friability = Friability::moderate;
      m.bleeding = uniform_int(rng, 0, 1) == 1;
      break;
    case 3:
      m.vascular_pattern = VascularPattern::obliterated;
      m.erythema = Erythema::marked;
      m.friability = Friability::high;
      m.bleeding = true;
      m.ulceration = uniform_int(rng, 0, 1) ? Ulceration::deep : Ulceration::superficial;
      break;
    default:
      throw DataError("sample_metadata: MES " + std::to_string(mes) + " out of range");
  }
  return m;
}

SynthSample generate_sample(const SynthConfig& config, int mes, std::size_t index_in_class,
                            std::size_t record_index) {
  config.validate();
  auto rng = record_rng(config.seed, record_index);
  SynthSample out;
  char id[32];
  std::snprintf(id, sizeof id, "mes%d_%04zu", mes, index_in_class);
  out.record.id = id;
  out.record.image_path = "images/" + out.record.id + ".png";
  out.record.lesion_mask_path = "masks/" + out.record.id + ".png";
  out.record.metadata = sample_metadata(mes, rng);
  out.record.caption = caption_template(out.record.metadata);
  const auto& m = out.record.metadata;

  const std::size_t s = config.image_size;
  const double k = static_cast<double>(s) / 64.0;
  Canvas cv(s);
  paint_background(cv, mes, rng);

  if (m.vascular_pattern == VascularPattern::visible) {
    const int n = uniform_int(rng, 5, 7);
    for (int i = 0; i < n; ++i) draw_vessel(cv, rng, uniform(rng, 0.7, 1.1), 1.0);
  } else if (m.vascular_pattern == VascularPattern::partially_obliterated) {
    const int n = uniform_int(rng, 2, 3);
    for (int i = 0; i < n; ++i) draw_vessel(cv, rng, uniform(rng, 0.25, 0.45), 0.6);
  }

  auto& lesions = out.lesions;
  auto add = [&](LesionKind kind, double radius, double intensity) {
    lesions.push_back(place(rng, s, kind, radius * k, intensity, lesions, out.record.id));
  };
  if (m.erythema != Erythema::none) {
    int count = 1;
    double lo = 0.3, hi = 0.4, rlo = 7, rhi = 10;
    if (m.erythema == Erythema::mild) {
      count = uniform_int(rng, 1, 2);
    } else if (m.erythema == Erythema::moderate) {
      count = uniform_int(rng, 2, 3), lo = 0.55, hi = 0.65, rlo = 9, rhi = 13;
    } else {
      count = mes == 3 ? uniform_int(rng, 1, 2) : uniform_int(rng, 2, 3), lo = 0.8, hi = 0.9, rlo = 9, rhi = 13;
    }
    for (int i = 0; i < count; ++i) add(LesionKind::erythema_patch, uniform(rng, rlo, rhi), uniform(rng, lo, hi));
  }
  if (m.ulceration != Ulceration::none) {
    const bool deep = m.ulceration == Ulceration::deep;
    const int count = uniform_int(rng, 1, 2);
    for (int i = 0; i < count; ++i) {
      add(LesionKind::ulcer, deep ? uniform(rng, 7.0, 9.0) : uniform(rng, 4.0, 5.5), 1.0);
    }
  }
  if (m.bleeding) {
    const int count = uniform_int(rng, 1, 3);
    for (int i = 0; i < count; ++i) add(LesionKind::bleeding_spot, uniform(rng, 2.5, 4.0), uniform(rng, 0.85, 1.0));
  }
  for (const auto& l : lesions) paint_lesion(cv, l);

  std::normal_distribution<double> pixel_noise(0.0, 0.04 * config.noise_level);
  for (auto& v : cv.image.values) v = std::clamp(v + pixel_noise(rng), 0.0, 1.0);

  // Quantize through 8 bits so in-memory samples equal what load_dataset reads back.
  out.image = to_tensor(to_image(cv.image));
  out.mask = Image{s, s, 1, std::move(cv.mask)};
  return out;
}

std::vector<SynthSample> generate_samples(const SynthConfig& config) {
  config.validate();
  std::vector<SynthSample> out;
  out.reserve(kNumMesClasses * config.samples_per_class);
  std::size_t index = 0;
  for (int mes = 0; mes < kNumMesClasses; ++mes) {
    for (std::size_t i = 0; i < config.samples_per_class; ++i) out.push_back(generate_sample(config, mes, i, index++));
  }
  return out;
}

std::vector<CaptionRecord> generate(const SynthConfig& config, const fs::path& out) {
  auto samples = generate_samples(config);
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  std::vector<CaptionRecord> records;
  records.reserve(samples.size());
  for (auto& s : samples) {
    write_png(to_image(s.image), out / s.record.image_path);
    write_png(s.mask, out / *s.record.lesion_mask_path);
    records.push_back(s.record);
  }
  save_dataset(records, out);
  return records;
}

}  // namespace lacap
