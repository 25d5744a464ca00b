#include "lacap/lesionattn.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <stdexcept>

namespace lacap {

std::vector<GradCamResult> grad_cam(const DiffArray& activations, const ClassifierHead& head,
                                    std::size_t input_size, const std::optional<std::vector<int>>& targets,
                                    const std::string& source_layer) {
  if (activations.rank() != 4) throw diff::ShapeError("grad_cam", "activations must be [N,C,h,w]");
  const std::size_t n = activations.dim(0), c = activations.dim(1), h = activations.dim(2), w = activations.dim(3);
  diff::EnableGradGuard enable;
  DiffArray a = activations.detach();
  a.set_requires_grad(true);
  const DiffArray logits = head(a);
  if (logits.rank() != 2 || logits.dim(0) != n) throw diff::ShapeError("grad_cam", "head must return [N,K]");
  const std::size_t k = logits.dim(1);

  std::vector<int> cls(n);
  if (targets) {
    if (targets->size() != n) throw std::invalid_argument("grad_cam: one target per image required");
    cls = *targets;
  } else {
    for (std::size_t i = 0; i < n; ++i) {
      auto row = logits.data().subspan(i * k, k);
      cls[i] = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    }
  }
  diff::reduce_sum(diff::pick(logits, cls)).backward();
  const auto grad = a.grad();
  const auto act = a.data();
  if (!std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
    throw std::runtime_error("grad_cam: non-finite gradients");
  }

  std::vector<GradCamResult> out(n);
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < n; ++i) {
    auto& r = out[i];
    r.target_class = cls[i];
    r.source_layer = source_layer;
    r.channel_weights.assign(c, 0.0);
    std::vector<double> raw(hw, 0.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (i * c + ch) * hw;
      double sum = 0.0;
      for (std::size_t p = 0; p < hw; ++p) sum += grad[base + p];
      const double wk = sum / static_cast<double>(hw);
      r.channel_weights[ch] = wk;
      for (std::size_t p = 0; p < hw; ++p) raw[p] += wk * act[base + p];
    }
    for (auto& v : raw) v = std::max(v, 0.0);
    r.heatmap = nn::resize_map(raw, h, w, input_size, input_size);
    r.height = r.width = input_size;
    const double peak = *std::max_element(r.heatmap.begin(), r.heatmap.end());
    if (peak > 0.0) {
      for (auto& v : r.heatmap) v = std::min(v / peak, 1.0);
    } else {
      std::fill(r.heatmap.begin(), r.heatmap.end(), 0.0);
    }
  }
  return out;
}

std::vector<GradCamResult> grad_cam(const Encoder& encoder, const DiffArray& images,
                                    const std::optional<std::vector<int>>& targets) {
  FeatureMap a;
  {
    diff::NoGradGuard no_grad;
    a = encoder.trunk(images);
  }
  return grad_cam(
      a.values, [&](const DiffArray& x) { return encoder.head(x, true); }, encoder.config().input_size, targets,
      "branch " + a.branch + " " + a.layer);
}

DiffArray heatmap_batch(const std::vector<GradCamResult>& results, std::size_t height, std::size_t width) {
  std::vector<double> values;
  values.reserve(results.size() * height * width);
  for (const auto& r : results) {
    auto m = nn::resize_map(r.heatmap, r.height, r.width, height, width);
    values.insert(values.end(), m.begin(), m.end());
  }
  return DiffArray::from({results.size(), 1, height, width}, std::move(values));
}

Cbam::Cbam(const std::string& name, std::size_t channels, const CbamConfig& config, nn::Parameters& params,
           std::uint64_t seed) {
  if (config.reduction == 0 || channels % config.reduction != 0) {
    throw std::invalid_argument("cbam: reduction " + std::to_string(config.reduction) + " must divide " +
                                std::to_string(channels) + " channels");
  }
  if (config.kernel % 2 == 0) throw std::invalid_argument("cbam: kernel must be odd");
  fc1_ = nn::Linear::create(params, name + ".fc1", channels, channels / config.reduction, seed);
  fc2_ = nn::Linear::create(params, name + ".fc2", channels / config.reduction, channels, seed);
  spatial_ = nn::Conv::create(params, name + ".spatial", 2, 1, config.kernel, seed);
}

DiffArray Cbam::channel_gate(const DiffArray& f) const {
  const std::size_t n = f.dim(0), c = f.dim(1);
  auto mlp = [&](const DiffArray& pooled) { return fc2_(diff::relu(fc1_(diff::reshape(pooled, {n, c})))); };
  auto gate = diff::sigmoid(diff::add(mlp(diff::global_avg_pool2d(f)), mlp(diff::global_max_pool2d(f))));
  return diff::reshape(gate, {n, c, 1, 1});
}

DiffArray Cbam::spatial_gate(const DiffArray& f) const {
  auto pooled = diff::concat({diff::mean_axis(f, 1), diff::max_axis(f, 1)}, 1);
  return diff::sigmoid(spatial_(pooled));
}

DiffArray Cbam::operator()(const DiffArray& features) const {
  if (features.rank() != 4) throw diff::ShapeError("cbam", "features must be [N,C,H,W]");
  auto refined = diff::broadcast_mul(features, channel_gate(features));
  return diff::broadcast_mul(refined, spatial_gate(refined));
}

DiffArray fuse(const DiffArray& features, const DiffArray& heatmaps, const Cbam* cbam, const DiffArray& alpha) {
  const auto& fs = features.shape();
  const auto& ms = heatmaps.shape();
  if (ms.size() != 4 || ms[0] != fs[0] || ms[1] != 1 || ms[2] != fs[2] || ms[3] != fs[3]) {
    throw diff::ShapeError("fuse", fs, ms);
  }
  if (alpha.size() != 1 || !std::isfinite(alpha.item())) throw std::invalid_argument("fuse: alpha must be finite");
  DiffArray refined = cbam ? (*cbam)(features) : features;
  return diff::broadcast_mul(refined, diff::add_scalar(diff::mul(heatmaps, alpha), 1.0));
}

namespace {

// Piecewise-linear jet colour map.
std::array<double, 3> jet(double v) {
  auto channel = [&](double centre) { return std::clamp(1.5 - std::abs(4.0 * v - centre), 0.0, 1.0); };
  return {channel(3.0), channel(2.0), channel(1.0)};
}

}  // namespace

Image overlay_heatmap(const Image& image, const GradCamResult& cam, double opacity) {
  if (image.channels != 3) throw std::invalid_argument("overlay: RGB image required");
  auto heat = nn::resize_map(cam.heatmap, cam.height, cam.width, image.height, image.width);
  Image out = image;
  for (std::size_t p = 0; p < image.width * image.height; ++p) {
    const auto colour = jet(std::clamp(heat[p], 0.0, 1.0));
    for (std::size_t ch = 0; ch < 3; ++ch) {
      const double base = image.pixels[p * 3 + ch] / 255.0;
      const double v = (1.0 - opacity) * base + opacity * colour[ch];
      out.pixels[p * 3 + ch] = static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
    }
  }
  return out;
}

std::filesystem::path write_cam_panel(const Image& image, const GradCamResult& cam, const std::string& id,
                                      const std::filesystem::path& out_dir) {
  const Image overlay = overlay_heatmap(image, cam);
  Image panel{image.width * 2, image.height, 3, std::vector<std::uint8_t>(image.width * 2 * image.height * 3)};
  for (std::size_t y = 0; y < image.height; ++y) {
    std::copy_n(&image.pixels[y * image.width * 3], image.width * 3, &panel.pixels[y * panel.width * 3]);
    std::copy_n(&overlay.pixels[y * image.width * 3], image.width * 3,
                &panel.pixels[(y * panel.width + image.width) * 3]);
  }
  std::filesystem::create_directories(out_dir);
  const auto path = out_dir / (id + "_cam.png");
  write_png(panel, path);
  return path;
}

}  // namespace lacap
