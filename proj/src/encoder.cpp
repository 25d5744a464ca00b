#include "lacap/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace lacap {

void EncoderConfig::validate() const {
  if (stages == 0 || channels.size() != stages) {
    throw std::invalid_argument("encoder: channels must list one entry per stage");
  }
  if (std::any_of(channels.begin(), channels.end(), [](std::size_t c) { return c == 0; })) {
    throw std::invalid_argument("encoder: zero channel count");
  }
  if (num_classes != 4) throw std::invalid_argument("encoder: num_classes must be 4");
  if (input_size % (std::size_t{1} << stages) != 0 || output_size() < 4) {
    throw std::invalid_argument("encoder: input_size " + std::to_string(input_size) + " with " +
                                std::to_string(stages) + " stages leaves a final map smaller than 4");
  }
}

DiffArray batch_images(const std::vector<Tensor3>& images) {
  if (images.empty()) throw std::invalid_argument("batch_images: empty batch");
  const auto& first = images.front();
  std::vector<double> values;
  values.reserve(images.size() * first.values.size());
  for (const auto& im : images) {
    if (im.channels != first.channels || im.height != first.height || im.width != first.width) {
      throw std::invalid_argument("batch_images: images differ in shape");
    }
    values.insert(values.end(), im.values.begin(), im.values.end());
  }
  return DiffArray::from({images.size(), first.channels, first.height, first.width}, std::move(values));
}

Encoder::Encoder(const EncoderConfig& config, nn::Parameters& params, std::uint64_t seed) : config_(config) {
  config_.validate();
  auto build = [&](char branch, std::vector<Stage>& out, std::vector<std::string>& names) {
    std::size_t in = 3;
    for (std::size_t s = 0; s < config_.stages; ++s) {
      const std::string prefix = std::string("encoder.") + branch + ".stage" + std::to_string(s);
      Stage st;
      if (branch == 'b' && s == 0 && config_.share_stem) {
        st = branch_a_[0];
      } else {
        st.conv = nn::Conv::create(params, prefix + ".conv", in, config_.channels[s], 3, seed);
        names.push_back(prefix + ".conv.weight");
        names.push_back(prefix + ".conv.bias");
        if (config_.residual) {
          st.conv2 = nn::Conv::create(params, prefix + ".conv2", config_.channels[s], config_.channels[s], 3, seed);
          names.push_back(prefix + ".conv2.weight");
          names.push_back(prefix + ".conv2.bias");
        }
      }
      out.push_back(st);
      in = config_.channels[s];
    }
  };
  build('a', branch_a_, names_a_);
  build('b', branch_b_, names_b_);
  classifier_ = nn::Linear::create(params, "encoder.a.classifier", config_.output_channels(), config_.num_classes, seed);
  names_a_.push_back("encoder.a.classifier.weight");
  names_a_.push_back("encoder.a.classifier.bias");
}

void Encoder::check_input(const DiffArray& images) const {
  const auto& s = images.shape();
  if (s.size() != 4 || s[1] != 3 || s[2] != config_.input_size || s[3] != config_.input_size) {
    throw diff::ShapeError("encoder", "expected [N,3," + std::to_string(config_.input_size) + "," +
                                          std::to_string(config_.input_size) + "], got " + diff::shape_str(s));
  }
}

DiffArray Encoder::run_branch(const std::vector<Stage>& stages, const DiffArray& images) const {
  check_input(images);
  DiffArray x = images;
  for (const auto& st : stages) {
    DiffArray h = diff::relu(st.conv(x));
    if (config_.residual) h = diff::relu(diff::add(h, st.conv2(h)));
    x = diff::max_pool2d(h, 2, 2);
  }
  return x;
}

FeatureMap Encoder::trunk(const DiffArray& images) const {
  return {run_branch(branch_a_, images), "a", "stage" + std::to_string(config_.stages - 1)};
}

DiffArray Encoder::head(const DiffArray& activations, bool detach_params) const {
  const std::size_t n = activations.dim(0), c = activations.dim(1);
  auto pooled = diff::reshape(diff::global_avg_pool2d(activations), {n, c});
  if (detach_params) return nn::Linear{classifier_.weight.detach(), classifier_.bias.detach()}(pooled);
  return classifier_(pooled);
}

ClassifyOutput Encoder::forward_classify(const DiffArray& images) const {
  auto a = trunk(images);
  auto logits = head(a.values);
  return {logits, std::move(a)};
}

FeatureMap Encoder::forward_features(const DiffArray& images) const {
  return {run_branch(branch_b_, images), "b", "stage" + std::to_string(config_.stages - 1)};
}

std::vector<std::string> Encoder::branch_parameter_names(char branch) const {
  if (branch == 'a') return names_a_;
  if (branch == 'b') return names_b_;
  throw std::invalid_argument("encoder: branch must be 'a' or 'b'");
}

Tensor3 augment(const Tensor3& image, std::mt19937_64& rng, const AugmentOptions& options) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor3 out = unit(rng) < options.flip_probability ? flip_horizontal(image) : image;
  const double brightness = options.brightness_min + (options.brightness_max - options.brightness_min) * unit(rng);
  for (auto& v : out.values) v = std::clamp(v * brightness, 0.0, 1.0);
  const auto ch = static_cast<std::size_t>(std::lround(options.crop_fraction * static_cast<double>(out.height)));
  const auto cw = static_cast<std::size_t>(std::lround(options.crop_fraction * static_cast<double>(out.width)));
  if (ch < out.height || cw < out.width) {
    std::uniform_int_distribution<std::size_t> top(0, out.height - ch), left(0, out.width - cw);
    const std::size_t t = top(rng), l = left(rng);
    out = resize_bilinear(crop(out, t, l, ch, cw), image.height, image.width);
  }
  return out;
}

}  // namespace lacap
