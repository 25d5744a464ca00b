#include "lacap/pipeline.hpp"

#include <algorithm>
#include <stdexcept>

namespace lacap {

namespace {

const std::vector<std::pair<Variant, std::string_view>> kVariantNames = {
    {Variant::full, "full"},           {Variant::no_cbam, "no_cbam"},     {Variant::no_gradcam, "no_gradcam"},
    {Variant::no_prompts, "no_prompts"}, {Variant::no_fusion, "no_fusion"}, {Variant::small_backbone, "small_backbone"},
};

}  // namespace

std::string_view to_string(Variant v) {
  for (const auto& [variant, name] : kVariantNames) {
    if (variant == v) return name;
  }
  throw std::invalid_argument("unknown variant");
}

std::optional<Variant> parse_variant(std::string_view s) {
  for (const auto& [variant, name] : kVariantNames) {
    if (name == s) return variant;
  }
  return std::nullopt;
}

const std::vector<Variant>& all_variants() {
  static const std::vector<Variant> all = {Variant::full,       Variant::no_cbam,   Variant::no_gradcam,
                                           Variant::no_prompts, Variant::no_fusion, Variant::small_backbone};
  return all;
}

std::string_view display_name(Variant v) {
  switch (v) {
    case Variant::full: return "Full model";
    case Variant::no_cbam: return "w/o CBAM";
    case Variant::no_gradcam: return "w/o Grad-CAM";
    case Variant::no_prompts: return "w/o Clinical Prompts";
    case Variant::no_fusion: return "No Attention Fusion";
    case Variant::small_backbone: return "Small backbone w/o CBAM";
  }
  throw std::invalid_argument("unknown variant");
}

VariantWiring wiring(Variant v) {
  switch (v) {
    case Variant::full: return {};
    case Variant::no_cbam: return {.cbam = false};
    case Variant::no_gradcam: return {.gradcam = false};
    case Variant::no_prompts: return {.prompts = false};
    case Variant::no_fusion: return {.cbam = false, .gradcam = false, .fusion = false};
    case Variant::small_backbone: return {.cbam = false};
  }
  throw std::invalid_argument("unknown variant");
}

void ModelConfig::validate() const {
  encoder.validate();
  decoder.validate();
  if (variant == Variant::small_backbone &&
      (encoder.channels != std::vector<std::size_t>{4, 8} || encoder.stages != 2)) {
    throw std::invalid_argument("small_backbone requires channels [4,8] and 2 stages");
  }
}

nlohmann::json ModelConfig::to_json() const {
  return {
      {"variant", std::string(to_string(variant))},
      {"encoder",
       {{"channels", encoder.channels},
        {"stages", encoder.stages},
        {"input_size", encoder.input_size},
        {"num_classes", encoder.num_classes},
        {"share_stem", encoder.share_stem},
        {"residual", encoder.residual}}},
      {"cbam", {{"reduction", cbam.reduction}, {"kernel", cbam.kernel}}},
      {"decoder",
       {{"d_model", decoder.d_model},
        {"heads", decoder.heads},
        {"encoder_layers", decoder.encoder_layers},
        {"decoder_layers", decoder.decoder_layers},
        {"ffn_dim", decoder.ffn_dim},
        {"max_len", decoder.max_len},
        {"vocab_size", decoder.vocab_size}}},
      {"init_seed", init_seed},
      {"gradcam_ground_truth", gradcam_ground_truth},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  const auto v = parse_variant(j.at("variant").get<std::string>());
  if (!v) throw std::invalid_argument("unknown variant " + j.at("variant").get<std::string>());
  c.variant = *v;
  const auto& e = j.at("encoder");
  c.encoder.channels = e.at("channels").get<std::vector<std::size_t>>();
  c.encoder.stages = e.at("stages");
  c.encoder.input_size = e.at("input_size");
  c.encoder.num_classes = e.at("num_classes");
  c.encoder.share_stem = e.at("share_stem");
  c.encoder.residual = e.at("residual");
  c.cbam.reduction = j.at("cbam").at("reduction");
  c.cbam.kernel = j.at("cbam").at("kernel");
  const auto& d = j.at("decoder");
  c.decoder.d_model = d.at("d_model");
  c.decoder.heads = d.at("heads");
  c.decoder.encoder_layers = d.at("encoder_layers");
  c.decoder.decoder_layers = d.at("decoder_layers");
  c.decoder.ffn_dim = d.at("ffn_dim");
  c.decoder.max_len = d.at("max_len");
  c.decoder.vocab_size = d.at("vocab_size");
  c.init_seed = j.at("init_seed");
  c.gradcam_ground_truth = j.at("gradcam_ground_truth");
  c.validate();
  return c;
}

ModelConfig make_model_config(Variant variant, std::size_t image_size, std::size_t vocab_size,
                              std::uint64_t init_seed) {
  ModelConfig c;
  c.variant = variant;
  c.encoder.input_size = image_size;
  if (variant == Variant::small_backbone) {
    c.encoder.channels = {4, 8};
    c.encoder.stages = 2;
  }
  c.decoder.vocab_size = vocab_size;
  c.init_seed = init_seed;
  c.validate();
  return c;
}

Model::Model(const ModelConfig& config, Vocabulary vocabulary)
    : config_(config),
      vocabulary_(std::move(vocabulary)),
      encoder_(config.encoder, params_, config.init_seed),
      captioner_(config.decoder, config.encoder.output_channels(), wiring(config.variant).prompts, params_,
                 config.init_seed) {
  config_.validate();
  if (config_.decoder.vocab_size != vocabulary_.size()) {
    throw std::invalid_argument("model: decoder vocab_size " + std::to_string(config_.decoder.vocab_size) +
                                " does not match vocabulary of " + std::to_string(vocabulary_.size()));
  }
  const auto w = wiring(config_.variant);
  if (w.cbam) cbam_.emplace("fusion.cbam", config_.encoder.output_channels(), config_.cbam, params_, config_.init_seed);
  if (w.gradcam) alpha_ = params_.add_constant("fusion.alpha", {1}, 0.0);
}

std::vector<int> Model::prompt_tokens(const ClinicalMetadata& m) const {
  if (!wiring(config_.variant).prompts) return {};
  return vocabulary_.encode(build_prompt(m));
}

DiffArray Model::fused_features(const DiffArray& images, const FeatureMap& activations,
                                const std::optional<std::vector<int>>& targets,
                                std::vector<GradCamResult>& cams) const {
  const auto w = wiring(config_.variant);
  const DiffArray f = encoder_.forward_features(images).values;
  if (!w.fusion) return f;
  if (!w.gradcam) return cbam_ ? (*cbam_)(f) : f;
  cams = grad_cam(
      activations.values, [&](const DiffArray& a) { return encoder_.head(a, true); }, config_.encoder.input_size,
      targets, "branch " + activations.branch + " " + activations.layer);
  const auto m = heatmap_batch(cams, f.dim(2), f.dim(3));
  return fuse(f, m, cbam_ ? &*cbam_ : nullptr, alpha_);
}

DecoderMemory Model::memory(const DiffArray& fused, const std::vector<ClinicalMetadata>& metadata) const {
  std::vector<std::vector<int>> prompts;
  for (const auto& m : metadata) prompts.push_back(prompt_tokens(m));
  return captioner_.memory(prompts, captioner_.project_visual(fused));
}

ForwardResult Model::forward(const Batch& batch, double lambda) const {
  const std::size_t n = batch.images.size();
  if (batch.metadata.size() != n || batch.captions.size() != n) throw std::invalid_argument("forward: ragged batch");
  ForwardResult out;
  const auto x = batch_images(batch.images);
  auto cls = encoder_.forward_classify(x);
  out.mes_logits = cls.logits;
  std::vector<int> labels;
  for (const auto& m : batch.metadata) labels.push_back(m.mes);
  std::optional<std::vector<int>> targets;
  if (config_.gradcam_ground_truth) targets = labels;
  out.fused = fused_features(x, cls.activations, targets, out.cams);
  out.caption_loss = captioner_.caption_loss(memory(out.fused, batch.metadata), batch.captions);
  out.mes_loss = diff::cross_entropy(cls.logits, labels);
  out.total = diff::add(out.caption_loss, diff::scale(out.mes_loss, lambda));
  return out;
}

std::vector<Prediction> Model::predict(const std::vector<Tensor3>& images,
                                       const std::vector<ClinicalMetadata>& metadata,
                                       const GenerateOptions& options) const {
  diff::NoGradGuard no_grad;
  const auto x = batch_images(images);
  const auto cls = encoder_.forward_classify(x);
  std::vector<GradCamResult> cams;
  const auto fused = fused_features(x, cls.activations, std::nullopt, cams);
  if (cams.empty()) {
    cams = grad_cam(
        cls.activations.values, [&](const DiffArray& a) { return encoder_.head(a, true); },
        config_.encoder.input_size, std::nullopt, "branch " + cls.activations.branch + " " + cls.activations.layer);
  }
  const auto generated = captioner_.generate(memory(fused, metadata), options);
  std::vector<Prediction> out(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) {
    auto row = cls.logits.data().subspan(i * 4, 4);
    out[i].mes = static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin());
    out[i].prompt = wiring(config_.variant).prompts ? build_prompt(metadata[i]) : "";
    out[i].tokens = generated[i].tokens;
    out[i].caption = vocabulary_.decode(generated[i].tokens);
    out[i].logprob = generated[i].logprob;
    out[i].truncated = generated[i].truncated;
    out[i].cam = std::move(cams[i]);
  }
  return out;
}

}  // namespace lacap
