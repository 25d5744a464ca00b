#include "lacap/synth.hpp"
#include "lacap/tolerances.hpp"
#include "lacap/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

using namespace lacap;
namespace fs = std::filesystem;

namespace {

struct Toy {
  std::vector<Example> examples;
  Vocabulary vocab;
};

Toy toy_data(std::size_t per_class = 4, std::uint64_t seed = 3) {
  SynthConfig c;
  c.image_size = 32;
  c.samples_per_class = per_class;
  c.seed = seed;
  Toy t;
  auto samples = generate_samples(c);
  std::vector<CaptionRecord> records;
  for (const auto& s : samples) records.push_back(s.record);
  t.vocab = build_vocabulary(records);
  for (auto& s : samples) {
    Example e;
    e.record = s.record;
    e.image = s.image;
    std::vector<double> mask(s.mask.pixels.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = s.mask.pixels[i] > 127 ? 1.0 : 0.0;
    e.mask = mask;
    e.caption = t.vocab.encode(s.record.caption);
    t.examples.push_back(std::move(e));
  }
  return t;
}

Batch batch_of(const std::vector<Example>& ex, std::size_t n) {
  Batch b;
  for (std::size_t i = 0; i < n; ++i) {
    b.images.push_back(ex[i].image);
    b.metadata.push_back(ex[i].record.metadata);
    b.captions.push_back(ex[i].caption);
  }
  return b;
}

std::set<std::string> names(const Model& m) {
  std::set<std::string> out;
  for (const auto& [name, t] : m.parameters().tensors()) out.insert(name);
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool same_values(const DiffArray& a, const DiffArray& b) {
  return a.shape() == b.shape() && std::equal(a.data().begin(), a.data().end(), b.data().begin());
}

}  // namespace

TEST(Loss, BreakdownIdentity) {
  auto toy = toy_data();
  Model model(make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab);
  const auto batch = batch_of(toy.examples, 6);
  for (double lambda : {0.0, 0.2, 1.0, 3.7}) {
    const auto r = model.forward(batch, lambda);
    EXPECT_NEAR(r.total.item(), r.caption_loss.item() + lambda * r.mes_loss.item(), tol::kLossIdentity);
  }
}

TEST(Loss, ZeroLambdaGivesClassifierNoGradient) {
  auto toy = toy_data();
  Model model(make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab);
  model.forward(batch_of(toy.examples, 4), 0.0).total.backward();
  for (const auto& name : model.encoder().branch_parameter_names('a')) {
    const auto& p = model.parameters().at(name);
    if (!p.has_grad()) continue;
    for (double g : p.grad()) ASSERT_EQ(g, 0.0) << name;
  }
}

TEST(Optimizer, ZeroLearningRateChangesNothing) {
  auto toy = toy_data();
  Model model(make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab);
  std::map<std::string, std::vector<double>> before;
  for (const auto& [name, t] : model.parameters().tensors()) before[name].assign(t.data().begin(), t.data().end());
  model.forward(batch_of(toy.examples, 4), 0.2).total.backward();
  Adam adam(0.0);
  adam.step(model.parameters());
  for (const auto& [name, t] : model.parameters().tensors()) {
    EXPECT_TRUE(std::equal(t.data().begin(), t.data().end(), before[name].begin())) << name;
  }
}

TEST(Optimizer, FirstAdamStepMovesBySignedLearningRate) {
  nn::Parameters params;
  auto& p = params.add_constant("p", {3}, 1.0);
  auto loss = diff::reduce_sum(diff::mul(p, DiffArray::from({3}, {2.0, -0.5, 0.0})));
  loss.backward();
  Adam adam(0.1);
  adam.step(params);
  EXPECT_NEAR(p.at(0), 1.0 - 0.1 * 2.0 / (2.0 + 1e-8), 1e-15);
  EXPECT_NEAR(p.at(1), 1.0 + 0.1 * 0.5 / (0.5 + 1e-8), 1e-15);
  EXPECT_EQ(p.at(2), 1.0);
}

TEST(Optimizer, ClippingBoundsGlobalNorm) {
  nn::Parameters params;
  auto& a = params.add_constant("a", {2}, 0.0);
  auto& b = params.add_constant("b", {1}, 0.0);
  diff::add(diff::reduce_sum(diff::scale(a, 3.0)), diff::reduce_sum(diff::scale(b, 4.0))).backward();
  // |(3,3,4)| = sqrt(34)
  EXPECT_NEAR(clip_gradients(params, 1.0), std::sqrt(34.0), 1e-12);
  double sq = 0.0;
  for (double g : a.grad()) sq += g * g;
  for (double g : b.grad()) sq += g * g;
  EXPECT_NEAR(std::sqrt(sq), 1.0, 1e-12);
  EXPECT_NEAR(clip_gradients(params, 5.0), 1.0, 1e-12);
}

TEST(Variants, ParameterSetsDifferByNamedComponent) {
  auto toy = toy_data();
  auto build = [&](Variant v) { return std::make_unique<Model>(make_model_config(v, 32, toy.vocab.size()), toy.vocab); };
  const auto full = names(*build(Variant::full));
  auto minus = [&](const std::string& prefix) {
    std::set<std::string> out;
    for (const auto& n : full) {
      if (n.rfind(prefix, 0) != 0) out.insert(n);
    }
    return out;
  };
  EXPECT_EQ(names(*build(Variant::no_gradcam)), minus("fusion.alpha"));
  EXPECT_EQ(names(*build(Variant::no_cbam)), minus("fusion.cbam"));
  EXPECT_EQ(names(*build(Variant::no_prompts)), minus("captioner.prompt"));
  EXPECT_EQ(names(*build(Variant::no_fusion)), minus("fusion."));
  const auto small = build(Variant::small_backbone);
  EXPECT_EQ(small->config().encoder.channels, (std::vector<std::size_t>{4, 8}));
  EXPECT_EQ(small->config().encoder.stages, 2u);
  EXPECT_FALSE(names(*small).count("fusion.cbam.fc1.weight"));
  EXPECT_TRUE(names(*small).count("fusion.alpha"));
  EXPECT_FALSE(parse_variant("no_decoder"));
}

TEST(Variants, ZeroAlphaMatchesNoGradCamBitForBit) {
  auto toy = toy_data();
  Model full(make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab);
  Model ablated(make_model_config(Variant::no_gradcam, 32, toy.vocab.size()), toy.vocab);
  ASSERT_EQ(full.parameters().at("fusion.alpha").item(), 0.0);
  const auto batch = batch_of(toy.examples, 16);
  const auto a = full.forward(batch, 0.2), b = ablated.forward(batch, 0.2);
  EXPECT_FALSE(a.cams.empty());
  EXPECT_TRUE(b.cams.empty());
  EXPECT_TRUE(same_values(a.fused, b.fused));
  EXPECT_EQ(a.total.item(), b.total.item());
  const auto pa = full.predict(batch.images, batch.metadata), pb = ablated.predict(batch.images, batch.metadata);
  for (std::size_t i = 0; i < 16; ++i) {
    EXPECT_EQ(pa[i].tokens, pb[i].tokens);
    EXPECT_EQ(pa[i].logprob, pb[i].logprob);
    EXPECT_EQ(pa[i].mes, pb[i].mes);
  }
}

TEST(Variants, NoFusionProjectsRawFeatures) {
  auto toy = toy_data();
  Model model(make_model_config(Variant::no_fusion, 32, toy.vocab.size()), toy.vocab);
  const auto batch = batch_of(toy.examples, 4);
  const auto r = model.forward(batch, 0.2);
  EXPECT_TRUE(same_values(r.fused, model.encoder().forward_features(batch_images(batch.images)).values));
}

TEST(Variants, NoPromptsUsesEmptyPrompt) {
  auto toy = toy_data();
  Model model(make_model_config(Variant::no_prompts, 32, toy.vocab.size()), toy.vocab);
  EXPECT_TRUE(model.prompt_tokens(toy.examples[0].record.metadata).empty());
  const auto p = model.predict({toy.examples[0].image}, {toy.examples[0].record.metadata});
  EXPECT_EQ(p[0].prompt, "");
}

TEST(Checkpoint, SaveLoadSaveIsByteIdentical) {
  auto toy = toy_data();
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 8;
  const auto mc = make_model_config(Variant::full, 32, toy.vocab.size());
  const auto result = train(toy.examples, {}, mc, toy.vocab, tc);
  const auto dir = fs::temp_directory_path() / "lacap_ckpt_test";
  fs::remove_all(dir);
  result.checkpoint.save(dir / "a.bin");
  const auto loaded = Checkpoint::load(dir / "a.bin");
  loaded.save(dir / "b.bin");
  EXPECT_EQ(slurp(dir / "a.bin"), slurp(dir / "b.bin"));
  EXPECT_EQ(loaded.optimizer_steps, 2u);
  EXPECT_EQ(loaded.history.size(), 1u);

  // Identical forward outputs after reload.
  const auto original = result.checkpoint.instantiate(&mc);
  const auto restored = loaded.instantiate(&mc);
  const auto batch = batch_of(toy.examples, 5);
  EXPECT_EQ(original->forward(batch, 0.2).total.item(), restored->forward(batch, 0.2).total.item());
  EXPECT_TRUE(same_values(original->forward(batch, 0.2).mes_logits, restored->forward(batch, 0.2).mes_logits));
}

TEST(Checkpoint, MismatchedConfigAndCorruptFileRejected) {
  auto toy = toy_data();
  TrainConfig tc;
  tc.epochs = 1;
  const auto mc = make_model_config(Variant::full, 32, toy.vocab.size());
  const auto result = train(toy.examples, {}, mc, toy.vocab, tc);
  auto other = mc;
  other.decoder.d_model = 32;
  EXPECT_THROW(result.checkpoint.instantiate(&other), std::invalid_argument);

  const auto dir = fs::temp_directory_path() / "lacap_ckpt_bad";
  fs::create_directories(dir);
  std::ofstream(dir / "junk.bin") << "not a checkpoint";
  EXPECT_THROW(Checkpoint::load(dir / "junk.bin"), std::runtime_error);
  result.checkpoint.save(dir / "ok.bin");
  auto bytes = slurp(dir / "ok.bin");
  bytes.resize(bytes.size() - 8);
  std::ofstream(dir / "cut.bin", std::ios::binary) << bytes;
  EXPECT_THROW(Checkpoint::load(dir / "cut.bin"), std::runtime_error);
}

TEST(Train, DeterministicUnderSeed) {
  auto toy = toy_data();
  TrainConfig tc;
  tc.epochs = 2;
  tc.seed = 11;
  const auto mc = make_model_config(Variant::full, 32, toy.vocab.size());
  const auto dir = fs::temp_directory_path() / "lacap_train_det";
  fs::remove_all(dir);
  train(toy.examples, {toy.examples.begin(), toy.examples.begin() + 4}, mc, toy.vocab, tc, {.out_dir = dir / "a"});
  train(toy.examples, {toy.examples.begin(), toy.examples.begin() + 4}, mc, toy.vocab, tc, {.out_dir = dir / "b"});
  EXPECT_EQ(slurp(dir / "a/ckpt_2.bin"), slurp(dir / "b/ckpt_2.bin"));
  EXPECT_EQ(slurp(dir / "a/metrics.csv"), slurp(dir / "b/metrics.csv"));
  const auto csv = slurp(dir / "a/metrics.csv");
  EXPECT_EQ(csv.rfind("epoch,split,loss_total,loss_caption,loss_mes,mes_acc\n", 0), 0u);
  EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 5);
}

TEST(Train, LossDecreasesOnSmallSet) {
  auto toy = toy_data();
  TrainConfig tc;
  tc.epochs = 8;
  tc.learning_rate = 2e-3;
  tc.augment = false;
  const auto result = train(toy.examples, {}, make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab, tc);
  EXPECT_LT(result.history.back().loss.total, result.history.front().loss.total);
}

TEST(Train, NonFiniteLossAbortsWithDiagnosticCheckpoint) {
  auto toy = toy_data();
  toy.examples[0].image.values[0] = std::nan("");
  TrainConfig tc;
  tc.epochs = 1;
  tc.augment = false;
  tc.batch_size = 16;
  const auto dir = fs::temp_directory_path() / "lacap_train_nan";
  fs::remove_all(dir);
  EXPECT_THROW(train(toy.examples, {}, make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab, tc,
                     {.out_dir = dir}),
               TrainingDiverged);
  EXPECT_TRUE(fs::exists(dir / "diverged.bin"));
}

TEST(Evaluate, ReportIsValidAndChanceLevelWhenUntrained) {
  auto toy = toy_data(8);
  Model model(make_model_config(Variant::full, 32, toy.vocab.size()), toy.vocab);
  const auto ev = evaluate(model, toy.examples);
  EXPECT_EQ(ev.report.n, 32u);
  EXPECT_NO_THROW(ev.report.validate());
  EXPECT_EQ(ev.samples.size(), 32u);
  for (const auto& s : ev.samples) EXPECT_TRUE(s.heatmap_alignment.has_value());
}

TEST(SelectLambda, OneRowPerValueAndDeterministic) {
  auto toy = toy_data();
  TrainConfig tc;
  tc.epochs = 1;
  const auto mc = make_model_config(Variant::full, 32, toy.vocab.size());
  const std::vector<Example> val(toy.examples.begin(), toy.examples.begin() + 4);
  const auto a = select_lambda(toy.examples, val, mc, toy.vocab, tc, {0.0, 0.2, 1.0});
  const auto b = select_lambda(toy.examples, val, mc, toy.vocab, tc, {0.0, 0.2, 1.0});
  ASSERT_EQ(a.rows.size(), 3u);
  EXPECT_EQ(a.best, b.best);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(a.rows[i].val_mes_accuracy, b.rows[i].val_mes_accuracy);
    EXPECT_EQ(a.rows[i].val_bleu4, b.rows[i].val_bleu4);
  }
  EXPECT_THROW(select_lambda(toy.examples, val, mc, toy.vocab, tc, {0.0, 1.0}), std::invalid_argument);
}

TEST(Config, JsonRoundTrip) {
  auto mc = make_model_config(Variant::small_backbone, 64, 50, 9);
  EXPECT_EQ(ModelConfig::from_json(mc.to_json()), mc);
  TrainConfig tc;
  tc.variant = Variant::no_prompts;
  tc.lambda = 0.5;
  EXPECT_EQ(TrainConfig::from_json(tc.to_json()), tc);
  tc.lambda = -1.0;
  EXPECT_THROW(tc.validate(), std::invalid_argument);
}
