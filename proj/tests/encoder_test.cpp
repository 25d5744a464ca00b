#include "lacap/encoder.hpp"
#include "lacap/tolerances.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace lacap;
using lacap::testing::random_array;
using lacap::testing::weighted_sum;

namespace {

Tensor3 random_image(std::mt19937_64& rng, std::size_t size) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor3 t{3, size, size, std::vector<double>(3 * size * size)};
  for (auto& v : t.values) v = u(rng);
  return t;
}

EncoderConfig tiny_config() {
  EncoderConfig c;
  c.channels = {4, 8};
  c.stages = 2;
  c.input_size = 16;
  return c;
}

}  // namespace

TEST(Encoder, DefaultShapes) {
  nn::Parameters params;
  Encoder enc(EncoderConfig{}, params, 1);
  std::mt19937_64 rng(1);
  auto x = random_array(rng, {2, 3, 64, 64}, 0.0, 1.0);
  auto out = enc.forward_classify(x);
  EXPECT_EQ(out.activations.values.shape(), (diff::Shape{2, 32, 8, 8}));
  EXPECT_EQ(out.logits.shape(), (diff::Shape{2, 4}));
  EXPECT_EQ(enc.forward_features(x).values.shape(), (diff::Shape{2, 32, 8, 8}));
}

TEST(Encoder, IdenticalImagesGiveIdenticalLogits) {
  nn::Parameters params;
  Encoder enc(tiny_config(), params, 2);
  std::mt19937_64 rng(2);
  const auto im = random_image(rng, 16);
  auto logits = enc.forward_classify(batch_images({im, im})).logits;
  for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(logits.at(k), logits.at(4 + k));
}

TEST(Encoder, ParameterCountIsPureFunctionOfConfig) {
  nn::Parameters p1, p2;
  Encoder a(EncoderConfig{}, p1, 1);
  Encoder b(EncoderConfig{}, p2, 99);
  EXPECT_EQ(p1.count(), p2.count());
  // Two branches of (3*9*8+8) + (8*9*16+16) + (16*9*32+32) plus the 32x4 classifier.
  EXPECT_EQ(p1.count(), 2u * (224 + 1168 + 4640) + 132);
}

TEST(Encoder, BranchesShareNoParameters) {
  nn::Parameters params;
  Encoder enc(EncoderConfig{}, params, 3);
  const auto a = enc.branch_parameter_names('a');
  const auto b = enc.branch_parameter_names('b');
  std::set<const diff::Node*> nodes_a;
  for (const auto& n : a) nodes_a.insert(params.at(n).node());
  for (const auto& n : b) EXPECT_FALSE(nodes_a.count(params.at(n).node())) << n;
}

TEST(Encoder, PerturbingBranchADoesNotChangeFeatures) {
  nn::Parameters params;
  Encoder enc(tiny_config(), params, 4);
  std::mt19937_64 rng(4);
  auto x = random_array(rng, {1, 3, 16, 16}, 0.0, 1.0);
  const auto before = enc.forward_features(x).values;
  for (const auto& n : enc.branch_parameter_names('a')) {
    for (auto& v : params.at(n).mutable_data()) v += 0.5;
  }
  const auto after = enc.forward_features(x).values;
  EXPECT_TRUE(std::equal(before.data().begin(), before.data().end(), after.data().begin()));
}

TEST(Encoder, SharedStemAliasesFirstStage) {
  auto c = tiny_config();
  c.share_stem = true;
  nn::Parameters params;
  Encoder enc(c, params, 5);
  const auto b = enc.branch_parameter_names('b');
  EXPECT_EQ(std::count_if(b.begin(), b.end(), [](const std::string& n) { return n.find("stage0") != std::string::npos; }),
            0);
}

TEST(Encoder, GradientFlowsThroughBothBranches) {
  for (bool residual : {false, true}) {
    auto c = tiny_config();
    c.residual = residual;
    nn::Parameters params;
    Encoder enc(c, params, 6);
    std::mt19937_64 rng(6);
    auto x = random_array(rng, {2, 3, 16, 16}, 0.0, 1.0);
    auto loss_a = [&] { return weighted_sum(enc.forward_classify(x).logits); };
    auto loss_b = [&] { return weighted_sum(enc.forward_features(x).values); };
    for (const auto& n : enc.branch_parameter_names('a')) {
      EXPECT_LT(lacap::testing::param_grad_error(params.at(n), loss_a, tol::kGradCheckStep), tol::kGradCheckRel) << n;
    }
    for (const auto& n : enc.branch_parameter_names('b')) {
      EXPECT_LT(lacap::testing::param_grad_error(params.at(n), loss_b, tol::kGradCheckStep), tol::kGradCheckRel) << n;
    }
    auto r = diff::grad_check([&](const DiffArray& in) { return weighted_sum(enc.forward_classify(in).logits); }, x,
                              tol::kGradCheckStep, tol::kGradCheckRel);
    EXPECT_TRUE(r.passed) << r.max_rel_error;
  }
}

TEST(Encoder, RejectsBadConfigAndInput) {
  auto c = tiny_config();
  c.stages = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = tiny_config();
  c.num_classes = 3;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  nn::Parameters params;
  Encoder enc(tiny_config(), params, 7);
  EXPECT_THROW(enc.forward_classify(DiffArray::zeros({1, 3, 32, 32})), diff::ShapeError);
}

TEST(Augment, NoOpOptionsGiveIdentity) {
  std::mt19937_64 rng(8);
  const auto im = random_image(rng, 32);
  AugmentOptions none{.flip_probability = 0.0, .brightness_min = 1.0, .brightness_max = 1.0, .crop_fraction = 1.0};
  EXPECT_EQ(augment(im, rng, none), im);
}

TEST(Augment, OutputStaysInUnitRange) {
  std::mt19937_64 rng(9);
  for (int i = 0; i < 50; ++i) {
    const auto out = augment(random_image(rng, 32), rng);
    EXPECT_EQ(out.height, 32u);
    for (double v : out.values) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Augment, FlipTwiceIsIdentity) {
  std::mt19937_64 rng(10);
  const auto im = random_image(rng, 16);
  EXPECT_EQ(flip_horizontal(flip_horizontal(im)), im);
}
