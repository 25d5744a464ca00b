#pragma once

// Dual-loss training, Adam, checkpoints, evaluation and lambda selection.

#include "lacap/evalsuite.hpp"
#include "lacap/pipeline.hpp"

#include <json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace lacap {

struct TrainConfig {
  double lambda = 0.2;
  double learning_rate = 3e-4;
  std::size_t batch_size = 8;
  std::size_t epochs = 50;
  std::uint64_t seed = 0;
  Variant variant = Variant::full;
  bool augment = true;
  double clip_norm = 5.0;  // global gradient norm; 0 disables

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
  bool operator==(const TrainConfig&) const = default;
};

struct LossBreakdown {
  double total = 0.0;
  double caption = 0.0;
  double mes = 0.0;
};

class Adam {
 public:
  Adam(double learning_rate, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // Updates every trainable tensor from its accumulated gradient.
  void step(nn::Parameters& params);
  std::size_t steps() const { return t_; }

  nlohmann::json state_header() const;
  const std::map<std::string, std::pair<std::vector<double>, std::vector<double>>>& moments() const { return moments_; }
  void restore(std::size_t steps, std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments_;
};

// Scales all trainable gradients so their global L2 norm is at most max_norm.
// Returns the norm before clipping.
double clip_gradients(nn::Parameters& params, double max_norm);

struct EpochMetrics {
  std::size_t epoch = 0;
  std::string split;
  LossBreakdown loss;
  double mes_accuracy = 0.0;
};

struct Checkpoint {
  static constexpr std::uint32_t kVersion = 1;

  ModelConfig model;
  TrainConfig train;
  std::vector<std::string> vocabulary;
  std::map<std::string, std::pair<diff::Shape, std::vector<double>>> tensors;
  std::size_t optimizer_steps = 0;
  std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> optimizer_moments;
  std::string rng_state;
  std::size_t epoch = 0;
  std::vector<EpochMetrics> history;

  static Checkpoint capture(const Model& model, const TrainConfig& train, const Adam* optimizer,
                            const std::mt19937_64* rng, std::size_t epoch, std::vector<EpochMetrics> history);
  void save(const std::filesystem::path& file) const;
  static Checkpoint load(const std::filesystem::path& file);

  // Builds a model with these parameters. If `expected` is given, its
  // architecture must match the stored one.
  std::unique_ptr<Model> instantiate(const ModelConfig* expected = nullptr) const;
};

class TrainingDiverged : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// In-memory samples with decoded images and encoded captions.
struct Example {
  CaptionRecord record;
  Tensor3 image;
  std::optional<std::vector<double>> mask;  // row-major, 1 = lesion
  std::vector<int> caption;
};

std::vector<Example> load_examples(const std::filesystem::path& root, const std::vector<CaptionRecord>& records,
                                   const Vocabulary& vocabulary);
// Training captions plus the prompts of every metadata combination.
Vocabulary build_vocabulary(const std::vector<CaptionRecord>& train_records);

struct TrainOptions {
  std::filesystem::path out_dir;        // empty: no files written
  std::size_t checkpoint_every = 0;     // epochs; 0 = final only
  std::function<void(const EpochMetrics&)> on_epoch;
};

struct TrainResult {
  Checkpoint checkpoint;
  std::vector<EpochMetrics> history;
};

TrainResult train(const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const ModelConfig& model_config, const Vocabulary& vocabulary, const TrainConfig& config,
                  const TrainOptions& options = {});

// Mean losses and MES accuracy without augmentation or parameter updates.
EpochMetrics evaluate_loss(const Model& model, const std::vector<Example>& examples, double lambda,
                           std::size_t batch_size);

struct SampleScore {
  std::string id;
  Prediction prediction;
  double bleu4 = 0.0;
  double rouge_l = 0.0;
  double alignment = 0.0;
  double token_precision = 0.0;
  std::optional<double> heatmap_alignment;
};

struct Evaluation {
  MetricReport report;
  std::vector<SampleScore> samples;
};

Evaluation evaluate(const Model& model, const std::vector<Example>& examples, const GenerateOptions& options = {},
                    std::size_t batch_size = 16);

struct LambdaRow {
  double lambda = 0.0;
  double val_mes_accuracy = 0.0;
  double val_bleu4 = 0.0;
  double combined_rank = 0.0;
};

struct LambdaSelection {
  double best = 0.0;
  std::vector<LambdaRow> rows;
};

// Short runs per lambda; the winner minimises the sum of its rank by val MES
// accuracy and its rank by val BLEU-4 (rank 1 = best, ties share the mean
// rank); remaining ties go to the smaller lambda.
LambdaSelection select_lambda(const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                              const ModelConfig& model_config, const Vocabulary& vocabulary,
                              const TrainConfig& base, const std::vector<double>& grid);

// epoch,split,loss_total,loss_caption,loss_mes,mes_acc
void write_metric_log(const std::vector<EpochMetrics>& history, const std::filesystem::path& file);

}  // namespace lacap
