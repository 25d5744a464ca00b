#include "lacap/trainer.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace lacap {

using nlohmann::json;

void TrainConfig::validate() const {
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw std::invalid_argument("train: lambda must be >= 0");
  if (!(learning_rate >= 0.0)) throw std::invalid_argument("train: learning_rate must be >= 0");
  if (batch_size == 0) throw std::invalid_argument("train: batch_size must be positive");
  if (!(clip_norm >= 0.0)) throw std::invalid_argument("train: clip_norm must be >= 0");
}

json TrainConfig::to_json() const {
  return {{"lambda", lambda},       {"learning_rate", learning_rate},
          {"batch_size", batch_size}, {"epochs", epochs},
          {"seed", seed},           {"variant", std::string(to_string(variant))},
          {"augment", augment},     {"clip_norm", clip_norm}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  TrainConfig c;
  c.lambda = j.at("lambda");
  c.learning_rate = j.at("learning_rate");
  c.batch_size = j.at("batch_size");
  c.epochs = j.at("epochs");
  c.seed = j.at("seed");
  const auto v = parse_variant(j.at("variant").get<std::string>());
  if (!v) throw std::invalid_argument("unknown variant " + j.at("variant").get<std::string>());
  c.variant = *v;
  c.augment = j.at("augment");
  c.clip_norm = j.at("clip_norm");
  c.validate();
  return c;
}

// ---- optimizer ---------------------------------------------------------------

Adam::Adam(double learning_rate, double beta1, double beta2, double eps)
    : lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {}

void Adam::step(nn::Parameters& params) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (const auto& name : params.trainable_names()) {
    auto& p = params.at(name);
    auto& [m, v] = moments_[name];
    if (m.empty()) {
      m.assign(p.size(), 0.0);
      v.assign(p.size(), 0.0);
    }
    const bool has = p.has_grad();
    auto data = p.mutable_data();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double g = has ? p.grad()[i] : 0.0;
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      v[i] = beta2_ * v[i] + (1.0 - beta2_) * g * g;
      data[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
    }
  }
}

json Adam::state_header() const { return {{"steps", t_}}; }

void Adam::restore(std::size_t steps,
                   std::map<std::string, std::pair<std::vector<double>, std::vector<double>>> moments) {
  t_ = steps;
  moments_ = std::move(moments);
}

double clip_gradients(nn::Parameters& params, double max_norm) {
  double sq = 0.0;
  for (const auto& name : params.trainable_names()) {
    const auto& p = params.at(name);
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double factor = max_norm / norm;
    for (const auto& name : params.trainable_names()) {
      auto& p = params.at(name);
      if (!p.has_grad()) continue;
      for (auto& g : p.mutable_grad()) g *= factor;
    }
  }
  return norm;
}

// ---- checkpoint ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'L', 'A', 'C', 'A', 'P', 'C', 'K', '\0'};

template <typename T>
void put_le(std::ostream& out, T value) {
  std::uint64_t bits = 0;
  std::memcpy(&bits, &value, sizeof(T));
  for (std::size_t i = 0; i < sizeof(T); ++i) out.put(static_cast<char>((bits >> (8 * i)) & 0xff));
}

template <typename T>
T get_le(std::istream& in) {
  std::uint64_t bits = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    const int c = in.get();
    if (c == EOF) throw std::runtime_error("checkpoint: truncated file");
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(c)) << (8 * i);
  }
  T value;
  std::memcpy(&value, &bits, sizeof(T));
  return value;
}

void put_doubles(std::ostream& out, const std::vector<double>& values) {
  for (double v : values) put_le(out, v);
}

std::vector<double> get_doubles(std::istream& in, std::size_t count) {
  std::vector<double> out(count);
  for (auto& v : out) v = get_le<double>(in);
  return out;
}

json metrics_json(const EpochMetrics& m) {
  return {{"epoch", m.epoch},
          {"split", m.split},
          {"loss_total", m.loss.total},
          {"loss_caption", m.loss.caption},
          {"loss_mes", m.loss.mes},
          {"mes_acc", m.mes_accuracy}};
}

EpochMetrics metrics_from_json(const json& j) {
  EpochMetrics m;
  m.epoch = j.at("epoch");
  m.split = j.at("split");
  m.loss = {j.at("loss_total"), j.at("loss_caption"), j.at("loss_mes")};
  m.mes_accuracy = j.at("mes_acc");
  return m;
}

}  // namespace

Checkpoint Checkpoint::capture(const Model& model, const TrainConfig& train, const Adam* optimizer,
                               const std::mt19937_64* rng, std::size_t epoch, std::vector<EpochMetrics> history) {
  Checkpoint c;
  c.model = model.config();
  c.train = train;
  c.vocabulary = model.vocabulary().tokens();
  for (const auto& [name, t] : model.parameters().tensors()) {
    c.tensors[name] = {t.shape(), std::vector<double>(t.data().begin(), t.data().end())};
  }
  if (optimizer) {
    c.optimizer_steps = optimizer->steps();
    c.optimizer_moments = optimizer->moments();
  }
  if (rng) {
    std::ostringstream s;
    s << *rng;
    c.rng_state = s.str();
  }
  c.epoch = epoch;
  c.history = std::move(history);
  return c;
}

void Checkpoint::save(const std::filesystem::path& file) const {
  json header;
  header["format_version"] = kVersion;
  header["model"] = model.to_json();
  header["train"] = train.to_json();
  header["vocabulary"] = vocabulary;
  json tensor_list = json::array();
  for (const auto& [name, t] : tensors) {
    tensor_list.push_back({{"name", name}, {"shape", t.first}, {"dtype", "float64"}});
  }
  header["tensors"] = tensor_list;
  json moments = json::array();
  for (const auto& [name, mv] : optimizer_moments) moments.push_back({{"name", name}, {"count", mv.first.size()}});
  header["optimizer"] = {{"steps", optimizer_steps}, {"moments", moments}};
  header["rng_state"] = rng_state;
  header["epoch"] = epoch;
  json hist = json::array();
  for (const auto& m : history) hist.push_back(metrics_json(m));
  header["history"] = hist;
  const std::string text = header.dump();

  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + file.string());
  out.write(kMagic, sizeof kMagic);
  put_le<std::uint32_t>(out, kVersion);
  put_le<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& [name, t] : tensors) put_doubles(out, t.second);
  for (const auto& [name, mv] : optimizer_moments) {
    put_doubles(out, mv.first);
    put_doubles(out, mv.second);
  }
  if (!out) throw std::runtime_error("checkpoint: write failed for " + file.string());
}

Checkpoint Checkpoint::load(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + file.string());
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) {
    throw std::runtime_error("checkpoint: " + file.string() + " is not a checkpoint file");
  }
  const auto version = get_le<std::uint32_t>(in);
  if (version != kVersion) throw std::runtime_error("checkpoint: unsupported format version " + std::to_string(version));
  const auto length = get_le<std::uint64_t>(in);
  std::string text(length, '\0');
  in.read(text.data(), static_cast<std::streamsize>(length));
  if (!in) throw std::runtime_error("checkpoint: truncated header");
  const json header = json::parse(text);

  Checkpoint c;
  c.model = ModelConfig::from_json(header.at("model"));
  c.train = TrainConfig::from_json(header.at("train"));
  c.vocabulary = header.at("vocabulary").get<std::vector<std::string>>();
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "float64") throw std::runtime_error("checkpoint: unsupported dtype");
    const auto shape = t.at("shape").get<diff::Shape>();
    c.tensors[t.at("name").get<std::string>()] = {shape, get_doubles(in, diff::shape_size(shape))};
  }
  c.optimizer_steps = header.at("optimizer").at("steps");
  for (const auto& m : header.at("optimizer").at("moments")) {
    const std::size_t count = m.at("count");
    auto first = get_doubles(in, count);
    auto second = get_doubles(in, count);
    c.optimizer_moments[m.at("name").get<std::string>()] = {std::move(first), std::move(second)};
  }
  if (in.peek() != EOF) throw std::runtime_error("checkpoint: trailing bytes in " + file.string());
  c.rng_state = header.at("rng_state");
  c.epoch = header.at("epoch");
  for (const auto& m : header.at("history")) c.history.push_back(metrics_from_json(m));
  return c;
}

std::unique_ptr<Model> Checkpoint::instantiate(const ModelConfig* expected) const {
  if (expected && !(*expected == model)) {
    throw std::invalid_argument("checkpoint: architecture mismatch; stored " + model.to_json().dump() +
                                ", expected " + expected->to_json().dump());
  }
  auto m = std::make_unique<Model>(model, Vocabulary::from_tokens(vocabulary));
  auto& params = m->parameters();
  if (params.tensors().size() != tensors.size()) {
    throw std::invalid_argument("checkpoint: parameter set differs from the model");
  }
  for (const auto& [name, t] : tensors) {
    if (!params.contains(name)) throw std::invalid_argument("checkpoint: unknown parameter " + name);
    auto& p = params.at(name);
    if (p.shape() != t.first) {
      throw std::invalid_argument("checkpoint: shape of " + name + " is " + diff::shape_str(t.first) + ", model has " +
                                  diff::shape_str(p.shape()));
    }
    std::copy(t.second.begin(), t.second.end(), p.mutable_data().begin());
  }
  return m;
}

// ---- data -----------------------------------------------------------------------

std::vector<Example> load_examples(const std::filesystem::path& root, const std::vector<CaptionRecord>& records,
                                   const Vocabulary& vocabulary) {
  std::vector<Example> out;
  out.reserve(records.size());
  for (const auto& r : records) {
    Example e;
    e.record = r;
    e.image = to_tensor(read_png(root / r.image_path));
    if (r.lesion_mask_path) {
      const auto mask = read_png(root / *r.lesion_mask_path);
      std::vector<double> m(mask.width * mask.height);
      for (std::size_t p = 0; p < m.size(); ++p) m[p] = mask.pixels[p * mask.channels] > 127 ? 1.0 : 0.0;
      e.mask = std::move(m);
    }
    e.caption = vocabulary.encode(r.caption);
    out.push_back(std::move(e));
  }
  return out;
}

Vocabulary build_vocabulary(const std::vector<CaptionRecord>& train_records) {
  std::vector<std::string> corpus;
  for (const auto& r : train_records) corpus.push_back(r.caption);
  for (const auto& m : all_metadata_combinations()) corpus.push_back(build_prompt(m));
  return Vocabulary::build(corpus, 1);
}

// ---- training -------------------------------------------------------------------

namespace {

Batch make_batch(const std::vector<Example>& examples, std::span<const std::size_t> index, std::mt19937_64* augment_rng) {
  Batch b;
  for (std::size_t i : index) {
    const auto& e = examples[i];
    b.images.push_back(augment_rng ? augment(e.image, *augment_rng) : e.image);
    b.metadata.push_back(e.record.metadata);
    b.captions.push_back(e.caption);
  }
  return b;
}

std::size_t count_correct(const DiffArray& logits, const Batch& batch) {
  std::size_t correct = 0;
  for (std::size_t i = 0; i < batch.metadata.size(); ++i) {
    auto row = logits.data().subspan(i * 4, 4);
    correct += std::max_element(row.begin(), row.end()) - row.begin() == batch.metadata[i].mes;
  }
  return correct;
}

struct Accumulator {
  double total = 0.0, caption = 0.0, mes = 0.0;
  std::size_t correct = 0, n = 0;

  void add(const ForwardResult& f, const Batch& b) {
    const double w = static_cast<double>(b.images.size());
    total += f.total.item() * w;
    caption += f.caption_loss.item() * w;
    mes += f.mes_loss.item() * w;
    correct += count_correct(f.mes_logits, b);
    n += b.images.size();
  }
  EpochMetrics finish(std::size_t epoch, const std::string& split) const {
    const double d = static_cast<double>(n);
    return {epoch, split, {total / d, caption / d, mes / d}, static_cast<double>(correct) / d};
  }
};

}  // namespace

EpochMetrics evaluate_loss(const Model& model, const std::vector<Example>& examples, double lambda,
                           std::size_t batch_size) {
  diff::NoGradGuard no_grad;
  Accumulator acc;
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const auto index = std::span(order).subspan(start, std::min(batch_size, order.size() - start));
    const auto batch = make_batch(examples, index, nullptr);
    acc.add(model.forward(batch, lambda), batch);
  }
  return acc.finish(0, "val");
}

TrainResult train(const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                  const ModelConfig& model_config, const Vocabulary& vocabulary, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (model_config.variant != config.variant) throw std::invalid_argument("train: model and train variants differ");
  if (train_set.empty()) throw std::invalid_argument("train: empty training set");
  Model model(model_config, vocabulary);
  Adam optimizer(config.learning_rate);
  std::mt19937_64 rng(config.seed);
  std::vector<EpochMetrics> history;

  auto save = [&](std::size_t epoch, const std::string& name) {
    if (options.out_dir.empty()) return;
    Checkpoint::capture(model, config, &optimizer, &rng, epoch, history).save(options.out_dir / name);
  };
  auto ckpt_name = [](std::size_t epoch) { return "ckpt_" + std::to_string(epoch) + ".bin"; };

  std::vector<std::size_t> order(train_set.size());
  std::iota(order.begin(), order.end(), 0);
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    Accumulator acc;
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const auto index = std::span(order).subspan(start, std::min(config.batch_size, order.size() - start));
      const auto batch = make_batch(train_set, index, config.augment ? &rng : nullptr);
      model.parameters().zero_grad();
      auto result = model.forward(batch, config.lambda);
      if (!std::isfinite(result.total.item())) {
        save(epoch, "diverged.bin");
        throw TrainingDiverged("train: non-finite loss at epoch " + std::to_string(epoch) + " (caption " +
                               std::to_string(result.caption_loss.item()) + ", mes " +
                               std::to_string(result.mes_loss.item()) + ")");
      }
      result.total.backward();
      clip_gradients(model.parameters(), config.clip_norm);
      optimizer.step(model.parameters());
      acc.add(result, batch);
    }
    history.push_back(acc.finish(epoch, "train"));
    if (options.on_epoch) options.on_epoch(history.back());
    if (!val_set.empty()) {
      auto val = evaluate_loss(model, val_set, config.lambda, config.batch_size);
      val.epoch = epoch;
      history.push_back(val);
      if (options.on_epoch) options.on_epoch(history.back());
    }
    if (options.checkpoint_every && epoch % options.checkpoint_every == 0 && epoch != config.epochs) {
      save(epoch, ckpt_name(epoch));
    }
  }
  model.parameters().zero_grad();
  TrainResult result{Checkpoint::capture(model, config, &optimizer, &rng, config.epochs, history), history};
  if (!options.out_dir.empty()) {
    result.checkpoint.save(options.out_dir / ckpt_name(config.epochs));
    write_metric_log(history, options.out_dir / "metrics.csv");
  }
  return result;
}

void write_metric_log(const std::vector<EpochMetrics>& history, const std::filesystem::path& file) {
  if (file.has_parent_path()) std::filesystem::create_directories(file.parent_path());
  std::ofstream out(file);
  if (!out) throw std::runtime_error("cannot write " + file.string());
  out << "epoch,split,loss_total,loss_caption,loss_mes,mes_acc\n";
  char line[256];
  for (const auto& m : history) {
    std::snprintf(line, sizeof line, "%zu,%s,%.17g,%.17g,%.17g,%.17g\n", m.epoch, m.split.c_str(), m.loss.total,
                  m.loss.caption, m.loss.mes, m.mes_accuracy);
    out << line;
  }
}

// ---- evaluation -----------------------------------------------------------------

Evaluation evaluate(const Model& model, const std::vector<Example>& examples, const GenerateOptions& options,
                    std::size_t batch_size) {
  if (examples.empty()) throw std::invalid_argument("evaluate: no examples");
  Evaluation ev;
  std::vector<int> predicted, labels;
  std::vector<HeatmapCase> cases;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<Tensor3> images;
    std::vector<ClinicalMetadata> meta;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(examples[i].image);
      meta.push_back(examples[i].record.metadata);
    }
    auto preds = model.predict(images, meta, options);
    for (std::size_t i = start; i < end; ++i) {
      const auto& e = examples[i];
      SampleScore s;
      s.id = e.record.id;
      s.prediction = std::move(preds[i - start]);
      const auto hyp = tokenize(s.prediction.caption);
      const auto ref = tokenize(e.record.caption);
      s.bleu4 = bleu4(hyp, ref);
      s.rouge_l = rouge_l(hyp, ref);
      s.token_precision = token_precision(hyp, ref);
      s.alignment = alignment_score(s.prediction.caption, e.record.metadata);
      if (e.mask) {
        s.heatmap_alignment = heatmap_caption_alignment(s.prediction.cam.heatmap, *e.mask, s.prediction.caption);
      }
      cases.push_back({s.prediction.cam.heatmap, e.mask, s.prediction.caption});
      predicted.push_back(s.prediction.mes);
      labels.push_back(e.record.metadata.mes);
      ev.samples.push_back(std::move(s));
    }
  }
  auto& r = ev.report;
  r.n = ev.samples.size();
  const double n = static_cast<double>(r.n);
  for (const auto& s : ev.samples) {
    r.bleu4 += s.bleu4 / n;
    r.rouge_l += s.rouge_l / n;
    r.token_precision += s.token_precision / n;
    r.alignment_score += s.alignment / n;
  }
  r.mes_accuracy = mes_accuracy(predicted, labels);
  r.heatmap_caption_alignment = heatmap_caption_alignment(cases).mean;
  // Sums of n terms of x/n can exceed 1 by an ulp.
  for (double* v : {&r.bleu4, &r.rouge_l, &r.token_precision, &r.alignment_score}) *v = std::min(*v, 1.0);
  r.validate();
  return ev;
}

LambdaSelection select_lambda(const std::vector<Example>& train_set, const std::vector<Example>& val_set,
                              const ModelConfig& model_config, const Vocabulary& vocabulary,
                              const TrainConfig& base, const std::vector<double>& grid) {
  if (grid.size() < 3 || std::find(grid.begin(), grid.end(), 0.2) == grid.end()) {
    throw std::invalid_argument("select_lambda: grid needs >= 3 values including 0.2");
  }
  LambdaSelection sel;
  for (double lambda : grid) {
    auto config = base;
    config.lambda = lambda;
    const auto result = train(train_set, val_set, model_config, vocabulary, config);
    const auto model = result.checkpoint.instantiate();
    const auto ev = evaluate(*model, val_set);
    sel.rows.push_back({lambda, ev.report.mes_accuracy, ev.report.bleu4, 0.0});
  }
  auto rank = [&](auto key) {
    std::vector<double> ranks(sel.rows.size());
    for (std::size_t i = 0; i < sel.rows.size(); ++i) {
      double better = 0, equal = 0;
      for (const auto& other : sel.rows) {
        if (key(other) > key(sel.rows[i])) ++better;
        else if (key(other) == key(sel.rows[i])) ++equal;
      }
      ranks[i] = better + (equal + 1) / 2.0;
    }
    return ranks;
  };
  const auto by_acc = rank([](const LambdaRow& r) { return r.val_mes_accuracy; });
  const auto by_bleu = rank([](const LambdaRow& r) { return r.val_bleu4; });
  std::size_t best = 0;
  for (std::size_t i = 0; i < sel.rows.size(); ++i) {
    sel.rows[i].combined_rank = by_acc[i] + by_bleu[i];
    const auto& b = sel.rows[best];
    if (sel.rows[i].combined_rank < b.combined_rank ||
        (sel.rows[i].combined_rank == b.combined_rank && sel.rows[i].lambda < b.lambda)) {
      best = i;
    }
  }
  sel.best = sel.rows[best].lambda;
  return sel;
}

}  // namespace lacap
