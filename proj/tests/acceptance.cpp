// End-to-end acceptance run. Prints one PASS/FAIL line per criterion plus
// supplementary measurements, and mirrors them to acceptance_report.txt.
//
//   acceptance [--work DIR] [--only 1,2,...]
//
// Exit status is 0 iff every selected criterion passes.

#include "cli.hpp"
#include "grad_cases.hpp"
#include "metric_oracles.hpp"
#include "test_util.hpp"

#include "lacap/captioner.hpp"
#include "lacap/lesionattn.hpp"
#include "lacap/synth.hpp"
#include "lacap/tolerances.hpp"
#include "lacap/trainer.hpp"

#include <json.hpp>

#include <array>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <iterator>
#include <map>
#include <set>
#include <sstream>

using namespace lacap;
using namespace lacap::testing;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Pinned acceptance thresholds.
constexpr double kGradStep = tol::kGradCheckStep;
constexpr double kGradRel = tol::kGradCheckRel;
constexpr double kGradSeconds = 120.0;
constexpr double kHeatmapTol = tol::kGradCamAnalytic;
constexpr int kFuzzedHeatmaps = 1000;
constexpr double kOracleTol = tol::kMetricOracle;
constexpr int kOraclePairs = 1000;
constexpr std::size_t kOverfitPerClass = 8;
constexpr std::size_t kOverfitEpochs = 300;
constexpr double kOverfitMesAcc = 0.95;
constexpr double kOverfitCaptionMatch = 0.90;
constexpr double kOverfitSeconds = 600.0;
constexpr std::size_t kDeskPerClass = 100;
constexpr std::size_t kDeskEpochs = 50;
constexpr double kDeskMesAcc = 0.80;
constexpr double kDeskAlignment = 0.90;
constexpr double kDeskSeconds = 45 * 60.0;
constexpr int kBootstrapIters = 1000;
constexpr std::uint64_t kBootstrapSeed = 2024;
constexpr double kBootstrapAlpha = 0.05;
constexpr double kCamBeatsUniform = 0.80;

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string num(double v, const char* f = "%.4g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

class Report {
 public:
  explicit Report(fs::path file) : out_(file) {}

  void criterion(int id, const std::string& title, bool pass, const std::string& detail) {
    reported_.insert(id);
    if (!pass) ++failed_;
    line("criterion " + std::to_string(id) + " " + (pass ? "PASS" : "FAIL") + "  " + title + ": " + detail);
  }
  void supplementary(const std::string& title, bool pass, const std::string& detail) {
    line(std::string("supplementary ") + (pass ? "PASS" : "FAIL") + "  " + title + ": " + detail);
  }
  void note(const std::string& text) { line("  " + text); }
  int failed() const { return failed_; }
  bool reported(int id) const { return reported_.count(id) != 0; }

 private:
  void line(const std::string& s) {
    std::cout << s << std::endl;
    out_ << s << std::endl;
  }
  std::ofstream out_;
  int failed_ = 0;
  std::set<int> reported_;
};

int cli_run(std::vector<std::string> args) {
  const int code = cli::run(args);
  if (code != 0) {
    std::string joined;
    for (const auto& a : args) joined += a + " ";
    throw std::runtime_error("command failed (" + std::to_string(code) + "): " + joined);
  }
  return code;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

json read_json(const fs::path& p) { return json::parse(slurp(p)); }

std::map<std::string, std::string> tree(const fs::path& root) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "run_manifest.json") continue;
    out[fs::relative(e.path(), root).generic_string()] = slurp(e.path());
  }
  return out;
}

std::vector<Example> in_memory_examples(const SynthConfig& config, Vocabulary& vocab) {
  auto samples = generate_samples(config);
  std::vector<CaptionRecord> records;
  for (const auto& s : samples) records.push_back(s.record);
  vocab = build_vocabulary(records);
  std::vector<Example> out;
  for (auto& s : samples) {
    Example e;
    e.record = s.record;
    e.image = s.image;
    std::vector<double> mask(s.mask.pixels.size());
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = s.mask.pixels[i] > 127 ? 1.0 : 0.0;
    e.mask = std::move(mask);
    e.caption = vocab.encode(s.record.caption);
    out.push_back(std::move(e));
  }
  return out;
}

// ---- 1 ---------------------------------------------------------------------

struct GradTally {
  double worst = 0.0;
  std::size_t checks = 0;
  std::vector<std::string> failures;

  void add(const std::string& what, double rel) {
    ++checks;
    worst = std::max(worst, rel);
    if (!(rel < kGradRel)) failures.push_back(what + " rel " + num(rel));
  }
};

DecoderConfig tiny_decoder() {
  DecoderConfig c;
  c.d_model = 16;
  c.heads = 2;
  c.ffn_dim = 24;
  c.max_len = 10;
  c.vocab_size = 12;
  return c;
}

void criterion_gradients(Report& report) {
  const auto t0 = Clock::now();
  GradTally prim, cbam_t, fuse_t, dec_t;
  check_all_primitives([&](const std::string& what, const diff::GradCheckReport& r) {
    prim.add(what, r.passed ? r.max_rel_error : std::max(r.max_rel_error, kGradRel));
  });

  const std::vector<diff::Shape> cbam_shapes = {{1, 4, 8, 8}, {2, 4, 5, 7}, {1, 8, 6, 6}};
  for (const auto& shape : cbam_shapes) {
    nn::Parameters params;
    Cbam cbam("cbam", shape[1], {.reduction = 2, .kernel = 7}, params, 21);
    std::mt19937_64 rng(21);
    auto f = random_array(rng, shape);
    auto r = diff::grad_check([&](const DiffArray& x) { return weighted_sum(cbam(x)); }, f, kGradStep, kGradRel);
    cbam_t.add("cbam input " + diff::shape_str(shape), r.max_rel_error);
    for (const auto& [name, t] : params.tensors()) {
      cbam_t.add(name, param_grad_error(t, [&] { return weighted_sum(cbam(f)); }, kGradStep));
    }
  }

  const std::vector<diff::Shape> fuse_shapes = {{1, 8, 4, 4}, {2, 8, 5, 3}, {2, 16, 6, 6}};
  for (const auto& shape : fuse_shapes) {
    nn::Parameters params;
    Cbam cbam("cbam", shape[1], {}, params, 22);
    std::mt19937_64 rng(22);
    auto f = random_array(rng, shape);
    auto m = random_array(rng, {shape[0], 1, shape[2], shape[3]}, 0.0, 1.0);
    auto alpha = DiffArray::scalar(0.7);
    auto r = diff::grad_check([&](const DiffArray& x) { return weighted_sum(fuse(x, m, &cbam, alpha)); }, f,
                              kGradStep, kGradRel);
    fuse_t.add("fuse F " + diff::shape_str(shape), r.max_rel_error);
    r = diff::grad_check([&](const DiffArray& a) { return weighted_sum(fuse(f, m, &cbam, a)); }, alpha, kGradStep,
                         kGradRel);
    fuse_t.add("fuse alpha " + diff::shape_str(shape), r.max_rel_error);
    r = diff::grad_check([&](const DiffArray& x) { return weighted_sum(fuse(x, m, nullptr, alpha)); }, f, kGradStep,
                         kGradRel);
    fuse_t.add("fuse F without cbam " + diff::shape_str(shape), r.max_rel_error);
    for (const auto& [name, t] : params.tensors()) {
      fuse_t.add("fuse " + name, param_grad_error(t, [&] { return weighted_sum(fuse(f, m, &cbam, alpha)); }, kGradStep));
    }
  }

  struct Case {
    std::size_t tokens;
    std::vector<int> prompt;
    std::vector<int> prefix;
  };
  const std::vector<Case> cases = {{4, {5, 6}, {1, 7}}, {6, {4, 8, 9}, {1, 7, 8, 9}}, {9, {10}, {1}}};
  for (const auto& c : cases) {
    nn::Parameters params;
    Captioner cap(tiny_decoder(), 4, true, params, 23);
    std::mt19937_64 rng(23);
    auto visual = random_array(rng, {c.tokens, 16});
    auto step = [&](const DiffArray& v) { return weighted_sum(cap.decode_step(c.prompt, v, c.prefix)); };
    auto r = diff::grad_check(step, visual, kGradStep, kGradRel);
    dec_t.add("decode step visual", r.max_rel_error);
    for (const auto& [name, t] : params.tensors()) {
      dec_t.add(name, param_grad_error(t, [&] { return step(visual); }, kGradStep, 24));
    }
  }

  const double elapsed = seconds_since(t0);
  bool pass = elapsed < kGradSeconds;
  std::string detail;
  for (const auto& [label, t] : {std::pair<const char*, GradTally*>{"primitives", &prim},
                                 {"cbam", &cbam_t},
                                 {"fusion", &fuse_t},
                                 {"decode step", &dec_t}}) {
    pass = pass && t->failures.empty();
    detail += std::string(label) + " " + std::to_string(t->checks) + " checks max rel " + num(t->worst) + "; ";
  }
  detail += "time " + num(elapsed, "%.1f") + " s (limit " + num(kGradSeconds, "%.0f") + ")";
  report.criterion(1, "gradient correctness", pass, detail);
  for (const auto* t : {&prim, &cbam_t, &fuse_t, &dec_t}) {
    for (const auto& f : t->failures) report.note("failed: " + f);
  }
}

// ---- 2 ---------------------------------------------------------------------

void criterion_fusion_identity(Report& report) {
  Vocabulary vocab;
  SynthConfig sc;
  sc.image_size = 64;
  sc.samples_per_class = 4;
  in_memory_examples(sc, vocab);

  std::mt19937_64 rng(31);
  std::uniform_real_distribution<double> pixel(0.0, 1.0);
  std::uniform_int_distribution<int> word(Vocabulary::kNumSpecial, static_cast<int>(vocab.size()) - 1);
  const auto combos = all_metadata_combinations();
  Batch batch;
  for (int i = 0; i < 16; ++i) {
    Tensor3 img{3, 64, 64, std::vector<double>(3 * 64 * 64)};
    for (auto& v : img.values) v = pixel(rng);
    batch.images.push_back(std::move(img));
    batch.metadata.push_back(combos[rng() % combos.size()]);
    std::vector<int> caption(5 + rng() % 10);
    for (auto& t : caption) t = word(rng);
    batch.captions.push_back(std::move(caption));
  }

  Model full(make_model_config(Variant::full, 64, vocab.size(), 77), vocab);
  Model ablated(make_model_config(Variant::no_gradcam, 64, vocab.size(), 77), vocab);
  full.parameters().at("fusion.alpha").mutable_data()[0] = 0.0;
  const auto a = full.forward(batch, 0.2), b = ablated.forward(batch, 0.2);
  auto same = [](const DiffArray& x, const DiffArray& y) {
    return x.shape() == y.shape() && std::equal(x.data().begin(), x.data().end(), y.data().begin());
  };
  bool pass = same(a.fused, b.fused) && same(a.mes_logits, b.mes_logits) && a.total.item() == b.total.item() &&
              a.caption_loss.item() == b.caption_loss.item();
  const auto pa = full.predict(batch.images, batch.metadata), pb = ablated.predict(batch.images, batch.metadata);
  std::size_t same_preds = 0;
  for (std::size_t i = 0; i < 16; ++i) {
    if (pa[i].tokens == pb[i].tokens && pa[i].logprob == pb[i].logprob && pa[i].mes == pb[i].mes) ++same_preds;
  }
  pass = pass && same_preds == 16 && !a.cams.empty();
  report.criterion(2, "fusion identity (alpha = 0 vs no_gradcam)", pass,
                   "16 random 64px images; fused features, logits and losses bit-equal: " +
                       std::string(same(a.fused, b.fused) && a.total.item() == b.total.item() ? "yes" : "no") +
                       "; identical generated captions " + std::to_string(same_preds) + "/16");
}

// ---- 3 ---------------------------------------------------------------------

DiffArray channel0_head(const DiffArray& a) {
  const std::size_t n = a.dim(0), c = a.dim(1), hw = a.dim(2) * a.dim(3);
  auto flat = diff::reshape(a, {n, c * hw});
  std::vector<double> sel(c * hw * 4, 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    for (std::size_t k = 0; k < 4; ++k) sel[p * 4 + k] = 1.0 / static_cast<double>(hw);
  }
  return diff::matmul(flat, DiffArray::from({c * hw, 4}, std::move(sel)));
}

void criterion_gradcam(Report& report) {
  std::mt19937_64 rng(41);
  double worst = 0.0;
  for (const diff::Shape& shape : std::vector<diff::Shape>{{3, 5, 8, 8}, {2, 3, 6, 6}, {4, 8, 4, 4}}) {
    auto a = random_array(rng, shape);
    const std::size_t hw = shape[2] * shape[3];
    std::vector<int> targets(shape[0]);
    for (std::size_t i = 0; i < shape[0]; ++i) targets[i] = static_cast<int>(i % 4);
    const auto cams = grad_cam(a, channel0_head, shape[2], targets);
    for (std::size_t i = 0; i < shape[0]; ++i) {
      double peak = 0.0;
      for (std::size_t p = 0; p < hw; ++p) peak = std::max(peak, a.at(i * shape[1] * hw + p));
      for (std::size_t p = 0; p < hw; ++p) {
        const double expected = std::max(a.at(i * shape[1] * hw + p), 0.0) / peak;
        worst = std::max(worst, std::abs(cams[i].heatmap[p] - expected));
      }
    }
  }

  nn::Parameters params;
  EncoderConfig ec;
  ec.channels = {4, 8};
  ec.stages = 2;
  ec.input_size = 16;
  Encoder enc(ec, params, 42);
  std::uniform_int_distribution<int> cls(0, 3);
  int bad = 0, zero_maps = 0;
  for (int batch = 0; batch < kFuzzedHeatmaps / 100; ++batch) {
    auto x = random_array(rng, {100, 3, 16, 16}, -1.0, 2.0);
    std::vector<int> targets(100);
    for (auto& t : targets) t = cls(rng);
    for (const auto& r : grad_cam(enc, x, targets)) {
      double peak = 0.0;
      bool in_range = true;
      for (double v : r.heatmap) {
        in_range = in_range && v >= 0.0 && v <= 1.0;
        peak = std::max(peak, v);
      }
      if (peak == 0.0) ++zero_maps;
      if (!in_range || !(peak == 0.0 || peak == 1.0)) ++bad;
    }
  }
  report.criterion(3, "Grad-CAM analytics", worst <= kHeatmapTol && bad == 0,
                   "channel-0 classifier max |error| " + num(worst) + " (tol " + num(kHeatmapTol) + "); " +
                       std::to_string(kFuzzedHeatmaps) + " fuzzed heatmaps, " + std::to_string(bad) +
                       " out of range or with max not in {0,1} (" + std::to_string(zero_maps) + " all-zero)");
}

// ---- 4 ---------------------------------------------------------------------

void criterion_metrics(Report& report) {
  std::mt19937_64 rng(51);
  double bleu_err = 0.0, rouge_err = 0.0;
  for (int i = 0; i < kOraclePairs; ++i) {
    const auto h = random_tokens(rng, 12), r = random_tokens(rng, 12);
    bleu_err = std::max(bleu_err, std::abs(bleu4(h, r) - oracle_bleu4(h, r)));
    const auto h2 = random_tokens(rng, 10), r2 = random_tokens(rng, 10);
    rouge_err = std::max(rouge_err, std::abs(rouge_l(h2, r2) - oracle_rouge(h2, r2)));
  }
  bool identity = true;
  for (int i = 0; i < 100; ++i) {
    const auto t = random_tokens(rng, 20);
    identity = identity && bleu4(t, t) == 1.0 && rouge_l(t, t) == 1.0;
  }
  const Tokens caption = tokenize(caption_template(all_metadata_combinations()[300]));
  identity = identity && bleu4(caption, caption) == 1.0 && rouge_l(caption, caption) == 1.0;
  report.criterion(4, "metric oracles", bleu_err <= kOracleTol && rouge_err <= kOracleTol && identity,
                   std::to_string(kOraclePairs) + " fuzz pairs: bleu4 max |error| " + num(bleu_err) +
                       ", rouge_l max |error| " + num(rouge_err) + " (tol " + num(kOracleTol) +
                       "); identity exactly 1.0: " + (identity ? "yes" : "no"));
}

// ---- 5 ---------------------------------------------------------------------

struct TrainAccuracy {
  double mes = 0.0;
  double caption_match = 0.0;
};

TrainAccuracy train_set_accuracy(const Model& model, const std::vector<Example>& examples) {
  const auto ev = evaluate(model, examples);
  std::size_t match = 0;
  for (std::size_t i = 0; i < examples.size(); ++i) {
    if (tokenize(ev.samples[i].prediction.caption) == tokenize(examples[i].record.caption)) ++match;
  }
  return {ev.report.mes_accuracy, static_cast<double>(match) / static_cast<double>(examples.size())};
}

void criterion_overfit(Report& report) {
  const auto t0 = Clock::now();
  SynthConfig sc;
  sc.image_size = 64;
  sc.samples_per_class = kOverfitPerClass;
  sc.seed = 5;
  Vocabulary vocab;
  const auto examples = in_memory_examples(sc, vocab);
  TrainConfig tc;
  tc.epochs = kOverfitEpochs;
  tc.augment = false;
  tc.seed = 5;
  const auto mc = make_model_config(Variant::full, 64, vocab.size(), tc.seed);
  std::size_t reached = 0;
  TrainOptions options;
  options.on_epoch = [&](const EpochMetrics& m) {
    if (m.epoch % 50 == 0) {
      std::cerr << "overfit epoch " << m.epoch << " loss " << m.loss.total << " acc " << m.mes_accuracy << std::endl;
    }
    if (!reached && m.mes_accuracy >= kOverfitMesAcc) reached = m.epoch;
  };
  const auto result = train(examples, {}, mc, vocab, tc, options);
  const auto model = result.checkpoint.instantiate();
  const auto acc = train_set_accuracy(*model, examples);
  const double elapsed = seconds_since(t0);
  const bool pass = acc.mes >= kOverfitMesAcc && acc.caption_match >= kOverfitCaptionMatch && elapsed < kOverfitSeconds;
  report.criterion(5, "learnability / overfit", pass,
                   std::to_string(examples.size()) + " samples, " + std::to_string(kOverfitEpochs) +
                       " epochs, no augmentation: train MES accuracy " + num(acc.mes) + " (>= " + num(kOverfitMesAcc) +
                       "), exact caption match " + num(acc.caption_match) + " (>= " + num(kOverfitCaptionMatch) +
                       "), time " + num(elapsed, "%.0f") + " s (limit " + num(kOverfitSeconds, "%.0f") + ")");
  if (reached) report.note("running train accuracy first reached the threshold at epoch " + std::to_string(reached));

  // 8 labelled images: full memorisation of the classifier.
  SynthConfig tiny = sc;
  tiny.samples_per_class = 4;
  Vocabulary tv;
  std::vector<Example> eight;
  for (auto& e : in_memory_examples(tiny, tv)) {
    if (e.record.id.ends_with("_0000") || e.record.id.ends_with("_0001")) eight.push_back(std::move(e));
  }
  TrainConfig t8 = tc;
  t8.epochs = 300;
  const auto r8 = train(eight, {}, make_model_config(Variant::full, 64, tv.size(), 5), tv, t8);
  const auto m8 = r8.checkpoint.instantiate();
  const auto a8 = train_set_accuracy(*m8, eight);
  report.supplementary("8-image overfit reaches 100% train MES accuracy", eight.size() == 8 && a8.mes == 1.0,
                       std::to_string(eight.size()) + " images, train MES accuracy " + num(a8.mes) + " after " +
                           std::to_string(t8.epochs) + " epochs");
}

// ---- 6, 7, 8 ---------------------------------------------------------------

struct AblationRun {
  fs::path dir;
  std::map<std::string, json> metrics;  // variant -> metrics.json
  std::map<std::string, double> minutes;
};

double manifest_minutes(const fs::path& dir) {
  const auto rec = read_json(dir / "run_manifest.json")["runs"]["ablate"];
  auto parse = [](const std::string& s) {
    std::tm tm{};
    std::istringstream in(s);
    in >> std::get_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
    return static_cast<double>(timegm(&tm));
  };
  return (parse(rec["finished_at"]) - parse(rec["started_at"])) / 60.0;
}

AblationRun run_ablation(const fs::path& data, const fs::path& out, std::uint64_t seed) {
  cli_run({"ablate", "--data", data.string(), "--out", out.string(), "--epochs", std::to_string(kDeskEpochs), "--seed",
           std::to_string(seed)});
  AblationRun run;
  run.dir = out;
  for (auto v : all_variants()) {
    const std::string name(to_string(v));
    run.metrics[name] = read_json(out / name / "metrics.json");
    run.minutes[name] = manifest_minutes(out / name);
  }
  return run;
}

struct OrderingOutcome {
  bool mes_ok = true;
  bool bleu_ok = true;
  std::string detail;
};

OrderingOutcome ordering(const AblationRun& run) {
  OrderingOutcome o;
  const double full_acc = run.metrics.at("full")["mes_accuracy"];
  std::string ties;
  for (const auto& [name, m] : run.metrics) {
    if (name == "full") continue;
    const double acc = m["mes_accuracy"];
    if (acc > full_acc) o.mes_ok = false;
    if (acc == full_acc) ties += " " + name;
  }
  const double nf = run.metrics.at("no_fusion")["bleu4"];
  int below = 0;
  std::string bleu_ties;
  for (const char* name : {"full", "no_cbam", "no_gradcam"}) {
    const double b = run.metrics.at(name)["bleu4"];
    if (b < nf) ++below;
    if (b == nf) bleu_ties += std::string(" ") + name;
  }
  o.bleu_ok = below <= 1;
  o.detail = "full MES acc " + num(full_acc) + (o.mes_ok ? " >= all ablations" : " below an ablation") +
             (ties.empty() ? "" : " (tied:" + ties + ")") + "; no_fusion BLEU-4 rank " + std::to_string(below + 1) +
             " from the bottom of 4" + (bleu_ties.empty() ? "" : " (tied:" + bleu_ties + ")");
  return o;
}

void note_table(Report& report, const AblationRun& run) {
  for (auto v : all_variants()) {
    const auto& m = run.metrics.at(std::string(to_string(v)));
    char buf[200];
    std::snprintf(buf, sizeof buf, "%-24s MES acc %.4f  BLEU-4 %.4f  ROUGE-L %.4f  alignment %.4f  (%.1f min)",
                  std::string(display_name(v)).c_str(), m["mes_accuracy"].get<double>(), m["bleu4"].get<double>(),
                  m["rouge_l"].get<double>(), m["alignment_score"].get<double>(),
                  run.minutes.at(std::string(to_string(v))));
    report.note(buf);
  }
}

std::vector<Example> test_examples(const fs::path& data, const Vocabulary& vocab) {
  const auto records = load_dataset(data);
  const auto split = load_split(data / "splits.json");
  std::vector<CaptionRecord> test;
  for (const auto& r : records) {
    if (split.assignment.at(r.id) == Split::test) test.push_back(r);
  }
  return load_examples(data, test, vocab);
}

void heatmap_checks(Report& report, const fs::path& data, const fs::path& ckpt) {
  const auto model = Checkpoint::load(ckpt).instantiate();
  const auto examples = test_examples(data, model->vocabulary());
  const auto ev = evaluate(*model, examples);
  std::size_t considered = 0, beats = 0;
  std::vector<HeatmapCase> trained, random;
  std::mt19937_64 rng(61);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < examples.size(); ++i) {
    const auto& e = examples[i];
    const auto& heat = ev.samples[i].prediction.cam.heatmap;
    if (!e.mask) continue;
    trained.push_back({heat, e.mask, ev.samples[i].prediction.caption});
    std::vector<double> noise(heat.size());
    double peak = 0.0;
    for (auto& v : noise) peak = std::max(peak, v = u(rng));
    for (auto& v : noise) v /= peak;
    random.push_back({noise, e.mask, ev.samples[i].prediction.caption});
    if (e.record.metadata.mes < 2) continue;
    double inside = 0.0, total = 0.0, area = 0.0;
    for (std::size_t p = 0; p < heat.size(); ++p) {
      inside += heat[p] * (*e.mask)[p];
      total += heat[p];
      area += (*e.mask)[p];
    }
    ++considered;
    const double uniform = area / static_cast<double>(heat.size());
    if (total > 0.0 && inside / total > uniform) ++beats;
  }
  const double frac = considered ? static_cast<double>(beats) / static_cast<double>(considered) : 0.0;
  report.supplementary("Grad-CAM mass inside lesion mask beats a uniform map on MES 2-3 test images",
                       frac >= kCamBeatsUniform,
                       std::to_string(beats) + "/" + std::to_string(considered) + " = " + num(frac) + " (>= " +
                           num(kCamBeatsUniform) + ")");
  const auto ht = heatmap_caption_alignment(trained), hr = heatmap_caption_alignment(random);
  report.supplementary("trained heatmaps align better than random heatmaps", ht.mean > hr.mean,
                       "heatmap_caption_alignment trained " + num(ht.mean) + " vs random " + num(hr.mean) + " over " +
                           std::to_string(ht.scored) + " test images");
}

void lambda_check(Report& report, const fs::path& data) {
  const auto records = load_dataset(data);
  const auto split = load_split(data / "splits.json");
  std::vector<CaptionRecord> tr, va;
  for (const auto& r : records) {
    const Split s = split.assignment.at(r.id);
    if (s == Split::train) tr.push_back(r);
    if (s == Split::val) va.push_back(r);
  }
  const auto vocab = build_vocabulary(tr);
  const auto train_set = load_examples(data, tr, vocab), val_set = load_examples(data, va, vocab);
  TrainConfig base;
  base.epochs = 10;
  const auto sel = select_lambda(train_set, val_set, make_model_config(Variant::full, 64, vocab.size(), 0), vocab, base,
                                 {0.0, 0.2, 1.0});
  bool lowest = true;
  std::string detail;
  for (const auto& row : sel.rows) {
    detail += "lambda " + num(row.lambda) + " val acc " + num(row.val_mes_accuracy) + "; ";
    if (row.lambda != 0.0 && row.val_mes_accuracy <= sel.rows.front().val_mes_accuracy) lowest = false;
  }
  report.supplementary("lambda grid {0, 0.2, 1}: lambda = 0 has the lowest val MES accuracy", lowest,
                       detail + "selected " + num(sel.best) + " (" + std::to_string(base.epochs) + " epochs each)");
}

void desk_scale(Report& report, const fs::path& work, const std::set<int>& only) {
  const fs::path data = work / "desk" / "data";
  cli_run({"synth", "--out", data.string(), "--per-class", std::to_string(kDeskPerClass), "--seed", "1", "--size", "64"});
  cli_run({"split", "--data", data.string(), "--seed", "1"});

  const auto records = load_dataset(data);
  const auto split = load_split(data / "splits.json");
  std::map<int, std::array<std::size_t, 3>> per_class;
  for (const auto& r : records) per_class[r.metadata.mes][static_cast<int>(split.assignment.at(r.id))]++;
  bool exact = per_class.size() == 4;
  for (const auto& [mes, c] : per_class) exact = exact && c[0] == 70 && c[1] == 15 && c[2] == 15;

  const auto run = run_ablation(data, work / "desk" / "seed0", 0);
  const auto& full = run.metrics.at("full");
  if (only.count(6)) {
    const double acc = full["mes_accuracy"], align = full["alignment_score"];
    const double minutes = run.minutes.at("full");
    report.criterion(6, "desk-scale experiment", exact && acc >= kDeskMesAcc && align >= kDeskAlignment &&
                                                     minutes * 60.0 < kDeskSeconds,
                     "400 images, split 70/15/15 exact per class: " + std::string(exact ? "yes" : "no") +
                         "; full model " + std::to_string(kDeskEpochs) + " epochs: test MES accuracy " + num(acc) +
                         " (>= " + num(kDeskMesAcc) + "), alignment " + num(align) + " (>= " + num(kDeskAlignment) +
                         "), train+eval " + num(minutes, "%.1f") + " min (limit 45)");
  }

  if (only.count(7)) {
    note_table(report, run);
    auto o = ordering(run);
    if (o.mes_ok && o.bleu_ok) {
      report.criterion(7, "ablation ordering", true, "seed 0: " + o.detail);
    } else {
      report.note("seed 0 ordering failed (" + o.detail + "); re-running seeds 1 and 2");
      int votes = 0;
      std::string detail = "seed 0: fail; ";
      for (std::uint64_t seed : {1, 2}) {
        const auto rerun = run_ablation(data, work / "desk" / ("seed" + std::to_string(seed)), seed);
        note_table(report, rerun);
        const auto r = ordering(rerun);
        const bool ok = r.mes_ok && r.bleu_ok;
        votes += ok;
        detail += "seed " + std::to_string(seed) + ": " + (ok ? "pass" : "fail") + " (" + r.detail + "); ";
      }
      report.criterion(7, "ablation ordering (3-seed majority)", votes >= 2, detail);
    }
  }

  if (only.count(8)) {
    const fs::path boot = work / "desk" / "bootstrap";
    const auto a = (run.dir / "full" / "captions.jsonl").string();
    const auto b = (run.dir / "no_fusion" / "captions.jsonl").string();
    const auto iters = std::to_string(kBootstrapIters), seed = std::to_string(kBootstrapSeed);
    cli_run({"bootstrap", "--a", a, "--b", b, "--refs", data.string(), "--iters", iters, "--seed", seed, "--metric",
             "mes_accuracy", "--out", (boot / "full_vs_no_fusion.json").string()});
    cli_run({"bootstrap", "--a", a, "--b", a, "--refs", data.string(), "--iters", iters, "--seed", seed, "--metric",
             "mes_accuracy", "--out", (boot / "control.json").string()});
    const auto r = read_json(boot / "full_vs_no_fusion.json");
    const auto c = read_json(boot / "control.json");
    const double p = r["p_value"], pc = c["p_value"];
    // a == b: every resample ties, so p = 1 and delta = 0.
    const bool control_ok = pc == 1.0 && c["observed_delta"].get<double>() == 0.0;
    report.criterion(8, "bootstrap significance (full vs no_fusion, MES accuracy)", p < kBootstrapAlpha && control_ok,
                     "n " + std::to_string(r["n"].get<int>()) + ", accuracy " + num(r["metric_a"].get<double>()) +
                         " vs " + num(r["metric_b"].get<double>()) + ", delta " +
                         num(r["observed_delta"].get<double>()) + ", p " + num(p) + " (< " + num(kBootstrapAlpha) +
                         " required); a = b control p " + num(pc) + " (null band: p = 1)");
    std::size_t differ = 0;
    std::map<std::string, int> pa, pb;
    for (const auto& [file, dst] : {std::pair{a, &pa}, std::pair{b, &pb}}) {
      std::ifstream in(file);
      std::string line;
      while (std::getline(in, line)) {
        const auto j = json::parse(line);
        (*dst)[j["id"]] = j["mes_pred"];
      }
    }
    for (const auto& [id, m] : pa) differ += pb[id] != m;
    report.note("test items where the two variants predict a different MES: " + std::to_string(differ));
  }

  try {
    heatmap_checks(report, data, run.dir / "full" / ("ckpt_" + std::to_string(kDeskEpochs) + ".bin"));
    lambda_check(report, data);
  } catch (const std::exception& e) {
    report.supplementary("trained-model checks", false, e.what());
  }
}

// ---- 9 ---------------------------------------------------------------------

void criterion_reproducibility(Report& report, const fs::path& work) {
  const fs::path root = work / "repro";
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    cli_run({"synth", "--out", (dir / "data").string(), "--per-class", "10", "--seed", "9", "--size", "32"});
    cli_run({"split", "--data", (dir / "data").string(), "--seed", "3"});
    cli_run({"train", "--data", (dir / "data").string(), "--out", (dir / "run").string(), "--epochs", "3", "--seed",
             "4", "--checkpoint-every", "1"});
    cli_run({"eval", "--ckpt", (dir / "run" / "ckpt_3.bin").string(), "--data", (dir / "data").string(), "--out",
             (dir / "eval").string()});
  }
  std::string detail;
  bool pass = true;
  for (const char* part : {"data", "run", "eval"}) {
    const auto a = tree(root / "a" / part), b = tree(root / "b" / part);
    const bool same = !a.empty() && a == b;
    pass = pass && same;
    detail += std::string(part) + " " + std::to_string(a.size()) + " files " + (same ? "identical" : "DIFFER") + "; ";
  }
  report.criterion(9, "reproducibility", pass, detail + "run manifests excluded (they carry timestamps)");
}

}  // namespace

int main(int argc, char** argv) {
  fs::path work = fs::current_path() / "acceptance_work";
  std::set<int> only = {1, 2, 3, 4, 5, 6, 7, 8, 9};
  for (int i = 1; i + 1 < argc; i += 2) {
    const std::string flag = argv[i];
    if (flag == "--work") {
      work = argv[i + 1];
    } else if (flag == "--only") {
      only.clear();
      std::stringstream ss(argv[i + 1]);
      std::string item;
      while (std::getline(ss, item, ',')) only.insert(std::stoi(item));
    } else {
      std::cerr << "usage: acceptance [--work DIR] [--only 1,2,...]" << std::endl;
      return 2;
    }
  }
  fs::remove_all(work);
  fs::create_directories(work);
  Report report(work.parent_path() / "acceptance_report.txt");
  const auto t0 = Clock::now();

  auto guarded = [&](int id, const std::function<void()>& body) {
    if (!only.count(id)) return;
    try {
      body();
    } catch (const std::exception& e) {
      report.criterion(id, "error", false, e.what());
    }
  };
  guarded(1, [&] { criterion_gradients(report); });
  guarded(2, [&] { criterion_fusion_identity(report); });
  guarded(3, [&] { criterion_gradcam(report); });
  guarded(4, [&] { criterion_metrics(report); });
  guarded(5, [&] { criterion_overfit(report); });
  if (only.count(6) || only.count(7) || only.count(8)) {
    try {
      desk_scale(report, work, only);
    } catch (const std::exception& e) {
      for (int id : {6, 7, 8}) {
        if (only.count(id) && !report.reported(id)) report.criterion(id, "error", false, e.what());
      }
    }
  }
  guarded(9, [&] { criterion_reproducibility(report, work); });
  report.note("total " + num(seconds_since(t0) / 60.0, "%.1f") + " min; " + std::to_string(report.failed()) +
              " criteria failed");
  return report.failed() == 0 ? 0 : 1;
}
