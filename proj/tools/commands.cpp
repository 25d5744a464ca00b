#include "cli.hpp"
#include "manifest.hpp"

#include "lacap/data.hpp"
#include "lacap/evalsuite.hpp"
#include "lacap/image.hpp"
#include "lacap/lesionattn.hpp"
#include "lacap/synth.hpp"
#include "lacap/trainer.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <set>
#include <sstream>

namespace lacap::cli {
namespace {

namespace fs = std::filesystem;
using nlohmann::json;

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void progress(const std::string& line) { std::cerr << line << std::endl; }

std::string fmt(const char* format, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, format, v);
  return buf;
}

const std::set<std::string> kPathOptions = {"out", "data", "ckpt", "a", "b", "refs", "splits"};

// ---- option plumbing -------------------------------------------------------

std::string scalar_text(const std::string& key, const json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number()) return v.dump();
  throw UsageError("config key '" + key + "' must be a string, number, boolean or list");
}

void apply_config(CLI::App* sub, const json& config) {
  for (const auto& [key, value] : config.items()) {
    std::string name = key;
    std::replace(name.begin(), name.end(), '_', '-');
    if (name == "config") continue;
    CLI::Option* opt = sub->get_option_no_throw("--" + name);
    if (opt == nullptr) throw UsageError("unknown config key '" + key + "' for command " + sub->get_name());
    if (opt->count() > 0) continue;
    std::vector<std::string> values;
    if (value.is_array()) {
      for (const auto& v : value) values.push_back(scalar_text(key, v));
      if (values.empty()) continue;
    } else {
      values.push_back(scalar_text(key, value));
    }
    opt->add_result(values);
    opt->run_callback();
  }
}

json option_value(const std::string& name, const std::string& text) {
  if (kPathOptions.count(name)) return text.empty() ? text : fs::absolute(text).lexically_normal().string();
  try {
    json v = json::parse(text);
    if (v.is_number() || v.is_boolean()) return v;
  } catch (const json::exception&) {
  }
  return text;
}

// Resolved value of every option, defaults included.
json snapshot(const CLI::App* sub) {
  json j = json::object();
  for (const CLI::Option* o : sub->get_options()) {
    const std::string name = o->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    if (o->get_expected_max() > 1) {
      json list = json::array();
      for (const auto& r : o->results()) list.push_back(option_value(name, r));
      j[name] = std::move(list);
      continue;
    }
    const std::string text = o->count() > 0 ? o->results().back() : o->get_default_str();
    j[name] = option_value(name, text);
  }
  return j;
}

void require(const CLI::App* sub, std::initializer_list<const char*> names) {
  for (const char* n : names) {
    if (sub->get_option(std::string("--") + n)->count() == 0) {
      throw UsageError(sub->get_name() + ": --" + n + " is required");
    }
  }
}

struct Invocation {
  std::string command;
  std::vector<std::string> argv;
  json config;
};

template <class Body>
void with_manifest(RunManifest& manifest, Body&& body) {
  manifest.begin();
  try {
    body();
  } catch (const std::exception& e) {
    manifest.fail(e.what());
    throw;
  }
  manifest.complete();
}

fs::path parent_dir(const fs::path& file) {
  const fs::path p = fs::absolute(file).parent_path();
  return p.empty() ? fs::current_path() : p;
}

void write_lines(const fs::path& file, const std::vector<json>& lines) {
  if (!file.parent_path().empty()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  for (const auto& l : lines) out << l.dump() << '\n';
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

void write_text(const fs::path& file, const std::string& text) {
  std::ofstream out(file, std::ios::binary);
  out << text;
  if (!out) throw std::runtime_error("cannot write " + file.string());
}

// ---- dataset access --------------------------------------------------------

struct DatasetView {
  fs::path root;
  std::vector<CaptionRecord> records;
  SplitAssignment split;

  std::vector<CaptionRecord> subset(Split s) const {
    std::map<std::string, const CaptionRecord*> by_id;
    for (const auto& r : records) by_id[r.id] = &r;
    std::vector<CaptionRecord> out;
    for (const auto& id : split.ids(s)) {
      auto it = by_id.find(id);
      if (it == by_id.end()) throw DataError("split file references unknown id '" + id + "'");
      out.push_back(*it->second);
    }
    return out;
  }
};

DatasetView open_dataset(const std::string& data, const std::string& splits) {
  if (data.empty()) throw UsageError("--data is required");
  DatasetView ds;
  ds.root = data;
  ds.records = load_dataset(ds.root);
  const fs::path file = splits.empty() ? ds.root / "splits.json" : fs::path(splits);
  if (!fs::exists(file)) {
    throw UsageError("split file " + file.string() + " not found; run `lacap split --data " + data + "` first");
  }
  ds.split = load_split(file);
  return ds;
}

Split split_arg(const std::string& s) {
  auto v = parse_split(s);
  if (!v) throw UsageError("unknown split '" + s + "'");
  return *v;
}

struct Prepared {
  Vocabulary vocabulary;
  std::vector<Example> train, val, test;
  std::size_t image_size = 0;
};

Prepared prepare(const DatasetView& ds) {
  Prepared p;
  const auto train_records = ds.subset(Split::train);
  if (train_records.empty()) throw DataError("training split is empty");
  p.vocabulary = build_vocabulary(train_records);
  p.train = load_examples(ds.root, train_records, p.vocabulary);
  p.val = load_examples(ds.root, ds.subset(Split::val), p.vocabulary);
  p.test = load_examples(ds.root, ds.subset(Split::test), p.vocabulary);
  p.image_size = p.train.front().image.height;
  progress("dataset: " + std::to_string(p.train.size()) + " train / " + std::to_string(p.val.size()) + " val / " +
           std::to_string(p.test.size()) + " test, " + std::to_string(p.image_size) + "px, vocabulary " +
           std::to_string(p.vocabulary.size()));
  return p;
}

std::vector<Prediction> predict_all(const Model& model, const std::vector<Example>& examples,
                                    const GenerateOptions& options, std::size_t batch_size) {
  std::vector<Prediction> out;
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t end = std::min(examples.size(), start + batch_size);
    std::vector<Tensor3> images;
    std::vector<ClinicalMetadata> meta;
    for (std::size_t i = start; i < end; ++i) {
      images.push_back(examples[i].image);
      meta.push_back(examples[i].record.metadata);
    }
    auto batch = model.predict(images, meta, options);
    for (auto& p : batch) out.push_back(std::move(p));
  }
  return out;
}

json caption_line(const std::string& id, const Prediction& p) {
  return {{"id", id},
          {"prompt", p.prompt},
          {"caption", p.caption},
          {"truncated", p.truncated},
          {"logprob", p.logprob},
          {"mes_pred", p.mes}};
}

std::unique_ptr<Model> load_model(const std::string& ckpt) {
  if (ckpt.empty()) throw UsageError("--ckpt is required");
  if (!fs::exists(ckpt)) throw UsageError("checkpoint " + ckpt + " not found");
  return Checkpoint::load(ckpt).instantiate();
}

// metrics.json, per_sample.jsonl and captions.jsonl under `dir`.
MetricReport write_evaluation(const Model& model, const std::vector<Example>& examples, const GenerateOptions& options,
                              std::size_t batch_size, const fs::path& dir, const json& context,
                              RunManifest& manifest) {
  const Evaluation ev = evaluate(model, examples, options, batch_size);
  json metrics = json::parse(ev.report.to_json());
  for (const auto& [k, v] : context.items()) metrics[k] = v;
  fs::create_directories(dir);
  write_text(dir / "metrics.json", metrics.dump(2) + "\n");

  std::vector<json> per_sample, captions;
  for (std::size_t i = 0; i < ev.samples.size(); ++i) {
    const auto& s = ev.samples[i];
    const auto& e = examples[i];
    per_sample.push_back({{"id", s.id},
                          {"mes_true", e.record.metadata.mes},
                          {"mes_pred", s.prediction.mes},
                          {"caption", s.prediction.caption},
                          {"reference", e.record.caption},
                          {"bleu4", s.bleu4},
                          {"rouge_l", s.rouge_l},
                          {"alignment", s.alignment},
                          {"token_precision", s.token_precision},
                          {"heatmap_alignment", s.heatmap_alignment ? json(*s.heatmap_alignment) : json(nullptr)}});
    captions.push_back(caption_line(s.id, s.prediction));
  }
  write_lines(dir / "per_sample.jsonl", per_sample);
  write_lines(dir / "captions.jsonl", captions);
  for (const char* f : {"metrics.json", "per_sample.jsonl", "captions.jsonl"}) manifest.add_output(fs::absolute(dir / f));
  return ev.report;
}

TrainResult run_training(const Prepared& p, const TrainConfig& config, const fs::path& out,
                         std::size_t checkpoint_every, RunManifest& manifest) {
  const ModelConfig model_config = make_model_config(config.variant, p.image_size, p.vocabulary.size(), config.seed);
  TrainOptions options;
  options.out_dir = out;
  options.checkpoint_every = checkpoint_every;
  const std::string tag(to_string(config.variant));
  options.on_epoch = [&](const EpochMetrics& m) {
    progress(tag + " epoch " + std::to_string(m.epoch) + " " + m.split + " loss " + fmt("%.4f", m.loss.total) +
             " caption " + fmt("%.4f", m.loss.caption) + " mes " + fmt("%.4f", m.loss.mes) + " acc " +
             fmt("%.3f", m.mes_accuracy));
  };
  fs::create_directories(out);
  auto declare = [&] {
    for (const auto& entry : fs::directory_iterator(out)) {
      const std::string name = entry.path().filename().string();
      if (name == "metrics.csv" || name == "diverged.bin" || (name.rfind("ckpt_", 0) == 0 && entry.path().extension() == ".bin")) {
        manifest.add_output(fs::absolute(entry.path()));
      }
    }
  };
  try {
    auto result = train(p.train, p.val, model_config, p.vocabulary, config, options);
    declare();
    return result;
  } catch (const TrainingDiverged&) {
    declare();
    throw;
  }
}

// ---- commands --------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t per_class = 25;
  std::uint64_t seed = 0;
  std::size_t size = 64;
  double noise = 0.2;
};

void run_synth(const SynthArgs& a, const Invocation& inv) {
  SynthConfig config{a.size, a.per_class, a.seed, a.noise};
  config.validate();
  RunManifest manifest(a.out, inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    progress("synth: " + std::to_string(4 * a.per_class) + " images at " + std::to_string(a.size) + "px -> " + a.out);
    const auto records = generate(config, a.out);
    manifest.add_output(std::string(kManifestName));
    for (const auto& r : records) {
      manifest.add_output(r.image_path);
      if (r.lesion_mask_path) manifest.add_output(*r.lesion_mask_path);
    }
  });
}

struct SplitArgs {
  std::string data;
  std::uint64_t seed = 0;
};

void run_split(const SplitArgs& a, const Invocation& inv) {
  const auto records = load_dataset(a.data);
  const auto split = stratified_split(records, {}, a.seed);
  RunManifest manifest(a.data, inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    save_split(split, fs::path(a.data) / "splits.json");
    manifest.add_output("splits.json");
    progress("split: " + std::to_string(split.ids(Split::train).size()) + " train / " +
             std::to_string(split.ids(Split::val).size()) + " val / " + std::to_string(split.ids(Split::test).size()) +
             " test");
  });
}

struct TrainArgs {
  std::string data, out, splits;
  std::string variant = "full";
  double lambda = 0.2;
  std::size_t epochs = 50;
  double lr = 3e-4;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  bool augment = true;
  double clip_norm = 5.0;
  std::size_t checkpoint_every = 0;

  TrainConfig config(Variant v) const {
    TrainConfig c;
    c.lambda = lambda;
    c.learning_rate = lr;
    c.batch_size = batch_size;
    c.epochs = epochs;
    c.seed = seed;
    c.variant = v;
    c.augment = augment;
    c.clip_norm = clip_norm;
    c.validate();
    return c;
  }
};

Variant variant_arg(const std::string& s) {
  auto v = parse_variant(s);
  if (!v) throw UsageError("unknown variant '" + s + "'");
  return *v;
}

void add_train_options(CLI::App* sub, TrainArgs& a) {
  sub->add_option("--data", a.data, "dataset directory");
  sub->add_option("--splits", a.splits, "split file (default: DATA/splits.json)");
  sub->add_option("--lambda", a.lambda, "weight of the MES loss");
  sub->add_option("--epochs", a.epochs);
  sub->add_option("--lr", a.lr, "Adam learning rate");
  sub->add_option("--batch-size", a.batch_size);
  sub->add_option("--seed", a.seed, "initialisation and shuffling seed");
  sub->add_option("--augment", a.augment, "flip / brightness / crop augmentation");
  sub->add_option("--clip-norm", a.clip_norm, "global gradient norm limit, 0 disables");
}

void run_train(const TrainArgs& a, const Invocation& inv) {
  const TrainConfig config = a.config(variant_arg(a.variant));
  const auto ds = open_dataset(a.data, a.splits);
  const Prepared p = prepare(ds);
  RunManifest manifest(a.out, inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] { run_training(p, config, a.out, a.checkpoint_every, manifest); });
}

struct CaptionArgs {
  std::string ckpt, data, splits, out;
  std::string split = "test";
  std::size_t beam = 1;
  std::size_t batch_size = 16;
};

void run_caption(const CaptionArgs& a, const Invocation& inv) {
  const auto model = load_model(a.ckpt);
  const auto ds = open_dataset(a.data, a.splits);
  const auto examples = load_examples(ds.root, ds.subset(split_arg(a.split)), model->vocabulary());
  RunManifest manifest(parent_dir(a.out), inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    progress("caption: " + std::to_string(examples.size()) + " " + a.split + " images");
    const auto preds = predict_all(*model, examples, {a.beam}, a.batch_size);
    std::vector<json> lines;
    for (std::size_t i = 0; i < preds.size(); ++i) lines.push_back(caption_line(examples[i].record.id, preds[i]));
    write_lines(a.out, lines);
    manifest.add_output(fs::absolute(a.out));
  });
}

struct GradcamArgs {
  std::string ckpt, data, out;
  std::vector<std::string> ids;
};

void run_gradcam(const GradcamArgs& a, const Invocation& inv) {
  if (a.ids.empty()) throw UsageError("gradcam: --ids is empty");
  const auto model = load_model(a.ckpt);
  const auto records = load_dataset(a.data);
  std::map<std::string, CaptionRecord> by_id;
  for (const auto& r : records) by_id[r.id] = r;
  std::vector<CaptionRecord> selected;
  for (const auto& id : a.ids) {
    auto it = by_id.find(id);
    if (it == by_id.end()) throw DataError("unknown id '" + id + "' in " + a.data);
    selected.push_back(it->second);
  }
  const auto examples = load_examples(a.data, selected, model->vocabulary());
  RunManifest manifest(a.out, inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    const auto preds = predict_all(*model, examples, {}, 16);
    for (std::size_t i = 0; i < preds.size(); ++i) {
      const Image image = read_png(fs::path(a.data) / selected[i].image_path);
      manifest.add_output(fs::absolute(write_cam_panel(image, preds[i].cam, selected[i].id, a.out)));
      progress("gradcam: " + selected[i].id + " predicted MES " + std::to_string(preds[i].mes));
    }
  });
}

struct EvalArgs {
  std::string ckpt, data, splits, out;
  std::string split = "test";
  std::size_t beam = 1;
  std::size_t batch_size = 16;
};

void run_eval(const EvalArgs& a, const Invocation& inv) {
  const auto model = load_model(a.ckpt);
  const auto ds = open_dataset(a.data, a.splits);
  const auto examples = load_examples(ds.root, ds.subset(split_arg(a.split)), model->vocabulary());
  RunManifest manifest(a.out, inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    const json context = {{"split", a.split},
                          {"variant", to_string(model->config().variant)},
                          {"beam_width", a.beam}};
    const auto report = write_evaluation(*model, examples, {a.beam}, a.batch_size, a.out, context, manifest);
    progress("eval: n " + std::to_string(report.n) + " mes_accuracy " + fmt("%.4f", report.mes_accuracy) + " bleu4 " +
             fmt("%.4f", report.bleu4) + " rouge_l " + fmt("%.4f", report.rouge_l) + " alignment " +
             fmt("%.4f", report.alignment_score));
  });
}

struct AblateArgs {
  TrainArgs train;
  std::vector<std::string> variants;
  std::size_t beam = 1;
};

std::string ablation_table(const std::vector<std::pair<Variant, MetricReport>>& rows) {
  std::size_t width = std::string("Variant").size();
  for (const auto& [v, r] : rows) width = std::max(width, display_name(v).size());
  std::ostringstream out;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-*s  %7s  %7s  %7s\n", int(width), "Variant", "MES Acc", "BLEU-4", "ROUGE-L");
  out << buf;
  for (const auto& [v, r] : rows) {
    std::snprintf(buf, sizeof buf, "%-*s  %7.4f  %7.4f  %7.4f\n", int(width), std::string(display_name(v)).c_str(),
                  r.mes_accuracy, r.bleu4, r.rouge_l);
    out << buf;
  }
  return out.str();
}

void run_ablate(const AblateArgs& a, const Invocation& inv) {
  if (a.train.out.empty()) throw UsageError("ablate: --out is required");
  std::vector<Variant> variants;
  for (const auto& s : a.variants) variants.push_back(variant_arg(s));
  if (variants.empty()) variants = all_variants();
  for (auto v : variants) a.train.config(v);

  const auto ds = open_dataset(a.train.data, a.train.splits);
  const Prepared p = prepare(ds);
  const fs::path root = a.train.out;
  RunManifest manifest(root, inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    std::vector<std::pair<Variant, MetricReport>> rows;
    for (auto v : variants) {
      const fs::path dir = root / std::string(to_string(v));
      json config = inv.config;
      config["variant"] = std::string(to_string(v));
      RunManifest run(dir, inv.command, inv.argv, config);
      with_manifest(run, [&] {
        auto result = run_training(p, a.train.config(v), dir, a.train.checkpoint_every, run);
        const auto model = result.checkpoint.instantiate();
        const json context = {{"split", "test"},
                              {"variant", std::string(to_string(v))},
                              {"beam_width", a.beam}};
        const auto report = write_evaluation(*model, p.test, {a.beam}, 16, dir, context, run);
        progress(std::string(display_name(v)) + ": mes_accuracy " + fmt("%.4f", report.mes_accuracy) + " bleu4 " +
                 fmt("%.4f", report.bleu4) + " rouge_l " + fmt("%.4f", report.rouge_l));
        rows.emplace_back(v, report);
      });
      manifest.add_output(fs::absolute(dir));
    }
    std::string csv = "variant,name,mes_accuracy,bleu4,rouge_l\n";
    for (const auto& [v, r] : rows) {
      char buf[256];
      std::snprintf(buf, sizeof buf, "%s,%s,%.17g,%.17g,%.17g\n", std::string(to_string(v)).c_str(),
                    std::string(display_name(v)).c_str(), r.mes_accuracy, r.bleu4, r.rouge_l);
      csv += buf;
    }
    write_text(root / "ablation.csv", csv);
    const std::string table = ablation_table(rows);
    write_text(root / "ablation.txt", table);
    manifest.add_output("ablation.csv");
    manifest.add_output("ablation.txt");
    progress(table);
  });
}

struct BootstrapArgs {
  std::string a, b, refs, out;
  int iters = 1000;
  std::uint64_t seed = 0;
  std::string metric = "mes_accuracy";
};

std::vector<json> read_jsonl(const std::string& file) {
  std::ifstream in(file);
  if (!in) throw UsageError("cannot open " + file);
  std::vector<json> rows;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      rows.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw DataError(file + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return rows;
}

std::map<std::string, json> captions_by_id(const std::string& file, std::vector<std::string>* order) {
  std::map<std::string, json> out;
  for (auto& row : read_jsonl(file)) {
    if (!row.contains("id") || !row.contains("caption") || !row.contains("mes_pred")) {
      throw DataError(file + ": rows need id, caption and mes_pred");
    }
    const std::string id = row["id"];
    if (order) order->push_back(id);
    if (!out.emplace(id, std::move(row)).second) throw DataError(file + ": duplicate id '" + id + "'");
  }
  return out;
}

std::map<std::string, CaptionRecord> reference_records(const std::string& refs) {
  std::vector<CaptionRecord> records;
  if (fs::is_directory(refs)) {
    records = load_dataset(refs);
  } else {
    std::ifstream in(refs);
    if (!in) throw UsageError("cannot open " + refs);
    std::string line;
    std::size_t n = 0;
    while (std::getline(in, line)) {
      ++n;
      if (!line.empty()) records.push_back(record_from_json_line(line, n));
    }
  }
  std::map<std::string, CaptionRecord> out;
  for (auto& r : records) out[r.id] = std::move(r);
  return out;
}

void run_bootstrap(const BootstrapArgs& a, const Invocation& inv) {
  CorpusMetric metric;
  if (a.metric == "mes_accuracy") {
    metric = corpus_exact_match;
  } else if (a.metric == "bleu4") {
    metric = corpus_bleu4;
  } else if (a.metric == "rouge_l") {
    metric = corpus_rouge_l;
  } else {
    throw UsageError("unknown metric '" + a.metric + "' (mes_accuracy, bleu4, rouge_l)");
  }
  std::vector<std::string> order;
  const auto sys_a = captions_by_id(a.a, &order);
  const auto sys_b = captions_by_id(a.b, nullptr);
  const auto refs = reference_records(a.refs);
  if (sys_a.size() != sys_b.size()) throw DataError("--a and --b cover different items");
  const bool labels = a.metric == "mes_accuracy";
  std::vector<std::string> out_a, out_b, out_ref;
  for (const auto& id : order) {
    auto ib = sys_b.find(id);
    auto ir = refs.find(id);
    if (ib == sys_b.end()) throw DataError("id '" + id + "' missing from " + a.b);
    if (ir == refs.end()) throw DataError("id '" + id + "' missing from " + a.refs);
    const json& ra = sys_a.at(id);
    if (labels) {
      out_a.push_back(std::to_string(ra["mes_pred"].get<int>()));
      out_b.push_back(std::to_string(ib->second["mes_pred"].get<int>()));
      out_ref.push_back(std::to_string(ir->second.metadata.mes));
    } else {
      out_a.push_back(ra["caption"]);
      out_b.push_back(ib->second["caption"]);
      out_ref.push_back(ir->second.caption);
    }
  }
  RunManifest manifest(parent_dir(a.out), inv.command, inv.argv, inv.config);
  with_manifest(manifest, [&] {
    const auto result = paired_bootstrap(a.metric, metric, out_a, out_b, out_ref, a.iters, a.seed);
    json j = json::parse(result.to_json());
    j["n"] = order.size();
    j["metric_a"] = metric(out_a, out_ref);
    j["metric_b"] = metric(out_b, out_ref);
    write_text(a.out, j.dump(2) + "\n");
    manifest.add_output(fs::absolute(a.out));
    progress("bootstrap " + a.metric + ": delta " + fmt("%.4f", result.observed_delta) + " p " +
             fmt("%.4f", result.p_value));
  });
}

}  // namespace

int run(const std::vector<std::string>& args) {
  CLI::App app{"Lesion-aware endoscopy captioning: data, training and evaluation", "lacap"};
  app.option_defaults()->always_capture_default();
  app.require_subcommand(1);

  std::string config_path;
  auto with_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "JSON file of option values or a run manifest; flags take precedence");
    return sub;
  };

  SynthArgs synth;
  auto* s = with_config(app.add_subcommand("synth", "generate a synthetic dataset"));
  s->add_option("--out", synth.out, "dataset directory");
  s->add_option("--per-class", synth.per_class);
  s->add_option("--seed", synth.seed);
  s->add_option("--size", synth.size, "image side in pixels");
  s->add_option("--noise", synth.noise, "noise level in [0,1]");

  SplitArgs split;
  auto* sp = with_config(app.add_subcommand("split", "write a MES-stratified 70/15/15 split"));
  sp->add_option("--data", split.data, "dataset directory");
  sp->add_option("--seed", split.seed);

  TrainArgs train;
  auto* t = with_config(app.add_subcommand("train", "train one model variant"));
  add_train_options(t, train);
  t->add_option("--variant", train.variant)->check(CLI::IsMember({"full", "no_cbam", "no_gradcam", "no_prompts",
                                                                  "no_fusion", "small_backbone"}));
  t->add_option("--out", train.out, "run directory");
  t->add_option("--checkpoint-every", train.checkpoint_every, "epochs between checkpoints, 0 = final only");

  CaptionArgs caption;
  auto* c = with_config(app.add_subcommand("caption", "caption a split with a checkpoint"));
  c->add_option("--ckpt", caption.ckpt);
  c->add_option("--data", caption.data);
  c->add_option("--splits", caption.splits);
  c->add_option("--split", caption.split)->check(CLI::IsMember({"train", "val", "test"}));
  c->add_option("--out", caption.out, "JSONL file");
  c->add_option("--beam", caption.beam, "beam width, 1 = greedy")->check(CLI::PositiveNumber);
  c->add_option("--batch-size", caption.batch_size)->check(CLI::PositiveNumber);

  GradcamArgs gradcam;
  auto* g = with_config(app.add_subcommand("gradcam", "write Grad-CAM overlay panels"));
  g->add_option("--ckpt", gradcam.ckpt);
  g->add_option("--data", gradcam.data);
  g->add_option("--ids", gradcam.ids, "comma-separated record ids")->delimiter(',');
  g->add_option("--out", gradcam.out, "output directory");

  EvalArgs eval;
  auto* e = with_config(app.add_subcommand("eval", "score a checkpoint on a split"));
  e->add_option("--ckpt", eval.ckpt);
  e->add_option("--data", eval.data);
  e->add_option("--splits", eval.splits);
  e->add_option("--split", eval.split)->check(CLI::IsMember({"train", "val", "test"}));
  e->add_option("--out", eval.out, "output directory");
  e->add_option("--beam", eval.beam)->check(CLI::PositiveNumber);
  e->add_option("--batch-size", eval.batch_size)->check(CLI::PositiveNumber);

  AblateArgs ablate;
  auto* ab = with_config(app.add_subcommand("ablate", "train and score every variant"));
  add_train_options(ab, ablate.train);
  ab->add_option("--out", ablate.train.out, "output directory");
  ab->add_option("--variants", ablate.variants, "comma-separated subset (default: all six)")->delimiter(',');
  ab->add_option("--beam", ablate.beam)->check(CLI::PositiveNumber);

  BootstrapArgs boot;
  auto* b = with_config(app.add_subcommand("bootstrap", "paired bootstrap between two caption files"));
  b->add_option("--a", boot.a, "captions JSONL of system A");
  b->add_option("--b", boot.b, "captions JSONL of system B");
  b->add_option("--refs", boot.refs, "dataset directory or manifest.jsonl");
  b->add_option("--iters", boot.iters)->check(CLI::PositiveNumber);
  b->add_option("--seed", boot.seed);
  b->add_option("--metric", boot.metric)->check(CLI::IsMember({"mes_accuracy", "bleu4", "rouge_l"}));
  b->add_option("--out", boot.out, "result JSON file");

  try {
    app.parse(std::vector<std::string>(args.rbegin(), args.rend()));
  } catch (const CLI::ParseError& err) {
    return app.exit(err, std::cerr, std::cerr);
  }

  CLI::App* sub = app.get_subcommands().front();
  try {
    if (!config_path.empty()) apply_config(sub, config_from_file(config_path, sub->get_name()));
    const Invocation inv{sub->get_name(), args, snapshot(sub)};
    if (sub == s) {
      require(s, {"out"});
      run_synth(synth, inv);
    } else if (sub == sp) {
      require(sp, {"data"});
      run_split(split, inv);
    } else if (sub == t) {
      require(t, {"data", "out"});
      run_train(train, inv);
    } else if (sub == c) {
      require(c, {"ckpt", "data", "out"});
      run_caption(caption, inv);
    } else if (sub == g) {
      require(g, {"ckpt", "data", "ids", "out"});
      run_gradcam(gradcam, inv);
    } else if (sub == e) {
      require(e, {"ckpt", "data", "out"});
      run_eval(eval, inv);
    } else if (sub == ab) {
      require(ab, {"data", "out"});
      run_ablate(ablate, inv);
    } else if (sub == b) {
      require(b, {"a", "b", "refs", "out"});
      run_bootstrap(boot, inv);
    }
  } catch (const UsageError& err) {
    std::cerr << "error: " << err.what() << std::endl;
    return 2;
  } catch (const CLI::Error& err) {
    std::cerr << "error: " << err.what() << std::endl;
    return 2;
  } catch (const std::exception& err) {
    std::cerr << "error: " << err.what() << std::endl;
    return 1;
  }
  return 0;
}

}  // namespace lacap::cli
