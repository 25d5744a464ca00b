#include "lacap/captioner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <stdexcept>

namespace lacap {

std::string build_prompt(const ClinicalMetadata& m) {
  std::ostringstream out;
  out << "MES-" << m.mes << "; bleeding: " << (m.bleeding ? "yes" : "no") << "; erythema: " << to_string(m.erythema)
      << "; friability: " << to_string(m.friability) << "; ulceration: " << to_string(m.ulceration)
      << "; vascular: " << to_string(m.vascular_pattern);
  return out.str();
}

ClinicalMetadata parse_prompt(const std::string& prompt) {
  auto fail = [&](const std::string& why) -> DataError {
    return DataError("prompt \"" + prompt + "\": " + why);
  };
  std::vector<std::string> fields;
  std::size_t start = 0;
  while (true) {
    const auto pos = prompt.find("; ", start);
    fields.push_back(prompt.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
    if (pos == std::string::npos) break;
    start = pos + 2;
  }
  if (fields.size() != 6) throw fail("expected 6 fields");
  ClinicalMetadata m;
  if (fields[0].size() != 5 || fields[0].rfind("MES-", 0) != 0 || fields[0][4] < '0' || fields[0][4] > '3') {
    throw fail("bad MES field");
  }
  m.mes = fields[0][4] - '0';
  auto value = [&](std::size_t i, const std::string& key) {
    const std::string head = key + ": ";
    if (fields[i].rfind(head, 0) != 0) throw fail("expected field " + key);
    return fields[i].substr(head.size());
  };
  const auto bleeding = value(1, "bleeding");
  if (bleeding != "yes" && bleeding != "no") throw fail("bleeding must be yes or no");
  m.bleeding = bleeding == "yes";
  auto need = [&](auto parsed, const std::string& key) {
    if (!parsed) throw fail("bad " + key + " level");
    return *parsed;
  };
  m.erythema = need(parse_erythema(value(2, "erythema")), "erythema");
  m.friability = need(parse_friability(value(3, "friability")), "friability");
  m.ulceration = need(parse_ulceration(value(4, "ulceration")), "ulceration");
  m.vascular_pattern = need(parse_vascular(value(5, "vascular")), "vascular");
  return m;
}

void DecoderConfig::validate() const {
  if (d_model == 0 || heads == 0 || d_model % heads != 0) {
    throw std::invalid_argument("decoder: d_model must be divisible by heads");
  }
  if (d_model % 4 != 0) throw std::invalid_argument("decoder: d_model must be a multiple of 4");
  if (decoder_layers == 0 || ffn_dim == 0 || max_len == 0) throw std::invalid_argument("decoder: empty dimension");
  if (vocab_size <= static_cast<std::size_t>(Vocabulary::kNumSpecial)) {
    throw std::invalid_argument("decoder: vocab_size must exceed the special tokens");
  }
}

namespace {

// Copies rows of axis 0 in groups of `group` consecutive rows.
DiffArray gather(const DiffArray& x, const std::vector<std::size_t>& index, std::size_t group) {
  const std::size_t block = x.size() / x.dim(0) * group;
  std::vector<double> out;
  out.reserve(index.size() * block);
  const auto data = x.data();
  for (std::size_t i : index) out.insert(out.end(), data.begin() + i * block, data.begin() + (i + 1) * block);
  auto shape = x.shape();
  shape[0] = index.size() * group;
  return DiffArray::from(std::move(shape), std::move(out));
}

bool selectable(int token) { return token != Vocabulary::kPad && token != Vocabulary::kBos; }

}  // namespace

DecoderMemory DecoderMemory::select(const std::vector<std::size_t>& index) const {
  DecoderMemory out;
  out.tokens = gather(tokens, index, 1);
  for (const auto& kv : layers) {
    const std::size_t group = kv.keys.dim(0) / tokens.dim(0);
    out.layers.push_back({gather(kv.keys, index, group), gather(kv.values, index, group)});
  }
  return out;
}

Captioner::Captioner(const DecoderConfig& config, std::size_t visual_channels, bool use_prompt,
                     nn::Parameters& params, std::uint64_t seed)
    : config_(config), use_prompt_(use_prompt) {
  config_.validate();
  const std::size_t d = config_.d_model;
  embedding_ = params.add_normal("captioner.embedding", {config_.vocab_size, d}, 1.0, seed);
  visual_projection_ = nn::Linear::create(params, "captioner.visual_projection", visual_channels, d, seed);
  if (use_prompt_) {
    for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
      const std::string p = "captioner.prompt" + std::to_string(l);
      prompt_layers_.push_back({nn::LayerNorm::create(params, p + ".norm1", d),
                                nn::LayerNorm::create(params, p + ".norm2", d),
                                nn::MultiHeadAttention::create(params, p + ".attention", d, config_.heads, seed),
                                nn::FeedForward::create(params, p + ".ffn", d, config_.ffn_dim, seed)});
    }
    prompt_norm_ = nn::LayerNorm::create(params, "captioner.prompt_norm", d);
  }
  for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
    const std::string p = "captioner.decoder" + std::to_string(l);
    decoder_layers_.push_back({nn::LayerNorm::create(params, p + ".norm1", d),
                               nn::LayerNorm::create(params, p + ".norm2", d),
                               nn::LayerNorm::create(params, p + ".norm3", d),
                               nn::MultiHeadAttention::create(params, p + ".self_attention", d, config_.heads, seed),
                               nn::MultiHeadAttention::create(params, p + ".cross_attention", d, config_.heads, seed),
                               nn::FeedForward::create(params, p + ".ffn", d, config_.ffn_dim, seed)});
  }
  final_norm_ = nn::LayerNorm::create(params, "captioner.final_norm", d);
  output_ = nn::Linear::create(params, "captioner.output", d, config_.vocab_size, seed);
}

DiffArray Captioner::project_visual(const DiffArray& features, bool add_positions) const {
  if (features.rank() != 4 || features.dim(1) != visual_projection_.weight.dim(0)) {
    throw diff::ShapeError("project_visual", features.shape(), visual_projection_.weight.shape());
  }
  const std::size_t n = features.dim(0), c = features.dim(1), h = features.dim(2), w = features.dim(3);
  auto tokens = diff::reshape(diff::permute(features, {0, 2, 3, 1}), {n, h * w, c});
  auto projected = diff::layer_norm(visual_projection_(tokens), 2, 1e-12);
  if (!add_positions) return projected;
  return diff::add(projected, nn::sinusoidal_2d(h, w, config_.d_model));
}

DiffArray Captioner::embed(const std::vector<std::vector<int>>& ids) const {
  const std::size_t n = ids.size(), t = ids.front().size();
  if (t > config_.max_len) {
    throw diff::ShapeError("captioner", "sequence of length " + std::to_string(t) + " exceeds max_len " +
                                            std::to_string(config_.max_len));
  }
  std::vector<int> flat;
  flat.reserve(n * t);
  for (const auto& row : ids) {
    if (row.size() != t) throw diff::ShapeError("captioner", "token rows differ in length");
    for (int id : row) {
      if (id < 0 || static_cast<std::size_t>(id) >= config_.vocab_size) {
        throw std::out_of_range("captioner: token id " + std::to_string(id) + " outside vocabulary");
      }
    }
    flat.insert(flat.end(), row.begin(), row.end());
  }
  auto x = diff::reshape(diff::embedding_lookup(embedding_, flat), {n, t, config_.d_model});
  return diff::add(x, nn::sinusoidal_1d(t, config_.d_model));
}

DiffArray Captioner::encode_prompt(const std::vector<std::vector<int>>& prompts) const {
  if (!use_prompt_) throw std::logic_error("captioner: prompt encoder disabled");
  DiffArray x = embed(prompts);
  for (const auto& layer : prompt_layers_) {
    auto h = layer.norm1(x);
    x = diff::add(x, layer.attention(h, h, false));
    x = diff::add(x, layer.ffn(layer.norm2(x)));
  }
  return prompt_norm_(x);
}

DecoderMemory Captioner::memory(const std::vector<std::vector<int>>& prompts, const DiffArray& visual_tokens) const {
  DecoderMemory mem;
  mem.tokens = visual_tokens;
  if (use_prompt_) {
    if (prompts.size() != visual_tokens.dim(0)) throw std::invalid_argument("captioner: one prompt per image required");
    if (!prompts.front().empty()) mem.tokens = diff::concat({encode_prompt(prompts), visual_tokens}, 1);
  }
  for (const auto& layer : decoder_layers_) mem.layers.push_back(layer.cross_attention.project_memory(mem.tokens));
  return mem;
}

DiffArray Captioner::decode(const DecoderMemory& memory, const std::vector<std::vector<int>>& inputs) const {
  if (inputs.size() != memory.batch()) throw std::invalid_argument("captioner: batch mismatch");
  DiffArray x = embed(inputs);
  for (std::size_t l = 0; l < decoder_layers_.size(); ++l) {
    const auto& layer = decoder_layers_[l];
    auto h = layer.norm1(x);
    x = diff::add(x, layer.self_attention(h, h, true));
    x = diff::add(x, layer.cross_attention(layer.norm2(x), memory.layers[l], false));
    x = diff::add(x, layer.ffn(layer.norm3(x)));
  }
  return output_(final_norm_(x));
}

DiffArray Captioner::decode_step(const std::vector<int>& prompt, const DiffArray& visual_tokens,
                                 const std::vector<int>& prefix) const {
  if (prefix.empty() || prefix.front() != Vocabulary::kBos) {
    throw std::invalid_argument("decode_step: prefix must start with BOS");
  }
  if (prefix.size() > config_.max_len) {
    throw std::invalid_argument("decode_step: prefix of " + std::to_string(prefix.size() - 1) +
                                " tokens leaves no room under max_len " + std::to_string(config_.max_len));
  }
  auto visual = visual_tokens.rank() == 2
                    ? diff::reshape(visual_tokens, {1, visual_tokens.dim(0), visual_tokens.dim(1)})
                    : visual_tokens;
  auto logits = decode(memory({prompt}, visual), {prefix});
  const std::size_t t = prefix.size(), v = config_.vocab_size;
  auto flat = diff::reshape(logits, {t, v});
  std::vector<int> last = {static_cast<int>(t - 1)};
  return diff::reshape(diff::embedding_lookup(flat, last), {v});
}

DiffArray Captioner::caption_loss(const DecoderMemory& memory, const std::vector<std::vector<int>>& captions) const {
  std::size_t longest = 0;
  for (const auto& c : captions) longest = std::max(longest, c.size() + 1);
  if (longest > config_.max_len) throw std::invalid_argument("caption_loss: caption longer than max_len");
  std::vector<std::vector<int>> inputs;
  std::vector<int> targets;
  for (const auto& c : captions) {
    std::vector<int> in(longest, Vocabulary::kPad);
    in[0] = Vocabulary::kBos;
    std::copy(c.begin(), c.end(), in.begin() + 1);
    inputs.push_back(std::move(in));
    for (std::size_t i = 0; i < longest; ++i) {
      targets.push_back(i < c.size() ? c[i] : (i == c.size() ? Vocabulary::kEos : Vocabulary::kPad));
    }
  }
  auto logits = decode(memory, inputs);
  auto flat = diff::reshape(logits, {captions.size() * longest, config_.vocab_size});
  return diff::cross_entropy(flat, targets, Vocabulary::kPad);
}

std::vector<double> Captioner::next_logprobs(const DecoderMemory& memory,
                                             const std::vector<std::vector<int>>& prefixes) const {
  diff::NoGradGuard no_grad;
  const auto logits = decode(memory, prefixes);
  const std::size_t n = prefixes.size(), t = prefixes.front().size(), v = config_.vocab_size;
  std::vector<double> out(n * v);
  for (std::size_t i = 0; i < n; ++i) {
    auto row = logits.data().subspan((i * t + t - 1) * v, v);
    const double peak = *std::max_element(row.begin(), row.end());
    double sum = 0.0;
    for (double z : row) sum += std::exp(z - peak);
    const double log_z = peak + std::log(sum);
    for (std::size_t k = 0; k < v; ++k) out[i * v + k] = row[k] - log_z;
  }
  return out;
}

std::vector<GeneratedCaption> Captioner::greedy(const DecoderMemory& memory) const {
  const std::size_t n = memory.batch(), v = config_.vocab_size;
  std::vector<GeneratedCaption> out(n);
  std::vector<std::vector<int>> prefixes(n, std::vector<int>{Vocabulary::kBos});
  std::vector<std::size_t> active(n);
  for (std::size_t i = 0; i < n; ++i) active[i] = i;
  for (std::size_t step = 0; step < config_.max_len && !active.empty(); ++step) {
    const auto mem = active.size() == n ? memory : memory.select(active);
    std::vector<std::vector<int>> rows;
    for (std::size_t i : active) rows.push_back(prefixes[i]);
    const auto lp = next_logprobs(mem, rows);
    std::vector<std::size_t> still;
    for (std::size_t a = 0; a < active.size(); ++a) {
      const std::size_t i = active[a];
      int best = -1;
      for (std::size_t k = 0; k < v; ++k) {
        if (selectable(static_cast<int>(k)) && (best < 0 || lp[a * v + k] > lp[a * v + static_cast<std::size_t>(best)])) {
          best = static_cast<int>(k);
        }
      }
      out[i].logprob += lp[a * v + static_cast<std::size_t>(best)];
      if (best == Vocabulary::kEos) continue;
      out[i].tokens.push_back(best);
      prefixes[i].push_back(best);
      still.push_back(i);
    }
    active = std::move(still);
  }
  for (std::size_t i : active) out[i].truncated = true;
  return out;
}

GeneratedCaption Captioner::beam_search(const DecoderMemory& memory, std::size_t width) const {
  if (memory.batch() != 1) throw std::invalid_argument("beam_search: single-sample memory required");
  if (width == 0) throw std::invalid_argument("beam_search: width must be positive");
  const std::size_t v = config_.vocab_size;
  struct Hyp {
    std::vector<int> prefix;
    double score = 0.0;
  };
  std::vector<Hyp> beams = {{{Vocabulary::kBos}, 0.0}};
  std::optional<GeneratedCaption> best_finished;
  for (std::size_t step = 0; step < config_.max_len && !beams.empty(); ++step) {
    std::vector<std::vector<int>> rows;
    for (const auto& b : beams) rows.push_back(b.prefix);
    const auto lp = next_logprobs(memory.select(std::vector<std::size_t>(beams.size(), 0)), rows);
    struct Cand {
      double score;
      std::size_t beam;
      int token;
    };
    std::vector<Cand> cands;
    for (std::size_t b = 0; b < beams.size(); ++b) {
      for (std::size_t k = 0; k < v; ++k) {
        if (selectable(static_cast<int>(k))) cands.push_back({beams[b].score + lp[b * v + k], b, static_cast<int>(k)});
      }
    }
    std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) { return a.score > b.score; });
    cands.resize(std::min(cands.size(), width));
    std::vector<Hyp> next;
    for (const auto& c : cands) {
      if (c.token == Vocabulary::kEos) {
        if (!best_finished || c.score > best_finished->logprob) {
          best_finished = GeneratedCaption{{beams[c.beam].prefix.begin() + 1, beams[c.beam].prefix.end()}, c.score, false};
        }
      } else {
        Hyp h = beams[c.beam];
        h.prefix.push_back(c.token);
        h.score = c.score;
        next.push_back(std::move(h));
      }
    }
    beams = std::move(next);
    // Scores only fall as hypotheses grow.
    if (best_finished && std::all_of(beams.begin(), beams.end(),
                                     [&](const Hyp& h) { return h.score <= best_finished->logprob; })) {
      beams.clear();
    }
  }
  GeneratedCaption result;
  bool have = false;
  if (best_finished) {
    result = *best_finished;
    have = true;
  }
  for (const auto& b : beams) {
    if (!have || b.score > result.logprob) {
      result = {{b.prefix.begin() + 1, b.prefix.end()}, b.score, true};
      have = true;
    }
  }
  return result;
}

std::vector<GeneratedCaption> Captioner::generate(const DecoderMemory& memory, const GenerateOptions& options) const {
  if (options.beam_width <= 1) return greedy(memory);
  std::vector<GeneratedCaption> out;
  for (std::size_t i = 0; i < memory.batch(); ++i) out.push_back(beam_search(memory.select({i}), options.beam_width));
  return out;
}

}  // namespace lacap
