#include "lacap/data.hpp"

#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

namespace lacap {

namespace fs = std::filesystem;
using ordered_json = nlohmann::ordered_json;

namespace {

template <typename E, std::size_t N>
std::optional<E> lookup(std::string_view s, const std::array<std::string_view, N>& names) {
  for (std::size_t i = 0; i < N; ++i) {
    if (names[i] == s) return static_cast<E>(i);
  }
  return std::nullopt;
}

constexpr std::array<std::string_view, 3> kVascularNames = {"visible", "partially_obliterated", "obliterated"};
constexpr std::array<std::string_view, 4> kErythemaNames = {"none", "mild", "moderate", "marked"};
constexpr std::array<std::string_view, 4> kFriabilityNames = {"none", "low", "moderate", "high"};
constexpr std::array<std::string_view, 3> kUlcerationNames = {"none", "superficial", "deep"};
constexpr std::array<std::string_view, 3> kSplitNames = {"train", "val", "test"};

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

bool attaches_left(const std::string& t) { return t == ";" || t == "," || t == "." || t == ":" || t == "-"; }
bool attaches_right(const std::string& t) { return t == "-"; }

}  // namespace

std::string_view to_string(VascularPattern v) { return kVascularNames[static_cast<int>(v)]; }
std::string_view to_string(Erythema v) { return kErythemaNames[static_cast<int>(v)]; }
std::string_view to_string(Friability v) { return kFriabilityNames[static_cast<int>(v)]; }
std::string_view to_string(Ulceration v) { return kUlcerationNames[static_cast<int>(v)]; }
std::string_view to_string(Split s) { return kSplitNames[static_cast<int>(s)]; }

std::optional<VascularPattern> parse_vascular(std::string_view s) { return lookup<VascularPattern>(s, kVascularNames); }
std::optional<Erythema> parse_erythema(std::string_view s) { return lookup<Erythema>(s, kErythemaNames); }
std::optional<Friability> parse_friability(std::string_view s) { return lookup<Friability>(s, kFriabilityNames); }
std::optional<Ulceration> parse_ulceration(std::string_view s) { return lookup<Ulceration>(s, kUlcerationNames); }
std::optional<Split> parse_split(std::string_view s) { return lookup<Split>(s, kSplitNames); }

void validate_metadata(const ClinicalMetadata& m, std::string_view context) {
  const std::string ctx(context);
  if (m.mes < 0 || m.mes >= kNumMesClasses) {
    throw DataError(ctx + ": field mes out of range 0-3 (got " + std::to_string(m.mes) + ")");
  }
  auto in_range = [](auto v, int n) { return static_cast<int>(v) >= 0 && static_cast<int>(v) < n; };
  if (!in_range(m.vascular_pattern, 3)) throw DataError(ctx + ": field vascular_pattern out of range");
  if (!in_range(m.erythema, 4)) throw DataError(ctx + ": field erythema out of range");
  if (!in_range(m.friability, 4)) throw DataError(ctx + ": field friability out of range");
  if (!in_range(m.ulceration, 3)) throw DataError(ctx + ": field ulceration out of range");
  if (m.mes == 0 && m.bleeding) throw DataError(ctx + ": field bleeding must be false for MES 0");
  if (m.mes == 0 && m.ulceration != Ulceration::none) {
    throw DataError(ctx + ": field ulceration must be none for MES 0");
  }
}

std::vector<ClinicalMetadata> all_metadata_combinations() {
  std::vector<ClinicalMetadata> out;
  for (int mes = 0; mes < kNumMesClasses; ++mes)
    for (int v = 0; v < 3; ++v)
      for (int b = 0; b < 2; ++b)
        for (int e = 0; e < 4; ++e)
          for (int f = 0; f < 4; ++f)
            for (int u = 0; u < 3; ++u) {
              out.push_back({mes, static_cast<VascularPattern>(v), b == 1, static_cast<Erythema>(e),
                             static_cast<Friability>(f), static_cast<Ulceration>(u)});
            }
  return out;
}

// ---- tokenizer -------------------------------------------------------------

std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> tokens;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) tokens.push_back(std::move(word));
    word.clear();
  };
  for (char raw : text) {
    const char c = static_cast<char>(std::tolower(static_cast<unsigned char>(raw)));
    if (is_word_char(c)) {
      word.push_back(c);
    } else {
      flush();
      if (!std::isspace(static_cast<unsigned char>(c))) tokens.emplace_back(1, c);
    }
  }
  flush();
  return tokens;
}

std::string detokenize(const std::vector<std::string>& tokens) {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i > 0 && !attaches_left(tokens[i]) && !attaches_right(tokens[i - 1])) out.push_back(' ');
    out += tokens[i];
  }
  return out;
}

Vocabulary::Vocabulary() : tokens_{"<pad>", "<bos>", "<eos>", "<unk>"} {
  for (int i = 0; i < kNumSpecial; ++i) index_[tokens_[i]] = i;
}

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus, int min_count) {
  if (corpus.empty()) throw DataError("build_vocabulary: empty corpus");
  std::map<std::string, int> counts;
  for (const auto& text : corpus) {
    for (auto& t : tokenize(text)) ++counts[t];
  }
  std::vector<std::string> kept;
  for (const auto& [tok, n] : counts) {
    if (n >= min_count) kept.push_back(tok);
  }
  return from_tokens(kept);
}

Vocabulary Vocabulary::from_tokens(const std::vector<std::string>& tokens) {
  Vocabulary v;
  for (const auto& t : tokens) {
    if (v.index_.count(t)) {
      if (v.index_[t] < kNumSpecial) continue;
      throw DataError("vocabulary: duplicate token '" + t + "'");
    }
    v.index_[t] = static_cast<int>(v.tokens_.size());
    v.tokens_.push_back(t);
  }
  return v;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
    throw DataError("vocabulary: id " + std::to_string(id) + " out of range");
  }
  return tokens_[static_cast<std::size_t>(id)];
}

std::vector<int> Vocabulary::encode(std::string_view text) const {
  std::vector<int> ids;
  for (const auto& t : tokenize(text)) {
    const int i = id(t);
    // Surface text never produces PAD/BOS/EOS, even if it spells them.
    ids.push_back(i < kNumSpecial ? kUnk : i);
  }
  return ids;
}

std::vector<std::string> Vocabulary::decode_tokens(const std::vector<int>& ids) const {
  std::vector<std::string> out;
  for (int i : ids) {
    if (i == kPad || i == kBos || i == kEos) continue;
    out.push_back(token(i));
  }
  return out;
}

std::string Vocabulary::decode(const std::vector<int>& ids) const { return detokenize(decode_tokens(ids)); }

// ---- split -----------------------------------------------------------------

std::vector<std::string> SplitAssignment::ids(Split s) const {
  std::vector<std::string> out;
  for (const auto& [id, sp] : assignment) {
    if (sp == s) out.push_back(id);
  }
  return out;
}

SplitAssignment stratified_split(const std::vector<CaptionRecord>& records, SplitRatios ratios,
                                 std::uint64_t seed) {
  std::array<std::vector<std::string>, kNumMesClasses> by_class;
  for (const auto& r : records) {
    validate_metadata(r.metadata, r.id);
    by_class[static_cast<std::size_t>(r.metadata.mes)].push_back(r.id);
  }
  SplitAssignment out;
  out.seed = seed;
  // Halves round down so ties fall to train.
  auto share = [](double ratio, std::size_t n) {
    const double x = ratio * static_cast<double>(n);
    return static_cast<std::size_t>(std::max(0.0, std::ceil(x - 0.5 - 1e-9)));
  };
  for (int c = 0; c < kNumMesClasses; ++c) {
    auto ids = by_class[static_cast<std::size_t>(c)];
    if (ids.size() < 3) {
      throw DataError("stratified_split: MES class " + std::to_string(c) + " has " +
                      std::to_string(ids.size()) + " records, need at least 3");
    }
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(seed ^ (0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(c + 1)));
    std::shuffle(ids.begin(), ids.end(), rng);
    const std::size_t n_val = share(ratios.val, ids.size());
    const std::size_t n_test = share(ratios.test, ids.size());
    const std::size_t n_train = ids.size() - n_val - n_test;
    for (std::size_t i = 0; i < ids.size(); ++i) {
      const Split s = i < n_train ? Split::train : (i < n_train + n_val ? Split::val : Split::test);
      out.assignment[ids[i]] = s;
    }
  }
  return out;
}

void save_split(const SplitAssignment& split, const fs::path& file) {
  ordered_json j;
  j["seed"] = split.seed;
  ordered_json a = ordered_json::object();
  for (const auto& [id, s] : split.assignment) a[id] = std::string(to_string(s));
  j["assignment"] = a;
  std::ofstream out(file, std::ios::binary);
  if (!out) throw DataError("cannot write " + file.string());
  out << j.dump(1) << '\n';
}

SplitAssignment load_split(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw DataError("cannot read split file " + file.string());
  SplitAssignment out;
  try {
    const auto j = nlohmann::json::parse(in);
    out.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& [id, v] : j.at("assignment").items()) {
      auto s = parse_split(v.get<std::string>());
      if (!s) throw DataError(file.string() + ": record " + id + " has unknown split '" + v.get<std::string>() + "'");
      out.assignment[id] = *s;
    }
  } catch (const nlohmann::json::exception& e) {
    throw DataError(file.string() + ": " + e.what());
  }
  return out;
}

// ---- dataset directory -----------------------------------------------------

std::string record_to_json_line(const CaptionRecord& r) {
  ordered_json j;
  j["id"] = r.id;
  j["image_path"] = r.image_path;
  ordered_json m;
  m["mes"] = r.metadata.mes;
  m["vascular_pattern"] = std::string(to_string(r.metadata.vascular_pattern));
  m["bleeding"] = r.metadata.bleeding;
  m["erythema"] = std::string(to_string(r.metadata.erythema));
  m["friability"] = std::string(to_string(r.metadata.friability));
  m["ulceration"] = std::string(to_string(r.metadata.ulceration));
  j["metadata"] = m;
  j["caption"] = r.caption;
  j["lesion_mask_path"] = r.lesion_mask_path ? ordered_json(*r.lesion_mask_path) : ordered_json(nullptr);
  return j.dump();
}

CaptionRecord record_from_json_line(const std::string& line, std::size_t line_number) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest line " + std::to_string(line_number) + ": " + e.what());
  }
  CaptionRecord r;
  const std::string where = "manifest line " + std::to_string(line_number);
  if (!j.contains("id") || !j["id"].is_string()) throw DataError(where + ": missing field id");
  r.id = j["id"].get<std::string>();
  const std::string ctx = "record " + r.id;
  auto need_string = [&](const nlohmann::json& obj, const char* field) {
    if (!obj.contains(field) || !obj[field].is_string()) throw DataError(ctx + ": missing or non-string field " + field);
    return obj[field].get<std::string>();
  };
  r.image_path = need_string(j, "image_path");
  r.caption = need_string(j, "caption");
  if (!j.contains("metadata") || !j["metadata"].is_object()) throw DataError(ctx + ": missing field metadata");
  const auto& m = j["metadata"];
  if (!m.contains("mes") || !m["mes"].is_number_integer()) throw DataError(ctx + ": missing or non-integer field mes");
  r.metadata.mes = m["mes"].get<int>();
  if (!m.contains("bleeding") || !m["bleeding"].is_boolean()) throw DataError(ctx + ": missing or non-boolean field bleeding");
  r.metadata.bleeding = m["bleeding"].get<bool>();
  auto parse_enum = [&](const char* field, auto parser) {
    const auto s = need_string(m, field);
    auto v = parser(s);
    if (!v) throw DataError(ctx + ": field " + field + " has unknown value '" + s + "'");
    return *v;
  };
  r.metadata.vascular_pattern = parse_enum("vascular_pattern", parse_vascular);
  r.metadata.erythema = parse_enum("erythema", parse_erythema);
  r.metadata.friability = parse_enum("friability", parse_friability);
  r.metadata.ulceration = parse_enum("ulceration", parse_ulceration);
  if (j.contains("lesion_mask_path") && !j["lesion_mask_path"].is_null()) {
    r.lesion_mask_path = need_string(j, "lesion_mask_path");
  }
  return r;
}

void save_dataset(const std::vector<CaptionRecord>& records, const fs::path& root) {
  fs::create_directories(root);
  std::ofstream out(root / std::string(kManifestName), std::ios::binary);
  if (!out) throw DataError("cannot write manifest in " + root.string());
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
}

std::vector<CaptionRecord> load_dataset(const fs::path& root) {
  const fs::path manifest = root / std::string(kManifestName);
  std::ifstream in(manifest, std::ios::binary);
  if (!in) throw DataError("cannot read " + manifest.string());
  std::vector<CaptionRecord> records;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_number = 0;
  while (std::getline(in, line)) {
    ++line_number;
    if (line.empty()) continue;
    auto r = record_from_json_line(line, line_number);
    const std::string ctx = "record " + r.id;
    if (!seen.insert(r.id).second) throw DataError(ctx + ": duplicate id");
    validate_metadata(r.metadata, ctx);
    if (r.caption.empty()) throw DataError(ctx + ": field caption is empty");
    if (!fs::exists(root / r.image_path)) {
      throw DataError(ctx + ": image file not found: " + (root / r.image_path).string());
    }
    if (r.lesion_mask_path && !fs::exists(root / *r.lesion_mask_path)) {
      throw DataError(ctx + ": mask file not found: " + (root / *r.lesion_mask_path).string());
    }
    records.push_back(std::move(r));
  }
  if (records.empty()) throw DataError(manifest.string() + ": no records");
  return records;
}

}  // namespace lacap
