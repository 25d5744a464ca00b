#pragma once

// Clinical annotation schema, caption records, the word-level tokenizer and
// the MES-stratified split.

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lacap {

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class VascularPattern { visible, partially_obliterated, obliterated };
enum class Erythema { none, mild, moderate, marked };
enum class Friability { none, low, moderate, high };
enum class Ulceration { none, superficial, deep };

inline constexpr int kNumMesClasses = 4;

struct ClinicalMetadata {
  int mes = 0;
  VascularPattern vascular_pattern = VascularPattern::visible;
  bool bleeding = false;
  Erythema erythema = Erythema::none;
  Friability friability = Friability::none;
  Ulceration ulceration = Ulceration::none;

  bool operator==(const ClinicalMetadata&) const = default;
};

std::string_view to_string(VascularPattern v);
std::string_view to_string(Erythema v);
std::string_view to_string(Friability v);
std::string_view to_string(Ulceration v);
std::optional<VascularPattern> parse_vascular(std::string_view s);
std::optional<Erythema> parse_erythema(std::string_view s);
std::optional<Friability> parse_friability(std::string_view s);
std::optional<Ulceration> parse_ulceration(std::string_view s);

// Range checks plus the synthetic consistency rule (MES 0 has no bleeding and
// no ulceration). Throws DataError naming `context` and the field.
void validate_metadata(const ClinicalMetadata& m, std::string_view context = "metadata");

// Every in-range field combination (4*3*2*4*4*3), including ones that break
// the consistency rule.
std::vector<ClinicalMetadata> all_metadata_combinations();

struct CaptionRecord {
  std::string id;
  std::string image_path;  // relative to the dataset root
  ClinicalMetadata metadata;
  std::string caption;
  std::optional<std::string> lesion_mask_path;

  bool operator==(const CaptionRecord&) const = default;
};

// ---- tokenizer -------------------------------------------------------------

// Lowercases; runs of [a-z0-9_] form words, any other non-space character is a
// token of its own.
std::vector<std::string> tokenize(std::string_view text);
// Inverse of tokenize for normalized text: single spaces between words, no
// space before ; , . : and none around -.
std::string detokenize(const std::vector<std::string>& tokens);

class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecial = 4;

  Vocabulary();
  // Tokens are ordered alphabetically after the specials; tokens seen fewer
  // than min_count times are left out and encode to UNK.
  static Vocabulary build(const std::vector<std::string>& corpus, int min_count = 1);
  static Vocabulary from_tokens(const std::vector<std::string>& tokens);

  std::size_t size() const { return tokens_.size(); }
  int id(const std::string& token) const;
  const std::string& token(int id) const;
  bool contains(const std::string& token) const { return index_.count(token) != 0; }

  std::vector<int> encode(std::string_view text) const;
  // Specials are dropped; UNK renders as "<unk>".
  std::string decode(const std::vector<int>& ids) const;
  std::vector<std::string> decode_tokens(const std::vector<int>& ids) const;
  const std::vector<std::string>& tokens() const { return tokens_; }

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, int> index_;
};

// ---- split -----------------------------------------------------------------

enum class Split { train, val, test };
std::string_view to_string(Split s);
std::optional<Split> parse_split(std::string_view s);

struct SplitRatios {
  double train = 0.70;
  double val = 0.15;
  double test = 0.15;
};

struct SplitAssignment {
  std::map<std::string, Split> assignment;
  std::uint64_t seed = 0;

  std::vector<std::string> ids(Split s) const;
};

// Per MES class: val and test each get round(ratio * n) records with halves
// rounded down, train takes the remainder. Requires >= 3 records per class.
SplitAssignment stratified_split(const std::vector<CaptionRecord>& records, SplitRatios ratios,
                                 std::uint64_t seed);

void save_split(const SplitAssignment& split, const std::filesystem::path& file);
SplitAssignment load_split(const std::filesystem::path& file);

// ---- dataset directory -----------------------------------------------------

inline constexpr std::string_view kManifestName = "manifest.jsonl";

// Writes manifest.jsonl (one record per line). Images are written separately.
void save_dataset(const std::vector<CaptionRecord>& records, const std::filesystem::path& root);
// Validates every row: ids unique, metadata in range, caption non-empty,
// referenced image and mask files present.
std::vector<CaptionRecord> load_dataset(const std::filesystem::path& root);

std::string record_to_json_line(const CaptionRecord& r);
CaptionRecord record_from_json_line(const std::string& line, std::size_t line_number);

}  // namespace lacap
