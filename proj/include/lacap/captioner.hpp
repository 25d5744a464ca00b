#pragma once

// Metadata prompts, visual token projection and a small encoder-decoder
// transformer whose decoder cross-attends to [encoded prompt; visual tokens].

#include "lacap/data.hpp"
#include "lacap/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace lacap {

using diff::DiffArray;

// "MES-<g>; bleeding: <yes|no>; erythema: <level>; friability: <level>;
//  ulceration: <level>; vascular: <pattern>"
std::string build_prompt(const ClinicalMetadata& m);
// Inverse of build_prompt; throws DataError on any deviation from the grammar.
ClinicalMetadata parse_prompt(const std::string& prompt);

struct DecoderConfig {
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t encoder_layers = 1;
  std::size_t decoder_layers = 2;
  std::size_t ffn_dim = 128;
  std::size_t max_len = 48;  // generated tokens, EOS included
  std::size_t vocab_size = 0;

  void validate() const;
  bool operator==(const DecoderConfig&) const = default;
};

// Cross-attention memory with per-layer projected keys and values.
struct DecoderMemory {
  DiffArray tokens;  // [N, S, D]
  std::vector<nn::MultiHeadAttention::KeyValue> layers;

  std::size_t batch() const { return tokens.dim(0); }
  // Rows `index` of every tensor, as constants.
  DecoderMemory select(const std::vector<std::size_t>& index) const;
};

struct GenerateOptions {
  std::size_t beam_width = 1;  // 1 = greedy
};

struct GeneratedCaption {
  std::vector<int> tokens;  // without BOS / EOS
  double logprob = 0.0;     // includes EOS when present
  bool truncated = false;   // hit max_len without EOS
};

class Captioner {
 public:
  // use_prompt = false removes the prompt encoder entirely.
  Captioner(const DecoderConfig& config, std::size_t visual_channels, bool use_prompt, nn::Parameters& params,
            std::uint64_t seed);

  const DecoderConfig& config() const { return config_; }
  bool uses_prompt() const { return use_prompt_; }

  // [N,C,H,W] -> [N,H*W,D]: linear C->D, layer norm, plus 2-D positions.
  DiffArray project_visual(const DiffArray& features, bool add_positions = true) const;
  // [N,P] token ids (equal lengths) -> [N,P,D]
  DiffArray encode_prompt(const std::vector<std::vector<int>>& prompts) const;

  // Prompts are ignored (and may be empty) when the prompt encoder is off.
  DecoderMemory memory(const std::vector<std::vector<int>>& prompts, const DiffArray& visual_tokens) const;

  // Teacher-forced logits [N,T,V] for decoder inputs (BOS-prefixed, equal lengths).
  DiffArray decode(const DecoderMemory& memory, const std::vector<std::vector<int>>& inputs) const;
  // Logits [V] for the position after `prefix` (which starts with BOS).
  DiffArray decode_step(const std::vector<int>& prompt, const DiffArray& visual_tokens,
                        const std::vector<int>& prefix) const;

  std::vector<GeneratedCaption> generate(const DecoderMemory& memory, const GenerateOptions& options = {}) const;
  // Beam search for a single-sample memory; width 1 follows the greedy path.
  GeneratedCaption beam_search(const DecoderMemory& memory, std::size_t width) const;

  // Mean cross-entropy over non-PAD targets for a batch of captions.
  DiffArray caption_loss(const DecoderMemory& memory, const std::vector<std::vector<int>>& captions) const;

 private:
  struct EncoderLayer {
    nn::LayerNorm norm1, norm2;
    nn::MultiHeadAttention attention;
    nn::FeedForward ffn;
  };
  struct DecoderLayer {
    nn::LayerNorm norm1, norm2, norm3;
    nn::MultiHeadAttention self_attention, cross_attention;
    nn::FeedForward ffn;
  };

  DiffArray embed(const std::vector<std::vector<int>>& ids) const;
  std::vector<double> next_logprobs(const DecoderMemory& memory,
                                    const std::vector<std::vector<int>>& prefixes) const;
  std::vector<GeneratedCaption> greedy(const DecoderMemory& memory) const;

  DecoderConfig config_;
  bool use_prompt_;
  DiffArray embedding_;
  nn::Linear visual_projection_;
  std::vector<EncoderLayer> prompt_layers_;
  nn::LayerNorm prompt_norm_;
  std::vector<DecoderLayer> decoder_layers_;
  nn::LayerNorm final_norm_;
  nn::Linear output_;
};

}  // namespace lacap
