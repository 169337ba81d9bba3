#pragma once

// Object-level text path: tokenizer, class vocabulary, prompt building,
// the small text transformer, context-aware prompting, the pixel-text
// score map and the FPN neck that consumes it.

#include <array>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "tsm/fusion.hpp"

namespace tsm {

using TokenIds = std::vector<std::size_t>;

// Word-level tokenizer: lowercase, punctuation other than '-' splits words,
// unknown words map to kUnk. Ids 0..2 are reserved.
class Tokenizer {
 public:
  static constexpr std::size_t kPad = 0;
  static constexpr std::size_t kUnk = 1;
  static constexpr std::size_t kEot = 2;

  // `words` excludes the reserved entries; duplicates are rejected.
  static Tokenizer from_words(const std::vector<std::string>& words);
  // One word per line, '#' comments and blank lines skipped.
  static Tokenizer from_file(const std::string& path);
  // The word list shipped in the data directory.
  static Tokenizer builtin();

  TokenIds encode(std::string_view text) const;
  std::size_t size() const { return words_.size(); }
  // Including the reserved entries at the front.
  const std::vector<std::string>& words() const { return words_; }

 private:
  std::vector<std::string> words_;
  std::unordered_map<std::string, std::size_t> index_;
};

// Splits into lowercase words the same way the tokenizer does.
std::vector<std::string> split_words(std::string_view text);

// Ordered class names; order defines channel order everywhere downstream.
struct Vocabulary {
  std::vector<std::string> names;

  // Rejects empty lists, empty names and duplicates (std::invalid_argument).
  // Inference queries may repeat a name; the first occurrence then wins
  // every tie.
  static Vocabulary from_names(std::vector<std::string> names, bool allow_duplicates = false);
  // UTF-8, one name per line.
  static Vocabulary from_file(const std::string& path, bool allow_duplicates = false);
  // "a,b,c"
  static Vocabulary from_list(std::string_view comma_separated, bool allow_duplicates = false);
  std::size_t size() const { return names.size(); }
  // Position of `name`, or size() when absent.
  std::size_t index_of(std::string_view name) const;
};

inline constexpr std::string_view kDefaultTemplate = "a photo of a [CLS]";

// One token sequence per class: the template with [CLS] replaced by the
// class name, followed by kEot. The template must hold exactly one [CLS].
std::vector<TokenIds> build_prompts(const Vocabulary& vocab, std::string_view templ, const Tokenizer& tok);

// Right-pads with kPad to `max_len`; longer sequences are rejected.
std::vector<TokenIds> pad_sequences(const std::vector<TokenIds>& seqs, std::size_t max_len);

struct TextEncoderConfig {
  std::size_t width = 32;
  std::size_t num_heads = 2;
  std::size_t num_layers = 2;
  std::size_t mlp_ratio = 2;
  std::size_t n_ctx = 4;
  std::size_t max_len = 24;
  std::size_t vocab_size = 0;
  std::uint64_t seed = 0;
};

// Transformer over learned token embeddings. Class prompts get the n_ctx
// learnable context tokens prepended; descriptions do not. Only the real
// prefix of each padded sequence (through its first kEot) is processed and
// the kEot position is read out, so padding never affects the result and
// every row is computed independently of the others.
struct TextEncoder {
  TextEncoderConfig config;
  Tensor token_embed;  // [V, C]
  Tensor context;      // [n_ctx, C]
  Tensor pos_embed;    // [n_ctx + max_len, C]
  std::vector<TransformerBlock> blocks;
  LayerNorm final_norm;
  Linear class_proj;
  Linear desc_proj;

  static TextEncoder init(const TextEncoderConfig& config);
  // Padded class prompts -> t [K, C].
  Tensor encode_classes(const std::vector<TokenIds>& padded) const;
  // Padded description -> unit-norm [1, C].
  Tensor encode_description(const TokenIds& padded) const;
  void collect(ParamList& out, const std::string& prefix) const;

 private:
  Tensor readout(const TokenIds& padded, bool with_context) const;
};

// Tokenizes, pads and encodes one description string; empty text rejected.
Tensor encode_description(const TextEncoder& enc, const Tokenizer& tok, std::string_view text);

// Post-model prompting: text rows query [z_global; z_local] through one
// decoder block, v = attn(ln(t), ln(ctx)); v = v + mlp(ln(v)); and
// t' = t + gamma * v. Rows never attend to each other.
struct ContextPrompt {
  LayerNorm norm_text, norm_visual, norm_mlp;
  Attention attn;
  Mlp mlp;
  Tensor gamma;  // [1], starts at 1e-4

  static ContextPrompt init(Rng& rng, std::size_t c, std::size_t heads);
  Tensor residual(const Tensor& t, const Tensor& global, const FeatureMap& local) const;  // v
  Tensor operator()(const Tensor& t, const Tensor& global, const FeatureMap& local) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// s = l2n(z) l2n(t')^T: [h*w, K] cosine similarities.
Tensor score_map(const FeatureMap& z, const Tensor& text);

// Nearest resampling of an h x w token map to H x W (source index
// floor((i + 0.5) * h / H)); exact repetition for integer factors.
Tensor resize_nearest(const Tensor& x, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w);

struct NeckOutput {
  std::array<FeatureMap, kNumStages> levels;  // top-down merged, width C
  FeatureMap features;                        // full resolution decoder features
};

// FPN neck. The score map enters as a C-channel injection
// sum_k s[:, k] * l2n(t'_k) concatenated onto the final stage map and
// projected 2C -> C; this keeps the neck independent of K and of class
// order. A per-pixel projection of the raw input joins at full resolution.
struct Neck {
  Linear inject;                           // 2C -> C
  std::array<Linear, kNumStages> lateral;  // C -> C
  Linear pixel_skip;                       // input channels -> C
  Linear head;                             // C -> C
  std::size_t image_size = 0;

  static Neck init(Rng& rng, std::size_t c, std::size_t pixel_channels, std::size_t image_size);
  // `score` is [N4, K] over the final stage positions (or empty for no
  // injection); `pixels` is [H*W, pixel_channels].
  NeckOutput operator()(const FusedPyramid& z, const Tensor& score, const Tensor& text, const Tensor& pixels) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// scale * cos(F, t'): [H*W, K].
Tensor class_logits(const FeatureMap& features, const Tensor& text, double scale);

}  // namespace tsm
