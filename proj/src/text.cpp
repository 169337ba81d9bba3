#include "tsm/text.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "tsm/errors.hpp"

namespace tsm {

namespace {
constexpr double kInitStd = 0.02;
constexpr std::string_view kPlaceholder = "[CLS]";

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

// Linear layer initialised with std 1/sqrt(in), for the decoder path.
Linear fan_in_linear(Rng& rng, std::size_t in, std::size_t out) {
  return Linear::init(rng, in, out, 1.0 / std::sqrt(static_cast<double>(in)));
}
}  // namespace

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::string cur;
  for (char ch : text) {
    const auto u = static_cast<unsigned char>(ch);
    if (std::isspace(u) || (std::ispunct(u) && ch != '-')) {
      if (!cur.empty()) words.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(u)));
    }
  }
  if (!cur.empty()) words.push_back(std::move(cur));
  return words;
}

Tokenizer Tokenizer::from_words(const std::vector<std::string>& words) {
  Tokenizer t;
  t.words_ = {"<pad>", "<unk>", "<eot>"};
  for (const std::string& w : words) t.words_.push_back(w);
  for (std::size_t i = 0; i < t.words_.size(); ++i) {
    if (t.words_[i].empty()) throw ConfigError("empty token in word list");
    if (!t.index_.emplace(t.words_[i], i).second) throw ConfigError("duplicate token '" + t.words_[i] + "'");
  }
  return t;
}

Tokenizer Tokenizer::from_file(const std::string& path) {
  std::vector<std::string> words;
  for (const std::string& line : read_lines(path)) {
    const std::string w = trim(line);
    if (w.empty() || w.front() == '#') continue;
    words.push_back(w);
  }
  return from_words(words);
}

Tokenizer Tokenizer::builtin() { return from_file(std::string(TSM_DATA_DIR) + "/tokens.txt"); }

TokenIds Tokenizer::encode(std::string_view text) const {
  TokenIds ids;
  for (const std::string& w : split_words(text)) {
    const auto it = index_.find(w);
    ids.push_back(it == index_.end() || it->second <= kEot ? kUnk : it->second);
  }
  return ids;
}

Vocabulary Vocabulary::from_names(std::vector<std::string> names, bool allow_duplicates) {
  if (names.empty()) throw std::invalid_argument("vocabulary is empty");
  std::set<std::string> seen;
  for (std::string& n : names) {
    n = trim(n);
    if (n.empty()) throw std::invalid_argument("vocabulary contains an empty class name");
    if (!seen.insert(n).second && !allow_duplicates) throw std::invalid_argument("duplicate class name '" + n + "'");
  }
  return Vocabulary{std::move(names)};
}

Vocabulary Vocabulary::from_file(const std::string& path, bool allow_duplicates) {
  std::vector<std::string> names;
  for (const std::string& line : read_lines(path)) {
    if (!trim(line).empty()) names.push_back(line);
  }
  return from_names(std::move(names), allow_duplicates);
}

Vocabulary Vocabulary::from_list(std::string_view comma_separated, bool allow_duplicates) {
  std::vector<std::string> names;
  std::size_t start = 0;
  for (;;) {
    const std::size_t pos = comma_separated.find(',', start);
    names.emplace_back(comma_separated.substr(start, pos == std::string_view::npos ? pos : pos - start));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return from_names(std::move(names), allow_duplicates);
}

std::size_t Vocabulary::index_of(std::string_view name) const {
  return static_cast<std::size_t>(std::find(names.begin(), names.end(), name) - names.begin());
}

std::vector<TokenIds> build_prompts(const Vocabulary& vocab, std::string_view templ, const Tokenizer& tok) {
  const std::size_t pos = templ.find(kPlaceholder);
  if (pos == std::string_view::npos) throw ConfigError("template has no [CLS] placeholder: '" + std::string(templ) + "'");
  if (templ.find(kPlaceholder, pos + 1) != std::string_view::npos) {
    throw ConfigError("template has more than one [CLS] placeholder: '" + std::string(templ) + "'");
  }
  std::vector<TokenIds> out;
  for (const std::string& name : vocab.names) {
    if (name.empty()) throw std::invalid_argument("empty class name");
    std::string text(templ);
    text.replace(pos, kPlaceholder.size(), name);
    TokenIds ids = tok.encode(text);
    ids.push_back(Tokenizer::kEot);
    out.push_back(std::move(ids));
  }
  return out;
}

std::vector<TokenIds> pad_sequences(const std::vector<TokenIds>& seqs, std::size_t max_len) {
  std::vector<TokenIds> out;
  for (const TokenIds& s : seqs) {
    if (s.size() > max_len) {
      throw std::length_error("token sequence of length " + std::to_string(s.size()) + " exceeds max_len " +
                              std::to_string(max_len));
    }
    TokenIds p = s;
    p.resize(max_len, Tokenizer::kPad);
    out.push_back(std::move(p));
  }
  return out;
}

TextEncoder TextEncoder::init(const TextEncoderConfig& config) {
  if (config.vocab_size <= Tokenizer::kEot) throw ConfigError("text encoder needs a token vocabulary");
  if (config.width == 0 || config.num_heads == 0 || config.width % config.num_heads != 0) {
    throw ConfigError("text width " + std::to_string(config.width) + " not divisible by " +
                      std::to_string(config.num_heads) + " heads");
  }
  Rng rng(config.seed);
  const std::size_t c = config.width;
  TextEncoder e;
  e.config = config;
  e.token_embed = param_normal(rng, {config.vocab_size, c}, kInitStd);
  e.context = param_normal(rng, {config.n_ctx, c}, kInitStd);
  e.pos_embed = param_normal(rng, {config.n_ctx + config.max_len, c}, kInitStd);
  for (std::size_t i = 0; i < config.num_layers; ++i) {
    e.blocks.push_back(TransformerBlock::init(rng, c, config.num_heads, config.mlp_ratio, kInitStd));
  }
  e.final_norm = LayerNorm::init(c);
  e.class_proj = Linear::init(rng, c, c, kInitStd);
  e.desc_proj = Linear::init(rng, c, c, kInitStd);
  return e;
}

Tensor TextEncoder::readout(const TokenIds& padded, bool with_context) const {
  if (padded.size() != config.max_len) {
    throw ShapeError("text encoder expects sequences padded to " + std::to_string(config.max_len) + ", got " +
                     std::to_string(padded.size()));
  }
  const auto eot = std::find(padded.begin(), padded.end(), Tokenizer::kEot);
  if (eot == padded.end()) throw std::invalid_argument("token sequence has no end token");
  const std::size_t len = static_cast<std::size_t>(eot - padded.begin()) + 1;
  for (std::size_t id : padded) {
    if (id >= config.vocab_size) throw ShapeError("token id " + std::to_string(id) + " outside the vocabulary");
  }
  const std::span<const std::size_t> ids(padded.data(), len);
  Tensor x = add(gather_rows(token_embed, ids), slice(pos_embed, 0, config.n_ctx, len));
  if (with_context && config.n_ctx > 0) x = concat({add(context, slice(pos_embed, 0, 0, config.n_ctx)), x}, 0);
  for (const TransformerBlock& b : blocks) x = b(x);
  return final_norm(slice(x, 0, x.dim(0) - 1, 1));
}

Tensor TextEncoder::encode_classes(const std::vector<TokenIds>& padded) const {
  if (padded.empty()) throw std::invalid_argument("no class prompts");
  std::vector<Tensor> rows;
  for (const TokenIds& p : padded) rows.push_back(class_proj(readout(p, true)));
  return rows.size() == 1 ? rows.front() : concat(rows, 0);
}

Tensor TextEncoder::encode_description(const TokenIds& padded) const {
  return l2_normalize(desc_proj(readout(padded, false)), 1);
}

void TextEncoder::collect(ParamList& out, const std::string& prefix) const {
  out.add(prefix + ".token_embed", token_embed);
  out.add(prefix + ".context", context);
  out.add(prefix + ".pos_embed", pos_embed);
  for (std::size_t i = 0; i < blocks.size(); ++i) blocks[i].collect(out, prefix + ".block" + std::to_string(i));
  final_norm.collect(out, prefix + ".final_norm");
  class_proj.collect(out, prefix + ".class_proj");
  desc_proj.collect(out, prefix + ".desc_proj");
}

Tensor encode_description(const TextEncoder& enc, const Tokenizer& tok, std::string_view text) {
  TokenIds ids = tok.encode(text);
  if (ids.empty()) throw std::invalid_argument("description is empty");
  ids.push_back(Tokenizer::kEot);
  return enc.encode_description(pad_sequences({ids}, enc.config.max_len).front());
}

ContextPrompt ContextPrompt::init(Rng& rng, std::size_t c, std::size_t heads) {
  ContextPrompt p;
  p.norm_text = LayerNorm::init(c);
  p.norm_visual = LayerNorm::init(c);
  p.norm_mlp = LayerNorm::init(c);
  p.attn = Attention::init(rng, c, heads, kInitStd);
  p.mlp = Mlp::init(rng, c, 2 * c, kInitStd);
  p.gamma = param_const({1}, 1e-4);
  return p;
}

Tensor ContextPrompt::residual(const Tensor& t, const Tensor& global, const FeatureMap& local) const {
  if (t.rank() != 2 || global.rank() != 2 || t.dim(1) != global.dim(1) || t.dim(1) != local.channels()) {
    throw ShapeError("context_prompt: text " + shape_str(t.shape()) + ", global " + shape_str(global.shape()) +
                     " and local " + shape_str(local.tokens.shape()) + " disagree on channels");
  }
  const Tensor ctx = norm_visual(concat({global, local.tokens}, 0));
  const Tensor v = attn(norm_text(t), ctx);
  return add(v, mlp(norm_mlp(v)));
}

Tensor ContextPrompt::operator()(const Tensor& t, const Tensor& global, const FeatureMap& local) const {
  return add(t, mul(gamma, residual(t, global, local)));
}

void ContextPrompt::collect(ParamList& out, const std::string& prefix) const {
  norm_text.collect(out, prefix + ".norm_text");
  norm_visual.collect(out, prefix + ".norm_visual");
  norm_mlp.collect(out, prefix + ".norm_mlp");
  attn.collect(out, prefix + ".attn");
  mlp.collect(out, prefix + ".mlp");
  out.add(prefix + ".gamma", gamma);
}

Tensor score_map(const FeatureMap& z, const Tensor& text) {
  if (text.rank() != 2 || text.dim(1) != z.channels()) {
    throw ShapeError("score_map: features " + shape_str(z.tokens.shape()) + " and text " + shape_str(text.shape()) +
                     " disagree on channels");
  }
  return matmul(l2_normalize(z.tokens, 1), transpose(l2_normalize(text, 1)));
}

Tensor resize_nearest(const Tensor& x, std::size_t h, std::size_t w, std::size_t out_h, std::size_t out_w) {
  if (x.rank() != 2 || x.dim(0) != h * w) {
    throw ShapeError("resize_nearest: " + shape_str(x.shape()) + " is not a " + std::to_string(h) + "x" +
                     std::to_string(w) + " map");
  }
  if (h == out_h && w == out_w) return x;
  std::vector<std::size_t> idx(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const std::size_t si = (2 * i + 1) * h / (2 * out_h);
    for (std::size_t j = 0; j < out_w; ++j) idx[i * out_w + j] = si * w + (2 * j + 1) * w / (2 * out_w);
  }
  return gather_rows(x, idx);
}

Neck Neck::init(Rng& rng, std::size_t c, std::size_t pixel_channels, std::size_t image_size) {
  Neck n;
  n.inject = fan_in_linear(rng, 2 * c, c);
  for (Linear& l : n.lateral) l = fan_in_linear(rng, c, c);
  n.pixel_skip = fan_in_linear(rng, pixel_channels, c);
  n.head = fan_in_linear(rng, c, c);
  n.image_size = image_size;
  return n;
}

NeckOutput Neck::operator()(const FusedPyramid& z, const Tensor& score, const Tensor& text,
                            const Tensor& pixels) const {
  const FeatureMap& top = z.stages[kNumStages - 1];
  const std::size_t c = top.channels();
  Tensor injection;
  if (score.defined()) {
    if (score.rank() != 2 || score.dim(0) != top.h * top.w) {
      throw ShapeError("neck: score map " + shape_str(score.shape()) + " does not cover the final " +
                       std::to_string(top.h) + "x" + std::to_string(top.w) + " map");
    }
    if (!text.defined() || text.rank() != 2 || text.dim(0) != score.dim(1) || text.dim(1) != c) {
      throw ShapeError("neck: text " + (text.defined() ? shape_str(text.shape()) : std::string("<none>")) +
                       " does not match score map " + shape_str(score.shape()));
    }
    injection = weighted_row_sum(score, l2_normalize(text, 1));
  } else {
    injection = Tensor::zeros({top.h * top.w, c});
  }
  const std::size_t side = image_size;
  if (pixels.rank() != 2 || pixels.dim(0) != side * side || pixels.dim(1) != pixel_skip.weight.dim(0)) {
    throw ShapeError("neck: pixels " + shape_str(pixels.shape()) + ", expected " +
                     shape_str({side * side, pixel_skip.weight.dim(0)}));
  }

  NeckOutput out;
  const std::size_t last = kNumStages - 1;
  out.levels[last] = FeatureMap{lateral[last](inject(concat({top.tokens, injection}, 1))), top.h, top.w};
  for (std::size_t s = last; s-- > 0;) {
    const FeatureMap& in = z.stages[s];
    const FeatureMap& up = out.levels[s + 1];
    out.levels[s] = FeatureMap{add(lateral[s](in.tokens), resize_nearest(up.tokens, up.h, up.w, in.h, in.w)), in.h, in.w};
  }
  const FeatureMap& fine = out.levels[0];
  const Tensor full = add(resize_nearest(fine.tokens, fine.h, fine.w, side, side), pixel_skip(pixels));
  out.features = FeatureMap{head(gelu(full)), side, side};
  return out;
}

void Neck::collect(ParamList& out, const std::string& prefix) const {
  inject.collect(out, prefix + ".inject");
  for (std::size_t s = 0; s < kNumStages; ++s) lateral[s].collect(out, prefix + ".lateral" + std::to_string(s));
  pixel_skip.collect(out, prefix + ".pixel_skip");
  head.collect(out, prefix + ".head");
}

Tensor class_logits(const FeatureMap& features, const Tensor& text, double scale) {
  return mul_scalar(score_map(features, text), scale);
}

}  // namespace tsm
