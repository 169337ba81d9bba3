#include "tsm/model.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "tsm/errors.hpp"

namespace tsm {

namespace {

constexpr const char* kMagic = "tsmnet-checkpoint 1";

Tensor image_tensor(const Image8& img, std::size_t channels) {
  std::vector<double> v(img.h * img.w * channels);
  for (std::size_t p = 0; p < img.h * img.w; ++p) {
    for (std::size_t c = 0; c < channels; ++c) {
      v[p * channels + c] = (img.px[p * img.ch + (img.ch == 1 ? 0 : c)] - 127.5) / 64.0;
    }
  }
  return Tensor::from({img.h, img.w, channels}, std::move(v));
}

std::string shape_token(const Shape& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
  return out;
}

}  // namespace

SampleInput prepare_sample(const TilePair& tile, const RunConfig& cfg, const Tokenizer& tok) {
  if (tile.h() != cfg.image_size || tile.w() != cfg.image_size) {
    throw DataError("tile " + tile.id + " is " + std::to_string(tile.h()) + "x" + std::to_string(tile.w()) +
                    ", model expects " + std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
  }
  SampleInput in;
  in.optical = image_tensor(tile.optical, 3);
  in.sar = image_tensor(tile.sar, 3);
  const std::size_t n = tile.h() * tile.w();
  std::vector<double> px(n * kPixelChannels);
  for (std::size_t p = 0; p < n; ++p) {
    for (std::size_t c = 0; c < 3; ++c) px[p * kPixelChannels + c] = in.optical[p * 3 + c];
    px[p * kPixelChannels + 3] = in.sar[p * 3];
  }
  in.pixels = Tensor::from({n, kPixelChannels}, std::move(px));
  TokenIds ids = tok.encode(tile.description);
  if (ids.empty()) throw DataError("tile " + tile.id + ": description has no tokens");
  ids.push_back(Tokenizer::kEot);
  if (ids.size() > cfg.max_len) ids.resize(cfg.max_len), ids.back() = Tokenizer::kEot;
  in.description = pad_sequences({ids}, cfg.max_len)[0];
  return in;
}

Model Model::init(const RunConfig& config, Tokenizer tokenizer) {
  config.validate();
  Model m;
  m.config = config;
  m.tokenizer = std::move(tokenizer);
  const std::size_t c = config.embed_dim;
  m.optical = VisualEncoder::init(config.encoder(false));
  m.sar = VisualEncoder::init(config.encoder(true));
  Rng fusion_rng = Rng::stream(config.seed, "params/fusion");
  m.fusion = MultimodalFusion::init(fusion_rng, c);
  m.text = TextEncoder::init(config.text(m.tokenizer.size()));
  Rng prompt_rng = Rng::stream(config.seed, "params/prompt");
  m.prompt = ContextPrompt::init(prompt_rng, c, config.text_heads);
  Rng scene_rng = Rng::stream(config.seed, "params/scene");
  m.scene_head = SceneHead::init(scene_rng, c);
  m.scene_fusion = SceneFusion::init(scene_rng, c);
  Rng neck_rng = Rng::stream(config.seed, "params/neck");
  m.neck = Neck::init(neck_rng, c, kPixelChannels, config.image_size);
  return m;
}

Tensor Model::encode_vocabulary(const Vocabulary& vocab) const {
  return text.encode_classes(pad_sequences(build_prompts(vocab, config.prompt_template, tokenizer), config.max_len));
}

ForwardOutput Model::forward(const SampleInput& in, const Tensor& class_text) const {
  ForwardOutput out;
  const VisualFeatures x = optical(in.optical);
  if (config.fusion) {
    out.fused = fusion(x, sar(in.sar));
  } else {
    out.fused = x;
  }
  FusedPyramid z = out.fused;
  if (config.scene_path()) {
    out.scene_image = scene_head(out.fused);
    out.scene_text = text.encode_description(in.description);
    z = scene_fusion(z, out.scene_text);
  }

  out.text = prompt(class_text, z.global, z.local);
  out.score = score_map(z.local, out.text);

  Tensor pixels = in.pixels;
  if (!config.fusion) {
    // Optical only: the SAR column never reaches the decoder.
    std::vector<double> v(pixels.data().begin(), pixels.data().end());
    for (std::size_t p = 0; p < pixels.dim(0); ++p) v[p * kPixelChannels + 3] = 0.0;
    pixels = Tensor::from(pixels.shape(), std::move(v));
  }
  out.neck = neck(z, config.object_path() ? out.score : Tensor(), out.text, pixels);
  out.logits = class_logits(out.neck.features, out.text, config.logit_scale);
  return out;
}

Labels Model::predict(const SampleInput& in, const Tensor& class_text) const {
  NoGradGuard guard;
  const ForwardOutput f = forward(in, class_text);
  return infer_mask(f.neck.features.tokens, f.text);
}

ParamList Model::parameters() const {
  ParamList p;
  optical.collect(p, "optical");
  sar.collect(p, "sar");
  fusion.collect(p, "fusion");
  text.collect(p, "text");
  prompt.collect(p, "prompt");
  scene_head.collect(p, "scene_head");
  scene_fusion.collect(p, "scene_fusion");
  neck.collect(p, "neck");
  return p;
}

Vocabulary resolve_vocabulary(const std::string& spec, const std::vector<std::string>& fallback,
                              bool allow_duplicates) {
  try {
    if (spec.empty()) {
      if (fallback.empty()) throw ConfigError("no vocabulary given and the dataset lists no classes");
      return Vocabulary::from_names(fallback);
    }
    if (std::filesystem::is_regular_file(spec)) return Vocabulary::from_file(spec, allow_duplicates);
    return Vocabulary::from_list(spec, allow_duplicates);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("vocabulary: ") + e.what());
  }
}

void save_checkpoint(const Model& model, const std::string& path) {
  const ParamList params = model.parameters();
  std::ostringstream head;
  head << kMagic << '\n';
  const std::string cfg = model.config.to_text();
  head << "config " << std::count(cfg.begin(), cfg.end(), '\n') << '\n' << cfg;
  const auto& words = model.tokenizer.words();
  head << "tokens " << words.size() - 3 << '\n';
  for (std::size_t i = 3; i < words.size(); ++i) head << words[i] << '\n';
  head << "params " << params.items().size() << '\n';
  for (const auto& [name, t] : params.items()) head << name << ' ' << shape_token(t.shape()) << '\n';
  head << "data\n";

  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + tmp);
    out << head.str();
    for (const auto& [name, t] : params.items()) {
      for (double v : t.data()) {
        std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((bits >> (8 * i)) & 0xff);
        out.write(b, 8);
      }
    }
    out.flush();
    if (!out) throw DataError("short write on checkpoint " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path);
  auto fail = [&](const std::string& why) -> DataError { return DataError("checkpoint " + path + ": " + why); };
  std::string line;
  if (!std::getline(in, line) || line != kMagic) throw fail("not a checkpoint");

  auto counted = [&](const std::string& tag) {
    if (!std::getline(in, line) || line.rfind(tag + " ", 0) != 0) throw fail("expected '" + tag + "' section");
    return static_cast<std::size_t>(std::stoull(line.substr(tag.size() + 1)));
  };
  std::string cfg_text;
  for (std::size_t i = 0, n = counted("config"); i < n; ++i) {
    if (!std::getline(in, line)) throw fail("truncated config");
    cfg_text += line + '\n';
  }
  std::vector<std::string> words;
  for (std::size_t i = 0, n = counted("tokens"); i < n; ++i) {
    if (!std::getline(in, line)) throw fail("truncated token list");
    words.push_back(line);
  }
  Model m = Model::init(parse_config(cfg_text, path), Tokenizer::from_words(words));
  const ParamList params = m.parameters();
  const std::size_t n = counted("params");
  if (n != params.items().size()) {
    throw fail(std::to_string(n) + " tensors stored, model has " + std::to_string(params.items().size()));
  }
  for (const auto& [name, t] : params.items()) {
    if (!std::getline(in, line)) throw fail("truncated parameter table");
    const std::string want = name + ' ' + shape_token(t.shape());
    if (line != want) throw fail("parameter '" + line + "' where '" + want + "' expected");
  }
  if (!std::getline(in, line) || line != "data") throw fail("missing data marker");
  for (const auto& [name, t] : params.items()) {
    Tensor p = t;
    for (double& v : p.mutable_data()) {
      unsigned char b[8];
      if (!in.read(reinterpret_cast<char*>(b), 8)) throw fail("truncated values in " + name);
      std::uint64_t bits = 0;
      for (int i = 0; i < 8; ++i) bits |= std::uint64_t(b[i]) << (8 * i);
      v = std::bit_cast<double>(bits);
    }
  }
  if (in.peek() != std::char_traits<char>::eof()) throw fail("trailing bytes");
  return m;
}

}  // namespace tsm
