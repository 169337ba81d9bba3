#include "tsm/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "tsm/errors.hpp"
#include "tsm/rng.hpp"

namespace tsm {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

[[noreturn]] void bad(const std::string& key, const std::string& value, const char* want) {
  throw ConfigError("config key '" + key + "': '" + value + "' is not " + want);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
};

Field uint_field(std::size_t RunConfig::*m) {
  return {[m](const RunConfig& c) { return std::to_string(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) {
            std::size_t out = 0;
            const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
            if (v.empty() || ec != std::errc() || p != v.data() + v.size()) bad(k, v, "a non-negative integer");
            c.*m = out;
          }};
}

Field real_field(double RunConfig::*m) {
  return {[m](const RunConfig& c) { return fmt(c.*m); },
          [m](RunConfig& c, const std::string& k, const std::string& v) {
            std::size_t used = 0;
            double out = 0;
            try {
              out = std::stod(v, &used);
            } catch (const std::exception&) {
              bad(k, v, "a number");
            }
            if (used != v.size() || !std::isfinite(out)) bad(k, v, "a finite number");
            c.*m = out;
          }};
}

Field string_field(std::string RunConfig::*m) {
  return {[m](const RunConfig& c) { return c.*m; },
          [m](RunConfig& c, const std::string&, const std::string& v) { c.*m = v; }};
}

const std::map<std::string, Field>& fields() {
  static const std::map<std::string, Field> f = {
      {"image_size", uint_field(&RunConfig::image_size)},
      {"patch_size", uint_field(&RunConfig::patch_size)},
      {"embed_dim", uint_field(&RunConfig::embed_dim)},
      {"num_heads", uint_field(&RunConfig::num_heads)},
      {"blocks_per_stage", uint_field(&RunConfig::blocks_per_stage)},
      {"mlp_ratio", uint_field(&RunConfig::mlp_ratio)},
      {"text_layers", uint_field(&RunConfig::text_layers)},
      {"text_heads", uint_field(&RunConfig::text_heads)},
      {"text_mlp_ratio", uint_field(&RunConfig::text_mlp_ratio)},
      {"n_ctx", uint_field(&RunConfig::n_ctx)},
      {"max_len", uint_field(&RunConfig::max_len)},
      {"tokens", string_field(&RunConfig::tokens)},
      {"vocab", string_field(&RunConfig::vocab)},
      {"template", string_field(&RunConfig::prompt_template)},
      {"structure",
       {[](const RunConfig& c) { return structure_name(c.structure); },
        [](RunConfig& c, const std::string&, const std::string& v) { c.structure = parse_structure(v); }}},
      {"fusion",
       {[](const RunConfig& c) { return std::string(c.fusion ? "on" : "off"); },
        [](RunConfig& c, const std::string& k, const std::string& v) {
          if (v == "on") {
            c.fusion = true;
          } else if (v == "off" || v == "optical-only") {
            c.fusion = false;
          } else {
            bad(k, v, "on, off or optical-only");
          }
        }}},
      {"optimizer", string_field(&RunConfig::optimizer)},
      {"lr", real_field(&RunConfig::lr)},
      {"beta1", real_field(&RunConfig::beta1)},
      {"beta2", real_field(&RunConfig::beta2)},
      {"adam_eps", real_field(&RunConfig::adam_eps)},
      {"weight_decay", real_field(&RunConfig::weight_decay)},
      {"schedule", string_field(&RunConfig::schedule)},
      {"epochs", uint_field(&RunConfig::epochs)},
      {"steps", uint_field(&RunConfig::steps)},
      {"batch_size", uint_field(&RunConfig::batch_size)},
      {"eval_every", uint_field(&RunConfig::eval_every)},
      {"tau", real_field(&RunConfig::tau)},
      {"logit_scale", real_field(&RunConfig::logit_scale)},
      {"object_target", string_field(&RunConfig::object_target)},
      {"seed", uint_field(&RunConfig::seed)},
      {"data_dir", string_field(&RunConfig::data_dir)},
      {"out_dir", string_field(&RunConfig::out_dir)},
      {"synth_classes", uint_field(&RunConfig::synth_classes)},
      {"synth_tiles", uint_field(&RunConfig::synth_tiles)},
      {"synth_train", uint_field(&RunConfig::synth_train)},
      {"synth_optical_noise", real_field(&RunConfig::synth_optical_noise)},
      {"synth_sar_noise", real_field(&RunConfig::synth_sar_noise)},
      {"synth_min_regions", uint_field(&RunConfig::synth_min_regions)},
      {"synth_max_regions", uint_field(&RunConfig::synth_max_regions)},
  };
  return f;
}

const Field& field(const std::string& key) {
  const auto it = fields().find(key);
  if (it == fields().end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

}  // namespace

std::string structure_name(Structure s) {
  switch (s) {
    case Structure::A: return "A";
    case Structure::B: return "B";
    case Structure::C: return "C";
    case Structure::D: return "D";
  }
  return "?";
}

Structure parse_structure(const std::string& s) {
  if (s == "A") return Structure::A;
  if (s == "B") return Structure::B;
  if (s == "C") return Structure::C;
  if (s == "D") return Structure::D;
  throw ConfigError("structure must be one of A, B, C, D; got '" + s + "'");
}

void RunConfig::set(const std::string& key, const std::string& value) { field(key).set(*this, key, value); }

std::string RunConfig::get(const std::string& key) const { return field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> k = [] {
    std::vector<std::string> out;
    for (const auto& [name, f] : fields()) out.push_back(name);
    return out;
  }();
  return k;
}

void RunConfig::validate() const {
  encoder(false).validate();
  if (embed_dim % text_heads != 0) throw ConfigError("embed_dim must be divisible by text_heads");
  if (text_layers == 0 || max_len < 2 || text_mlp_ratio == 0) throw ConfigError("text encoder dimensions invalid");
  if (optimizer != "adam") throw ConfigError("optimizer must be adam, got '" + optimizer + "'");
  if (schedule != "cosine" && schedule != "constant") {
    throw ConfigError("schedule must be cosine or constant, got '" + schedule + "'");
  }
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("betas must lie in [0, 1)");
  if (!(adam_eps > 0.0) || weight_decay < 0.0) throw ConfigError("adam_eps must be positive, weight_decay >= 0");
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (object_target != "downsampled" && object_target != "upsampled") {
    throw ConfigError("object_target must be downsampled or upsampled, got '" + object_target + "'");
  }
  if (!(logit_scale > 0.0)) throw ConfigError("logit_scale must be positive");
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (scene_path() && batch_size < 2) {
    throw ConfigError("structure " + structure_name(structure) + " uses the contrastive scene loss and needs batch_size >= 2");
  }
  if (steps == 0 && epochs == 0) throw ConfigError("one of steps or epochs must be positive");
}

EncoderConfig RunConfig::encoder(bool sar) const {
  EncoderConfig e;
  e.image_size = image_size;
  e.patch_size = patch_size;
  e.embed_dim = embed_dim;
  e.num_heads = num_heads;
  e.blocks_per_stage = blocks_per_stage;
  e.mlp_ratio = mlp_ratio;
  e.in_channels = 3;
  e.seed = Rng::derive(seed, sar ? "params/sar" : "params/optical");
  return e;
}

TextEncoderConfig RunConfig::text(std::size_t vocab_size) const {
  TextEncoderConfig t;
  t.width = embed_dim;
  t.num_heads = text_heads;
  t.num_layers = text_layers;
  t.mlp_ratio = text_mlp_ratio;
  t.n_ctx = n_ctx;
  t.max_len = max_len;
  t.vocab_size = vocab_size;
  t.seed = Rng::derive(seed, "params/text");
  return t;
}

SyntheticConfig RunConfig::synthetic() const {
  SyntheticConfig s;
  s.size = image_size;
  s.num_classes = synth_classes;
  s.n_tiles = synth_tiles;
  s.n_train = synth_train;
  s.seed = seed;
  s.optical_noise = synth_optical_noise;
  s.sar_noise = synth_sar_noise;
  s.min_regions = synth_min_regions;
  s.max_regions = synth_max_regions;
  return s;
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const std::string& k : keys()) out += k + " = " + get(k) + "\n";
  return out;
}

RunConfig parse_config(const std::string& text, const std::string& source) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    try {
      cfg.set(trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

}  // namespace tsm
