#pragma once

// Run configuration: a flat `key = value` text file. Every key has a
// default; unknown keys and malformed values are ConfigError.

#include <cstdint>
#include <string>
#include <vector>

#include "tsm/dataset.hpp"
#include "tsm/text.hpp"
#include "tsm/visual_encoder.hpp"

namespace tsm {

// Text-guidance structures: A none, B class path only, C scene path only,
// D both.
enum class Structure { A, B, C, D };

struct RunConfig {
  // visual encoders
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t embed_dim = 32;
  std::size_t num_heads = 2;
  std::size_t blocks_per_stage = 1;
  std::size_t mlp_ratio = 4;
  // text branch
  std::size_t text_layers = 2;
  std::size_t text_heads = 2;
  std::size_t text_mlp_ratio = 2;
  std::size_t n_ctx = 4;
  std::size_t max_len = 24;
  std::string tokens;  // word list file, empty for the shipped one
  std::string vocab;   // file or comma list, empty for the dataset classes
  std::string prompt_template = std::string(kDefaultTemplate);
  // toggles
  Structure structure = Structure::D;
  bool fusion = true;
  // optimisation
  std::string optimizer = "adam";
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::string schedule = "cosine";
  std::size_t epochs = 100;
  std::size_t steps = 0;  // overrides epochs when nonzero
  std::size_t batch_size = 4;
  std::size_t eval_every = 1;  // epochs between train-set evaluations, 0 for none
  double tau = 0.07;
  double logit_scale = 10.0;
  // Object loss target: "downsampled" labels at the score map resolution,
  // or "upsampled" score map against the full label raster.
  std::string object_target = "downsampled";
  std::uint64_t seed = 0;
  // paths
  std::string data_dir = "synthetic";
  std::string out_dir = "run";
  // synthetic generator
  std::size_t synth_classes = 5;
  std::size_t synth_tiles = 16;
  std::size_t synth_train = 8;
  double synth_optical_noise = 12.0;
  double synth_sar_noise = 0.3;
  std::size_t synth_min_regions = 3;
  std::size_t synth_max_regions = 6;

  // Applies one key; ConfigError names the key and the bad value.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;
  static const std::vector<std::string>& keys();

  void validate() const;
  EncoderConfig encoder(bool sar) const;
  TextEncoderConfig text(std::size_t vocab_size) const;
  SyntheticConfig synthetic() const;
  bool object_path() const { return structure == Structure::B || structure == Structure::D; }
  bool scene_path() const { return structure == Structure::C || structure == Structure::D; }

  // One `key = value` line per key, in keys() order.
  std::string to_text() const;
};

RunConfig parse_config(const std::string& text, const std::string& source = "<config>");
RunConfig load_config(const std::string& path);

std::string structure_name(Structure s);
Structure parse_structure(const std::string& s);

}  // namespace tsm
