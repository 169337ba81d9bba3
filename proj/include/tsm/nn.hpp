#pragma once

// Parameterised building blocks shared by the encoders, fusion and text
// modules. Each block is a plain aggregate of Tensor handles; `collect`
// registers those handles under dotted names for the optimizer and the
// checkpoint writer.

#include <string>
#include <utility>
#include <vector>

#include "tsm/rng.hpp"
#include "tsm/tensor.hpp"

namespace tsm {

class ParamList {
 public:
  void add(std::string name, const Tensor& t) { items_.emplace_back(std::move(name), t); }
  const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
  std::size_t count() const;  // total scalar parameters
  void zero_grad();
  // Looks a parameter up by exact name; throws std::out_of_range.
  Tensor find(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, Tensor>> items_;
};

// Tokens of an h x w map, one row per position.
struct FeatureMap {
  Tensor tokens;  // [h*w, c]
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t channels() const { return tokens.dim(1); }
};

Tensor param_normal(Rng& rng, Shape shape, double stddev);
Tensor param_const(Shape shape, double v);

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  static Linear init(Rng& rng, std::size_t in, std::size_t out, double stddev);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct LayerNorm {
  Tensor gamma;
  Tensor beta;

  static LayerNorm init(std::size_t c);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Multi-head scaled dot-product attention; queries attend over `context`.
struct Attention {
  Linear q, k, v, o;
  std::size_t heads = 1;

  static Attention init(Rng& rng, std::size_t c, std::size_t heads, double stddev);
  Tensor operator()(const Tensor& query, const Tensor& context) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

struct Mlp {
  Linear fc1, fc2;

  static Mlp init(Rng& rng, std::size_t c, std::size_t hidden, double stddev);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

// Pre-norm self-attention block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  LayerNorm ln1;
  Attention attn;
  LayerNorm ln2;
  Mlp mlp;

  static TransformerBlock init(Rng& rng, std::size_t c, std::size_t heads, std::size_t mlp_ratio, double stddev);
  Tensor operator()(const Tensor& x) const;
  void collect(ParamList& out, const std::string& prefix) const;
};

}  // namespace tsm
