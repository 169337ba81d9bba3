#include "tsm/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace tsm {

std::size_t ParamList::count() const {
  std::size_t n = 0;
  for (const auto& [name, t] : items_) n += t.numel();
  return n;
}

void ParamList::zero_grad() {
  for (auto& [name, t] : items_) {
    Tensor h = t;
    h.zero_grad();
  }
}

Tensor ParamList::find(const std::string& name) const {
  for (const auto& [n, t] : items_) {
    if (n == name) return t;
  }
  throw std::out_of_range("no parameter named " + name);
}

Tensor param_normal(Rng& rng, Shape shape, double stddev) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.truncated_normal(stddev);
  return Tensor::from(std::move(shape), std::move(v), true);
}

Tensor param_const(Shape shape, double v) { return Tensor::full(std::move(shape), v, true); }

Linear Linear::init(Rng& rng, std::size_t in, std::size_t out, double stddev) {
  return {param_normal(rng, {in, out}, stddev), param_const({out}, 0.0)};
}

Tensor Linear::operator()(const Tensor& x) const { return add(matmul(x, weight), bias); }

void Linear::collect(ParamList& out, const std::string& prefix) const {
  out.add(prefix + ".weight", weight);
  out.add(prefix + ".bias", bias);
}

LayerNorm LayerNorm::init(std::size_t c) { return {param_const({c}, 1.0), param_const({c}, 0.0)}; }

Tensor LayerNorm::operator()(const Tensor& x) const { return layer_norm(x, gamma, beta); }

void LayerNorm::collect(ParamList& out, const std::string& prefix) const {
  out.add(prefix + ".gamma", gamma);
  out.add(prefix + ".beta", beta);
}

Attention Attention::init(Rng& rng, std::size_t c, std::size_t heads, double stddev) {
  if (heads == 0 || c % heads != 0) {
    throw std::invalid_argument("attention width " + std::to_string(c) + " not divisible by " + std::to_string(heads) +
                                " heads");
  }
  Attention a;
  a.q = Linear::init(rng, c, c, stddev);
  a.k = Linear::init(rng, c, c, stddev);
  a.v = Linear::init(rng, c, c, stddev);
  a.o = Linear::init(rng, c, c, stddev);
  a.heads = heads;
  return a;
}

Tensor Attention::operator()(const Tensor& query, const Tensor& context) const {
  if (query.rank() != 2 || context.rank() != 2 || query.dim(1) != context.dim(1)) {
    throw ShapeError("attention: query " + shape_str(query.shape()) + " and context " + shape_str(context.shape()) +
                     " disagree on channels");
  }
  const std::size_t c = query.dim(1);
  const std::size_t d = c / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Tensor qs = q(query);
  const Tensor ks = k(context);
  const Tensor vs = v(context);
  std::vector<Tensor> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    const Tensor qh = heads == 1 ? qs : slice(qs, 1, h * d, d);
    const Tensor kh = heads == 1 ? ks : slice(ks, 1, h * d, d);
    const Tensor vh = heads == 1 ? vs : slice(vs, 1, h * d, d);
    const Tensor att = softmax(mul_scalar(matmul(qh, transpose(kh)), scale), 1);
    outs.push_back(matmul(att, vh));
  }
  return o(heads == 1 ? outs.front() : concat(outs, 1));
}

void Attention::collect(ParamList& out, const std::string& prefix) const {
  q.collect(out, prefix + ".q");
  k.collect(out, prefix + ".k");
  v.collect(out, prefix + ".v");
  o.collect(out, prefix + ".o");
}

Mlp Mlp::init(Rng& rng, std::size_t c, std::size_t hidden, double stddev) {
  return {Linear::init(rng, c, hidden, stddev), Linear::init(rng, hidden, c, stddev)};
}

Tensor Mlp::operator()(const Tensor& x) const { return fc2(gelu(fc1(x))); }

void Mlp::collect(ParamList& out, const std::string& prefix) const {
  fc1.collect(out, prefix + ".fc1");
  fc2.collect(out, prefix + ".fc2");
}

TransformerBlock TransformerBlock::init(Rng& rng, std::size_t c, std::size_t heads, std::size_t mlp_ratio,
                                        double stddev) {
  TransformerBlock b;
  b.ln1 = LayerNorm::init(c);
  b.attn = Attention::init(rng, c, heads, stddev);
  b.ln2 = LayerNorm::init(c);
  b.mlp = Mlp::init(rng, c, c * mlp_ratio, stddev);
  return b;
}

Tensor TransformerBlock::operator()(const Tensor& x) const {
  const Tensor n1 = ln1(x);
  const Tensor h = add(x, attn(n1, n1));
  return add(h, mlp(ln2(h)));
}

void TransformerBlock::collect(ParamList& out, const std::string& prefix) const {
  ln1.collect(out, prefix + ".ln1");
  attn.collect(out, prefix + ".attn");
  ln2.collect(out, prefix + ".ln2");
  mlp.collect(out, prefix + ".mlp");
}

}  // namespace tsm
