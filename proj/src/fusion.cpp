#include "tsm/fusion.hpp"

#include "tsm/errors.hpp"

namespace tsm {

namespace {
constexpr double kInitStd = 0.02;
constexpr double kScaleInit = 0.1;

void check_pair(const FeatureMap& x, const FeatureMap& y, const char* what) {
  if (x.tokens.shape() != y.tokens.shape() || x.h != y.h || x.w != y.w) {
    throw ShapeError(std::string(what) + ": layer shapes differ, " + shape_str(x.tokens.shape()) + " vs " +
                     shape_str(y.tokens.shape()));
  }
}

Linear zero_linear(std::size_t in, std::size_t out) { return {param_const({in, out}, 0.0), param_const({out}, 0.0)}; }

void zero_fill(Tensor& t) {
  auto d = t.mutable_data();
  std::fill(d.begin(), d.end(), 0.0);
}
}  // namespace

FeatureMap layer_of(const VisualFeatures& f, std::size_t l) {
  if (l < kNumStages) return f.stages[l];
  if (l == kNumStages) return FeatureMap{f.global, 1, 1};
  if (l == kNumStages + 1) return f.local;
  throw std::out_of_range("layer index " + std::to_string(l));
}

void set_layer(VisualFeatures& f, std::size_t l, FeatureMap m) {
  if (l < kNumStages) {
    f.stages[l] = std::move(m);
  } else if (l == kNumStages) {
    f.global = std::move(m.tokens);
  } else if (l == kNumStages + 1) {
    f.local = std::move(m);
  } else {
    throw std::out_of_range("layer index " + std::to_string(l));
  }
}

Rectifier Rectifier::init(Rng& rng, std::size_t c, bool spatial_path) {
  Rectifier r;
  r.channel_fc1 = Linear::init(rng, 2 * c, c, kInitStd);
  r.channel_fc2 = Linear::init(rng, c, 2 * c, kInitStd);
  r.spatial = spatial_path ? Linear::init(rng, 2 * c, 2, kInitStd) : zero_linear(2 * c, 2);
  r.channel_scale_x = param_const({c}, kScaleInit);
  r.channel_scale_y = param_const({c}, kScaleInit);
  r.spatial_scale_x = param_const({c}, spatial_path ? kScaleInit : 0.0);
  r.spatial_scale_y = param_const({c}, spatial_path ? kScaleInit : 0.0);
  r.spatial_path = spatial_path;
  return r;
}

std::pair<FeatureMap, FeatureMap> Rectifier::operator()(const FeatureMap& x, const FeatureMap& y) const {
  check_pair(x, y, "mfrm");
  const std::size_t c = x.channels();
  const Tensor pooled = reshape(concat({mean(x.tokens, 0), mean(y.tokens, 0)}, 0), {1, 2 * c});
  const Tensor g = sigmoid(channel_fc2(gelu(channel_fc1(pooled))));
  const Tensor gx = reshape(slice(g, 1, 0, c), {c});
  const Tensor gy = reshape(slice(g, 1, c, c), {c});

  Tensor xt = add(x.tokens, mul(mul(channel_scale_x, gx), y.tokens));
  Tensor yt = add(y.tokens, mul(mul(channel_scale_y, gy), x.tokens));
  if (spatial_path) {
    const Tensor m = sigmoid(spatial(concat({x.tokens, y.tokens}, 1)));
    const Tensor mx = repeat_last(slice(m, 1, 0, 1), c);
    const Tensor my = repeat_last(slice(m, 1, 1, 1), c);
    xt = add(xt, mul(spatial_scale_x, mul(mx, y.tokens)));
    yt = add(yt, mul(spatial_scale_y, mul(my, x.tokens)));
  }
  return {FeatureMap{xt, x.h, x.w}, FeatureMap{yt, y.h, y.w}};
}

void Rectifier::collect(ParamList& out, const std::string& prefix) const {
  channel_fc1.collect(out, prefix + ".channel_fc1");
  channel_fc2.collect(out, prefix + ".channel_fc2");
  out.add(prefix + ".channel_scale_x", channel_scale_x);
  out.add(prefix + ".channel_scale_y", channel_scale_y);
  if (spatial_path) {
    spatial.collect(out, prefix + ".spatial");
    out.add(prefix + ".spatial_scale_x", spatial_scale_x);
    out.add(prefix + ".spatial_scale_y", spatial_scale_y);
  }
}

void Rectifier::zero_gates() {
  for (Tensor* t : {&channel_fc1.weight, &channel_fc1.bias, &channel_fc2.weight, &channel_fc2.bias, &spatial.weight,
                    &spatial.bias, &channel_scale_x, &channel_scale_y, &spatial_scale_x, &spatial_scale_y}) {
    zero_fill(*t);
  }
}

CrossFuser CrossFuser::init(Rng& rng, std::size_t c) {
  CrossFuser f;
  f.norm_x = LayerNorm::init(c);
  f.norm_y = LayerNorm::init(c);
  f.x_from_y = Attention::init(rng, c, 1, kInitStd);
  f.y_from_x = Attention::init(rng, c, 1, kInitStd);
  // Start as the mean of the two branches plus a small perturbation.
  f.out = Linear::init(rng, 2 * c, c, kInitStd);
  auto w = f.out.weight.mutable_data();
  for (std::size_t i = 0; i < c; ++i) {
    w[i * c + i] += 0.5;
    w[(c + i) * c + i] += 0.5;
  }
  return f;
}

FeatureMap CrossFuser::operator()(const FeatureMap& x, const FeatureMap& y) const {
  check_pair(x, y, "mffm");
  const Tensor nx = norm_x(x.tokens);
  const Tensor ny = norm_y(y.tokens);
  const Tensor a = add(x.tokens, x_from_y(nx, ny));
  const Tensor b = add(y.tokens, y_from_x(ny, nx));
  return FeatureMap{out(concat({a, b}, 1)), x.h, x.w};
}

void CrossFuser::collect(ParamList& out_list, const std::string& prefix) const {
  norm_x.collect(out_list, prefix + ".norm_x");
  norm_y.collect(out_list, prefix + ".norm_y");
  x_from_y.collect(out_list, prefix + ".x_from_y");
  y_from_x.collect(out_list, prefix + ".y_from_x");
  out.collect(out_list, prefix + ".out");
}

MultimodalFusion MultimodalFusion::init(Rng& rng, std::size_t c) {
  MultimodalFusion m;
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    m.rectifiers[l] = Rectifier::init(rng, c, l < kNumStages);
    m.fusers[l] = CrossFuser::init(rng, c);
  }
  return m;
}

std::pair<VisualFeatures, VisualFeatures> MultimodalFusion::rectify(const VisualFeatures& x,
                                                                    const VisualFeatures& y) const {
  VisualFeatures xo, yo;
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    auto [a, b] = rectifiers[l](layer_of(x, l), layer_of(y, l));
    set_layer(xo, l, std::move(a));
    set_layer(yo, l, std::move(b));
  }
  return {xo, yo};
}

FusedPyramid MultimodalFusion::fuse(const VisualFeatures& x, const VisualFeatures& y) const {
  FusedPyramid z;
  for (std::size_t l = 0; l < kNumLayers; ++l) set_layer(z, l, fusers[l](layer_of(x, l), layer_of(y, l)));
  return z;
}

FusedPyramid MultimodalFusion::operator()(const VisualFeatures& optical, const VisualFeatures& sar,
                                          const FusionOptions& opts) const {
  if (!opts.rectify) return fuse(optical, sar);
  auto [xt, yt] = rectify(optical, sar);
  return fuse(xt, yt);
}

void MultimodalFusion::collect(ParamList& out, const std::string& prefix) const {
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    rectifiers[l].collect(out, prefix + ".layer" + std::to_string(l) + ".mfrm");
    fusers[l].collect(out, prefix + ".layer" + std::to_string(l) + ".mffm");
  }
}

}  // namespace tsm
