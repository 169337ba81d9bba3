#include "doctest.h"
#include "test_util.hpp"
#include "tsm/errors.hpp"
#include "tsm/fusion.hpp"
#include "tsm/gradcheck.hpp"

using namespace tsm;
using namespace tsm::testing;

namespace {

FeatureMap random_map(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  return FeatureMap{random_tensor(rng, {h * w, c}), h, w};
}

// Six layers shaped like a 16x16 image with patch 2: sides 8, 4, 2, 1.
VisualFeatures random_features(std::uint64_t seed, std::size_t c) {
  Rng rng(seed);
  VisualFeatures f;
  std::size_t side = 8;
  for (std::size_t s = 0; s < kNumStages; ++s, side /= 2) f.stages[s] = random_map(rng, side, side, c);
  f.global = random_tensor(rng, {1, c});
  f.local = random_map(rng, 1, 1, c);
  return f;
}

VisualFeatures zeros_like(const VisualFeatures& f) {
  VisualFeatures z;
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    const FeatureMap m = layer_of(f, l);
    set_layer(z, l, FeatureMap{Tensor::zeros(m.tokens.shape()), m.h, m.w});
  }
  return z;
}

bool same_features(const VisualFeatures& a, const VisualFeatures& b) {
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    if (!bitwise_equal(layer_of(a, l).tokens.data(), layer_of(b, l).tokens.data())) return false;
  }
  return true;
}

// Mirrors the y-branch parameters onto the x branch.
void symmetrize(Rectifier& r, std::size_t c) {
  auto w = r.channel_fc2.weight.mutable_data();
  auto b = r.channel_fc2.bias.mutable_data();
  for (std::size_t i = 0; i < c; ++i) {
    for (std::size_t k = 0; k < c; ++k) w[i * 2 * c + c + k] = w[i * 2 * c + k];
    b[c + i] = b[i];
  }
  // x and y halves of fc1 see identical inputs when x == y; leave as drawn.
  auto ws = r.spatial.weight.mutable_data();
  for (std::size_t i = 0; i < 2 * c; ++i) ws[i * 2 + 1] = ws[i * 2];
  r.spatial.bias.mutable_data()[1] = r.spatial.bias.data()[0];
  copy_values(r.channel_scale_y, r.channel_scale_x);
  copy_values(r.spatial_scale_y, r.spatial_scale_x);
}

void symmetrize(CrossFuser& f, std::size_t c) {
  ParamList a, b;
  f.x_from_y.collect(a, "");
  f.y_from_x.collect(b, "");
  for (std::size_t i = 0; i < a.items().size(); ++i) copy_values(b.items()[i].second, a.items()[i].second);
  copy_values(f.norm_y.gamma, f.norm_x.gamma);
  copy_values(f.norm_y.beta, f.norm_x.beta);
  auto w = f.out.weight.mutable_data();
  for (std::size_t i = 0; i < c * c; ++i) w[c * c + i] = w[i];
}

}  // namespace

TEST_CASE("zero gates make rectification the identity") {
  Rng rng(1);
  MultimodalFusion m = MultimodalFusion::init(rng, 4);
  for (Rectifier& r : m.rectifiers) r.zero_gates();
  const VisualFeatures x = random_features(2, 4);
  const VisualFeatures y = random_features(3, 4);
  auto [xt, yt] = m.rectify(x, y);
  CHECK(same_features(xt, x));
  CHECK(same_features(yt, y));
}

TEST_CASE("equal inputs with symmetric parameters give equal outputs") {
  const std::size_t c = 4;
  Rng rng(4);
  Rectifier r = Rectifier::init(rng, c, true);
  symmetrize(r, c);
  Rng in(5);
  const FeatureMap x = random_map(in, 2, 2, c);
  auto [xt, yt] = r(x, x);
  CHECK(bitwise_equal(xt.tokens.data(), yt.tokens.data()));
  CHECK(!bitwise_equal(xt.tokens.data(), x.tokens.data()));
}

TEST_CASE("rectifier gradients on 2x2x4 maps") {
  for (bool spatial : {true, false}) {
    Rng rng(6);
    Rectifier r = Rectifier::init(rng, 4, spatial);
    ParamList p;
    r.collect(p, "mfrm");
    std::vector<Tensor> inputs;
    for (const auto& [name, t] : p.items()) {
      for (double& v : Tensor(t).mutable_data()) v += 0.3 * rng.normal();
      inputs.push_back(t);
    }
    const FeatureMap x = random_map(rng, 2, 2, 4);
    const FeatureMap y = random_map(rng, 2, 2, 4);
    inputs.push_back(x.tokens);
    inputs.push_back(y.tokens);
    auto fn = [&] {
      auto [a, b] = r(x, y);
      return add(probe(a.tokens, 1), probe(b.tokens, 2));
    };
    const GradCheckReport rep = grad_check(fn, inputs);
    INFO("spatial " << spatial << " max_rel_err " << rep.max_rel_err);
    CHECK(rep.pass);
  }
}

TEST_CASE("cross fuser is symmetric under input swap") {
  const std::size_t c = 4;
  Rng rng(7);
  CrossFuser f = CrossFuser::init(rng, c);
  symmetrize(f, c);
  Rng in(8);
  const FeatureMap a = random_map(in, 2, 2, c);
  const FeatureMap b = random_map(in, 2, 2, c);
  const FeatureMap ab = f(a, b);
  const FeatureMap ba = f(b, a);
  CHECK(max_abs_diff(ab.tokens.data(), ba.tokens.data()) < 1e-12);

  // Equal inputs: a deterministic function of F alone.
  CHECK(bitwise_equal(f(a, a).tokens.data(), f(a, a).tokens.data()));
}

TEST_CASE("cross fuser on a single position") {
  Rng rng(9);
  const CrossFuser f = CrossFuser::init(rng, 4);
  const FeatureMap a = random_map(rng, 1, 1, 4);
  const FeatureMap b = random_map(rng, 1, 1, 4);
  const FeatureMap z = f(a, b);
  CHECK(z.tokens.shape() == Shape{1, 4});
  CHECK(all_finite(z.tokens.data()));
}

TEST_CASE("cross fuser gradients on 2x2x4 maps") {
  Rng rng(10);
  CrossFuser f = CrossFuser::init(rng, 4);
  ParamList p;
  f.collect(p, "mffm");
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : p.items()) {
    for (double& v : Tensor(t).mutable_data()) v += 0.3 * rng.normal();
    if (!name.ends_with(".k.bias")) inputs.push_back(t);
  }
  const FeatureMap x = random_map(rng, 2, 2, 4);
  const FeatureMap y = random_map(rng, 2, 2, 4);
  inputs.push_back(x.tokens);
  inputs.push_back(y.tokens);
  const GradCheckReport rep = grad_check([&] { return probe(f(x, y).tokens, 3); }, inputs);
  INFO("max_rel_err " << rep.max_rel_err);
  CHECK(rep.pass);
}

TEST_CASE("fuse_all composition") {
  const std::size_t c = 4;
  Rng rng(11);
  MultimodalFusion m = MultimodalFusion::init(rng, c);
  const VisualFeatures opt = random_features(12, c);
  const VisualFeatures sar = random_features(13, c);

  const FusedPyramid full = m(opt, sar);
  const FusedPyramid no_rectify = m(opt, sar, FusionOptions{.rectify = false});
  for (std::size_t l = 0; l < kNumLayers; ++l) {
    CHECK(layer_of(full, l).tokens.shape() == layer_of(opt, l).tokens.shape());
    CHECK(layer_of(full, l).h == layer_of(opt, l).h);
    CHECK(all_finite(layer_of(full, l).tokens.data()));
  }
  CHECK(!same_features(full, no_rectify));

  for (Rectifier& r : m.rectifiers) r.zero_gates();
  const VisualFeatures zero = zeros_like(sar);
  CHECK(same_features(m(opt, zero), m.fuse(opt, zero)));
}

TEST_CASE("layer shape mismatch is rejected") {
  Rng rng(14);
  const MultimodalFusion m = MultimodalFusion::init(rng, 4);
  const VisualFeatures opt = random_features(15, 4);
  VisualFeatures sar = random_features(16, 4);
  sar.stages[1] = random_map(rng, 2, 2, 4);
  CHECK_THROWS_AS(m(opt, sar), ShapeError);
  CHECK_THROWS_AS(m.fusers[0](layer_of(opt, 0), layer_of(opt, 1)), ShapeError);
}

TEST_CASE("parameters are per layer") {
  Rng rng(17);
  const MultimodalFusion m = MultimodalFusion::init(rng, 4);
  ParamList p;
  m.collect(p, "fusion");
  CHECK(p.find("fusion.layer0.mfrm.channel_fc1.weight").node() != p.find("fusion.layer1.mfrm.channel_fc1.weight").node());
  CHECK_THROWS_AS(p.find("fusion.layer4.mfrm.spatial.weight"), std::out_of_range);
  CHECK_NOTHROW(p.find("fusion.layer3.mfrm.spatial.weight"));
}
