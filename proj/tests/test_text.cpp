#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "tsm/errors.hpp"
#include "tsm/gradcheck.hpp"
#include "tsm/text.hpp"

using namespace tsm;
using namespace tsm::testing;

namespace {

TextEncoder small_encoder(const Tokenizer& tok, std::size_t c = 8, std::uint64_t seed = 3) {
  TextEncoderConfig cfg;
  cfg.width = c;
  cfg.num_heads = 2;
  cfg.max_len = 12;
  cfg.vocab_size = tok.size();
  cfg.seed = seed;
  return TextEncoder::init(cfg);
}

std::vector<Tensor> params_without_key_bias(const ParamList& p) {
  std::vector<Tensor> out;
  for (const auto& [name, t] : p.items()) {
    if (!name.ends_with(".k.bias")) out.push_back(t);
  }
  return out;
}

void perturb(const ParamList& p, Rng& rng, double scale) {
  for (const auto& [name, t] : p.items()) {
    for (double& v : Tensor(t).mutable_data()) v += scale * rng.normal();
  }
}

FeatureMap random_map(Rng& rng, std::size_t h, std::size_t w, std::size_t c) {
  return FeatureMap{random_tensor(rng, {h * w, c}), h, w};
}

}  // namespace

TEST_CASE("tokenizer") {
  const Tokenizer tok = Tokenizer::from_words({"a", "photo", "of", "water", "low-rise"});
  CHECK(tok.size() == 8);
  CHECK(tok.encode("A Photo, of WATER!") == TokenIds{3, 4, 5, 6});
  CHECK(tok.encode("low-rise lava") == TokenIds{7, Tokenizer::kUnk});
  CHECK(tok.encode("   ").empty());
  CHECK_THROWS_AS(Tokenizer::from_words({"a", "a"}), ConfigError);
  CHECK(Tokenizer::builtin().size() > 100);
}

TEST_CASE("prompt construction") {
  const Tokenizer tok = Tokenizer::builtin();
  const Vocabulary v = Vocabulary::from_names({"water", "bare soil"});
  const auto p = build_prompts(v, kDefaultTemplate, tok);
  REQUIRE(p.size() == 2);
  TokenIds expect = tok.encode("a photo of a water");
  expect.push_back(Tokenizer::kEot);
  CHECK(p[0] == expect);
  CHECK(p[1].size() == 7);

  const auto bare = build_prompts(v, "[CLS]", tok);
  CHECK(bare[0] == TokenIds{tok.encode("water")[0], Tokenizer::kEot});

  CHECK_THROWS_AS(build_prompts(v, "a photo", tok), ConfigError);
  CHECK_THROWS_AS(build_prompts(v, "[CLS] and [CLS]", tok), ConfigError);
  CHECK_THROWS_AS(Vocabulary::from_names({"water", "water"}), std::invalid_argument);
  CHECK_THROWS_AS(Vocabulary::from_list("water,,road"), std::invalid_argument);

  const auto unk = build_prompts(Vocabulary::from_names({"zzyzx"}), kDefaultTemplate, tok);
  CHECK(unk[0][4] == Tokenizer::kUnk);
  CHECK(unk[0].size() == 6);
}

TEST_CASE("vocabulary parsing") {
  const Vocabulary v = Vocabulary::from_list("others,water, road");
  CHECK(v.names == std::vector<std::string>{"others", "water", "road"});
  CHECK(v.index_of("road") == 2);
  CHECK(v.index_of("lava") == 3);
}

TEST_CASE("text encoding rows and equivariance") {
  const Tokenizer tok = Tokenizer::builtin();
  const TextEncoder enc = small_encoder(tok);
  const Vocabulary v = Vocabulary::from_names({"water", "road", "building", "forest"});
  const Tensor t = enc.encode_classes(pad_sequences(build_prompts(v, kDefaultTemplate, tok), 12));
  CHECK(t.shape() == Shape{4, 8});
  CHECK(all_finite(t.data()));

  const std::vector<std::size_t> perm{2, 0, 3, 1};
  std::vector<std::string> names;
  for (std::size_t i : perm) names.push_back(v.names[i]);
  const Tensor tp =
      enc.encode_classes(pad_sequences(build_prompts(Vocabulary::from_names(names), kDefaultTemplate, tok), 12));
  for (std::size_t i = 0; i < perm.size(); ++i) {
    CHECK(bitwise_equal(tp.data().subspan(i * 8, 8), t.data().subspan(perm[i] * 8, 8)));
  }

  // Everything after the end token is ignored.
  auto padded = pad_sequences(build_prompts(v, kDefaultTemplate, tok), 12);
  const Tensor base = enc.encode_classes({padded[0]});
  padded[0].back() = 7;
  CHECK(bitwise_equal(enc.encode_classes({padded[0]}).data(), base.data()));

  const TokenIds too_long(13, 5);
  CHECK_THROWS_AS(pad_sequences({too_long}, 12), std::length_error);
  CHECK_THROWS_AS(enc.encode_classes({TokenIds(11, 5)}), ShapeError);
}

TEST_CASE("text encoder gradients, K=2 C=8") {
  const Tokenizer tok = Tokenizer::builtin();
  TextEncoder enc = small_encoder(tok);
  ParamList p;
  enc.collect(p, "text");
  Rng rng(5);
  perturb(p, rng, 0.3);
  const auto prompts = pad_sequences(build_prompts(Vocabulary::from_names({"water", "road"}), kDefaultTemplate, tok), 12);
  const GradCheckReport r = grad_check([&] { return probe(enc.encode_classes(prompts), 1); }, params_without_key_bias(p));
  INFO("max_rel_err " << r.max_rel_err);
  CHECK(r.pass);
}

TEST_CASE("description embeddings") {
  const Tokenizer tok = Tokenizer::builtin();
  const TextEncoder enc = small_encoder(tok);
  const Tensor a = encode_description(enc, tok, "a scene containing water and trees");
  const Tensor b = encode_description(enc, tok, "a scene containing water and trees");
  CHECK(bitwise_equal(a.data(), b.data()));
  double n2 = 0.0;
  for (double x : a.data()) n2 += x * x;
  CHECK(std::abs(std::sqrt(n2) - 1.0) < 1e-6);
  const Tensor c = encode_description(enc, tok, "road bridge");
  CHECK(max_abs_diff(a.data(), c.data()) > 1e-6);
  CHECK_THROWS_AS(encode_description(enc, tok, ""), std::invalid_argument);
  CHECK_THROWS_AS(encode_description(enc, tok, " ,. "), std::invalid_argument);
}

TEST_CASE("context prompt residual") {
  const std::size_t c = 8;
  Rng rng(6);
  ContextPrompt cp = ContextPrompt::init(rng, c, 2);
  const Tensor t = random_tensor(rng, {3, c});
  const Tensor g = random_tensor(rng, {1, c});
  const FeatureMap local = random_map(rng, 2, 2, c);

  CHECK(cp.gamma[0] == 1e-4);
  const Tensor v = cp.residual(t, g, local);
  double vmax = 0.0;
  for (double x : v.data()) vmax = std::max(vmax, std::abs(x));
  const Tensor tp = cp(t, g, local);
  double tmax = 0.0;
  for (double x : t.data()) tmax = std::max(tmax, std::abs(x));
  // Bound plus one rounding of the sum.
  CHECK(max_abs_diff(tp.data(), t.data()) <= 1e-4 * vmax + 0x1p-52 * tmax);

  fill(cp.gamma, 0.0);
  CHECK(bitwise_equal(cp(t, g, local).data(), t.data()));

  CHECK_THROWS_AS(cp(t, random_tensor(rng, {1, 4}), local), ShapeError);
}

TEST_CASE("context prompt rows are independent") {
  const std::size_t c = 8;
  Rng rng(7);
  const ContextPrompt cp = ContextPrompt::init(rng, c, 2);
  const Tensor t = random_tensor(rng, {3, c});
  const Tensor g = random_tensor(rng, {1, c});
  const FeatureMap local = random_map(rng, 2, 2, c);
  const Tensor full = cp(t, g, local);
  for (std::size_t k = 0; k < 3; ++k) {
    const Tensor one = cp(slice(t, 0, k, 1), g, local);
    CHECK(bitwise_equal(one.data(), full.data().subspan(k * c, c)));
  }
}

TEST_CASE("gradients reach gamma, context tokens and visual tokens") {
  const Tokenizer tok = Tokenizer::builtin();
  TextEncoder enc = small_encoder(tok);
  Rng rng(8);
  ContextPrompt cp = ContextPrompt::init(rng, 8, 2);
  ParamList p;
  enc.collect(p, "text");
  cp.collect(p, "prompt");
  perturb(p, rng, 0.2);
  const Tensor g = random_tensor(rng, {1, 8});
  const FeatureMap local = random_map(rng, 2, 2, 8);
  const auto prompts = pad_sequences(build_prompts(Vocabulary::from_names({"water", "road"}), kDefaultTemplate, tok), 12);
  auto fn = [&] { return probe(cp(enc.encode_classes(prompts), g, local), 2); };
  std::vector<Tensor> inputs{cp.gamma, enc.context, g, local.tokens};
  const GradCheckReport r = grad_check(fn, inputs);
  INFO("max_rel_err " << r.max_rel_err);
  CHECK(r.pass);
  for (const Tensor& t : inputs) {
    double m = 0.0;
    for (double x : t.grad()) m = std::max(m, std::abs(x));
    CHECK(m > 0.0);
  }
  const GradCheckReport all = grad_check(fn, params_without_key_bias(p));
  INFO("all params max_rel_err " << all.max_rel_err);
  CHECK(all.pass);
}

TEST_CASE("score map contract") {
  Rng rng(9);
  const FeatureMap z = random_map(rng, 3, 3, 6);
  Tensor t = random_tensor(rng, {4, 6});
  // Make class 2 parallel to pixel 5 and class 3 orthogonal to it.
  {
    auto d = t.mutable_data();
    for (std::size_t c = 0; c < 6; ++c) d[2 * 6 + c] = 3.0 * z.tokens[5 * 6 + c];
    double dot = 0.0, nn = 0.0;
    for (std::size_t c = 0; c < 6; ++c) {
      dot += d[3 * 6 + c] * z.tokens[5 * 6 + c];
      nn += z.tokens[5 * 6 + c] * z.tokens[5 * 6 + c];
    }
    for (std::size_t c = 0; c < 6; ++c) d[3 * 6 + c] -= dot / nn * z.tokens[5 * 6 + c];
  }
  const Tensor s = score_map(z, t);
  CHECK(s.shape() == Shape{9, 4});
  for (double v : s.data()) {
    CHECK(v >= -1.0);
    CHECK(v <= 1.0);
  }
  CHECK(std::abs(s[5 * 4 + 2] - 1.0) < 1e-9);
  CHECK(std::abs(s[5 * 4 + 3]) < 1e-9);

  // Power-of-two row rescaling is exact; any positive scale keeps values
  // to rounding and the argmax.
  const double pow2[] = {2.0, 0.25, 1024.0, 0x1p-20};
  const double any[] = {3.7, 0.013, 151.0, 1e-5};
  Tensor t2 = t.detach(), t3 = t.detach();
  for (std::size_t k = 0; k < 4; ++k) {
    for (std::size_t c = 0; c < 6; ++c) {
      t2.mutable_data()[k * 6 + c] *= pow2[k];
      t3.mutable_data()[k * 6 + c] *= any[k];
    }
  }
  CHECK(bitwise_equal(score_map(z, t2).data(), s.data()));
  const Tensor s3 = score_map(z, t3);
  CHECK(max_abs_diff(s3.data(), s.data()) < 1e-12);

  CHECK_THROWS_AS(score_map(z, random_tensor(rng, {4, 5})), ShapeError);
}

TEST_CASE("nearest resize") {
  Rng rng(10);
  const Tensor x = random_tensor(rng, {4, 3});
  CHECK(bitwise_equal(resize_nearest(x, 2, 2, 8, 8).data(), upsample_nearest(x, 2, 2, 4).data()));
  const Tensor r = resize_nearest(x, 2, 2, 3, 3);
  CHECK(r.shape() == Shape{9, 3});
  // Rows 0 and 1 of the 3x3 map come from source row 0 and 1 respectively.
  CHECK(bitwise_equal(r.data().subspan(0, 3), x.data().subspan(0, 3)));
  CHECK(bitwise_equal(r.data().subspan(8 * 3, 3), x.data().subspan(3 * 3, 3)));
  CHECK_THROWS_AS(resize_nearest(x, 3, 3, 6, 6), ShapeError);
}

namespace {

FusedPyramid random_pyramid(Rng& rng, std::size_t c) {
  FusedPyramid z;
  const std::size_t sides[] = {4, 2, 1, 1};
  for (std::size_t s = 0; s < kNumStages; ++s) z.stages[s] = random_map(rng, sides[s], sides[s], c);
  z.global = random_tensor(rng, {1, c});
  z.local = random_map(rng, 1, 1, c);
  return z;
}

}  // namespace

TEST_CASE("neck output and injection") {
  const std::size_t c = 6, k = 3, side = 8;
  Rng rng(11);
  const Neck neck = Neck::init(rng, c, 4, side);
  const FusedPyramid z = random_pyramid(rng, c);
  const Tensor text = random_tensor(rng, {k, c});
  const Tensor pixels = random_tensor(rng, {side * side, 4});
  const Tensor s = score_map(z.stages[3], text);

  const NeckOutput out = neck(z, s, text, pixels);
  CHECK(out.features.h == side);
  CHECK(out.features.tokens.shape() == Shape{side * side, c});
  const Tensor logits = class_logits(out.features, text, 10.0);
  CHECK(logits.shape() == Shape{side * side, k});
  for (std::size_t i = 0; i < kNumStages; ++i) CHECK(out.levels[i].h == z.stages[i].h);

  const Tensor zero_logits = class_logits(neck(z, mul_scalar(s, 0.0), text, pixels).features, text, 10.0);
  CHECK(max_abs_diff(zero_logits.data(), logits.data()) > 1e-6);
  const Tensor none_logits = class_logits(neck(z, Tensor(), text, pixels).features, text, 10.0);
  CHECK(bitwise_equal(none_logits.data(), zero_logits.data()));

  CHECK_THROWS_AS(neck(z, random_tensor(rng, {4, k}), text, pixels), ShapeError);
  CHECK_THROWS_AS(neck(z, s, text, random_tensor(rng, {side * side, 3})), ShapeError);
}

TEST_CASE("neck is equivariant to class order") {
  const std::size_t c = 6, k = 4, side = 8;
  Rng rng(12);
  const Neck neck = Neck::init(rng, c, 3, side);
  const FusedPyramid z = random_pyramid(rng, c);
  const Tensor text = random_tensor(rng, {k, c});
  const Tensor pixels = random_tensor(rng, {side * side, 3});
  const std::vector<std::size_t> perm{3, 1, 0, 2};
  const Tensor text_p = gather_rows(text, perm);

  const Tensor s = score_map(z.stages[3], text);
  const Tensor sp = score_map(z.stages[3], text_p);
  const Tensor l = class_logits(neck(z, s, text, pixels).features, text, 10.0);
  const Tensor lp = class_logits(neck(z, sp, text_p, pixels).features, text_p, 10.0);
  for (std::size_t i = 0; i < side * side; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      CHECK(lp[i * k + j] == l[i * k + perm[j]]);
      if (lp[i * k + j] != l[i * k + perm[j]]) return;
    }
  }
}

TEST_CASE("neck gradients") {
  const std::size_t c = 4, k = 2, side = 8;
  Rng rng(13);
  Neck neck = Neck::init(rng, c, 3, side);
  const FusedPyramid z = random_pyramid(rng, c);
  const Tensor text = random_tensor(rng, {k, c});
  const Tensor pixels = random_tensor(rng, {side * side, 3});
  ParamList p;
  neck.collect(p, "neck");
  std::vector<Tensor> inputs;
  for (const auto& [name, t] : p.items()) inputs.push_back(t);
  for (std::size_t s = 0; s < kNumStages; ++s) inputs.push_back(z.stages[s].tokens);
  inputs.push_back(text);
  auto fn = [&] {
    const Tensor s = score_map(z.stages[3], text);
    return probe(class_logits(neck(z, s, text, pixels).features, text, 3.0), 4);
  };
  const GradCheckReport r = grad_check(fn, inputs);
  INFO("max_rel_err " << r.max_rel_err << " input " << r.worst_input << " entry " << r.worst_index << " a "
                      << r.worst_analytic << " n " << r.worst_numeric);
  CHECK(r.pass);
}
