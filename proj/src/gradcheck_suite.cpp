#include "tsm/gradcheck_suite.hpp"

#include <cmath>
#include <functional>

#include "tsm/errors.hpp"
#include "tsm/losses.hpp"
#include "tsm/scene.hpp"
#include "tsm/text.hpp"

namespace tsm {

namespace {

constexpr std::size_t kC = 4;

Tensor random_input(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Random projection to a scalar.
Tensor probe(const Tensor& y, Rng& rng) {
  std::vector<double> w(y.numel());
  for (double& x : w) x = rng.normal();
  return sum(mul(y, Tensor::from(y.shape(), std::move(w))));
}

FusedPyramid random_pyramid(Rng& rng, std::size_t side) {
  FusedPyramid z;
  for (std::size_t s = 0; s < kNumStages; ++s, side = (side + 1) / 2) {
    z.stages[s] = FeatureMap{random_input(rng, {side * side, kC}), side, side};
  }
  z.global = random_input(rng, {1, kC});
  z.local = FeatureMap{random_input(rng, {1, kC}), 1, 1};
  return z;
}

struct Setup {
  std::vector<Tensor> checked;
  std::vector<Tensor> zero_grad;
};

// Parameters are jittered away from their initial values so that no
// gate, scale or projection sits at a degenerate point.
void add_params(Setup& s, const ParamList& p, Rng& rng, const std::function<bool(const std::string&)>& is_zero) {
  for (const auto& [name, t] : p.items()) {
    Tensor h = t;
    for (double& v : h.mutable_data()) v += 0.3 * rng.normal();
    (is_zero(name) ? s.zero_grad : s.checked).push_back(t);
  }
}

bool key_bias(const std::string& name) { return name.ends_with(".k.bias"); }

ModuleCheck check(const std::string& module, const std::function<Tensor()>& fn, Setup s, double tol) {
  ModuleCheck mc;
  mc.module = module;
  mc.report = grad_check(fn, s.checked, 1e-4, tol);
  for (Tensor& t : s.zero_grad) {
    t.set_requires_grad(true);
    t.zero_grad();
    mc.structural_zero += t.numel();
  }
  if (!s.zero_grad.empty()) {
    for (Tensor& t : s.checked) t.zero_grad();
    backward(fn());
    for (const Tensor& t : s.zero_grad) {
      for (double g : t.grad()) mc.structural_ok = mc.structural_ok && std::abs(g) < 1e-10;
    }
  }
  return mc;
}

}  // namespace

const std::vector<std::string>& gradcheck_modules() {
  static const std::vector<std::string> m = {"encoder",      "mfrm",     "mffm",        "context_prompt",
                                             "score_map_ce", "info_nce", "dice",        "text_encoder",
                                             "scene_fusion", "neck"};
  return m;
}

std::vector<ModuleCheck> run_gradcheck_suite(std::uint64_t seed, double tol, const std::string& fault) {
  if (!fault.empty() && std::find(gradcheck_modules().begin(), gradcheck_modules().end(), fault) ==
                            gradcheck_modules().end()) {
    throw ConfigError("unknown gradcheck module '" + fault + "'");
  }
  auto out_of = [&](const std::string& module, const Tensor& y) { return module == fault ? scale_grad(y, 1.5) : y; };
  std::vector<ModuleCheck> results;

  {
    EncoderConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = kC;
    cfg.num_heads = 2;
    cfg.blocks_per_stage = 1;
    cfg.seed = Rng::derive(seed, "gradcheck/encoder");
    const VisualEncoder enc = VisualEncoder::init(cfg);
    Rng rng = Rng::stream(seed, "gradcheck/encoder/data");
    ParamList p;
    enc.collect(p, "encoder");
    Setup s;
    add_params(s, p, rng, key_bias);
    const Tensor img = random_input(rng, {8, 8, 3});
    s.checked.push_back(img);
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      const VisualFeatures f = enc(img);
      Rng pr(probe_seed);
      Tensor total = probe(out_of("encoder", f.global), pr);
      for (std::size_t l = 0; l < kNumStages; ++l) total = add(total, probe(out_of("encoder", f.stages[l].tokens), pr));
      return add(total, probe(out_of("encoder", f.local.tokens), pr));
    };
    results.push_back(check("encoder", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/mfrm");
    const Rectifier r = Rectifier::init(rng, kC, true);
    ParamList p;
    r.collect(p, "mfrm");
    Setup s;
    add_params(s, p, rng, [](const std::string&) { return false; });
    const FeatureMap x{random_input(rng, {4, kC}), 2, 2}, y{random_input(rng, {4, kC}), 2, 2};
    s.checked.push_back(x.tokens);
    s.checked.push_back(y.tokens);
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      auto [a, b] = r(x, y);
      Rng pr(probe_seed);
      return add(probe(out_of("mfrm", a.tokens), pr), probe(out_of("mfrm", b.tokens), pr));
    };
    results.push_back(check("mfrm", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/mffm");
    const CrossFuser f = CrossFuser::init(rng, kC);
    ParamList p;
    f.collect(p, "mffm");
    Setup s;
    add_params(s, p, rng, key_bias);
    const FeatureMap x{random_input(rng, {4, kC}), 2, 2}, y{random_input(rng, {4, kC}), 2, 2};
    s.checked.push_back(x.tokens);
    s.checked.push_back(y.tokens);
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      Rng pr(probe_seed);
      return probe(out_of("mffm", f(x, y).tokens), pr);
    };
    results.push_back(check("mffm", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/context_prompt");
    const ContextPrompt cp = ContextPrompt::init(rng, kC, 2);
    ParamList p;
    cp.collect(p, "prompt");
    Setup s;
    add_params(s, p, rng, key_bias);
    const Tensor t = random_input(rng, {3, kC});
    const Tensor global = random_input(rng, {1, kC});
    const FeatureMap local{random_input(rng, {4, kC}), 2, 2};
    for (const Tensor& x : {t, global, local.tokens}) s.checked.push_back(x);
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      Rng pr(probe_seed);
      return probe(out_of("context_prompt", cp(t, global, local)), pr);
    };
    results.push_back(check("context_prompt", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/score_map_ce");
    const FeatureMap z{random_input(rng, {4, kC}), 2, 2};
    const Tensor t = random_input(rng, {3, kC});
    Labels labels(16);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));
    labels[5] = kIgnore;
    Setup s;
    s.checked = {z.tokens, t};
    auto fn = [&] {
      const Tensor sm = out_of("score_map_ce", mul_scalar(score_map(z, t), 3.0));
      return cross_entropy(resize_nearest(sm, 2, 2, 4, 4), labels);
    };
    results.push_back(check("score_map_ce", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/info_nce");
    const Tensor img = random_input(rng, {3, kC});
    const Tensor txt = random_input(rng, {3, kC});
    Setup s;
    s.checked = {img, txt};
    auto fn = [&] {
      return info_nce(out_of("info_nce", l2_normalize(img, 1)), out_of("info_nce", l2_normalize(txt, 1)), 0.5);
    };
    results.push_back(check("info_nce", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/dice");
    const Tensor logits = random_input(rng, {16, 3});
    Labels labels(16);
    for (auto& l : labels) l = static_cast<std::uint8_t>(rng.below(3));
    Setup s;
    s.checked = {logits};
    auto fn = [&] { return dice_loss(out_of("dice", softmax(logits, 1)), labels); };
    results.push_back(check("dice", fn, s, tol));
  }
  {
    const Tokenizer tok = Tokenizer::from_words({"a", "photo", "of", "water", "road", "scene", "containing", "and"});
    TextEncoderConfig cfg;
    cfg.width = kC;
    cfg.num_heads = 2;
    cfg.num_layers = 1;
    cfg.n_ctx = 2;
    cfg.max_len = 8;
    cfg.vocab_size = tok.size();
    cfg.seed = Rng::derive(seed, "gradcheck/text_encoder");
    const TextEncoder enc = TextEncoder::init(cfg);
    Rng rng = Rng::stream(seed, "gradcheck/text_encoder/data");
    ParamList p;
    enc.collect(p, "text");
    Setup s;
    add_params(s, p, rng, key_bias);
    const auto prompts = pad_sequences(
        build_prompts(Vocabulary::from_names({"water", "road"}), kDefaultTemplate, tok), cfg.max_len);
    TokenIds desc = tok.encode("a scene containing water and road");
    desc.push_back(Tokenizer::kEot);
    desc = pad_sequences({desc}, cfg.max_len)[0];
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      Rng pr(probe_seed);
      return add(probe(out_of("text_encoder", enc.encode_classes(prompts)), pr),
                 probe(out_of("text_encoder", enc.encode_description(desc)), pr));
    };
    results.push_back(check("text_encoder", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/scene_fusion");
    const SceneFusion f = SceneFusion::init(rng, kC, 2);
    ParamList p;
    f.collect(p, "scene_fusion");
    Setup s;
    add_params(s, p, rng, [](const std::string& n) {
      return n.find(".attn.q.") != std::string::npos || n.find(".attn.k.") != std::string::npos;
    });
    const FeatureMap s0{random_input(rng, {4, kC}), 2, 2}, s1{random_input(rng, {1, kC}), 1, 1};
    const Tensor d = random_input(rng, {1, kC});
    for (const Tensor& x : {s0.tokens, s1.tokens, d}) s.checked.push_back(x);
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      Rng pr(probe_seed);
      return add(probe(out_of("scene_fusion", f.stages[0](s0, d).tokens), pr),
                 probe(out_of("scene_fusion", f.stages[1](s1, d).tokens), pr));
    };
    results.push_back(check("scene_fusion", fn, s, tol));
  }
  {
    Rng rng = Rng::stream(seed, "gradcheck/neck");
    const Neck neck = Neck::init(rng, kC, 3, 8);
    ParamList p;
    neck.collect(p, "neck");
    Setup s;
    add_params(s, p, rng, [](const std::string&) { return false; });
    const FusedPyramid z = random_pyramid(rng, 2);
    const Tensor text = random_input(rng, {2, kC});
    const Tensor pixels = random_input(rng, {64, 3});
    for (std::size_t l = 0; l < kNumStages; ++l) s.checked.push_back(z.stages[l].tokens);
    s.checked.push_back(text);
    s.checked.push_back(pixels);
    const std::uint64_t probe_seed = rng.next();
    auto fn = [&] {
      Rng pr(probe_seed);
      const Tensor sm = score_map(z.stages[kNumStages - 1], text);
      return probe(out_of("neck", class_logits(neck(z, sm, text, pixels).features, text, 3.0)), pr);
    };
    results.push_back(check("neck", fn, s, tol));
  }
  return results;
}

}  // namespace tsm
