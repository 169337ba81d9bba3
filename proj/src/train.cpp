#include "tsm/train.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "tsm/errors.hpp"

namespace tsm {

namespace {

Tensor batch_mean(const std::vector<Tensor>& terms) {
  if (terms.empty()) return {};
  Tensor s = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) s = add(s, terms[i]);
  return mul_scalar(s, 1.0 / static_cast<double>(terms.size()));
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

Adam::Adam(ParamList params, double beta1, double beta2, double eps, double weight_decay)
    : params_(std::move(params)), beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {
  for (const auto& [name, t] : params_.items()) {
    m_.emplace_back(t.numel(), 0.0);
    v_.emplace_back(t.numel(), 0.0);
  }
}

void Adam::step(double lr) {
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  std::size_t i = 0;
  for (const auto& [name, t] : params_.items()) {
    Tensor p = t;
    const auto g = p.grad();
    auto x = p.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < x.size(); ++j) {
      const double gj = g[j] + weight_decay_ * x[j];
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * gj;
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * gj * gj;
      x[j] -= lr * (m[j] / c1) / (std::sqrt(v[j] / c2) + eps_);
    }
    ++i;
  }
}

double learning_rate(const RunConfig& cfg, std::size_t step, std::size_t total) {
  if (cfg.schedule == "constant" || total == 0) return cfg.lr;
  return cfg.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(total)));
}

Labels remap_labels(const Labels& labels, const std::vector<std::string>& dataset_classes, const Vocabulary& vocab) {
  if (dataset_classes.empty()) {
    for (std::uint8_t v : labels) {
      if (v != kIgnore && v >= vocab.size()) {
        throw DataError("label id " + std::to_string(v) + " outside a " + std::to_string(vocab.size()) +
                        "-class vocabulary and the dataset has no class list");
      }
    }
    return labels;
  }
  std::vector<std::uint8_t> map(256, kIgnore);
  for (std::size_t c = 0; c < dataset_classes.size() && c < kIgnore; ++c) {
    const std::size_t k = vocab.index_of(dataset_classes[c]);
    if (k < vocab.size()) map[c] = static_cast<std::uint8_t>(k);
  }
  Labels out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = map[labels[i]];
  return out;
}

std::size_t total_steps(const RunConfig& cfg, std::size_t n_train) {
  if (cfg.steps > 0) return cfg.steps;
  const std::size_t batch = std::min(cfg.batch_size, n_train);
  return cfg.epochs * (n_train / batch);
}

TrainResult train(Model& model, const Dataset& data, const Vocabulary& vocab, const TrainHooks& hooks) {
  const RunConfig& cfg = model.config;
  const std::vector<const TilePair*> tiles = data.split("train");
  if (tiles.empty()) throw DataError("no training tiles in the manifest");
  const std::size_t batch = std::min(cfg.batch_size, tiles.size());
  if (cfg.scene_path() && batch < 2) throw ConfigError("the contrastive scene loss needs at least two training tiles");
  const std::size_t per_epoch = tiles.size() / batch;
  const std::size_t total = total_steps(cfg, tiles.size());

  const std::size_t h4 = cfg.encoder(false).stage_side(kNumStages - 1);
  std::vector<SampleInput> inputs;
  std::vector<Labels> labels, coarse;
  for (const TilePair* t : tiles) {
    inputs.push_back(prepare_sample(*t, cfg, model.tokenizer));
    labels.push_back(remap_labels(t->labels, data.manifest.class_names, vocab));
    if (std::all_of(labels.back().begin(), labels.back().end(), [](std::uint8_t v) { return v == kIgnore; })) {
      throw DataError("tile " + t->id + " has no pixel of a vocabulary class");
    }
    coarse.push_back(downsample_labels(labels.back(), cfg.image_size, cfg.image_size, h4, h4));
  }

  ParamList params = model.parameters();
  Adam adam(params, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay);
  Rng order_rng = Rng::stream(cfg.seed, "data-order");
  std::vector<std::size_t> order(tiles.size());

  TrainResult result;
  for (std::size_t step = 0; step < total; ++step) {
    const std::size_t epoch = step / per_epoch;
    const std::size_t slot = step % per_epoch;
    if (slot == 0) {
      for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
      for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[order_rng.below(i)]);
    }

    params.zero_grad();
    // Term under construction, for error reports.
    std::string term = "forward";
    TotalLoss loss;
    try {
      const Tensor class_text = model.encode_vocabulary(vocab);
      std::vector<Tensor> ce, dice, object, images, texts;
      for (std::size_t b = 0; b < batch; ++b) {
        const std::size_t i = order[slot * batch + b];
        term = "forward";
        const ForwardOutput f = model.forward(inputs[i], class_text);
        term = "l_ce";
        ce.push_back(cross_entropy(f.logits, labels[i]));
        term = "l_dice";
        dice.push_back(dice_loss(softmax(f.logits, 1), labels[i]));
        term = "l_object";
        if (cfg.object_path()) {
          const Tensor s = mul_scalar(f.score, cfg.logit_scale);
          if (cfg.object_target == "upsampled") {
            object.push_back(cross_entropy(resize_nearest(s, h4, h4, cfg.image_size, cfg.image_size), labels[i]));
          } else if (std::any_of(coarse[i].begin(), coarse[i].end(), [](std::uint8_t v) { return v != kIgnore; })) {
            object.push_back(cross_entropy(s, coarse[i]));
          }
        }
        if (cfg.scene_path()) {
          images.push_back(f.scene_image);
          texts.push_back(f.scene_text);
        }
      }
      LossTerms terms;
      terms.ce = batch_mean(ce);
      terms.dice = batch_mean(dice);
      terms.object = batch_mean(object);
      term = "l_scene";
      if (cfg.scene_path()) terms.scene = info_nce(concat(images, 0), concat(texts, 0), cfg.tau);
      term = "total";
      loss = total_loss(terms);
    } catch (const NumericError& e) {
      throw NumericError("step " + std::to_string(step) + ", " + term + ": " + e.what());
    }
    backward(loss.total);
    const double lr = learning_rate(cfg, step, total);
    adam.step(lr);

    StepRecord rec{step, epoch, lr, loss.parts};
    result.steps.push_back(rec);
    if (hooks.on_step) hooks.on_step(rec);

    const bool epoch_end = slot + 1 == per_epoch || step + 1 == total;
    if (epoch_end && cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || step + 1 == total)) {
      EpochRecord er{epoch, evaluate(model, tiles, data.manifest.class_names, vocab).metrics};
      result.epochs.push_back(er);
      if (hooks.on_epoch) hooks.on_epoch(er);
    }
  }
  return result;
}

EvalResult evaluate(const Model& model, const std::vector<const TilePair*>& tiles,
                    const std::vector<std::string>& dataset_classes, const Vocabulary& vocab) {
  if (tiles.empty()) throw DataError("no tiles to evaluate");
  EvalResult r;
  r.confusion = ConfusionMatrix(vocab.size());
  Tensor class_text;
  {
    NoGradGuard guard;
    class_text = model.encode_vocabulary(vocab);
  }
  for (const TilePair* t : tiles) {
    const SampleInput in = prepare_sample(*t, model.config, model.tokenizer);
    r.predictions.push_back(model.predict(in, class_text));
    accumulate(r.confusion, r.predictions.back(), remap_labels(t->labels, dataset_classes, vocab));
  }
  if (r.confusion.n == 0) throw DataError("no evaluated pixel belongs to a vocabulary class");
  r.metrics = compute_metrics(r.confusion);
  return r;
}

void write_step_header(std::ostream& out) { out << "step\tepoch\tlr\tl_object\tl_scene\tl_ce\tl_dice\tl_total\n"; }

void write_step(std::ostream& out, const StepRecord& r) {
  out << r.step << '\t' << r.epoch << '\t' << fmt(r.lr) << '\t' << fmt(r.loss.l_object) << '\t' << fmt(r.loss.l_scene)
      << '\t' << fmt(r.loss.l_ce) << '\t' << fmt(r.loss.l_dice) << '\t' << fmt(r.loss.l_total) << '\n';
}

}  // namespace tsm
