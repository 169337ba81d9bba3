#include <cmath>
#include <sstream>

#include "doctest.h"
#include "test_util.hpp"
#include "tsm/errors.hpp"
#include "tsm/train.hpp"

using namespace tsm;
using namespace tsm::testing;

namespace {

RunConfig tiny_config(Structure s = Structure::D) {
  RunConfig c;
  c.image_size = 16;
  c.embed_dim = 8;
  c.text_layers = 1;
  c.n_ctx = 2;
  c.max_len = 16;
  c.steps = 3;
  c.batch_size = 2;
  c.eval_every = 0;
  c.synth_tiles = 6;
  c.synth_train = 4;
  c.seed = 11;
  c.structure = s;
  return c;
}

struct Run {
  TrainResult result;
  std::string log;
  Model model;
};

Run run(const RunConfig& c) {
  const Dataset ds = generate_synthetic(c.synthetic());
  Model m = Model::init(c, Tokenizer::builtin());
  std::ostringstream log;
  write_step_header(log);
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { write_step(log, r); };
  TrainResult r = train(m, ds, Vocabulary::from_names(ds.manifest.class_names), hooks);
  return {std::move(r), log.str(), std::move(m)};
}

}  // namespace

TEST_CASE("Adam first step moves each parameter by lr") {
  Tensor x = Tensor::from({3}, {1.0, -2.0, 0.5}, true);
  ParamList p;
  p.add("x", x);
  Adam adam(p, 0.9, 0.999, 1e-8, 0.0);
  backward(sum(mul(x, x)));
  adam.step(0.01);
  CHECK(std::abs(x[0] - 0.99) < 1e-9);
  CHECK(std::abs(x[1] + 1.99) < 1e-9);
  CHECK(std::abs(x[2] - 0.49) < 1e-9);
  CHECK(adam.steps() == 1);
}

TEST_CASE("cosine schedule") {
  RunConfig c;
  c.lr = 0.4;
  CHECK(learning_rate(c, 0, 100) == 0.4);
  CHECK(std::abs(learning_rate(c, 50, 100) - 0.2) < 1e-15);
  CHECK(learning_rate(c, 100, 100) < 1e-15);
  c.schedule = "constant";
  CHECK(learning_rate(c, 70, 100) == 0.4);
  c.steps = 0;
  c.epochs = 3;
  c.batch_size = 4;
  CHECK(total_steps(c, 10) == 6);
  c.steps = 5;
  CHECK(total_steps(c, 10) == 5);
}

TEST_CASE("labels are remapped by class name") {
  const Labels gt{0, 1, 2, kIgnore};
  const std::vector<std::string> classes{"others", "water", "road"};
  CHECK(remap_labels(gt, classes, Vocabulary::from_names({"road", "others", "water"})) == Labels{1, 2, 0, kIgnore});
  CHECK(remap_labels(gt, classes, Vocabulary::from_names({"water"})) == Labels{kIgnore, 0, kIgnore, kIgnore});
  CHECK(remap_labels(gt, {}, Vocabulary::from_names({"a", "b", "c"})) == gt);
  CHECK_THROWS_AS(remap_labels(gt, {}, Vocabulary::from_names({"a", "b"})), DataError);
}

TEST_CASE("same seed gives identical loss logs") {
  const Run a = run(tiny_config());
  const Run b = run(tiny_config());
  CHECK(a.log == b.log);
  CHECK(a.result.steps.size() == 3);
  RunConfig other = tiny_config();
  other.seed = 12;
  CHECK(run(other).log != a.log);
}

TEST_CASE("structures switch the text losses") {
  for (Structure s : {Structure::A, Structure::B, Structure::C, Structure::D}) {
    const RunConfig c = tiny_config(s);
    const Run r = run(c);
    for (const StepRecord& st : r.result.steps) {
      CHECK((st.loss.l_object == 0.0) == !c.object_path());
      CHECK((st.loss.l_scene == 0.0) == !c.scene_path());
      CHECK(st.loss.l_ce > 0.0);
      CHECK(st.loss.l_dice > 0.0);
      const double sum = st.loss.l_object + st.loss.l_scene + st.loss.l_ce + st.loss.l_dice;
      CHECK(std::abs(st.loss.l_total - sum) <= 1e-9);
    }
  }
}

TEST_CASE("training lowers the loss") {
  RunConfig c = tiny_config(Structure::A);
  c.steps = 30;
  c.lr = 3e-3;
  const Run r = run(c);
  CHECK(r.result.steps.back().loss.l_total < 0.8 * r.result.steps.front().loss.l_total);
}

TEST_CASE("per-epoch evaluation") {
  RunConfig c = tiny_config();
  c.steps = 4;
  c.eval_every = 1;
  const Run r = run(c);
  // Four train tiles in batches of two: two steps per epoch.
  REQUIRE(r.result.epochs.size() == 2);
  CHECK(r.result.epochs[0].epoch == 0);
  CHECK(r.result.epochs[1].epoch == 1);
  CHECK(r.result.steps[3].epoch == 1);
}

TEST_CASE("non-finite loss aborts with step and term") {
  const RunConfig c = tiny_config(Structure::A);
  const Dataset ds = generate_synthetic(c.synthetic());
  Model m = Model::init(c, Tokenizer::builtin());
  fill(m.neck.head.bias, std::nan(""));
  CHECK_THROWS_WITH_AS(train(m, ds, Vocabulary::from_names(ds.manifest.class_names)),
                       doctest::Contains("step 0"), NumericError);
  Model m2 = Model::init(c, Tokenizer::builtin());
  fill(m2.neck.head.bias, std::nan(""));
  try {
    train(m2, ds, Vocabulary::from_names(ds.manifest.class_names));
  } catch (const NumericError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("ce") != std::string::npos);
  }
}

TEST_CASE("evaluation is equivariant to vocabulary order") {
  const RunConfig c = tiny_config(Structure::B);
  const Run r = run(c);
  const Dataset ds = generate_synthetic(c.synthetic());
  const auto tiles = ds.split("test");
  const std::vector<std::string>& names = ds.manifest.class_names;
  const EvalResult base = evaluate(r.model, tiles, names, Vocabulary::from_names(names));
  const std::vector<std::size_t> perm{2, 4, 0, 3, 1};
  std::vector<std::string> permuted;
  for (std::size_t k : perm) permuted.push_back(names[k]);
  const EvalResult moved = evaluate(r.model, tiles, names, Vocabulary::from_names(permuted));
  CHECK(std::memcmp(&base.metrics.oa, &moved.metrics.oa, sizeof(double)) == 0);
  CHECK(std::memcmp(&base.metrics.kappa, &moved.metrics.kappa, sizeof(double)) == 0);
  CHECK(std::memcmp(&base.metrics.miou, &moved.metrics.miou, sizeof(double)) == 0);
  for (std::size_t j = 0; j < perm.size(); ++j) {
    CHECK(moved.metrics.iou[j] == base.metrics.iou[perm[j]]);
    CHECK(moved.metrics.f1[j] == base.metrics.f1[perm[j]]);
  }
  const EvalResult again = evaluate(r.model, tiles, names, Vocabulary::from_names(names));
  std::ostringstream a, b;
  write_report(a, base.metrics, names);
  write_report(b, again.metrics, names);
  CHECK(a.str() == b.str());
}

TEST_CASE("training input errors") {
  RunConfig c = tiny_config();
  const Dataset ds = generate_synthetic(c.synthetic());
  Model m = Model::init(c, Tokenizer::builtin());
  Dataset no_train = ds;
  for (auto& e : no_train.manifest.entries) e.split = "test";
  CHECK_THROWS_AS(train(m, no_train, Vocabulary::from_names(ds.manifest.class_names)), DataError);
  CHECK_THROWS_AS(train(m, ds, Vocabulary::from_names({"nothing here"})), DataError);
}
