#include "doctest.h"
#include "tsm/config.hpp"
#include "tsm/errors.hpp"

using namespace tsm;

TEST_CASE("defaults") {
  const RunConfig c;
  CHECK(c.image_size == 32);
  CHECK(c.patch_size == 4);
  CHECK(c.embed_dim == 32);
  CHECK(c.blocks_per_stage == 1);
  CHECK(c.num_heads == 2);
  CHECK(c.lr == 1e-3);
  CHECK(c.optimizer == "adam");
  CHECK(c.schedule == "cosine");
  CHECK(c.epochs == 100);
  CHECK(c.tau == 0.07);
  CHECK(c.prompt_template == "a photo of a [CLS]");
  CHECK(c.structure == Structure::D);
  CHECK(c.fusion);
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("text round trip") {
  RunConfig c;
  c.lr = 0.1;
  c.tau = 1.0 / 3.0;
  c.structure = Structure::B;
  c.fusion = false;
  c.vocab = "water,road";
  c.seed = 123456789012345ULL;
  const RunConfig back = parse_config(c.to_text());
  CHECK(back.to_text() == c.to_text());
  CHECK(back.tau == c.tau);
  CHECK(back.seed == c.seed);
  CHECK(back.structure == Structure::B);
  CHECK_FALSE(back.fusion);
}

TEST_CASE("parsing") {
  const RunConfig c = parse_config("# desk\n\n  lr = 0.05  \nstructure=A\nfusion = optical-only\ntemplate = a [CLS]\n");
  CHECK(c.lr == 0.05);
  CHECK(c.structure == Structure::A);
  CHECK_FALSE(c.fusion);
  CHECK(c.prompt_template == "a [CLS]");
  CHECK(c.object_path() == false);
  CHECK(c.scene_path() == false);
  CHECK(parse_config("structure = B").object_path());
  CHECK_FALSE(parse_config("structure = B").scene_path());
  CHECK(parse_config("structure = C").scene_path());
  CHECK_FALSE(parse_config("structure = C").object_path());
}

TEST_CASE("unknown keys and bad values are errors") {
  CHECK_THROWS_WITH_AS(parse_config("lr = 1e-3\nlearning_rate = 1", "x.cfg"), doctest::Contains("x.cfg:2"), ConfigError);
  CHECK_THROWS_WITH_AS(parse_config("learning_rate = 1"), doctest::Contains("learning_rate"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr = fast"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr = 1e-3x"), ConfigError);
  CHECK_THROWS_AS(parse_config("lr = nan"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = -1"), ConfigError);
  CHECK_THROWS_AS(parse_config("epochs = 2.5"), ConfigError);
  CHECK_THROWS_AS(parse_config("structure = E"), ConfigError);
  CHECK_THROWS_AS(parse_config("fusion = maybe"), ConfigError);
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), ConfigError);
}

TEST_CASE("validation") {
  auto bad = [](const std::string& text) { CHECK_THROWS_AS(parse_config(text).validate(), ConfigError); };
  bad("lr = 0");
  bad("optimizer = sgd");
  bad("schedule = step");
  bad("tau = 0");
  bad("batch_size = 1");
  bad("image_size = 30");
  bad("embed_dim = 33");
  bad("beta1 = 1");
  bad("epochs = 0");
  bad("object_target = both");
  CHECK_NOTHROW(parse_config("batch_size = 1\nstructure = B").validate());
  CHECK_NOTHROW(parse_config("epochs = 0\nsteps = 10").validate());
}

TEST_CASE("derived component configs use separate seed streams") {
  RunConfig c;
  CHECK(c.encoder(false).seed != c.encoder(true).seed);
  CHECK(c.encoder(false).seed != c.text(10).seed);
  CHECK(c.synthetic().size == c.image_size);
  CHECK(c.text(10).width == c.embed_dim);
}
