#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <string>

#include "doctest.h"
#include "tsm/png_io.hpp"

namespace fs = std::filesystem;

namespace {

int run(const std::string& args) {
  const int status = std::system((std::string(TSMNET_PATH) + " " + args + " > /dev/null 2>&1").c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Scratch {
  fs::path root = fs::temp_directory_path() / "tsm_cli_test";
  Scratch() {
    fs::remove_all(root);
    fs::create_directories(root);
  }
  ~Scratch() { fs::remove_all(root); }
  std::string operator/(const std::string& name) const { return (root / name).string(); }
};

void write_file(const std::string& path, const std::string& text) { std::ofstream(path) << text; }

}  // namespace

TEST_CASE("generate, train, eval and infer end to end") {
  Scratch s;
  write_file(s / "run.cfg",
             "steps = 12\nbatch_size = 2\neval_every = 0\nsynth_tiles = 6\nsynth_train = 4\nseed = 3\n");
  REQUIRE(run("generate --config " + (s / "run.cfg") + " --out " + (s / "data")) == 0);
  REQUIRE(run("train --config " + (s / "run.cfg") + " --data " + (s / "data") + " --out " + (s / "run")) == 0);
  for (const char* f : {"config.cfg", "train_log.tsv", "model.ckpt"}) CHECK(fs::exists(s.root / "run" / f));

  const std::string eval = "eval --checkpoint " + (s / "run/model.ckpt") + " --data " + (s / "data") + " --split test";
  REQUIRE(run(eval + " --out " + (s / "e1")) == 0);
  REQUIRE(run(eval + " --out " + (s / "e2")) == 0);
  CHECK(slurp(s.root / "e1" / "metrics.txt") == slurp(s.root / "e2" / "metrics.txt"));
  CHECK(!slurp(s.root / "e1" / "metrics.txt").empty());

  const std::string pair = " --optical " + (s / "data/opt/tile_0000.png") + " --sar " + (s / "data/sar/tile_0000.png");
  REQUIRE(run("infer --checkpoint " + (s / "run/model.ckpt") + pair + " --vocab water --out " + (s / "one")) == 0);
  const tsm::Image8 mask = tsm::read_png(s / "one/mask.png");
  CHECK(mask.h == 32);
  for (std::uint8_t v : mask.px) CHECK(v == 0);

  REQUIRE(run("infer --checkpoint " + (s / "run/model.ckpt") + pair +
              " --vocab road,water,road --similarity --out " + (s / "sim")) == 0);
  std::size_t maps = 0;
  for (const auto& e : fs::directory_iterator(s.root / "sim")) maps += e.path().filename().string().rfind("sim_", 0) == 0;
  CHECK(maps == 3);
}

TEST_CASE("exit codes") {
  Scratch s;
  CHECK(run("train --bogus-flag") == 2);
  write_file(s / "bad.cfg", "no_such_key = 1\n");
  CHECK(run("generate --config " + (s / "bad.cfg") + " --out " + (s / "d")) == 2);
  fs::create_directories(s.root / "empty");
  CHECK(run("eval --checkpoint " + (s / "missing.ckpt") + " --data " + (s / "empty")) == 3);
  CHECK(run("gradcheck") == 0);
  CHECK(run("gradcheck --fault neck") == 4);
}
