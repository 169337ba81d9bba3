// tsmnet: generate | train | eval | infer | gradcheck
// Exit status: 0 ok, 1 internal error, 2 config error, 3 data error,
// 4 numeric failure (non-finite loss or failed gradient check).

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <thread>

#include "CLI11.hpp"
#include "tsm/errors.hpp"
#include "tsm/gradcheck_suite.hpp"
#include "tsm/train.hpp"

namespace fs = std::filesystem;
using namespace tsm;

namespace {

enum Exit { kOk = 0, kInternal = 1, kConfig = 2, kData = 3, kNumeric = 4 };

struct Common {
  std::string config, vocab, tmpl, structure, fusion, out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c, bool model_flags) {
  cmd->add_option("--config", c.config, "key = value configuration file");
  cmd->add_option("--seed", c.seed, "master seed");
  cmd->add_option("--vocab", c.vocab, "class names: file with one per line, or a comma list");
  cmd->add_option("--template", c.tmpl, "prompt template containing [CLS]");
  cmd->add_option("--out", c.out, "output directory");
  if (model_flags) {
    cmd->add_option("--structure", c.structure, "text guidance structure")->check(CLI::IsMember({"A", "B", "C", "D"}));
    cmd->add_option("--fusion", c.fusion, "optical/SAR fusion")->check(CLI::IsMember({"on", "off"}));
  }
}

RunConfig build_config(const Common& c) {
  RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (!c.vocab.empty()) cfg.vocab = c.vocab;
  if (!c.tmpl.empty()) cfg.prompt_template = c.tmpl;
  if (!c.structure.empty()) cfg.set("structure", c.structure);
  if (!c.fusion.empty()) cfg.set("fusion", c.fusion);
  if (!c.out.empty()) cfg.out_dir = c.out;
  return cfg;
}

std::size_t loader_threads() {
  if (const char* env = std::getenv("TSM_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v < 1) throw ConfigError(std::string("TSM_THREADS must be a positive integer, got '") + env + "'");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

Dataset load_dataset(const std::string& root) {
  LoadResult r = load_tiles(root, loader_threads());
  for (const std::string& w : r.warnings) std::cerr << "warning: " << w << '\n';
  return std::move(r.dataset);
}

Tokenizer load_tokenizer(const RunConfig& cfg) {
  return cfg.tokens.empty() ? Tokenizer::builtin() : Tokenizer::from_file(cfg.tokens);
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw DataError("cannot write " + p.string());
}

std::vector<const TilePair*> pick_split(const Dataset& ds, const std::string& split) {
  if (split == "all") {
    std::vector<const TilePair*> all;
    for (const TilePair& t : ds.tiles) all.push_back(&t);
    return all;
  }
  const auto tiles = ds.split(split);
  if (tiles.empty()) throw DataError("split '" + split + "' is empty");
  return tiles;
}

int cmd_generate(const Common& c) {
  const RunConfig cfg = build_config(c);
  const Dataset ds = generate_synthetic(cfg.synthetic());
  write_dataset(ds, cfg.out_dir);
  std::cout << "wrote " << ds.tiles.size() << " tiles (" << ds.manifest.stems("train").size() << " train, "
            << ds.manifest.stems("test").size() << " test) to " << cfg.out_dir << '\n';
  return kOk;
}

int cmd_train(const Common& c, const std::string& data) {
  RunConfig cfg = build_config(c);
  if (!data.empty()) cfg.data_dir = data;
  cfg.validate();
  const Dataset ds = load_dataset(cfg.data_dir);
  const Vocabulary vocab = resolve_vocabulary(cfg.vocab, ds.manifest.class_names);
  Model model = Model::init(cfg, load_tokenizer(cfg));

  const fs::path out(cfg.out_dir);
  fs::create_directories(out);
  write_file(out / "config.cfg", cfg.to_text());
  std::ofstream steps(out / "train_log.tsv", std::ios::binary | std::ios::trunc);
  std::ofstream epochs(out / "epoch_log.tsv", std::ios::binary | std::ios::trunc);
  write_step_header(steps);
  epochs << "epoch\toa\tkappa\tmiou\tmacro_f1\n";
  TrainHooks hooks;
  hooks.on_step = [&](const StepRecord& r) { write_step(steps, r); };
  hooks.on_epoch = [&](const EpochRecord& r) {
    char line[160];
    std::snprintf(line, sizeof line, "%zu\t%.17g\t%.17g\t%.17g\t%.17g\n", r.epoch, r.train.oa, r.train.kappa,
                  r.train.miou, r.train.macro_f1);
    epochs << line << std::flush;
    std::printf("epoch %zu  train OA %.4f  mIoU %.4f\n", r.epoch, r.train.oa, r.train.miou);
  };
  const TrainResult res = train(model, ds, vocab, hooks);
  save_checkpoint(model, (out / "model.ckpt").string());
  const StepRecord& last = res.steps.back();
  std::printf("trained %zu steps, final loss %.6f (object %.6f scene %.6f ce %.6f dice %.6f)\n", res.steps.size(),
              last.loss.l_total, last.loss.l_object, last.loss.l_scene, last.loss.l_ce, last.loss.l_dice);
  std::cout << "checkpoint " << (out / "model.ckpt").string() << '\n';
  return kOk;
}

int cmd_eval(const Common& c, const std::string& checkpoint, const std::string& data, const std::string& split) {
  Model model = load_checkpoint(checkpoint);
  if (!c.tmpl.empty()) model.config.prompt_template = c.tmpl;
  const Dataset ds = load_dataset(data.empty() ? model.config.data_dir : data);
  const Vocabulary vocab = resolve_vocabulary(c.vocab.empty() ? model.config.vocab : c.vocab, ds.manifest.class_names);
  const EvalResult r = evaluate(model, pick_split(ds, split), ds.manifest.class_names, vocab);
  write_table(std::cout, r.metrics, vocab.names);
  if (!c.out.empty()) {
    fs::create_directories(c.out);
    std::ostringstream report;
    write_report(report, r.metrics, vocab.names);
    write_file(fs::path(c.out) / "metrics.txt", report.str());
  }
  return kOk;
}

int cmd_infer(const Common& c, const std::string& checkpoint, const std::string& optical, const std::string& sar,
              std::string description, bool similarity) {
  Model model = load_checkpoint(checkpoint);
  if (!c.tmpl.empty()) model.config.prompt_template = c.tmpl;
  if (c.vocab.empty() && model.config.vocab.empty()) throw ConfigError("infer needs --vocab");
  const Vocabulary vocab = resolve_vocabulary(c.vocab.empty() ? model.config.vocab : c.vocab, {}, true);
  TilePair tile;
  tile.id = fs::path(optical).stem().string();
  tile.optical = read_png(optical);
  tile.sar = read_png(sar);
  if (tile.optical.ch != 3) throw DataError(optical + ": optical raster must be RGB");
  if (tile.sar.ch == 3) {
    Image8 g{tile.sar.h, tile.sar.w, 1, std::vector<std::uint8_t>(tile.sar.h * tile.sar.w)};
    for (std::size_t i = 0; i < g.px.size(); ++i) g.px[i] = tile.sar.px[i * 3];
    tile.sar = std::move(g);
  }
  if (tile.sar.h != tile.optical.h || tile.sar.w != tile.optical.w || tile.sar.ch != 1) {
    throw DataError("optical and SAR rasters are not co-registered");
  }
  if (description.empty()) {
    Labels each;
    for (std::size_t k = 0; k < vocab.size(); ++k) each.push_back(static_cast<std::uint8_t>(k));
    description = describe(each, vocab.names);
  }
  tile.description = description;

  const SampleInput in = prepare_sample(tile, model.config, model.tokenizer);
  NoGradGuard guard;
  const ForwardOutput f = model.forward(in, model.encode_vocabulary(vocab));
  const Labels mask = infer_mask(f.neck.features.tokens, f.text);

  const fs::path out(c.out.empty() ? "." : c.out);
  fs::create_directories(out);
  const std::size_t side = model.config.image_size;
  Palette pal = label_palette(std::min<std::size_t>(vocab.size(), kSyntheticClassNames.size()));
  Rng color_rng = Rng::stream(0, "palette");
  while (pal.size() < vocab.size()) {
    pal.push_back({static_cast<std::uint8_t>(color_rng.below(256)), static_cast<std::uint8_t>(color_rng.below(256)),
                   static_cast<std::uint8_t>(color_rng.below(256))});
  }
  write_palette_png((out / "mask.png").string(), Image8{side, side, 1, mask}, pal);
  std::cout << "mask " << (out / "mask.png").string() << '\n';
  if (similarity) {
    const Tensor sim = score_map(f.neck.features, f.text);
    for (std::size_t k = 0; k < vocab.size(); ++k) {
      Image8 img{side, side, 1, std::vector<std::uint8_t>(side * side)};
      for (std::size_t p = 0; p < side * side; ++p) {
        img.px[p] = static_cast<std::uint8_t>(std::lround((sim[p * vocab.size() + k] + 1.0) * 127.5));
      }
      std::string name = vocab.names[k];
      for (char& ch : name) {
        if (!std::isalnum(static_cast<unsigned char>(ch))) ch = '_';
      }
      char file[64];
      std::snprintf(file, sizeof file, "sim_%02zu_", k);
      write_png((out / (file + name + ".png")).string(), img);
    }
    std::cout << vocab.size() << " similarity maps in " << out.string() << '\n';
  }
  return kOk;
}

int cmd_gradcheck(const Common& c, const std::string& fault) {
  const RunConfig cfg = build_config(c);
  const auto results = run_gradcheck_suite(cfg.seed, 1e-4, fault);
  bool ok = true;
  for (const ModuleCheck& m : results) {
    std::printf("%-16s max_rel_err %.3e  entries %5zu  %s\n", m.module.c_str(), m.report.max_rel_err,
                m.report.entries, m.pass() ? "pass" : "FAIL");
    if (!m.structural_ok) std::printf("%-16s nonzero gradient on a structurally zero parameter\n", "");
    ok = ok && m.pass();
  }
  std::printf("%s\n", ok ? "all modules pass at tol 1e-4" : "gradient check failed");
  return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Optical/SAR open-vocabulary segmentation with text guidance"};
  app.require_subcommand(1);
  Common common;

  auto* gen = app.add_subcommand("generate", "write a synthetic paired-tile dataset");
  add_common(gen, common, false);

  std::string data;
  auto* tr = app.add_subcommand("train", "train a model, writing logs and a checkpoint to --out");
  add_common(tr, common, true);
  tr->add_option("--data", data, "dataset root (default: data_dir from the config)");

  std::string checkpoint, split = "test";
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on a dataset split");
  add_common(ev, common, false);
  ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  ev->add_option("--data", data, "dataset root");
  ev->add_option("--split", split, "train, test or all")->check(CLI::IsMember({"train", "test", "all"}));

  std::string optical, sar, description;
  bool similarity = false;
  auto* inf = app.add_subcommand("infer", "segment one optical/SAR pair with any vocabulary");
  add_common(inf, common, false);
  inf->add_option("--checkpoint", checkpoint, "model checkpoint")->required();
  inf->add_option("--optical", optical, "optical RGB PNG")->required();
  inf->add_option("--sar", sar, "SAR PNG")->required();
  inf->add_option("--description", description, "scene description (default: lists the vocabulary)");
  inf->add_flag("--similarity", similarity, "also write one similarity map per class");

  std::string fault;
  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every module");
  add_common(gc, common, false);
  gc->add_option("--fault", fault, "scale one module's gradient by 1.5 (test fixture)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*gen) return cmd_generate(common);
    if (*tr) return cmd_train(common, data);
    if (*ev) return cmd_eval(common, checkpoint, data, split);
    if (*inf) return cmd_infer(common, checkpoint, optical, sar, description, similarity);
    if (*gc) return cmd_gradcheck(common, fault);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return kData;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kInternal;
  }
  return kInternal;
}
