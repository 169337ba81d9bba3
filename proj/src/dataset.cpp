#include "tsm/dataset.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <thread>

#include "tsm/errors.hpp"
#include "tsm/rng.hpp"

namespace fs = std::filesystem;

namespace tsm {

namespace {

constexpr std::array<std::array<std::uint8_t, 3>, 8> kColors = {{
    {120, 120, 120},  // others
    {40, 70, 160},    // water
    {60, 150, 60},    // vegetation
    {200, 80, 70},    // building
    {190, 190, 170},  // road
    {180, 165, 50},   // farmland
    {140, 100, 60},   // bare soil
    {20, 90, 40},     // forest
}};
constexpr std::array<double, 8> kBackscatter = {100, 20, 150, 235, 55, 125, 190, 75};

std::uint8_t clamp_byte(double v) { return static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)); }

std::string stem_for(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "tile_%04zu", i);
  return buf;
}

std::string read_text(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw DataError("cannot open " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string s = ss.str();
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r')) s.pop_back();
  return s;
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream out(p, std::ios::binary);
  out << s << '\n';
  if (!out) throw DataError("cannot write " + p.string());
}

std::set<std::string> stems_in(const fs::path& dir, const std::string& ext) {
  std::set<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ext) out.insert(e.path().stem().string());
  }
  return out;
}

TilePair load_one(const fs::path& root, const std::string& stem, std::size_t num_classes) {
  TilePair t;
  t.id = stem;
  t.optical = read_png((root / "opt" / (stem + ".png")).string());
  Image8 sar = read_png((root / "sar" / (stem + ".png")).string());
  const Image8 lab = read_png((root / "label" / (stem + ".png")).string());
  t.description = read_text(root / "text" / (stem + ".txt"));

  if (t.optical.ch != 3) throw DataError(stem + ": optical raster must be RGB");
  if (sar.ch == 3) {
    // Keep the first channel of a replicated RGB SAR raster.
    Image8 g{sar.h, sar.w, 1, std::vector<std::uint8_t>(sar.h * sar.w)};
    for (std::size_t i = 0; i < g.px.size(); ++i) g.px[i] = sar.px[i * 3];
    sar = std::move(g);
  }
  if (sar.ch != 1 || lab.ch != 1) throw DataError(stem + ": SAR and label rasters must have one channel");
  if (sar.h != t.optical.h || sar.w != t.optical.w || lab.h != t.optical.h || lab.w != t.optical.w) {
    throw DataError(stem + ": rasters not co-registered (optical " + std::to_string(t.optical.h) + "x" +
                    std::to_string(t.optical.w) + ", sar " + std::to_string(sar.h) + "x" + std::to_string(sar.w) +
                    ", label " + std::to_string(lab.h) + "x" + std::to_string(lab.w) + ")");
  }
  t.sar = std::move(sar);
  t.labels = lab.px;
  if (num_classes > 0) {
    for (std::uint8_t v : t.labels) {
      if (v != kIgnore && v >= num_classes) {
        throw DataError(stem + ": label id " + std::to_string(v) + " >= " + std::to_string(num_classes) + " classes");
      }
    }
  }
  if (t.description.empty()) throw DataError(stem + ": empty description");
  return t;
}

}  // namespace

std::vector<std::string> DatasetManifest::stems(const std::string& split_name) const {
  std::vector<std::string> out;
  for (const auto& e : entries) {
    if (e.split == split_name) out.push_back(e.stem);
  }
  return out;
}

const TilePair& Dataset::tile(const std::string& stem) const {
  for (const TilePair& t : tiles) {
    if (t.id == stem) return t;
  }
  throw DataError("no tile named " + stem);
}

std::vector<const TilePair*> Dataset::split(const std::string& name) const {
  std::vector<const TilePair*> out;
  for (const std::string& s : manifest.stems(name)) out.push_back(&tile(s));
  return out;
}

void SyntheticConfig::validate() const {
  if (num_classes < 2 || num_classes > kSyntheticClassNames.size()) {
    throw ConfigError("synthetic num_classes must be in [2, 8], got " + std::to_string(num_classes));
  }
  if (size < 4) throw ConfigError("synthetic tile size must be at least 4");
  if (n_tiles == 0) throw ConfigError("synthetic n_tiles must be positive");
  if (n_train >= n_tiles) {
    throw ConfigError("n_train " + std::to_string(n_train) + " must be below n_tiles " + std::to_string(n_tiles));
  }
  if (!(optical_noise >= 0.0) || !(sar_noise >= 0.0)) throw ConfigError("noise levels must be non-negative");
  if (min_regions > max_regions) throw ConfigError("min_regions exceeds max_regions");
}

bool Region::contains(std::size_t row, std::size_t col) const {
  const double dx = (static_cast<double>(col) + 0.5 - cx) / rx;
  const double dy = (static_cast<double>(row) + 0.5 - cy) / ry;
  return ellipse ? dx * dx + dy * dy <= 1.0 : std::abs(dx) <= 1.0 && std::abs(dy) <= 1.0;
}

std::array<std::uint8_t, 3> class_color(std::size_t cls) { return kColors.at(cls); }
double class_backscatter(std::size_t cls) { return kBackscatter.at(cls); }

Palette label_palette(std::size_t num_classes) {
  Palette p;
  for (std::size_t c = 0; c < num_classes && c < kColors.size(); ++c) p.push_back(kColors[c]);
  return p;
}

std::string describe(const Labels& labels, const std::vector<std::string>& class_names) {
  std::vector<std::size_t> count(class_names.size(), 0);
  for (std::uint8_t v : labels) {
    if (v != kIgnore && v < count.size()) ++count[v];
  }
  std::vector<std::size_t> order;
  for (std::size_t c = 0; c < count.size(); ++c) {
    if (count[c] > 0) order.push_back(c);
  }
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return count[a] > count[b]; });
  if (order.empty()) throw DataError("describe: no labeled pixels");
  std::string s = "a scene containing ";
  for (std::size_t i = 0; i < order.size(); ++i) {
    if (i > 0) s += i + 1 == order.size() ? " and " : ", ";
    s += class_names[order[i]];
  }
  return s;
}

GeneratedTile generate_tile(const SyntheticConfig& cfg, std::size_t index) {
  cfg.validate();
  Rng rng = Rng::stream(cfg.seed, "tiles/" + std::to_string(index));
  const std::size_t n = cfg.size;
  const double side = static_cast<double>(n);
  GeneratedTile g;
  g.tile.id = stem_for(index);
  g.tile.labels.assign(n * n, 0);

  const std::size_t count = cfg.min_regions + rng.below(cfg.max_regions - cfg.min_regions + 1);
  for (std::size_t r = 0; r < count; ++r) {
    Region reg;
    reg.cls = static_cast<std::uint8_t>(1 + rng.below(cfg.num_classes - 1));
    reg.ellipse = rng.uniform() < 0.5;
    reg.cx = rng.uniform(0.0, side);
    reg.cy = rng.uniform(0.0, side);
    reg.rx = rng.uniform(0.12 * side, 0.35 * side);
    reg.ry = rng.uniform(0.12 * side, 0.35 * side);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        if (reg.contains(i, j)) g.tile.labels[i * n + j] = reg.cls;
      }
    }
    g.regions.push_back(reg);
  }

  g.tile.optical = Image8{n, n, 3, std::vector<std::uint8_t>(n * n * 3)};
  g.tile.sar = Image8{n, n, 1, std::vector<std::uint8_t>(n * n)};
  const double shape = cfg.sar_noise > 0.0 ? 1.0 / (cfg.sar_noise * cfg.sar_noise) : 0.0;
  for (std::size_t p = 0; p < n * n; ++p) {
    const std::size_t c = g.tile.labels[p];
    const auto base = kColors[c];
    for (std::size_t k = 0; k < 3; ++k) {
      const double noise = cfg.optical_noise > 0.0 ? cfg.optical_noise * rng.normal() : 0.0;
      g.tile.optical.px[p * 3 + k] = clamp_byte(base[k] + noise);
    }
    const double speckle = shape > 0.0 ? rng.gamma(shape) / shape : 1.0;
    g.tile.sar.px[p] = clamp_byte(kBackscatter[c] * speckle);
  }
  const std::vector<std::string> names(kSyntheticClassNames.begin(),
                                       kSyntheticClassNames.begin() + static_cast<std::ptrdiff_t>(cfg.num_classes));
  g.tile.description = describe(g.tile.labels, names);
  return g;
}

Dataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  Dataset ds;
  ds.manifest.seed = cfg.seed;
  ds.manifest.class_names.assign(kSyntheticClassNames.begin(),
                                 kSyntheticClassNames.begin() + static_cast<std::ptrdiff_t>(cfg.num_classes));
  for (std::size_t i = 0; i < cfg.n_tiles; ++i) {
    ds.tiles.push_back(generate_tile(cfg, i).tile);
    ds.manifest.entries.push_back({ds.tiles.back().id, ""});
  }
  ds.manifest = split(ds.manifest, cfg.n_train, cfg.seed);
  return ds;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path, std::ios::binary);
  out << "# seed\t" << m.seed << '\n';
  out << "# classes";
  for (const std::string& c : m.class_names) out << '\t' << c;
  out << '\n';
  for (const ManifestEntry& e : m.entries) out << e.stem << '\t' << e.split << '\n';
  if (!out) throw DataError("cannot write manifest " + path);
}

DatasetManifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open manifest " + path);
  DatasetManifest m;
  std::string line;
  std::set<std::string> seen;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (;;) {
      const std::size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (line.front() == '#') {
      if (fields[0] == "# seed" && fields.size() == 2) {
        try {
          m.seed = std::stoull(fields[1]);
        } catch (const std::exception&) {
          throw DataError(path + ":" + std::to_string(lineno) + ": bad seed '" + fields[1] + "'");
        }
      } else if (fields[0] == "# classes") {
        m.class_names.assign(fields.begin() + 1, fields.end());
      }
      continue;
    }
    if (fields.size() != 2 || fields[0].empty()) {
      throw DataError(path + ":" + std::to_string(lineno) + ": expected 'stem<TAB>split'");
    }
    if (!seen.insert(fields[0]).second) throw DataError(path + ": duplicate stem " + fields[0]);
    m.entries.push_back({fields[0], fields[1]});
  }
  return m;
}

void write_dataset(const Dataset& ds, const std::string& root) {
  const fs::path r(root);
  for (const char* sub : {"opt", "sar", "label", "text"}) fs::create_directories(r / sub);
  const Palette pal = label_palette(std::max<std::size_t>(ds.manifest.class_names.size(), 1));
  for (const TilePair& t : ds.tiles) {
    write_png((r / "opt" / (t.id + ".png")).string(), t.optical);
    write_png((r / "sar" / (t.id + ".png")).string(), t.sar);
    write_palette_png((r / "label" / (t.id + ".png")).string(), Image8{t.h(), t.w(), 1, t.labels}, pal);
    write_text(r / "text" / (t.id + ".txt"), t.description);
  }
  write_manifest((r / "manifest.txt").string(), ds.manifest);
}

LoadResult load_tiles(const std::string& root, std::size_t threads) {
  const fs::path r(root);
  if (!fs::is_directory(r)) throw DataError("dataset root " + root + " is not a directory");
  LoadResult res;
  const std::set<std::string> opt = stems_in(r / "opt", ".png");
  const std::set<std::string> sar = stems_in(r / "sar", ".png");
  const std::set<std::string> lab = stems_in(r / "label", ".png");
  const std::set<std::string> txt = stems_in(r / "text", ".txt");

  DatasetManifest m;
  const fs::path mpath = r / "manifest.txt";
  if (fs::exists(mpath)) {
    m = read_manifest(mpath.string());
  } else {
    std::set<std::string> all;
    for (const auto* s : {&opt, &sar, &lab, &txt}) all.insert(s->begin(), s->end());
    for (const std::string& s : all) m.entries.push_back({s, "test"});
  }

  std::vector<ManifestEntry> complete;
  for (const ManifestEntry& e : m.entries) {
    std::string missing;
    if (!opt.count(e.stem)) missing += " opt";
    if (!sar.count(e.stem)) missing += " sar";
    if (!lab.count(e.stem)) missing += " label";
    if (!txt.count(e.stem)) missing += " text";
    if (missing.empty()) {
      complete.push_back(e);
    } else {
      res.warnings.push_back(e.stem + ": skipped, missing" + missing);
    }
  }
  if (complete.empty()) throw DataError("no complete tile stems under " + root);

  std::vector<std::optional<TilePair>> loaded(complete.size());
  std::vector<std::string> errors(complete.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < complete.size(); i = next++) {
      try {
        loaded[i] = load_one(r, complete[i].stem, m.class_names.size());
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, complete.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
  worker();
  for (std::thread& t : pool) t.join();

  res.dataset.manifest.seed = m.seed;
  res.dataset.manifest.class_names = m.class_names;
  for (std::size_t i = 0; i < complete.size(); ++i) {
    if (loaded[i]) {
      res.dataset.manifest.entries.push_back(complete[i]);
      res.dataset.tiles.push_back(std::move(*loaded[i]));
    } else {
      res.warnings.push_back(complete[i].stem + ": rejected, " + errors[i]);
    }
  }
  if (res.dataset.tiles.empty()) throw DataError("every tile under " + root + " was rejected");
  return res;
}

DatasetManifest split(const DatasetManifest& m, std::size_t n_train, std::uint64_t seed) {
  const std::size_t total = m.entries.size();
  if (n_train >= total) {
    throw ConfigError("n_train " + std::to_string(n_train) + " must be below the " + std::to_string(total) +
                      " available tiles");
  }
  std::vector<std::size_t> order(total);
  for (std::size_t i = 0; i < total; ++i) order[i] = i;
  Rng rng = Rng::stream(seed, "split");
  for (std::size_t i = total; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  std::vector<bool> train(total, false);
  for (std::size_t i = 0; i < n_train; ++i) train[order[i]] = true;
  DatasetManifest out = m;
  for (std::size_t i = 0; i < total; ++i) out.entries[i].split = train[i] ? "train" : "test";
  return out;
}

}  // namespace tsm
