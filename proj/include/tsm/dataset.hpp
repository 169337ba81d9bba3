#pragma once

// Paired optical/SAR tiles with label rasters and descriptions: synthetic
// generation, the on-disk layout root/{opt,sar,label,text}/<stem>, the
// manifest and the seeded train/test split.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "tsm/losses.hpp"
#include "tsm/png_io.hpp"

namespace tsm {

struct TilePair {
  std::string id;
  Image8 optical;  // h x w x 3
  Image8 sar;      // h x w x 1
  Labels labels;   // h * w, kIgnore for unlabeled
  std::string description;

  std::size_t h() const { return optical.h; }
  std::size_t w() const { return optical.w; }
  bool operator==(const TilePair&) const = default;
};

struct ManifestEntry {
  std::string stem;
  std::string split;  // "train" or "test"
  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::uint64_t seed = 0;
  std::vector<std::string> class_names;
  std::vector<ManifestEntry> entries;

  std::vector<std::string> stems(const std::string& split) const;
  bool operator==(const DatasetManifest&) const = default;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<TilePair> tiles;  // manifest order

  const TilePair& tile(const std::string& stem) const;
  std::vector<const TilePair*> split(const std::string& name) const;
};

inline const std::vector<std::string> kSyntheticClassNames = {"others",   "water",     "vegetation", "building",
                                                              "road",     "farmland",  "bare soil",  "forest"};

struct SyntheticConfig {
  std::size_t size = 32;
  std::size_t num_classes = 5;
  std::size_t n_tiles = 16;
  std::size_t n_train = 8;
  std::uint64_t seed = 42;
  double optical_noise = 12.0;  // Gaussian std, 8-bit units
  double sar_noise = 0.3;       // speckle coefficient of variation; gamma shape 1/cv^2
  std::size_t min_regions = 3;
  std::size_t max_regions = 6;

  void validate() const;  // ConfigError
};

// Region painted by the generator, kept for bookkeeping checks.
struct Region {
  std::uint8_t cls = 0;
  bool ellipse = false;
  double cx = 0, cy = 0, rx = 0, ry = 0;  // centre and half extents in pixels

  bool contains(std::size_t row, std::size_t col) const;
};

struct GeneratedTile {
  TilePair tile;
  std::vector<Region> regions;  // paint order, over class 0
};

// Per-class base colours and SAR backscatter levels (index = class).
std::array<std::uint8_t, 3> class_color(std::size_t cls);
double class_backscatter(std::size_t cls);
Palette label_palette(std::size_t num_classes);

// "a scene containing c1, c2 and c3", classes by decreasing area (ties by
// index), ignored pixels skipped.
std::string describe(const Labels& labels, const std::vector<std::string>& class_names);

GeneratedTile generate_tile(const SyntheticConfig& cfg, std::size_t index);
Dataset generate_synthetic(const SyntheticConfig& cfg);

void write_dataset(const Dataset& ds, const std::string& root);

struct LoadResult {
  Dataset dataset;
  std::vector<std::string> warnings;  // skipped or rejected stems
};

// Reads root/manifest.txt when present (order, splits, classes); otherwise
// every complete stem in sorted order, split "test", no class names.
// Loads up to `threads` tiles concurrently; order never depends on timing.
LoadResult load_tiles(const std::string& root, std::size_t threads = 1);

DatasetManifest read_manifest(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& m);

// Seeded Fisher-Yates shuffle of the entries, first n_train become "train".
DatasetManifest split(const DatasetManifest& m, std::size_t n_train, std::uint64_t seed);

}  // namespace tsm
