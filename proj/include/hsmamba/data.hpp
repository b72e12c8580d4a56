#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "hsmamba/rng.hpp"
#include "hsmamba/tensor.hpp"

namespace hsmamba {

// Hyperspectral raster, band-major [C,H,W].
struct Cube {
  NdArray values;

  std::size_t bands() const { return values.extent(0); }
  std::size_t height() const { return values.extent(1); }
  std::size_t width() const { return values.extent(2); }
};

// Per-pixel class indices, 0 = unlabeled, 1..K = classes.
struct LabelMap {
  std::size_t height = 0, width = 0;
  std::vector<std::uint16_t> labels;  // row-major H*W

  std::uint16_t at(std::size_t y, std::size_t x) const { return labels[y * width + x]; }
  std::size_t num_classes() const;  // max label
};

// Disjoint boolean masks over the raster; union is a subset of labeled pixels.
struct SplitMask {
  std::size_t height = 0, width = 0;
  std::vector<std::uint8_t> train, val, test;

  std::size_t count_train() const;
  std::size_t count_val() const;
  std::size_t count_test() const;
};

// --- HSIC / HSIL container formats -------------------------------------------
// cube:   magic "HSIC", version u16 LE, C,H,W u32 LE, C*H*W float32 LE band-major
// labels: magic "HSIL", version u16 LE, H,W u32 LE, H*W u16 LE

void write_cube(const Cube& cube, const std::string& path);
Cube read_cube(const std::string& path);
void write_labels(const LabelMap& labels, const std::string& path);
LabelMap read_labels(const std::string& path);

// --- splitting -----------------------------------------------------------------

// per-class (train_n, val_n) replacing the defaults
using SplitOverrides = std::map<int, std::pair<int, int>>;

// line-oriented fixture: `class_index train_n val_n`, '#' comments
SplitOverrides load_split_overrides(const std::string& path);

// Per class: min(train_n, available-2) training pixels, then
// min(val_n, remaining-1) validation pixels, sampled without replacement from
// the seeded stream; the rest is test. Classes with fewer than 3 labeled
// pixels are an error.
SplitMask stratified_split(const LabelMap& labels, int train_n, int val_n,
                           const SplitOverrides& overrides, std::uint64_t seed);

// --- synthetic scenes -------------------------------------------------------------

// Voronoi-partitioned label regions; each class gets a smooth two-bump
// spectral signature plus i.i.d. noise. Values are rounded through float32 so
// cube files round-trip bit-exactly.
struct SynthScene {
  Cube cube;
  LabelMap labels;
  NdArray signatures;  // [K,C] planted class spectra (noise-free)
};

SynthScene synth_scene(std::size_t height, std::size_t width, std::size_t bands,
                       std::size_t num_classes, double noise_sigma, std::uint64_t seed);

// per-band min-max to [0,1]; constant bands map to 0; idempotent
Cube normalize(const Cube& cube);

enum class NormalizeMode { MinMax, ZScore, None };
NormalizeMode normalize_mode_from_string(const std::string& s);
std::string to_string(NormalizeMode m);

// min-max (default), per-band standardization, or pass-through
Cube normalize(const Cube& cube, NormalizeMode mode);

}  // namespace hsmamba
