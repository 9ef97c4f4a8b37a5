#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "cdt/io.hpp"
#include "cdt/tensor.hpp"

namespace cdt {

inline constexpr int kCanvas = 16;
inline constexpr int kNumClasses = 10;

// Ten binary class glyphs on the 16x16 canvas: a 5x7 digit font scaled 2x
// to 10x14 and centered.  Per-sample augmentation is integer jitter in
// [-2,2]^2 (clipped at the borders) plus 0.02 pixel-flip noise.
struct GlyphBank {
  std::array<std::array<uint8_t, kCanvas * kCanvas>, kNumClasses> bitmaps;

  static const GlyphBank& standard();
  int foreground_count(int cls) const;
};

struct Dataset {
  Tensor images;            // [N,3,16,16], values in [0,1]
  std::vector<int> labels;  // class indices in [0,10)
  std::string split;
  Json descriptor;          // generation recipe echo (kind, seed, bias, ...)

  int size() const { return static_cast<int>(labels.size()); }
};

// Per-class split sizes; defaults give 5000/500/2000 total.
struct SampleCounts {
  int train = 500;
  int val = 50;
  int test = 200;
};

// Fully saturated hue wheel: palette[c] = hsv(c/10, 1, 1).
std::array<std::array<double, 3>, kNumClasses> class_palette();

// Color-biased digits: a bias_fraction share of each class-c image gets
// foreground palette[c]; the rest draw uniformly from the other nine
// palette entries.  Returns train, val and the four shifted test splits
// (inverted / random / pixel-hard / texture foregrounds).
std::map<std::string, Dataset> gen_color_biased(uint64_t seed, const SampleCounts& n,
                                                double bias_fraction);

// Grayscale digits with a class-indicative 3x3 corner patch (intensity
// 0.2 + 0.06c at corner c mod 4) in train/val; the test split draws patch
// corner and intensity independently of the class.
std::map<std::string, Dataset> gen_decoy(uint64_t seed, const SampleCounts& n);

// Digits whose foreground carries a class-indicative stripe texture
// (angle c*18 degrees, period 3); test foregrounds draw from a disjoint
// pool of checkerboards, dots and off-period stripes.
std::map<std::string, Dataset> gen_texture_biased(uint64_t seed, const SampleCounts& n);

// Concept imagery at dataset geometry.  Positive kinds: "color" (solid
// saturated rectangles), "gray" (solid gray rectangles), "texture"
// (textured rectangles).  "blobs-negative" (binary white random-walk
// blobs) doubles as the default negative side.
struct ConceptSet {
  std::string name;
  Tensor positives;  // [M,3,16,16]
  Tensor negatives;  // [M,3,16,16]
};

ConceptSet gen_concept_set(const std::string& kind, int m, uint64_t seed);

// "CDDS1" container: magic, JSON header, float64 image payload, one label
// byte per sample.
void save_dataset(const Dataset& data, const std::filesystem::path& path);
Dataset load_dataset(const std::filesystem::path& path);

}  // namespace cdt
