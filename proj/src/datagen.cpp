#include "cdt/datagen.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>

namespace cdt {

namespace {

// 5x7 digit font, one hex byte per row, bit 4 = leftmost column.
constexpr uint8_t kFont[kNumClasses][7] = {
    {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E},  // 0
    {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},  // 1
    {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F},  // 2
    {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},  // 3
    {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02},  // 4
    {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},  // 5
    {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E},  // 6
    {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},  // 7
    {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E},  // 8
    {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C},  // 9
};

constexpr int kGlyphW = 10, kGlyphH = 14;    // font scaled 2x
constexpr int kBaseCol = 3, kBaseRow = 1;    // centered on the canvas

using Mask = std::array<uint8_t, kCanvas * kCanvas>;

// Jittered, noised glyph mask for one sample.
Mask sample_mask(const GlyphBank& bank, int cls, Rng& rng) {
  std::uniform_int_distribution<int> jitter(-2, 2);
  const int dy = jitter(rng), dx = jitter(rng);
  Mask m{};
  const auto& glyph = bank.bitmaps[cls];
  for (int y = 0; y < kCanvas; ++y) {
    const int sy = y - dy;
    if (sy < 0 || sy >= kCanvas) continue;
    for (int x = 0; x < kCanvas; ++x) {
      const int sx = x - dx;
      if (sx < 0 || sx >= kCanvas) continue;
      m[y * kCanvas + x] = glyph[sy * kCanvas + sx];
    }
  }
  std::bernoulli_distribution flip(0.02);
  for (auto& px : m) {
    if (flip(rng)) px ^= 1;
  }
  return m;
}

std::array<double, 3> hsv_to_rgb(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r = 0, g = 0, b = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r = c; g = x; break;
    case 1: r = x; g = c; break;
    case 2: g = c; b = x; break;
    case 3: g = x; b = c; break;
    case 4: r = x; b = c; break;
    default: r = c; b = x; break;
  }
  const double m = v - c;
  return {r + m, g + m, b + m};
}

double positive_mod(double a, double p) {
  double r = std::fmod(a, p);
  return r < 0 ? r + p : r;
}

bool stripe_on(int y, int x, double theta, double period) {
  const double t = y * std::cos(theta) - x * std::sin(theta);
  return positive_mod(t, period) < period / 2.0;
}

bool checker_on(int y, int x, int cell) { return ((y / cell) + (x / cell)) % 2 == 0; }

bool dots_on(int y, int x, int spacing) {
  return (y % spacing <= 1) && (x % spacing <= 1);
}

struct TexturePattern {
  enum Kind { Stripes, Checker, Dots } kind;
  double theta = 0.0;
  double period = 3.0;
  int cell = 2;

  bool on(int y, int x) const {
    switch (kind) {
      case Stripes: return stripe_on(y, x, theta, period);
      case Checker: return checker_on(y, x, cell);
      default: return dots_on(y, x, cell);
    }
  }
};

TexturePattern class_texture(int cls) {
  return {TexturePattern::Stripes, cls * 18.0 * std::numbers::pi / 180.0, 3.0, 0};
}

// Held-out texture pool: stripe periods {2,4} at random angles plus
// checkerboards and dot grids — disjoint from every class stripe.
TexturePattern test_pool_texture(Rng& rng) {
  std::uniform_int_distribution<int> pick(0, 5);
  std::uniform_real_distribution<double> angle(0.0, std::numbers::pi);
  switch (pick(rng)) {
    case 0: return {TexturePattern::Stripes, angle(rng), 2.0, 0};
    case 1: return {TexturePattern::Stripes, angle(rng), 4.0, 0};
    case 2: return {TexturePattern::Checker, 0, 0, 2};
    case 3: return {TexturePattern::Checker, 0, 0, 3};
    case 4: return {TexturePattern::Dots, 0, 0, 3};
    default: return {TexturePattern::Dots, 0, 0, 4};
  }
}

constexpr double kTextureBright[3] = {1.0, 0.85, 0.3};
constexpr double kTextureGround = 0.12;

class ImageBuffer {
 public:
  ImageBuffer(int count) : data_(Eigen::ArrayXd::Zero(static_cast<int64_t>(count) * 3 * kCanvas * kCanvas)) {}

  double* image(int i) { return data_.data() + static_cast<int64_t>(i) * 3 * kCanvas * kCanvas; }

  Tensor take(int count) {
    return Tensor::make({count, 3, kCanvas, kCanvas}, std::move(data_));
  }

 private:
  Eigen::ArrayXd data_;
};

void paint_mask(double* img, const Mask& m, const double rgb[3]) {
  for (int c = 0; c < 3; ++c) {
    for (int p = 0; p < kCanvas * kCanvas; ++p) {
      if (m[p]) img[c * kCanvas * kCanvas + p] = rgb[c];
    }
  }
}

void paint_mask_textured(double* img, const Mask& m, const TexturePattern& tex) {
  for (int y = 0; y < kCanvas; ++y) {
    for (int x = 0; x < kCanvas; ++x) {
      const int p = y * kCanvas + x;
      if (!m[p]) continue;
      const bool on = tex.on(y, x);
      for (int c = 0; c < 3; ++c) {
        img[c * kCanvas * kCanvas + p] = on ? kTextureBright[c] : kTextureGround;
      }
    }
  }
}

void paint_patch(double* img, int corner, double intensity) {
  const int y0 = (corner == 0 || corner == 1) ? 0 : kCanvas - 3;
  const int x0 = (corner == 0 || corner == 2) ? 0 : kCanvas - 3;
  for (int y = y0; y < y0 + 3; ++y) {
    for (int x = x0; x < x0 + 3; ++x) {
      for (int c = 0; c < 3; ++c) {
        img[c * kCanvas * kCanvas + y * kCanvas + x] = intensity;
      }
    }
  }
}

enum class ColorRule { Biased, Inverted, RandomPalette, PixelHard, Texture };

Dataset make_color_split(const std::string& split, uint64_t split_seed, int per_class,
                         double bias_fraction, ColorRule rule) {
  const auto& bank = GlyphBank::standard();
  const auto palette = class_palette();
  Rng rng(split_seed);
  ImageBuffer buf(per_class * kNumClasses);
  std::vector<int> labels;
  labels.reserve(static_cast<size_t>(per_class) * kNumClasses);
  std::uniform_int_distribution<int> other_color(0, kNumClasses - 2);
  std::uniform_int_distribution<int> any_color(0, kNumClasses - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const int biased_per_class = static_cast<int>(std::lround(bias_fraction * per_class));
  int idx = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int i = 0; i < per_class; ++i, ++idx) {
      Mask m = sample_mask(bank, cls, rng);
      double* img = buf.image(idx);
      switch (rule) {
        case ColorRule::Biased: {
          int color = cls;
          if (i >= biased_per_class) {
            // Unbiased draws never land on the class's own hue, so the
            // realized class-consistent fraction equals biased/per_class.
            const int pick = other_color(rng);
            color = pick >= cls ? pick + 1 : pick;
          }
          paint_mask(img, m, palette[color].data());
          break;
        }
        case ColorRule::Inverted: {
          const double inv[3] = {1.0 - palette[cls][0], 1.0 - palette[cls][1],
                                 1.0 - palette[cls][2]};
          paint_mask(img, m, inv);
          break;
        }
        case ColorRule::RandomPalette:
          paint_mask(img, m, palette[any_color(rng)].data());
          break;
        case ColorRule::PixelHard: {
          for (int p = 0; p < kCanvas * kCanvas; ++p) {
            if (!m[p]) continue;
            for (int c = 0; c < 3; ++c) {
              img[c * kCanvas * kCanvas + p] = unit(rng);
            }
          }
          break;
        }
        case ColorRule::Texture:
          paint_mask_textured(img, m, test_pool_texture(rng));
          break;
      }
      labels.push_back(cls);
    }
  }
  Dataset out;
  out.images = buf.take(idx);
  out.labels = std::move(labels);
  out.split = split;
  return out;
}

Dataset make_decoy_split(const std::string& split, uint64_t split_seed, int per_class,
                         bool class_indicative) {
  const auto& bank = GlyphBank::standard();
  Rng rng(split_seed);
  ImageBuffer buf(per_class * kNumClasses);
  std::vector<int> labels;
  std::uniform_int_distribution<int> any_corner(0, 3);
  std::uniform_int_distribution<int> any_class(0, kNumClasses - 1);
  constexpr double kWhite[3] = {1.0, 1.0, 1.0};
  int idx = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int i = 0; i < per_class; ++i, ++idx) {
      Mask m = sample_mask(bank, cls, rng);
      double* img = buf.image(idx);
      paint_mask(img, m, kWhite);
      if (class_indicative) {
        paint_patch(img, cls % 4, 0.2 + 0.06 * cls);
      } else {
        paint_patch(img, any_corner(rng), 0.2 + 0.06 * any_class(rng));
      }
      labels.push_back(cls);
    }
  }
  Dataset out;
  out.images = buf.take(idx);
  out.labels = std::move(labels);
  out.split = split;
  return out;
}

Dataset make_texture_split(const std::string& split, uint64_t split_seed, int per_class,
                           bool class_indicative) {
  const auto& bank = GlyphBank::standard();
  Rng rng(split_seed);
  ImageBuffer buf(per_class * kNumClasses);
  std::vector<int> labels;
  int idx = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int i = 0; i < per_class; ++i, ++idx) {
      Mask m = sample_mask(bank, cls, rng);
      const TexturePattern tex =
          class_indicative ? class_texture(cls) : test_pool_texture(rng);
      paint_mask_textured(buf.image(idx), m, tex);
      labels.push_back(cls);
    }
  }
  Dataset out;
  out.images = buf.take(idx);
  out.labels = std::move(labels);
  out.split = split;
  return out;
}

void draw_rect(Rng& rng, int& y0, int& x0, int& h, int& w) {
  std::uniform_int_distribution<int> extent(6, kCanvas);
  h = extent(rng);
  w = extent(rng);
  std::uniform_int_distribution<int> oy(0, kCanvas - h), ox(0, kCanvas - w);
  y0 = oy(rng);
  x0 = ox(rng);
}

void fill_rect(double* img, int y0, int x0, int h, int w, const double rgb[3]) {
  for (int y = y0; y < y0 + h; ++y) {
    for (int x = x0; x < x0 + w; ++x) {
      for (int c = 0; c < 3; ++c) {
        img[c * kCanvas * kCanvas + y * kCanvas + x] = rgb[c];
      }
    }
  }
}

Tensor gen_blobs(int m, Rng& rng) {
  ImageBuffer buf(m);
  std::uniform_int_distribution<int> start(0, kCanvas - 1);
  std::uniform_int_distribution<int> step(0, 3);
  std::uniform_int_distribution<int> walks(2, 3);
  for (int i = 0; i < m; ++i) {
    double* img = buf.image(i);
    const int n_walks = walks(rng);
    for (int wlk = 0; wlk < n_walks; ++wlk) {
      int y = start(rng), x = start(rng);
      for (int t = 0; t < 40; ++t) {
        for (int c = 0; c < 3; ++c) {
          img[c * kCanvas * kCanvas + y * kCanvas + x] = 1.0;
        }
        switch (step(rng)) {
          case 0: y = std::min(y + 1, kCanvas - 1); break;
          case 1: y = std::max(y - 1, 0); break;
          case 2: x = std::min(x + 1, kCanvas - 1); break;
          default: x = std::max(x - 1, 0); break;
        }
      }
    }
  }
  return buf.take(m);
}

Tensor gen_positive_patches(const std::string& kind, int m, Rng& rng) {
  ImageBuffer buf(m);
  std::uniform_real_distribution<double> hue(0.0, 1.0);
  std::uniform_real_distribution<double> sat(0.4, 1.0);
  std::uniform_real_distribution<double> val(0.6, 1.0);
  std::uniform_real_distribution<double> gray(0.2, 0.9);
  for (int i = 0; i < m; ++i) {
    int y0, x0, h, w;
    draw_rect(rng, y0, x0, h, w);
    double* img = buf.image(i);
    if (kind == "color") {
      // s >= 0.4 keeps every positive chromatic (no R=G=B patch).
      const auto rgb = hsv_to_rgb(hue(rng), sat(rng), val(rng));
      fill_rect(img, y0, x0, h, w, rgb.data());
    } else if (kind == "gray") {
      const double g = gray(rng);
      const double rgb[3] = {g, g, g};
      fill_rect(img, y0, x0, h, w, rgb);
    } else {  // texture
      const TexturePattern tex = test_pool_texture(rng);
      const auto rgb = hsv_to_rgb(hue(rng), sat(rng), val(rng));
      for (int y = y0; y < y0 + h; ++y) {
        for (int x = x0; x < x0 + w; ++x) {
          const bool on = tex.on(y, x);
          for (int c = 0; c < 3; ++c) {
            img[c * kCanvas * kCanvas + y * kCanvas + x] =
                on ? rgb[c] : kTextureGround;
          }
        }
      }
    }
  }
  return buf.take(m);
}

}  // namespace

const GlyphBank& GlyphBank::standard() {
  static const GlyphBank bank = [] {
    GlyphBank b;
    for (int cls = 0; cls < kNumClasses; ++cls) {
      b.bitmaps[cls].fill(0);
      for (int r = 0; r < 7; ++r) {
        for (int col = 0; col < 5; ++col) {
          if (!((kFont[cls][r] >> (4 - col)) & 1)) continue;
          for (int dy = 0; dy < 2; ++dy) {
            for (int dx = 0; dx < 2; ++dx) {
              const int y = kBaseRow + 2 * r + dy;
              const int x = kBaseCol + 2 * col + dx;
              b.bitmaps[cls][y * kCanvas + x] = 1;
            }
          }
        }
      }
    }
    return b;
  }();
  return bank;
}

int GlyphBank::foreground_count(int cls) const {
  int n = 0;
  for (uint8_t px : bitmaps[cls]) n += px;
  return n;
}

std::array<std::array<double, 3>, kNumClasses> class_palette() {
  std::array<std::array<double, 3>, kNumClasses> p;
  for (int c = 0; c < kNumClasses; ++c) {
    p[c] = hsv_to_rgb(c / static_cast<double>(kNumClasses), 1.0, 1.0);
  }
  return p;
}

std::map<std::string, Dataset> gen_color_biased(uint64_t seed, const SampleCounts& n,
                                                double bias_fraction) {
  if (bias_fraction < 0.0 || bias_fraction > 1.0) {
    throw ConfigError("gen_color_biased: bias_fraction " +
                      format_fixed(bias_fraction) + " outside [0,1]");
  }
  Json desc = {{"kind", "color"}, {"seed", seed}, {"bias_fraction", bias_fraction}};
  std::map<std::string, Dataset> out;
  out["train"] = make_color_split("train", mix_seed(seed, 0), n.train, bias_fraction,
                                  ColorRule::Biased);
  out["val"] = make_color_split("val", mix_seed(seed, 1), n.val, bias_fraction,
                                ColorRule::Biased);
  out["test_inverted"] = make_color_split("test_inverted", mix_seed(seed, 2), n.test,
                                          0.0, ColorRule::Inverted);
  out["test_random"] = make_color_split("test_random", mix_seed(seed, 3), n.test, 0.0,
                                        ColorRule::RandomPalette);
  out["test_pixel_hard"] = make_color_split("test_pixel_hard", mix_seed(seed, 4),
                                            n.test, 0.0, ColorRule::PixelHard);
  out["test_texture"] = make_color_split("test_texture", mix_seed(seed, 5), n.test,
                                         0.0, ColorRule::Texture);
  for (auto& [name, data] : out) data.descriptor = desc;
  return out;
}

std::map<std::string, Dataset> gen_decoy(uint64_t seed, const SampleCounts& n) {
  Json desc = {{"kind", "decoy"}, {"seed", seed}};
  std::map<std::string, Dataset> out;
  out["train"] = make_decoy_split("train", mix_seed(seed, 0), n.train, true);
  out["val"] = make_decoy_split("val", mix_seed(seed, 1), n.val, true);
  out["test"] = make_decoy_split("test", mix_seed(seed, 2), n.test, false);
  for (auto& [name, data] : out) data.descriptor = desc;
  return out;
}

std::map<std::string, Dataset> gen_texture_biased(uint64_t seed, const SampleCounts& n) {
  Json desc = {{"kind", "texture"}, {"seed", seed}};
  std::map<std::string, Dataset> out;
  out["train"] = make_texture_split("train", mix_seed(seed, 0), n.train, true);
  out["val"] = make_texture_split("val", mix_seed(seed, 1), n.val, true);
  out["test"] = make_texture_split("test", mix_seed(seed, 2), n.test, false);
  for (auto& [name, data] : out) data.descriptor = desc;
  return out;
}

ConceptSet gen_concept_set(const std::string& kind, int m, uint64_t seed) {
  if (m < 10) {
    throw ConfigError("gen_concept_set: m = " + std::to_string(m) + " below minimum 10");
  }
  if (kind != "color" && kind != "gray" && kind != "texture" &&
      kind != "blobs-negative") {
    throw ConfigError("gen_concept_set: unknown kind \"" + kind + "\"");
  }
  ConceptSet set;
  set.name = kind;
  Rng pos_rng(mix_seed(seed, 10));
  Rng neg_rng(mix_seed(seed, 11));
  if (kind == "blobs-negative") {
    set.positives = gen_blobs(m, pos_rng);
  } else {
    set.positives = gen_positive_patches(kind, m, pos_rng);
  }
  set.negatives = gen_blobs(m, neg_rng);
  return set;
}

void save_dataset(const Dataset& data, const std::filesystem::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  Json header = {{"count", data.size()},
                 {"shape", Json::array({3, kCanvas, kCanvas})},
                 {"split", data.split},
                 {"descriptor", data.descriptor}};
  write_magic_json(out, "CDDS1", header);
  write_f64(out, data.images.values().data(), data.images.size());
  std::vector<uint8_t> bytes(data.labels.begin(), data.labels.end());
  write_bytes(out, bytes.data(), static_cast<int64_t>(bytes.size()));
  if (!out) throw IoError("write failed on " + path.string());
}

Dataset load_dataset(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  const std::string what = "dataset " + path.string();
  Json header = read_magic_json(in, "CDDS1", what);
  int count;
  Shape shape;
  Dataset data;
  try {
    count = header.at("count").get<int>();
    shape = header.at("shape").get<Shape>();
    data.split = header.at("split").get<std::string>();
    data.descriptor = header.value("descriptor", Json::object());
  } catch (const Json::exception& e) {
    throw IoError(what + ": header missing required fields (" + e.what() + ")");
  }
  if (count <= 0 || shape != Shape{3, kCanvas, kCanvas}) {
    throw IoError(what + ": unsupported count/shape in header");
  }
  Eigen::ArrayXd values(static_cast<int64_t>(count) * 3 * kCanvas * kCanvas);
  read_f64(in, values.data(), values.size(), what);
  std::vector<uint8_t> bytes(count);
  read_bytes(in, bytes.data(), count, what);
  data.images = Tensor::make({count, 3, kCanvas, kCanvas}, std::move(values));
  data.labels.assign(bytes.begin(), bytes.end());
  for (int label : data.labels) {
    if (label < 0 || label >= kNumClasses) {
      throw IoError(what + ": label " + std::to_string(label) + " out of range");
    }
  }
  return data;
}

}  // namespace cdt
