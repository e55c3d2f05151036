#pragma once

// Synthetic text-image generator: straight, perspective-skewed and curved
// renderings of a built-in 5x7 bitmap font, plus the on-disk dataset format
// (manifest.tsv + PGM images + vocab.txt).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spdn/tensor.hpp"

namespace spdn {

struct Vocabulary {
  std::string symbols;  // ordered, distinct; EOS is implicit final class

  int eos_index() const { return static_cast<int>(symbols.size()); }
  int size() const { return static_cast<int>(symbols.size()) + 1; }
  int index_of(char c) const;  // throws on unknown character
  char symbol(int index) const;
  std::vector<int> encode(const std::string& text) const;
  std::string decode(const std::vector<int>& indices) const;

  static Vocabulary defaults();  // 26 uppercase letters + 10 digits
  static Vocabulary from_charset(const std::string& charset);
};

enum class Distortion { none, perspective, curved };

const char* distortion_name(Distortion d);
Distortion distortion_from_name(const std::string& name);

struct RenderConfig {
  int height = 32;
  int width = 128;
  double noise_sigma = 0.03;  // capped at 0.05
};

struct TextSample {
  int height = 0, width = 0;
  std::vector<double> image;  // row-major, values in [0,1]
  std::vector<int> label;     // no EOS
  Distortion distortion = Distortion::none;
  // per-character glyph centers in pixel coordinates (x, y); generator ground
  // truth, diagnostics only
  std::vector<std::pair<double, double>> char_boxes;
};

TextSample render(const std::string& text, Distortion distortion,
                  std::uint64_t seed, const Vocabulary& vocab,
                  const RenderConfig& cfg = {});

// Additive Gaussian noise, clamped to [0,1]. Exposed for the Monte Carlo
// blank-canvas oracle.
void add_noise(std::vector<double>& image, double sigma, Rng& rng);

// Access to the raw 5x7 glyph bitmap (35 bools, row-major); throws on
// characters outside the built-in set.
const bool* glyph_bitmap(char c);

struct CorpusConfig {
  int n = 1000;
  int len_min = 1;
  int len_max = 8;
  double mix_none = 1.0;
  double mix_perspective = 0.0;
  double mix_curved = 0.0;
  std::string charset = "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789";
  RenderConfig render;
};

void make_corpus(const std::string& out_dir, const CorpusConfig& cfg,
                 std::uint64_t seed);

struct DatasetEntry {
  int id = 0;
  std::string split;  // train/val/test
  std::string label;
  Distortion distortion = Distortion::none;
};

struct Dataset {
  std::string dir;
  Vocabulary vocab;
  std::vector<DatasetEntry> entries;
  int height = 0, width = 0;
  std::vector<std::vector<double>> images;  // indexed like entries

  std::vector<int> split_indices(const std::string& split) const;
};

Dataset load_dataset(const std::string& dir);

void write_pgm(const std::string& path, const std::vector<double>& img, int h,
               int w);
std::vector<double> read_pgm(const std::string& path, int& h, int& w);

}  // namespace spdn
