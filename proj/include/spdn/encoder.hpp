#pragma once

// Residual CNN mapping a rectified image [1,H,W] to a two-dimensional
// feature map [C, H/8, W/8].

#include "spdn/tensor.hpp"

namespace spdn {

struct EncoderConfig {
  int stem = 32;
  int w1 = 64;
  int w2 = 128;
  int channels = 256;  // C; configurable down to small widths for fast runs
};

// conv (no bias) + per-channel spatial normalization; relu applied by caller
struct ConvUnit {
  Tensor kernel;  // [out, in, k, k]
  Tensor gain;    // [out]
  Tensor bias;    // [out]
  int stride = 1;
  int pad = 1;

  static ConvUnit init(int in, int out, int k, int stride, int pad, Rng& rng);
  Tensor apply(const Tensor& x) const;  // conv + norm (no activation)
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct ResidualBlock {
  ConvUnit a, b;  // two 3x3 convs at constant width, identity skip

  static ResidualBlock init(int width, Rng& rng);
  Tensor apply(const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct Encoder {
  EncoderConfig cfg;
  ConvUnit stem;             // 1 -> stem, stride 1
  ConvUnit down[3];          // per-stage convs after 2x2 avg-pool: stem->w1->w2->C
  ResidualBlock block[3];    // one residual block per stage

  static Encoder init(const EncoderConfig& cfg, Rng& rng);
  Tensor encode(const Tensor& image) const;  // [1,H,W] -> [C,H/8,W/8]
  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace spdn
