#include "spdn/encoder.hpp"

#include <cmath>
#include <stdexcept>

namespace spdn {

ConvUnit ConvUnit::init(int in, int out, int k, int stride, int pad, Rng& rng) {
  ConvUnit u;
  double std = 1.0 / std::sqrt(static_cast<double>(in * k * k));
  u.kernel = randn_tensor({out, in, k, k}, std, rng);
  u.gain = Tensor::full({out}, 1.0, true);
  u.bias = Tensor::zeros({out}, true);
  u.stride = stride;
  u.pad = pad;
  return u;
}

Tensor ConvUnit::apply(const Tensor& x) const {
  return spatial_norm(conv2d(x, kernel, stride, pad), gain, bias);
}

void ConvUnit::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + "/k", kernel);
  out.emplace_back(prefix + "/gain", gain);
  out.emplace_back(prefix + "/bias", bias);
}

ResidualBlock ResidualBlock::init(int width, Rng& rng) {
  ResidualBlock b;
  b.a = ConvUnit::init(width, width, 3, 1, 1, rng);
  b.b = ConvUnit::init(width, width, 3, 1, 1, rng);
  return b;
}

Tensor ResidualBlock::apply(const Tensor& x) const {
  Tensor y = b.apply(vrelu(a.apply(x)));
  return vrelu(add(x, y));
}

void ResidualBlock::collect(const std::string& prefix, NamedTensors& out) const {
  a.collect(prefix + "/a", out);
  b.collect(prefix + "/b", out);
}

Encoder Encoder::init(const EncoderConfig& cfg, Rng& rng) {
  Encoder e;
  e.cfg = cfg;
  e.stem = ConvUnit::init(1, cfg.stem, 3, 1, 1, rng);
  int widths[4] = {cfg.stem, cfg.w1, cfg.w2, cfg.channels};
  for (int i = 0; i < 3; ++i) {
    // downsampling is avg-pool then a stride-1 conv at the reduced resolution
    e.down[i] = ConvUnit::init(widths[i], widths[i + 1], 3, 1, 1, rng);
    e.block[i] = ResidualBlock::init(widths[i + 1], rng);
  }
  return e;
}

Tensor Encoder::encode(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw std::invalid_argument("encoder expects an image [1,H,W], got " +
                                shape_str(image.shape()));
  int h = image.dim(1), w = image.dim(2);
  if (h % 8 != 0 || w % 8 != 0)
    throw std::invalid_argument("encoder input extents must be divisible by 8, got " +
                                shape_str(image.shape()));
  Tensor x = vrelu(stem.apply(image));
  for (int i = 0; i < 3; ++i) {
    x = vrelu(down[i].apply(avg_pool2(x)));
    x = block[i].apply(x);
  }
  return x;
}

void Encoder::collect(const std::string& prefix, NamedTensors& out) const {
  stem.collect(prefix + "/stem", out);
  for (int i = 0; i < 3; ++i) {
    down[i].collect(prefix + "/down" + std::to_string(i), out);
    block[i].collect(prefix + "/block" + std::to_string(i), out);
  }
}

}  // namespace spdn
