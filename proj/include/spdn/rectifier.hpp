#pragma once

// STN-with-TPS rectifier: a small localization CNN predicts K control points
// on the input image; a thin-plate-spline warp resamples the image onto a
// straightened canvas. The TPS system matrix depends only on the fixed target
// layout, so its inverse is precomputed once and the per-image solve is a
// plain matmul (fully differentiable).

#include "spdn/encoder.hpp"
#include "spdn/rnn.hpp"
#include "spdn/tensor.hpp"

namespace spdn {

struct RectifierConfig {
  int K = 20;        // control points, K/2 top + K/2 bottom
  int out_h = 32;
  int out_w = 128;
  bool identity = false;  // bypass: plain bilinear resize, no warp
};

// Fixed target layout for K control points, normalized coords, x/y pairs.
std::vector<double> tps_target_layout(int K);

struct Rectifier {
  RectifierConfig cfg;

  // localization net: 3 conv units + 2 fully connected layers
  ConvUnit conv1, conv2, conv3;
  Linear fc1, fc2;

  // constants derived from the target layout
  Tensor l_inv;  // [(K+3),(K+3)] inverse TPS system matrix
  Tensor phi;    // [out_h*out_w, K+3] basis evaluated on the output grid

  static Rectifier init(const RectifierConfig& cfg, Rng& rng);

  // image [1,H,W] -> predicted source control points [K,2] in [-1,1]
  Tensor localize(const Tensor& image) const;
  // source points [K,2] -> TPS weights [(K+3),2]
  Tensor solve_tps(const Tensor& source_points) const;
  // image + weights -> rectified [1,out_h,out_w]
  Tensor rectify(const Tensor& image, const Tensor& tps_weights) const;
  // full pipeline (identity mode: bilinear resize only)
  Tensor apply(const Tensor& image) const;

  // maps one normalized output-canvas coordinate through the transform
  std::pair<double, double> map_point(const Tensor& tps_weights, double x,
                                      double y) const;

  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace spdn
