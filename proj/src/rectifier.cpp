#include "spdn/rectifier.hpp"

#include <cmath>
#include <stdexcept>

namespace spdn {

namespace {

double tps_kernel(double r2) {
  return r2 > 0.0 ? r2 * std::log(r2) : 0.0;  // U(r) = r^2 log r^2, U(0)=0
}

// dense Gaussian elimination with partial pivoting; a is n x n row-major
std::vector<double> invert_dense(std::vector<double> a, int n) {
  std::vector<double> inv(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < n; ++i) inv[i * n + i] = 1.0;
  for (int col = 0; col < n; ++col) {
    int piv = col;
    for (int r = col + 1; r < n; ++r)
      if (std::abs(a[r * n + col]) > std::abs(a[piv * n + col])) piv = r;
    if (std::abs(a[piv * n + col]) < 1e-12)
      throw std::runtime_error("singular TPS system");
    if (piv != col)
      for (int j = 0; j < n; ++j) {
        std::swap(a[piv * n + j], a[col * n + j]);
        std::swap(inv[piv * n + j], inv[col * n + j]);
      }
    double d = a[col * n + col];
    for (int j = 0; j < n; ++j) { a[col * n + j] /= d; inv[col * n + j] /= d; }
    for (int r = 0; r < n; ++r) {
      if (r == col) continue;
      double f = a[r * n + col];
      if (f == 0.0) continue;
      for (int j = 0; j < n; ++j) {
        a[r * n + j] -= f * a[col * n + j];
        inv[r * n + j] -= f * inv[col * n + j];
      }
    }
  }
  return inv;
}

// normalized coordinate of pixel index i along an extent of n
double norm_coord(int i, int n) {
  return n > 1 ? -1.0 + 2.0 * i / (n - 1) : 0.0;
}

Tensor identity_grid(int h, int w) {
  Tensor pts = Tensor::zeros({h * w, 2});
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      pts[(y * w + x) * 2] = norm_coord(x, w);
      pts[(y * w + x) * 2 + 1] = norm_coord(y, h);
    }
  return pts;
}

Tensor resize_bilinear(const Tensor& img, int oh, int ow) {
  Tensor s = grid_sample(img, identity_grid(oh, ow));
  return reshape(s, {img.dim(0), oh, ow});
}

}  // namespace

std::vector<double> tps_target_layout(int K) {
  if (K < 6 || K % 2 != 0)
    throw std::invalid_argument("control point count must be even and >= 6, got " +
                                std::to_string(K));
  std::vector<double> t(static_cast<std::size_t>(K) * 2);
  int half = K / 2;
  for (int i = 0; i < half; ++i) {
    double x = half > 1 ? -0.9 + 1.8 * i / (half - 1) : 0.0;
    t[2 * i] = x;
    t[2 * i + 1] = -0.9;          // top row
    t[2 * (half + i)] = x;
    t[2 * (half + i) + 1] = 0.9;  // bottom row
  }
  return t;
}

Rectifier Rectifier::init(const RectifierConfig& cfg, Rng& rng) {
  Rectifier r;
  r.cfg = cfg;
  int K = cfg.K;

  r.conv1 = ConvUnit::init(1, 8, 3, 1, 1, rng);
  r.conv2 = ConvUnit::init(8, 16, 3, 1, 1, rng);
  r.conv3 = ConvUnit::init(16, 16, 3, 1, 1, rng);
  r.fc1 = Linear::init(16 * 4 * 8, 64, rng);
  r.fc2 = Linear::zero_init(64, 2 * K);
  // identity initialization: tanh(bias) reproduces the target layout
  std::vector<double> targets = tps_target_layout(K);
  for (int i = 0; i < 2 * K; ++i) r.fc2.b[i] = std::atanh(targets[i]);

  // TPS system matrix L from the fixed target layout, inverted once
  int n = K + 3;
  std::vector<double> L(static_cast<std::size_t>(n) * n, 0.0);
  for (int i = 0; i < K; ++i) {
    for (int j = 0; j < K; ++j) {
      double dx = targets[2 * i] - targets[2 * j];
      double dy = targets[2 * i + 1] - targets[2 * j + 1];
      L[i * n + j] = tps_kernel(dx * dx + dy * dy);
    }
    L[i * n + K] = 1.0;
    L[i * n + K + 1] = targets[2 * i];
    L[i * n + K + 2] = targets[2 * i + 1];
    L[(K + 0) * n + i] = 1.0;
    L[(K + 1) * n + i] = targets[2 * i];
    L[(K + 2) * n + i] = targets[2 * i + 1];
  }
  r.l_inv = Tensor::from({n, n}, invert_dense(std::move(L), n));

  // basis over the output grid
  int hw = cfg.out_h * cfg.out_w;
  Tensor phi = Tensor::zeros({hw, n});
  for (int y = 0; y < cfg.out_h; ++y)
    for (int x = 0; x < cfg.out_w; ++x) {
      double qx = norm_coord(x, cfg.out_w), qy = norm_coord(y, cfg.out_h);
      double* row = phi.data() + static_cast<std::size_t>(y * cfg.out_w + x) * n;
      for (int j = 0; j < K; ++j) {
        double dx = qx - targets[2 * j], dy = qy - targets[2 * j + 1];
        row[j] = tps_kernel(dx * dx + dy * dy);
      }
      row[K] = 1.0;
      row[K + 1] = qx;
      row[K + 2] = qy;
    }
  r.phi = phi;
  return r;
}

Tensor Rectifier::localize(const Tensor& image) const {
  if (image.rank() != 3 || image.dim(0) != 1)
    throw std::invalid_argument("rectifier expects an image [1,H,W], got " +
                                shape_str(image.shape()));
  Tensor x = resize_bilinear(image, 32, 64);
  x = vrelu(conv1.apply(avg_pool2(x)));   // 16x32
  x = vrelu(conv2.apply(avg_pool2(x)));   // 8x16
  x = vrelu(conv3.apply(avg_pool2(x)));   // 4x8
  Tensor flat = reshape(x, {16 * 4 * 8});
  Tensor hidden = vrelu(fc1.apply(flat));
  Tensor coords = vtanh(fc2.apply(hidden));
  return reshape(coords, {cfg.K, 2});
}

Tensor Rectifier::solve_tps(const Tensor& source_points) const {
  if (source_points.rank() != 2 || source_points.dim(0) != cfg.K ||
      source_points.dim(1) != 2)
    throw std::invalid_argument("solve_tps expects [K,2] source points, got " +
                                shape_str(source_points.shape()));
  Tensor rhs = concat(source_points, Tensor::zeros({3, 2}), 0);
  return matmul(l_inv, rhs);
}

Tensor Rectifier::rectify(const Tensor& image, const Tensor& tps_weights) const {
  Tensor coords = matmul(phi, tps_weights);  // [out_h*out_w, 2] in input space
  Tensor sampled = grid_sample(image, coords);
  return reshape(sampled, {image.dim(0), cfg.out_h, cfg.out_w});
}

Tensor Rectifier::apply(const Tensor& image) const {
  if (cfg.identity) return resize_bilinear(image, cfg.out_h, cfg.out_w);
  Tensor source = localize(image);
  Tensor weights = solve_tps(source);
  return rectify(image, weights);
}

std::pair<double, double> Rectifier::map_point(const Tensor& tps_weights,
                                               double x, double y) const {
  std::vector<double> targets = tps_target_layout(cfg.K);
  int n = cfg.K + 3;
  double out[2];
  for (int c = 0; c < 2; ++c) {
    double acc = tps_weights[(cfg.K + 0) * 2 + c] +
                 tps_weights[(cfg.K + 1) * 2 + c] * x +
                 tps_weights[(cfg.K + 2) * 2 + c] * y;
    for (int j = 0; j < cfg.K; ++j) {
      double dx = x - targets[2 * j], dy = y - targets[2 * j + 1];
      acc += tps_weights[j * 2 + c] * tps_kernel(dx * dx + dy * dy);
    }
    out[c] = acc;
  }
  (void)n;
  return {out[0], out[1]};
}

void Rectifier::collect(const std::string& prefix, NamedTensors& out) const {
  conv1.collect(prefix + "/conv1", out);
  conv2.collect(prefix + "/conv2", out);
  conv3.collect(prefix + "/conv3", out);
  fc1.collect(prefix + "/fc1", out);
  fc2.collect(prefix + "/fc2", out);
}

}  // namespace spdn
