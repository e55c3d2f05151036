#pragma once

// Minimal deterministic float64 tensor library with tape-based reverse-mode
// autodiff. Single-threaded; every op records its backward rule on the
// thread-local active Tape.

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace spdn {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated lazily, same length as data
  bool requires_grad = false;

  int size() const { return static_cast<int>(data.size()); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int dim(int i) const { return impl_->shape[i]; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  int size() const { return impl_->size(); }

  double* data() { return impl_->data.data(); }
  const double* data() const { return impl_->data.data(); }
  double& operator[](int i) { return impl_->data[i]; }
  double operator[](int i) const { return impl_->data[i]; }
  double value() const;  // scalar convenience

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool rg) { impl_->requires_grad = rg; }

  double* grad() { impl_->ensure_grad(); return impl_->grad.data(); }
  const std::vector<double>& grad_vec() const { return impl_->grad; }
  bool has_grad() const { return !impl_->grad.empty(); }
  void zero_grad() { if (has_grad()) impl_->grad.assign(impl_->data.size(), 0.0); }

  Tensor clone() const;  // deep copy of values only (no grad, no history)

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor wrap(std::shared_ptr<TensorImpl>);
};

Tensor wrap(std::shared_ptr<TensorImpl> impl);

// Records backward rules in forward order; backward() replays them reversed.
// Exactly one backward pass per tape.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* current();
  void record(std::function<void()> backward_step);
  bool consumed() const { return consumed_; }
  std::size_t node_count() const { return nodes_.size(); }

  friend void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
  Tape* prev_ = nullptr;
};

void backward(const Tensor& loss);

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);          // [m,k]x[k,n]
Tensor matvec(const Tensor& m, const Tensor& v);          // [m,k]x[k] -> [m]
Tensor vecmat(const Tensor& v, const Tensor& m);          // [m]x[m,n] -> [n]
Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int pad);
Tensor avg_pool2(const Tensor& x);  // [C,H,W] -> [C,H/2,W/2], H,W even
Tensor add_chan_bias(const Tensor& x, const Tensor& bias);  // x:[C,H,W], bias:[C]
Tensor softmax(const Tensor& logits);                     // 1-D
Tensor vtanh(const Tensor& x);
Tensor vsigmoid(const Tensor& x);
Tensor vrelu(const Tensor& x);
Tensor vabs(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double c);
Tensor add_colvec(const Tensor& m, const Tensor& v);      // v added to each column
Tensor clamp(const Tensor& x, double lo, double hi);
Tensor concat(const Tensor& a, const Tensor& b, int axis);
Tensor slice(const Tensor& v, int start, int len);        // 1-D contiguous
Tensor reshape(const Tensor& x, Shape shape);
Tensor embedding_lookup(const Tensor& table, int index);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor cross_entropy(const Tensor& logits, int target);
// Per-channel normalization over spatial positions with learned gain/bias.
Tensor spatial_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps = 1e-5);

// Bilinear interpolation at normalized coordinates in [-1,1]^2 (x,y order),
// border-clamped. points: [N,2] -> output [C,N]; gradient flows to both the
// map and the coordinates.
Tensor grid_sample(const Tensor& map, const Tensor& points);
Tensor bilinear_sample(const Tensor& map, const Tensor& point);  // point: [2] -> [C]

// ---- optimizer -------------------------------------------------------------

struct AdadeltaState {
  std::vector<double> eg2;  // running E[g^2]
  std::vector<double> ex2;  // running E[dx^2]
  double rho = 0.9;
  double eps = 1e-6;

  static AdadeltaState like(const Tensor& param, double rho = 0.9,
                            double eps = 1e-6);
};

void adadelta_step(Tensor& param, AdadeltaState& state, double lr);

// ---- checkpoint ------------------------------------------------------------

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

void save_checkpoint(const std::string& path, const NamedTensors& params);
NamedTensors load_checkpoint(const std::string& path);

// ---- rng -------------------------------------------------------------------

// Thin deterministic wrapper; distributions are hand-rolled so sequences do
// not depend on the standard library implementation.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : s_(seed ? seed : 0x9e3779b97f4a7c15ULL) {}
  std::uint64_t next_u64();
  double uniform();                       // [0,1)
  double uniform(double a, double b);
  double gaussian();                      // N(0,1), Box-Muller
  int uniform_int(int lo, int hi);        // inclusive range
  Rng fork(std::uint64_t stream) const;   // independent substream

 private:
  std::uint64_t s_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

Tensor randn_tensor(Shape shape, double stddev, Rng& rng,
                    bool requires_grad = true);

// ---- raw matrix kernels (shared by conv2d / benchmarks) --------------------

void dgemm_nn(int m, int k, int n, const double* a, const double* b, double* c);
void dgemm_nt(int m, int k, int n, const double* a, const double* b, double* c);
void dgemm_tn(int m, int k, int n, const double* a, const double* b, double* c);

}  // namespace spdn
