#include "spdn/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace spdn {

namespace {

thread_local Tape* g_current_tape = nullptr;

int shape_product(const Shape& s) {
  int p = 1;
  for (int d : s) {
    if (d < 0) throw std::invalid_argument("negative extent in shape " + shape_str(s));
    p *= d;
  }
  return p;
}

bool tracked(const Tensor& t) { return t.requires_grad(); }

void record_if_needed(Tensor& out, bool any_input_tracked,
                      std::function<void()> bw) {
  if (any_input_tracked) {
    out.set_requires_grad(true);
    if (Tape* t = Tape::current()) {
      // graph branches that never reach the loss still run their closures;
      // guarantee the output grad buffer exists (zeros) before each one
      auto oi = out.impl();
      t->record([oi, step = std::move(bw)] {
        oi->ensure_grad();
        step();
      });
    }
  }
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// ---- Tensor ----------------------------------------------------------------

Tensor wrap(std::shared_ptr<TensorImpl> impl) { return Tensor(std::move(impl)); }

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto impl = std::make_shared<TensorImpl>();
  int n = shape_product(shape);
  impl->shape = std::move(shape);
  impl->data.assign(n, 0.0);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.data(), t.data() + t.size(), value);
  return t;
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  int n = shape_product(shape);
  if (n != static_cast<int>(values.size()))
    throw std::invalid_argument("value count " + std::to_string(values.size()) +
                                " does not match shape " + shape_str(shape));
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  impl->requires_grad = requires_grad;
  return wrap(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

double Tensor::value() const {
  if (size() != 1) throw std::invalid_argument("value() on non-scalar tensor " + shape_str(shape()));
  return impl_->data[0];
}

Tensor Tensor::clone() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  impl->requires_grad = impl_->requires_grad;
  return wrap(std::move(impl));
}

// ---- Tape ------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::record(std::function<void()> backward_step) {
  nodes_.push_back(std::move(backward_step));
}

void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward requires a scalar loss, got " +
                                shape_str(loss.shape()));
  Tape* t = Tape::current();
  if (!t) throw std::logic_error("backward called with no active tape");
  if (t->consumed_) throw std::logic_error("tape already consumed by a previous backward pass");
  t->consumed_ = true;
  loss.impl()->ensure_grad();
  loss.impl()->grad[0] = 1.0;
  for (auto it = t->nodes_.rbegin(); it != t->nodes_.rend(); ++it) (*it)();
}

// ---- matrix kernels --------------------------------------------------------

// c += a * b, row-major, a:[m,k] b:[k,n] c:[m,n]
void dgemm_nn(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int i = 0; i < m; ++i) {
    double* ci = c + static_cast<std::size_t>(i) * n;
    const double* ai = a + static_cast<std::size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// c += a * b^T, a:[m,k] b:[n,k] c:[m,n]
void dgemm_nt(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

// c += a^T * b, a:[k,m] b:[k,n] c:[m,n]
void dgemm_tn(int m, int k, int n, const double* a, const double* b, double* c) {
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<std::size_t>(p) * m;
    const double* bp = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// ---- ops -------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul shape mismatch: " + shape_str(a.shape()) +
                                " x " + shape_str(b.shape()));
  int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  dgemm_nn(m, k, n, a.data(), b.data(), out.data());
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_if_needed(out, tracked(a) || tracked(b), [ai, bi, oi, m, k, n] {
    const double* g = oi->grad.data();
    if (ai->requires_grad) {
      ai->ensure_grad();
      dgemm_nt(m, n, k, g, bi->data.data(), ai->grad.data());  // dA = g * B^T
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      dgemm_tn(k, m, n, ai->data.data(), g, bi->grad.data());  // dB = A^T * g
    }
  });
  return out;
}

Tensor matvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(1) != v.dim(0))
    throw std::invalid_argument("matvec shape mismatch: " + shape_str(m.shape()) +
                                " x " + shape_str(v.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  Tensor out = Tensor::zeros({rows});
  for (int i = 0; i < rows; ++i) {
    const double* mi = m.data() + static_cast<std::size_t>(i) * cols;
    double acc = 0.0;
    for (int j = 0; j < cols; ++j) acc += mi[j] * v[j];
    out[i] = acc;
  }
  auto mi_ = m.impl(), vi = v.impl(), oi = out.impl();
  record_if_needed(out, tracked(m) || tracked(v), [mi_, vi, oi, rows, cols] {
    const double* g = oi->grad.data();
    if (mi_->requires_grad) {
      mi_->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        double gi = g[i];
        if (gi == 0.0) continue;
        double* row = mi_->grad.data() + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) row[j] += gi * vi->data[j];
      }
    }
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        double gi = g[i];
        if (gi == 0.0) continue;
        const double* row = mi_->data.data() + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) vi->grad[j] += gi * row[j];
      }
    }
  });
  return out;
}

Tensor vecmat(const Tensor& v, const Tensor& m) {
  if (v.rank() != 1 || m.rank() != 2 || v.dim(0) != m.dim(0))
    throw std::invalid_argument("vecmat shape mismatch: " + shape_str(v.shape()) +
                                " x " + shape_str(m.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  Tensor out = Tensor::zeros({cols});
  for (int i = 0; i < rows; ++i) {
    double vi_ = v[i];
    if (vi_ == 0.0) continue;
    const double* mi = m.data() + static_cast<std::size_t>(i) * cols;
    for (int j = 0; j < cols; ++j) out[j] += vi_ * mi[j];
  }
  auto vi = v.impl(), mi_ = m.impl(), oi = out.impl();
  record_if_needed(out, tracked(v) || tracked(m), [vi, mi_, oi, rows, cols] {
    const double* g = oi->grad.data();
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const double* row = mi_->data.data() + static_cast<std::size_t>(i) * cols;
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) acc += row[j] * g[j];
        vi->grad[i] += acc;
      }
    }
    if (mi_->requires_grad) {
      mi_->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        double vv = vi->data[i];
        if (vv == 0.0) continue;
        double* row = mi_->grad.data() + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) row[j] += vv * g[j];
      }
    }
  });
  return out;
}

namespace {

// im2col for cross-correlation. cols is [cin*kk*kk, oh*ow].
void im2col(const double* img, int cin, int h, int w, int kk, int stride,
            int pad, int oh, int ow, double* cols) {
  int ospatial = oh * ow;
  for (int c = 0; c < cin; ++c) {
    const double* plane = img + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kk; ++ky) {
      for (int kx = 0; kx < kk; ++kx) {
        double* dst = cols + (static_cast<std::size_t>(c) * kk * kk + ky * kk + kx) * ospatial;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) {
            std::fill(dst + oy * ow, dst + (oy + 1) * ow, 0.0);
            continue;
          }
          const double* src_row = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            dst[oy * ow + ox] = (ix < 0 || ix >= w) ? 0.0 : src_row[ix];
          }
        }
      }
    }
  }
}

void col2im(const double* cols, int cin, int h, int w, int kk, int stride,
            int pad, int oh, int ow, double* img_grad) {
  int ospatial = oh * ow;
  for (int c = 0; c < cin; ++c) {
    double* plane = img_grad + static_cast<std::size_t>(c) * h * w;
    for (int ky = 0; ky < kk; ++ky) {
      for (int kx = 0; kx < kk; ++kx) {
        const double* src = cols + (static_cast<std::size_t>(c) * kk * kk + ky * kk + kx) * ospatial;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          double* dst_row = plane + static_cast<std::size_t>(iy) * w;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst_row[ix] += src[oy * ow + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernels, int stride, int pad) {
  if (input.rank() != 3 || kernels.rank() != 4)
    throw std::invalid_argument("conv2d expects input [C,H,W] and kernels [O,C,k,k], got " +
                                shape_str(input.shape()) + " and " + shape_str(kernels.shape()));
  int cin = input.dim(0), h = input.dim(1), w = input.dim(2);
  int cout = kernels.dim(0), kk = kernels.dim(2);
  if (kernels.dim(1) != cin || kernels.dim(3) != kk)
    throw std::invalid_argument("conv2d kernel shape " + shape_str(kernels.shape()) +
                                " incompatible with input " + shape_str(input.shape()));
  if (kk % 2 == 0) throw std::invalid_argument("conv2d kernel extent must be odd");
  if ((h + 2 * pad - kk) % stride != 0 || (w + 2 * pad - kk) % stride != 0)
    throw std::invalid_argument("conv2d output extent is not an integer for input " +
                                shape_str(input.shape()) + " k=" + std::to_string(kk) +
                                " stride=" + std::to_string(stride) + " pad=" + std::to_string(pad));
  int oh = (h + 2 * pad - kk) / stride + 1;
  int ow = (w + 2 * pad - kk) / stride + 1;
  if (oh <= 0 || ow <= 0) throw std::invalid_argument("conv2d produces empty output");

  int krows = cin * kk * kk, ospatial = oh * ow;
  std::vector<double> cols(static_cast<std::size_t>(krows) * ospatial);
  im2col(input.data(), cin, h, w, kk, stride, pad, oh, ow, cols.data());
  Tensor out = Tensor::zeros({cout, oh, ow});
  dgemm_nn(cout, krows, ospatial, kernels.data(), cols.data(), out.data());

  auto ii = input.impl(), ki = kernels.impl(), oi = out.impl();
  record_if_needed(out, tracked(input) || tracked(kernels),
                   [ii, ki, oi, cin, h, w, cout, kk, stride, pad, oh, ow, krows, ospatial] {
    const double* g = oi->grad.data();
    std::vector<double> cols(static_cast<std::size_t>(krows) * ospatial);
    if (ki->requires_grad) {
      ki->ensure_grad();
      im2col(ii->data.data(), cin, h, w, kk, stride, pad, oh, ow, cols.data());
      dgemm_nt(cout, ospatial, krows, g, cols.data(), ki->grad.data());
    }
    if (ii->requires_grad) {
      ii->ensure_grad();
      std::fill(cols.begin(), cols.end(), 0.0);
      dgemm_tn(krows, cout, ospatial, ki->data.data(), g, cols.data());
      col2im(cols.data(), cin, h, w, kk, stride, pad, oh, ow, ii->grad.data());
    }
  });
  return out;
}

Tensor avg_pool2(const Tensor& x) {
  if (x.rank() != 3 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
    throw std::invalid_argument("avg_pool2 expects [C,H,W] with even extents, got " +
                                shape_str(x.shape()));
  int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  int oh = h / 2, ow = w / 2;
  Tensor out = Tensor::zeros({c, oh, ow});
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data() + static_cast<std::size_t>(ch) * h * w;
    double* dst = out.data() + static_cast<std::size_t>(ch) * oh * ow;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        const double* p = src + (2 * oy) * w + 2 * ox;
        dst[oy * ow + ox] = 0.25 * (p[0] + p[1] + p[w] + p[w + 1]);
      }
  }
  auto xi = x.impl(), oi = out.impl();
  record_if_needed(out, tracked(x), [xi, oi, c, h, w, oh, ow] {
    xi->ensure_grad();
    const double* g = oi->grad.data();
    for (int ch = 0; ch < c; ++ch) {
      double* dst = xi->grad.data() + static_cast<std::size_t>(ch) * h * w;
      const double* gc = g + static_cast<std::size_t>(ch) * oh * ow;
      for (int oy = 0; oy < oh; ++oy)
        for (int ox = 0; ox < ow; ++ox) {
          double gv = 0.25 * gc[oy * ow + ox];
          double* p = dst + (2 * oy) * w + 2 * ox;
          p[0] += gv; p[1] += gv; p[w] += gv; p[w + 1] += gv;
        }
    }
  });
  return out;
}

Tensor add_chan_bias(const Tensor& x, const Tensor& bias) {
  if (x.rank() != 3 || bias.rank() != 1 || bias.dim(0) != x.dim(0))
    throw std::invalid_argument("add_chan_bias shape mismatch: " + shape_str(x.shape()) +
                                " with " + shape_str(bias.shape()));
  int c = x.dim(0), spatial = x.dim(1) * x.dim(2);
  Tensor out = Tensor::zeros(x.shape());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data() + static_cast<std::size_t>(ch) * spatial;
    double* dst = out.data() + static_cast<std::size_t>(ch) * spatial;
    double b = bias[ch];
    for (int i = 0; i < spatial; ++i) dst[i] = src[i] + b;
  }
  auto xi = x.impl(), bi = bias.impl(), oi = out.impl();
  record_if_needed(out, tracked(x) || tracked(bias), [xi, bi, oi, c, spatial] {
    const double* g = oi->grad.data();
    if (xi->requires_grad) {
      xi->ensure_grad();
      for (int i = 0; i < c * spatial; ++i) xi->grad[i] += g[i];
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int ch = 0; ch < c; ++ch) {
        const double* gc = g + static_cast<std::size_t>(ch) * spatial;
        double acc = 0.0;
        for (int i = 0; i < spatial; ++i) acc += gc[i];
        bi->grad[ch] += acc;
      }
    }
  });
  return out;
}

Tensor softmax(const Tensor& logits) {
  if (logits.size() < 1 || logits.rank() != 1)
    throw std::invalid_argument("softmax expects a nonempty 1-D tensor, got " +
                                shape_str(logits.shape()));
  int n = logits.size();
  Tensor out = Tensor::zeros({n});
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) { out[i] = std::exp(logits[i] - mx); z += out[i]; }
  for (int i = 0; i < n; ++i) out[i] /= z;
  auto li = logits.impl(), oi = out.impl();
  record_if_needed(out, tracked(logits), [li, oi, n] {
    li->ensure_grad();
    const double* g = oi->grad.data();
    const double* y = oi->data.data();
    double dot = 0.0;
    for (int i = 0; i < n; ++i) dot += g[i] * y[i];
    for (int i = 0; i < n; ++i) li->grad[i] += y[i] * (g[i] - dot);
  });
  return out;
}

namespace {

template <typename F, typename DF>
Tensor unary_op(const Tensor& x, F f, DF df) {
  Tensor out = Tensor::zeros(x.shape());
  int n = x.size();
  for (int i = 0; i < n; ++i) out[i] = f(x[i]);
  auto xi = x.impl(), oi = out.impl();
  record_if_needed(out, tracked(x), [xi, oi, n, df] {
    xi->ensure_grad();
    for (int i = 0; i < n; ++i)
      xi->grad[i] += oi->grad[i] * df(xi->data[i], oi->data[i]);
  });
  return out;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(std::string(op) + " shape mismatch: " +
                                shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor vtanh(const Tensor& x) {
  return unary_op(x, [](double v) { return std::tanh(v); },
                  [](double, double y) { return 1.0 - y * y; });
}

Tensor vsigmoid(const Tensor& x) {
  return unary_op(x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); },
                  [](double, double y) { return y * (1.0 - y); });
}

Tensor vrelu(const Tensor& x) {
  return unary_op(x, [](double v) { return v > 0.0 ? v : 0.0; },
                  [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor vabs(const Tensor& x) {
  return unary_op(x, [](double v) { return std::abs(v); },
                  [](double v, double) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
}

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  int n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  for (int i = 0; i < n; ++i) out[i] = a[i] + b[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_if_needed(out, tracked(a) || tracked(b), [ai, bi, oi, n] {
    const double* g = oi->grad.data();
    if (ai->requires_grad) { ai->ensure_grad(); for (int i = 0; i < n; ++i) ai->grad[i] += g[i]; }
    if (bi->requires_grad) { bi->ensure_grad(); for (int i = 0; i < n; ++i) bi->grad[i] += g[i]; }
  });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  int n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  for (int i = 0; i < n; ++i) out[i] = a[i] - b[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_if_needed(out, tracked(a) || tracked(b), [ai, bi, oi, n] {
    const double* g = oi->grad.data();
    if (ai->requires_grad) { ai->ensure_grad(); for (int i = 0; i < n; ++i) ai->grad[i] += g[i]; }
    if (bi->requires_grad) { bi->ensure_grad(); for (int i = 0; i < n; ++i) bi->grad[i] -= g[i]; }
  });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  int n = a.size();
  Tensor out = Tensor::zeros(a.shape());
  for (int i = 0; i < n; ++i) out[i] = a[i] * b[i];
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_if_needed(out, tracked(a) || tracked(b), [ai, bi, oi, n] {
    const double* g = oi->grad.data();
    if (ai->requires_grad) { ai->ensure_grad(); for (int i = 0; i < n; ++i) ai->grad[i] += g[i] * bi->data[i]; }
    if (bi->requires_grad) { bi->ensure_grad(); for (int i = 0; i < n; ++i) bi->grad[i] += g[i] * ai->data[i]; }
  });
  return out;
}

Tensor scale(const Tensor& x, double c) {
  int n = x.size();
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i) out[i] = x[i] * c;
  auto xi = x.impl(), oi = out.impl();
  record_if_needed(out, tracked(x), [xi, oi, n, c] {
    xi->ensure_grad();
    for (int i = 0; i < n; ++i) xi->grad[i] += oi->grad[i] * c;
  });
  return out;
}

Tensor add_colvec(const Tensor& m, const Tensor& v) {
  if (m.rank() != 2 || v.rank() != 1 || m.dim(0) != v.dim(0))
    throw std::invalid_argument("add_colvec shape mismatch: " + shape_str(m.shape()) +
                                " with " + shape_str(v.shape()));
  int rows = m.dim(0), cols = m.dim(1);
  Tensor out = Tensor::zeros(m.shape());
  for (int i = 0; i < rows; ++i) {
    const double* src = m.data() + static_cast<std::size_t>(i) * cols;
    double* dst = out.data() + static_cast<std::size_t>(i) * cols;
    double vi_ = v[i];
    for (int j = 0; j < cols; ++j) dst[j] = src[j] + vi_;
  }
  auto mi = m.impl(), vi = v.impl(), oi = out.impl();
  record_if_needed(out, tracked(m) || tracked(v), [mi, vi, oi, rows, cols] {
    const double* g = oi->grad.data();
    if (mi->requires_grad) {
      mi->ensure_grad();
      for (int i = 0; i < rows * cols; ++i) mi->grad[i] += g[i];
    }
    if (vi->requires_grad) {
      vi->ensure_grad();
      for (int i = 0; i < rows; ++i) {
        const double* gi = g + static_cast<std::size_t>(i) * cols;
        double acc = 0.0;
        for (int j = 0; j < cols; ++j) acc += gi[j];
        vi->grad[i] += acc;
      }
    }
  });
  return out;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  int n = x.size();
  Tensor out = Tensor::zeros(x.shape());
  for (int i = 0; i < n; ++i) out[i] = std::min(hi, std::max(lo, x[i]));
  auto xi = x.impl(), oi = out.impl();
  record_if_needed(out, tracked(x), [xi, oi, n, lo, hi] {
    xi->ensure_grad();
    for (int i = 0; i < n; ++i) {
      double v = xi->data[i];
      if (v >= lo && v <= hi) xi->grad[i] += oi->grad[i];
    }
  });
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, int axis) {
  if (a.rank() != b.rank() || axis < 0 || axis >= a.rank())
    throw std::invalid_argument("concat rank/axis mismatch: " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()) + " axis " + std::to_string(axis));
  for (int i = 0; i < a.rank(); ++i)
    if (i != axis && a.dim(i) != b.dim(i))
      throw std::invalid_argument("concat non-axis extents differ: " + shape_str(a.shape()) +
                                  " vs " + shape_str(b.shape()));
  Shape os = a.shape();
  os[axis] += b.dim(axis);
  Tensor out = Tensor::zeros(os);
  // treat as [outer, extent, inner]
  int outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= a.dim(i);
  for (int i = axis + 1; i < a.rank(); ++i) inner *= a.dim(i);
  int ea = a.dim(axis), eb = b.dim(axis);
  for (int o = 0; o < outer; ++o) {
    std::memcpy(out.data() + (static_cast<std::size_t>(o) * (ea + eb)) * inner,
                a.data() + static_cast<std::size_t>(o) * ea * inner,
                sizeof(double) * ea * inner);
    std::memcpy(out.data() + (static_cast<std::size_t>(o) * (ea + eb) + ea) * inner,
                b.data() + static_cast<std::size_t>(o) * eb * inner,
                sizeof(double) * eb * inner);
  }
  auto ai = a.impl(), bi = b.impl(), oi = out.impl();
  record_if_needed(out, tracked(a) || tracked(b), [ai, bi, oi, outer, inner, ea, eb] {
    const double* g = oi->grad.data();
    if (ai->requires_grad) {
      ai->ensure_grad();
      for (int o = 0; o < outer; ++o) {
        const double* src = g + (static_cast<std::size_t>(o) * (ea + eb)) * inner;
        double* dst = ai->grad.data() + static_cast<std::size_t>(o) * ea * inner;
        for (int i = 0; i < ea * inner; ++i) dst[i] += src[i];
      }
    }
    if (bi->requires_grad) {
      bi->ensure_grad();
      for (int o = 0; o < outer; ++o) {
        const double* src = g + (static_cast<std::size_t>(o) * (ea + eb) + ea) * inner;
        double* dst = bi->grad.data() + static_cast<std::size_t>(o) * eb * inner;
        for (int i = 0; i < eb * inner; ++i) dst[i] += src[i];
      }
    }
  });
  return out;
}

Tensor slice(const Tensor& v, int start, int len) {
  if (v.rank() != 1 || start < 0 || len <= 0 || start + len > v.dim(0))
    throw std::invalid_argument("slice out of range: start " + std::to_string(start) +
                                " len " + std::to_string(len) + " of " + shape_str(v.shape()));
  Tensor out = Tensor::zeros({len});
  std::memcpy(out.data(), v.data() + start, sizeof(double) * len);
  auto vi = v.impl(), oi = out.impl();
  record_if_needed(out, tracked(v), [vi, oi, start, len] {
    vi->ensure_grad();
    for (int i = 0; i < len; ++i) vi->grad[start + i] += oi->grad[i];
  });
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  int n = 1;
  for (int d : shape) n *= d;
  if (n != x.size())
    throw std::invalid_argument("reshape " + shape_str(x.shape()) + " to " +
                                shape_str(shape) + " changes element count");
  Tensor out = Tensor::zeros(shape);
  std::memcpy(out.data(), x.data(), sizeof(double) * n);
  auto xi = x.impl(), oi = out.impl();
  record_if_needed(out, tracked(x), [xi, oi, n] {
    xi->ensure_grad();
    for (int i = 0; i < n; ++i) xi->grad[i] += oi->grad[i];
  });
  return out;
}

Tensor embedding_lookup(const Tensor& table, int index) {
  if (table.rank() != 2)
    throw std::invalid_argument("embedding_lookup expects a 2-D table, got " +
                                shape_str(table.shape()));
  int v = table.dim(0), d = table.dim(1);
  if (index < 0 || index >= v)
    throw std::out_of_range("embedding index " + std::to_string(index) +
                            " out of range for table of " + std::to_string(v) + " rows");
  Tensor out = Tensor::zeros({d});
  std::memcpy(out.data(), table.data() + static_cast<std::size_t>(index) * d,
              sizeof(double) * d);
  auto ti = table.impl(), oi = out.impl();
  record_if_needed(out, tracked(table), [ti, oi, index, d] {
    ti->ensure_grad();
    double* row = ti->grad.data() + static_cast<std::size_t>(index) * d;
    for (int i = 0; i < d; ++i) row[i] += oi->grad[i];
  });
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  int n = x.size();
  for (int i = 0; i < n; ++i) acc += x[i];
  Tensor out = Tensor::scalar(acc);
  auto xi = x.impl(), oi = out.impl();
  record_if_needed(out, tracked(x), [xi, oi, n] {
    xi->ensure_grad();
    double g = oi->grad[0];
    for (int i = 0; i < n; ++i) xi->grad[i] += g;
  });
  return out;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / x.size()); }

Tensor cross_entropy(const Tensor& logits, int target) {
  if (logits.rank() != 1)
    throw std::invalid_argument("cross_entropy expects 1-D logits, got " +
                                shape_str(logits.shape()));
  int n = logits.size();
  if (target < 0 || target >= n)
    throw std::out_of_range("cross_entropy target " + std::to_string(target) +
                            " out of range for " + std::to_string(n) + " classes");
  double mx = logits[0];
  for (int i = 1; i < n; ++i) mx = std::max(mx, logits[i]);
  double z = 0.0;
  for (int i = 0; i < n; ++i) z += std::exp(logits[i] - mx);
  double loss = mx + std::log(z) - logits[target];
  Tensor out = Tensor::scalar(loss);
  auto li = logits.impl(), oi = out.impl();
  record_if_needed(out, tracked(logits), [li, oi, n, target, mx, z] {
    li->ensure_grad();
    double g = oi->grad[0];
    for (int i = 0; i < n; ++i) {
      double p = std::exp(li->data[i] - mx) / z;
      li->grad[i] += g * (p - (i == target ? 1.0 : 0.0));
    }
  });
  return out;
}

Tensor spatial_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                    double eps) {
  if (x.rank() != 3 || gain.rank() != 1 || bias.rank() != 1 ||
      gain.dim(0) != x.dim(0) || bias.dim(0) != x.dim(0))
    throw std::invalid_argument("spatial_norm shape mismatch: " + shape_str(x.shape()) +
                                " gain " + shape_str(gain.shape()) + " bias " +
                                shape_str(bias.shape()));
  int c = x.dim(0), spatial = x.dim(1) * x.dim(2);
  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> mu(c), inv_sd(c);
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x.data() + static_cast<std::size_t>(ch) * spatial;
    double m = 0.0;
    for (int i = 0; i < spatial; ++i) m += src[i];
    m /= spatial;
    double var = 0.0;
    for (int i = 0; i < spatial; ++i) { double d = src[i] - m; var += d * d; }
    var /= spatial;
    mu[ch] = m;
    inv_sd[ch] = 1.0 / std::sqrt(var + eps);
    double* dst = out.data() + static_cast<std::size_t>(ch) * spatial;
    double g = gain[ch], b = bias[ch];
    for (int i = 0; i < spatial; ++i) dst[i] = g * (src[i] - m) * inv_sd[ch] + b;
  }
  auto xi = x.impl(), gi = gain.impl(), bi = bias.impl(), oi = out.impl();
  record_if_needed(out, tracked(x) || tracked(gain) || tracked(bias),
                   [xi, gi, bi, oi, c, spatial, mu, inv_sd] {
    const double* g = oi->grad.data();
    for (int ch = 0; ch < c; ++ch) {
      const double* src = xi->data.data() + static_cast<std::size_t>(ch) * spatial;
      const double* gc = g + static_cast<std::size_t>(ch) * spatial;
      double gain_v = gi->data[ch];
      // xhat and the two reductions used by every input gradient
      double sum_g = 0.0, sum_gx = 0.0;
      for (int i = 0; i < spatial; ++i) {
        double xh = (src[i] - mu[ch]) * inv_sd[ch];
        sum_g += gc[i];
        sum_gx += gc[i] * xh;
      }
      if (gi->requires_grad) { gi->ensure_grad(); gi->grad[ch] += sum_gx; }
      if (bi->requires_grad) { bi->ensure_grad(); bi->grad[ch] += sum_g; }
      if (xi->requires_grad) {
        xi->ensure_grad();
        double* xg = xi->grad.data() + static_cast<std::size_t>(ch) * spatial;
        double inv_n = 1.0 / spatial;
        for (int i = 0; i < spatial; ++i) {
          double xh = (src[i] - mu[ch]) * inv_sd[ch];
          xg[i] += gain_v * inv_sd[ch] * (gc[i] - inv_n * sum_g - xh * inv_n * sum_gx);
        }
      }
    }
  });
  return out;
}

Tensor grid_sample(const Tensor& map, const Tensor& points) {
  if (map.rank() != 3 || points.rank() != 2 || points.dim(1) != 2)
    throw std::invalid_argument("grid_sample expects map [C,H,W] and points [N,2], got " +
                                shape_str(map.shape()) + " and " + shape_str(points.shape()));
  int c = map.dim(0), h = map.dim(1), w = map.dim(2), n = points.dim(0);
  Tensor out = Tensor::zeros({c, n});

  struct Corner { int x0, y0; double tx, ty; double dpx_dx, dpy_dy; };
  std::vector<Corner> corners(n);
  for (int p = 0; p < n; ++p) {
    double x = points[2 * p], y = points[2 * p + 1];
    bool x_in = x > -1.0 && x < 1.0, y_in = y > -1.0 && y < 1.0;
    double xc = std::min(1.0, std::max(-1.0, x));
    double yc = std::min(1.0, std::max(-1.0, y));
    double px = (xc + 1.0) * 0.5 * (w - 1);
    double py = (yc + 1.0) * 0.5 * (h - 1);
    int x0 = w > 1 ? std::min(static_cast<int>(std::floor(px)), w - 2) : 0;
    int y0 = h > 1 ? std::min(static_cast<int>(std::floor(py)), h - 2) : 0;
    Corner co;
    co.x0 = x0; co.y0 = y0;
    co.tx = w > 1 ? px - x0 : 0.0;
    co.ty = h > 1 ? py - y0 : 0.0;
    co.dpx_dx = (x_in && w > 1) ? 0.5 * (w - 1) : 0.0;
    co.dpy_dy = (y_in && h > 1) ? 0.5 * (h - 1) : 0.0;
    corners[p] = co;
    int x1 = w > 1 ? x0 + 1 : 0, y1 = h > 1 ? y0 + 1 : 0;
    double w00 = (1.0 - co.tx) * (1.0 - co.ty), w01 = co.tx * (1.0 - co.ty);
    double w10 = (1.0 - co.tx) * co.ty, w11 = co.tx * co.ty;
    for (int ch = 0; ch < c; ++ch) {
      const double* plane = map.data() + static_cast<std::size_t>(ch) * h * w;
      out.data()[static_cast<std::size_t>(ch) * n + p] =
          w00 * plane[y0 * w + x0] + w01 * plane[y0 * w + x1] +
          w10 * plane[y1 * w + x0] + w11 * plane[y1 * w + x1];
    }
  }
  auto mi = map.impl(), pi = points.impl(), oi = out.impl();
  record_if_needed(out, tracked(map) || tracked(points),
                   [mi, pi, oi, corners, c, h, w, n] {
    const double* g = oi->grad.data();
    for (int p = 0; p < n; ++p) {
      const Corner& co = corners[p];
      int x1 = w > 1 ? co.x0 + 1 : 0, y1 = h > 1 ? co.y0 + 1 : 0;
      double w00 = (1.0 - co.tx) * (1.0 - co.ty), w01 = co.tx * (1.0 - co.ty);
      double w10 = (1.0 - co.tx) * co.ty, w11 = co.tx * co.ty;
      double dx_acc = 0.0, dy_acc = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        double go = g[static_cast<std::size_t>(ch) * n + p];
        if (go == 0.0 && !pi->requires_grad) continue;
        const double* plane = mi->data.data() + static_cast<std::size_t>(ch) * h * w;
        double v00 = plane[co.y0 * w + co.x0], v01 = plane[co.y0 * w + x1];
        double v10 = plane[y1 * w + co.x0], v11 = plane[y1 * w + x1];
        if (mi->requires_grad) {
          mi->ensure_grad();
          double* gplane = mi->grad.data() + static_cast<std::size_t>(ch) * h * w;
          gplane[co.y0 * w + co.x0] += go * w00;
          gplane[co.y0 * w + x1] += go * w01;
          gplane[y1 * w + co.x0] += go * w10;
          gplane[y1 * w + x1] += go * w11;
        }
        // d value / d tx and / d ty
        double dv_dtx = (1.0 - co.ty) * (v01 - v00) + co.ty * (v11 - v10);
        double dv_dty = (1.0 - co.tx) * (v10 - v00) + co.tx * (v11 - v01);
        dx_acc += go * dv_dtx;
        dy_acc += go * dv_dty;
      }
      if (pi->requires_grad) {
        pi->ensure_grad();
        pi->grad[2 * p] += dx_acc * co.dpx_dx;
        pi->grad[2 * p + 1] += dy_acc * co.dpy_dy;
      }
    }
  });
  return out;
}

Tensor bilinear_sample(const Tensor& map, const Tensor& point) {
  if (point.rank() != 1 || point.dim(0) != 2)
    throw std::invalid_argument("bilinear_sample expects a point of shape [2], got " +
                                shape_str(point.shape()));
  Tensor pts = reshape(point, {1, 2});
  Tensor s = grid_sample(map, pts);  // [C,1]
  return reshape(s, {map.dim(0)});
}

// ---- optimizer -------------------------------------------------------------

AdadeltaState AdadeltaState::like(const Tensor& param, double rho, double eps) {
  AdadeltaState st;
  st.eg2.assign(param.size(), 0.0);
  st.ex2.assign(param.size(), 0.0);
  st.rho = rho;
  st.eps = eps;
  return st;
}

void adadelta_step(Tensor& param, AdadeltaState& state, double lr) {
  if (!param.has_grad())
    throw std::logic_error("adadelta_step on a parameter with no gradient");
  if (static_cast<int>(state.eg2.size()) != param.size())
    throw std::invalid_argument("adadelta state size mismatch");
  int n = param.size();
  const double* g = param.grad();
  double rho = state.rho, eps = state.eps;
  for (int i = 0; i < n; ++i) {
    double gi = g[i];
    state.eg2[i] = rho * state.eg2[i] + (1.0 - rho) * gi * gi;
    double dx = -std::sqrt(state.ex2[i] + eps) / std::sqrt(state.eg2[i] + eps) * gi;
    state.ex2[i] = rho * state.ex2[i] + (1.0 - rho) * dx * dx;
    param[i] += lr * dx;
  }
}

// ---- checkpoint ------------------------------------------------------------

namespace {

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>((v >> 8) & 0xff),
                        static_cast<unsigned char>((v >> 16) & 0xff),
                        static_cast<unsigned char>((v >> 24) & 0xff)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  if (!is) throw std::runtime_error("checkpoint truncated");
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

void put_f64_le(std::ostream& os, const double* v, std::size_t n) {
  // assumes little-endian host (checked at load/save)
  os.write(reinterpret_cast<const char*>(v), static_cast<std::streamsize>(n * 8));
}

bool host_is_little_endian() {
  std::uint32_t x = 1;
  return *reinterpret_cast<unsigned char*>(&x) == 1;
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& params) {
  if (!host_is_little_endian())
    throw std::runtime_error("checkpoint format requires a little-endian host");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  os.write("SPDN1", 5);
  for (const auto& [name, t] : params) {
    put_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(os, static_cast<std::uint32_t>(t.shape().size()));
    for (int d : t.shape()) put_u32(os, static_cast<std::uint32_t>(d));
    put_f64_le(os, t.data(), static_cast<std::size_t>(t.size()));
  }
  if (!os) throw std::runtime_error("checkpoint write failed: " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  if (!host_is_little_endian())
    throw std::runtime_error("checkpoint format requires a little-endian host");
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[5];
  is.read(magic, 5);
  if (!is || std::string(magic, 5) != "SPDN1")
    throw std::runtime_error("bad checkpoint magic in " + path);
  NamedTensors out;
  while (true) {
    is.peek();
    if (is.eof()) break;
    std::uint32_t name_len = get_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    std::uint32_t rank = get_u32(is);
    Shape shape(rank);
    std::size_t n = 1;
    for (std::uint32_t i = 0; i < rank; ++i) {
      shape[i] = static_cast<int>(get_u32(is));
      n *= static_cast<std::size_t>(shape[i]);
    }
    std::vector<double> data(n);
    is.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 8));
    if (!is) throw std::runtime_error("checkpoint truncated in entry " + name);
    out.emplace_back(name, Tensor::from(shape, std::move(data)));
  }
  return out;
}

// ---- rng -------------------------------------------------------------------

std::uint64_t Rng::next_u64() {
  // splitmix64
  std::uint64_t z = (s_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double a, double b) { return a + (b - a) * uniform(); }

double Rng::gaussian() {
  if (have_spare_) { have_spare_ = false; return spare_; }
  double u1, u2;
  do { u1 = uniform(); } while (u1 <= 0.0);
  u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double a = 6.283185307179586476925286766559 * u2;
  spare_ = r * std::sin(a);
  have_spare_ = true;
  return r * std::cos(a);
}

int Rng::uniform_int(int lo, int hi) {
  if (hi < lo) throw std::invalid_argument("uniform_int empty range");
  std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

Rng Rng::fork(std::uint64_t stream) const {
  Rng r(s_ ^ (0xa0761d6478bd642fULL * (stream + 1)));
  r.next_u64();
  return r;
}

Tensor randn_tensor(Shape shape, double stddev, Rng& rng, bool requires_grad) {
  Tensor t = Tensor::zeros(std::move(shape), requires_grad);
  for (int i = 0; i < t.size(); ++i) t[i] = stddev * rng.gaussian();
  return t;
}

}  // namespace spdn
