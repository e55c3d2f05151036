#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <set>

#include "gradcheck.hpp"
#include "spdn/tensor.hpp"

using namespace spdn;
using spdn_test::finite_diff_check;

namespace {

Tensor random_tensor(Shape s, Rng& rng, bool rg = true) {
  return randn_tensor(std::move(s), 1.0, rng, rg);
}

}  // namespace

TEST_CASE("matmul identity and selector") {
  Tensor i2 = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor a = Tensor::from({2, 2}, {1, 2, 3, 4});
  Tensor r = matmul(i2, a);
  for (int i = 0; i < 4; ++i) CHECK(r[i] == a[i]);

  Tensor sel = Tensor::from({2, 2}, {1, 0, 0, 0});
  Tensor v = Tensor::from({2, 1}, {5, 7});
  Tensor s = matmul(sel, v);
  CHECK(s[0] == 5.0);
  CHECK(s[1] == 0.0);
}

TEST_CASE("matmul matches triple-loop oracle") {
  Rng rng(42);
  Tensor a = random_tensor({3, 4}, rng, false);
  Tensor b = random_tensor({4, 2}, rng, false);
  Tensor c = matmul(a, b);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 2; ++j) {
      double acc = 0.0;
      for (int p = 0; p < 4; ++p) acc += a[i * 4 + p] * b[p * 2 + j];
      CHECK(std::abs(c[i * 2 + j] - acc) < 1e-12);
    }
}

TEST_CASE("matmul shape mismatch names both shapes") {
  Tensor a = Tensor::zeros({2, 3});
  Tensor b = Tensor::zeros({2, 2});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2,3]"), std::invalid_argument);
}

TEST_CASE("matmul gradients vs finite differences") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(100 + seed);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto fwd = [&] { return sum(mul(matmul(a, b), matmul(a, b))).value(); };
    {
      Tape tape;
      Tensor m = matmul(a, b);
      backward(sum(mul(m, m)));
    }
    auto ra = finite_diff_check(fwd, a, a.grad_vec());
    auto rb = finite_diff_check(fwd, b, b.grad_vec());
    CHECK(ra.max_rel_err < 1e-4);
    CHECK(rb.max_rel_err < 1e-4);
    a.zero_grad();
    b.zero_grad();
  }
}

TEST_CASE("conv2d identity kernel") {
  Rng rng(7);
  Tensor x = random_tensor({1, 3, 3}, rng, false);
  Tensor k = Tensor::from({1, 1, 1, 1}, {1.0});
  Tensor y = conv2d(x, k, 1, 0);
  for (int i = 0; i < 9; ++i) CHECK(y[i] == x[i]);
}

TEST_CASE("conv2d counting overlap with ones") {
  Tensor x = Tensor::full({1, 3, 3}, 1.0);
  Tensor k = Tensor::full({1, 1, 3, 3}, 1.0);
  Tensor y = conv2d(x, k, 1, 1);
  CHECK(y[4] == 9.0);   // center
  CHECK(y[0] == 4.0);   // corner
  CHECK(y[8] == 4.0);
}

TEST_CASE("conv2d matches direct six-loop oracle") {
  Rng rng(11);
  int hw = 9;  // stride-2 3x3 needs (H + 2p - 3) even for an exact output extent
  Tensor x = random_tensor({2, hw, hw}, rng, false);
  Tensor k = random_tensor({4, 2, 3, 3}, rng, false);
  int stride = 2, pad = 1;
  Tensor y = conv2d(x, k, stride, pad);
  int oh = (hw + 2 * pad - 3) / stride + 1, ow = oh;
  REQUIRE(y.shape() == Shape{4, oh, ow});
  for (int co = 0; co < 4; ++co)
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (int ci = 0; ci < 2; ++ci)
          for (int ky = 0; ky < 3; ++ky)
            for (int kx = 0; kx < 3; ++kx) {
              int iy = oy * stride - pad + ky, ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= hw || ix < 0 || ix >= hw) continue;
              acc += x[(ci * hw + iy) * hw + ix] * k[((co * 2 + ci) * 3 + ky) * 3 + kx];
            }
        CHECK(std::abs(y[(co * oh + oy) * ow + ox] - acc) < 1e-12);
      }
}

TEST_CASE("conv2d rejects non-integer output extent") {
  Tensor x = Tensor::zeros({1, 6, 6});
  Tensor k = Tensor::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, k, 2, 0), std::invalid_argument);
}

TEST_CASE("conv2d gradients vs finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(200 + seed);
    Tensor x = random_tensor({2, 5, 5}, rng);
    Tensor k = random_tensor({3, 2, 3, 3}, rng);
    auto fwd = [&] {
      Tensor y = conv2d(x, k, 2, 1);
      return sum(mul(y, y)).value();
    };
    {
      Tape tape;
      Tensor y = conv2d(x, k, 2, 1);
      backward(sum(mul(y, y)));
    }
    CHECK(finite_diff_check(fwd, x, x.grad_vec()).max_rel_err < 1e-4);
    CHECK(finite_diff_check(fwd, k, k.grad_vec()).max_rel_err < 1e-4);
    x.zero_grad();
    k.zero_grad();
  }
}

TEST_CASE("softmax analytic cases") {
  Tensor u = softmax(Tensor::from({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(std::abs(u[i] - 1.0 / 3.0) < 1e-15);
  Tensor t = softmax(Tensor::from({2}, {0.0, std::log(2.0)}));
  CHECK(std::abs(t[0] - 1.0 / 3.0) < 1e-15);
  CHECK(std::abs(t[1] - 2.0 / 3.0) < 1e-15);
}

TEST_CASE("softmax matches exp/sum oracle, sums to one, shift invariant") {
  Rng rng(5);
  Tensor x = random_tensor({7}, rng, false);
  Tensor y = softmax(x);
  double z = 0.0;
  for (int i = 0; i < 7; ++i) z += std::exp(x[i]);
  double total = 0.0;
  for (int i = 0; i < 7; ++i) {
    CHECK(std::abs(y[i] - std::exp(x[i]) / z) < 1e-12);
    total += y[i];
  }
  CHECK(std::abs(total - 1.0) < 1e-12);

  // shift invariance: bitwise when the shifted logits are exact in float64
  Tensor ints = Tensor::from({4}, {0, 1, 2, 3});
  Tensor ints_shifted = Tensor::from({4}, {4, 5, 6, 7});
  Tensor a = softmax(ints), b = softmax(ints_shifted);
  for (int i = 0; i < 4; ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("softmax rejects empty input") {
  Tensor e = Tensor::zeros({0});
  CHECK_THROWS_AS(softmax(e), std::invalid_argument);
}

TEST_CASE("softmax gradient vs finite differences") {
  Rng rng(6);
  Tensor x = random_tensor({5}, rng);
  Tensor w = random_tensor({5}, rng, false);
  auto fwd = [&] { return sum(mul(softmax(x), w)).value(); };
  {
    Tape tape;
    backward(sum(mul(softmax(x), w)));
  }
  CHECK(finite_diff_check(fwd, x, x.grad_vec()).max_rel_err < 1e-4);
}

TEST_CASE("elementwise analytic values") {
  CHECK(vtanh(Tensor::scalar(0.0)).value() == 0.0);
  CHECK(vsigmoid(Tensor::scalar(0.0)).value() == 0.5);
  CHECK(vrelu(Tensor::scalar(-2.0)).value() == 0.0);
  CHECK(vabs(Tensor::scalar(-2.5)).value() == 2.5);
}

TEST_CASE("tanh gradient equals 1 - tanh^2") {
  Rng rng(8);
  Tensor x = random_tensor({6}, rng);
  {
    Tape tape;
    backward(sum(vtanh(x)));
  }
  for (int i = 0; i < 6; ++i) {
    double t = std::tanh(x[i]);
    CHECK(std::abs(x.grad_vec()[i] - (1.0 - t * t)) < 1e-12);
  }
}

TEST_CASE("elementwise binary shape mismatch") {
  CHECK_THROWS_AS(add(Tensor::zeros({2}), Tensor::zeros({3})), std::invalid_argument);
  CHECK_THROWS_AS(mul(Tensor::zeros({2, 2}), Tensor::zeros({4})), std::invalid_argument);
}

TEST_CASE("concat basics and gradient split") {
  Tensor a = Tensor::from({2}, {1, 2});
  Tensor b = Tensor::from({1}, {3});
  Tensor c = concat(a, b, 0);
  CHECK(c.shape() == Shape{3});
  CHECK(c[0] == 1.0);
  CHECK(c[2] == 3.0);

  Tensor empty = Tensor::zeros({0});
  Tensor d = concat(a, empty, 0);
  CHECK(d.shape() == Shape{2});
  CHECK(d[1] == 2.0);

  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = Tensor::from({3}, {3, 4, 5}, true);
  {
    Tape tape;
    backward(sum(concat(x, y, 0)));
  }
  for (double g : x.grad_vec()) CHECK(g == 1.0);
  for (double g : y.grad_vec()) CHECK(g == 1.0);
}

TEST_CASE("concat rejects mismatched non-concat axes") {
  CHECK_THROWS_AS(concat(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}), 0),
                  std::invalid_argument);
}

TEST_CASE("embedding lookup basics") {
  Tensor table = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1}, true);
  Tensor e2 = embedding_lookup(table, 2);
  CHECK(e2[0] == 0.0);
  CHECK(e2[2] == 1.0);

  {
    Tape tape;
    backward(sum(embedding_lookup(table, 2)));
  }
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c)
      CHECK(table.grad_vec()[r * 3 + c] == (r == 2 ? 1.0 : 0.0));

  Rng rng(9);
  Tensor rt = random_tensor({5, 4}, rng, false);
  for (int idx = 0; idx < 5; ++idx) {
    Tensor row = embedding_lookup(rt, idx);
    for (int j = 0; j < 4; ++j) CHECK(row[j] == rt[idx * 4 + j]);
  }
  CHECK_THROWS_AS(embedding_lookup(rt, 5), std::out_of_range);
  CHECK_THROWS_AS(embedding_lookup(rt, -1), std::out_of_range);
}

TEST_CASE("bilinear sample grid nodes and center") {
  Tensor map = Tensor::from({1, 2, 2}, {1, 2, 3, 4});
  CHECK(bilinear_sample(map, Tensor::from({2}, {-1, -1})).value() == 1.0);
  CHECK(bilinear_sample(map, Tensor::from({2}, {1, -1})).value() == 2.0);
  CHECK(bilinear_sample(map, Tensor::from({2}, {-1, 1})).value() == 3.0);
  CHECK(std::abs(bilinear_sample(map, Tensor::from({2}, {0, 0})).value() - 2.5) < 1e-15);
}

TEST_CASE("bilinear sample matches four-corner oracle and stays convex") {
  Rng rng(10);
  Tensor map = random_tensor({3, 5, 7}, rng, false);
  int h = 5, w = 7;
  for (int trial = 0; trial < 100; ++trial) {
    double x = rng.uniform(-1.2, 1.2), y = rng.uniform(-1.2, 1.2);
    Tensor v = bilinear_sample(map, Tensor::from({2}, {x, y}));
    double xc = std::min(1.0, std::max(-1.0, x));
    double yc = std::min(1.0, std::max(-1.0, y));
    double px = (xc + 1) / 2 * (w - 1), py = (yc + 1) / 2 * (h - 1);
    int x0 = std::min(static_cast<int>(std::floor(px)), w - 2);
    int y0 = std::min(static_cast<int>(std::floor(py)), h - 2);
    double tx = px - x0, ty = py - y0;
    for (int c = 0; c < 3; ++c) {
      const double* p = map.data() + c * h * w;
      double expect = (1 - tx) * (1 - ty) * p[y0 * w + x0] + tx * (1 - ty) * p[y0 * w + x0 + 1] +
                      (1 - tx) * ty * p[(y0 + 1) * w + x0] + tx * ty * p[(y0 + 1) * w + x0 + 1];
      CHECK(std::abs(v[c] - expect) < 1e-12);
      double lo = p[0], hi = p[0];
      for (int i = 0; i < h * w; ++i) { lo = std::min(lo, p[i]); hi = std::max(hi, p[i]); }
      CHECK(v[c] >= lo - 1e-12);
      CHECK(v[c] <= hi + 1e-12);
    }
  }
}

TEST_CASE("bilinear sample gradients for map and point") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    Rng rng(300 + seed);
    Tensor map = random_tensor({2, 4, 6}, rng);
    Tensor pt = Tensor::from({2}, {rng.uniform(-0.95, 0.95), rng.uniform(-0.95, 0.95)}, true);
    auto fwd = [&] {
      Tensor v = bilinear_sample(map, pt);
      return sum(mul(v, v)).value();
    };
    {
      Tape tape;
      Tensor v = bilinear_sample(map, pt);
      backward(sum(mul(v, v)));
    }
    CHECK(finite_diff_check(fwd, map, map.grad_vec()).max_rel_err < 1e-4);
    CHECK(finite_diff_check(fwd, pt, pt.grad_vec(), 1e-6).max_rel_err < 1e-4);
    map.zero_grad();
  }
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({3}, {1, 2, 3}, true);
  {
    Tape tape;
    backward(sum(x));
  }
  for (double g : x.grad_vec()) CHECK(g == 1.0);
  x.zero_grad();

  Tensor s = Tensor::scalar(3.0, true);
  {
    Tape tape;
    backward(mul(s, s));
  }
  CHECK(s.grad_vec()[0] == 6.0);  // d(x^2)/dx = 2x
}

TEST_CASE("backward usage errors") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  {
    Tape tape;
    Tensor y = scale(x, 2.0);
    CHECK_THROWS_AS(backward(y), std::invalid_argument);  // non-scalar
    Tensor l = sum(y);
    backward(l);
    CHECK_THROWS_AS(backward(l), std::logic_error);  // reused tape
  }
}

TEST_CASE("composed network gradient vs finite differences") {
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    Rng rng(400 + seed);
    Tensor w1 = random_tensor({4, 6}, rng);
    Tensor b1 = random_tensor({4}, rng);
    Tensor w2 = random_tensor({1, 4}, rng);
    Tensor x = random_tensor({6}, rng, false);
    auto fwd = [&] {
      Tensor h = vtanh(add(matvec(w1, x), b1));
      return sum(matvec(w2, h)).value();
    };
    {
      Tape tape;
      Tensor h = vtanh(add(matvec(w1, x), b1));
      backward(sum(matvec(w2, h)));
    }
    CHECK(finite_diff_check(fwd, w1, w1.grad_vec()).max_rel_err < 1e-4);
    CHECK(finite_diff_check(fwd, b1, b1.grad_vec()).max_rel_err < 1e-4);
    CHECK(finite_diff_check(fwd, w2, w2.grad_vec()).max_rel_err < 1e-4);
  }
}

TEST_CASE("spatial_norm gradient vs finite differences") {
  Rng rng(17);
  Tensor x = random_tensor({2, 3, 4}, rng);
  Tensor g = random_tensor({2}, rng);
  Tensor b = random_tensor({2}, rng);
  Tensor w = random_tensor({2, 3, 4}, rng, false);
  auto fwd = [&] { return sum(mul(spatial_norm(x, g, b), w)).value(); };
  {
    Tape tape;
    backward(sum(mul(spatial_norm(x, g, b), w)));
  }
  CHECK(finite_diff_check(fwd, x, x.grad_vec()).max_rel_err < 1e-4);
  CHECK(finite_diff_check(fwd, g, g.grad_vec()).max_rel_err < 1e-4);
  CHECK(finite_diff_check(fwd, b, b.grad_vec()).max_rel_err < 1e-4);
}

TEST_CASE("slice clamp cross_entropy gradients") {
  Rng rng(18);
  Tensor v = random_tensor({8}, rng);
  auto fwd = [&] {
    Tensor s = slice(v, 2, 4);
    Tensor c = clamp(s, -0.5, 0.5);
    return cross_entropy(c, 1).value() + sum(vabs(s)).value();
  };
  {
    Tape tape;
    Tensor s = slice(v, 2, 4);
    Tensor c = clamp(s, -0.5, 0.5);
    backward(add(cross_entropy(c, 1), sum(vabs(s))));
  }
  CHECK(finite_diff_check(fwd, v, v.grad_vec()).max_rel_err < 1e-3);
}

TEST_CASE("cross entropy analytic") {
  int v = 5;
  Tensor uniform = Tensor::zeros({v});
  CHECK(std::abs(cross_entropy(uniform, 2).value() - std::log(v)) < 1e-12);
}

TEST_CASE("adadelta zero gradient leaves parameter unchanged") {
  Tensor p = Tensor::from({3}, {1, 2, 3}, true);
  p.grad();  // allocate an all-zero gradient
  auto st = AdadeltaState::like(p);
  st.eg2 = {0.5, 0.5, 0.5};
  st.ex2 = {0.25, 0.25, 0.25};
  adadelta_step(p, st, 1.0);
  CHECK(p[0] == 1.0);
  CHECK(p[1] == 2.0);
  CHECK(p[2] == 3.0);
  CHECK(st.eg2[0] == doctest::Approx(0.45).epsilon(1e-12));  // decayed only
  CHECK(st.ex2[0] == doctest::Approx(0.225).epsilon(1e-12));
}

TEST_CASE("adadelta first step matches hand-evaluated update") {
  Tensor p = Tensor::scalar(0.0, true);
  p.grad()[0] = 1.0;
  auto st = AdadeltaState::like(p, 0.9, 1e-6);
  adadelta_step(p, st, 1.0);
  double expect = -std::sqrt(1e-6) / std::sqrt(0.1 + 1e-6);
  CHECK(std::abs(p.value() - expect) < 1e-12);
  CHECK(std::abs(p.value() - (-3.1623e-3)) < 1e-6);
}

TEST_CASE("adadelta two identical steps match scalar recurrence oracle") {
  Tensor p = Tensor::scalar(0.0, true);
  auto st = AdadeltaState::like(p, 0.9, 1e-6);
  // independent scalar recurrence
  double eg2 = 0, ex2 = 0, x = 0, g = 1.0, rho = 0.9, eps = 1e-6;
  double d1 = 0, d2 = 0;
  for (int step = 0; step < 2; ++step) {
    eg2 = rho * eg2 + (1 - rho) * g * g;
    double dx = -std::sqrt(ex2 + eps) / std::sqrt(eg2 + eps) * g;
    ex2 = rho * ex2 + (1 - rho) * dx * dx;
    x += dx;
    (step == 0 ? d1 : d2) = dx;
  }
  double prev = 0;
  p.grad()[0] = 1.0;
  adadelta_step(p, st, 1.0);
  double first = p.value() - prev;
  prev = p.value();
  adadelta_step(p, st, 1.0);
  double second = p.value() - prev;
  CHECK(std::abs(first - d1) < 1e-15);
  CHECK(std::abs(second - d2) < 1e-15);
  CHECK(std::abs(first) != std::abs(second));
}

TEST_CASE("adadelta requires a gradient") {
  Tensor p = Tensor::scalar(1.0, true);
  auto st = AdadeltaState::like(p);
  CHECK_THROWS_AS(adadelta_step(p, st, 1.0), std::logic_error);
}

TEST_CASE("checkpoint round-trips bit-exactly") {
  Rng rng(21);
  NamedTensors params;
  params.emplace_back("enc/w", random_tensor({3, 4}, rng, false));
  params.emplace_back("dec/lstm/b", random_tensor({8}, rng, false));
  params.emplace_back("p0", Tensor::from({2}, {-0.9, 0.0}));
  std::string path = "ckpt_test.spdn";
  save_checkpoint(path, params);
  auto loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    CHECK(loaded[i].first == params[i].first);
    REQUIRE(loaded[i].second.shape() == params[i].second.shape());
    for (int j = 0; j < params[i].second.size(); ++j)
      CHECK(loaded[i].second[j] == params[i].second[j]);
  }
  std::remove(path.c_str());
}

TEST_CASE("rng determinism") {
  Rng a(1234), b(1234);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c(1234), d(1234);
  for (int i = 0; i < 100; ++i) CHECK(c.gaussian() == d.gaussian());
  Rng e(1);
  Tensor t1 = randn_tensor({10}, 0.5, e);
  Rng f(1);
  Tensor t2 = randn_tensor({10}, 0.5, f);
  for (int i = 0; i < 10; ++i) CHECK(t1[i] == t2[i]);
}
