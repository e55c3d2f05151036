#include "spdn/rnn.hpp"

#include <cmath>
#include <stdexcept>

namespace spdn {

Linear Linear::init(int in, int out, Rng& rng) {
  Linear l;
  l.w = randn_tensor({out, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng);
  l.b = Tensor::zeros({out}, true);
  return l;
}

Linear Linear::zero_init(int in, int out) {
  Linear l;
  l.w = Tensor::zeros({out, in}, true);
  l.b = Tensor::zeros({out}, true);
  return l;
}

void Linear::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + "/w", w);
  out.emplace_back(prefix + "/b", b);
}

LSTMCell LSTMCell::init(int input, int hidden, Rng& rng) {
  LSTMCell cell;
  cell.input_size = input;
  cell.hidden_size = hidden;
  cell.w_x = randn_tensor({4 * hidden, input}, 1.0 / std::sqrt(static_cast<double>(input)), rng);
  cell.w_h = randn_tensor({4 * hidden, hidden}, 1.0 / std::sqrt(static_cast<double>(hidden)), rng);
  cell.b = Tensor::zeros({4 * hidden}, true);
  // forget-gate bias starts at 1 so memory persists early in training
  for (int i = hidden; i < 2 * hidden; ++i) cell.b[i] = 1.0;
  return cell;
}

std::pair<Tensor, Tensor> LSTMCell::step(const Tensor& h, const Tensor& c,
                                         const Tensor& x) const {
  if (x.dim(0) != input_size)
    throw std::invalid_argument("LSTM input size " + std::to_string(x.dim(0)) +
                                " != " + std::to_string(input_size));
  int d = hidden_size;
  Tensor z = add(add(matvec(w_x, x), matvec(w_h, h)), b);
  Tensor gi = vsigmoid(slice(z, 0, d));
  Tensor gf = vsigmoid(slice(z, d, d));
  Tensor gg = vtanh(slice(z, 2 * d, d));
  Tensor go = vsigmoid(slice(z, 3 * d, d));
  Tensor c_new = add(mul(gf, c), mul(gi, gg));
  Tensor h_new = mul(go, vtanh(c_new));
  return {h_new, c_new};
}

void LSTMCell::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + "/w_x", w_x);
  out.emplace_back(prefix + "/w_h", w_h);
  out.emplace_back(prefix + "/b", b);
}

void restore_params(NamedTensors& params, const NamedTensors& checkpoint) {
  for (auto& [name, tensor] : params) {
    const Tensor* found = nullptr;
    for (const auto& [cn, ct] : checkpoint)
      if (cn == name) { found = &ct; break; }
    if (!found) throw std::runtime_error("checkpoint is missing parameter " + name);
    if (found->shape() != tensor.shape())
      throw std::runtime_error("checkpoint shape mismatch for " + name + ": " +
                               shape_str(found->shape()) + " vs " + shape_str(tensor.shape()));
    for (int i = 0; i < tensor.size(); ++i) tensor[i] = (*found)[i];
  }
}

}  // namespace spdn
