#pragma once

// LSTM cell, linear layer and symbol classifier shared by both decoders.

#include <utility>

#include "spdn/tensor.hpp"

namespace spdn {

struct Linear {
  Tensor w;  // [out, in]
  Tensor b;  // [out]

  static Linear init(int in, int out, Rng& rng);
  static Linear zero_init(int in, int out);  // weights and bias all zero
  Tensor apply(const Tensor& x) const { return add(matvec(w, x), b); }
  void collect(const std::string& prefix, NamedTensors& out) const;
};

struct LSTMCell {
  int input_size = 0;
  int hidden_size = 0;
  Tensor w_x;  // [4h, in], gate order i,f,g,o
  Tensor w_h;  // [4h, h]
  Tensor b;    // [4h]

  static LSTMCell init(int input, int hidden, Rng& rng);
  // (h, c) -> (h', c')
  std::pair<Tensor, Tensor> step(const Tensor& h, const Tensor& c,
                                 const Tensor& x) const;
  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Copies checkpoint values into a collected parameter list by name.
// Throws if a name is missing or a shape differs.
void restore_params(NamedTensors& params, const NamedTensors& checkpoint);

}  // namespace spdn
