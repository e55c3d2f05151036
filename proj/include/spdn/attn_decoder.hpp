#pragma once

// Attention baseline decoder: per step it scores every feature-map position,
// softmaxes to a weight map, and feeds the weighted-sum context into an LSTM
// plus symbol classifier. Positions are handled flattened, so 2-D maps need
// no separate pathway.

#include <string>
#include <vector>

#include "spdn/decode.hpp"
#include "spdn/rnn.hpp"
#include "spdn/tensor.hpp"

namespace spdn {

struct AttnConfig {
  int C = 256;    // feature channels
  int d_s = 256;  // LSTM hidden size
  int d_a = 256;  // attention hidden size
  int d_e = 64;   // symbol embedding size
  int V = 0;      // symbol classes, end-of-sequence included
  int T_max = 25;
};

struct AttentionMap {
  Tensor scores;   // [N]
  Tensor weights;  // [N], softmax of scores
};

struct DecoderState {
  Tensor h;  // [d_s]
  Tensor c;  // [d_s]
};

struct PeakednessStep {
  int t = 0;
  double max_w = 0.0;
  double entropy = 0.0;  // nats
  int support = 0;       // weights >= 1% of the max
};

struct PeakednessReport {
  std::vector<PeakednessStep> per_step;
  double median_max_w = 0.0;
  double mean_entropy = 0.0;
  double p90_support = 0.0;

  std::string to_json() const;
};

PeakednessStep peakedness_step(int t, const Tensor& weights);
PeakednessReport build_peakedness_report(const std::vector<PeakednessStep>& steps);

struct AttnDecoder {
  AttnConfig cfg;
  Tensor w_s;    // [d_a, d_s]
  Tensor w_h;    // [d_a, C]
  Tensor b_att;  // [d_a]
  Tensor w_e;    // [d_a] scoring vector
  Tensor emb;    // [V, d_e]
  LSTMCell lstm;        // input C + d_e, hidden d_s
  Linear classifier;    // d_s -> V

  static AttnDecoder init(const AttnConfig& cfg, Rng& rng);

  DecoderState initial_state() const;
  // fmat is the flattened feature map [C, N]
  AttentionMap attend(const DecoderState& st, const Tensor& fmat) const;
  Tensor context(const AttentionMap& a, const Tensor& fmat) const;
  std::pair<Tensor, DecoderState> decode_step(const DecoderState& st,
                                              const Tensor& ctx,
                                              int prev_symbol) const;
  // features [C,H,W]; labels used in teacher_forced mode only
  DecodeResult decode_sequence(const Tensor& features, int t_max, DecodeMode mode,
                               const std::vector<int>& labels = {},
                               ReadLog* log = nullptr) const;

  void collect(const std::string& prefix, NamedTensors& out) const;
};

}  // namespace spdn
