#pragma once

// Single-point decoder: instead of scoring every feature position, each step
// predicts k sample coordinates and reads the map with bilinear taps only.
// Serial strategy walks the points step by step through a small offset MLP
// and feeds the sampled feature into the shared LSTM/classifier; parallel
// strategy emits every step's points up front from a pooled image summary and
// classifies each sample independently.

#include <string>
#include <vector>

#include "spdn/decode.hpp"
#include "spdn/rnn.hpp"
#include "spdn/tensor.hpp"

namespace spdn {

struct SpConfig {
  int C = 256;    // feature channels
  int d_s = 256;  // LSTM hidden size (serial)
  int d_e = 64;   // symbol embedding size (serial)
  int d_p = 64;   // position embedding size
  int V = 0;      // symbol classes, end-of-sequence included
  int k = 1;      // sample points per step
  int T_max = 25;
  double delta_max = 0.5;  // per-step offset cap, normalized units
  bool parallel = false;
};

struct SpDecoder {
  SpConfig cfg;
  Tensor pos_emb;  // [T_max, d_p]

  // offset / point head: two tanh hidden layers then a linear to 2k values
  Linear pau1, pau2, pau3;

  // serial only
  Tensor p0;  // [2] learned initial point
  Tensor emb;
  LSTMCell lstm;
  Linear classifier;  // serial: d_s -> V; parallel: C -> V

  Tensor fuse_w;  // [C, C*k], only when k > 1

  static SpDecoder init(const SpConfig& cfg, Rng& rng);

  // prev_feature [C*k] -> offsets [2k] in [-delta_max, delta_max]
  Tensor pau_offset(const Tensor& prev_feature, int step) const;
  Tensor fuse(const std::vector<Tensor>& samples) const;

  DecodeResult serial_decode(const Tensor& features, int t_max, DecodeMode mode,
                             const std::vector<int>& labels = {},
                             ReadLog* log = nullptr) const;
  // trace, when given, records "point t" / "classify t" events in order
  DecodeResult parallel_decode(const Tensor& features, int t_max,
                               DecodeMode mode = DecodeMode::greedy,
                               ReadLog* log = nullptr,
                               std::vector<std::string>* trace = nullptr) const;
  DecodeResult decode(const Tensor& features, int t_max, DecodeMode mode,
                      const std::vector<int>& labels = {},
                      ReadLog* log = nullptr) const;

  void collect(const std::string& prefix, NamedTensors& out) const;
};

// Fills log->steps.back() with the 4 map cells one bilinear tap touches.
void log_bilinear_read(ReadLog& log, int h, int w, double x, double y);

void export_trajectory(const std::vector<TrajectoryStep>& traj,
                       const Tensor& image, const std::string& json_path,
                       const std::string& ppm_path);
std::vector<TrajectoryStep> parse_trajectory(const std::string& json_path);

}  // namespace spdn
