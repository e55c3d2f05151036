#pragma once

// Analytic FLOPs model and wall-clock micro-benchmark contrasting attention
// decoding with single-point decoding. Convention: multiply = 1, add = 1,
// nonlinearity = 4 per element ("mul1_add1_nl4").

#include <map>
#include <string>
#include <vector>

#include "spdn/training.hpp"

namespace spdn {

struct BenchDims {
  int C = 256;
  int Hp = 4;   // feature-map height H'
  int Wp = 16;  // feature-map width W'
  int d_s = 256;
  int d_a = 256;
  int d_p = 64;
  int d_e = 64;
  int V = 37;
  int k = 1;
  int T = 25;
};

struct FlopsSide {
  // context acquisition only: attention score+softmax+weighted sum, or the
  // offset head + bilinear gather; excludes the shared LSTM/classifier
  double per_step_context = 0;
  double per_step = 0;  // full decoder step
  double per_seq = 0;   // per_step * T
  std::map<std::string, double> formula_terms;
};

FlopsSide flops_model_attention(const BenchDims& d);
FlopsSide flops_model_single_point(const BenchDims& d);  // serial strategy

struct Measured {
  double median_ms = 0;
  double p10_ms = 0;
  double p90_ms = 0;
  int reps = 0;
  bool timer_warning = false;  // clock resolution coarser than 1% of median
};

// Times greedy decoding only (features precomputed); single-threaded,
// `warmup` runs discarded, statistics over `reps` repetitions.
Measured measure_decode(const Model& model, const std::vector<Tensor>& features,
                        int t_max, int reps, int warmup = 10);

// Times the shared rectify+encode path, same protocol.
Measured measure_encode(const Model& model, const std::vector<Tensor>& images,
                        int reps, int warmup = 10);

// Largest per-step count of distinct feature-map cells read during a decode.
int max_reads_per_step(const ReadLog& log);

std::string bench_report_json(
    const BenchDims& dims, const std::map<std::string, FlopsSide>& analytic,
    const std::map<std::string, Measured>& measured);

}  // namespace spdn
