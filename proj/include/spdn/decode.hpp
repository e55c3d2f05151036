#pragma once

// Types shared by the attention and single-point decoders.

#include <set>
#include <utility>
#include <vector>

#include "spdn/tensor.hpp"

namespace spdn {

enum class DecodeMode { greedy, teacher_forced };

// Records which feature-map cells a decode step touches (bench instrumentation).
struct ReadLog {
  std::vector<std::set<std::pair<int, int>>> steps;

  void begin_step() { steps.emplace_back(); }
  void touch(int y, int x) {
    if (!steps.empty()) steps.back().insert({y, x});
  }
  void touch_all(int h, int w) {
    if (steps.empty()) return;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) steps.back().insert({y, x});
  }
};

struct TrajectoryStep {
  Tensor points;  // [k,2] normalized coords, autodiff-connected
  Tensor anchor;  // [2] shared location anchor for the step
  int symbol = -1;
};

struct DecodeResult {
  std::vector<int> symbols;         // emitted symbol per executed step (EOS included)
  std::vector<Tensor> logits;       // per executed step
  std::vector<Tensor> attn_weights; // attention variant only, per step
  std::vector<TrajectoryStep> trajectory;  // single-point variant only

  std::vector<int> predicted_label(int eos_index) const {
    std::vector<int> out;
    for (int s : symbols) {
      if (s == eos_index) break;
      out.push_back(s);
    }
    return out;
  }
};

int argmax_lowest(const Tensor& v);  // ties break toward the lowest index

}  // namespace spdn
