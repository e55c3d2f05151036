#include "spdn/bench.hpp"

#include <algorithm>
#include <chrono>
#include <stdexcept>

#include <json.hpp>

namespace spdn {

namespace {

void check_dims(const BenchDims& d) {
  if (d.C < 1 || d.Hp < 1 || d.Wp < 1 || d.d_s < 1 || d.d_a < 1 || d.d_p < 1 ||
      d.d_e < 1 || d.V < 2 || d.k < 1 || d.T < 1)
    throw std::invalid_argument("benchmark dims must be positive");
}

double lstm_flops(int in, int hidden) {
  // z = W_x x + W_h h + b, then 4 gate nonlinearities and the cell update
  return 8.0 * hidden * (in + hidden) + 4.0 * hidden  // matvecs + bias
         + 16.0 * hidden                              // gate nonlinearities
         + 3.0 * hidden                               // c = f*c + i*g
         + 5.0 * hidden;                              // h = o * tanh(c)
}

double classifier_flops(int hidden, int v) { return 2.0 * hidden * v + v; }

double sum_terms(const std::map<std::string, double>& t) {
  double s = 0;
  for (const auto& [k, v] : t) s += v;
  return s;
}

}  // namespace

FlopsSide flops_model_attention(const BenchDims& d) {
  check_dims(d);
  double hw = static_cast<double>(d.Hp) * d.Wp;
  FlopsSide f;
  f.formula_terms["score"] = hw * (2.0 * d.C * d.d_a + 2.0 * d.d_s * d.d_a + 3.0 * d.d_a);
  f.formula_terms["softmax"] = 5.0 * hw;
  f.formula_terms["context"] = 2.0 * hw * d.C;
  f.per_step_context = f.formula_terms["score"] + f.formula_terms["softmax"] +
                       f.formula_terms["context"];
  f.formula_terms["lstm"] = lstm_flops(d.C + d.d_e, d.d_s);
  f.formula_terms["classifier"] = classifier_flops(d.d_s, d.V);
  f.per_step = sum_terms(f.formula_terms);
  f.per_seq = f.per_step * d.T;
  return f;
}

FlopsSide flops_model_single_point(const BenchDims& d) {
  check_dims(d);
  FlopsSide f;
  int in = d.C * d.k + d.d_p;
  int out = 2 * d.k;
  f.formula_terms["pau_l1"] = 2.0 * in * 128 + 128 + 4.0 * 128;
  f.formula_terms["pau_l2"] = 2.0 * 128 * 64 + 64 + 4.0 * 64;
  f.formula_terms["pau_l3"] = 2.0 * 64 * out + out;
  f.formula_terms["offset_cap"] = 5.0 * out;   // tanh then scale
  f.formula_terms["point_update"] = 2.0 * out; // add then clamp
  f.formula_terms["bilinear"] = 4.0 * d.k * d.C * 3.0;
  f.formula_terms["fuse"] = d.k > 1 ? 2.0 * d.C * (d.C * d.k) : 0.0;
  f.per_step_context = sum_terms(f.formula_terms);
  f.formula_terms["lstm"] = lstm_flops(d.C + d.d_e, d.d_s);
  f.formula_terms["classifier"] = classifier_flops(d.d_s, d.V);
  f.per_step = sum_terms(f.formula_terms);
  f.per_seq = f.per_step * d.T;
  return f;
}

namespace {

double clock_resolution_ms() {
  using clk = std::chrono::steady_clock;
  double best = 1e9;
  for (int i = 0; i < 50; ++i) {
    auto a = clk::now();
    auto b = clk::now();
    while (b == a) b = clk::now();
    double d = std::chrono::duration<double, std::milli>(b - a).count();
    best = std::min(best, d);
  }
  return best;
}

Measured stats_from(std::vector<double> per_rep_ms) {
  Measured m;
  m.reps = static_cast<int>(per_rep_ms.size());
  std::sort(per_rep_ms.begin(), per_rep_ms.end());
  auto q = [&](double p) {
    double pos = p * (per_rep_ms.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, per_rep_ms.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return per_rep_ms[lo] * (1.0 - frac) + per_rep_ms[hi] * frac;
  };
  m.median_ms = q(0.5);
  m.p10_ms = q(0.1);
  m.p90_ms = q(0.9);
  m.timer_warning = clock_resolution_ms() > 0.01 * m.median_ms;
  return m;
}

}  // namespace

Measured measure_decode(const Model& model, const std::vector<Tensor>& features,
                        int t_max, int reps, int warmup) {
  if (features.empty()) throw std::invalid_argument("no feature maps to time");
  if (reps < 100) throw std::invalid_argument("need >= 100 repetitions");
  using clk = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i)
    for (const auto& f : features)
      model.decode(f, t_max, DecodeMode::greedy);
  std::vector<double> per_rep;
  per_rep.reserve(reps);
  for (int r = 0; r < reps; ++r) {
    auto t0 = clk::now();
    for (const auto& f : features)
      model.decode(f, t_max, DecodeMode::greedy);
    double ms = std::chrono::duration<double, std::milli>(clk::now() - t0).count();
    per_rep.push_back(ms / features.size());  // per image
  }
  return stats_from(std::move(per_rep));
}

Measured measure_encode(const Model& model, const std::vector<Tensor>& images,
                        int reps, int warmup) {
  if (images.empty()) throw std::invalid_argument("no images to time");
  if (reps < 100) throw std::invalid_argument("need >= 100 repetitions");
  using clk = std::chrono::steady_clock;
  for (int i = 0; i < warmup; ++i)
    for (const auto& im : images) model.features(im);
  std::vector<double> per_rep;
  per_rep.reserve(reps);
  for (int r = 0; r < reps; ++r) {
    auto t0 = clk::now();
    for (const auto& im : images) model.features(im);
    double ms = std::chrono::duration<double, std::milli>(clk::now() - t0).count();
    per_rep.push_back(ms / images.size());
  }
  return stats_from(std::move(per_rep));
}

int max_reads_per_step(const ReadLog& log) {
  std::size_t mx = 0;
  for (const auto& s : log.steps) mx = std::max(mx, s.size());
  return static_cast<int>(mx);
}

std::string bench_report_json(
    const BenchDims& dims, const std::map<std::string, FlopsSide>& analytic,
    const std::map<std::string, Measured>& measured) {
  nlohmann::json j;
  j["flop_convention"] = "mul1_add1_nl4";
  j["dims"] = {{"C", dims.C},   {"Hp", dims.Hp},   {"Wp", dims.Wp},
               {"d_s", dims.d_s}, {"d_a", dims.d_a}, {"d_p", dims.d_p},
               {"d_e", dims.d_e}, {"V", dims.V},     {"k", dims.k},
               {"T", dims.T}};
  for (const auto& [name, f] : analytic) {
    nlohmann::json a;
    a["per_step"] = f.per_step;
    a["per_step_context"] = f.per_step_context;
    a["per_seq"] = f.per_seq;
    for (const auto& [t, v] : f.formula_terms) a["formula_terms"][t] = v;
    j["analytic"][name] = a;
  }
  for (const auto& [name, m] : measured) {
    j["measured"][name] = {{"median_ms", m.median_ms}, {"p10_ms", m.p10_ms},
                           {"p90_ms", m.p90_ms},       {"reps", m.reps},
                           {"timer_warning", m.timer_warning}};
  }
  return j.dump(2);
}

}  // namespace spdn
