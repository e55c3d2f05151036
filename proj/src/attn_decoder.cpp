#include "spdn/attn_decoder.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include <json.hpp>

namespace spdn {

int argmax_lowest(const Tensor& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

AttnDecoder AttnDecoder::init(const AttnConfig& cfg, Rng& rng) {
  if (cfg.V < 2) throw std::invalid_argument("attention decoder needs >= 2 classes");
  AttnDecoder d;
  d.cfg = cfg;
  d.w_s = randn_tensor({cfg.d_a, cfg.d_s}, 1.0 / std::sqrt(cfg.d_s), rng);
  d.w_h = randn_tensor({cfg.d_a, cfg.C}, 1.0 / std::sqrt(cfg.C), rng);
  d.b_att = Tensor::zeros({cfg.d_a}, true);
  d.w_e = randn_tensor({cfg.d_a}, 1.0 / std::sqrt(cfg.d_a), rng);
  d.emb = randn_tensor({cfg.V, cfg.d_e}, 1.0, rng);
  d.lstm = LSTMCell::init(cfg.C + cfg.d_e, cfg.d_s, rng);
  d.classifier = Linear::init(cfg.d_s, cfg.V, rng);
  return d;
}

DecoderState AttnDecoder::initial_state() const {
  return {Tensor::zeros({cfg.d_s}), Tensor::zeros({cfg.d_s})};
}

AttentionMap AttnDecoder::attend(const DecoderState& st, const Tensor& fmat) const {
  if (fmat.rank() != 2 || fmat.dim(0) != cfg.C)
    throw std::invalid_argument("attend expects flattened features [C,N], got " +
                                shape_str(fmat.shape()));
  Tensor query = add(matvec(w_s, st.h), b_att);      // [d_a]
  Tensor pre = add_colvec(matmul(w_h, fmat), query); // [d_a, N]
  Tensor scores = vecmat(w_e, vtanh(pre));           // [N]
  return {scores, softmax(scores)};
}

Tensor AttnDecoder::context(const AttentionMap& a, const Tensor& fmat) const {
  if (a.weights.size() != fmat.dim(1))
    throw std::invalid_argument("weight/position count mismatch");
  return matvec(fmat, a.weights);
}

std::pair<Tensor, DecoderState> AttnDecoder::decode_step(const DecoderState& st,
                                                         const Tensor& ctx,
                                                         int prev_symbol) const {
  Tensor x = concat(ctx, embedding_lookup(emb, prev_symbol), 0);
  auto [h, c] = lstm.step(st.h, st.c, x);
  return {classifier.apply(h), DecoderState{h, c}};
}

DecodeResult AttnDecoder::decode_sequence(const Tensor& features, int t_max,
                                          DecodeMode mode,
                                          const std::vector<int>& labels,
                                          ReadLog* log) const {
  if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
  if (features.rank() != 3 || features.dim(0) != cfg.C)
    throw std::invalid_argument("decode expects features [C,H,W], got " +
                                shape_str(features.shape()));
  int h = features.dim(1), w = features.dim(2);
  Tensor fmat = reshape(features, {cfg.C, h * w});

  int eos = cfg.V - 1;
  int steps = mode == DecodeMode::teacher_forced
                  ? static_cast<int>(labels.size()) + 1
                  : t_max;
  DecodeResult out;
  DecoderState st = initial_state();
  int prev = eos;  // start token
  for (int t = 0; t < steps; ++t) {
    if (log) {
      log->begin_step();
      log->touch_all(h, w);  // every position enters the weighted sum
    }
    AttentionMap a = attend(st, fmat);
    Tensor ctx = context(a, fmat);
    auto [logits, next] = decode_step(st, ctx, prev);
    int sym = argmax_lowest(logits);
    out.symbols.push_back(sym);
    out.logits.push_back(logits);
    out.attn_weights.push_back(a.weights);
    st = next;
    if (mode == DecodeMode::teacher_forced) {
      prev = t < static_cast<int>(labels.size()) ? labels[t] : eos;
    } else {
      if (sym == eos) break;
      prev = sym;
    }
  }
  return out;
}

void AttnDecoder::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + "/w_s", w_s);
  out.emplace_back(prefix + "/w_h", w_h);
  out.emplace_back(prefix + "/b_att", b_att);
  out.emplace_back(prefix + "/w_e", w_e);
  out.emplace_back(prefix + "/emb", emb);
  lstm.collect(prefix + "/lstm", out);
  classifier.collect(prefix + "/cls", out);
}

PeakednessStep peakedness_step(int t, const Tensor& weights) {
  PeakednessStep s;
  s.t = t;
  double mx = 0.0;
  for (int i = 0; i < weights.size(); ++i) mx = std::max(mx, weights[i]);
  if (!(mx > 0.0) || !std::isfinite(mx))
    throw std::runtime_error("degenerate attention weights");
  double ent = 0.0;
  int support = 0;
  for (int i = 0; i < weights.size(); ++i) {
    double p = weights[i];
    if (p > 0.0) ent -= p * std::log(p);
    if (p >= 0.01 * mx) ++support;
  }
  s.max_w = mx;
  s.entropy = std::max(ent, 0.0);
  s.support = support;
  return s;
}

PeakednessReport build_peakedness_report(const std::vector<PeakednessStep>& steps) {
  PeakednessReport r;
  r.per_step = steps;
  if (steps.empty()) return r;
  std::vector<double> maxes, supports;
  double ent_sum = 0.0;
  for (const auto& s : steps) {
    maxes.push_back(s.max_w);
    supports.push_back(static_cast<double>(s.support));
    ent_sum += s.entropy;
  }
  auto quantile = [](std::vector<double> v, double q) {
    std::sort(v.begin(), v.end());
    double pos = q * (v.size() - 1);
    std::size_t lo = static_cast<std::size_t>(pos);
    std::size_t hi = std::min(lo + 1, v.size() - 1);
    double frac = pos - static_cast<double>(lo);
    return v[lo] * (1.0 - frac) + v[hi] * frac;
  };
  r.median_max_w = quantile(maxes, 0.5);
  r.mean_entropy = ent_sum / steps.size();
  r.p90_support = quantile(supports, 0.9);
  return r;
}

std::string PeakednessReport::to_json() const {
  nlohmann::json j;
  j["per_step"] = nlohmann::json::array();
  for (const auto& s : per_step)
    j["per_step"].push_back({{"t", s.t},
                             {"max_w", s.max_w},
                             {"entropy", s.entropy},
                             {"support", s.support}});
  j["aggregate"] = {{"median_max_w", median_max_w},
                    {"mean_entropy", mean_entropy},
                    {"p90_support", p90_support}};
  return j.dump(2);
}

}  // namespace spdn
