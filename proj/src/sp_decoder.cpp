#include "spdn/sp_decoder.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

#include "spdn/attn_decoder.hpp"  // argmax_lowest

namespace spdn {

SpDecoder SpDecoder::init(const SpConfig& cfg, Rng& rng) {
  if (cfg.V < 2) throw std::invalid_argument("single-point decoder needs >= 2 classes");
  if (cfg.k < 1) throw std::invalid_argument("k must be >= 1");
  SpDecoder d;
  d.cfg = cfg;
  d.pos_emb = randn_tensor({cfg.T_max, cfg.d_p}, 1.0, rng);

  int head_in = cfg.parallel ? cfg.C + cfg.d_p : cfg.C * cfg.k + cfg.d_p;
  d.pau1 = Linear::init(head_in, 128, rng);
  d.pau2 = Linear::init(128, 64, rng);
  if (cfg.parallel) {
    // small random head so the per-step position embeddings separate the
    // emitted points from the first update on
    d.pau3 = Linear::init(64, 2 * cfg.k, rng);
    for (int i = 0; i < d.pau3.w.size(); ++i) d.pau3.w[i] *= 0.1;
    d.classifier = Linear::init(cfg.C, cfg.V, rng);
  } else {
    d.pau3 = Linear::zero_init(64, 2 * cfg.k);
    // zero weights plus a rightward bias: the untrained walk strides 0.3
    // per step from p0, so samples already traverse the text line
    for (int i = 0; i < cfg.k; ++i) d.pau3.b[2 * i] = std::atanh(0.6);
    d.p0 = Tensor::from({2}, {-0.9, 0.0});
    d.p0.impl()->requires_grad = true;
    d.emb = randn_tensor({cfg.V, cfg.d_e}, 1.0, rng);
    d.lstm = LSTMCell::init(cfg.C + cfg.d_e, cfg.d_s, rng);
    d.classifier = Linear::init(cfg.d_s, cfg.V, rng);
  }
  if (cfg.k > 1) {
    // averaging blocks [I/k ... I/k]: with the shared offset bias every point
    // starts coincident, so a fresh k>1 decoder computes exactly what k=1 does
    d.fuse_w = Tensor::zeros({cfg.C, cfg.C * cfg.k}, true);
    for (int j = 0; j < cfg.k; ++j)
      for (int c = 0; c < cfg.C; ++c)
        d.fuse_w[c * cfg.C * cfg.k + j * cfg.C + c] = 1.0 / cfg.k;
  }
  return d;
}

Tensor SpDecoder::pau_offset(const Tensor& prev_feature, int step) const {
  if (step < 0 || step >= cfg.T_max)
    throw std::out_of_range("decode step " + std::to_string(step) +
                            " outside position table of size " +
                            std::to_string(cfg.T_max));
  Tensor in = concat(prev_feature, embedding_lookup(pos_emb, step), 0);
  Tensor h1 = vtanh(pau1.apply(in));
  Tensor h2 = vtanh(pau2.apply(h1));
  return scale(vtanh(pau3.apply(h2)), cfg.delta_max);
}

Tensor SpDecoder::fuse(const std::vector<Tensor>& samples) const {
  if (samples.empty()) throw std::invalid_argument("fuse needs >= 1 sample");
  if (samples.size() == 1) return samples[0];
  Tensor cat = samples[0];
  for (std::size_t i = 1; i < samples.size(); ++i) cat = concat(cat, samples[i], 0);
  return matvec(fuse_w, cat);
}

void log_bilinear_read(ReadLog& log, int h, int w, double x, double y) {
  double xc = std::min(1.0, std::max(-1.0, x));
  double yc = std::min(1.0, std::max(-1.0, y));
  double px = (xc + 1.0) * 0.5 * (w - 1);
  double py = (yc + 1.0) * 0.5 * (h - 1);
  int x0 = w > 1 ? std::min(static_cast<int>(std::floor(px)), w - 2) : 0;
  int y0 = h > 1 ? std::min(static_cast<int>(std::floor(py)), h - 2) : 0;
  int x1 = w > 1 ? x0 + 1 : 0, y1 = h > 1 ? y0 + 1 : 0;
  log.touch(y0, x0);
  log.touch(y0, x1);
  log.touch(y1, x0);
  log.touch(y1, x1);
}

namespace {

Tensor stack_points(const std::vector<Tensor>& pts) {
  Tensor rows = reshape(pts[0], {1, 2});
  for (std::size_t i = 1; i < pts.size(); ++i)
    rows = concat(rows, reshape(pts[i], {1, 2}), 0);
  return rows;
}

Tensor mean_point(const std::vector<Tensor>& pts) {
  if (pts.size() == 1) return pts[0];
  Tensor s = pts[0];
  for (std::size_t i = 1; i < pts.size(); ++i) s = add(s, pts[i]);
  return scale(s, 1.0 / static_cast<double>(pts.size()));
}

}  // namespace

DecodeResult SpDecoder::serial_decode(const Tensor& features, int t_max,
                                      DecodeMode mode,
                                      const std::vector<int>& labels,
                                      ReadLog* log) const {
  if (cfg.parallel) throw std::logic_error("decoder configured as parallel");
  if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
  if (features.rank() != 3 || features.dim(0) != cfg.C)
    throw std::invalid_argument("decode expects features [C,H,W], got " +
                                shape_str(features.shape()));
  int h = features.dim(1), w = features.dim(2);
  int eos = cfg.V - 1;
  int steps = mode == DecodeMode::teacher_forced
                  ? static_cast<int>(labels.size()) + 1
                  : t_max;

  DecodeResult out;
  DecoderState st{Tensor::zeros({cfg.d_s}), Tensor::zeros({cfg.d_s})};
  Tensor anchor = p0;
  Tensor prev_feat = Tensor::zeros({cfg.C * cfg.k});
  int prev = eos;
  for (int t = 0; t < steps; ++t) {
    if (log) log->begin_step();
    Tensor off = pau_offset(prev_feat, t);
    std::vector<Tensor> pts, samples;
    for (int i = 0; i < cfg.k; ++i) {
      Tensor p = clamp(add(anchor, slice(off, 2 * i, 2)), -1.0, 1.0);
      pts.push_back(p);
      if (log) log_bilinear_read(*log, h, w, p[0], p[1]);
      samples.push_back(bilinear_sample(features, p));
    }
    Tensor raw = samples[0];
    for (int i = 1; i < cfg.k; ++i) raw = concat(raw, samples[i], 0);
    Tensor fused = cfg.k == 1 ? samples[0] : matvec(fuse_w, raw);

    Tensor x = concat(fused, embedding_lookup(emb, prev), 0);
    auto [nh, nc] = lstm.step(st.h, st.c, x);
    Tensor logits = classifier.apply(nh);
    int sym = argmax_lowest(logits);

    Tensor next_anchor = mean_point(pts);
    out.symbols.push_back(sym);
    out.logits.push_back(logits);
    out.trajectory.push_back({stack_points(pts), next_anchor, sym});

    st = {nh, nc};
    anchor = next_anchor;
    prev_feat = raw;
    if (mode == DecodeMode::teacher_forced) {
      prev = t < static_cast<int>(labels.size()) ? labels[t] : eos;
    } else {
      if (sym == eos) break;
      prev = sym;
    }
  }
  return out;
}

DecodeResult SpDecoder::parallel_decode(const Tensor& features, int t_max,
                                        DecodeMode mode, ReadLog* log,
                                        std::vector<std::string>* trace) const {
  if (!cfg.parallel) throw std::logic_error("decoder configured as serial");
  if (t_max < 1) throw std::invalid_argument("t_max must be >= 1");
  if (t_max > cfg.T_max)
    throw std::invalid_argument("t_max exceeds position table size");
  if (features.rank() != 3 || features.dim(0) != cfg.C)
    throw std::invalid_argument("decode expects features [C,H,W], got " +
                                shape_str(features.shape()));
  int h = features.dim(1), w = features.dim(2);
  int hw = h * w;
  int eos = cfg.V - 1;

  Tensor fmat = reshape(features, {cfg.C, hw});
  Tensor gap = matvec(fmat, Tensor::full({hw}, 1.0 / hw));

  // phase 1: every step's points, before any classification
  std::vector<std::vector<Tensor>> pts(t_max);
  for (int t = 0; t < t_max; ++t) {
    Tensor in = concat(gap, embedding_lookup(pos_emb, t), 0);
    Tensor h1 = vtanh(pau1.apply(in));
    Tensor h2 = vtanh(pau2.apply(h1));
    Tensor coords = vtanh(pau3.apply(h2));  // absolute, already in [-1,1]
    for (int i = 0; i < cfg.k; ++i)
      pts[t].push_back(clamp(slice(coords, 2 * i, 2), -1.0, 1.0));
    if (trace) trace->push_back("point " + std::to_string(t));
  }

  // phase 2: independent classification per step
  DecodeResult out;
  for (int t = 0; t < t_max; ++t) {
    if (log) log->begin_step();
    std::vector<Tensor> samples;
    for (int i = 0; i < cfg.k; ++i) {
      if (log) log_bilinear_read(*log, h, w, pts[t][i][0], pts[t][i][1]);
      samples.push_back(bilinear_sample(features, pts[t][i]));
    }
    Tensor fused = fuse(samples);
    Tensor logits = classifier.apply(fused);
    int sym = argmax_lowest(logits);
    if (trace) trace->push_back("classify " + std::to_string(t));
    out.symbols.push_back(sym);
    out.logits.push_back(logits);
    out.trajectory.push_back({stack_points(pts[t]), mean_point(pts[t]), sym});
    if (mode == DecodeMode::greedy && sym == eos) break;
  }
  return out;
}

DecodeResult SpDecoder::decode(const Tensor& features, int t_max, DecodeMode mode,
                               const std::vector<int>& labels, ReadLog* log) const {
  if (cfg.parallel) {
    int steps = mode == DecodeMode::teacher_forced
                    ? static_cast<int>(labels.size()) + 1
                    : t_max;
    return parallel_decode(features, steps, mode, log);
  }
  return serial_decode(features, t_max, mode, labels, log);
}

void SpDecoder::collect(const std::string& prefix, NamedTensors& out) const {
  out.emplace_back(prefix + "/pos_emb", pos_emb);
  pau1.collect(prefix + "/pau1", out);
  pau2.collect(prefix + "/pau2", out);
  pau3.collect(prefix + "/pau3", out);
  if (!cfg.parallel) {
    out.emplace_back(prefix + "/p0", p0);
    out.emplace_back(prefix + "/emb", emb);
    lstm.collect(prefix + "/lstm", out);
  }
  classifier.collect(prefix + "/cls", out);
  if (cfg.k > 1) out.emplace_back(prefix + "/fuse", fuse_w);
}

void export_trajectory(const std::vector<TrajectoryStep>& traj,
                       const Tensor& image, const std::string& json_path,
                       const std::string& ppm_path) {
  if (traj.empty()) throw std::invalid_argument("empty trajectory");
  nlohmann::json j;
  j["steps"] = nlohmann::json::array();
  for (std::size_t t = 0; t < traj.size(); ++t) {
    nlohmann::json pts = nlohmann::json::array();
    const Tensor& p = traj[t].points;
    for (int i = 0; i < p.dim(0); ++i)
      pts.push_back({{"x", p[2 * i]}, {"y", p[2 * i + 1]}});
    j["steps"].push_back({{"t", static_cast<int>(t)},
                          {"points", pts},
                          {"symbol", traj[t].symbol}});
  }
  {
    std::ofstream f(json_path);
    if (!f) throw std::runtime_error("cannot write " + json_path);
    f << j.dump(2) << "\n";
  }

  if (image.rank() != 3 || image.dim(0) != 1)
    throw std::invalid_argument("overlay expects an image [1,H,W]");
  int h = image.dim(1), w = image.dim(2);
  std::vector<unsigned char> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int i = 0; i < h * w; ++i) {
    double v = std::min(1.0, std::max(0.0, image[i]));
    unsigned char g = static_cast<unsigned char>(std::lround(v * 255.0));
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = g;
  }
  for (const auto& step : traj) {
    const Tensor& p = step.points;
    for (int i = 0; i < p.dim(0); ++i) {
      int px = static_cast<int>(std::lround((p[2 * i] + 1.0) * 0.5 * (w - 1)));
      int py = static_cast<int>(std::lround((p[2 * i + 1] + 1.0) * 0.5 * (h - 1)));
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          int x = px + dx, y = py + dy;
          if (x < 0 || x >= w || y < 0 || y >= h) continue;
          std::size_t o = (static_cast<std::size_t>(y) * w + x) * 3;
          rgb[o] = 255;
          rgb[o + 1] = 0;
          rgb[o + 2] = 0;
        }
    }
  }
  std::ofstream f(ppm_path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + ppm_path);
  f << "P6\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(rgb.data()),
          static_cast<std::streamsize>(rgb.size()));
}

std::vector<TrajectoryStep> parse_trajectory(const std::string& json_path) {
  std::ifstream f(json_path);
  if (!f) throw std::runtime_error("cannot read " + json_path);
  nlohmann::json j;
  f >> j;
  std::vector<TrajectoryStep> traj;
  for (const auto& s : j.at("steps")) {
    const auto& pts = s.at("points");
    int k = static_cast<int>(pts.size());
    Tensor p = Tensor::zeros({k, 2});
    for (int i = 0; i < k; ++i) {
      p[2 * i] = pts[i].at("x").get<double>();
      p[2 * i + 1] = pts[i].at("y").get<double>();
    }
    Tensor anchor = Tensor::zeros({2});
    for (int i = 0; i < k; ++i) {
      anchor[0] += p[2 * i] / k;
      anchor[1] += p[2 * i + 1] / k;
    }
    traj.push_back({p, anchor, s.at("symbol").get<int>()});
  }
  return traj;
}

}  // namespace spdn
