#include "spdn/training.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace spdn {

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

const char* variant_name(Variant v) {
  switch (v) {
    case Variant::attention: return "attention";
    case Variant::serial_sp: return "serial_sp";
    case Variant::parallel_sp: return "parallel_sp";
  }
  return "?";
}

Variant variant_from_name(const std::string& name) {
  if (name == "attention") return Variant::attention;
  if (name == "serial_sp") return Variant::serial_sp;
  if (name == "parallel_sp") return Variant::parallel_sp;
  throw std::invalid_argument("unknown model variant '" + name +
                              "' (attention, serial_sp, parallel_sp)");
}

const char* dist_variant_name(DistVariant v) {
  return v == DistVariant::adjacent_l1 ? "adjacent_l1" : "stride_variance";
}

DistVariant dist_variant_from_name(const std::string& name) {
  if (name == "adjacent_l1") return DistVariant::adjacent_l1;
  if (name == "stride_variance") return DistVariant::stride_variance;
  throw std::invalid_argument("unknown distance loss variant '" + name +
                              "' (adjacent_l1, stride_variance)");
}

// ---- model -----------------------------------------------------------------

Model Model::init(const ModelConfig& cfg, const Vocabulary& vocab,
                  std::uint64_t seed) {
  if (cfg.V != vocab.size())
    throw std::invalid_argument("model class count " + std::to_string(cfg.V) +
                                " != vocabulary size " +
                                std::to_string(vocab.size()));
  Model m;
  m.cfg = cfg;
  m.vocab = vocab;
  Rng rng(seed ^ 0x5cd1u);
  m.rect = Rectifier::init(cfg.rect, rng);
  m.enc = Encoder::init(cfg.enc, rng);
  if (cfg.variant == Variant::attention) {
    AttnConfig ac;
    ac.C = cfg.enc.channels;
    ac.d_s = cfg.d_s;
    ac.d_a = cfg.d_a;
    ac.d_e = cfg.d_e;
    ac.V = cfg.V;
    ac.T_max = cfg.T_max;
    m.attn = AttnDecoder::init(ac, rng);
  } else {
    SpConfig sc;
    sc.C = cfg.enc.channels;
    sc.d_s = cfg.d_s;
    sc.d_e = cfg.d_e;
    sc.d_p = cfg.d_p;
    sc.V = cfg.V;
    sc.k = cfg.k;
    sc.T_max = cfg.T_max;
    sc.delta_max = cfg.delta_max;
    sc.parallel = cfg.variant == Variant::parallel_sp;
    m.sp = SpDecoder::init(sc, rng);
  }
  return m;
}

Tensor Model::features(const Tensor& image) const {
  return enc.encode(rect.apply(image));
}

DecodeResult Model::decode(const Tensor& feats, int t_max, DecodeMode mode,
                           const std::vector<int>& labels, ReadLog* log) const {
  if (cfg.variant == Variant::attention)
    return attn.decode_sequence(feats, t_max, mode, labels, log);
  return sp.decode(feats, t_max, mode, labels, log);
}

NamedTensors Model::params() const {
  NamedTensors p;
  if (!cfg.rect.identity) rect.collect("rect", p);
  enc.collect("enc", p);
  if (cfg.variant == Variant::attention)
    attn.collect("attn", p);
  else
    sp.collect("sp", p);
  return p;
}

void Model::save(const std::string& path) const {
  NamedTensors p = params();
  std::vector<double> meta = {
      static_cast<double>(static_cast<int>(cfg.variant)),
      static_cast<double>(cfg.V),
      static_cast<double>(cfg.d_s),
      static_cast<double>(cfg.d_a),
      static_cast<double>(cfg.d_e),
      static_cast<double>(cfg.d_p),
      static_cast<double>(cfg.k),
      static_cast<double>(cfg.T_max),
      cfg.delta_max,
      static_cast<double>(cfg.enc.stem),
      static_cast<double>(cfg.enc.w1),
      static_cast<double>(cfg.enc.w2),
      static_cast<double>(cfg.enc.channels),
      static_cast<double>(cfg.rect.K),
      static_cast<double>(cfg.rect.out_h),
      static_cast<double>(cfg.rect.out_w),
      cfg.rect.identity ? 1.0 : 0.0,
  };
  p.emplace_back("meta/config",
                 Tensor::from({static_cast<int>(meta.size())}, meta));
  std::vector<double> voc;
  for (char c : vocab.symbols) voc.push_back(static_cast<double>(c));
  p.emplace_back("meta/vocab",
                 Tensor::from({static_cast<int>(voc.size())}, voc));
  save_checkpoint(path, p);
}

Model Model::load(const std::string& path) {
  NamedTensors ckpt = load_checkpoint(path);
  const Tensor* meta = nullptr;
  const Tensor* voc = nullptr;
  for (const auto& [n, t] : ckpt) {
    if (n == "meta/config") meta = &t;
    if (n == "meta/vocab") voc = &t;
  }
  if (!meta || !voc)
    throw std::runtime_error("checkpoint " + path + " lacks model metadata");
  const Tensor& m = *meta;
  ModelConfig cfg;
  cfg.variant = static_cast<Variant>(static_cast<int>(m[0]));
  cfg.V = static_cast<int>(m[1]);
  cfg.d_s = static_cast<int>(m[2]);
  cfg.d_a = static_cast<int>(m[3]);
  cfg.d_e = static_cast<int>(m[4]);
  cfg.d_p = static_cast<int>(m[5]);
  cfg.k = static_cast<int>(m[6]);
  cfg.T_max = static_cast<int>(m[7]);
  cfg.delta_max = m[8];
  cfg.enc.stem = static_cast<int>(m[9]);
  cfg.enc.w1 = static_cast<int>(m[10]);
  cfg.enc.w2 = static_cast<int>(m[11]);
  cfg.enc.channels = static_cast<int>(m[12]);
  cfg.rect.K = static_cast<int>(m[13]);
  cfg.rect.out_h = static_cast<int>(m[14]);
  cfg.rect.out_w = static_cast<int>(m[15]);
  cfg.rect.identity = m[16] != 0.0;
  std::string symbols;
  for (int i = 0; i < voc->size(); ++i)
    symbols.push_back(static_cast<char>(static_cast<int>((*voc)[i])));
  Vocabulary vocab = Vocabulary::from_charset(symbols);
  Model model = Model::init(cfg, vocab, 0);
  NamedTensors p = model.params();
  restore_params(p, ckpt);
  return model;
}

// ---- losses ----------------------------------------------------------------

Tensor recognition_loss(const std::vector<Tensor>& logits,
                        const std::vector<int>& labels, int eos) {
  if (logits.size() != labels.size() + 1)
    throw std::invalid_argument(
        "recognition loss needs |labels|+1 logit steps, got " +
        std::to_string(logits.size()) + " for " + std::to_string(labels.size()) +
        " labels");
  Tensor acc;
  for (std::size_t t = 0; t < logits.size(); ++t) {
    int target = t < labels.size() ? labels[t] : eos;
    Tensor l = cross_entropy(logits[t], target);
    acc = t == 0 ? l : add(acc, l);
  }
  return scale(acc, 1.0 / static_cast<double>(logits.size()));
}

Tensor distance_loss(const std::vector<TrajectoryStep>& traj, DistVariant v) {
  if (traj.empty()) throw std::invalid_argument("empty trajectory");
  if (traj.size() < 2) return Tensor::scalar(0.0);
  int pairs = static_cast<int>(traj.size()) - 1;
  if (v == DistVariant::adjacent_l1) {
    Tensor acc;
    for (int t = 1; t <= pairs; ++t) {
      Tensor d = sum(vabs(sub(traj[t].anchor, traj[t - 1].anchor)));
      acc = t == 1 ? d : add(acc, d);
    }
    return scale(acc, 1.0 / pairs);
  }
  // stride_variance: mean L1 deviation of strides from their mean stride
  std::vector<Tensor> strides;
  Tensor ssum;
  for (int t = 1; t <= pairs; ++t) {
    Tensor s = sub(traj[t].anchor, traj[t - 1].anchor);
    strides.push_back(s);
    ssum = t == 1 ? s : add(ssum, s);
  }
  Tensor smean = scale(ssum, 1.0 / pairs);
  Tensor acc;
  for (int t = 0; t < pairs; ++t) {
    Tensor d = sum(vabs(sub(strides[t], smean)));
    acc = t == 0 ? d : add(acc, d);
  }
  return scale(acc, 1.0 / pairs);
}

LossValue total_loss(const Tensor& rec, const Tensor& dist, double lambda) {
  if (lambda < 0.0) throw std::invalid_argument("lambda must be >= 0");
  LossValue lv;
  lv.rec = rec.value();
  lv.dist = dist.value();
  lv.lambda = lambda;
  if (!std::isfinite(lv.rec) || !std::isfinite(lv.dist))
    throw std::runtime_error("non-finite loss term");
  lv.total = add(rec, scale(dist, lambda));
  lv.total_v = lv.total.value();
  return lv;
}

// ---- training loop ---------------------------------------------------------

double lr_multiplier(const TrainConfig& cfg, int epoch) {
  if (epoch <= cfg.lr_drop1) return 1.0;
  if (epoch <= cfg.lr_drop2) return 0.1;
  return 0.01;
}

Tensor image_tensor(const std::vector<double>& img, int h, int w) {
  return Tensor::from({1, h, w}, img);
}

std::string metrics_csv_header() {
  return "epoch,split,loss_total,loss_rec,loss_dist,seq_acc,mean_steps,wall_sec";
}

std::string metrics_csv_row(const EpochRow& r) {
  std::ostringstream os;
  os << r.epoch << ',' << r.split << ',' << fmt_double(r.loss_total) << ','
     << fmt_double(r.loss_rec) << ',' << fmt_double(r.loss_dist) << ','
     << fmt_double(r.seq_acc) << ',' << fmt_double(r.mean_steps) << ','
     << fmt_double(r.wall_sec);
  return os.str();
}

namespace {

bool use_distance_loss(const Model& m, const TrainConfig& cfg) {
  if (m.cfg.variant == Variant::serial_sp) return true;
  if (m.cfg.variant == Variant::parallel_sp) return cfg.dist_on_parallel;
  return false;
}

LossValue sample_loss(const Model& model, const TrainConfig& cfg,
                      const Tensor& image, const std::vector<int>& labels,
                      DecodeResult* out_result = nullptr) {
  Tensor feats = model.features(image);
  DecodeResult r =
      model.decode(feats, cfg.t_max, DecodeMode::teacher_forced, labels);
  Tensor rec = recognition_loss(r.logits, labels, model.vocab.eos_index());
  Tensor dist = use_distance_loss(model, cfg)
                    ? distance_loss(r.trajectory, cfg.dist)
                    : Tensor::scalar(0.0);
  if (out_result) *out_result = r;
  return total_loss(rec, dist, cfg.lambda);
}

}  // namespace

TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg) {
  if (cfg.out_dir.empty()) throw std::invalid_argument("train needs an output directory");
  if (model.vocab.symbols != data.vocab.symbols)
    throw std::invalid_argument("model/dataset vocabulary mismatch: '" +
                                model.vocab.symbols + "' vs '" +
                                data.vocab.symbols + "'");
  std::filesystem::create_directories(cfg.out_dir);

  std::vector<int> train_idx = data.split_indices("train");
  if (train_idx.empty()) throw std::invalid_argument("empty train split");

  NamedTensors params = model.params();
  std::vector<AdadeltaState> states;
  for (auto& [n, p] : params) states.push_back(AdadeltaState::like(p));

  std::ofstream metrics(cfg.out_dir + "/metrics.csv");
  if (!metrics) throw std::runtime_error("cannot write metrics.csv");
  metrics << metrics_csv_header() << "\n";
  std::ofstream steps_log;
  if (cfg.log_steps) {
    steps_log.open(cfg.out_dir + "/steps.csv");
    steps_log << "epoch,batch,loss_total,loss_rec,loss_dist,lambda\n";
  }

  TrainResult result;
  result.best_ckpt = cfg.out_dir + "/best.ckpt";
  result.best_val_acc = -1.0;

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    auto t0 = std::chrono::steady_clock::now();
    double lr = lr_multiplier(cfg, epoch);

    // seed-derived shuffle, reproducible per epoch
    std::vector<int> order = train_idx;
    Rng shuffle_rng = Rng(cfg.seed).fork(0xe90c + epoch);
    for (int i = static_cast<int>(order.size()) - 1; i > 0; --i)
      std::swap(order[i], order[shuffle_rng.uniform_int(0, i)]);

    double sum_total = 0, sum_rec = 0, sum_dist = 0, sum_steps = 0;
    int correct = 0, seen = 0, n_batches = 0;

    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      std::size_t end = std::min(order.size(), start + cfg.batch);
      int nb = static_cast<int>(end - start);
      int batch_id = n_batches++;
      for (auto& [n, p] : params) {
        p.grad();  // allocate
        p.zero_grad();
      }
      double b_total = 0, b_rec = 0, b_dist = 0;
      for (std::size_t s = start; s < end; ++s) {
        int idx = order[s];
        const auto& entry = data.entries[idx];
        std::vector<int> labels = data.vocab.encode(entry.label);
        Tensor img = image_tensor(data.images[idx], data.height, data.width);
        Tape tape;
        DecodeResult r;
        LossValue lv = sample_loss(model, cfg, img, labels, &r);
        if (!std::isfinite(lv.total_v)) {
          std::ofstream dump(cfg.out_dir + "/abort.txt");
          dump << "non-finite loss at epoch " << epoch << " batch " << batch_id
               << " sample id " << entry.id << "\n";
          throw std::runtime_error("training aborted: non-finite loss at epoch " +
                                   std::to_string(epoch) + " batch " +
                                   std::to_string(batch_id));
        }
        backward(lv.total);
        b_total += lv.total_v;
        b_rec += lv.rec;
        b_dist += lv.dist;
        sum_steps += static_cast<double>(labels.size() + 1);
        std::vector<int> want = labels;
        want.push_back(model.vocab.eos_index());
        if (r.symbols == want) ++correct;
        ++seen;
      }
      b_total /= nb;
      b_rec /= nb;
      b_dist /= nb;
      sum_total += b_total;
      sum_rec += b_rec;
      sum_dist += b_dist;
      result.steps.push_back({epoch, batch_id, b_total, b_rec, b_dist, cfg.lambda});
      if (cfg.log_steps)
        steps_log << epoch << ',' << batch_id << ',' << fmt_double(b_total) << ','
                  << fmt_double(b_rec) << ',' << fmt_double(b_dist) << ','
                  << fmt_double(cfg.lambda) << "\n";

      // mean gradient, global-norm clip, ADADELTA step
      double norm2 = 0.0;
      for (auto& [n, p] : params) {
        double* g = p.grad();
        for (int i = 0; i < p.size(); ++i) {
          g[i] /= nb;
          norm2 += g[i] * g[i];
        }
      }
      double norm = std::sqrt(norm2);
      if (cfg.clip_norm > 0 && norm > cfg.clip_norm) {
        double f = cfg.clip_norm / norm;
        for (auto& [n, p] : params) {
          double* g = p.grad();
          for (int i = 0; i < p.size(); ++i) g[i] *= f;
        }
      }
      for (std::size_t pi = 0; pi < params.size(); ++pi)
        adadelta_step(params[pi].second, states[pi], lr);
    }

    EpochRow tr;
    tr.epoch = epoch;
    tr.split = "train";
    tr.loss_total = sum_total / n_batches;
    tr.loss_rec = sum_rec / n_batches;
    tr.loss_dist = sum_dist / n_batches;
    tr.seq_acc = seen ? static_cast<double>(correct) / seen : 0.0;
    tr.mean_steps = seen ? sum_steps / seen : 0.0;

    EvalResult ev = evaluate(model, data, "val", cfg);
    EpochRow vr;
    vr.epoch = epoch;
    vr.split = "val";
    vr.loss_total = ev.loss_total;
    vr.loss_rec = ev.loss_rec;
    vr.loss_dist = ev.loss_dist;
    vr.seq_acc = ev.seq_acc;
    vr.mean_steps = ev.mean_steps;

    double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    tr.wall_sec = cfg.timing ? wall : 0.0;
    vr.wall_sec = 0.0;
    metrics << metrics_csv_row(tr) << "\n" << metrics_csv_row(vr) << "\n";
    metrics.flush();
    result.rows.push_back(tr);
    result.rows.push_back(vr);

    if (ev.seq_acc > result.best_val_acc) {
      result.best_val_acc = ev.seq_acc;
      result.best_epoch = epoch;
      model.save(result.best_ckpt);
    }
  }
  return result;
}

// ---- evaluation ------------------------------------------------------------

EvalResult evaluate(const Model& model, const Dataset& data,
                    const std::string& split, const TrainConfig& cfg) {
  if (model.vocab.symbols != data.vocab.symbols)
    throw std::invalid_argument("model/dataset vocabulary mismatch: '" +
                                model.vocab.symbols + "' vs '" +
                                data.vocab.symbols + "'");
  std::vector<int> idx = data.split_indices(split);
  if (idx.empty()) throw std::invalid_argument("empty split '" + split + "'");

  EvalResult r;
  double steps_sum = 0;
  for (int i : idx) {
    const auto& entry = data.entries[i];
    std::vector<int> labels = data.vocab.encode(entry.label);
    Tensor img = image_tensor(data.images[i], data.height, data.width);
    Tensor feats = model.features(img);

    DecodeResult tf =
        model.decode(feats, cfg.t_max, DecodeMode::teacher_forced, labels);
    Tensor rec = recognition_loss(tf.logits, labels, model.vocab.eos_index());
    Tensor dist = use_distance_loss(model, cfg)
                      ? distance_loss(tf.trajectory, cfg.dist)
                      : Tensor::scalar(0.0);
    LossValue lv = total_loss(rec, dist, cfg.lambda);
    r.loss_total += lv.total_v;
    r.loss_rec += lv.rec;
    r.loss_dist += lv.dist;

    DecodeResult g = model.decode(feats, cfg.t_max, DecodeMode::greedy);
    std::vector<int> pred = g.predicted_label(model.vocab.eos_index());
    bool ok = pred == labels;
    auto& pl = r.per_length[static_cast<int>(labels.size())];
    pl.second += 1;
    if (ok) {
      pl.first += 1;
      r.seq_acc += 1.0;
    }
    steps_sum += static_cast<double>(g.symbols.size());
    ++r.n;
  }
  r.seq_acc /= r.n;
  r.mean_steps = steps_sum / r.n;
  r.loss_total /= r.n;
  r.loss_rec /= r.n;
  r.loss_dist /= r.n;
  return r;
}

std::string EvalResult::per_length_json() const {
  std::ostringstream os;
  os << "{";
  bool first = true;
  for (const auto& [len, cnt] : per_length) {
    if (!first) os << ",";
    first = false;
    os << "\"" << len << "\":{\"correct\":" << cnt.first
       << ",\"total\":" << cnt.second << "}";
  }
  os << "}";
  return os.str();
}

}  // namespace spdn
