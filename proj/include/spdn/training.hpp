#pragma once

// Model assembly (rectifier + encoder + one decoder variant), the combined
// recognition/distance loss, the teacher-forced ADADELTA training loop and
// greedy evaluation.

#include <map>
#include <string>
#include <vector>

#include "spdn/attn_decoder.hpp"
#include "spdn/encoder.hpp"
#include "spdn/rectifier.hpp"
#include "spdn/sp_decoder.hpp"
#include "spdn/synth.hpp"
#include "spdn/tensor.hpp"

namespace spdn {

enum class Variant { attention, serial_sp, parallel_sp };

const char* variant_name(Variant v);
Variant variant_from_name(const std::string& name);

enum class DistVariant { adjacent_l1, stride_variance };

const char* dist_variant_name(DistVariant v);
DistVariant dist_variant_from_name(const std::string& name);

struct ModelConfig {
  Variant variant = Variant::serial_sp;
  RectifierConfig rect;
  EncoderConfig enc;
  int d_s = 256;
  int d_a = 256;
  int d_e = 64;
  int d_p = 64;
  int k = 1;
  int T_max = 25;
  double delta_max = 0.5;
  int V = 0;  // classes, end-of-sequence included; set from the vocabulary
};

struct Model {
  ModelConfig cfg;
  Vocabulary vocab;
  Rectifier rect;
  Encoder enc;
  AttnDecoder attn;  // attention variant only
  SpDecoder sp;      // single-point variants only

  static Model init(const ModelConfig& cfg, const Vocabulary& vocab,
                    std::uint64_t seed);

  Tensor features(const Tensor& image) const;  // rectify then encode
  DecodeResult decode(const Tensor& features, int t_max, DecodeMode mode,
                      const std::vector<int>& labels = {},
                      ReadLog* log = nullptr) const;

  NamedTensors params() const;
  void save(const std::string& path) const;  // parameters + model metadata
  static Model load(const std::string& path);
};

// ---- losses ----------------------------------------------------------------

// mean cross-entropy over teacher-forced steps; targets are labels then EOS
Tensor recognition_loss(const std::vector<Tensor>& logits,
                        const std::vector<int>& labels, int eos);

// per-step L1 regularizer over the trajectory's location anchors
Tensor distance_loss(const std::vector<TrajectoryStep>& traj, DistVariant v);

struct LossValue {
  Tensor total;
  double total_v = 0.0;
  double rec = 0.0;
  double dist = 0.0;
  double lambda = 1.0;
};

LossValue total_loss(const Tensor& rec, const Tensor& dist, double lambda);

// ---- training --------------------------------------------------------------

struct TrainConfig {
  int batch = 100;
  int epochs = 10;
  double lambda = 1.0;
  int t_max = 25;
  std::uint64_t seed = 1;
  DistVariant dist = DistVariant::adjacent_l1;
  bool dist_on_parallel = false;  // distance loss defaults to serial only
  int lr_drop1 = 5;  // schedule: 1.0 through drop1, then 0.1 through drop2,
  int lr_drop2 = 7;  // then 0.01
  double clip_norm = 5.0;
  bool timing = true;  // false writes wall_sec as 0 for byte-stable reruns
  bool log_steps = false;
  std::string out_dir;
};

struct EpochRow {
  int epoch = 0;
  std::string split;
  double loss_total = 0, loss_rec = 0, loss_dist = 0;
  double seq_acc = 0, mean_steps = 0, wall_sec = 0;
};

struct StepRecord {
  int epoch = 0, batch = 0;
  double total = 0, rec = 0, dist = 0, lambda = 1;
};

struct TrainResult {
  std::vector<EpochRow> rows;
  std::vector<StepRecord> steps;
  double best_val_acc = 0.0;
  int best_epoch = 0;
  std::string best_ckpt;
};

double lr_multiplier(const TrainConfig& cfg, int epoch);

// Trains in place; writes metrics.csv and best.ckpt (and steps.csv when
// enabled) under cfg.out_dir. Aborts with a diagnostic naming the batch on a
// non-finite loss.
TrainResult train(Model& model, const Dataset& data, const TrainConfig& cfg);

// ---- evaluation ------------------------------------------------------------

struct EvalResult {
  int n = 0;
  double seq_acc = 0.0;
  double mean_steps = 0.0;
  double loss_total = 0.0, loss_rec = 0.0, loss_dist = 0.0;
  std::map<int, std::pair<int, int>> per_length;  // length -> {correct, total}

  std::string per_length_json() const;
};

EvalResult evaluate(const Model& model, const Dataset& data,
                    const std::string& split, const TrainConfig& cfg);

// formats a metrics row exactly as written to metrics.csv
std::string metrics_csv_header();
std::string metrics_csv_row(const EpochRow& r);

Tensor image_tensor(const std::vector<double>& img, int h, int w);

}  // namespace spdn
