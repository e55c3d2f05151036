#include "spdn/cli.hpp"

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "spdn/bench.hpp"
#include "spdn/config.hpp"
#include "spdn/sp_decoder.hpp"
#include "spdn/synth.hpp"
#include "spdn/training.hpp"

namespace spdn {

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

const char* kUsage =
    "usage: spdn SUBCOMMAND [--config FILE] [--set key=value ...] [--seed N] [--out DIR]\n"
    "subcommands: gen-data, train, eval, bench, analyze-attn, visualize\n";

struct Args {
  std::string sub;
  std::string config_file;
  std::vector<std::pair<std::string, std::string>> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
};

Args parse_args(const std::vector<std::string>& argv) {
  if (argv.empty()) throw UsageError("missing subcommand");
  Args a;
  a.sub = argv[0];
  for (std::size_t i = 1; i < argv.size(); ++i) {
    const std::string& t = argv[i];
    auto need_value = [&](const char* flag) -> const std::string& {
      if (i + 1 >= argv.size())
        throw UsageError(std::string(flag) + " requires a value");
      return argv[++i];
    };
    if (t == "--config") {
      a.config_file = need_value("--config");
    } else if (t == "--set") {
      const std::string& kv = need_value("--set");
      std::size_t eq = kv.find('=');
      if (eq == std::string::npos || eq == 0)
        throw UsageError("--set expects key=value, got '" + kv + "'");
      a.sets.emplace_back(kv.substr(0, eq), kv.substr(eq + 1));
    } else if (t == "--seed") {
      const std::string& v = need_value("--seed");
      try {
        std::size_t pos = 0;
        a.seed = std::stoull(v, &pos);
        if (pos != v.size()) throw std::exception();
      } catch (...) {
        throw UsageError("--seed expects an unsigned integer, got '" + v + "'");
      }
    } else if (t == "--out") {
      a.out = need_value("--out");
    } else {
      throw UsageError("unknown flag '" + t + "'");
    }
  }
  return a;
}

Config resolve_config(const Args& a, std::map<std::string, std::string> defaults,
                      const std::set<std::string>& known) {
  Config cfg(std::move(defaults));
  try {
    if (!a.config_file.empty()) cfg.merge(Config::parse_file(a.config_file));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  for (const auto& [k, v] : a.sets) cfg.set(k, v);
  if (a.seed) cfg.set("seed", std::to_string(*a.seed));
  if (a.out) cfg.set("out", *a.out);
  try {
    cfg.validate(known);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  return cfg;
}

std::set<std::string> keys_of(const std::map<std::string, std::string>& m) {
  std::set<std::string> s;
  for (const auto& [k, v] : m) s.insert(k);
  return s;
}

void write_resolved(const Config& cfg, const std::string& out_dir,
                    const std::string& sub) {
  std::filesystem::create_directories(out_dir);
  std::ofstream f(out_dir + "/resolved.cfg");
  if (!f) throw std::runtime_error("cannot write resolved.cfg");
  f << "# subcommand: " << sub << "\n" << cfg.serialize();
}

// ---- gen-data --------------------------------------------------------------

const std::map<std::string, std::string> kGenDefaults = {
    {"seed", "1"},       {"out", "."},
    {"n", "1000"},       {"len_min", "1"},
    {"len_max", "8"},    {"mix_none", "1"},
    {"mix_perspective", "0"}, {"mix_curved", "0"},
    {"charset", "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"},
    {"height", "32"},    {"width", "128"},
    {"noise_sigma", "0.03"},
};

int cmd_gen_data(const Args& a) {
  Config cfg = resolve_config(a, kGenDefaults, keys_of(kGenDefaults));
  CorpusConfig cc;
  std::string out;
  std::uint64_t seed;
  try {
    cc.n = cfg.geti("n");
    cc.len_min = cfg.geti("len_min");
    cc.len_max = cfg.geti("len_max");
    cc.mix_none = cfg.getd("mix_none");
    cc.mix_perspective = cfg.getd("mix_perspective");
    cc.mix_curved = cfg.getd("mix_curved");
    cc.charset = cfg.str("charset");
    cc.render.height = cfg.geti("height");
    cc.render.width = cfg.geti("width");
    cc.render.noise_sigma = cfg.getd("noise_sigma");
    out = cfg.str("out");
    seed = cfg.getu("seed");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  write_resolved(cfg, out, "gen-data");
  make_corpus(out, cc, seed);
  std::cout << "wrote " << cc.n << " samples to " << out << "\n";
  return 0;
}

// ---- shared model/train config plumbing ------------------------------------

const std::map<std::string, std::string> kModelDefaults = {
    {"variant", "serial_sp"}, {"d_s", "256"},      {"d_a", "256"},
    {"d_e", "64"},            {"d_p", "64"},       {"k", "1"},
    {"delta_max", "0.5"},     {"enc_stem", "32"},  {"enc_w1", "64"},
    {"enc_w2", "128"},        {"channels", "256"}, {"rect_k", "20"},
    {"rect_identity", "off"}, {"rect_out_h", "32"}, {"rect_out_w", "128"},
};

ModelConfig model_cfg_from(const Config& cfg, int t_max, int v) {
  ModelConfig mc;
  mc.variant = variant_from_name(cfg.str("variant"));
  mc.d_s = cfg.geti("d_s");
  mc.d_a = cfg.geti("d_a");
  mc.d_e = cfg.geti("d_e");
  mc.d_p = cfg.geti("d_p");
  mc.k = cfg.geti("k");
  mc.delta_max = cfg.getd("delta_max");
  mc.enc.stem = cfg.geti("enc_stem");
  mc.enc.w1 = cfg.geti("enc_w1");
  mc.enc.w2 = cfg.geti("enc_w2");
  mc.enc.channels = cfg.geti("channels");
  mc.rect.K = cfg.geti("rect_k");
  mc.rect.identity = cfg.getb("rect_identity");
  mc.rect.out_h = cfg.geti("rect_out_h");
  mc.rect.out_w = cfg.geti("rect_out_w");
  mc.T_max = t_max;
  mc.V = v;
  return mc;
}

const std::map<std::string, std::string> kTrainLoopDefaults = {
    {"seed", "1"},          {"out", "."},          {"data", ""},
    {"batch", "100"},       {"epochs", "10"},      {"lambda", "1"},
    {"t_max", "25"},        {"dist", "adjacent_l1"},
    {"dist_on_parallel", "off"}, {"lr_drop1", "5"}, {"lr_drop2", "7"},
    {"clip_norm", "5"},     {"timing", "on"},      {"log_steps", "off"},
};

TrainConfig train_cfg_from(const Config& cfg) {
  TrainConfig tc;
  tc.batch = cfg.geti("batch");
  tc.epochs = cfg.geti("epochs");
  tc.lambda = cfg.getd("lambda");
  tc.t_max = cfg.geti("t_max");
  tc.seed = cfg.getu("seed");
  tc.dist = dist_variant_from_name(cfg.str("dist"));
  tc.dist_on_parallel = cfg.getb("dist_on_parallel");
  tc.lr_drop1 = cfg.geti("lr_drop1");
  tc.lr_drop2 = cfg.geti("lr_drop2");
  tc.clip_norm = cfg.getd("clip_norm");
  tc.timing = cfg.getb("timing");
  tc.log_steps = cfg.getb("log_steps");
  tc.out_dir = cfg.str("out");
  return tc;
}

int cmd_train(const Args& a) {
  std::map<std::string, std::string> defaults = kTrainLoopDefaults;
  defaults.insert(kModelDefaults.begin(), kModelDefaults.end());
  Config cfg = resolve_config(a, defaults, keys_of(defaults));

  TrainConfig tc;
  std::string data_dir;
  std::uint64_t seed;
  try {
    tc = train_cfg_from(cfg);
    data_dir = cfg.str("data");
    seed = cfg.getu("seed");
    if (data_dir.empty()) throw std::invalid_argument("train requires data=DIR");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  Dataset data = load_dataset(data_dir);
  ModelConfig mc;
  try {
    mc = model_cfg_from(cfg, tc.t_max, data.vocab.size());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  write_resolved(cfg, tc.out_dir, "train");
  Model model = Model::init(mc, data.vocab, seed);
  TrainResult r = train(model, data, tc);
  std::cout << "best val seq_acc " << r.best_val_acc << " at epoch "
            << r.best_epoch << "; checkpoint " << r.best_ckpt << "\n";
  return 0;
}

// ---- eval ------------------------------------------------------------------

const std::map<std::string, std::string> kEvalDefaults = {
    {"seed", "1"},   {"out", "."},    {"data", ""},
    {"checkpoint", ""}, {"split", "test"}, {"t_max", "25"},
    {"lambda", "1"}, {"dist", "adjacent_l1"}, {"dist_on_parallel", "off"},
    {"timing", "on"},
};

int cmd_eval(const Args& a) {
  Config cfg = resolve_config(a, kEvalDefaults, keys_of(kEvalDefaults));
  std::string data_dir, ckpt, split, out;
  TrainConfig tc;
  bool timing;
  try {
    data_dir = cfg.str("data");
    ckpt = cfg.str("checkpoint");
    split = cfg.str("split");
    out = cfg.str("out");
    tc.t_max = cfg.geti("t_max");
    tc.lambda = cfg.getd("lambda");
    tc.dist = dist_variant_from_name(cfg.str("dist"));
    tc.dist_on_parallel = cfg.getb("dist_on_parallel");
    timing = cfg.getb("timing");
    if (data_dir.empty()) throw std::invalid_argument("eval requires data=DIR");
    if (ckpt.empty()) throw std::invalid_argument("eval requires checkpoint=FILE");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  Dataset data = load_dataset(data_dir);
  Model model = Model::load(ckpt);
  auto t0 = std::chrono::steady_clock::now();
  EvalResult r = evaluate(model, data, split, tc);
  double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  write_resolved(cfg, out, "eval");
  EpochRow row;
  row.epoch = 0;
  row.split = split;
  row.loss_total = r.loss_total;
  row.loss_rec = r.loss_rec;
  row.loss_dist = r.loss_dist;
  row.seq_acc = r.seq_acc;
  row.mean_steps = r.mean_steps;
  row.wall_sec = timing ? wall : 0.0;
  {
    std::ofstream f(out + "/eval.csv");
    if (!f) throw std::runtime_error("cannot write eval.csv");
    f << metrics_csv_header() << "\n" << metrics_csv_row(row) << "\n";
  }
  {
    std::ofstream f(out + "/per_length.json");
    f << r.per_length_json() << "\n";
  }
  std::cout << split << " seq_acc " << r.seq_acc << " over " << r.n
            << " samples\n";
  return 0;
}

// ---- bench -----------------------------------------------------------------

const std::map<std::string, std::string> kBenchDefaults = {
    {"seed", "1"},  {"out", "."},  {"c", "256"},  {"hp", "4"},
    {"wp", "16"},   {"d_s", "256"}, {"d_a", "256"}, {"d_p", "64"},
    {"d_e", "64"},  {"k", "1"},    {"t", "25"},   {"reps", "100"},
    {"n_images", "2"},
    {"charset", "ABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789"},
};

int cmd_bench(const Args& a) {
  Config cfg = resolve_config(a, kBenchDefaults, keys_of(kBenchDefaults));
  BenchDims dims;
  std::string out, charset;
  std::uint64_t seed;
  int reps, n_images;
  try {
    dims.C = cfg.geti("c");
    dims.Hp = cfg.geti("hp");
    dims.Wp = cfg.geti("wp");
    dims.d_s = cfg.geti("d_s");
    dims.d_a = cfg.geti("d_a");
    dims.d_p = cfg.geti("d_p");
    dims.d_e = cfg.geti("d_e");
    dims.k = cfg.geti("k");
    dims.T = cfg.geti("t");
    reps = cfg.geti("reps");
    n_images = cfg.geti("n_images");
    out = cfg.str("out");
    charset = cfg.str("charset");
    seed = cfg.getu("seed");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  Vocabulary vocab = Vocabulary::from_charset(charset);
  dims.V = vocab.size();

  auto make_model = [&](Variant v) {
    ModelConfig mc;
    mc.variant = v;
    mc.enc.channels = dims.C;
    mc.d_s = dims.d_s;
    mc.d_a = dims.d_a;
    mc.d_e = dims.d_e;
    mc.d_p = dims.d_p;
    mc.k = dims.k;
    mc.T_max = dims.T;
    mc.V = dims.V;
    return Model::init(mc, vocab, seed);
  };
  Model attn_model = make_model(Variant::attention);
  Model sp_model = make_model(Variant::serial_sp);

  Rng rng(seed ^ 0xbe9c);
  std::vector<Tensor> feats;
  for (int i = 0; i < n_images; ++i) {
    Tensor f = Tensor::zeros({dims.C, dims.Hp, dims.Wp});
    for (int j = 0; j < f.size(); ++j) f[j] = rng.gaussian();
    feats.push_back(f);
  }

  std::map<std::string, FlopsSide> analytic{
      {"attention", flops_model_attention(dims)},
      {"single_point", flops_model_single_point(dims)}};
  std::map<std::string, Measured> measured{
      {"attention", measure_decode(attn_model, feats, dims.T, reps)},
      {"single_point", measure_decode(sp_model, feats, dims.T, reps)}};

  // instrumented reads on a forced 3-step decode
  std::vector<int> dummy(std::min(2, dims.T - 1), 0);
  ReadLog la, ls;
  attn_model.decode(feats[0], dims.T, DecodeMode::teacher_forced, dummy, &la);
  sp_model.decode(feats[0], dims.T, DecodeMode::teacher_forced, dummy, &ls);

  auto j = nlohmann::json::parse(bench_report_json(dims, analytic, measured));
  j["reads"]["attention"] = max_reads_per_step(la);
  j["reads"]["single_point"] = max_reads_per_step(ls);

  write_resolved(cfg, out, "bench");
  std::ofstream f(out + "/bench.json");
  if (!f) throw std::runtime_error("cannot write bench.json");
  f << j.dump(2) << "\n";
  std::cout << "attention median " << measured["attention"].median_ms
            << " ms, single_point median " << measured["single_point"].median_ms
            << " ms\n";
  return 0;
}

// ---- analyze-attn ----------------------------------------------------------

const std::map<std::string, std::string> kAnalyzeDefaults = {
    {"seed", "1"}, {"out", "."},   {"data", ""},
    {"checkpoint", ""}, {"split", "val"}, {"t_max", "25"},
    {"limit", "100"},
};

int cmd_analyze_attn(const Args& a) {
  Config cfg = resolve_config(a, kAnalyzeDefaults, keys_of(kAnalyzeDefaults));
  std::string data_dir, ckpt, split, out;
  int t_max, limit;
  try {
    data_dir = cfg.str("data");
    ckpt = cfg.str("checkpoint");
    split = cfg.str("split");
    out = cfg.str("out");
    t_max = cfg.geti("t_max");
    limit = cfg.geti("limit");
    if (data_dir.empty()) throw std::invalid_argument("analyze-attn requires data=DIR");
    if (ckpt.empty())
      throw std::invalid_argument("analyze-attn requires checkpoint=FILE");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }

  Model model = Model::load(ckpt);
  if (model.cfg.variant != Variant::attention)
    throw std::runtime_error("checkpoint is not an attention model");
  Dataset data = load_dataset(data_dir);
  if (model.vocab.symbols != data.vocab.symbols)
    throw std::runtime_error("model/dataset vocabulary mismatch");

  std::vector<PeakednessStep> steps;
  std::vector<int> idx = data.split_indices(split);
  int used = 0;
  for (int i : idx) {
    if (used >= limit) break;
    Tensor img = image_tensor(data.images[i], data.height, data.width);
    DecodeResult r = model.decode(model.features(img), t_max, DecodeMode::greedy);
    for (std::size_t t = 0; t < r.attn_weights.size(); ++t)
      steps.push_back(peakedness_step(static_cast<int>(t), r.attn_weights[t]));
    ++used;
  }
  PeakednessReport report = build_peakedness_report(steps);
  write_resolved(cfg, out, "analyze-attn");
  std::ofstream f(out + "/peakedness.json");
  if (!f) throw std::runtime_error("cannot write peakedness.json");
  f << report.to_json() << "\n";
  std::cout << "median max weight " << report.median_max_w << " over "
            << steps.size() << " steps from " << used << " images\n";
  return 0;
}

// ---- visualize -------------------------------------------------------------

const std::map<std::string, std::string> kVisualizeDefaults = {
    {"seed", "1"}, {"out", "."}, {"data", ""},
    {"checkpoint", ""}, {"ids", ""}, {"t_max", "25"},
};

int cmd_visualize(const Args& a) {
  Config cfg = resolve_config(a, kVisualizeDefaults, keys_of(kVisualizeDefaults));
  std::string data_dir, ckpt, ids_str, out;
  int t_max;
  try {
    data_dir = cfg.str("data");
    ckpt = cfg.str("checkpoint");
    ids_str = cfg.str("ids");
    out = cfg.str("out");
    t_max = cfg.geti("t_max");
    if (data_dir.empty()) throw std::invalid_argument("visualize requires data=DIR");
    if (ckpt.empty())
      throw std::invalid_argument("visualize requires checkpoint=FILE");
    if (ids_str.empty())
      throw std::invalid_argument("visualize requires ids=ID[,ID...]");
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  std::vector<int> ids;
  {
    std::istringstream is(ids_str);
    std::string tok;
    while (std::getline(is, tok, ',')) {
      try {
        ids.push_back(std::stoi(tok));
      } catch (...) {
        throw UsageError("bad sample id '" + tok + "'");
      }
    }
  }

  Model model = Model::load(ckpt);
  if (model.cfg.variant == Variant::attention)
    throw std::runtime_error("trajectories need a single-point checkpoint");
  Dataset data = load_dataset(data_dir);
  if (model.vocab.symbols != data.vocab.symbols)
    throw std::runtime_error("model/dataset vocabulary mismatch");

  write_resolved(cfg, out, "visualize");
  for (int id : ids) {
    int found = -1;
    for (std::size_t i = 0; i < data.entries.size(); ++i)
      if (data.entries[i].id == id) { found = static_cast<int>(i); break; }
    if (found < 0)
      throw std::runtime_error("sample id " + std::to_string(id) +
                               " not in the dataset");
    Tensor img = image_tensor(data.images[found], data.height, data.width);
    Tensor rectified = model.rect.apply(img);
    DecodeResult r = model.decode(model.features(img), t_max, DecodeMode::greedy);
    std::string base = out + "/traj_" + std::to_string(id);
    export_trajectory(r.trajectory, rectified, base + ".json", base + ".ppm");
    std::cout << "sample " << id << " -> '"
              << data.vocab.decode(r.predicted_label(data.vocab.eos_index()))
              << "' (" << r.trajectory.size() << " steps)\n";
  }
  return 0;
}

}  // namespace

int cli_run(const std::vector<std::string>& args) {
  try {
    if (args.empty()) throw UsageError("missing subcommand");
    Args a = parse_args(args);
    if (a.sub == "gen-data") return cmd_gen_data(a);
    if (a.sub == "train") return cmd_train(a);
    if (a.sub == "eval") return cmd_eval(a);
    if (a.sub == "bench") return cmd_bench(a);
    if (a.sub == "analyze-attn") return cmd_analyze_attn(a);
    if (a.sub == "visualize") return cmd_visualize(a);
    throw UsageError("unknown subcommand '" + a.sub + "'");
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << kUsage;
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}

}  // namespace spdn
