#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <json.hpp>

#include "spdn/bench.hpp"

using namespace spdn;

namespace {

BenchDims default_dims() {
  BenchDims d;
  d.V = 37;
  return d;
}

Model tiny_model(Variant v, int k = 1) {
  ModelConfig cfg;
  cfg.variant = v;
  cfg.rect.identity = true;
  cfg.rect.out_h = 16;
  cfg.rect.out_w = 32;
  cfg.enc.stem = 2;
  cfg.enc.w1 = 2;
  cfg.enc.w2 = 3;
  cfg.enc.channels = 4;
  cfg.d_s = 8;
  cfg.d_a = 6;
  cfg.d_e = 4;
  cfg.d_p = 4;
  cfg.k = k;
  cfg.T_max = 12;
  Vocabulary vocab = Vocabulary::from_charset("AB");
  cfg.V = vocab.size();
  return Model::init(cfg, vocab, 17);
}

}  // namespace

TEST_CASE("hand-counted terms: weighted sum and bilinear gather") {
  BenchDims d = default_dims();
  FlopsSide attn = flops_model_attention(d);
  CHECK(attn.formula_terms.at("context") == 2.0 * 64 * 256);  // 32768

  FlopsSide sp = flops_model_single_point(d);
  CHECK(sp.formula_terms.at("bilinear") == 4.0 * 1 * 256 * 3);  // 3072
}

TEST_CASE("totals recompute exactly from the formula terms") {
  for (int k : {1, 2, 4}) {
    BenchDims d = default_dims();
    d.k = k;
    for (const FlopsSide& f :
         {flops_model_attention(d), flops_model_single_point(d)}) {
      double s = 0;
      for (const auto& [name, v] : f.formula_terms) s += v;
      CHECK(f.per_step == s);
      CHECK(f.per_seq == f.per_step * d.T);
    }
  }
}

TEST_CASE("attention context cost scales with the map, single-point does not") {
  BenchDims small = default_dims();  // 4x16
  BenchDims big = default_dims();
  big.Hp = 8;
  big.Wp = 32;

  FlopsSide a_small = flops_model_attention(small);
  FlopsSide a_big = flops_model_attention(big);
  double ratio = a_big.per_step_context / a_small.per_step_context;
  CHECK(ratio == doctest::Approx(4.0).epsilon(1e-12));  // every term is linear in H'W'
  CHECK(ratio >= 3.9);

  FlopsSide s_small = flops_model_single_point(small);
  FlopsSide s_big = flops_model_single_point(big);
  CHECK(s_small.per_step == s_big.per_step);
  CHECK(s_small.per_step_context == s_big.per_step_context);
}

TEST_CASE("degenerate one-position map brings the context costs close") {
  BenchDims d = default_dims();
  d.Hp = 1;
  d.Wp = 1;
  FlopsSide a = flops_model_attention(d);
  FlopsSide s = flops_model_single_point(d);
  double ratio = a.per_step_context / s.per_step_context;
  CHECK(ratio > 0.2);
  CHECK(ratio < 5.0);
}

TEST_CASE("dims must be positive") {
  BenchDims d = default_dims();
  d.C = 0;
  CHECK_THROWS_AS(flops_model_attention(d), std::invalid_argument);
  BenchDims d2 = default_dims();
  d2.k = 0;
  CHECK_THROWS_AS(flops_model_single_point(d2), std::invalid_argument);
}

TEST_CASE("decode timing is repeatable and guards its repetition floor") {
  Model m = tiny_model(Variant::serial_sp);
  Rng rng(4);
  std::vector<Tensor> feats;
  for (int i = 0; i < 4; ++i) {
    Tensor img = Tensor::zeros({1, 16, 32});
    for (int j = 0; j < img.size(); ++j) img[j] = rng.uniform();
    feats.push_back(m.features(img));
  }
  CHECK_THROWS_AS(measure_decode(m, feats, 5, 50), std::invalid_argument);
  CHECK_THROWS_AS(measure_decode(m, {}, 5, 100), std::invalid_argument);

  Measured a = measure_decode(m, feats, 5, 150);
  Measured b = measure_decode(m, feats, 5, 150);
  CHECK(a.reps == 150);
  CHECK(a.median_ms > 0.0);
  CHECK(a.p10_ms <= a.median_ms);
  CHECK(a.median_ms <= a.p90_ms);
  CHECK(std::abs(a.median_ms - b.median_ms) / a.median_ms < 0.2);
}

TEST_CASE("encode timing runs on the shared path") {
  Model m = tiny_model(Variant::attention);
  Rng rng(5);
  std::vector<Tensor> imgs;
  for (int i = 0; i < 2; ++i) {
    Tensor img = Tensor::zeros({1, 16, 32});
    for (int j = 0; j < img.size(); ++j) img[j] = rng.uniform();
    imgs.push_back(img);
  }
  Measured e = measure_encode(m, imgs, 100);
  CHECK(e.reps == 100);
  CHECK(e.median_ms > 0.0);
}

TEST_CASE("read-log maximum reflects the widest step") {
  ReadLog log;
  log.begin_step();
  log.touch(0, 0);
  log.touch(0, 1);
  log.begin_step();
  log.touch(1, 1);
  log.touch(1, 2);
  log.touch(2, 2);
  CHECK(max_reads_per_step(log) == 3);
  CHECK(max_reads_per_step(ReadLog{}) == 0);
}

TEST_CASE("report JSON carries dims, convention, analytics and timings") {
  BenchDims d = default_dims();
  std::map<std::string, FlopsSide> analytic{
      {"attention", flops_model_attention(d)},
      {"single_point", flops_model_single_point(d)}};
  Measured m;
  m.median_ms = 1.5;
  m.p10_ms = 1.4;
  m.p90_ms = 1.7;
  m.reps = 100;
  std::map<std::string, Measured> measured{{"single_point", m}};

  auto j = nlohmann::json::parse(bench_report_json(d, analytic, measured));
  CHECK(j.at("flop_convention") == "mul1_add1_nl4");
  CHECK(j.at("dims").at("C") == 256);
  CHECK(j.at("analytic").at("attention").contains("formula_terms"));
  double per_step = j.at("analytic").at("attention").at("per_step").get<double>();
  double s = 0;
  for (auto& [name, v] :
       j.at("analytic").at("attention").at("formula_terms").items())
    s += v.get<double>();
  CHECK(per_step == doctest::Approx(s).epsilon(1e-12));
  CHECK(j.at("measured").at("single_point").at("median_ms") == 1.5);
  CHECK(j.at("measured").at("single_point").at("reps") == 100);
}
