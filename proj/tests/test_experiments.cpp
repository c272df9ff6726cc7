#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "tsenkf/experiments.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

using namespace tsenkf;

namespace {

ExperimentConfig config_from(const std::string& text) {
  Config raw = Config::parse_string(text);
  return ExperimentConfig::from_config(raw);
}

// Small source setup; the fixed conductivity makes member and truth
// forward maps coincide at the truth parameters.
const char* kMicroSource = R"(
[experiment]
kind = source
fine_n = 12
coarse_n = 3
T = 0.1
sigma = 0.01
m_snap = 4
snap_n_theta = 1

[sensors]
nx = 3
ny = 3

[stage]
n1 = 30
n2 = 60
M1 = 2
M2 = 3
I1 = 1
I2 = 2
N0 = 1
flavor = normal-score
start = from-first-step
)";

const char* kMicroChannel = R"(
[experiment]
kind = channel
fine_n = 12
coarse_n = 3
m_snap = 4
snap_n_theta = 2

[stage]
n1 = 30
n2 = 60
M1 = 2
M2 = 3
)";

const char* kMicroHier = R"(
[experiment]
kind = hierarchical
fine_n = 12
coarse_n = 3
gamma = 1.5
f_const = 20
m_snap = 4
snap_n_theta = 2

[field]
grid = 8

[stage]
n1 = 30
n2 = 60
M1 = 2
M2 = 3
noise = hyper
noise_n_s = 0.05
)";

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

double max_abs_diff(const Vec& a, const Vec& b) {
  REQUIRE(a.size() == b.size());
  return (a - b).cwiseAbs().maxCoeff();
}

} // namespace

TEST_CASE("run methods map to and from names") {
  for (RunMethod m : {RunMethod::Standard, RunMethod::TwoStage,
                      RunMethod::NsTwoStage, RunMethod::Smoother})
    CHECK(run_method_from_string(to_string(m)) == m);
  CHECK_THROWS_AS((void)run_method_from_string("three-stage"),
                  std::invalid_argument);
}

TEST_CASE("sensor layouts enumerate x fastest") {
  SensorLayout s;
  s.nx = 2;
  s.ny = 2;
  s.xlo = 0.0;
  s.xhi = 1.0;
  s.ylo = 0.0;
  s.yhi = 1.0;
  const auto pts = s.points();
  REQUIRE(pts.size() == 4);
  CHECK(pts[0] == std::pair<double, double>(0.0, 0.0));
  CHECK(pts[1] == std::pair<double, double>(1.0, 0.0));
  CHECK(pts[2] == std::pair<double, double>(0.0, 1.0));
  CHECK(pts[3] == std::pair<double, double>(1.0, 1.0));

  SensorLayout src;
  src.nx = 5;
  src.ny = 4;
  src.xlo = 0.1;
  src.xhi = 0.9;
  src.ylo = 0.0;
  src.yhi = 1.0;
  const auto sp = src.points();
  REQUIRE(sp.size() == 20);
  for (int j = 0; j < 4; ++j)
    CHECK(sp[5 * j].second == doctest::Approx(j / 3.0).epsilon(1e-14));
  CHECK(sp[4].first == doctest::Approx(0.9));
}

TEST_CASE("observation schedules place instants inside each step") {
  ObsSchedule sch;  // 0.012..0.018 by 0.002, stride 0.01
  CHECK(sch.instants_per_step() == 4);
  const auto t1 = sch.step_times(1);
  REQUIRE(t1.size() == 4);
  CHECK(t1[0] == doctest::Approx(0.022).epsilon(1e-14));
  CHECK(t1[3] == doctest::Approx(0.028).epsilon(1e-14));

  ObsSchedule wide;
  wide.start = 0.012;
  wide.stop = 0.018;
  wide.spacing = 0.006;
  wide.stride = 0.01;
  CHECK(wide.instants_per_step() == 2);
  const auto t2 = wide.step_times(3);
  REQUIRE(t2.size() == 2);
  CHECK(t2[0] == doctest::Approx(0.042).epsilon(1e-14));
  CHECK(t2[1] == doctest::Approx(0.048).epsilon(1e-14));

  ExperimentConfig cfg = config_from(kMicroSource);
  CHECK(cfg.n_d() == 9 * 4);
  ExperimentConfig ch = config_from(kMicroChannel);
  CHECK(ch.n_d() == 25 * 4);
  CHECK(ch.dim() == 13);
  CHECK(cfg.dim() == 5);
}

TEST_CASE("configs echo canonically and reject junk") {
  ExperimentConfig cfg = config_from(kMicroSource);
  CHECK(cfg.kind == ExperimentKind::Source);
  CHECK(cfg.stage.n2 == 60);
  CHECK(cfg.stage.stage_two_start == StageTwoStart::FromFirstStep);
  CHECK(cfg.stage.lo.size() == 5);
  CHECK(cfg.stage.hi[0] == 2.0);
  cfg.validate();

  // The canonical echo is a parse fixed point.
  const std::string echo = cfg.canonical_text();
  ExperimentConfig back = config_from(echo);
  CHECK(back.canonical_text() == echo);

  CHECK_THROWS_WITH_AS(
      (void)config_from("[experiment]\nkind = channel\nbogus = 1\n"),
      doctest::Contains("bogus"), std::invalid_argument);

  // Bad values are reported together, not one at a time.
  try {
    (void)config_from(
        "[experiment]\nkind = hierarchical\ngamma = sideways\n"
        "[stage]\nflavor = smooth\n");
    FAIL("expected a config error");
  } catch (const std::invalid_argument& e) {
    const std::string msg = e.what();
    CHECK(msg.find("experiment.gamma") != std::string::npos);
    CHECK(msg.find("stage.flavor") != std::string::npos);
  }

  ExperimentConfig bad = config_from(kMicroSource);
  bad.source_truth[1] = 1.5;  // outside the box
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("scale presets pin the published sizes") {
  ExperimentConfig cfg = config_from(kMicroChannel);
  cfg.apply_scale_preset(true);
  CHECK(cfg.fine_n == 80);
  CHECK(cfg.coarse_n == 5);
  CHECK(cfg.stage.n1 == 5000);
  CHECK(cfg.stage.n2 == 10000);
  CHECK(cfg.stage.M1 == 7);
  CHECK(cfg.stage.M2 == 8);
  CHECK(cfg.stage.N0 == 3);
  cfg.apply_scale_preset(false);
  CHECK(cfg.fine_n == 32);
  CHECK(cfg.coarse_n == 4);
  CHECK(cfg.stage.n1 == 500);
  CHECK(cfg.stage.n2 == 2000);
  CHECK(cfg.stage.M2 == 8);

  ExperimentConfig src = config_from(kMicroSource);
  src.apply_scale_preset(true);
  CHECK(src.fine_n == 100);
  CHECK(src.m_snap == 10);
  CHECK(src.stage.M1 == 8);
  CHECK(src.stage.M2 == 9);
  CHECK(src.stage.N0 == 7);
  CHECK(src.stage.n1 == 2000);
  CHECK(src.stage.n2 == 3000);
}

TEST_CASE("data generation is keyed off the truth seed") {
  ExperimentConfig cfg = config_from(kMicroSource);
  Experiment exp(cfg);

  const auto clean = exp.generate_data(false);
  REQUIRE(static_cast<int>(clean.size()) == cfg.stage.I2);
  for (const Vec& d : clean) CHECK(d.size() == cfg.n_d());
  const auto clean2 = exp.generate_data(false);
  for (size_t k = 0; k < clean.size(); ++k)
    CHECK(max_abs_diff(clean[k], clean2[k]) == 0.0);

  const auto noisy = exp.generate_data(true);
  const auto noisy2 = exp.generate_data(true);
  for (size_t k = 0; k < noisy.size(); ++k) {
    CHECK(max_abs_diff(noisy[k], noisy2[k]) == 0.0);
    CHECK(max_abs_diff(noisy[k], clean[k]) > 0.0);
    // noise stays at the observation scale
    CHECK(max_abs_diff(noisy[k], clean[k]) < 10.0 * cfg.sigma);
  }

  ExperimentConfig other = cfg;
  other.truth_seed = 42;
  Experiment exp2(other);
  const auto noisy3 = exp2.generate_data(true);
  CHECK(max_abs_diff(noisy3[0], clean[0]) > 0.0);
  CHECK(max_abs_diff(noisy3[0], noisy[0]) > 0.0);

  // With the conductivity fixed, the member map at the truth reproduces
  // the noiseless data exactly.
  const SteppedModel full = exp.full_model(cfg.dt_truth);
  const Vec all = full.window(exp.truth(), 1, cfg.stage.I2);
  for (int k = 1; k <= cfg.stage.I2; ++k)
    CHECK(max_abs_diff(all.segment((k - 1) * cfg.n_d(), cfg.n_d()),
                       clean[static_cast<size_t>(k - 1)]) == 0.0);
}

TEST_CASE("windows over several steps stack the per-step responses") {
  ExperimentConfig cfg = config_from(kMicroSource);
  Experiment exp(cfg);
  const Vec theta = exp.truth();

  const SteppedModel full = exp.full_model(cfg.dt_assim);
  const Vec both = full.window(theta, 1, 2);
  const Vec a = full.window(theta, 1, 1);
  const Vec b = full.window(theta, 2, 2);
  REQUIRE(both.size() == a.size() + b.size());
  CHECK(max_abs_diff(both.head(a.size()), a) == 0.0);
  CHECK(max_abs_diff(both.tail(b.size()), b) == 0.0);

  const Vec rboth = exp.models().fine.window(theta, 1, 2);
  const Vec ra = exp.models().fine.window(theta, 1, 1);
  const Vec rb = exp.models().fine.window(theta, 2, 2);
  REQUIRE(rboth.size() == ra.size() + rb.size());
  CHECK(max_abs_diff(rboth.head(ra.size()), ra) == 0.0);
  CHECK(max_abs_diff(rboth.tail(rb.size()), rb) == 0.0);

  CHECK_THROWS_AS((void)full.window(theta, 0, 1), std::invalid_argument);
  CHECK_THROWS_AS((void)full.window(theta, 1, cfg.stage.I2 + 1),
                  std::invalid_argument);
}

TEST_CASE("pulse switching gates each source term") {
  ExperimentConfig cfg = config_from(kMicroSource);
  cfg.stage.I2 = 4;  // step 4 observes after the 0.05 switch
  Experiment exp(cfg);
  const SteppedModel full = exp.full_model(cfg.dt_assim);

  Vec theta = exp.truth();
  Vec moved = theta;
  moved[3] = 0.7;
  moved[4] = 0.7;

  // Before the switch only the first pulse drives the state, so moving
  // the second pulse changes nothing; afterwards it must.
  CHECK(max_abs_diff(full.window(theta, 1, 1), full.window(moved, 1, 1)) == 0.0);
  CHECK(max_abs_diff(full.window(theta, 4, 4), full.window(moved, 4, 4)) > 0.0);

  Vec moved1 = theta;
  moved1[1] = 0.4;
  CHECK(max_abs_diff(full.window(theta, 1, 1), full.window(moved1, 1, 1)) > 0.0);
}

TEST_CASE("relative errors match hand-computed references") {
  SUBCASE("channel curves from the zero ensemble") {
    ExperimentConfig cfg = config_from(kMicroChannel);
    Experiment exp(cfg);
    RunReport rep;
    rep.steps = {1};
    rep.analyses = {Mat::Zero(cfg.dim(), 50)};
    rep.sigma2 = {1e-4};
    rep.forecast_discrepancy = {0.0};
    const auto errs = exp.relative_errors(rep);
    REQUIRE(errs.names == std::vector<std::string>{"eps_curve1", "eps_curve2"});

    const Vec x = Vec::LinSpaced(200, 0.0, 1.0);
    Vec g1(200), g2(200);
    for (int i = 0; i < 200; ++i) {
      g1[i] = 0.7 + 0.1 * std::sin(3.0 * M_PI * x[i]);
      g2[i] = 0.4 + 0.2 * std::sin(2.0 * M_PI * x[i] + 0.1);
    }
    g1 = ChannelModel::squash(g1);
    g2 = ChannelModel::squash(g2);
    const double e1 = (Vec::Constant(200, 0.5) - g1).norm() / g1.norm();
    const double e2 = (Vec::Constant(200, 0.5) - g2).norm() / g2.norm();
    CHECK(errs.values[0][0] == doctest::Approx(e1).epsilon(1e-12));
    CHECK(errs.values[1][0] == doctest::Approx(e2).epsilon(1e-12));
    CHECK(std::abs(e1 - 0.280) < 0.005);
    CHECK(std::abs(e2 - 0.203) < 0.005);
  }

  SUBCASE("source parameter error and subdiffusion fraction") {
    ExperimentConfig cfg = config_from(kMicroSource);
    Experiment exp(cfg);
    RunReport rep;
    rep.steps = {1, 2};
    rep.analyses = {exp.truth().replicate(1, 10),
                    (2.0 * exp.truth()).replicate(1, 10)};
    rep.sigma2 = {1e-4, 1e-4};
    rep.forecast_discrepancy = {0.0, 0.0};
    const auto errs = exp.relative_errors(rep);
    REQUIRE(errs.names ==
            std::vector<std::string>{"eps_theta", "subdiffusion_fraction"});
    CHECK(errs.values[0][0] == doctest::Approx(0.0));
    CHECK(errs.values[0][1] == doctest::Approx(1.0));
    CHECK(errs.values[1][0] == 1.0);  // gamma 0.5 < 1 everywhere
    CHECK(errs.values[1][1] == 0.0);  // gamma 1.0 is not subdiffusive
  }

  SUBCASE("hierarchical field, parameter, and noise errors") {
    ExperimentConfig cfg = config_from(kMicroHier);
    Experiment exp(cfg);
    RunReport rep;
    rep.steps = {1};
    rep.analyses = {Mat::Zero(cfg.dim(), 50)};
    rep.sigma2 = {2e-4};
    rep.forecast_discrepancy = {0.0};
    const auto errs = exp.relative_errors(rep);
    REQUIRE(errs.names ==
            std::vector<std::string>{"eps_k", "eps_theta", "eps_sigma2"});
    const Vec& kt = exp.truth_permeability();
    const double ek = (Vec::Ones(kt.size()) - kt).norm() / kt.norm();
    CHECK(errs.values[0][0] == doctest::Approx(ek).epsilon(1e-12));
    CHECK(errs.values[1][0] == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(errs.values[2][0] == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("kde and percentiles behave on known samples") {
  Vec v(5);
  v << 5, 3, 1, 2, 4;
  CHECK(empirical_percentile(v, 0.0) == 1.0);
  CHECK(empirical_percentile(v, 1.0) == 5.0);
  CHECK(empirical_percentile(v, 0.5) == 3.0);
  CHECK(empirical_percentile(v, 0.25) == 2.0);
  CHECK(empirical_percentile(v, 0.125) == doctest::Approx(1.5));
  CHECK(empirical_percentile(Vec::Constant(8, 2.5), 0.9) == 2.5);

  const int n = 10000;
  RngStream rng(11, 0, 0, Tag::PriorDraw);
  Vec s(n);
  for (int i = 0; i < n; ++i) s[i] = rng.normal();
  const Vec grid = Vec::LinSpaced(200, -4.0, 4.0);
  const Vec pdf = silverman_kde(s, grid);
  CHECK(pdf.minCoeff() >= 0.0);

  int peak = 0;
  pdf.maxCoeff(&peak);
  CHECK(std::abs(grid[peak]) < 0.2);

  double integral = 0.0;
  for (int i = 1; i < grid.size(); ++i)
    integral += 0.5 * (pdf[i] + pdf[i - 1]) * (grid[i] - grid[i - 1]);
  CHECK(std::abs(integral - 1.0) < 0.01);

  CHECK_THROWS_AS((void)silverman_kde(Vec::Constant(10, 1.0), grid),
                  std::invalid_argument);
}

TEST_CASE("credible intervals cover a scalar posterior") {
  const int trials = 200, M = 200;
  int inside = 0;
  for (int t = 0; t < trials; ++t) {
    RngStream rng(7, static_cast<std::uint64_t>(t), 0, Tag::PriorDraw);
    Vec s(M);
    for (int i = 0; i < M; ++i) s[i] = rng.normal();
    const double lo = empirical_percentile(s, 0.025);
    const double hi = empirical_percentile(s, 0.975);
    CHECK(lo < hi);
    const double fresh = rng.normal();
    if (fresh >= lo && fresh <= hi) ++inside;
  }
  const double coverage = static_cast<double>(inside) / trials;
  CHECK(coverage >= 0.90);
  CHECK(coverage <= 0.99);
}

TEST_CASE("artifacts round trip byte for byte") {
  ExperimentConfig cfg = config_from(kMicroSource);
  Experiment exp(cfg);
  const auto data = exp.generate_data(true);
  const RunReport rep = exp.run(RunMethod::NsTwoStage, data);
  REQUIRE_FALSE(rep.analyses.empty());
  CHECK(rep.final_ensemble().cols() == cfg.stage.n2);

  const auto tables = exp.intervals(rep);
  REQUIRE(tables.size() == 2);
  CHECK(tables[0].slice == "y=0");
  CHECK(tables[1].slice == "x=0.9");
  for (const auto& tab : tables) {
    CHECK(tab.reliable);
    CHECK(tab.step == rep.steps.back());
    for (int i = 0; i < tab.coord.size(); ++i) {
      CHECK(tab.cred_lo[i] <= tab.cred_hi[i]);
      CHECK(tab.pred_lo[i] < tab.cred_lo[i]);
      CHECK(tab.pred_hi[i] > tab.cred_hi[i]);
    }
  }

  RunReport tiny = rep;
  for (auto& ens : tiny.analyses) ens = ens.leftCols(20).eval();
  const auto small_tables = exp.intervals(tiny);
  CHECK_FALSE(small_tables[0].reliable);

  namespace fs = std::filesystem;
  const fs::path base = fs::temp_directory_path() / "tsenkf_artifact_test";
  const std::string dir_a = (base / "a").string();
  const std::string dir_b = (base / "b").string();
  fs::remove_all(base);

  RunTimings timings;
  timings.data_seconds = 0.25;
  timings.stage_one_seconds = rep.stage_one_seconds;
  timings.stage_two_seconds = rep.stage_two_seconds;
  write_run_artifacts(exp, RunMethod::NsTwoStage, rep, data, timings, dir_a);
  write_run_artifacts(exp, RunMethod::NsTwoStage, rep, data, timings, dir_b);

  for (const char* name : {"config.echo", "data.csv", "metrics.json",
                           "intervals.csv", "densities.csv"})
    CHECK(slurp(dir_a + "/" + name) == slurp(dir_b + "/" + name));

  // Stage two restarts at step 1, so the stage-one record keeps its own file.
  CHECK(fs::exists(fs::path(dir_a) / "ensemble_stage1_step_1.csv"));
  CHECK(fs::exists(fs::path(dir_a) / "ensemble_step_1.csv"));
  CHECK(fs::exists(fs::path(dir_a) / "ensemble_step_2.csv"));

  const std::string metrics_before = slurp(dir_a + "/metrics.json");
  const std::string intervals_before = slurp(dir_a + "/intervals.csv");
  const std::string densities_before = slurp(dir_a + "/densities.csv");
  const std::string timings_before = slurp(dir_a + "/timings.json");

  REQUIRE(report_run_dir(dir_a) == 0);
  CHECK(slurp(dir_a + "/metrics.json") == metrics_before);
  CHECK(slurp(dir_a + "/intervals.csv") == intervals_before);
  CHECK(slurp(dir_a + "/densities.csv") == densities_before);
  CHECK(slurp(dir_a + "/timings.json") == timings_before);

  CHECK(report_run_dir((base / "missing").string()) == 1);
  fs::remove_all(base);
}
