#pragma once

#include "tsenkf/config.hpp"
#include "tsenkf/fem.hpp"
#include "tsenkf/gmsfem.hpp"
#include "tsenkf/grid.hpp"
#include "tsenkf/kle.hpp"
#include "tsenkf/linalg.hpp"
#include "tsenkf/params.hpp"
#include "tsenkf/two_stage.hpp"

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace tsenkf {

enum class ExperimentKind { Channel, Source, Hierarchical };
enum class RunMethod { Standard, TwoStage, NsTwoStage, Smoother };

std::string to_string(ExperimentKind kind);
std::string to_string(RunMethod method);
RunMethod run_method_from_string(const std::string& name);

// Uniform sensor lattice with both endpoints included on each axis.
struct SensorLayout {
  int nx = 5, ny = 5;
  double xlo = 0.1, xhi = 0.9, ylo = 0.1, yhi = 0.9;

  int count() const { return nx * ny; }
  std::vector<std::pair<double, double>> points() const;
};

// Measurement instants of data step I (1-based): start + stride*I,
// advancing by spacing up to stop + stride*I inclusive.
struct ObsSchedule {
  double start = 0.012, stop = 0.018, spacing = 0.002, stride = 0.01;

  int instants_per_step() const;
  std::vector<double> step_times(int step) const;
};

struct ExperimentConfig {
  ExperimentKind kind = ExperimentKind::Channel;
  std::uint64_t seed = 1;        // filter-side randomness
  std::uint64_t truth_seed = 0;  // truth draw, data noise, snapshot samples
  int fine_n = 32, coarse_n = 4;
  double T = 0.11;
  double dt_truth = 0.001, dt_assim = 0.002;
  double gamma = 0.5;     // fixed fractional order; a parameter for Source
  double f_const = 10.0;  // constant-load experiments
  double sigma = 0.01;    // measurement noise std used for data generation
  SensorLayout sensors;
  ObsSchedule schedule;
  StageConfig stage;
  int snap_n_theta = 10, m_snap = 20;

  // channel: region log-permeability values and the boundary-curve basis
  Vec channel_c_truth;
  double c_prior_std = 2.0;
  double curve_kle_var = 1.0, curve_kle_l2 = 0.1;
  int curve_modes = 5;

  // source: (gamma, x1, y1, x2, y2, ...) truth and the fixed conductivity
  Vec source_truth;
  std::vector<double> pulse_strengths{3.0, 1.0};
  double pulse_tau = 0.1;
  std::vector<double> switch_times{0.05, 0.1};
  double k_background = 1.0, k_inclusion = 100.0;
  std::vector<std::array<double, 4>> inclusions;  // xlo xhi ylo yhi

  // hierarchical: anisotropic squared-exponential log-permeability field
  double field_lx = 0.2, field_ly = 0.3, field_var = 1.0;
  int field_modes = 20;
  int kle_grid = 32;  // build resolution; modes extended to the fine nodes

  int n_pulses() const { return static_cast<int>(pulse_strengths.size()); }
  int n_d() const { return sensors.count() * schedule.instants_per_step(); }
  int dim() const;

  // Reads every recognized key and then rejects unknown ones; collects all
  // problems into a single exception message.
  static ExperimentConfig from_config(Config& raw);
  // Grid/ensemble/surrogate presets per experiment; desk keeps runs short.
  void apply_scale_preset(bool paper);
  // Sorted key = value lines; parsing them back reproduces this config.
  std::string canonical_text() const;
  void validate() const;
};

// Owns the grids, parameterization, reduced models, and observation plumbing
// of one configured experiment. Window maps are thread-safe; the stage-two
// basis refresh hook is the only mutating entry point.
class Experiment {
 public:
  explicit Experiment(const ExperimentConfig& cfg);
  ~Experiment();
  Experiment(const Experiment&) = delete;
  Experiment& operator=(const Experiment&) = delete;

  const ExperimentConfig& cfg() const { return cfg_; }
  const Grid& fine_grid() const { return fine_; }
  // empty for Channel; its truth field is built from analytic curves
  const Vec& truth() const { return truth_; }
  const Vec& truth_permeability() const { return k_truth_; }

  PriorSampler prior() const;

  // Full-order fine-grid march at the truth with dt_truth; noise streams
  // are keyed (truth_seed, step, 0, DataNoise).
  std::vector<Vec> generate_data(bool with_noise) const;

  // Observation windows stacked step-major over data steps lo..hi.
  SteppedModel full_model(double dt) const;
  // Reduced observation window with a basis built at theta_bar.
  SteppedModel reduced_model_for(int m_i, const Vec& theta_bar) const;
  TwoStageModels& models() { return models_; }
  StageConfig stage_config() const { return cfg_.stage; }

  RunReport run(RunMethod method, const std::vector<Vec>& data);

  // Readings of each member column at the points at time t, marched with the
  // given dt. m_i <= 0 selects the full-order model, otherwise the stage-two
  // reduced model (basis count must match its configuration).
  Mat evaluate_at_points(const Mat& members,
                         const std::vector<std::pair<double, double>>& pts,
                         double t, double dt, int m_i) const;
  // Truth response at the points (full order, dt_truth).
  Vec truth_at_points(const std::vector<std::pair<double, double>>& pts,
                      double t) const;

  struct MetricSeries {
    std::vector<std::string> names;
    std::vector<std::vector<double>> values;  // [name][record]
  };
  MetricSeries relative_errors(const RunReport& rep) const;

  struct IntervalTable {
    std::string slice;
    int step = 0;
    double time = 0.0;
    Vec coord, truth, mean, cred_lo, cred_hi, pred_lo, pred_hi;
    bool reliable = true;
  };
  // 95% credible/predictive bands of the stage-two reduced response along
  // two solution slices at the final recorded step.
  std::vector<IntervalTable> intervals(const RunReport& rep) const;

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  ExperimentConfig cfg_;
  Grid fine_;
  Vec truth_;    // parameter-space truth; empty for Channel
  Vec k_truth_;  // fine-grid nodal permeability at the truth
  TwoStageModels models_;
};

// Linear interpolation between order statistics at rank p*(M-1), p in [0,1].
double empirical_percentile(Vec values, double p);

// Gaussian KDE with Silverman bandwidth evaluated on the grid.
Vec silverman_kde(const Vec& samples, const Vec& grid);

struct DensityCurve {
  int component = 0;
  int record = 0;  // index into rep.steps
  int step = 0;
  Vec x, pdf;
};

// All components at every recorded step; 200-point grids over mean +- 4 std.
// Degenerate components are skipped with a warning on stderr.
std::vector<DensityCurve> marginal_densities(const RunReport& rep);

struct RunTimings {
  double data_seconds = 0.0;
  double stage_one_seconds = 0.0;
  double stage_two_seconds = 0.0;
  double artifacts_seconds = 0.0;
};

// Writes config.echo and data.csv only; the generate-data entry point.
void write_data_artifacts(const Experiment& exp, const std::vector<Vec>& data,
                          const std::string& dir);

// Writes config.echo, data.csv, per-record ensemble CSVs, metrics.json,
// intervals.csv, densities.csv, and timings.json into dir.
void write_run_artifacts(const Experiment& exp, RunMethod method,
                         const RunReport& rep, const std::vector<Vec>& data,
                         const RunTimings& timings, const std::string& dir);

// Rebuilds the experiment from config.echo, re-reads the stored run, and
// rewrites the derived files (metrics.json, intervals.csv, densities.csv).
// Idempotent on a finished run directory. Returns a process exit code.
int report_run_dir(const std::string& dir);

}  // namespace tsenkf
