#pragma once

#include "tsenkf/filters.hpp"
#include "tsenkf/gpc.hpp"
#include "tsenkf/linalg.hpp"
#include "tsenkf/rng.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace tsenkf {

enum class FilterFlavor { Plain, NormalScore };
enum class NewPriorBuilder { EnKF, ES };
enum class StageTwoStart { AfterStageOne, FromFirstStep };

struct StageConfig {
  int n1 = 0, n2 = 0;  // stage ensemble sizes
  int M1 = 0, M2 = 0;  // per-node basis counts of the two reduced models
  int I1 = 0, I2 = 0;  // stage-one steps and total steps
  int N0 = 2;          // surrogate total degree
  FilterFlavor flavor = FilterFlavor::Plain;
  NewPriorBuilder new_prior_builder = NewPriorBuilder::EnKF;
  StageTwoStart stage_two_start = StageTwoStart::AfterStageOne;
  NoiseModel noise = NoiseModel::known(1.0);
  double l1_alpha = 1e-8;
  bool use_surrogate = true;         // off: stage two calls the model directly
  bool refresh_basis_each_step = false;
  int threads = 1;
  Vec lo, hi;  // open box for NormalScore; empty means unbounded

  void validate(int dim) const;  // n1 < n2, M1 < M2, 0 <= I1 < I2
};

// Draws one member; streams are keyed by the caller so draws stay
// reproducible under any scheduling.
struct PriorSampler {
  int dim = 0;
  std::function<Vec(RngStream&)> draw;
};

// theta -> observations for data steps lo..hi (1-based, inclusive),
// stacked step-major. One call covers a step range so a single transient
// solve can serve the sequential filter, the smoother, and training.
struct SteppedModel {
  int n_steps = 0;
  int n_d = 0;
  std::function<Vec(const Vec&, int lo, int hi)> window;
};

struct TwoStageModels {
  SteppedModel coarse;  // M1-basis model, stage one
  SteppedModel fine;    // M2-basis model, stage-two training / direct mode
  // Called with the current analysis mean before each stage-two step when
  // refresh_basis_each_step is set; may be empty.
  std::function<void(const Vec&)> refresh_fine;
};

// Empirical moments of the stage-one final analysis. score_space marks
// moments taken after the normal-score transform; sampling then maps the
// Gaussian draws back through the transform.
struct NewPrior {
  Vec mean;
  Mat cov;  // symmetrized, eigenvalues floored at 1e-12 * max
  bool score_space = false;
};

NewPrior new_prior_from_ensemble(const Mat& members, bool score_space = false);
// columns are members; draws use streams (seed, 0, j, NewPriorDraw)
Mat sample_new_prior(const NewPrior& prior, int n, std::uint64_t seed);

struct RunReport {
  std::vector<int> steps;  // data-step index of each record below
  std::vector<Mat> analyses;
  std::vector<double> sigma2;
  std::vector<double> forecast_discrepancy;
  Mat stage_one_final;     // empty for single-stage drivers
  Mat initial_ensemble;    // stage-two start (or run start)
  NewPrior new_prior;      // meaningful for the two-stage drivers only
  double stage_one_seconds = 0.0;
  double stage_two_seconds = 0.0;

  const Mat& final_ensemble() const { return analyses.back(); }
};

// Sequential filter with one model for all steps; ensemble size cfg.n2.
RunReport run_standard_enkf(const PriorSampler& prior, const StageConfig& cfg,
                            const std::vector<Vec>& data,
                            const SteppedModel& model, std::uint64_t seed);

// Single global update against all I2 steps at once; ensemble size cfg.n2.
RunReport run_smoother(const PriorSampler& prior, const StageConfig& cfg,
                       const std::vector<Vec>& data, const SteppedModel& model,
                       std::uint64_t seed);

// Stage one: cfg.I1 steps (or one smoother pass) on the coarse model with
// n1 members, then empirical new-prior moments. Stage two: n2 fresh draws,
// then per step a gPC surrogate is rebuilt from the current ensemble's
// empirical Gaussian (training responses from the fine model at Q = P
// nodes) and the filter assimilates against the surrogate. Step k draws
// use streams keyed (seed, k, member), so disabling the surrogate
// reproduces a standard run over the same steps bit for bit.
RunReport run_two_stage(const PriorSampler& prior, const StageConfig& cfg,
                        const std::vector<Vec>& data, TwoStageModels& models,
                        std::uint64_t seed);

// Training-node generation and fit for one stage-two step; exposed for
// testing. members are columns; the returned surrogate standardizes with
// the ensemble moments (Hermite) or the configured box (Legendre).
Surrogate build_step_surrogate(const Mat& members, const StageConfig& cfg,
                               const SteppedModel& fine, int step,
                               std::uint64_t seed, Transform* transform);

} // namespace tsenkf
