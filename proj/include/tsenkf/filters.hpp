#pragma once

#include "tsenkf/linalg.hpp"
#include "tsenkf/rng.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <vector>

namespace tsenkf {

// Observation-noise variance: either fixed, or carrying an inverse-gamma
// hyperprior whose scale is refreshed from each member's own residual.
struct NoiseModel {
  enum class Kind { Known, Hyper };
  Kind kind = Kind::Known;
  double sigma2 = 0.0;  // Known
  double n_s = 0.0;     // Hyper: alpha = n_s/2, beta = sigma_s^2 * n_s

  static NoiseModel known(double sigma2);
  static NoiseModel hyper(double n_s);
};

// Columns are members throughout this module.
Vec ensemble_mean(const Mat& members);
Mat ensemble_cov(const Mat& members);  // divisor M-1

using ObsMap = std::function<Vec(const Vec&)>;

// Evaluates the map once per member column. Results land by column index,
// so the output does not depend on the thread count. Exceptions from the
// map are rethrown after all workers join.
Mat apply_obs_map(const ObsMap& h, const Mat& members, int n_threads = 1);

// One draw of the noise variance given a member's squared residual; the
// per-step variance is the ensemble average of these draws. Hyper mode
// needs n_d > n_p so sigma_s^2 = residual_sq / (n_d - n_p) is defined.
double sample_noise_variance(const NoiseModel& noise, double residual_sq,
                             int n_d, int n_p, RngStream& rng);

// K = Cov(theta, Z) Cov(Z, Z)^{-1} with divisor M-1 and ridge
// 1e-10 trace/n_d on Cov(Z, Z). Z is taken as given; callers pass the
// perturbed simulated observations, so no separate noise term is added.
// A constant Z gives exactly K = 0.
Mat kalman_gain(const Mat& theta, const Mat& Z);

struct AnalysisResult {
  Mat analysis;                        // n_p x M
  double sigma2 = 0.0;                 // perturbation variance this step
  double forecast_discrepancy = 0.0;   // mean_j ||d - Z_j||^2 before update
};

// One analysis update from forecast members theta_f and their simulated
// observations Z = H(theta_f). Perturbation and hyperparameter draws use
// streams keyed by (seed, step, member), so a fixed seed reproduces the
// run regardless of how members were scheduled.
AnalysisResult enkf_analysis(const Mat& theta_f, const Mat& Z, const Vec& d,
                             const NoiseModel& noise, std::uint64_t seed,
                             std::uint64_t step);

// Single global update against all stacked observations.
AnalysisResult ensemble_smoother(const Mat& theta, const Mat& Z_stacked,
                                 const Vec& d_stacked, const NoiseModel& noise,
                                 std::uint64_t seed, std::uint64_t step = 0);

// Componentwise rank map to standard-normal quantiles at plotting
// positions (rank - 0.5)/M; tied values share the average of their group's
// quantiles. refs/quants hold the deduplicated table per component; a
// component whose values are all equal is flagged and passed through.
struct NormalScoreMap {
  std::vector<Vec> refs;
  std::vector<Vec> quants;
  std::vector<bool> degenerate;

  int n_components() const { return static_cast<int>(refs.size()); }
};

NormalScoreMap fit_normal_score(const Mat& members);
// Piecewise-linear in the table, linear extrapolation beyond it; exact on
// table knots, so backward(forward(x)) == x for every fitted value.
Mat normal_score_forward(const NormalScoreMap& map, const Mat& members);
Mat normal_score_backward(const NormalScoreMap& map, const Mat& scores);

// Score-space coordinates for the analysis update. fit() is called on the
// forecast ensemble before each use; stateless transforms ignore it.
class Transform {
public:
  virtual ~Transform() = default;
  virtual void fit(const Mat& members) = 0;
  virtual Mat forward(const Mat& members) const = 0;
  virtual Mat backward(const Mat& scores) const = 0;
};

// Empirical rank transform refitted from every forecast ensemble.
class EmpiricalScoreTransform final : public Transform {
public:
  void fit(const Mat& members) override;
  Mat forward(const Mat& members) const override;
  Mat backward(const Mat& scores) const override;
  const NormalScoreMap& map() const { return map_; }

private:
  NormalScoreMap map_;
};

// Probit map for box-bounded parameters: q = Phi^{-1}((x-lo)/(hi-lo)).
// backward() lands strictly inside the box for any finite score, so
// analysis members can never leave it.
class ProbitTransform final : public Transform {
public:
  ProbitTransform(Vec lo, Vec hi);
  void fit(const Mat&) override {}
  Mat forward(const Mat& members) const override;
  Mat backward(const Mat& scores) const override;

private:
  Vec lo_, hi_;
};

// Analysis with gain and update in score space, mapped back afterwards.
AnalysisResult ns_enkf_analysis(const Mat& theta_f, const Mat& Z, const Vec& d,
                                const NoiseModel& noise, Transform& transform,
                                std::uint64_t seed, std::uint64_t step);

} // namespace tsenkf
