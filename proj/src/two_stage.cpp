#include "tsenkf/two_stage.hpp"

#include <chrono>
#include <cmath>
#include <stdexcept>
#include <utility>

namespace tsenkf {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::unique_ptr<Transform> make_transform(const StageConfig& cfg) {
  if (cfg.flavor != FilterFlavor::NormalScore) return nullptr;
  if (cfg.lo.size() > 0)
    return std::make_unique<ProbitTransform>(cfg.lo, cfg.hi);
  return std::make_unique<EmpiricalScoreTransform>();
}

Mat draw_prior(const PriorSampler& prior, int n, std::uint64_t seed) {
  Mat theta(prior.dim, n);
  for (int j = 0; j < n; ++j) {
    RngStream rng(seed, 0, static_cast<std::uint64_t>(j), Tag::PriorDraw);
    const Vec t = prior.draw(rng);
    if (t.size() != prior.dim)
      throw std::runtime_error("prior draw has wrong dimension");
    theta.col(j) = t;
  }
  return theta;
}

Vec stack_data(const std::vector<Vec>& data, int lo, int hi) {
  Eigen::Index total = 0;
  for (int k = lo; k <= hi; ++k) total += data[k - 1].size();
  Vec d(total);
  Eigen::Index at = 0;
  for (int k = lo; k <= hi; ++k) {
    d.segment(at, data[k - 1].size()) = data[k - 1];
    at += data[k - 1].size();
  }
  return d;
}

// PSD square root after the eigenvalue floor; used for Gaussian sampling.
Mat floored_sqrt(const Mat& cov) {
  const Mat sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("covariance eigendecomposition failed");
  const double lmax = es.eigenvalues().maxCoeff();
  const double floor = lmax > 0.0 ? 1e-12 * lmax : 0.0;
  const Vec lam = es.eigenvalues().cwiseMax(floor);
  return es.eigenvectors() * lam.cwiseSqrt().asDiagonal();
}

AnalysisResult run_analysis(const Mat& theta, const Mat& Z, const Vec& d,
                            const StageConfig& cfg, Transform* transform,
                            std::uint64_t seed, std::uint64_t step) {
  if (cfg.flavor == FilterFlavor::Plain)
    return enkf_analysis(theta, Z, d, cfg.noise, seed, step);
  return ns_enkf_analysis(theta, Z, d, cfg.noise, *transform, seed, step);
}

void record(RunReport& report, int step, const AnalysisResult& res) {
  report.steps.push_back(step);
  report.analyses.push_back(res.analysis);
  report.sigma2.push_back(res.sigma2);
  report.forecast_discrepancy.push_back(res.forecast_discrepancy);
}

ObsMap step_map(const SteppedModel& model, int step) {
  return [&model, step](const Vec& t) { return model.window(t, step, step); };
}

} // namespace

void StageConfig::validate(int dim) const {
  if (n1 < 2 || n2 < 2) throw std::invalid_argument("ensemble sizes need >= 2");
  if (n1 >= n2) throw std::invalid_argument("stage sizes need n1 < n2");
  if (M1 >= M2) throw std::invalid_argument("basis counts need M1 < M2");
  if (I1 < 0 || I1 >= I2) throw std::invalid_argument("steps need 0 <= I1 < I2");
  if (N0 < 1) throw std::invalid_argument("surrogate degree must be >= 1");
  if (l1_alpha < 0.0) throw std::invalid_argument("negative l1 weight");
  if (lo.size() != hi.size()) throw std::invalid_argument("bound size mismatch");
  if (lo.size() > 0 && lo.size() != dim)
    throw std::invalid_argument("bounds do not match the parameter dimension");
}

NewPrior new_prior_from_ensemble(const Mat& members, bool score_space) {
  NewPrior prior;
  prior.mean = ensemble_mean(members);
  const Mat cov = ensemble_cov(members);
  const Mat sym = 0.5 * (cov + cov.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success)
    throw std::runtime_error("covariance eigendecomposition failed");
  const double lmax = es.eigenvalues().maxCoeff();
  const double floor = lmax > 0.0 ? 1e-12 * lmax : 0.0;
  const Vec lam = es.eigenvalues().cwiseMax(floor);
  prior.cov = es.eigenvectors() * lam.asDiagonal() *
              es.eigenvectors().transpose();
  prior.score_space = score_space;
  return prior;
}

Mat sample_new_prior(const NewPrior& prior, int n, std::uint64_t seed) {
  const Mat A = floored_sqrt(prior.cov);
  Mat out(prior.mean.size(), n);
  for (int j = 0; j < n; ++j) {
    RngStream rng(seed, 0, static_cast<std::uint64_t>(j), Tag::NewPriorDraw);
    Vec xi(prior.mean.size());
    for (int i = 0; i < xi.size(); ++i) xi[i] = rng.normal();
    out.col(j) = prior.mean + A * xi;
  }
  return out;
}

RunReport run_standard_enkf(const PriorSampler& prior, const StageConfig& cfg,
                            const std::vector<Vec>& data,
                            const SteppedModel& model, std::uint64_t seed) {
  cfg.validate(prior.dim);
  if (static_cast<int>(data.size()) < cfg.I2)
    throw std::invalid_argument("not enough data steps");
  const auto t0 = Clock::now();
  const auto transform = make_transform(cfg);

  RunReport report;
  Mat theta = draw_prior(prior, cfg.n2, seed);
  report.initial_ensemble = theta;
  for (int k = 1; k <= cfg.I2; ++k) {
    const Mat Z = apply_obs_map(step_map(model, k), theta, cfg.threads);
    const AnalysisResult res = run_analysis(theta, Z, data[k - 1], cfg,
                                            transform.get(), seed, k);
    theta = res.analysis;
    record(report, k, res);
  }
  report.stage_two_seconds = seconds_since(t0);
  return report;
}

RunReport run_smoother(const PriorSampler& prior, const StageConfig& cfg,
                       const std::vector<Vec>& data, const SteppedModel& model,
                       std::uint64_t seed) {
  cfg.validate(prior.dim);
  if (static_cast<int>(data.size()) < cfg.I2)
    throw std::invalid_argument("not enough data steps");
  const auto t0 = Clock::now();
  const auto transform = make_transform(cfg);

  RunReport report;
  Mat theta = draw_prior(prior, cfg.n2, seed);
  report.initial_ensemble = theta;

  const Vec d = stack_data(data, 1, cfg.I2);
  const ObsMap h = [&](const Vec& t) { return model.window(t, 1, cfg.I2); };
  const Mat Z = apply_obs_map(h, theta, cfg.threads);
  AnalysisResult res;
  if (cfg.flavor == FilterFlavor::Plain)
    res = ensemble_smoother(theta, Z, d, cfg.noise, seed);
  else
    res = ns_enkf_analysis(theta, Z, d, cfg.noise, *transform, seed, 0);
  record(report, cfg.I2, res);
  report.stage_two_seconds = seconds_since(t0);
  return report;
}

Surrogate build_step_surrogate(const Mat& members, const StageConfig& cfg,
                               const SteppedModel& fine, int step,
                               std::uint64_t seed, Transform* transform) {
  const int dim = static_cast<int>(members.rows());
  const MultiIndexSet set = total_degree_indices(dim, cfg.N0);
  const int Q = set.P();

  Mat nodes(dim, Q);
  Vec shift, scale;
  PolyFamily family = PolyFamily::Hermite;

  if (transform == nullptr) {
    const Vec mean = ensemble_mean(members);
    const Mat cov = ensemble_cov(members);
    const Mat A = floored_sqrt(cov);
    for (int q = 0; q < Q; ++q) {
      RngStream rng(seed, step, static_cast<std::uint64_t>(q),
                    Tag::TrainingNodes);
      Vec xi(dim);
      for (int i = 0; i < dim; ++i) xi[i] = rng.normal();
      nodes.col(q) = mean + A * xi;
    }
    shift = mean;
    scale = cov.diagonal().cwiseSqrt().cwiseMax(1e-12);
  } else {
    // sample in score space so every node maps back into the support
    transform->fit(members);
    const Mat xi_members = transform->forward(members);
    const Vec mean = ensemble_mean(xi_members);
    const Mat A = floored_sqrt(ensemble_cov(xi_members));
    Mat score_nodes(dim, Q);
    for (int q = 0; q < Q; ++q) {
      RngStream rng(seed, step, static_cast<std::uint64_t>(q),
                    Tag::TrainingNodes);
      Vec xi(dim);
      for (int i = 0; i < dim; ++i) xi[i] = rng.normal();
      score_nodes.col(q) = mean + A * xi;
    }
    nodes = transform->backward(score_nodes);
    if (cfg.lo.size() > 0) {
      family = PolyFamily::Legendre;
      shift = 0.5 * (cfg.lo + cfg.hi);
      scale = 0.5 * (cfg.hi - cfg.lo);
    } else {
      shift = ensemble_mean(members);
      scale = ensemble_cov(members).diagonal().cwiseSqrt().cwiseMax(1e-12);
    }
  }

  const Mat responses = apply_obs_map(step_map(fine, step), nodes, cfg.threads);
  return fit_surrogate(nodes.transpose(), responses.transpose(), set, family,
                       cfg.l1_alpha, shift, scale);
}

RunReport run_two_stage(const PriorSampler& prior, const StageConfig& cfg,
                        const std::vector<Vec>& data, TwoStageModels& models,
                        std::uint64_t seed) {
  cfg.validate(prior.dim);
  if (static_cast<int>(data.size()) < cfg.I2)
    throw std::invalid_argument("not enough data steps");
  const auto transform = make_transform(cfg);

  RunReport report;
  const auto t0 = Clock::now();

  Mat theta = draw_prior(prior, cfg.n1, seed);
  if (cfg.I1 > 0) {
    if (cfg.new_prior_builder == NewPriorBuilder::ES) {
      const Vec d = stack_data(data, 1, cfg.I1);
      const ObsMap h = [&](const Vec& t) {
        return models.coarse.window(t, 1, cfg.I1);
      };
      const Mat Z = apply_obs_map(h, theta, cfg.threads);
      AnalysisResult res;
      if (cfg.flavor == FilterFlavor::Plain)
        res = ensemble_smoother(theta, Z, d, cfg.noise, seed);
      else
        res = ns_enkf_analysis(theta, Z, d, cfg.noise, *transform, seed, 0);
      theta = res.analysis;
      record(report, cfg.I1, res);
    } else {
      for (int k = 1; k <= cfg.I1; ++k) {
        const Mat Z =
            apply_obs_map(step_map(models.coarse, k), theta, cfg.threads);
        const AnalysisResult res = run_analysis(theta, Z, data[k - 1], cfg,
                                                transform.get(), seed, k);
        theta = res.analysis;
        record(report, k, res);
      }
    }
  }
  report.stage_one_final = theta;

  if (cfg.flavor == FilterFlavor::NormalScore) {
    transform->fit(theta);
    report.new_prior = new_prior_from_ensemble(transform->forward(theta), true);
  } else {
    report.new_prior = new_prior_from_ensemble(theta);
  }
  report.stage_one_seconds = seconds_since(t0);

  const auto t1 = Clock::now();
  Mat theta2 = sample_new_prior(report.new_prior, cfg.n2, seed);
  if (report.new_prior.score_space) theta2 = transform->backward(theta2);
  report.initial_ensemble = theta2;

  const int start = cfg.stage_two_start == StageTwoStart::FromFirstStep
                        ? 1
                        : cfg.I1 + 1;
  for (int k = start; k <= cfg.I2; ++k) {
    if (cfg.refresh_basis_each_step && models.refresh_fine)
      models.refresh_fine(ensemble_mean(theta2));
    Mat Z;
    if (cfg.use_surrogate) {
      const Surrogate s = build_step_surrogate(theta2, cfg, models.fine, k,
                                               seed, transform.get());
      const ObsMap h = [&s](const Vec& t) { return s.eval(t); };
      Z = apply_obs_map(h, theta2, cfg.threads);
    } else {
      Z = apply_obs_map(step_map(models.fine, k), theta2, cfg.threads);
    }
    const AnalysisResult res = run_analysis(theta2, Z, data[k - 1], cfg,
                                            transform.get(), seed, k);
    theta2 = res.analysis;
    record(report, k, res);
  }
  report.stage_two_seconds = seconds_since(t1);
  return report;
}

} // namespace tsenkf
