#include "tsenkf/filters.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <numeric>
#include <stdexcept>
#include <thread>

namespace tsenkf {

NoiseModel NoiseModel::known(double sigma2) {
  if (sigma2 < 0.0) throw std::invalid_argument("noise variance must be >= 0");
  NoiseModel m;
  m.kind = Kind::Known;
  m.sigma2 = sigma2;
  return m;
}

NoiseModel NoiseModel::hyper(double n_s) {
  if (n_s <= 0.0) throw std::invalid_argument("hyper noise needs n_s > 0");
  NoiseModel m;
  m.kind = Kind::Hyper;
  m.n_s = n_s;
  return m;
}

Vec ensemble_mean(const Mat& members) { return members.rowwise().mean(); }

Mat ensemble_cov(const Mat& members) {
  const auto M = members.cols();
  if (M < 2) throw std::invalid_argument("ensemble covariance needs M >= 2");
  const Mat centered = members.colwise() - members.rowwise().mean().eval();
  return centered * centered.transpose() / static_cast<double>(M - 1);
}

Mat apply_obs_map(const ObsMap& h, const Mat& members, int n_threads) {
  const int M = static_cast<int>(members.cols());
  if (M == 0) throw std::invalid_argument("empty ensemble");
  const Vec first = h(members.col(0));
  Mat Z(first.size(), M);
  Z.col(0) = first;

  auto run_block = [&](int begin, int end) {
    for (int j = begin; j < end; ++j) {
      const Vec zj = h(members.col(j));
      if (zj.size() != Z.rows())
        throw std::runtime_error("observation map returned inconsistent size");
      Z.col(j) = zj;
    }
  };

  if (n_threads <= 1 || M <= 2) {
    run_block(1, M);
    return Z;
  }

  const int workers = std::min(n_threads, M - 1);
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  const int span = M - 1;
  for (int w = 0; w < workers; ++w) {
    const int begin = 1 + span * w / workers;
    const int end = 1 + span * (w + 1) / workers;
    pool.emplace_back([&, w, begin, end] {
      try {
        run_block(begin, end);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return Z;
}

double sample_noise_variance(const NoiseModel& noise, double residual_sq,
                             int n_d, int n_p, RngStream& rng) {
  if (noise.kind != NoiseModel::Kind::Hyper)
    throw std::invalid_argument("noise variance sampling is Hyper-only");
  if (residual_sq < 0.0) throw std::invalid_argument("negative residual");
  if (n_d <= n_p)
    throw std::invalid_argument("hyper noise needs n_d > n_p");
  const double sigma_s2 = residual_sq / static_cast<double>(n_d - n_p);
  const double alpha = noise.n_s / 2.0;
  const double beta = sigma_s2 * noise.n_s;
  const double scale = beta + residual_sq / 2.0;
  // zero residual collapses the inverse-gamma to a point mass at zero
  if (scale == 0.0) return 0.0;
  return rng.inv_gamma(alpha + n_d / 2.0, scale);
}

Mat kalman_gain(const Mat& theta, const Mat& Z) {
  const auto M = theta.cols();
  if (M < 2) throw std::invalid_argument("gain needs M >= 2");
  if (Z.cols() != M) throw std::invalid_argument("member count mismatch");
  const auto n_d = Z.rows();

  // a constant Z has zero cross-covariance by definition; detect it exactly
  // so roundoff in the row means cannot fabricate a gain
  bool constant = true;
  for (int i = 0; i < n_d && constant; ++i)
    constant = Z.row(i).minCoeff() == Z.row(i).maxCoeff();
  if (constant) return Mat::Zero(theta.rows(), n_d);

  const Mat Tc = theta.colwise() - theta.rowwise().mean().eval();
  const Mat Zc = Z.colwise() - Z.rowwise().mean().eval();
  const double div = static_cast<double>(M - 1);
  const Mat cross = Tc * Zc.transpose() / div;
  Mat czz = Zc * Zc.transpose() / div;

  const double tr = czz.trace();
  if (!(tr > 0.0)) return Mat::Zero(theta.rows(), n_d);
  czz.diagonal().array() += 1e-10 * tr / static_cast<double>(n_d);

  Eigen::LDLT<Mat> ldlt(czz);
  if (ldlt.info() != Eigen::Success)
    throw std::runtime_error("observation covariance factorization failed");
  const Mat K = ldlt.solve(cross.transpose()).transpose();
  if (!K.allFinite())
    throw std::runtime_error("observation covariance singular after ridge");
  return K;
}

namespace {

void check_update_inputs(const Mat& theta_f, const Mat& Z, const Vec& d) {
  if (theta_f.cols() < 2) throw std::invalid_argument("need M >= 2 members");
  if (Z.cols() != theta_f.cols())
    throw std::invalid_argument("member count mismatch");
  if (d.size() != Z.rows())
    throw std::invalid_argument("data length does not match observations");
  if (!theta_f.allFinite()) throw std::invalid_argument("non-finite members");
  if (!Z.allFinite())
    throw std::invalid_argument("non-finite simulated observations");
}

// Shared analysis core: resolves sigma2, perturbs Z, updates `state`
// (physical members for the plain filter, scores for the transformed one).
AnalysisResult analysis_core(const Mat& state, const Mat& theta_f, const Mat& Z,
                             const Vec& d, const NoiseModel& noise,
                             std::uint64_t seed, std::uint64_t step) {
  check_update_inputs(theta_f, Z, d);
  const int M = static_cast<int>(Z.cols());
  const int n_d = static_cast<int>(Z.rows());
  const int n_p = static_cast<int>(theta_f.rows());

  Vec residual_sq(M);
  for (int j = 0; j < M; ++j) residual_sq[j] = (d - Z.col(j)).squaredNorm();

  AnalysisResult out;
  out.forecast_discrepancy = residual_sq.mean();
  if (noise.kind == NoiseModel::Kind::Known) {
    out.sigma2 = noise.sigma2;
  } else {
    double acc = 0.0;
    for (int j = 0; j < M; ++j) {
      RngStream rng(seed, step, static_cast<std::uint64_t>(j), Tag::InvGamma);
      acc += sample_noise_variance(noise, residual_sq[j], n_d, n_p, rng);
    }
    out.sigma2 = acc / M;
  }

  Mat Zk = Z;
  const double sd = std::sqrt(out.sigma2);
  if (sd > 0.0) {
    for (int j = 0; j < M; ++j) {
      RngStream rng(seed, step, static_cast<std::uint64_t>(j), Tag::Perturb);
      for (int i = 0; i < n_d; ++i) Zk(i, j) += sd * rng.normal();
    }
  }

  const Mat K = kalman_gain(state, Zk);
  out.analysis = state + K * ((-Zk).colwise() + d);
  return out;
}

} // namespace

AnalysisResult enkf_analysis(const Mat& theta_f, const Mat& Z, const Vec& d,
                             const NoiseModel& noise, std::uint64_t seed,
                             std::uint64_t step) {
  return analysis_core(theta_f, theta_f, Z, d, noise, seed, step);
}

AnalysisResult ensemble_smoother(const Mat& theta, const Mat& Z_stacked,
                                 const Vec& d_stacked, const NoiseModel& noise,
                                 std::uint64_t seed, std::uint64_t step) {
  return enkf_analysis(theta, Z_stacked, d_stacked, noise, seed, step);
}

namespace {

// Exact on knots so fitted values survive a roundtrip bit-for-bit; between
// knots piecewise linear, outside them the end segment extends.
double interp_monotone(const Vec& xs, const Vec& ys, double x) {
  const int n = static_cast<int>(xs.size());
  const double* base = xs.data();
  const int pos = static_cast<int>(std::lower_bound(base, base + n, x) - base);
  if (pos < n && xs[pos] == x) return ys[pos];
  const int k = pos == 0 ? 0 : (pos >= n ? n - 2 : pos - 1);
  const double t = (x - xs[k]) / (xs[k + 1] - xs[k]);
  return ys[k] + t * (ys[k + 1] - ys[k]);
}

} // namespace

NormalScoreMap fit_normal_score(const Mat& members) {
  const int n_p = static_cast<int>(members.rows());
  const int M = static_cast<int>(members.cols());
  if (M < 2) throw std::invalid_argument("score map needs M >= 2");

  NormalScoreMap map;
  map.refs.resize(n_p);
  map.quants.resize(n_p);
  map.degenerate.assign(n_p, false);

  std::vector<int> order(M);
  for (int i = 0; i < n_p; ++i) {
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
      return members(i, a) < members(i, b);
    });

    std::vector<double> vals, qs;
    vals.reserve(M);
    qs.reserve(M);
    int r = 0;
    while (r < M) {
      const double v = members(i, order[r]);
      int r_end = r;
      double q_sum = 0.0;
      while (r_end < M && members(i, order[r_end]) == v) {
        q_sum += normal_quantile((r_end + 0.5) / M);
        ++r_end;
      }
      vals.push_back(v);
      qs.push_back(q_sum / (r_end - r));
      r = r_end;
    }

    if (vals.size() < 2) {
      map.degenerate[i] = true;
      std::fprintf(stderr,
                   "normal-score: component %d is constant, passing through\n",
                   i);
    }
    map.refs[i] = Eigen::Map<Vec>(vals.data(), vals.size());
    map.quants[i] = Eigen::Map<Vec>(qs.data(), qs.size());
  }
  return map;
}

Mat normal_score_forward(const NormalScoreMap& map, const Mat& members) {
  if (members.rows() != map.n_components())
    throw std::invalid_argument("component count mismatch");
  Mat scores(members.rows(), members.cols());
  for (int i = 0; i < members.rows(); ++i) {
    if (map.degenerate[i]) {
      scores.row(i) = members.row(i);
      continue;
    }
    for (int j = 0; j < members.cols(); ++j)
      scores(i, j) = interp_monotone(map.refs[i], map.quants[i], members(i, j));
  }
  return scores;
}

Mat normal_score_backward(const NormalScoreMap& map, const Mat& scores) {
  if (scores.rows() != map.n_components())
    throw std::invalid_argument("component count mismatch");
  Mat members(scores.rows(), scores.cols());
  for (int i = 0; i < scores.rows(); ++i) {
    if (map.degenerate[i]) {
      members.row(i) = scores.row(i);
      continue;
    }
    for (int j = 0; j < scores.cols(); ++j)
      members(i, j) = interp_monotone(map.quants[i], map.refs[i], scores(i, j));
  }
  return members;
}

void EmpiricalScoreTransform::fit(const Mat& members) {
  map_ = fit_normal_score(members);
}

Mat EmpiricalScoreTransform::forward(const Mat& members) const {
  return normal_score_forward(map_, members);
}

Mat EmpiricalScoreTransform::backward(const Mat& scores) const {
  return normal_score_backward(map_, scores);
}

ProbitTransform::ProbitTransform(Vec lo, Vec hi)
    : lo_(std::move(lo)), hi_(std::move(hi)) {
  if (lo_.size() != hi_.size())
    throw std::invalid_argument("bound length mismatch");
  for (int i = 0; i < lo_.size(); ++i)
    if (!(lo_[i] < hi_[i])) throw std::invalid_argument("empty interval");
}

Mat ProbitTransform::forward(const Mat& members) const {
  if (members.rows() != lo_.size())
    throw std::invalid_argument("component count mismatch");
  Mat scores(members.rows(), members.cols());
  for (int i = 0; i < members.rows(); ++i)
    for (int j = 0; j < members.cols(); ++j) {
      const double ratio = (members(i, j) - lo_[i]) / (hi_[i] - lo_[i]);
      if (!(ratio > 0.0 && ratio < 1.0))
        throw std::domain_error("member outside the open box");
      scores(i, j) = normal_quantile(ratio);
    }
  return scores;
}

Mat ProbitTransform::backward(const Mat& scores) const {
  if (scores.rows() != lo_.size())
    throw std::invalid_argument("component count mismatch");
  Mat members(scores.rows(), scores.cols());
  for (int i = 0; i < scores.rows(); ++i)
    for (int j = 0; j < scores.cols(); ++j)
      members(i, j) = lo_[i] + (hi_[i] - lo_[i]) * normal_cdf(scores(i, j));
  return members;
}

AnalysisResult ns_enkf_analysis(const Mat& theta_f, const Mat& Z, const Vec& d,
                                const NoiseModel& noise, Transform& transform,
                                std::uint64_t seed, std::uint64_t step) {
  transform.fit(theta_f);
  const Mat xi_f = transform.forward(theta_f);
  AnalysisResult out = analysis_core(xi_f, theta_f, Z, d, noise, seed, step);
  out.analysis = transform.backward(out.analysis);
  return out;
}

} // namespace tsenkf
