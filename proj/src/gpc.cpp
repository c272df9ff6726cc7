#include "tsenkf/gpc.hpp"

#include <cmath>
#include <stdexcept>

namespace tsenkf {

namespace {

void compositions(int remaining, int pos, std::vector<int>& cur,
                  std::vector<std::vector<int>>& out) {
  const int n = static_cast<int>(cur.size());
  if (pos == n - 1) {
    cur[pos] = remaining;
    out.push_back(cur);
    return;
  }
  for (int v = 0; v <= remaining; ++v) {
    cur[pos] = v;
    compositions(remaining - v, pos + 1, cur, out);
  }
}

// orthonormal univariate values up to degree N0 at one point
void univariate_values(PolyFamily family, double x, int N0, double* vals) {
  vals[0] = 1.0;
  if (N0 == 0) return;
  if (family == PolyFamily::Hermite) {
    vals[1] = x;
    for (int n = 1; n < N0; ++n)
      vals[n + 1] =
          (x * vals[n] - std::sqrt(static_cast<double>(n)) * vals[n - 1]) /
          std::sqrt(static_cast<double>(n + 1));
  } else {
    // monic-free Legendre recurrence, then the sqrt(2n+1) normalization
    double pm1 = 1.0, p = x;
    vals[1] = std::sqrt(3.0) * p;
    for (int n = 1; n < N0; ++n) {
      const double pn1 = ((2 * n + 1) * x * p - n * pm1) / (n + 1);
      pm1 = p;
      p = pn1;
      vals[n + 1] = std::sqrt(2.0 * (n + 1) + 1.0) * p;
    }
  }
}

} // namespace

MultiIndexSet total_degree_indices(int n_z, int N0) {
  if (n_z < 1 || N0 < 0)
    throw std::invalid_argument("total_degree_indices: need n_z >= 1, N0 >= 0");
  MultiIndexSet set;
  set.n_z = n_z;
  set.N0 = N0;
  std::vector<int> cur(n_z, 0);
  for (int d = 0; d <= N0; ++d) compositions(d, 0, cur, set.indices);
  return set;
}

Vec evaluate_basis(const MultiIndexSet& set, PolyFamily family,
                   const Vec& theta_std) {
  if (theta_std.size() != set.n_z)
    throw std::invalid_argument("evaluate_basis: dimension mismatch");
  Mat uni(set.n_z, set.N0 + 1);
  std::vector<double> buf(set.N0 + 1);
  for (int k = 0; k < set.n_z; ++k) {
    univariate_values(family, theta_std[k], set.N0, buf.data());
    for (int d = 0; d <= set.N0; ++d) uni(k, d) = buf[d];
  }
  Vec out(set.P());
  for (int j = 0; j < set.P(); ++j) {
    double v = 1.0;
    const auto& idx = set.indices[j];
    for (int k = 0; k < set.n_z; ++k) v *= uni(k, idx[k]);
    out[j] = v;
  }
  return out;
}

Mat build_design_matrix(const Mat& samples_std, const MultiIndexSet& set,
                        PolyFamily family) {
  const int Q = static_cast<int>(samples_std.rows());
  if (Q < 1) throw std::invalid_argument("build_design_matrix: need Q >= 1");
  Mat A(Q, set.P());
  for (int i = 0; i < Q; ++i)
    A.row(i) = evaluate_basis(set, family, samples_std.row(i)).transpose();
  return A;
}

Vec lagged_diffusivity_solve_gram(const Mat& AtA, const Vec& Atb, double btb,
                                  double alpha, double beta, double tol,
                                  int maxit, LaggedDiffusivityReport* report) {
  if (!(alpha > 0.0) || !(beta > 0.0))
    throw std::invalid_argument(
        "lagged_diffusivity_solve: alpha and beta must be positive");
  const int P = static_cast<int>(AtA.rows());
  Vec c = Vec::Zero(P);
  LaggedDiffusivityReport rep;

  const auto diffusivity = [&](const Vec& v) {
    return (2.0 / (v.array().square() + beta * beta).sqrt()).matrix();
  };
  const auto objective = [&](const Vec& v) {
    const double misfit = v.dot(AtA * v) - 2.0 * v.dot(Atb) + btb;
    const double penalty =
        2.0 * (v.array().square() + beta * beta).sqrt().sum();
    return 0.5 * misfit + alpha * penalty;
  };

  for (int it = 0; it < maxit; ++it) {
    const Vec L = diffusivity(c);
    const Vec g = AtA * c - Atb + alpha * L.cwiseProduct(c);
    rep.grad_norm = g.norm();
    rep.objective_history.push_back(objective(c));
    if (rep.grad_norm < tol) {
      rep.converged = true;
      break;
    }
    Mat H = AtA;
    H.diagonal() += alpha * L;
    Eigen::LLT<Mat> llt(H);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("lagged_diffusivity_solve: singular system");
    c -= llt.solve(g);
    rep.iterations = it + 1;
  }
  if (!rep.converged) {
    const Vec g = AtA * c - Atb + alpha * diffusivity(c).cwiseProduct(c);
    rep.grad_norm = g.norm();
    rep.converged = rep.grad_norm < tol;
  }
  rep.objective_history.push_back(objective(c));
  if (report) *report = rep;
  return c;
}

Vec lagged_diffusivity_solve(const Mat& A, const Vec& b, double alpha,
                             double beta, double tol, int maxit,
                             LaggedDiffusivityReport* report) {
  return lagged_diffusivity_solve_gram(A.transpose() * A, A.transpose() * b,
                                       b.squaredNorm(), alpha, beta, tol,
                                       maxit, report);
}

Vec Surrogate::standardize(const Vec& theta) const {
  return (theta - shift).cwiseQuotient(scale);
}

Vec Surrogate::eval(const Vec& theta) const {
  return coef.transpose() * evaluate_basis(set, family, standardize(theta));
}

Surrogate fit_surrogate(const Mat& samples, const Mat& responses,
                        const MultiIndexSet& set, PolyFamily family,
                        double alpha, const Vec& shift, const Vec& scale,
                        double beta, double tol, int maxit) {
  if (samples.rows() != responses.rows())
    throw std::invalid_argument("fit_surrogate: sample/response count mismatch");
  if (samples.cols() != set.n_z)
    throw std::invalid_argument("fit_surrogate: sample dimension mismatch");
  if ((scale.array() <= 0.0).any())
    throw std::invalid_argument("fit_surrogate: scales must be positive");

  Surrogate s;
  s.set = set;
  s.family = family;
  s.shift = shift;
  s.scale = scale;

  Mat std_samples = samples;
  std_samples.rowwise() -= shift.transpose();
  std_samples.array().rowwise() /= scale.transpose().array();

  const Mat A = build_design_matrix(std_samples, set, family);
  const Mat AtA = A.transpose() * A;
  const int n_d = static_cast<int>(responses.cols());
  s.coef.resize(set.P(), n_d);
  for (int d = 0; d < n_d; ++d) {
    const Vec b = responses.col(d);
    try {
      s.coef.col(d) = lagged_diffusivity_solve_gram(
          AtA, A.transpose() * b, b.squaredNorm(), alpha, beta, tol, maxit);
    } catch (const std::exception& e) {
      throw std::runtime_error("fit_surrogate: component " + std::to_string(d) +
                               ": " + e.what());
    }
  }
  return s;
}

} // namespace tsenkf
