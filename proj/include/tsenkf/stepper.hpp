#pragma once

#include "tsenkf/caputo.hpp"
#include "tsenkf/linalg.hpp"

#include <functional>
#include <stdexcept>
#include <vector>

namespace tsenkf {

namespace detail {

template <class MatT> struct DirectSolver;
template <> struct DirectSolver<SpMat> {
  using type = Eigen::SimplicialLDLT<SpMat>;
};
template <> struct DirectSolver<Mat> {
  using type = Eigen::LDLT<Mat>;
};

} // namespace detail

// Marches (B + sK) u^n = B (sum_k w_k u^k) + s F_n for the fractional order's
// regime, keeping the whole trajectory (the history sum is intrinsic).
// load_at(n) is the effective load used to advance to level n; for
// superdiffusion the first level copies the initial state, so load_at(1) is
// never evaluated in that regime.
template <class MatT>
std::vector<Vec> march_caputo(double gamma, double dt, const MatT& K,
                              const MatT& B, const Vec& u0, int n_steps,
                              const std::function<Vec(int)>& load_at) {
  if (n_steps < 0) throw std::invalid_argument("march_caputo: negative steps");
  const double s = caputo_scale(gamma, dt);
  const bool super = gamma > 1.0;
  MatT A = B + s * K;
  typename detail::DirectSolver<MatT>::type solver;
  solver.compute(A);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("march_caputo: factorization failed");

  std::vector<Vec> u;
  u.reserve(n_steps + 1);
  u.push_back(u0);
  for (int n = 1; n <= n_steps; ++n) {
    if (super && n == 1) {
      u.push_back(u0);
      continue;
    }
    const Vec w = caputo_history_weights(gamma, n);
    Vec hist = w[0] * u[0];
    for (int k = 1; k < n; ++k) hist += w[k] * u[k];
    const Vec rhs = B * hist + s * load_at(n);
    u.push_back(solver.solve(rhs));
  }
  return u;
}

// (B + dt K) u^n = B u^{n-1} + dt F_n; the gamma -> 1 limit of the
// subdiffusive scheme.
template <class MatT>
std::vector<Vec> march_implicit_euler(const MatT& K, const MatT& B, double dt,
                                      const Vec& u0, int n_steps,
                                      const std::function<Vec(int)>& load_at) {
  if (!(dt > 0.0))
    throw std::invalid_argument("march_implicit_euler: dt must be positive");
  MatT A = B + dt * K;
  typename detail::DirectSolver<MatT>::type solver;
  solver.compute(A);
  if (solver.info() != Eigen::Success)
    throw std::runtime_error("march_implicit_euler: factorization failed");
  std::vector<Vec> u;
  u.reserve(n_steps + 1);
  u.push_back(u0);
  for (int n = 1; n <= n_steps; ++n)
    u.push_back(solver.solve(B * u.back() + dt * load_at(n)));
  return u;
}

extern template std::vector<Vec> march_caputo<SpMat>(
    double, double, const SpMat&, const SpMat&, const Vec&, int,
    const std::function<Vec(int)>&);
extern template std::vector<Vec> march_caputo<Mat>(
    double, double, const Mat&, const Mat&, const Vec&, int,
    const std::function<Vec(int)>&);
extern template std::vector<Vec> march_implicit_euler<SpMat>(
    const SpMat&, const SpMat&, double, const Vec&, int,
    const std::function<Vec(int)>&);
extern template std::vector<Vec> march_implicit_euler<Mat>(
    const Mat&, const Mat&, double, const Vec&, int,
    const std::function<Vec(int)>&);

} // namespace tsenkf
