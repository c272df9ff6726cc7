#pragma once

#include "tsenkf/linalg.hpp"

#include <vector>

namespace tsenkf {

// Complete total-degree multi-index set, graded lexicographic: degree
// ascending, then lexicographic within a degree.
struct MultiIndexSet {
  int n_z = 0;
  int N0 = 0;
  std::vector<std::vector<int>> indices;

  int P() const { return static_cast<int>(indices.size()); }
};

MultiIndexSet total_degree_indices(int n_z, int N0);

// Hermite is probabilists' orthonormal (standard Gaussian inputs);
// Legendre is orthonormal for uniform inputs on [-1,1].
enum class PolyFamily { Hermite, Legendre };

Vec evaluate_basis(const MultiIndexSet& set, PolyFamily family,
                   const Vec& theta_std);
// row i holds the basis at samples_std.row(i)
Mat build_design_matrix(const Mat& samples_std, const MultiIndexSet& set,
                        PolyFamily family);

struct LaggedDiffusivityReport {
  int iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
  std::vector<double> objective_history;  // J before each iterate update
};

// Minimizes J(c) = 0.5 ||Ac-b||^2 + alpha sum_i 2 sqrt(c_i^2 + beta^2) by
// the smoothed-l1 fixed point: each step solves (A^T A + alpha L) c = A^T b
// with L_ii = 2 / sqrt(c_i^2 + beta^2), which majorizes J, so the objective
// never increases.
Vec lagged_diffusivity_solve(const Mat& A, const Vec& b, double alpha,
                             double beta = 1e-6, double tol = 1e-8,
                             int maxit = 100,
                             LaggedDiffusivityReport* report = nullptr);

// Variant sharing the Gram matrix across many right-hand sides.
Vec lagged_diffusivity_solve_gram(const Mat& AtA, const Vec& Atb, double btb,
                                  double alpha, double beta, double tol,
                                  int maxit,
                                  LaggedDiffusivityReport* report = nullptr);

// theta_std = (theta - shift) / scale componentwise. Gaussian inputs use
// (mean, std) of the reference measure; bounded inputs use the box midpoint
// and half-width so the box lands on [-1,1].
struct Surrogate {
  MultiIndexSet set;
  PolyFamily family = PolyFamily::Hermite;
  Vec shift, scale;
  Mat coef;  // P x n_d

  Vec standardize(const Vec& theta) const;
  Vec eval(const Vec& theta) const;
};

// One l1 fit per response column, sharing the design matrix and its Gram.
Surrogate fit_surrogate(const Mat& samples, const Mat& responses,
                        const MultiIndexSet& set, PolyFamily family,
                        double alpha, const Vec& shift, const Vec& scale,
                        double beta = 1e-6, double tol = 1e-8,
                        int maxit = 100);

} // namespace tsenkf
