#pragma once

#include "tsenkf/linalg.hpp"

namespace tsenkf {

// Squared-exponential covariance; ly2 == 0 selects the 1D kernel and the
// y coordinates are ignored.
struct SqExpKernel {
  double variance = 1.0;
  double lx2 = 0.1;  // squared correlation length
  double ly2 = 0.0;

  double operator()(double x1, double y1, double x2, double y2) const;
};

struct TruncationRule {
  enum class Kind { Energy, FixedN } kind = Kind::Energy;
  double energy = 0.9999;
  int n = 0;

  static TruncationRule energy_fraction(double e);
  static TruncationRule fixed_n(int n);
};

// Discrete Karhunen-Loeve basis from the kernel Gram matrix with uniform
// quadrature weights. Eigenfunctions are orthonormal in the discrete L2
// inner product (1/n) sum phi_i phi_j.
class KleBasis {
public:
  static KleBasis build(const SqExpKernel& kern, const Mat& pts,
                        const TruncationRule& rule, Vec mean_field = Vec());

  int n_modes() const { return static_cast<int>(lambda.size()); }
  int n_points() const { return static_cast<int>(points.rows()); }

  // mean + sum_i sqrt(lambda_i) theta_i phi_i at the build points
  Vec field(const Vec& theta) const;
  // Nystrom evaluation of the eigenfunctions at other points
  Mat extend_phi(const Mat& new_points) const;

  Vec lambda;  // retained eigenvalues, descending
  Mat phi;     // n_points x n_modes
  Vec mean;
  Mat points;  // n x 1 or n x 2
  SqExpKernel kernel;
};

} // namespace tsenkf
