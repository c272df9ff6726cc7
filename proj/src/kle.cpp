#include "tsenkf/kle.hpp"

#include <cmath>
#include <stdexcept>

namespace tsenkf {

double SqExpKernel::operator()(double x1, double y1, double x2,
                               double y2) const {
  double e = (x1 - x2) * (x1 - x2) / (2.0 * lx2);
  if (ly2 > 0.0) e += (y1 - y2) * (y1 - y2) / (2.0 * ly2);
  return variance * std::exp(-e);
}

TruncationRule TruncationRule::energy_fraction(double e) {
  if (!(e > 0.0 && e <= 1.0))
    throw std::invalid_argument("TruncationRule: energy fraction outside (0,1]");
  TruncationRule r;
  r.kind = Kind::Energy;
  r.energy = e;
  return r;
}

TruncationRule TruncationRule::fixed_n(int n) {
  if (n < 1) throw std::invalid_argument("TruncationRule: need n >= 1");
  TruncationRule r;
  r.kind = Kind::FixedN;
  r.n = n;
  return r;
}

KleBasis KleBasis::build(const SqExpKernel& kern, const Mat& pts,
                         const TruncationRule& rule, Vec mean_field) {
  const int n = static_cast<int>(pts.rows());
  if (n < 1) throw std::invalid_argument("KleBasis: need at least one point");
  const bool two_d = pts.cols() >= 2;

  Mat C(n, n);
  for (int i = 0; i < n; ++i) {
    const double xi = pts(i, 0), yi = two_d ? pts(i, 1) : 0.0;
    C(i, i) = kern(xi, yi, xi, yi);
    for (int j = i + 1; j < n; ++j) {
      const double v = kern(xi, yi, pts(j, 0), two_d ? pts(j, 1) : 0.0);
      C(i, j) = v;
      C(j, i) = v;
    }
  }

  Eigen::SelfAdjointEigenSolver<Mat> eig(C / n);
  if (eig.info() != Eigen::Success)
    throw std::runtime_error("KleBasis: eigen decomposition failed");
  Vec lam = eig.eigenvalues().reverse();
  const Mat vecs = eig.eigenvectors().rowwise().reverse();
  const double lmax = lam.maxCoeff();
  if (lam.minCoeff() < -1e-10 * lmax)
    throw std::runtime_error("KleBasis: kernel matrix is indefinite");
  lam = lam.cwiseMax(0.0);

  int keep;
  if (rule.kind == TruncationRule::Kind::FixedN) {
    keep = std::min(rule.n, n);
  } else {
    const double total = lam.sum();
    double acc = 0.0;
    keep = n;
    for (int i = 0; i < n; ++i) {
      acc += lam[i];
      if (acc >= rule.energy * total) {
        keep = i + 1;
        break;
      }
    }
  }

  KleBasis b;
  b.kernel = kern;
  b.points = pts;
  b.lambda = lam.head(keep);
  // scale by sqrt(n) so (1/n) phi^T phi = I under the uniform weights
  b.phi = vecs.leftCols(keep) * std::sqrt(static_cast<double>(n));
  b.mean = mean_field.size() ? std::move(mean_field) : Vec::Zero(n);
  if (b.mean.size() != n)
    throw std::invalid_argument("KleBasis: mean field size mismatch");
  return b;
}

Vec KleBasis::field(const Vec& theta) const {
  if (theta.size() != n_modes())
    throw std::invalid_argument("KleBasis::field: theta size mismatch");
  return mean + phi * lambda.cwiseSqrt().cwiseProduct(theta);
}

Mat KleBasis::extend_phi(const Mat& new_points) const {
  const int m = static_cast<int>(new_points.rows());
  const int n = n_points();
  const bool two_d = points.cols() >= 2;
  Mat K(m, n);
  for (int i = 0; i < m; ++i) {
    const double xi = new_points(i, 0);
    const double yi = new_points.cols() >= 2 ? new_points(i, 1) : 0.0;
    for (int j = 0; j < n; ++j)
      K(i, j) = kernel(xi, yi, points(j, 0), two_d ? points(j, 1) : 0.0);
  }
  Mat out = K * phi;
  for (int c = 0; c < n_modes(); ++c) {
    if (lambda[c] <= 0.0)
      throw std::runtime_error("KleBasis: cannot extend a null mode");
    out.col(c) /= n * lambda[c];
  }
  return out;
}

} // namespace tsenkf
