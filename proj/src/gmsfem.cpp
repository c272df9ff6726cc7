#include "tsenkf/gmsfem.hpp"

#include <cmath>
#include <stdexcept>

namespace tsenkf {

namespace {

// smallest-eigenvalue generalized eigenvectors of A v = lambda S v
Mat smallest_modes(const Mat& A, const Mat& S, int count, const char* where) {
  Eigen::GeneralizedSelfAdjointEigenSolver<Mat> ges(A, S);
  if (ges.info() != Eigen::Success)
    throw std::runtime_error(std::string(where) +
                             ": generalized eigen solve failed");
  return ges.eigenvectors().leftCols(count);
}

} // namespace

GmsfemReducer::GmsfemReducer(const Grid& fine, const GmsfemOptions& opt,
                             std::function<Vec(const Vec&)> permeability_of_theta,
                             const std::vector<Vec>& prior_samples)
    : fine_(fine), opt_(opt), perm_(std::move(permeability_of_theta)) {
  if (opt.coarse_nx < 1 || opt.coarse_ny < 1 ||
      fine.nx % opt.coarse_nx != 0 || fine.ny % opt.coarse_ny != 0)
    throw std::invalid_argument("GmsfemReducer: coarse grid must nest in fine");
  if (prior_samples.empty())
    throw std::invalid_argument("GmsfemReducer: need at least one prior sample");

  const int rx = fine.nx / opt.coarse_nx;
  const int ry = fine.ny / opt.coarse_ny;
  const double Hx = rx * fine.hx;
  const double Hy = ry * fine.hy;

  std::vector<Vec> sample_k;
  sample_k.reserve(prior_samples.size());
  for (const Vec& th : prior_samples) {
    Vec k = perm_(th);
    if (k.size() != fine.n_nodes())
      throw std::invalid_argument("GmsfemReducer: permeability size mismatch");
    sample_k.push_back(std::move(k));
  }

  for (int J = 0; J <= opt.coarse_ny; ++J) {
    for (int I = 0; I <= opt.coarse_nx; ++I) {
      const int cex0 = std::max(0, I - 1);
      const int cex1 = std::min(opt.coarse_nx - 1, I);
      const int cey0 = std::max(0, J - 1);
      const int cey1 = std::min(opt.coarse_ny - 1, J);
      const int nx_loc = (cex1 - cex0 + 1) * rx;
      const int ny_loc = (cey1 - cey0 + 1) * ry;
      const int i0 = cex0 * rx;
      const int j0 = cey0 * ry;

      Grid local(nx_loc, ny_loc, fine.hx, fine.hy, fine.x0 + i0 * fine.hx,
                 fine.y0 + j0 * fine.hy);
      std::vector<int> to_global(local.n_nodes());
      for (int n = 0; n < local.n_nodes(); ++n)
        to_global[n] = fine.node_id(i0 + local.node_i(n), j0 + local.node_j(n));

      const double cx = fine.x0 + I * Hx;
      const double cy = fine.y0 + J * Hy;
      Vec chi(local.n_nodes());
      for (int n = 0; n < local.n_nodes(); ++n) {
        const double tx = 1.0 - std::fabs(local.node_x(n) - cx) / Hx;
        const double ty = 1.0 - std::fabs(local.node_y(n) - cy) / Hy;
        chi[n] = std::max(0.0, tx) * std::max(0.0, ty);
      }

      Neighborhood nb{local, std::move(to_global), std::move(chi),
                      FemAssembler(local), Mat()};

      const int keep = std::min(opt.m_snap, local.n_nodes());
      Mat stack(local.n_nodes(),
                keep * static_cast<int>(sample_k.size()));
      for (std::size_t s = 0; s < sample_k.size(); ++s) {
        const Vec k_loc = local_coef(nb, sample_k[s]);
        const Mat A = Mat(nb.fem.stiffness(k_loc));
        const Mat S = Mat(nb.fem.weighted_mass(k_loc));
        stack.middleCols(static_cast<int>(s) * keep, keep) =
            smallest_modes(A, S, keep, "build_snapshots");
      }

      Eigen::BDCSVD<Mat> svd(stack, Eigen::ComputeThinU);
      const Vec sv = svd.singularValues();
      int rank = 0;
      for (int i = 0; i < sv.size(); ++i)
        if (sv[i] > opt.snap_tol * sv[0]) ++rank;
      if (rank < 1)
        throw std::runtime_error("GmsfemReducer: empty snapshot space");
      if (rank < stack.cols()) degenerate_ = true;
      nb.snap = svd.matrixU().leftCols(rank);
      ranks_.push_back(rank);
      nbhd_.push_back(std::move(nb));
    }
  }
}

Vec GmsfemReducer::local_coef(const Neighborhood& nb,
                              const Vec& global_nodal) const {
  Vec out(nb.local.n_nodes());
  for (int n = 0; n < nb.local.n_nodes(); ++n)
    out[n] = global_nodal[nb.to_global[n]];
  return out;
}

Vec GmsfemReducer::pou_global(int i) const {
  const Neighborhood& nb = nbhd_.at(i);
  Vec out = Vec::Zero(fine_.n_nodes());
  for (int n = 0; n < nb.local.n_nodes(); ++n)
    out[nb.to_global[n]] = nb.chi[n];
  return out;
}

MultiscaleBasis GmsfemReducer::build_basis(const Vec& theta_bar,
                                           int m_i) const {
  if (m_i < 1) throw std::invalid_argument("build_basis: need m_i >= 1");
  const Vec k_bar = perm_(theta_bar);

  MultiscaleBasis out;
  out.m_i = m_i;
  out.theta_bar = theta_bar;
  out.R = Mat::Zero(fine_.n_nodes(), m_i * n_coarse_nodes());

  for (std::size_t i = 0; i < nbhd_.size(); ++i) {
    const Neighborhood& nb = nbhd_[i];
    if (m_i > nb.snap.cols())
      throw std::runtime_error("build_basis: m_i exceeds snapshot rank");
    const Vec k_loc = local_coef(nb, k_bar);
    const Mat A = nb.snap.transpose() * Mat(nb.fem.stiffness(k_loc)) * nb.snap;
    const Mat S =
        nb.snap.transpose() * Mat(nb.fem.weighted_mass(k_loc)) * nb.snap;
    const Mat psi = nb.snap * smallest_modes(A, S, m_i, "reduce_snapshots");
    for (int l = 0; l < m_i; ++l) {
      const int col = static_cast<int>(i) * m_i + l;
      for (int n = 0; n < nb.local.n_nodes(); ++n)
        out.R(nb.to_global[n], col) = nb.chi[n] * psi(n, l);
    }
  }

  Eigen::ColPivHouseholderQR<Mat> qr(out.R);
  out.full_rank = qr.rank() == out.R.cols();
  return out;
}

ReducedSystem project(const MultiscaleBasis& basis,
                      const ConstrainedSystem& cs) {
  ReducedSystem rs;
  rs.Rf.resize(cs.n_free(), basis.R.cols());
  for (int i = 0; i < cs.n_free(); ++i)
    rs.Rf.row(i) = basis.R.row(cs.free_nodes[i]);
  rs.K = rs.Rf.transpose() * (cs.K * rs.Rf);
  rs.B = rs.Rf.transpose() * (cs.B * rs.Rf);
  rs.bc_load = rs.Rf.transpose() * cs.bc_load;
  return rs;
}

Vec reduce_load(const ReducedSystem& rs, const ConstrainedSystem& cs,
                const Vec& F_full) {
  return rs.Rf.transpose() * cs.restrict_full(F_full) - rs.bc_load;
}

Vec downscale(const ReducedSystem& rs, const ConstrainedSystem& cs,
              const Vec& u_H) {
  return cs.expand(rs.Rf * u_H);
}

} // namespace tsenkf
