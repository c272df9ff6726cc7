#include "tsenkf/fem.hpp"

#include <cmath>
#include <stdexcept>

namespace tsenkf {

namespace {

int pattern_slot(const SpMat& m, int row, int col) {
  for (int p = m.outerIndexPtr()[col]; p < m.outerIndexPtr()[col + 1]; ++p)
    if (m.innerIndexPtr()[p] == row) return p;
  throw std::logic_error("pattern_slot: entry missing from pattern");
}

} // namespace

FemAssembler::FemAssembler(const Grid& g) : grid_(g) {
  const double gp = 1.0 / std::sqrt(3.0);
  const double xi[4] = {-gp, gp, gp, -gp};
  const double eta[4] = {-gp, -gp, gp, gp};
  const double detJ = g.hx * g.hy / 4.0;

  shape_.resize(4, 4);
  for (int q = 0; q < 4; ++q) {
    Vec N(4);
    N << (1 - xi[q]) * (1 - eta[q]) / 4, (1 + xi[q]) * (1 - eta[q]) / 4,
        (1 + xi[q]) * (1 + eta[q]) / 4, (1 - xi[q]) * (1 + eta[q]) / 4;
    shape_.row(q) = N.transpose();

    Mat dN(4, 2);  // physical gradients of the corner shapes
    dN(0, 0) = -(1 - eta[q]) / 4 * 2 / g.hx;
    dN(0, 1) = -(1 - xi[q]) / 4 * 2 / g.hy;
    dN(1, 0) = (1 - eta[q]) / 4 * 2 / g.hx;
    dN(1, 1) = -(1 + xi[q]) / 4 * 2 / g.hy;
    dN(2, 0) = (1 + eta[q]) / 4 * 2 / g.hx;
    dN(2, 1) = (1 + xi[q]) / 4 * 2 / g.hy;
    dN(3, 0) = -(1 + eta[q]) / 4 * 2 / g.hx;
    dN(3, 1) = (1 - xi[q]) / 4 * 2 / g.hy;

    grad_outer_[q] = detJ * dN * dN.transpose();
    shape_outer_[q] = detJ * N * N.transpose();
    gauss_x_[q] = (1 + xi[q]) / 2 * g.hx;
    gauss_y_[q] = (1 + eta[q]) / 2 * g.hy;
  }

  const int nn = g.n_nodes();
  std::vector<Triplet> trips;
  trips.reserve(static_cast<std::size_t>(g.n_elems()) * 16);
  for (int e = 0; e < g.n_elems(); ++e) {
    const auto nd = g.elem_nodes(e);
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) trips.emplace_back(nd[a], nd[b], 0.0);
  }
  pattern_.resize(nn, nn);
  pattern_.setFromTriplets(trips.begin(), trips.end());
  pattern_.makeCompressed();

  slots_.resize(g.n_elems());
  for (int e = 0; e < g.n_elems(); ++e) {
    const auto nd = g.elem_nodes(e);
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b)
        slots_[e][a * 4 + b] = pattern_slot(pattern_, nd[a], nd[b]);
  }

  mass_ = assemble(Vec::Ones(nn), shape_outer_);
}

SpMat FemAssembler::assemble(const Vec& coef,
                             const std::array<Mat, 4>& local) const {
  SpMat out = pattern_;
  double* v = out.valuePtr();
  for (int e = 0; e < grid_.n_elems(); ++e) {
    const auto nd = grid_.elem_nodes(e);
    Mat acc = Mat::Zero(4, 4);
    for (int q = 0; q < 4; ++q) {
      double cq = 0.0;
      for (int i = 0; i < 4; ++i) cq += shape_(q, i) * coef[nd[i]];
      acc += cq * local[q];
    }
    const auto& sl = slots_[e];
    for (int a = 0; a < 4; ++a)
      for (int b = 0; b < 4; ++b) v[sl[a * 4 + b]] += acc(a, b);
  }
  return out;
}

SpMat FemAssembler::stiffness(const Vec& k_nodal) const {
  if (k_nodal.size() != grid_.n_nodes())
    throw std::invalid_argument("stiffness: coefficient size mismatch");
  if ((k_nodal.array() <= 0.0).any())
    throw std::invalid_argument("stiffness: permeability must be positive");
  return assemble(k_nodal, grad_outer_);
}

SpMat FemAssembler::weighted_mass(const Vec& q_nodal) const {
  if (q_nodal.size() != grid_.n_nodes())
    throw std::invalid_argument("weighted_mass: coefficient size mismatch");
  if ((q_nodal.array() < 0.0).any())
    throw std::invalid_argument("weighted_mass: weight must be nonnegative");
  return assemble(q_nodal, shape_outer_);
}

Vec FemAssembler::load(const std::function<double(double, double)>& f) const {
  Vec F = Vec::Zero(grid_.n_nodes());
  const double detJ = grid_.hx * grid_.hy / 4.0;
  for (int e = 0; e < grid_.n_elems(); ++e) {
    const auto nd = grid_.elem_nodes(e);
    const double ex0 = grid_.x0 + grid_.hx * (e % grid_.nx);
    const double ey0 = grid_.y0 + grid_.hy * (e / grid_.nx);
    for (int q = 0; q < 4; ++q) {
      const double fq = f(ex0 + gauss_x_[q], ey0 + gauss_y_[q]) * detJ;
      for (int i = 0; i < 4; ++i) F[nd[i]] += shape_(q, i) * fq;
    }
  }
  return F;
}

PointSample sample_point(const Grid& g, double x, double y) {
  const double tol = 1e-12;
  const double rx = (x - g.x0) / g.hx;
  const double ry = (y - g.y0) / g.hy;
  if (rx < -tol || rx > g.nx + tol || ry < -tol || ry > g.ny + tol)
    throw std::domain_error("sample_point: point outside the grid");
  const int ex = std::min(std::max(static_cast<int>(std::floor(rx)), 0), g.nx - 1);
  const int ey = std::min(std::max(static_cast<int>(std::floor(ry)), 0), g.ny - 1);
  const double xi = 2.0 * (rx - ex) - 1.0;
  const double eta = 2.0 * (ry - ey) - 1.0;
  PointSample s;
  s.nodes = g.elem_nodes(ey * g.nx + ex);
  s.w = {(1 - xi) * (1 - eta) / 4, (1 + xi) * (1 - eta) / 4,
         (1 + xi) * (1 + eta) / 4, (1 - xi) * (1 + eta) / 4};
  return s;
}

SpMat observation_matrix(const Grid& g,
                         const std::vector<std::pair<double, double>>& pts) {
  std::vector<Triplet> trips;
  trips.reserve(pts.size() * 4);
  for (std::size_t r = 0; r < pts.size(); ++r) {
    const PointSample s = sample_point(g, pts[r].first, pts[r].second);
    for (int i = 0; i < 4; ++i)
      trips.emplace_back(static_cast<int>(r), s.nodes[i], s.w[i]);
  }
  SpMat H(static_cast<int>(pts.size()), g.n_nodes());
  H.setFromTriplets(trips.begin(), trips.end());
  H.makeCompressed();
  return H;
}

ConstrainedSystem constrain(const Grid& g, const SpMat& K_full,
                            const SpMat& B_full, const BoundarySpec& bc) {
  const int nn = g.n_nodes();
  if (K_full.rows() != nn || B_full.rows() != nn)
    throw std::invalid_argument("constrain: matrix size mismatch");

  ConstrainedSystem cs;
  cs.lift = Vec::Zero(nn);
  cs.full_to_free.assign(nn, -1);
  cs.stiffness_singular = !bc.any_dirichlet();

  std::vector<bool> constrained(nn, false);
  for (int n = 0; n < nn; ++n) {
    // left and right take precedence at corners
    if (g.on_left(n) && bc.left.type == BcType::Dirichlet) {
      constrained[n] = true;
      cs.lift[n] = bc.left.value;
    } else if (g.on_right(n) && bc.right.type == BcType::Dirichlet) {
      constrained[n] = true;
      cs.lift[n] = bc.right.value;
    } else if (g.on_bottom(n) && bc.bottom.type == BcType::Dirichlet) {
      constrained[n] = true;
      cs.lift[n] = bc.bottom.value;
    } else if (g.on_top(n) && bc.top.type == BcType::Dirichlet) {
      constrained[n] = true;
      cs.lift[n] = bc.top.value;
    }
  }
  for (int n = 0; n < nn; ++n) {
    if (constrained[n]) continue;
    cs.full_to_free[n] = static_cast<int>(cs.free_nodes.size());
    cs.free_nodes.push_back(n);
  }

  const int nf = cs.n_free();
  cs.bc_load = Vec::Zero(nf);
  std::vector<Triplet> kt, bt;
  for (int col = 0; col < K_full.outerSize(); ++col) {
    for (SpMat::InnerIterator it(K_full, col); it; ++it) {
      const int fr = cs.full_to_free[it.row()];
      if (fr < 0) continue;
      const int fc = cs.full_to_free[col];
      if (fc >= 0)
        kt.emplace_back(fr, fc, it.value());
      else
        cs.bc_load[fr] += it.value() * cs.lift[col];
    }
  }
  for (int col = 0; col < B_full.outerSize(); ++col) {
    for (SpMat::InnerIterator it(B_full, col); it; ++it) {
      const int fr = cs.full_to_free[it.row()];
      const int fc = cs.full_to_free[col];
      if (fr >= 0 && fc >= 0) bt.emplace_back(fr, fc, it.value());
    }
  }
  cs.K.resize(nf, nf);
  cs.K.setFromTriplets(kt.begin(), kt.end());
  cs.K.makeCompressed();
  cs.B.resize(nf, nf);
  cs.B.setFromTriplets(bt.begin(), bt.end());
  cs.B.makeCompressed();
  return cs;
}

Vec ConstrainedSystem::restrict_full(const Vec& full) const {
  Vec out(n_free());
  for (int i = 0; i < n_free(); ++i) out[i] = full[free_nodes[i]];
  return out;
}

Vec ConstrainedSystem::expand(const Vec& free) const {
  Vec out = lift;
  for (int i = 0; i < n_free(); ++i) out[free_nodes[i]] = free[i];
  return out;
}

} // namespace tsenkf
