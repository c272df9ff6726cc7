#pragma once

#include "tsenkf/fem.hpp"
#include "tsenkf/grid.hpp"
#include "tsenkf/linalg.hpp"

#include <functional>
#include <vector>

namespace tsenkf {

struct GmsfemOptions {
  int coarse_nx = 4, coarse_ny = 4;
  int n_theta = 10;   // parameter samples feeding the snapshot spaces
  int m_snap = 20;    // eigenfunctions kept per sample
  double snap_tol = 1e-10;  // singular-value cutoff for the snapshot span
};

// Multiscale basis at one mean parameter: columns are hat-weighted local
// eigenfunctions, grouped per coarse node.
struct MultiscaleBasis {
  Mat R;           // fine nodes x M_v
  int m_i = 0;     // basis functions per coarse node
  bool full_rank = true;
  Vec theta_bar;
};

// Reduced operators for a constrained fine system. Rf keeps only the free
// rows of R, so the reduced march never sees constrained dofs.
struct ReducedSystem {
  Mat Rf;
  Mat K, B;
  Vec bc_load;  // Rf^T (K_fb g)
};

// Snapshot spaces are built once from prior samples; the spectral reduction
// at the current ensemble mean is re-run per update_mean call, snapshots are
// not recomputed.
class GmsfemReducer {
public:
  GmsfemReducer(const Grid& fine, const GmsfemOptions& opt,
                std::function<Vec(const Vec&)> permeability_of_theta,
                const std::vector<Vec>& prior_samples);

  MultiscaleBasis build_basis(const Vec& theta_bar, int m_i) const;

  int n_coarse_nodes() const { return static_cast<int>(nbhd_.size()); }
  // numerical rank kept per neighborhood after snapshot orthonormalization
  const std::vector<int>& snapshot_ranks() const { return ranks_; }
  bool snapshots_degenerate() const { return degenerate_; }
  // partition-of-unity value of coarse node i scattered to fine nodes
  Vec pou_global(int i) const;

private:
  struct Neighborhood {
    Grid local;
    std::vector<int> to_global;
    Vec chi;        // hat of the owning coarse node at local nodes
    FemAssembler fem;
    Mat snap;       // orthonormal snapshot span, local dofs x rank
  };

  Vec local_coef(const Neighborhood& nb, const Vec& global_nodal) const;

  Grid fine_;
  GmsfemOptions opt_;
  std::function<Vec(const Vec&)> perm_;
  std::vector<Neighborhood> nbhd_;
  std::vector<int> ranks_;
  bool degenerate_ = false;
};

ReducedSystem project(const MultiscaleBasis& basis,
                      const ConstrainedSystem& cs);
// reduced effective load for a full-grid load vector
Vec reduce_load(const ReducedSystem& rs, const ConstrainedSystem& cs,
                const Vec& F_full);
// fine-grid field: boundary lift plus the reduced solution's free values
Vec downscale(const ReducedSystem& rs, const ConstrainedSystem& cs,
              const Vec& u_H);

} // namespace tsenkf
