#pragma once

#include "tsenkf/grid.hpp"
#include "tsenkf/linalg.hpp"

#include <array>
#include <functional>
#include <utility>
#include <vector>

namespace tsenkf {

// Bilinear quads with 2x2 Gauss quadrature. Coefficients live on the nodes
// and are interpolated to quadrature points. The sparsity pattern and the
// per-Gauss-point element matrices are cached at construction, so repeated
// assemblies with new coefficients only rewrite values.
class FemAssembler {
public:
  explicit FemAssembler(const Grid& g);

  const Grid& grid() const { return grid_; }

  SpMat stiffness(const Vec& k_nodal) const;      // requires k > 0 nodally
  SpMat weighted_mass(const Vec& q_nodal) const;  // requires q >= 0 nodally
  const SpMat& mass() const { return mass_; }     // unit weight

  // integral of f v, f sampled at the quadrature points
  Vec load(const std::function<double(double, double)>& f) const;
  // integral of f_h v for the bilinear interpolant of nodal data
  Vec load_nodal(const Vec& f_nodal) const { return mass_ * f_nodal; }

private:
  SpMat assemble(const Vec& coef, const std::array<Mat, 4>& local) const;

  Grid grid_;
  SpMat pattern_;  // zero values, fixed structure
  SpMat mass_;
  std::vector<std::array<int, 16>> slots_;  // element x (a,b) -> valuePtr index
  std::array<Mat, 4> grad_outer_;  // per Gauss point, detJ folded in
  std::array<Mat, 4> shape_outer_;
  Mat shape_;                      // (gauss, corner) -> N value
  std::array<double, 4> gauss_x_, gauss_y_;  // offsets from element origin
};

// Bilinear evaluation weights at one physical point.
struct PointSample {
  std::array<int, 4> nodes;
  std::array<double, 4> w;
};

PointSample sample_point(const Grid& g, double x, double y);
// rows evaluate a nodal field at the given points
SpMat observation_matrix(const Grid& g,
                         const std::vector<std::pair<double, double>>& pts);

enum class BcType { Dirichlet, Neumann };

struct SideBc {
  BcType type = BcType::Neumann;
  double value = 0.0;  // Dirichlet trace, constant along the side
};

// Corner nodes on two Dirichlet sides take the left/right value.
struct BoundarySpec {
  SideBc left, right, bottom, top;
  bool any_dirichlet() const {
    return left.type == BcType::Dirichlet || right.type == BcType::Dirichlet ||
           bottom.type == BcType::Dirichlet || top.type == BcType::Dirichlet;
  }
};

// Dirichlet elimination. Matrices keep free rows/columns only; loads are
// restricted per step and bc_load (= K_fb g) subtracted once. Because the
// marching weights sum to 1, the mass coupling B_fb g cancels between the
// two sides of the time-stepping identity and is not stored.
struct ConstrainedSystem {
  std::vector<int> free_nodes;    // ascending
  std::vector<int> full_to_free;  // -1 on constrained nodes
  SpMat K, B;
  Vec bc_load;
  Vec lift;  // full-sized, boundary values on constrained nodes, else 0
  bool stiffness_singular = false;  // no Dirichlet side anywhere

  int n_free() const { return static_cast<int>(free_nodes.size()); }
  Vec restrict_full(const Vec& full) const;
  Vec expand(const Vec& free) const;  // lift + scatter
};

ConstrainedSystem constrain(const Grid& g, const SpMat& K_full,
                            const SpMat& B_full, const BoundarySpec& bc);

} // namespace tsenkf
