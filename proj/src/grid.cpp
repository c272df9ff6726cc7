#include "tsenkf/grid.hpp"

#include <stdexcept>

namespace tsenkf {

Grid::Grid(int nx_, int ny_)
    : Grid(nx_, ny_, 1.0 / nx_, 1.0 / ny_, 0.0, 0.0) {}

Grid::Grid(int nx_, int ny_, double hx_, double hy_, double x0_, double y0_)
    : nx(nx_), ny(ny_), hx(hx_), hy(hy_), x0(x0_), y0(y0_) {
  if (nx < 1 || ny < 1) throw std::invalid_argument("Grid: need nx, ny >= 1");
  if (!(hx > 0.0) || !(hy > 0.0))
    throw std::invalid_argument("Grid: need positive spacings");
}

std::array<int, 4> Grid::elem_nodes(int e) const {
  const int ex = e % nx;
  const int ey = e / nx;
  const int ll = node_id(ex, ey);
  return {ll, ll + 1, ll + nx + 2, ll + nx + 1};
}

} // namespace tsenkf
