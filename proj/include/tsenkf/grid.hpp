#pragma once

#include <array>

namespace tsenkf {

// Uniform rectangle mesh. Nodes are lexicographic with x fastest; element
// e = ey*nx + ex covers [x0+ex*hx, x0+(ex+1)*hx] x [y0+ey*hy, y0+(ey+1)*hy].
// The default constructor arguments give the unit square.
struct Grid {
  int nx = 0, ny = 0;
  double hx = 0.0, hy = 0.0;
  double x0 = 0.0, y0 = 0.0;

  Grid(int nx_, int ny_);
  Grid(int nx_, int ny_, double hx_, double hy_, double x0_, double y0_);

  int n_nodes() const { return (nx + 1) * (ny + 1); }
  int n_elems() const { return nx * ny; }
  int node_id(int i, int j) const { return j * (nx + 1) + i; }
  int node_i(int n) const { return n % (nx + 1); }
  int node_j(int n) const { return n / (nx + 1); }
  double node_x(int n) const { return x0 + hx * node_i(n); }
  double node_y(int n) const { return y0 + hy * node_j(n); }

  // counterclockwise from the lower-left corner
  std::array<int, 4> elem_nodes(int e) const;

  bool on_left(int n) const { return node_i(n) == 0; }
  bool on_right(int n) const { return node_i(n) == nx; }
  bool on_bottom(int n) const { return node_j(n) == 0; }
  bool on_top(int n) const { return node_j(n) == ny; }
  bool on_boundary(int n) const {
    return on_left(n) || on_right(n) || on_bottom(n) || on_top(n);
  }
};

} // namespace tsenkf
