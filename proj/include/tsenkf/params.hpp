#pragma once

#include "tsenkf/grid.hpp"
#include "tsenkf/kle.hpp"
#include "tsenkf/linalg.hpp"

#include <vector>

namespace tsenkf {

// log k from explicit level-set boundary curves sampled at the grid's x
// nodes (sizes nx+1). Regions: above both curves -> c[0]; between -> c[1];
// below both -> c[2]. "Above" is the strict test y > curve(x).
Vec channel_log_k_from_curves(const Vec& c, const Vec& curve1,
                              const Vec& curve2, const Grid& fine);

// Two-channel level-set permeability: theta = (c1, c2, c3, w1_{1..m1},
// w2_{1..m2}); curves are KLE combinations pushed through
// 0.5 + atan(.)/pi so the boundaries stay inside (0,1).
struct ChannelModel {
  KleBasis basis;  // 1D, built on the fine grid's x-node coordinates
  int m1 = 5, m2 = 5;

  int dim() const { return 3 + m1 + m2; }
  Vec raw_curve(const Vec& w) const;     // sum_j w_j sqrt(lambda_j) phi_j
  static Vec squash(const Vec& curve);   // into (0,1)
  Vec transformed_curve(const Vec& theta, int which) const;
  Vec log_k(const Vec& theta, const Grid& fine) const;
  Vec permeability(const Vec& theta, const Grid& fine) const;
};

// Gaussian pulses with Heaviside time windows, H(0) = 1. The first pulse
// runs on [0, T_m); pulse i >= 2 starts at T_{i-1}.
struct SourcePulse {
  double strength = 1.0;
  double tau = 0.1;
  double x = 0.5, y = 0.5;
};

struct SourceModel {
  std::vector<SourcePulse> pulses;
  std::vector<double> switch_times;  // T_1 < ... < T_m

  double value(double x, double y, double t) const;
};

// Componentwise probit bijection between a box and all of R^n.
struct BoundedMap {
  Vec lo, hi;

  int dim() const { return static_cast<int>(lo.size()); }
  Vec forward(const Vec& theta) const;   // q_i = Phi^{-1}((theta_i-a_i)/(b_i-a_i))
  Vec backward(const Vec& q) const;
};

} // namespace tsenkf
