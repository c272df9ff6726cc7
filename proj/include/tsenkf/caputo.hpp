#pragma once

#include "tsenkf/linalg.hpp"

namespace tsenkf {

// History weights for computing u^n from u^0..u^{n-1}. Both regimes
// telescope so the weights sum to exactly 1, which is what cancels the
// Dirichlet mass coupling in the constrained marching identity.
Vec sub_history_weights(double gamma, int n);    // 0 < gamma < 1
Vec super_history_weights(double gamma, int n);  // 1 < gamma < 2, n=1 -> (1)

double sub_scale(double gamma, double dt);    // dt^g Gamma(2-g)
double super_scale(double gamma, double dt);  // dt^g Gamma(3-g)

// dispatch on the regime of gamma
Vec caputo_history_weights(double gamma, int n);
double caputo_scale(double gamma, double dt);

} // namespace tsenkf
