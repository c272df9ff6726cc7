#include "tsenkf/caputo.hpp"

#include <cmath>
#include <stdexcept>

namespace tsenkf {

Vec sub_history_weights(double gamma, int n) {
  if (!(gamma > 0.0 && gamma < 1.0))
    throw std::domain_error("sub_history_weights: gamma outside (0,1)");
  if (n < 1) throw std::invalid_argument("sub_history_weights: n must be >= 1");
  const double d = 1.0 - gamma;
  Vec c(n);
  double prev = std::pow(n, d) - std::pow(n - 1, d);  // b_0
  c[0] = prev;
  for (int k = 1; k < n; ++k) {
    const double b = std::pow(n - k, d) - std::pow(n - k - 1, d);
    c[k] = b - prev;
    prev = b;
  }
  return c;
}

Vec super_history_weights(double gamma, int n) {
  if (!(gamma > 1.0 && gamma < 2.0))
    throw std::domain_error("super_history_weights: gamma outside (1,2)");
  if (n < 1)
    throw std::invalid_argument("super_history_weights: n must be >= 1");
  if (n == 1) return Vec::Ones(1);  // startup copies the initial state
  const double d = 2.0 - gamma;
  // bt[k] weights the second difference u^{k+2} - 2u^{k+1} + u^k; the
  // newest unknown u^n picks up bt[n-2] = 1 with no normalization needed
  Vec bt(n - 1);
  for (int k = 0; k <= n - 2; ++k)
    bt[k] = std::pow(n - 1 - k, d) - std::pow(n - 2 - k, d);
  const auto at = [&](int i) { return (i >= 0 && i <= n - 2) ? bt[i] : 0.0; };
  Vec w(n);
  for (int j = 0; j < n; ++j) w[j] = -(at(j - 2) - 2.0 * at(j - 1) + at(j));
  return w;
}

double sub_scale(double gamma, double dt) {
  if (!(gamma > 0.0 && gamma < 1.0))
    throw std::domain_error("sub_scale: gamma outside (0,1)");
  if (!(dt > 0.0)) throw std::invalid_argument("sub_scale: dt must be positive");
  return std::pow(dt, gamma) * std::tgamma(2.0 - gamma);
}

double super_scale(double gamma, double dt) {
  if (!(gamma > 1.0 && gamma < 2.0))
    throw std::domain_error("super_scale: gamma outside (1,2)");
  if (!(dt > 0.0))
    throw std::invalid_argument("super_scale: dt must be positive");
  return std::pow(dt, gamma) * std::tgamma(3.0 - gamma);
}

Vec caputo_history_weights(double gamma, int n) {
  return gamma < 1.0 ? sub_history_weights(gamma, n)
                     : super_history_weights(gamma, n);
}

double caputo_scale(double gamma, double dt) {
  return gamma < 1.0 ? sub_scale(gamma, dt) : super_scale(gamma, dt);
}

} // namespace tsenkf
