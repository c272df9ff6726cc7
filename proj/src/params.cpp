#include "tsenkf/params.hpp"

#include "tsenkf/rng.hpp"

#include <cmath>
#include <stdexcept>

namespace tsenkf {

namespace {
constexpr double kPi = 3.14159265358979323846;
}

Vec channel_log_k_from_curves(const Vec& c, const Vec& curve1,
                              const Vec& curve2, const Grid& fine) {
  if (c.size() != 3)
    throw std::invalid_argument("channel_log_k_from_curves: need 3 region values");
  if (curve1.size() != fine.nx + 1 || curve2.size() != fine.nx + 1)
    throw std::invalid_argument(
        "channel_log_k_from_curves: curves must be sampled at the x nodes");
  Vec logk(fine.n_nodes());
  for (int n = 0; n < fine.n_nodes(); ++n) {
    const int i = fine.node_i(n);
    const double y = fine.node_y(n);
    const double l1 = y > curve1[i] ? 1.0 : 0.0;
    const double l2 = y > curve2[i] ? 1.0 : 0.0;
    logk[n] = c[0] * l1 * l2 + c[1] * (1.0 - l1) * l2 +
              c[2] * (1.0 - l1) * (1.0 - l2);
  }
  return logk;
}

Vec ChannelModel::raw_curve(const Vec& w) const {
  if (w.size() > basis.n_modes())
    throw std::invalid_argument("ChannelModel: more weights than basis modes");
  return basis.phi.leftCols(w.size()) *
         basis.lambda.head(w.size()).cwiseSqrt().cwiseProduct(w);
}

Vec ChannelModel::squash(const Vec& curve) {
  return 0.5 + (curve.array().atan() / kPi).matrix().array();
}

Vec ChannelModel::transformed_curve(const Vec& theta, int which) const {
  if (theta.size() != dim())
    throw std::invalid_argument("ChannelModel: theta size mismatch");
  const Vec w = which == 1 ? theta.segment(3, m1) : theta.segment(3 + m1, m2);
  return squash(raw_curve(w));
}

Vec ChannelModel::log_k(const Vec& theta, const Grid& fine) const {
  if (basis.n_points() != fine.nx + 1)
    throw std::invalid_argument(
        "ChannelModel: basis not built on the grid's x nodes");
  return channel_log_k_from_curves(theta.head(3),
                                   transformed_curve(theta, 1),
                                   transformed_curve(theta, 2), fine);
}

Vec ChannelModel::permeability(const Vec& theta, const Grid& fine) const {
  return log_k(theta, fine).array().exp();
}

double SourceModel::value(double x, double y, double t) const {
  if (pulses.empty()) return 0.0;
  if (pulses.size() != switch_times.size())
    throw std::logic_error("SourceModel: one switch time per pulse");
  const auto bump = [&](const SourcePulse& p) {
    const double r2 = (p.x - x) * (p.x - x) + (p.y - y) * (p.y - y);
    return p.strength / (2.0 * kPi * p.tau * p.tau) *
           std::exp(-r2 / (2.0 * p.tau * p.tau));
  };
  double f = 0.0;
  if (t < switch_times.back()) f += bump(pulses[0]);  // off once t >= T_m
  for (std::size_t i = 1; i < pulses.size(); ++i)
    if (t >= switch_times[i - 1]) f += bump(pulses[i]);
  return f;
}

Vec BoundedMap::forward(const Vec& theta) const {
  if (theta.size() != dim())
    throw std::invalid_argument("BoundedMap: theta size mismatch");
  Vec q(dim());
  for (int i = 0; i < dim(); ++i) {
    const double r = (theta[i] - lo[i]) / (hi[i] - lo[i]);
    if (!(r > 0.0 && r < 1.0))
      throw std::domain_error("BoundedMap: component outside the open box");
    q[i] = normal_quantile(r);
  }
  return q;
}

Vec BoundedMap::backward(const Vec& q) const {
  if (q.size() != dim())
    throw std::invalid_argument("BoundedMap: q size mismatch");
  Vec theta(dim());
  for (int i = 0; i < dim(); ++i)
    theta[i] = lo[i] + (hi[i] - lo[i]) * normal_cdf(q[i]);
  return theta;
}

} // namespace tsenkf
