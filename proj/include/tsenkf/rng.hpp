#pragma once

#include <cstdint>

namespace tsenkf {

// Standard normal CDF and its inverse. The inverse is a rational
// approximation accurate to ~1e-15; both are pure functions of their
// argument, so draws built on them are bit-reproducible across platforms.
double normal_cdf(double x);
double normal_quantile(double p);

// Purpose tags keep independent draw sites on disjoint streams even when
// they share (seed, step, member).
enum class Tag : std::uint64_t {
  PriorDraw = 1,
  DataNoise = 2,
  Perturb = 3,
  InvGamma = 4,
  NewPriorDraw = 5,
  TrainingNodes = 6,
  TruthDraw = 7,
  SnapshotDraw = 8,
  CoarseErrorDraw = 9,
};

// Counter-keyed generator: the state is derived from (seed, a, b, c) by
// splitmix64 mixing, so a stream can be reconstructed at any draw site
// without threading generator state through the call graph. Sequences do
// not depend on thread count.
class RngStream {
public:
  explicit RngStream(std::uint64_t seed, std::uint64_t a = 0,
                     std::uint64_t b = 0, std::uint64_t c = 0);
  RngStream(std::uint64_t seed, std::uint64_t step, std::uint64_t member, Tag tag)
      : RngStream(seed, step, member, static_cast<std::uint64_t>(tag)) {}

  std::uint64_t next_u64();
  double uniform();  // strictly inside (0, 1)
  double normal();   // inverse-CDF of uniform(); exact N(0,1) marginals
  double gamma(double shape);  // unit scale, shape > 0
  double inv_gamma(double shape, double scale);  // mean scale/(shape-1)

private:
  std::uint64_t state_;
};

} // namespace tsenkf
