#include "tsenkf/stepper.hpp"

namespace tsenkf {

template std::vector<Vec> march_caputo<SpMat>(double, double, const SpMat&,
                                              const SpMat&, const Vec&, int,
                                              const std::function<Vec(int)>&);
template std::vector<Vec> march_caputo<Mat>(double, double, const Mat&,
                                            const Mat&, const Vec&, int,
                                            const std::function<Vec(int)>&);
template std::vector<Vec> march_implicit_euler<SpMat>(
    const SpMat&, const SpMat&, double, const Vec&, int,
    const std::function<Vec(int)>&);
template std::vector<Vec> march_implicit_euler<Mat>(
    const Mat&, const Mat&, double, const Vec&, int,
    const std::function<Vec(int)>&);

} // namespace tsenkf
