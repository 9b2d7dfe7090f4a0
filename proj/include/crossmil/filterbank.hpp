#pragma once

#include "crossmil/synthvol.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace crossmil {

enum class Filter {
  smoothed,
  gradient_magnitude,
  laplacian,
  hessian_eig1,
  hessian_eig2,
  hessian_eig3,
  gaussian_curvature,
  eigen_magnitude,
};

inline constexpr std::array<Filter, 8> kAllFilters{
    Filter::smoothed,     Filter::gradient_magnitude, Filter::laplacian,          Filter::hessian_eig1,
    Filter::hessian_eig2, Filter::hessian_eig3,       Filter::gaussian_curvature, Filter::eigen_magnitude,
};

std::string_view filter_name(Filter f);
std::optional<Filter> filter_from_name(std::string_view name);

struct ScaleSet {
  std::vector<double> scales_mm{0.6, 1.2, 2.4, 4.8};
};

// Strictly positive and strictly increasing.
void validate_scales(const ScaleSet& s);

// Scalar grid defined where valid != 0; invalid voxels hold 0.
struct Field {
  Dims dims;
  std::vector<double> values;
  std::vector<std::uint8_t> valid;
};

struct FilterResponse {
  Filter filter = Filter::smoothed;
  double scale_mm = 0.0;
  Field field;
};

struct DerivativeOrder {
  int dx = 0, dy = 0, dz = 0;
};

// Sampled 1-D Gaussian (order 0), first or second derivative, radius
// ceil(4 sigma). Order 0 sums to 1; order 1 satisfies sum(t k) = -1 and
// order 2 has zero sum and sum(t^2 k) = 2, so convolution differentiates
// polynomials up to degree 2 exactly.
std::vector<double> gaussian_kernel(double sigma_vox, int order);

// Unnormalized separable convolution of `input` (zero outside the grid) with
// the product of per-axis derivative-of-Gaussian kernels.
std::vector<double> separable_convolution(const std::vector<double>& input, Dims dims,
                                          const std::array<double, 3>& sigma_vox, DerivativeOrder order);

// Normalized convolution within the mask. Order 0 is G*(m v) / G*m; higher
// orders are the spatial derivatives (in mm) of that quotient, built from the
// derivative convolutions of numerator and denominator. Voxels outside the
// mask or with an empty kernel support are invalid.
Field normalized_gaussian_smooth(const Volume& v, const MaskVolume& mask, double sigma_mm,
                                 DerivativeOrder order);

struct HessianFeatures {
  Field eig1, eig2, eig3;
  Field gaussian_curvature;
  Field eigen_magnitude;
};

HessianFeatures hessian_features(const Volume& v, const MaskVolume& mask, double sigma_mm);

// Sorted by descending absolute value, sign kept.
std::array<double, 3> sorted_eigenvalues(const Eigen::Matrix3d& h);

// The eight responses at one scale, in kAllFilters order.
std::vector<FilterResponse> responses_at_scale(const Volume& v, const MaskVolume& mask, double sigma_mm);

// 8 x |scales| responses, scale-major.
std::vector<FilterResponse> all_responses(const Volume& v, const MaskVolume& mask, const ScaleSet& scales);

}  // namespace crossmil
