#include "crossmil/filterbank.hpp"

#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <string>

namespace crossmil {

std::string_view filter_name(Filter f) {
  switch (f) {
    case Filter::smoothed: return "smoothed";
    case Filter::gradient_magnitude: return "gradient-magnitude";
    case Filter::laplacian: return "laplacian";
    case Filter::hessian_eig1: return "hessian-eig1";
    case Filter::hessian_eig2: return "hessian-eig2";
    case Filter::hessian_eig3: return "hessian-eig3";
    case Filter::gaussian_curvature: return "gaussian-curvature";
    case Filter::eigen_magnitude: return "eigen-magnitude";
  }
  return "unknown";
}

std::optional<Filter> filter_from_name(std::string_view name) {
  for (Filter f : kAllFilters)
    if (filter_name(f) == name) return f;
  return std::nullopt;
}

void validate_scales(const ScaleSet& s) {
  if (s.scales_mm.empty()) throw ConfigError("scale set is empty");
  for (std::size_t i = 0; i < s.scales_mm.size(); ++i) {
    if (!(s.scales_mm[i] > 0.0)) throw ConfigError("scales must be strictly positive");
    if (i > 0 && !(s.scales_mm[i] > s.scales_mm[i - 1])) throw ConfigError("scales must be strictly increasing");
  }
}

std::vector<double> gaussian_kernel(double sigma_vox, int order) {
  if (!(sigma_vox > 0.0)) throw ConfigError("kernel sigma must be positive");
  if (order < 0 || order > 2) throw ConfigError("derivative order must be 0, 1 or 2");
  const int r = static_cast<int>(std::ceil(4.0 * sigma_vox));
  std::vector<double> g0(2 * r + 1);
  double sum = 0.0;
  for (int t = -r; t <= r; ++t) sum += g0[t + r] = std::exp(-0.5 * t * t / (sigma_vox * sigma_vox));
  for (double& v : g0) v /= sum;
  if (order == 0) return g0;

  std::vector<double> k(g0.size());
  if (order == 1) {
    double moment = 0.0;
    for (int t = -r; t <= r; ++t) {
      k[t + r] = -t * g0[t + r];
      moment += t * k[t + r];
    }
    for (double& v : k) v *= -1.0 / moment;
    return k;
  }
  // a t^2 g0 + b g0 with zero sum and second moment 2.
  double m2 = 0.0, m4 = 0.0;
  for (int t = -r; t <= r; ++t) {
    const double t2 = double(t) * t;
    m2 += t2 * g0[t + r];
    m4 += t2 * t2 * g0[t + r];
  }
  const double a = 2.0 / (m4 - m2 * m2);
  const double b = -a * m2;
  for (int t = -r; t <= r; ++t) k[t + r] = (a * double(t) * t + b) * g0[t + r];
  return k;
}

namespace {

int axis_length(Dims d, int axis) { return axis == 0 ? d.nx : (axis == 1 ? d.ny : d.nz); }

void check_extent(Dims d, const std::array<double, 3>& sigma_vox) {
  for (int a = 0; a < 3; ++a) {
    const int r = static_cast<int>(std::ceil(4.0 * sigma_vox[a]));
    if (2 * r + 1 > axis_length(d, a))
      throw ConfigError("Gaussian kernel (sigma " + std::to_string(sigma_vox[a]) +
                        " voxels) exceeds the volume extent along axis " + std::to_string(a));
  }
}

// out[p] = sum_t k[t] in[p - t] along one axis, zero outside the grid.
void convolve_axis(const std::vector<double>& in, std::vector<double>& out, Dims d, int axis,
                   const std::vector<double>& k) {
  const int r = static_cast<int>(k.size() / 2);
  const int nx = d.nx, ny = d.ny, nz = d.nz;
  out.assign(in.size(), 0.0);
  if (axis == 0) {
    for (int z = 0; z < nz; ++z)
      for (int y = 0; y < ny; ++y) {
        const double* src = in.data() + d.index(0, y, z);
        double* dst = out.data() + d.index(0, y, z);
        for (int x = 0; x < nx; ++x) {
          const int t_lo = std::max(-r, x - (nx - 1)), t_hi = std::min(r, x);
          double acc = 0.0;
          for (int t = t_lo; t <= t_hi; ++t) acc += k[t + r] * src[x - t];
          dst[x] = acc;
        }
      }
    return;
  }
  const int n = axis == 1 ? ny : nz;
  for (int outer = 0; outer < (axis == 1 ? nz : ny); ++outer)
    for (int p = 0; p < n; ++p) {
      double* dst = axis == 1 ? out.data() + d.index(0, p, outer) : out.data() + d.index(0, outer, p);
      const int t_lo = std::max(-r, p - (n - 1)), t_hi = std::min(r, p);
      for (int t = t_lo; t <= t_hi; ++t) {
        const double w = k[t + r];
        const double* src = axis == 1 ? in.data() + d.index(0, p - t, outer) : in.data() + d.index(0, outer, p - t);
        for (int x = 0; x < nx; ++x) dst[x] += w * src[x];
      }
    }
}

// Slots for the ten derivative orders with total order <= 2.
enum Slot { s000, s100, s010, s001, s200, s020, s002, s110, s101, s011, kSlots };

using DerivativeSet = std::array<std::vector<double>, kSlots>;

DerivativeSet all_orders(const std::vector<double>& in, Dims d, const std::array<double, 3>& sigma_vox) {
  std::array<std::array<std::vector<double>, 3>, 3> kern;
  for (int a = 0; a < 3; ++a)
    for (int o = 0; o < 3; ++o) kern[a][o] = gaussian_kernel(sigma_vox[a], o);

  std::array<std::vector<double>, 3> x;
  for (int o = 0; o < 3; ++o) convolve_axis(in, x[o], d, 0, kern[0][o]);
  // xy[a][b]: order a in x, b in y.
  std::vector<double> xy[3][3];
  for (int a = 0; a < 3; ++a)
    for (int b = 0; a + b <= 2; ++b) convolve_axis(x[a], xy[a][b], d, 1, kern[1][b]);

  DerivativeSet out;
  convolve_axis(xy[0][0], out[s000], d, 2, kern[2][0]);
  convolve_axis(xy[1][0], out[s100], d, 2, kern[2][0]);
  convolve_axis(xy[0][1], out[s010], d, 2, kern[2][0]);
  convolve_axis(xy[0][0], out[s001], d, 2, kern[2][1]);
  convolve_axis(xy[2][0], out[s200], d, 2, kern[2][0]);
  convolve_axis(xy[0][2], out[s020], d, 2, kern[2][0]);
  convolve_axis(xy[0][0], out[s002], d, 2, kern[2][2]);
  convolve_axis(xy[1][1], out[s110], d, 2, kern[2][0]);
  convolve_axis(xy[1][0], out[s101], d, 2, kern[2][1]);
  convolve_axis(xy[0][1], out[s011], d, 2, kern[2][1]);
  return out;
}

// Value, gradient and Hessian (mm units) of the normalized-convolution
// quotient f = N / D at one voxel.
struct LocalJet {
  double f;
  std::array<double, 3> grad;
  Eigen::Matrix3d hess;
};

struct ScaleJets {
  Dims dims;
  std::vector<std::uint8_t> valid;
  DerivativeSet num, den;
  Spacing spacing;

  LocalJet jet(std::size_t i) const {
    static constexpr Slot first[3] = {s100, s010, s001};
    static constexpr Slot second[3][3] = {{s200, s110, s101}, {s110, s020, s011}, {s101, s011, s002}};
    const double d0 = den[s000][i];
    LocalJet j;
    j.f = num[s000][i] / d0;
    std::array<double, 3> fv;  // voxel units
    for (int a = 0; a < 3; ++a) fv[a] = (num[first[a]][i] - j.f * den[first[a]][i]) / d0;
    for (int a = 0; a < 3; ++a) {
      j.grad[a] = fv[a] / spacing[a];
      for (int b = 0; b < 3; ++b) {
        const Slot ab = second[a][b];
        const double fab = (num[ab][i] - fv[a] * den[first[b]][i] - fv[b] * den[first[a]][i] - j.f * den[ab][i]) / d0;
        j.hess(a, b) = fab / (spacing[a] * spacing[b]);
      }
    }
    return j;
  }
};

void check_inputs(const Volume& v, const MaskVolume& mask, double sigma_mm) {
  if (!(v.dims == mask.dims)) throw DataError("mask dims do not match volume dims");
  if (v.data.size() != v.dims.count()) throw DataError("volume data size does not match dims");
  if (!(sigma_mm > 0.0)) throw ConfigError("sigma_mm must be positive");
}

ScaleJets compute_jets(const Volume& v, const MaskVolume& mask, double sigma_mm) {
  check_inputs(v, mask, sigma_mm);
  const std::array<double, 3> sigma_vox{sigma_mm / v.spacing.x, sigma_mm / v.spacing.y, sigma_mm / v.spacing.z};
  check_extent(v.dims, sigma_vox);
  std::vector<double> mv(v.data.size()), m(v.data.size());
  for (std::size_t i = 0; i < mv.size(); ++i) {
    m[i] = mask.data[i] ? 1.0 : 0.0;
    mv[i] = mask.data[i] ? static_cast<double>(v.data[i]) : 0.0;
  }
  ScaleJets s;
  s.dims = v.dims;
  s.spacing = v.spacing;
  s.num = all_orders(mv, v.dims, sigma_vox);
  s.den = all_orders(m, v.dims, sigma_vox);
  s.valid.assign(mv.size(), 0);
  for (std::size_t i = 0; i < mv.size(); ++i) s.valid[i] = mask.data[i] && s.den[s000][i] > 1e-12;
  return s;
}

Field empty_field(const ScaleJets& s) {
  return Field{s.dims, std::vector<double>(s.valid.size(), 0.0), s.valid};
}

}  // namespace

std::vector<double> separable_convolution(const std::vector<double>& input, Dims dims,
                                          const std::array<double, 3>& sigma_vox, DerivativeOrder order) {
  if (input.size() != dims.count()) throw DataError("input size does not match dims");
  check_extent(dims, sigma_vox);
  std::vector<double> a, b;
  convolve_axis(input, a, dims, 0, gaussian_kernel(sigma_vox[0], order.dx));
  convolve_axis(a, b, dims, 1, gaussian_kernel(sigma_vox[1], order.dy));
  convolve_axis(b, a, dims, 2, gaussian_kernel(sigma_vox[2], order.dz));
  return a;
}

Field normalized_gaussian_smooth(const Volume& v, const MaskVolume& mask, double sigma_mm, DerivativeOrder order) {
  const int total = order.dx + order.dy + order.dz;
  if (order.dx < 0 || order.dy < 0 || order.dz < 0 || order.dx > 2 || order.dy > 2 || order.dz > 2 || total > 2)
    throw ConfigError("derivative orders must lie in {0,1,2} with sum <= 2");
  const ScaleJets s = compute_jets(v, mask, sigma_mm);
  Field out = empty_field(s);
  std::array<int, 3> o{order.dx, order.dy, order.dz};
  for (std::size_t i = 0; i < out.values.size(); ++i) {
    if (!s.valid[i]) continue;
    const LocalJet j = s.jet(i);
    if (total == 0) {
      out.values[i] = j.f;
    } else if (total == 1) {
      const int a = static_cast<int>(std::max_element(o.begin(), o.end()) - o.begin());
      out.values[i] = j.grad[a];
    } else {
      int a = -1, b = -1;
      for (int ax = 0; ax < 3; ++ax)
        for (int c = 0; c < o[ax]; ++c) (a < 0 ? a : b) = ax;
      out.values[i] = j.hess(a, b);
    }
  }
  return out;
}

std::array<double, 3> sorted_eigenvalues(const Eigen::Matrix3d& h) {
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> solver(h, Eigen::EigenvaluesOnly);
  const Eigen::Vector3d ev = solver.eigenvalues();
  std::array<double, 3> out{ev(0), ev(1), ev(2)};
  std::sort(out.begin(), out.end(), [](double a, double b) { return std::abs(a) > std::abs(b); });
  return out;
}

namespace {

std::vector<FilterResponse> responses_from_jets(const ScaleJets& s, double sigma_mm) {
  std::vector<FilterResponse> out;
  for (Filter f : kAllFilters) out.push_back(FilterResponse{f, sigma_mm, empty_field(s)});
  auto put = [&](Filter f, std::size_t i, double value) { out[static_cast<std::size_t>(f)].field.values[i] = value; };
  for (std::size_t i = 0; i < s.valid.size(); ++i) {
    if (!s.valid[i]) continue;
    const LocalJet j = s.jet(i);
    const auto ev = sorted_eigenvalues(j.hess);
    put(Filter::smoothed, i, j.f);
    put(Filter::gradient_magnitude, i, std::sqrt(j.grad[0] * j.grad[0] + j.grad[1] * j.grad[1] + j.grad[2] * j.grad[2]));
    put(Filter::laplacian, i, j.hess.trace());
    put(Filter::hessian_eig1, i, ev[0]);
    put(Filter::hessian_eig2, i, ev[1]);
    put(Filter::hessian_eig3, i, ev[2]);
    put(Filter::gaussian_curvature, i, ev[0] * ev[1] * ev[2]);
    put(Filter::eigen_magnitude, i, std::sqrt(ev[0] * ev[0] + ev[1] * ev[1] + ev[2] * ev[2]));
  }
  return out;
}

}  // namespace

HessianFeatures hessian_features(const Volume& v, const MaskVolume& mask, double sigma_mm) {
  auto r = responses_from_jets(compute_jets(v, mask, sigma_mm), sigma_mm);
  auto take = [&](Filter f) { return std::move(r[static_cast<std::size_t>(f)].field); };
  HessianFeatures h;
  h.eig1 = take(Filter::hessian_eig1);
  h.eig2 = take(Filter::hessian_eig2);
  h.eig3 = take(Filter::hessian_eig3);
  h.gaussian_curvature = take(Filter::gaussian_curvature);
  h.eigen_magnitude = take(Filter::eigen_magnitude);
  return h;
}

std::vector<FilterResponse> responses_at_scale(const Volume& v, const MaskVolume& mask, double sigma_mm) {
  return responses_from_jets(compute_jets(v, mask, sigma_mm), sigma_mm);
}

std::vector<FilterResponse> all_responses(const Volume& v, const MaskVolume& mask, const ScaleSet& scales) {
  validate_scales(scales);
  std::vector<FilterResponse> out;
  out.reserve(8 * scales.scales_mm.size());
  for (double s : scales.scales_mm) {
    auto r = responses_at_scale(v, mask, s);
    std::move(r.begin(), r.end(), std::back_inserter(out));
  }
  return out;
}

}  // namespace crossmil
