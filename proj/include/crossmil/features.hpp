#pragma once

#include "crossmil/filterbank.hpp"
#include "crossmil/synthvol.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace crossmil {

enum class FeatureKind { gss, gss_t, gss_i, kde_i };

std::string_view feature_kind_name(FeatureKind k);
FeatureKind parse_feature_kind(std::string_view name);

inline constexpr int kBinsPerResponse = 10;
inline constexpr int kKdeBins = 256;
inline constexpr double kKdeLowHu = -1100.0;
inline constexpr double kKdeHighHu = -600.0;

using EdgeArray = std::array<double, kBinsPerResponse - 1>;

// Adaptive-binning edges for every (scale, filter) response, scale-major.
struct BinEdges {
  std::vector<double> scales_mm;
  std::vector<EdgeArray> edges;
  std::string fitted_on;

  const EdgeArray& at(std::size_t scale_index, Filter f) const {
    return edges[scale_index * kAllFilters.size() + static_cast<std::size_t>(f)];
  }
};

nlohmann::ordered_json to_json(const BinEdges& b);
BinEdges bin_edges_from_json(const nlohmann::ordered_json& j);

// Feature dimension for `n_scales` scales (320/280/40 for four scales; KDE-i is 256).
std::size_t feature_dim(FeatureKind k, std::size_t n_scales = 4);

struct FeatureSpec {
  FeatureKind kind = FeatureKind::gss;
  ScaleSet scales;
  std::size_t dim() const { return feature_dim(kind, scales.scales_mm.size()); }
  std::string id() const { return std::string(feature_kind_name(kind)); }
};

nlohmann::ordered_json to_json(const FeatureSpec& s);

// Values of one response gathered for bin calibration.
struct ResponseSample {
  Filter filter = Filter::smoothed;
  double scale_mm = 0.0;
  std::vector<double> values;
};

// The k/10 quantile edges (k = 1..9) of a sample, placed between
// consecutive distinct order statistics.
EdgeArray fit_quantile_edges(std::vector<double> values);

// `samples` must be scale-major with the eight filters in kAllFilters order.
BinEdges fit_adaptive_bins(const std::vector<ResponseSample>& samples, std::string fitted_on);

// Bin 0 below the first edge, bin 9 at or above the last.
int bin_index(const EdgeArray& edges, double value);

// Normalized 10-bin histograms of each response over the in-mask valid voxels
// of the ROI, concatenated in response order.
FeatureVector gss_features(const std::vector<FilterResponse>& responses, const Roi& roi, const MaskVolume& mask,
                           const BinEdges& bins);

// GSS-i keeps the smoothed-image blocks, GSS-t the rest.
FeatureVector gss_subset(const FeatureVector& gss, FeatureKind kind, std::size_t n_scales = 4);

// Silverman's rule (0.9 min(sd, IQR/1.34) n^-1/5), floored at 1 HU.
double kde_bandwidth(std::span<const double> values);

// Gaussian KDE of the in-mask ROI intensities on 256 points over
// [-1100, -600] HU, normalized to sum 1.
FeatureVector kde_intensity_features(const Volume& v, const Roi& roi, const MaskVolume& mask);
FeatureVector kde_on_grid(std::span<const double> values);

// Shift that moves the robust trachea-air mean to -1000 HU.
double trachea_shift(const Volume& v, const MaskVolume& trachea);
Volume normalize_intensity(const Volume& v, const MaskVolume& trachea);

struct RoiParams {
  int count = 50;
  int size = 41;
};

struct ExtractionRequest {
  std::vector<FeatureKind> kinds;
  ScaleSet scales;
  const BinEdges* bins = nullptr;  // required for the GSS family
  RoiParams roi;
  bool normalize_intensity = false;
};

// One instance matrix per requested kind, all from the same ROI sample.
std::map<FeatureKind, RowMatrix> extract_instances(const Subject& subject, const ExtractionRequest& request,
                                                   std::uint64_t roi_seed);

// Bag with n_roi instances of dimension spec.dim(); id/label/gold/domain are
// left for the caller.
Bag extract_bag(const Subject& subject, const FeatureSpec& spec, const BinEdges* bins, const RoiParams& roi,
                std::uint64_t seed, bool normalize = false);

// Response samples for bin calibration, at most `per_subject` voxels per
// subject drawn from its ROIs.
std::vector<ResponseSample> calibration_samples(std::span<const Subject* const> subjects, const ScaleSet& scales,
                                                const RoiParams& roi, std::size_t per_subject, std::uint64_t seed,
                                                bool normalize = false);

}  // namespace crossmil
