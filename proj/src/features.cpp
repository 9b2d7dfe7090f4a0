#include "crossmil/features.hpp"

#include "crossmil/seeding.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace crossmil {

using json = nlohmann::ordered_json;

std::string_view feature_kind_name(FeatureKind k) {
  switch (k) {
    case FeatureKind::gss: return "GSS";
    case FeatureKind::gss_t: return "GSS-t";
    case FeatureKind::gss_i: return "GSS-i";
    case FeatureKind::kde_i: return "KDE-i";
  }
  return "unknown";
}

FeatureKind parse_feature_kind(std::string_view name) {
  for (FeatureKind k : {FeatureKind::gss, FeatureKind::gss_t, FeatureKind::gss_i, FeatureKind::kde_i})
    if (feature_kind_name(k) == name) return k;
  throw ConfigError("unknown feature kind '" + std::string(name) + "'");
}

std::size_t feature_dim(FeatureKind k, std::size_t n_scales) {
  const std::size_t block = kBinsPerResponse;
  switch (k) {
    case FeatureKind::gss: return kAllFilters.size() * n_scales * block;
    case FeatureKind::gss_t: return (kAllFilters.size() - 1) * n_scales * block;
    case FeatureKind::gss_i: return n_scales * block;
    case FeatureKind::kde_i: return kKdeBins;
  }
  return 0;
}

json to_json(const BinEdges& b) {
  json j;
  j["fitted_on"] = b.fitted_on;
  j["records"] = json::array();
  for (std::size_t s = 0; s < b.scales_mm.size(); ++s)
    for (Filter f : kAllFilters) {
      json r;
      r["filter"] = filter_name(f);
      r["scale_mm"] = b.scales_mm[s];
      r["edges"] = b.at(s, f);
      j["records"].push_back(std::move(r));
    }
  return j;
}

BinEdges bin_edges_from_json(const json& j) {
  BinEdges b;
  try {
    b.fitted_on = j.at("fitted_on").get<std::string>();
    const auto& records = j.at("records");
    if (records.size() % kAllFilters.size() != 0) throw DataError("bin edge records are not a multiple of 8");
    for (std::size_t i = 0; i < records.size(); ++i) {
      const auto& r = records[i];
      const auto f = filter_from_name(r.at("filter").get<std::string>());
      if (!f || static_cast<std::size_t>(*f) != i % kAllFilters.size())
        throw DataError("bin edge records out of filter order");
      const double scale = r.at("scale_mm").get<double>();
      if (i % kAllFilters.size() == 0) b.scales_mm.push_back(scale);
      else if (scale != b.scales_mm.back()) throw DataError("bin edge records out of scale order");
      b.edges.push_back(r.at("edges").get<EdgeArray>());
    }
  } catch (const json::exception& e) {
    throw DataError(std::string("malformed bin edges: ") + e.what());
  }
  return b;
}

json to_json(const FeatureSpec& s) {
  json j;
  j["kind"] = feature_kind_name(s.kind);
  j["scales_mm"] = s.scales.scales_mm;
  j["m"] = s.dim();
  return j;
}

EdgeArray fit_quantile_edges(std::vector<double> values) {
  std::sort(values.begin(), values.end());
  const std::size_t n = values.size();
  std::size_t distinct = n == 0 ? 0 : 1;
  for (std::size_t i = 1; i < n; ++i) distinct += values[i] != values[i - 1];
  if (distinct < static_cast<std::size_t>(kBinsPerResponse))
    throw DataError("need at least 10 distinct values, found " + std::to_string(distinct));

  EdgeArray edges{};
  double prev = -std::numeric_limits<double>::infinity();
  for (int k = 1; k < kBinsPerResponse; ++k) {
    const auto p = static_cast<std::ptrdiff_t>(std::llround(double(k) * double(n) / kBinsPerResponse));
    // Nearest split position with distinct neighbours that keeps edges increasing.
    bool placed = false;
    for (std::ptrdiff_t off = 0; off < static_cast<std::ptrdiff_t>(n) && !placed; ++off) {
      for (std::ptrdiff_t q : {p + off, p - off}) {
        if (q < 1 || q >= static_cast<std::ptrdiff_t>(n)) continue;
        const double a = values[q - 1], b = values[q];
        if (!(a < b)) continue;
        double e = a + (b - a) / 2.0;
        if (e <= a) e = b;
        if (e > prev) {
          edges[k - 1] = prev = e;
          placed = true;
          break;
        }
      }
    }
    if (!placed) throw DataError("cannot place strictly increasing bin edges");
  }
  return edges;
}

BinEdges fit_adaptive_bins(const std::vector<ResponseSample>& samples, std::string fitted_on) {
  if (samples.empty() || samples.size() % kAllFilters.size() != 0)
    throw DataError("calibration samples must cover eight filters per scale");
  BinEdges b;
  b.fitted_on = std::move(fitted_on);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const ResponseSample& s = samples[i];
    if (static_cast<std::size_t>(s.filter) != i % kAllFilters.size())
      throw DataError("calibration samples out of filter order");
    if (i % kAllFilters.size() == 0) b.scales_mm.push_back(s.scale_mm);
    try {
      b.edges.push_back(fit_quantile_edges(s.values));
    } catch (const DataError& e) {
      throw DataError("insufficient calibration data for " + std::string(filter_name(s.filter)) + " at scale " +
                      std::to_string(s.scale_mm) + " mm: " + e.what());
    }
  }
  return b;
}

int bin_index(const EdgeArray& edges, double value) {
  return static_cast<int>(std::upper_bound(edges.begin(), edges.end(), value) - edges.begin());
}

namespace {

template <typename Fn>
void for_each_roi_voxel(const Roi& roi, const MaskVolume& mask, Fn&& fn) {
  const Dims d = mask.dims;
  const int h = roi.size / 2;
  const int x0 = std::max(0, roi.center[0] - h), x1 = std::min(d.nx - 1, roi.center[0] + h);
  const int y0 = std::max(0, roi.center[1] - h), y1 = std::min(d.ny - 1, roi.center[1] + h);
  const int z0 = std::max(0, roi.center[2] - h), z1 = std::min(d.nz - 1, roi.center[2] + h);
  for (int z = z0; z <= z1; ++z)
    for (int y = y0; y <= y1; ++y) {
      const std::size_t row = d.index(0, y, z);
      for (int x = x0; x <= x1; ++x)
        if (mask.data[row + static_cast<std::size_t>(x)]) fn(row + static_cast<std::size_t>(x));
    }
}

void roi_histogram(const Field& field, const Roi& roi, const MaskVolume& mask, const EdgeArray& edges, double* out) {
  std::array<std::size_t, kBinsPerResponse> counts{};
  std::size_t total = 0;
  for_each_roi_voxel(roi, mask, [&](std::size_t i) {
    if (!field.valid[i]) return;
    ++counts[static_cast<std::size_t>(bin_index(edges, field.values[i]))];
    ++total;
  });
  if (total == 0) throw DataError("ROI has no in-mask voxels");
  for (int b = 0; b < kBinsPerResponse; ++b) out[b] = double(counts[b]) / double(total);
}

double quantile_sorted(const std::vector<double>& s, double q) {
  const double pos = q * double(s.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, s.size() - 1);
  return s[lo] + (pos - double(lo)) * (s[hi] - s[lo]);
}

}  // namespace

FeatureVector gss_features(const std::vector<FilterResponse>& responses, const Roi& roi, const MaskVolume& mask,
                           const BinEdges& bins) {
  if (responses.size() != bins.edges.size())
    throw DataError("response count does not match the fitted bin edges");
  FeatureVector out(responses.size() * kBinsPerResponse);
  for (std::size_t r = 0; r < responses.size(); ++r) {
    if (!(responses[r].field.dims == mask.dims)) throw DataError("response dims do not match mask");
    roi_histogram(responses[r].field, roi, mask, bins.edges[r], out.data() + r * kBinsPerResponse);
  }
  return out;
}

FeatureVector gss_subset(const FeatureVector& gss, FeatureKind kind, std::size_t n_scales) {
  if (gss.size() != feature_dim(FeatureKind::gss, n_scales))
    throw DataError("expected a " + std::to_string(feature_dim(FeatureKind::gss, n_scales)) +
                    "-dimensional GSS vector, got " + std::to_string(gss.size()));
  if (kind == FeatureKind::gss) return gss;
  if (kind == FeatureKind::kde_i) throw ConfigError("KDE-i is not a GSS subset");
  FeatureVector out;
  out.reserve(feature_dim(kind, n_scales));
  const std::size_t blocks = gss.size() / kBinsPerResponse;
  for (std::size_t b = 0; b < blocks; ++b) {
    const bool intensity = b % kAllFilters.size() == static_cast<std::size_t>(Filter::smoothed);
    if (intensity == (kind == FeatureKind::gss_i))
      out.insert(out.end(), gss.begin() + static_cast<std::ptrdiff_t>(b * kBinsPerResponse),
                 gss.begin() + static_cast<std::ptrdiff_t>((b + 1) * kBinsPerResponse));
  }
  return out;
}

double kde_bandwidth(std::span<const double> values) {
  const std::size_t n = values.size();
  if (n < 2) throw DataError("KDE needs at least 2 values");
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= double(n);
  double ss = 0.0;
  for (double v : values) ss += (v - mean) * (v - mean);
  const double sd = std::sqrt(ss / double(n - 1));
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const double iqr = (quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25)) / 1.34;
  double spread = std::min(sd, iqr);
  if (!(spread > 0.0)) spread = std::max(sd, iqr);
  const double h = 0.9 * spread * std::pow(double(n), -0.2);
  return std::max(h, 1.0);
}

FeatureVector kde_on_grid(std::span<const double> values) {
  const double h = kde_bandwidth(values);
  const double step = (kKdeHighHu - kKdeLowHu) / (kKdeBins - 1);
  const double window = 12.0 * h;
  std::vector<double> density(kKdeBins, 0.0);

  // exp(-(g_k - x)^2 / 2h^2) along the grid by the ratio recurrence
  // e_{k+1} = e_k * r_k, r_{k+1} = r_k * exp(-step^2 / h^2).
  const double q = std::exp(-step * step / (h * h));
  for (double x : values) {
    const double u = (x - kKdeLowHu) / step;
    const int k0 = std::clamp(static_cast<int>(std::lround(u)), 0, kKdeBins - 1);
    const double d0 = kKdeLowHu + k0 * step - x;
    if (std::abs(d0) > window) continue;
    const double e0 = std::exp(-0.5 * d0 * d0 / (h * h));
    density[static_cast<std::size_t>(k0)] += e0;
    double e = e0, r = std::exp(-(step * step + 2.0 * d0 * step) / (2.0 * h * h));
    for (int k = k0 + 1; k < kKdeBins && kKdeLowHu + k * step - x <= window; ++k) {
      e *= r;
      r *= q;
      density[static_cast<std::size_t>(k)] += e;
    }
    e = e0;
    r = std::exp(-(step * step - 2.0 * d0 * step) / (2.0 * h * h));
    for (int k = k0 - 1; k >= 0 && x - (kKdeLowHu + k * step) <= window; --k) {
      e *= r;
      r *= q;
      density[static_cast<std::size_t>(k)] += e;
    }
  }

  double total = 0.0;
  for (double v : density) total += v;
  if (total < 1e-12 * double(values.size())) {
    // All mass far from the grid: exact evaluation in the log domain.
    std::vector<double> logd(kKdeBins);
    for (int k = 0; k < kKdeBins; ++k) {
      const double g = kKdeLowHu + k * step;
      double mx = -std::numeric_limits<double>::infinity();
      for (double x : values) mx = std::max(mx, -0.5 * (g - x) * (g - x) / (h * h));
      double s = 0.0;
      for (double x : values) s += std::exp(-0.5 * (g - x) * (g - x) / (h * h) - mx);
      logd[static_cast<std::size_t>(k)] = mx + std::log(s);
    }
    const double mx = *std::max_element(logd.begin(), logd.end());
    total = 0.0;
    for (int k = 0; k < kKdeBins; ++k) total += density[static_cast<std::size_t>(k)] = std::exp(logd[k] - mx);
  }
  for (double& v : density) v /= total;
  return density;
}

FeatureVector kde_intensity_features(const Volume& v, const Roi& roi, const MaskVolume& mask) {
  if (!(v.dims == mask.dims)) throw DataError("mask dims do not match volume dims");
  std::vector<double> values;
  for_each_roi_voxel(roi, mask, [&](std::size_t i) { values.push_back(v.data[i]); });
  if (values.size() < 2) throw DataError("KDE needs at least 2 in-mask ROI voxels");
  return kde_on_grid(values);
}

double trachea_shift(const Volume& v, const MaskVolume& trachea) {
  if (!(v.dims == trachea.dims)) throw DataError("trachea mask dims do not match volume dims");
  std::vector<double> values;
  for (std::size_t i = 0; i < v.data.size(); ++i)
    if (trachea.data[i]) values.push_back(v.data[i]);
  if (values.size() < 30)
    throw DataError("too few trachea voxels for intensity normalization (" + std::to_string(values.size()) + ")");
  std::vector<double> sorted = values;
  std::sort(sorted.begin(), sorted.end());
  const double median = quantile_sorted(sorted, 0.5);
  std::vector<double> dev(values.size());
  for (std::size_t i = 0; i < values.size(); ++i) dev[i] = std::abs(values[i] - median);
  std::sort(dev.begin(), dev.end());
  const double mad = quantile_sorted(dev, 0.5);
  double sum = 0.0;
  std::size_t kept = 0;
  for (double x : values)
    if (std::abs(x - median) <= 3.0 * mad) {
      sum += x;
      ++kept;
    }
  return -1000.0 - sum / double(kept);
}

Volume normalize_intensity(const Volume& v, const MaskVolume& trachea) {
  const double shift = trachea_shift(v, trachea);
  Volume out = v;
  for (float& x : out.data) x = static_cast<float>(double(x) + shift);
  return out;
}

std::map<FeatureKind, RowMatrix> extract_instances(const Subject& subject, const ExtractionRequest& request,
                                                   std::uint64_t roi_seed) {
  if (request.kinds.empty()) throw ConfigError("no feature kinds requested");
  const bool want_gss = std::any_of(request.kinds.begin(), request.kinds.end(),
                                    [](FeatureKind k) { return k != FeatureKind::kde_i; });
  const std::size_t n_scales = request.scales.scales_mm.size();
  if (want_gss) {
    validate_scales(request.scales);
    if (request.bins == nullptr) throw ConfigError("GSS features need fitted bin edges");
    if (request.bins->scales_mm != request.scales.scales_mm)
      throw ConfigError("bin edges were fitted for a different scale set");
  }

  const Volume normalized = request.normalize_intensity ? normalize_intensity(subject.volume, subject.trachea) : Volume{};
  const Volume& vol = request.normalize_intensity ? normalized : subject.volume;
  const auto rois = sample_rois(subject.lung, request.roi.count, request.roi.size, roi_seed);
  const auto n_roi = static_cast<Eigen::Index>(rois.size());

  std::map<FeatureKind, RowMatrix> out;
  if (want_gss) {
    const std::size_t per_scale = kAllFilters.size() * kBinsPerResponse;
    RowMatrix gss(n_roi, static_cast<Eigen::Index>(per_scale * n_scales));
    for (std::size_t s = 0; s < n_scales; ++s) {
      const auto responses = responses_at_scale(vol, subject.lung, request.scales.scales_mm[s]);
      for (Eigen::Index r = 0; r < n_roi; ++r)
        for (std::size_t f = 0; f < responses.size(); ++f)
          roi_histogram(responses[f].field, rois[static_cast<std::size_t>(r)], subject.lung,
                        request.bins->edges[s * kAllFilters.size() + f],
                        gss.row(r).data() + s * per_scale + f * kBinsPerResponse);
    }
    for (FeatureKind k : request.kinds) {
      if (k == FeatureKind::kde_i) continue;
      if (k == FeatureKind::gss) {
        out[k] = gss;
        continue;
      }
      RowMatrix sub(n_roi, static_cast<Eigen::Index>(feature_dim(k, n_scales)));
      for (Eigen::Index r = 0; r < n_roi; ++r) {
        const FeatureVector row(gss.row(r).data(), gss.row(r).data() + gss.cols());
        const FeatureVector s = gss_subset(row, k, n_scales);
        std::copy(s.begin(), s.end(), sub.row(r).data());
      }
      out[k] = std::move(sub);
    }
  }
  if (std::find(request.kinds.begin(), request.kinds.end(), FeatureKind::kde_i) != request.kinds.end()) {
    RowMatrix kde(n_roi, kKdeBins);
    for (Eigen::Index r = 0; r < n_roi; ++r) {
      const FeatureVector k = kde_intensity_features(vol, rois[static_cast<std::size_t>(r)], subject.lung);
      std::copy(k.begin(), k.end(), kde.row(r).data());
    }
    out[FeatureKind::kde_i] = std::move(kde);
  }
  return out;
}

Bag extract_bag(const Subject& subject, const FeatureSpec& spec, const BinEdges* bins, const RoiParams& roi,
                std::uint64_t seed, bool normalize) {
  ExtractionRequest req{{spec.kind}, spec.scales, bins, roi, normalize};
  Bag b;
  b.instances = std::move(extract_instances(subject, req, seed).at(spec.kind));
  b.gold = subject.gold;
  b.label = subject.gold == 0 ? Label::negative : Label::positive;
  return b;
}

std::vector<ResponseSample> calibration_samples(std::span<const Subject* const> subjects, const ScaleSet& scales,
                                                const RoiParams& roi, std::size_t per_subject, std::uint64_t seed,
                                                bool normalize) {
  validate_scales(scales);
  if (subjects.empty()) throw DataError("calibration needs at least one subject");
  std::vector<ResponseSample> out;
  for (double s : scales.scales_mm)
    for (Filter f : kAllFilters) out.push_back(ResponseSample{f, s, {}});

  for (std::size_t si = 0; si < subjects.size(); ++si) {
    const Subject& subj = *subjects[si];
    const Volume vol = normalize ? normalize_intensity(subj.volume, subj.trachea) : subj.volume;
    const auto rois = sample_rois(subj.lung, roi.count, roi.size, derive_seed(seed, si));
    std::vector<std::size_t> voxels;
    for (const Roi& r : rois) for_each_roi_voxel(r, subj.lung, [&](std::size_t i) { voxels.push_back(i); });
    std::mt19937_64 rng(derive_seed(seed, "pick" + std::to_string(si)));
    if (voxels.size() > per_subject) {
      std::shuffle(voxels.begin(), voxels.end(), rng);
      voxels.resize(per_subject);
    }
    for (std::size_t s = 0; s < scales.scales_mm.size(); ++s) {
      const auto responses = responses_at_scale(vol, subj.lung, scales.scales_mm[s]);
      for (std::size_t f = 0; f < responses.size(); ++f) {
        auto& dst = out[s * kAllFilters.size() + f].values;
        for (std::size_t i : voxels)
          if (responses[f].field.valid[i]) dst.push_back(responses[f].field.values[i]);
      }
    }
  }
  return out;
}

}  // namespace crossmil
