#include "crossmil/synthvol.hpp"

#include "crossmil/io_util.hpp"
#include "crossmil/seeding.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <random>

namespace crossmil {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

Volume::Volume(Dims d, Spacing s, float fill) : dims(d), spacing(s), data(d.count(), fill) {}

std::size_t MaskVolume::count() const {
  return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
}

void validate_profile(const DomainProfile& p) {
  if (p.name.name().empty()) throw ConfigError("domain profile needs a name");
  if (!(p.noise_sigma >= 0.0)) throw ConfigError("noise_sigma must be >= 0");
  if (!(p.blur_sigma >= 0.0)) throw ConfigError("blur_sigma must be >= 0");
  if (!(p.class_prior >= 0.0 && p.class_prior <= 1.0)) throw ConfigError("class_prior must lie in [0,1]");
  if (!(p.spacing.x > 0 && p.spacing.y > 0 && p.spacing.z > 0)) throw ConfigError("spacing must be > 0");
  if (!std::isfinite(p.intensity_offset)) throw ConfigError("intensity_offset must be finite");
}

int gold_from_severity(double severity) {
  if (severity < 0.1) return 0;
  if (severity < 0.325) return 1;
  if (severity < 0.55) return 2;
  if (severity < 0.775) return 3;
  return 4;
}

namespace {

using Field = std::vector<double>;

// Unmasked Gaussian smoothing with edge clamping; sigma in voxels per axis.
void smooth_clamped(Field& f, Dims d, std::array<double, 3> sigma) {
  const std::array<int, 3> n{d.nx, d.ny, d.nz};
  const std::array<std::size_t, 3> stride{1, static_cast<std::size_t>(d.nx),
                                          static_cast<std::size_t>(d.nx) * static_cast<std::size_t>(d.ny)};
  Field tmp(f.size());
  for (int axis = 0; axis < 3; ++axis) {
    if (sigma[axis] <= 0.0) continue;
    const int r = static_cast<int>(std::ceil(4.0 * sigma[axis]));
    std::vector<double> k(2 * r + 1);
    double sum = 0.0;
    for (int t = -r; t <= r; ++t) sum += k[t + r] = std::exp(-0.5 * t * t / (sigma[axis] * sigma[axis]));
    for (double& v : k) v /= sum;
    for (int z = 0; z < d.nz; ++z)
      for (int y = 0; y < d.ny; ++y)
        for (int x = 0; x < d.nx; ++x) {
          const std::array<int, 3> p{x, y, z};
          const std::size_t base = d.index(x, y, z) - static_cast<std::size_t>(p[axis]) * stride[axis];
          double acc = 0.0;
          for (int t = -r; t <= r; ++t) {
            const int q = std::clamp(p[axis] + t, 0, n[axis] - 1);
            acc += k[t + r] * f[base + static_cast<std::size_t>(q) * stride[axis]];
          }
          tmp[d.index(x, y, z)] = acc;
        }
    f.swap(tmp);
  }
}

double sample_trilinear(const Field& f, Dims d, double x, double y, double z) {
  x = std::clamp(x, 0.0, d.nx - 1.0);
  y = std::clamp(y, 0.0, d.ny - 1.0);
  z = std::clamp(z, 0.0, d.nz - 1.0);
  const int x0 = std::min(static_cast<int>(x), d.nx - 1), x1 = std::min(x0 + 1, d.nx - 1);
  const int y0 = std::min(static_cast<int>(y), d.ny - 1), y1 = std::min(y0 + 1, d.ny - 1);
  const int z0 = std::min(static_cast<int>(z), d.nz - 1), z1 = std::min(z0 + 1, d.nz - 1);
  const double fx = x - x0, fy = y - y0, fz = z - z0;
  auto v = [&](int a, int b, int c) { return f[d.index(a, b, c)]; };
  const double c00 = v(x0, y0, z0) * (1 - fx) + v(x1, y0, z0) * fx;
  const double c10 = v(x0, y1, z0) * (1 - fx) + v(x1, y1, z0) * fx;
  const double c01 = v(x0, y0, z1) * (1 - fx) + v(x1, y0, z1) * fx;
  const double c11 = v(x0, y1, z1) * (1 - fx) + v(x1, y1, z1) * fx;
  return (c00 * (1 - fy) + c10 * fy) * (1 - fz) + (c01 * (1 - fy) + c11 * fy) * fz;
}

Dims resampled_dims(Dims base, const Spacing& s) {
  auto n = [](int count, double sp) { return std::max(8, static_cast<int>(std::lround(count / sp))); };
  return {n(base.nx, s.x), n(base.ny, s.y), n(base.nz, s.z)};
}

struct Anatomy {
  MaskVolume lung;
  MaskVolume trachea_core;
  MaskVolume trachea_lumen;
  MaskVolume body;
};

Anatomy build_anatomy(Dims d) {
  Anatomy a{MaskVolume(d), MaskVolume(d), MaskVolume(d), MaskVolume(d)};
  const double cx = (d.nx - 1) / 2.0, cy = (d.ny - 1) / 2.0, cz = (d.nz - 1) / 2.0;
  const double lung_dx = 0.22 * d.nx, lung_rx = 0.165 * d.nx, lung_ry = 0.34 * d.ny, lung_rz = 0.44 * d.nz;
  const double tr_r = std::max(2.5, 0.05 * d.nx), tr_y = cy - 0.30 * d.ny;
  const double tr_z0 = 0.35 * d.nz;
  for (int z = 0; z < d.nz; ++z)
    for (int y = 0; y < d.ny; ++y)
      for (int x = 0; x < d.nx; ++x) {
        const std::size_t i = d.index(x, y, z);
        const double bx = (x - cx) / (0.48 * d.nx), by = (y - cy) / (0.44 * d.ny);
        a.body.data[i] = bx * bx + by * by <= 1.0;
        for (double side : {-1.0, 1.0}) {
          const double lx = (x - cx - side * lung_dx) / lung_rx, ly = (y - cy) / lung_ry,
                       lz = (z - cz) / lung_rz;
          if (lx * lx + ly * ly + lz * lz <= 1.0) a.lung.data[i] = 1;
        }
        const double rr = std::hypot(x - cx, y - tr_y);
        if (z >= tr_z0) {
          a.trachea_lumen.data[i] = rr <= tr_r;
          a.trachea_core.data[i] = rr <= tr_r - 1.0;
        }
      }
  return a;
}

}  // namespace

Subject generate_subject(const SubjectSpec& spec, const PhantomConfig& phantom) {
  validate_profile(spec.domain);
  if (!(spec.severity >= 0.0 && spec.severity <= 1.0)) throw ConfigError("severity must lie in [0,1]");
  const Dims d = phantom.dims;
  if (d.nx < 8 || d.ny < 8 || d.nz < 8) throw ConfigError("phantom dims must be at least 8^3");

  Anatomy anatomy = build_anatomy(d);
  std::vector<std::size_t> lung_voxels;
  for (std::size_t i = 0; i < d.count(); ++i)
    if (anatomy.lung.data[i]) lung_voxels.push_back(i);

  std::mt19937_64 density_rng(derive_seed(spec.seed, "density"));
  std::mt19937_64 texture_rng(derive_seed(spec.seed, "texture"));
  std::mt19937_64 blob_rng(derive_seed(spec.seed, "emphysema"));
  std::mt19937_64 noise_rng(derive_seed(spec.seed, "noise"));
  std::normal_distribution<double> gauss(0.0, 1.0);

  const double base_hu = phantom.parenchyma_hu + phantom.parenchyma_subject_sd * gauss(density_rng);

  Field texture(d.count());
  for (double& t : texture) t = gauss(texture_rng);
  smooth_clamped(texture, d, {phantom.texture_corr_mm, phantom.texture_corr_mm, phantom.texture_corr_mm});
  {
    double s = 0.0, ss = 0.0;
    for (std::size_t i : lung_voxels) {
      s += texture[i];
      ss += texture[i] * texture[i];
    }
    const double n = static_cast<double>(std::max<std::size_t>(lung_voxels.size(), 1));
    const double mean = s / n, sd = std::sqrt(std::max(ss / n - mean * mean, 1e-30));
    for (double& t : texture) t = (t - mean) / sd;
  }

  // Blob sequence depends only on the seed, so a higher severity renders a
  // superset of the blobs of a lower one.
  Field emph(d.count(), 0.0);
  const auto target = static_cast<std::size_t>(
      std::llround(phantom.emphysema_fraction_per_severity * spec.severity * lung_voxels.size()));
  std::size_t covered = 0;
  std::uniform_int_distribution<std::size_t> pick(0, lung_voxels.empty() ? 0 : lung_voxels.size() - 1);
  std::uniform_real_distribution<double> radius_dist(1.0, 2.5);
  for (int guard = 0; covered < target && guard < 200000; ++guard) {
    const std::size_t c = lung_voxels[pick(blob_rng)];
    const double rho = radius_dist(blob_rng);
    const int cx = static_cast<int>(c % d.nx), cy = static_cast<int>((c / d.nx) % d.ny),
              cz = static_cast<int>(c / (static_cast<std::size_t>(d.nx) * d.ny));
    const int r = static_cast<int>(std::ceil(3.0 * rho));
    for (int z = cz - r; z <= cz + r; ++z)
      for (int y = cy - r; y <= cy + r; ++y)
        for (int x = cx - r; x <= cx + r; ++x) {
          if (!d.contains(x, y, z)) continue;
          const std::size_t i = d.index(x, y, z);
          if (!anatomy.lung.data[i]) continue;
          const double r2 = double(x - cx) * (x - cx) + double(y - cy) * (y - cy) + double(z - cz) * (z - cz);
          const double e = std::exp(-0.5 * r2 / (rho * rho));
          if (e > emph[i]) {
            if (emph[i] <= 0.5 && e > 0.5) ++covered;
            emph[i] = e;
          }
        }
  }

  Field hu(d.count());
  for (std::size_t i = 0; i < d.count(); ++i) {
    if (anatomy.trachea_lumen.data[i]) {
      hu[i] = phantom.air_hu;
    } else if (anatomy.lung.data[i]) {
      const double tissue = base_hu + phantom.texture_amplitude * texture[i];
      const double air = phantom.emphysema_hu + 0.2 * phantom.texture_amplitude * texture[i];
      hu[i] = (1.0 - emph[i]) * tissue + emph[i] * air;
    } else if (anatomy.body.data[i]) {
      hu[i] = phantom.tissue_hu;
    } else {
      hu[i] = phantom.air_hu;
    }
  }

  const DomainProfile& dom = spec.domain;
  if (dom.blur_sigma > 0.0) smooth_clamped(hu, d, {dom.blur_sigma, dom.blur_sigma, dom.blur_sigma});

  Subject out;
  const Dims od = resampled_dims(d, dom.spacing);
  const bool identity_grid = dom.spacing == Spacing{1.0, 1.0, 1.0};
  out.volume = Volume(identity_grid ? d : od, dom.spacing);
  out.lung = MaskVolume(out.volume.dims);
  out.trachea = MaskVolume(out.volume.dims);
  const Dims vd = out.volume.dims;
  for (int z = 0; z < vd.nz; ++z)
    for (int y = 0; y < vd.ny; ++y)
      for (int x = 0; x < vd.nx; ++x) {
        const std::size_t o = vd.index(x, y, z);
        double v;
        if (identity_grid) {
          v = hu[o];
          out.lung.data[o] = anatomy.lung.data[o];
          out.trachea.data[o] = anatomy.trachea_core.data[o];
        } else {
          const double bx = x * dom.spacing.x, by = y * dom.spacing.y, bz = z * dom.spacing.z;
          v = sample_trilinear(hu, d, bx, by, bz);
          const int nx = std::clamp(static_cast<int>(std::lround(bx)), 0, d.nx - 1);
          const int ny = std::clamp(static_cast<int>(std::lround(by)), 0, d.ny - 1);
          const int nz = std::clamp(static_cast<int>(std::lround(bz)), 0, d.nz - 1);
          out.lung.data[o] = anatomy.lung.data[d.index(nx, ny, nz)];
          out.trachea.data[o] = anatomy.trachea_core.data[d.index(nx, ny, nz)];
        }
        v += dom.intensity_offset;
        if (dom.noise_sigma > 0.0) v += dom.noise_sigma * gauss(noise_rng);
        out.volume.data[o] = static_cast<float>(v);
      }
  out.gold = gold_from_severity(spec.severity);
  return out;
}

std::vector<Roi> sample_rois(const MaskVolume& lung, int count, int size, std::uint64_t seed) {
  if (size < 1 || size % 2 == 0) throw ConfigError("ROI size must be a positive odd number");
  if (count < 1) throw ConfigError("ROI count must be positive");
  std::vector<std::size_t> centers;
  for (std::size_t i = 0; i < lung.data.size(); ++i)
    if (lung.data[i]) centers.push_back(i);
  if (centers.empty()) throw DataError("no valid centers: lung mask is empty");
  if (centers.size() < static_cast<std::size_t>(count))
    throw DataError("no valid centers: lung mask has fewer voxels than requested ROIs");

  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<std::size_t> pick(0, centers.size() - 1);
  const Dims d = lung.dims;
  std::vector<Roi> rois;
  rois.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::size_t c = centers[pick(rng)];
    Roi r;
    r.center = {static_cast<int>(c % d.nx), static_cast<int>((c / d.nx) % d.ny),
                static_cast<int>(c / (static_cast<std::size_t>(d.nx) * d.ny))};
    r.size = size;
    rois.push_back(r);
  }
  return rois;
}

std::vector<SubjectDraw> generate_domain_dataset(const DomainProfile& profile, int n_subjects,
                                                 std::uint64_t seed) {
  validate_profile(profile);
  if (n_subjects < 1) throw ConfigError("n_subjects must be >= 1");
  std::mt19937_64 rng(derive_seed(seed, "labels"));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<SubjectDraw> out;
  out.reserve(static_cast<std::size_t>(n_subjects));
  for (int i = 0; i < n_subjects; ++i) {
    SubjectDraw s;
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%04d", i);
    s.id = profile.name.name() + buf;
    const bool diseased = unit(rng) < profile.class_prior;
    const double u = unit(rng);
    s.spec.seed = derive_seed(seed, static_cast<std::uint64_t>(i));
    s.spec.severity = diseased ? 0.1 + 0.9 * u : 0.1 * u;
    s.spec.domain = profile;
    s.label = diseased ? Label::positive : Label::negative;
    s.gold = gold_from_severity(s.spec.severity);
    out.push_back(std::move(s));
  }
  return out;
}

namespace {

json sidecar(Dims d, const Spacing& s) {
  json j;
  j["dims"] = {d.nx, d.ny, d.nz};
  j["spacing"] = {s.x, s.y, s.z};
  j["hu_offset"] = 0;
  return j;
}

std::pair<Dims, Spacing> read_sidecar(const fs::path& raw_path) {
  try {
    const json j = json::parse(read_text_file(raw_path.string() + ".json"));
    Dims d{j.at("dims")[0].get<int>(), j.at("dims")[1].get<int>(), j.at("dims")[2].get<int>()};
    Spacing s{j.at("spacing")[0].get<double>(), j.at("spacing")[1].get<double>(),
              j.at("spacing")[2].get<double>()};
    if (d.nx < 1 || d.ny < 1 || d.nz < 1) throw DataError("invalid dims in sidecar");
    return {d, s};
  } catch (const json::exception& e) {
    throw DataError("malformed sidecar for " + raw_path.string() + ": " + e.what());
  }
}

}  // namespace

void write_volume(const Volume& v, const fs::path& raw_path) {
  write_le_array(raw_path, std::span<const float>(v.data));
  write_text_file(raw_path.string() + ".json", sidecar(v.dims, v.spacing).dump(2) + "\n");
}

Volume read_volume(const fs::path& raw_path) {
  auto [d, s] = read_sidecar(raw_path);
  Volume v(d, s);
  read_le_array(raw_path, std::span<float>(v.data));
  return v;
}

void write_mask(const MaskVolume& m, const Spacing& spacing, const fs::path& raw_path) {
  write_le_array(raw_path, std::span<const std::uint8_t>(m.data));
  write_text_file(raw_path.string() + ".json", sidecar(m.dims, spacing).dump(2) + "\n");
}

MaskVolume read_mask(const fs::path& raw_path) {
  auto [d, s] = read_sidecar(raw_path);
  MaskVolume m(d);
  read_le_array(raw_path, std::span<std::uint8_t>(m.data));
  for (auto& v : m.data)
    if (v > 1) throw DataError("mask " + raw_path.string() + " holds values other than 0/1");
  return m;
}

}  // namespace crossmil
