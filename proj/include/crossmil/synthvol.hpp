#pragma once

#include "crossmil/core.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace crossmil {

struct Dims {
  int nx = 0, ny = 0, nz = 0;

  std::size_t count() const {
    return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
           static_cast<std::size_t>(nz);
  }
  // x varies fastest.
  std::size_t index(int x, int y, int z) const {
    return static_cast<std::size_t>(x) +
           static_cast<std::size_t>(nx) *
               (static_cast<std::size_t>(y) + static_cast<std::size_t>(ny) * static_cast<std::size_t>(z));
  }
  bool contains(int x, int y, int z) const {
    return x >= 0 && y >= 0 && z >= 0 && x < nx && y < ny && z < nz;
  }
  bool operator==(const Dims&) const = default;
};

// Millimetres per voxel along each axis.
struct Spacing {
  double x = 1.0, y = 1.0, z = 1.0;
  double operator[](int axis) const { return axis == 0 ? x : (axis == 1 ? y : z); }
  bool operator==(const Spacing&) const = default;
};

// Scalar grid in pseudo-HU.
struct Volume {
  Dims dims;
  Spacing spacing;
  std::vector<float> data;

  Volume() = default;
  Volume(Dims d, Spacing s, float fill = 0.0f);
  float at(int x, int y, int z) const { return data[dims.index(x, y, z)]; }
  float& at(int x, int y, int z) { return data[dims.index(x, y, z)]; }
};

struct MaskVolume {
  Dims dims;
  std::vector<std::uint8_t> data;

  MaskVolume() = default;
  explicit MaskVolume(Dims d, std::uint8_t fill = 0) : dims(d), data(d.count(), fill) {}
  bool at(int x, int y, int z) const { return data[dims.index(x, y, z)] != 0; }
  std::size_t count() const;
};

// Scanner/protocol characteristics of one synthetic cohort.
struct DomainProfile {
  DomainId name;
  double intensity_offset = 0.0;  // HU
  double noise_sigma = 0.0;       // HU
  Spacing spacing;
  double blur_sigma = 0.0;        // mm
  double class_prior = 0.5;
};

void validate_profile(const DomainProfile& p);

struct SubjectSpec {
  std::uint64_t seed = 0;
  double severity = 0.0;  // [0,1]
  DomainProfile domain;
};

// Anatomy and tissue parameters of the phantom. Defaults are desk-scale.
struct PhantomConfig {
  Dims dims{64, 64, 64};           // at the 1 mm generation grid
  double parenchyma_hu = -860.0;
  double parenchyma_subject_sd = 12.0;  // between-subject density variation
  double texture_amplitude = 30.0;
  double texture_corr_mm = 1.0;
  double emphysema_hu = -950.0;
  double emphysema_fraction_per_severity = 0.35;
  double air_hu = -1000.0;
  double tissue_hu = 40.0;
};

struct Subject {
  Volume volume;
  MaskVolume lung;
  MaskVolume trachea;
  int gold = 0;
};

int gold_from_severity(double severity);

// Pure function of (spec, phantom).
Subject generate_subject(const SubjectSpec& spec, const PhantomConfig& phantom = {});

struct Roi {
  std::array<int, 3> center{};
  int size = 0;  // odd, voxels per side
};

std::vector<Roi> sample_rois(const MaskVolume& lung, int count, int size, std::uint64_t seed);

struct SubjectDraw {
  std::string id;
  SubjectSpec spec;
  Label label = Label::negative;
  int gold = 0;
};

std::vector<SubjectDraw> generate_domain_dataset(const DomainProfile& profile, int n_subjects,
                                                 std::uint64_t seed);

// Raw float32/uint8 payload plus "<stem>.json" sidecar {dims, spacing, hu_offset}.
void write_volume(const Volume& v, const std::filesystem::path& raw_path);
Volume read_volume(const std::filesystem::path& raw_path);
void write_mask(const MaskVolume& m, const Spacing& spacing, const std::filesystem::path& raw_path);
MaskVolume read_mask(const std::filesystem::path& raw_path);

}  // namespace crossmil
