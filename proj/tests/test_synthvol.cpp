#include <doctest.h>

#include "crossmil/eval.hpp"
#include "crossmil/seeding.hpp"
#include "crossmil/synthvol.hpp"
#include "oracles.hpp"

#include <map>
#include <set>

using namespace crossmil;

namespace {

PhantomConfig small_phantom() {
  PhantomConfig p;
  p.dims = {32, 32, 32};
  return p;
}

DomainProfile quiet(double offset = 0.0) {
  DomainProfile d;
  d.name = DomainId("A");
  d.intensity_offset = offset;
  return d;
}

double lung_mean(const Subject& s) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.volume.data.size(); ++i)
    if (s.lung.data[i]) {
      sum += s.volume.data[i];
      ++n;
    }
  return sum / double(n);
}

// Mode of a 5 HU histogram over lung voxels, as a bin index.
int lung_mode_bin(const Subject& s) {
  std::map<int, int> hist;
  for (std::size_t i = 0; i < s.volume.data.size(); ++i)
    if (s.lung.data[i]) ++hist[int(std::floor(s.volume.data[i] / 5.0))];
  int best = 0, count = -1;
  for (auto [bin, c] : hist)
    if (c > count) {
      best = bin;
      count = c;
    }
  return best;
}

}  // namespace

TEST_CASE("generation is deterministic") {
  SubjectSpec spec{42, 0.6, quiet()};
  spec.domain.noise_sigma = 10.0;
  auto a = generate_subject(spec, small_phantom());
  auto b = generate_subject(spec, small_phantom());
  CHECK(a.volume.data == b.volume.data);
  CHECK(a.lung.data == b.lung.data);
  CHECK(a.trachea.data == b.trachea.data);
  CHECK(a.gold == b.gold);
  CHECK(a.lung.count() > 0);
  CHECK(a.trachea.count() > 0);
}

TEST_CASE("severity lowers mean lung density") {
  auto lo = generate_subject({5, 0.0, quiet()}, small_phantom());
  auto hi = generate_subject({5, 1.0, quiet()}, small_phantom());
  CHECK(lung_mean(hi) < lung_mean(lo));
}

TEST_CASE("mean lung density is non-increasing in severity over paired seeds") {
  std::vector<double> diffs;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const double sev = 0.05 * double(s % 10);
    auto a = generate_subject({1000 + s, sev, quiet()}, small_phantom());
    auto b = generate_subject({1000 + s, sev + 0.5, quiet()}, small_phantom());
    diffs.push_back(lung_mean(a) - lung_mean(b));
  }
  CHECK(sign_test_one_sided(diffs) < 0.01);
}

TEST_CASE("intensity offset shifts the histogram mode") {
  for (std::uint64_t seed : {11u, 12u, 13u}) {
    auto a = generate_subject({seed, 0.4, quiet(0.0)}, small_phantom());
    auto b = generate_subject({seed, 0.4, quiet(30.0)}, small_phantom());
    CHECK(std::abs(lung_mode_bin(b) - lung_mode_bin(a) - 6) <= 1);
  }
}

TEST_CASE("tissue levels") {
  auto s = generate_subject({9, 0.0, quiet()}, small_phantom());
  CHECK(lung_mean(s) == doctest::Approx(-860.0).epsilon(0.03));
  double tr = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < s.volume.data.size(); ++i)
    if (s.trachea.data[i]) {
      tr += s.volume.data[i];
      ++n;
    }
  CHECK(tr / double(n) == doctest::Approx(-1000.0).epsilon(0.01));
}

TEST_CASE("spacing resamples the grid") {
  DomainProfile d = quiet();
  d.spacing = {2.0, 2.0, 2.0};
  auto s = generate_subject({1, 0.3, d}, small_phantom());
  CHECK(s.volume.dims == Dims{16, 16, 16});
  CHECK(s.volume.spacing == d.spacing);
  CHECK(s.lung.dims == s.volume.dims);
}

TEST_CASE("gold quantization") {
  CHECK(gold_from_severity(0.0) == 0);
  CHECK(gold_from_severity(0.099) == 0);
  CHECK(gold_from_severity(0.1) == 1);
  CHECK(gold_from_severity(0.4) == 2);
  CHECK(gold_from_severity(0.6) == 3);
  CHECK(gold_from_severity(1.0) == 4);
}

TEST_CASE("ROI sampling") {
  auto s = generate_subject({3, 0.2, quiet()}, small_phantom());
  auto r1 = sample_rois(s.lung, 50, 17, 99);
  auto r2 = sample_rois(s.lung, 50, 17, 99);
  REQUIRE(r1.size() == 50);
  for (std::size_t i = 0; i < r1.size(); ++i) {
    CHECK(r1[i].center == r2[i].center);
    CHECK(r1[i].size == 17);
    CHECK(s.lung.at(r1[i].center[0], r1[i].center[1], r1[i].center[2]));
  }
  auto r41 = sample_rois(s.lung, 50, 41, 1);
  CHECK(r41.size() == 50);
  CHECK(r41.front().size == 41);

  MaskVolume empty(Dims{16, 16, 16});
  CHECK_THROWS_WITH_AS(sample_rois(empty, 5, 5, 1), doctest::Contains("no valid centers"), DataError);
  CHECK_THROWS_AS(sample_rois(s.lung, 5, 4, 1), ConfigError);
}

TEST_CASE("domain dataset labels") {
  DomainProfile p = quiet();
  auto draws = generate_domain_dataset(p, 100, 2024);
  int pos = 0;
  for (const auto& d : draws) {
    pos += d.label == Label::positive;
    CHECK((d.gold == 0) == (d.label == Label::negative));
  }
  CHECK(pos >= 35);
  CHECK(pos <= 65);

  p.class_prior = 0.0;
  for (const auto& d : generate_domain_dataset(p, 50, 1)) CHECK(d.gold == 0);
}

TEST_CASE("seed streams from distinct masters do not collide") {
  std::set<std::uint64_t> seen;
  for (std::uint64_t master = 0; master < 10; ++master)
    for (std::uint64_t i = 0; i < 1000; ++i) seen.insert(derive_seed(master, i));
  CHECK(seen.size() == 10000);
}

TEST_CASE("volume and mask files round trip") {
  auto dir = oracle::scratch_dir("synthvol_io");
  DomainProfile d = quiet();
  d.noise_sigma = 5.0;
  d.spacing = {1.0, 1.0, 2.0};
  auto s = generate_subject({8, 0.5, d}, small_phantom());
  write_volume(s.volume, dir / "v.vol.f32");
  write_mask(s.lung, s.volume.spacing, dir / "v.lung.u8");
  auto v = read_volume(dir / "v.vol.f32");
  auto m = read_mask(dir / "v.lung.u8");
  CHECK(v.dims == s.volume.dims);
  CHECK(v.spacing == s.volume.spacing);
  CHECK(v.data == s.volume.data);
  CHECK(m.data == s.lung.data);
  CHECK_THROWS_AS(read_volume(dir / "absent.vol.f32"), DataError);
}

TEST_CASE("profile validation") {
  DomainProfile p = quiet();
  p.noise_sigma = -1;
  CHECK_THROWS_AS(validate_profile(p), ConfigError);
  p = quiet();
  p.class_prior = 1.5;
  CHECK_THROWS_AS(validate_profile(p), ConfigError);
  p = quiet();
  p.spacing.y = 0;
  CHECK_THROWS_AS(validate_profile(p), ConfigError);
}
