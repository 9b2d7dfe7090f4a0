#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace crossmil {

// Errors in user-supplied configuration (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Errors in data files or data contents (CLI exit code 3).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// One instance per row.
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using FeatureVector = std::vector<double>;

enum class Label : int { negative = -1, positive = 1 };

inline int to_int(Label l) { return static_cast<int>(l); }
Label label_from_int(int value);

class DomainId {
 public:
  DomainId() = default;
  explicit DomainId(std::string name);
  const std::string& name() const { return name_; }
  bool operator==(const DomainId&) const = default;
  auto operator<=>(const DomainId&) const = default;

 private:
  std::string name_;
};

// A subject's scan: a set of instance feature vectors with one bag label.
struct Bag {
  std::string id;
  RowMatrix instances;
  Label label = Label::negative;
  std::optional<int> gold;
  DomainId domain;

  std::size_t size() const { return static_cast<std::size_t>(instances.rows()); }
  std::size_t dim() const { return static_cast<std::size_t>(instances.cols()); }
};

// Throws DataError if the bag is empty, holds non-finite values, or its GOLD
// grade contradicts the label.
void validate_bag(const Bag& bag);

struct Dataset {
  std::vector<Bag> bags;
  std::string feature_spec_id;

  // 0 for an empty dataset.
  std::size_t dim() const { return bags.empty() ? 0 : bags.front().dim(); }
  std::size_t instance_count() const;
};

void validate_dataset(const Dataset& d);

// Manifest JSON plus one little-endian float64 file per bag, written next to
// the manifest.
Dataset load_dataset(const std::filesystem::path& manifest_path);
void save_dataset(const Dataset& d, const std::filesystem::path& manifest_path);

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;  // 0 marks a constant feature
  std::string fitted_on;
};

// Columns whose spread is at most this fraction of the widest column's are
// treated as constant.
inline constexpr double kNearConstantRelative = 1e-3;

// Population statistics over all instances of all bags pooled.
Standardizer fit_standardizer(const Dataset& d);
Standardizer fit_standardizer(std::span<const Bag* const> bags);

RowMatrix apply_standardizer(const Standardizer& s, const RowMatrix& x);
Bag apply_standardizer(const Standardizer& s, const Bag& bag);
Dataset apply_standardizer(const Standardizer& s, const Dataset& d);

struct Fold {
  Dataset train;
  Bag test;
};

// Folds ordered by bag id.
std::vector<Fold> leave_one_bag_out(const Dataset& d);

}  // namespace crossmil
