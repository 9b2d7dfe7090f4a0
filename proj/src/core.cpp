#include "crossmil/core.hpp"

#include "crossmil/io_util.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

namespace crossmil {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

constexpr int kManifestVersion = 1;

std::string data_file_name(std::size_t index, const std::string& id) {
  std::string safe;
  for (char c : id) {
    bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') ||
              c == '-' || c == '_' || c == '.';
    safe.push_back(ok ? c : '_');
  }
  return std::to_string(index) + "_" + safe + ".f64";
}

}  // namespace

Label label_from_int(int value) {
  if (value == 1) return Label::positive;
  if (value == -1) return Label::negative;
  throw DataError("unknown label value " + std::to_string(value));
}

DomainId::DomainId(std::string name) : name_(std::move(name)) {
  if (name_.empty()) throw ConfigError("domain id must be nonempty");
}

void validate_bag(const Bag& bag) {
  if (bag.instances.rows() < 1) throw DataError("bag '" + bag.id + "' has no instances");
  if (!bag.instances.allFinite()) throw DataError("bag '" + bag.id + "' has non-finite features");
  if (bag.gold) {
    int g = *bag.gold;
    if (g < 0 || g > 4) throw DataError("bag '" + bag.id + "' has GOLD grade outside 0-4");
    if ((g == 0) != (bag.label == Label::negative))
      throw DataError("bag '" + bag.id + "' GOLD grade contradicts its label");
  }
}

std::size_t Dataset::instance_count() const {
  std::size_t n = 0;
  for (const auto& b : bags) n += b.size();
  return n;
}

void validate_dataset(const Dataset& d) {
  std::set<std::string> ids;
  for (const auto& b : d.bags) {
    validate_bag(b);
    if (!ids.insert(b.id).second) throw DataError("duplicate bag id '" + b.id + "'");
    if (b.dim() != d.dim())
      throw DataError("dimension mismatch: bag '" + b.id + "' has m=" + std::to_string(b.dim()) +
                      ", expected " + std::to_string(d.dim()));
  }
}

Dataset load_dataset(const fs::path& manifest_path) {
  std::ifstream in(manifest_path);
  if (!in) throw DataError("cannot open manifest " + manifest_path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  }

  Dataset d;
  try {
    if (doc.at("version").get<int>() != kManifestVersion)
      throw DataError("unsupported manifest version");
    d.feature_spec_id = doc.at("feature_spec_id").get<std::string>();
    const fs::path dir = manifest_path.parent_path();
    std::set<std::string> ids;
    for (const auto& jb : doc.at("bags")) {
      Bag b;
      b.id = jb.at("id").get<std::string>();
      if (!ids.insert(b.id).second) throw DataError("duplicate bag id '" + b.id + "'");
      b.label = label_from_int(jb.at("label").get<int>());
      if (!jb.at("gold").is_null()) b.gold = jb.at("gold").get<int>();
      b.domain = DomainId(jb.at("domain").get<std::string>());
      auto n = jb.at("n_instances").get<std::int64_t>();
      auto m = jb.at("m").get<std::int64_t>();
      if (n < 1 || m < 0) throw DataError("bag '" + b.id + "' has invalid shape");
      if (!d.bags.empty() && static_cast<std::size_t>(m) != d.dim())
        throw DataError("dimension mismatch: bag '" + b.id + "' has m=" + std::to_string(m) +
                        ", expected " + std::to_string(d.dim()));
      b.instances.resize(n, m);
      read_le_array(dir / jb.at("data_file").get<std::string>(),
                    std::span<double>(b.instances.data(), static_cast<std::size_t>(n * m)));
      d.bags.push_back(std::move(b));
    }
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + manifest_path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw DataError(e.what());
  }
  validate_dataset(d);
  return d;
}

void save_dataset(const Dataset& d, const fs::path& manifest_path) {
  validate_dataset(d);
  const fs::path dir = manifest_path.parent_path();
  if (!dir.empty()) fs::create_directories(dir);

  json doc;
  doc["version"] = kManifestVersion;
  doc["feature_spec_id"] = d.feature_spec_id;
  doc["bags"] = json::array();
  for (std::size_t i = 0; i < d.bags.size(); ++i) {
    const Bag& b = d.bags[i];
    const std::string file = data_file_name(i, b.id);
    write_le_array(dir / file, std::span<const double>(b.instances.data(), b.size() * b.dim()));
    json jb;
    jb["id"] = b.id;
    jb["label"] = to_int(b.label);
    jb["gold"] = b.gold ? json(*b.gold) : json(nullptr);
    jb["domain"] = b.domain.name();
    jb["data_file"] = file;
    jb["n_instances"] = b.size();
    jb["m"] = b.dim();
    doc["bags"].push_back(std::move(jb));
  }
  write_text_file(manifest_path, doc.dump(2) + "\n");
}

Standardizer fit_standardizer(std::span<const Bag* const> bags) {
  if (bags.empty()) throw DataError("cannot fit a standardizer on an empty dataset");
  const Eigen::Index m = bags.front()->instances.cols();
  Eigen::VectorXd sum = Eigen::VectorXd::Zero(m);
  std::size_t n = 0;
  for (const Bag* b : bags) {
    if (b->instances.cols() != m) throw DataError("dimension mismatch in standardizer fit");
    sum += b->instances.colwise().sum().transpose();
    n += b->size();
  }
  if (n == 0) throw DataError("cannot fit a standardizer on an empty dataset");
  Eigen::VectorXd mean = sum / static_cast<double>(n);

  Eigen::VectorXd ss = Eigen::VectorXd::Zero(m);
  std::vector<bool> constant(static_cast<std::size_t>(m), true);
  const Eigen::RowVectorXd first = bags.front()->instances.row(0);
  for (const Bag* b : bags) {
    for (Eigen::Index r = 0; r < b->instances.rows(); ++r) {
      for (Eigen::Index c = 0; c < m; ++c) {
        const double v = b->instances(r, c);
        const double dv = v - mean(c);
        ss(c) += dv * dv;
        if (v != first(c)) constant[static_cast<std::size_t>(c)] = false;
      }
    }
  }

  Standardizer s;
  s.mean.assign(mean.data(), mean.data() + m);
  s.stddev.resize(static_cast<std::size_t>(m));
  double widest = 0.0;
  for (Eigen::Index c = 0; c < m; ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (constant[k]) {
      s.mean[k] = first(c);
      s.stddev[k] = 0.0;
    } else {
      s.stddev[k] = std::sqrt(ss(c) / static_cast<double>(n));
      widest = std::max(widest, s.stddev[k]);
    }
  }
  // Kernel-density tails leave columns that vary only at the 1e-30 level;
  // dividing by such a spread turns any unseen target mass into astronomic
  // values, so these count as constant too.
  for (std::size_t k = 0; k < s.stddev.size(); ++k)
    if (s.stddev[k] > 0.0 && s.stddev[k] <= kNearConstantRelative * widest) s.stddev[k] = 0.0;
  return s;
}

Standardizer fit_standardizer(const Dataset& d) {
  std::vector<const Bag*> ptrs;
  ptrs.reserve(d.bags.size());
  for (const auto& b : d.bags) ptrs.push_back(&b);
  Standardizer s = fit_standardizer(ptrs);
  s.fitted_on = d.feature_spec_id;
  return s;
}

RowMatrix apply_standardizer(const Standardizer& s, const RowMatrix& x) {
  if (static_cast<std::size_t>(x.cols()) != s.mean.size())
    throw DataError("dimension mismatch: standardizer has m=" + std::to_string(s.mean.size()) +
                    ", data has m=" + std::to_string(x.cols()));
  RowMatrix out(x.rows(), x.cols());
  for (Eigen::Index c = 0; c < x.cols(); ++c) {
    const auto k = static_cast<std::size_t>(c);
    if (s.stddev[k] == 0.0) {
      out.col(c).setZero();
    } else {
      out.col(c) = (x.col(c).array() - s.mean[k]) / s.stddev[k];
    }
  }
  return out;
}

Bag apply_standardizer(const Standardizer& s, const Bag& bag) {
  Bag out = bag;
  out.instances = apply_standardizer(s, bag.instances);
  return out;
}

Dataset apply_standardizer(const Standardizer& s, const Dataset& d) {
  Dataset out;
  out.feature_spec_id = d.feature_spec_id;
  out.bags.reserve(d.bags.size());
  for (const auto& b : d.bags) out.bags.push_back(apply_standardizer(s, b));
  return out;
}

std::vector<Fold> leave_one_bag_out(const Dataset& d) {
  if (d.bags.size() < 2) throw DataError("leave-one-bag-out needs at least 2 bags");
  std::vector<std::size_t> order(d.bags.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return d.bags[a].id < d.bags[b].id; });

  std::vector<Fold> folds;
  folds.reserve(order.size());
  for (std::size_t held : order) {
    Fold f;
    f.train.feature_spec_id = d.feature_spec_id;
    for (std::size_t i : order)
      if (i != held) f.train.bags.push_back(d.bags[i]);
    f.test = d.bags[held];
    folds.push_back(std::move(f));
  }
  return folds;
}

}  // namespace crossmil
