#pragma once

#include "crossmil/classifier.hpp"
#include "crossmil/eval.hpp"
#include "crossmil/features.hpp"
#include "crossmil/synthvol.hpp"
#include "crossmil/transfer.hpp"

#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace crossmil {

struct DomainConfig {
  DomainProfile profile;
  int n_subjects = 60;
};

struct ExperimentConfig {
  std::vector<DomainConfig> domains;
  std::string calibration_domain;  // defaults to the first domain
  int calibration_subjects = 4;
  std::size_t calibration_voxels_per_subject = 5000;
  std::vector<FeatureKind> features{FeatureKind::gss, FeatureKind::gss_t, FeatureKind::gss_i, FeatureKind::kde_i};
  std::vector<WeightMethod> methods{WeightMethod::none, WeightMethod::s2t, WeightMethod::t2s, WeightMethod::log};
  BagRule aggregation = BagRule::average;
  double lambda = 1.0;
  RoiParams roi;
  ScaleSet scales;
  PhantomConfig phantom;
  std::uint64_t seed = 1;
  bool intensity_normalization = false;
  // Per-target-bag weighting and retraining; false reuses one unweighted
  // model per cell (not faithful to the protocol, for quick checks).
  bool faithful = true;
  bool same_domain = true;
  int threads = 1;
  TrainConfig train;
};

void validate_config(const ExperimentConfig& c);
ExperimentConfig config_from_json(const nlohmann::ordered_json& j);
nlohmann::ordered_json to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);

// Runs fn(0..n-1) on up to `threads` workers; the first exception is rethrown.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn);

struct Cohort {
  DomainId domain;
  std::vector<SubjectDraw> draws;
  std::vector<Subject> subjects;
};

std::vector<Cohort> generate_cohorts(const ExperimentConfig& c);
// Independent sample from the calibration domain, used only for bin edges.
Cohort generate_calibration_cohort(const ExperimentConfig& c);
BinEdges fit_calibration_bins(const ExperimentConfig& c, const Cohort& calibration);

// domain name -> feature kind -> dataset (bags sorted by id)
using FeatureStore = std::map<std::string, std::map<FeatureKind, Dataset>>;

std::uint64_t roi_seed_for(const SubjectDraw& draw);

FeatureStore extract_features(const ExperimentConfig& c, const std::vector<Cohort>& cohorts, const BinEdges* bins);

struct BagScore {
  std::string bag_id;
  Label label = Label::negative;
  std::optional<int> gold;
  double posterior = 0.5;
};

struct SourceWeightStat {
  std::string source_bag;
  double mean = 0.0;
  double sd = 0.0;
};

struct CellResult {
  std::string source, target;
  FeatureKind feature = FeatureKind::gss;
  WeightMethod method = WeightMethod::none;
  double auc = 0.5;
  std::optional<double> spearman_gold;
  std::vector<BagScore> scores;
  std::vector<SourceWeightStat> source_weights;        // empty for method none
  std::vector<std::vector<double>> raw_weights;        // [target bag][source bag]
  std::vector<std::string> source_ids;
  int degenerate_folds = 0;
  int nonconverged_fits = 0;

  bool same_domain() const { return source == target; }
};

struct DeLongEntry {
  std::string source, target;
  FeatureKind feature = FeatureKind::gss;
  WeightMethod method = WeightMethod::none;
  WeightMethod best = WeightMethod::none;
  DeLongResult test;
  bool bold = false;  // best or not significantly worse than best
};

struct RankEntry {
  std::string group;                 // feature (over methods) or method (over features)
  std::vector<std::string> columns;
  std::vector<std::string> rows;     // source->target pairs
  FriedmanNemenyi stats;
};

struct ExperimentReport {
  std::string mode;
  nlohmann::ordered_json config;
  std::vector<CellResult> cells;
  std::vector<DeLongEntry> delong;
  std::vector<RankEntry> weight_ranks;
  std::vector<RankEntry> feature_ranks;
  std::vector<std::string> warnings;

  const CellResult* find(const std::string& source, const std::string& target, FeatureKind f,
                         WeightMethod m) const;
};

// Scores every target bag with a classifier trained on `source` (bags with
// the target bag's id are left out), weighting per target bag.
CellResult evaluate_cell(const ExperimentConfig& c, const Dataset& source, const Dataset& target,
                         FeatureKind feature, WeightMethod method);

// Baseline leave-one-bag-out within one domain, method none.
CellResult evaluate_same_domain(const ExperimentConfig& c, const Dataset& d, FeatureKind feature);

ExperimentReport run_experiments(const ExperimentConfig& c, const FeatureStore& store);

nlohmann::ordered_json to_json(const ExperimentReport& r);

// Writes "report.json" and "weights.jsonl" into `out`.
void write_report(const ExperimentReport& r, const std::filesystem::path& out);

// CLI steps over the on-disk layout.
void cmd_gen_data(const ExperimentConfig& c, const std::filesystem::path& out);
void cmd_extract(const ExperimentConfig& c, const std::filesystem::path& data_dir,
                 const std::filesystem::path& out);
ExperimentReport cmd_run(const ExperimentConfig& c, const std::filesystem::path& features_dir,
                         const std::filesystem::path& out);

struct RenderedReport {
  std::string tables_markdown;
  std::string weights_csv;
};

// Markdown tables (AUC x100, bold = best or DeLong p >= 0.05 against the
// best, recomputed from stored posteriors) and weight-distribution CSV
// sorted by mean weight.
RenderedReport render_report(const nlohmann::ordered_json& report);
void cmd_report(const std::filesystem::path& report_path, const std::filesystem::path& out);

}  // namespace crossmil
