#include "crossmil/experiment.hpp"

#include "crossmil/io_util.hpp"
#include "crossmil/seeding.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

namespace crossmil {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

namespace {

const std::set<std::string> kConfigKeys{
    "domains",  "calibration_domain", "calibration_subjects", "calibration_voxels_per_subject",
    "features", "methods",            "aggregation",          "lambda",
    "roi",      "scales_mm",          "phantom",              "seed",
    "intensity_normalization",        "faithful",             "same_domain",
    "threads",  "train"};

Spacing spacing_from_json(const json& j) {
  if (!j.is_array() || j.size() != 3) throw ConfigError("spacing must be [x, y, z]");
  return Spacing{j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

json spacing_to_json(const Spacing& s) { return json::array({s.x, s.y, s.z}); }

DomainConfig domain_from_json(const json& j) {
  DomainConfig d;
  d.profile.name = DomainId(j.at("name").get<std::string>());
  d.profile.intensity_offset = j.value("intensity_offset", 0.0);
  d.profile.noise_sigma = j.value("noise_sigma", 0.0);
  if (j.contains("spacing")) d.profile.spacing = spacing_from_json(j.at("spacing"));
  d.profile.blur_sigma = j.value("blur_sigma", 0.0);
  d.profile.class_prior = j.value("class_prior", 0.5);
  d.n_subjects = j.value("n_subjects", 60);
  return d;
}

PhantomConfig phantom_from_json(const json& j) {
  PhantomConfig p;
  if (j.contains("dims")) {
    const auto& d = j.at("dims");
    if (!d.is_array() || d.size() != 3) throw ConfigError("phantom.dims must be [nx, ny, nz]");
    p.dims = Dims{d[0].get<int>(), d[1].get<int>(), d[2].get<int>()};
  }
  p.parenchyma_hu = j.value("parenchyma_hu", p.parenchyma_hu);
  p.parenchyma_subject_sd = j.value("parenchyma_subject_sd", p.parenchyma_subject_sd);
  p.texture_amplitude = j.value("texture_amplitude", p.texture_amplitude);
  p.texture_corr_mm = j.value("texture_corr_mm", p.texture_corr_mm);
  p.emphysema_hu = j.value("emphysema_hu", p.emphysema_hu);
  p.emphysema_fraction_per_severity = j.value("emphysema_fraction_per_severity", p.emphysema_fraction_per_severity);
  p.air_hu = j.value("air_hu", p.air_hu);
  p.tissue_hu = j.value("tissue_hu", p.tissue_hu);
  return p;
}

json phantom_to_json(const PhantomConfig& p) {
  json j;
  j["dims"] = json::array({p.dims.nx, p.dims.ny, p.dims.nz});
  j["parenchyma_hu"] = p.parenchyma_hu;
  j["parenchyma_subject_sd"] = p.parenchyma_subject_sd;
  j["texture_amplitude"] = p.texture_amplitude;
  j["texture_corr_mm"] = p.texture_corr_mm;
  j["emphysema_hu"] = p.emphysema_hu;
  j["emphysema_fraction_per_severity"] = p.emphysema_fraction_per_severity;
  j["air_hu"] = p.air_hu;
  j["tissue_hu"] = p.tissue_hu;
  return j;
}

const DomainConfig& find_domain(const ExperimentConfig& c, const std::string& name) {
  for (const auto& d : c.domains)
    if (d.profile.name.name() == name) return d;
  throw ConfigError("unknown domain '" + name + "'");
}

std::string calibration_name(const ExperimentConfig& c) {
  return c.calibration_domain.empty() ? c.domains.front().profile.name.name() : c.calibration_domain;
}

template <class T>
bool has_duplicates(std::vector<T> v) {
  std::sort(v.begin(), v.end());
  return std::adjacent_find(v.begin(), v.end()) != v.end();
}

}  // namespace

void validate_config(const ExperimentConfig& c) {
  if (c.domains.empty()) throw ConfigError("config needs at least one domain");
  std::vector<std::string> names;
  for (const auto& d : c.domains) {
    validate_profile(d.profile);
    if (d.n_subjects < 2) throw ConfigError("domain '" + d.profile.name.name() + "' needs at least 2 subjects");
    names.push_back(d.profile.name.name());
  }
  if (has_duplicates(names)) throw ConfigError("duplicate domain names");
  find_domain(c, calibration_name(c));
  if (c.calibration_subjects < 1) throw ConfigError("calibration_subjects must be >= 1");
  if (c.calibration_voxels_per_subject < 1) throw ConfigError("calibration_voxels_per_subject must be >= 1");
  if (c.features.empty()) throw ConfigError("no feature kinds selected");
  if (c.methods.empty()) throw ConfigError("no weighting methods selected");
  if (has_duplicates(c.features)) throw ConfigError("duplicate feature kinds");
  if (has_duplicates(c.methods)) throw ConfigError("duplicate weighting methods");
  if (!(c.lambda >= 0.0) || !std::isfinite(c.lambda)) throw ConfigError("lambda must be >= 0");
  if (c.roi.count < 1) throw ConfigError("roi.count must be >= 1");
  if (c.roi.size < 1 || c.roi.size % 2 == 0) throw ConfigError("roi.size must be odd and positive");
  validate_scales(c.scales);
  if (c.phantom.dims.nx < 16 || c.phantom.dims.ny < 16 || c.phantom.dims.nz < 16)
    throw ConfigError("phantom dims must be at least 16 per axis");
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  if (c.train.max_iterations < 1 || !(c.train.gradient_tolerance > 0.0))
    throw ConfigError("invalid train settings");
}

ExperimentConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  for (const auto& [k, v] : j.items())
    if (!kConfigKeys.count(k)) throw ConfigError("unknown config key '" + k + "'");
  ExperimentConfig c;
  try {
    for (const auto& d : j.at("domains")) c.domains.push_back(domain_from_json(d));
    c.calibration_domain = j.value("calibration_domain", std::string{});
    c.calibration_subjects = j.value("calibration_subjects", c.calibration_subjects);
    c.calibration_voxels_per_subject = j.value("calibration_voxels_per_subject", c.calibration_voxels_per_subject);
    if (j.contains("features")) {
      c.features.clear();
      for (const auto& f : j.at("features")) c.features.push_back(parse_feature_kind(f.get<std::string>()));
    }
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j.at("methods")) c.methods.push_back(parse_weight_method(m.get<std::string>()));
    }
    if (j.contains("aggregation")) c.aggregation = parse_bag_rule(j.at("aggregation").get<std::string>());
    c.lambda = j.value("lambda", c.lambda);
    if (j.contains("roi")) {
      c.roi.count = j.at("roi").value("count", c.roi.count);
      c.roi.size = j.at("roi").value("size", c.roi.size);
    }
    if (j.contains("scales_mm")) c.scales.scales_mm = j.at("scales_mm").get<std::vector<double>>();
    if (j.contains("phantom")) c.phantom = phantom_from_json(j.at("phantom"));
    c.seed = j.value("seed", c.seed);
    c.intensity_normalization = j.value("intensity_normalization", c.intensity_normalization);
    c.faithful = j.value("faithful", c.faithful);
    c.same_domain = j.value("same_domain", c.same_domain);
    c.threads = j.value("threads", c.threads);
    if (j.contains("train")) {
      c.train.max_iterations = j.at("train").value("max_iterations", c.train.max_iterations);
      c.train.gradient_tolerance = j.at("train").value("gradient_tolerance", c.train.gradient_tolerance);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  validate_config(c);
  return c;
}

json to_json(const ExperimentConfig& c) {
  json j;
  json domains = json::array();
  for (const auto& d : c.domains) {
    json dj;
    dj["name"] = d.profile.name.name();
    dj["intensity_offset"] = d.profile.intensity_offset;
    dj["noise_sigma"] = d.profile.noise_sigma;
    dj["spacing"] = spacing_to_json(d.profile.spacing);
    dj["blur_sigma"] = d.profile.blur_sigma;
    dj["class_prior"] = d.profile.class_prior;
    dj["n_subjects"] = d.n_subjects;
    domains.push_back(dj);
  }
  j["domains"] = domains;
  j["calibration_domain"] = calibration_name(c);
  j["calibration_subjects"] = c.calibration_subjects;
  j["calibration_voxels_per_subject"] = c.calibration_voxels_per_subject;
  json feats = json::array();
  for (auto f : c.features) feats.push_back(std::string(feature_kind_name(f)));
  j["features"] = feats;
  json methods = json::array();
  for (auto m : c.methods) methods.push_back(std::string(weight_method_name(m)));
  j["methods"] = methods;
  j["aggregation"] = std::string(bag_rule_name(c.aggregation));
  j["lambda"] = c.lambda;
  j["roi"] = {{"count", c.roi.count}, {"size", c.roi.size}};
  j["scales_mm"] = c.scales.scales_mm;
  j["phantom"] = phantom_to_json(c.phantom);
  j["seed"] = c.seed;
  j["intensity_normalization"] = c.intensity_normalization;
  j["faithful"] = c.faithful;
  j["same_domain"] = c.same_domain;
  j["train"] = {{"max_iterations", c.train.max_iterations}, {"gradient_tolerance", c.train.gradient_tolerance}};
  return j;
}

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception& e) {
    throw ConfigError("cannot read config " + path.string() + ": " + e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr first;
  std::mutex m;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n || failed.load()) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(m);
          if (!first) first = std::current_exception();
          failed = true;
        }
      }
    });
  for (auto& t : pool) t.join();
  if (first) std::rethrow_exception(first);
}

namespace {

Cohort build_cohort(const DomainProfile& profile, std::vector<SubjectDraw> draws, const ExperimentConfig& c) {
  Cohort out;
  out.domain = profile.name;
  out.subjects.resize(draws.size());
  parallel_for(draws.size(), c.threads,
               [&](std::size_t i) { out.subjects[i] = generate_subject(draws[i].spec, c.phantom); });
  out.draws = std::move(draws);
  return out;
}

}  // namespace

std::vector<Cohort> generate_cohorts(const ExperimentConfig& c) {
  validate_config(c);
  std::vector<Cohort> out;
  for (const auto& d : c.domains) {
    auto draws = generate_domain_dataset(d.profile, d.n_subjects, derive_seed(c.seed, "domain:" + d.profile.name.name()));
    out.push_back(build_cohort(d.profile, std::move(draws), c));
  }
  return out;
}

Cohort generate_calibration_cohort(const ExperimentConfig& c) {
  validate_config(c);
  const auto& d = find_domain(c, calibration_name(c));
  auto draws = generate_domain_dataset(d.profile, c.calibration_subjects, derive_seed(c.seed, "calibration"));
  for (auto& dr : draws) dr.id = "calibration_" + dr.id;
  return build_cohort(d.profile, std::move(draws), c);
}

BinEdges fit_calibration_bins(const ExperimentConfig& c, const Cohort& calibration) {
  std::vector<const Subject*> ptrs;
  for (const auto& s : calibration.subjects) ptrs.push_back(&s);
  const auto samples = calibration_samples(ptrs, c.scales, c.roi, c.calibration_voxels_per_subject,
                                           derive_seed(c.seed, "calibration-rois"), c.intensity_normalization);
  return fit_adaptive_bins(samples, calibration.domain.name());
}

std::uint64_t roi_seed_for(const SubjectDraw& draw) { return derive_seed(draw.spec.seed, "rois"); }

FeatureStore extract_features(const ExperimentConfig& c, const std::vector<Cohort>& cohorts, const BinEdges* bins) {
  ExtractionRequest req{c.features, c.scales, bins, c.roi, c.intensity_normalization};
  FeatureStore store;
  for (const auto& cohort : cohorts) {
    const std::size_t n = cohort.subjects.size();
    std::vector<std::map<FeatureKind, RowMatrix>> per_subject(n);
    parallel_for(n, c.threads, [&](std::size_t i) {
      per_subject[i] = extract_instances(cohort.subjects[i], req, roi_seed_for(cohort.draws[i]));
    });
    auto& slot = store[cohort.domain.name()];
    for (FeatureKind k : c.features) {
      Dataset d;
      d.feature_spec_id = std::string(feature_kind_name(k));
      for (std::size_t i = 0; i < n; ++i) {
        Bag b;
        b.id = cohort.draws[i].id;
        b.instances = std::move(per_subject[i].at(k));
        b.label = cohort.draws[i].label;
        b.gold = cohort.draws[i].gold;
        b.domain = cohort.domain;
        d.bags.push_back(std::move(b));
      }
      std::sort(d.bags.begin(), d.bags.end(), [](const Bag& a, const Bag& b) { return a.id < b.id; });
      validate_dataset(d);
      slot[k] = std::move(d);
    }
  }
  return store;
}

// ---------------------------------------------------------------------------

namespace {

struct FoldOutcome {
  double posterior = 0.5;
  std::vector<double> weights;  // raw weights aligned with the source bags (NaN where excluded)
  bool degenerate = false;
  bool converged = true;
};

// Train on `train` (already excluding any held-out bag), weight by `method`
// against `test`, and score `test`.
FoldOutcome train_and_score(const ExperimentConfig& c, std::span<const Bag* const> train, const Bag& test,
                            WeightMethod method, bool compute_weights_only_for_report) {
  FoldOutcome out;
  const Standardizer st = fit_standardizer(train);
  std::vector<Bag> std_train;
  std_train.reserve(train.size());
  for (const Bag* b : train) std_train.push_back(apply_standardizer(st, *b));
  const RowMatrix target = apply_standardizer(st, test.instances);

  std::vector<const RowMatrix*> inst;
  for (const auto& b : std_train) inst.push_back(&b.instances);
  const BagWeights w = compute_bag_weights(method, inst, target, c.lambda, c.train);
  out.weights = w.weights;

  std::vector<double> train_w = w.weights;
  if (compute_weights_only_for_report) std::fill(train_w.begin(), train_w.end(), 1.0);
  const TrainResult tr = simplemil_fit(std_train, train_w, c.lambda, c.train);
  out.degenerate = tr.degenerate;
  out.converged = tr.converged || tr.degenerate;
  out.posterior = bag_posterior(tr.model, target, c.aggregation);
  return out;
}

void finish_cell(CellResult& cell, const std::vector<FoldOutcome>& folds, const std::vector<const Bag*>& targets) {
  ScoredLabels sl;
  std::vector<double> post, gold;
  for (std::size_t i = 0; i < folds.size(); ++i) {
    const Bag& t = *targets[i];
    cell.scores.push_back(BagScore{t.id, t.label, t.gold, folds[i].posterior});
    sl.scores.push_back(folds[i].posterior);
    sl.labels.push_back(t.label);
    if (t.gold) {
      post.push_back(folds[i].posterior);
      gold.push_back(double(*t.gold));
    }
    if (folds[i].degenerate) ++cell.degenerate_folds;
    if (!folds[i].converged) ++cell.nonconverged_fits;
  }
  const bool both = std::any_of(sl.labels.begin(), sl.labels.end(), [](Label l) { return l == Label::positive; }) &&
                    std::any_of(sl.labels.begin(), sl.labels.end(), [](Label l) { return l == Label::negative; });
  cell.auc = both ? auc(sl) : 0.5;
  const auto varies = [](const std::vector<double>& v) {
    return std::any_of(v.begin(), v.end(), [&](double x) { return x != v.front(); });
  };
  // A constant-prior model or a single GOLD grade leaves the correlation undefined.
  if (post.size() == folds.size() && post.size() >= 3 && varies(post) && varies(gold)) {
    const double r = spearman(post, gold);
    if (std::isfinite(r)) cell.spearman_gold = r;
  }
}

void summarize_weights(CellResult& cell) {
  if (cell.method == WeightMethod::none) return;
  for (std::size_t s = 0; s < cell.source_ids.size(); ++s) {
    double sum = 0.0, sum2 = 0.0;
    int n = 0;
    for (const auto& row : cell.raw_weights) {
      const double w = row[s];
      if (std::isnan(w)) continue;
      sum += w;
      sum2 += w * w;
      ++n;
    }
    SourceWeightStat st{cell.source_ids[s], 0.0, 0.0};
    if (n > 0) {
      st.mean = sum / n;
      st.sd = std::sqrt(std::max(0.0, sum2 / n - st.mean * st.mean));
    }
    cell.source_weights.push_back(st);
  }
}

std::vector<const Bag*> sorted_bags(const Dataset& d) {
  std::vector<const Bag*> out;
  for (const auto& b : d.bags) out.push_back(&b);
  std::sort(out.begin(), out.end(), [](const Bag* a, const Bag* b) { return a->id < b->id; });
  return out;
}

}  // namespace

CellResult evaluate_cell(const ExperimentConfig& c, const Dataset& source, const Dataset& target, FeatureKind feature,
                         WeightMethod method) {
  if (source.bags.empty() || target.bags.empty()) throw DataError("empty dataset in experiment cell");
  if (source.dim() != target.dim()) throw DataError("source and target feature dimensions differ");
  CellResult cell;
  cell.source = source.bags.front().domain.name();
  cell.target = target.bags.front().domain.name();
  cell.feature = feature;
  cell.method = method;

  const auto src = sorted_bags(source);
  const auto tgt = sorted_bags(target);
  for (const Bag* b : src) cell.source_ids.push_back(b->id);

  const bool reuse = method == WeightMethod::none || !c.faithful;
  std::vector<FoldOutcome> folds(tgt.size());
  std::optional<LogisticModel> shared;
  std::optional<Standardizer> shared_st;
  std::mutex shared_mutex;

  parallel_for(tgt.size(), c.threads, [&](std::size_t i) {
    const Bag& t = *tgt[i];
    std::vector<const Bag*> train;
    std::vector<std::size_t> kept;
    for (std::size_t s = 0; s < src.size(); ++s)
      if (src[s]->id != t.id) {
        train.push_back(src[s]);
        kept.push_back(s);
      }
    if (train.empty()) throw DataError("no source bags left for target bag " + t.id);

    FoldOutcome out;
    if (reuse && kept.size() == src.size()) {
      // Unweighted model on the full source pool; weights still recorded for
      // the report when a method is requested.
      {
        std::lock_guard lock(shared_mutex);
        if (!shared) {
          shared_st = fit_standardizer(std::span<const Bag* const>(src));
          std::vector<Bag> std_src;
          for (const Bag* b : src) std_src.push_back(apply_standardizer(*shared_st, *b));
          const std::vector<double> ones(src.size(), 1.0);
          shared = simplemil_fit(std_src, ones, c.lambda, c.train).model;
        }
      }
      const RowMatrix x = apply_standardizer(*shared_st, t.instances);
      out.posterior = bag_posterior(*shared, x, c.aggregation);
      if (method != WeightMethod::none) {
        std::vector<RowMatrix> std_src;
        for (const Bag* b : src) std_src.push_back(apply_standardizer(*shared_st, b->instances));
        std::vector<const RowMatrix*> inst;
        for (const auto& m : std_src) inst.push_back(&m);
        out.weights = compute_bag_weights(method, inst, x, c.lambda, c.train).weights;
      }
    } else {
      FoldOutcome f = train_and_score(c, train, t, method, !c.faithful);
      out = f;
    }
    std::vector<double> aligned(src.size(), std::nan(""));
    if (!out.weights.empty())
      for (std::size_t k = 0; k < kept.size() && k < out.weights.size(); ++k) aligned[kept[k]] = out.weights[k];
    out.weights = std::move(aligned);
    folds[i] = std::move(out);
  });

  for (const auto& f : folds) cell.raw_weights.push_back(f.weights);
  finish_cell(cell, folds, tgt);
  summarize_weights(cell);
  if (method == WeightMethod::none) cell.raw_weights.clear();
  return cell;
}

CellResult evaluate_same_domain(const ExperimentConfig& c, const Dataset& d, FeatureKind feature) {
  const auto folds = leave_one_bag_out(d);
  CellResult cell;
  cell.source = cell.target = d.bags.front().domain.name();
  cell.feature = feature;
  cell.method = WeightMethod::none;
  std::vector<FoldOutcome> outcomes(folds.size());
  parallel_for(folds.size(), c.threads, [&](std::size_t i) {
    std::vector<const Bag*> train;
    for (const auto& b : folds[i].train.bags) train.push_back(&b);
    outcomes[i] = train_and_score(c, train, folds[i].test, WeightMethod::none, false);
  });
  std::vector<const Bag*> tests;
  for (const auto& f : folds) tests.push_back(&f.test);
  finish_cell(cell, outcomes, tests);
  return cell;
}

const CellResult* ExperimentReport::find(const std::string& source, const std::string& target, FeatureKind f,
                                         WeightMethod m) const {
  for (const auto& cell : cells)
    if (cell.source == source && cell.target == target && cell.feature == f && cell.method == m) return &cell;
  return nullptr;
}

namespace {

ScoredLabels scored(const CellResult& c) {
  ScoredLabels s;
  for (const auto& b : c.scores) {
    s.scores.push_back(b.posterior);
    s.labels.push_back(b.label);
  }
  return s;
}

bool has_both_classes(const ScoredLabels& s) {
  bool pos = false, neg = false;
  for (Label l : s.labels) (l == Label::positive ? pos : neg) = true;
  return pos && neg;
}

std::string pair_name(const std::string& s, const std::string& t) { return s + "->" + t; }

}  // namespace

ExperimentReport run_experiments(const ExperimentConfig& c, const FeatureStore& store) {
  validate_config(c);
  ExperimentReport r;
  r.mode = c.faithful ? "faithful" : "fast (non-faithful: one unweighted model per cell)";
  r.config = to_json(c);

  auto dataset = [&](const std::string& domain, FeatureKind k) -> const Dataset& {
    const auto it = store.find(domain);
    if (it == store.end()) throw DataError("no extracted features for domain '" + domain + "'");
    const auto jt = it->second.find(k);
    if (jt == it->second.end())
      throw DataError("no " + std::string(feature_kind_name(k)) + " features for domain '" + domain + "'");
    return jt->second;
  };

  struct Job {
    std::string s, t;
    FeatureKind f;
    WeightMethod m;
  };
  std::vector<Job> jobs;
  for (const auto& sd : c.domains)
    for (const auto& td : c.domains) {
      const auto& s = sd.profile.name.name();
      const auto& t = td.profile.name.name();
      for (FeatureKind f : c.features) {
        if (s == t) {
          if (c.same_domain) jobs.push_back({s, t, f, WeightMethod::none});
          continue;
        }
        for (WeightMethod m : c.methods) jobs.push_back({s, t, f, m});
      }
    }

  // Parallelism lives inside the cells (over target bags).
  for (const auto& j : jobs) {
    const Dataset& src = dataset(j.s, j.f);
    CellResult cell = j.s == j.t ? evaluate_same_domain(c, src, j.f) : evaluate_cell(c, src, dataset(j.t, j.f), j.f, j.m);
    if (cell.degenerate_folds > 0)
      r.warnings.push_back(pair_name(j.s, j.t) + " " + std::string(feature_kind_name(j.f)) + " " +
                           std::string(weight_method_name(j.m)) + ": " + std::to_string(cell.degenerate_folds) +
                           " single-class folds scored by the prior");
    r.cells.push_back(std::move(cell));
  }

  std::vector<std::pair<std::string, std::string>> pairs;
  for (const auto& sd : c.domains)
    for (const auto& td : c.domains)
      if (sd.profile.name != td.profile.name) pairs.emplace_back(sd.profile.name.name(), td.profile.name.name());

  // DeLong against the best method within each (source, target, feature).
  for (const auto& [s, t] : pairs)
    for (FeatureKind f : c.features) {
      const CellResult* best = nullptr;
      for (WeightMethod m : c.methods) {
        const CellResult* cell = r.find(s, t, f, m);
        if (!best || cell->auc > best->auc) best = cell;
      }
      const ScoredLabels bs = scored(*best);
      for (WeightMethod m : c.methods) {
        const CellResult* cell = r.find(s, t, f, m);
        DeLongEntry e{s, t, f, m, best->method, {}, true};
        if (cell != best && has_both_classes(bs)) {
          e.test = delong_test(scored(*cell), bs);
          e.bold = !(e.test.p < 0.05);
        } else {
          e.test.auc_a = e.test.auc_b = cell->auc;
        }
        r.delong.push_back(e);
      }
    }

  // Rank tables over the cross-domain grid.
  if (pairs.size() >= 2) {
    if (c.methods.size() >= 2)
      for (FeatureKind f : c.features) {
        RankEntry e;
        e.group = std::string(feature_kind_name(f));
        for (WeightMethod m : c.methods) e.columns.push_back(std::string(weight_method_name(m)));
        RankTable t;
        for (const auto& [s, tg] : pairs) {
          e.rows.push_back(pair_name(s, tg));
          std::vector<double> row;
          for (WeightMethod m : c.methods) row.push_back(r.find(s, tg, f, m)->auc);
          t.rows.push_back(row);
        }
        e.stats = friedman_nemenyi(t);
        r.weight_ranks.push_back(std::move(e));
      }
    if (c.features.size() >= 2)
      for (WeightMethod m : c.methods) {
        RankEntry e;
        e.group = std::string(weight_method_name(m));
        for (FeatureKind f : c.features) e.columns.push_back(std::string(feature_kind_name(f)));
        RankTable t;
        for (const auto& [s, tg] : pairs) {
          e.rows.push_back(pair_name(s, tg));
          std::vector<double> row;
          for (FeatureKind f : c.features) row.push_back(r.find(s, tg, f, m)->auc);
          t.rows.push_back(row);
        }
        e.stats = friedman_nemenyi(t);
        r.feature_ranks.push_back(std::move(e));
      }
  } else if (!pairs.empty()) {
    r.warnings.push_back("rank tables need at least two cross-domain pairs");
  }
  return r;
}

namespace {

json rank_to_json(const RankEntry& e) {
  json j;
  j["group"] = e.group;
  j["columns"] = e.columns;
  j["rows"] = e.rows;
  j["average_ranks"] = e.stats.average_ranks;
  j["friedman_chi2"] = e.stats.statistic;
  j["friedman_p"] = e.stats.p;
  j["critical_difference"] = e.stats.critical_difference;
  return j;
}

}  // namespace

json to_json(const ExperimentReport& r) {
  json j;
  j["schema"] = "crossmil-report";
  j["version"] = 1;
  j["mode"] = r.mode;
  j["config"] = r.config;
  json cells = json::array();
  for (const auto& c : r.cells) {
    json cj;
    cj["source"] = c.source;
    cj["target"] = c.target;
    cj["feature"] = std::string(feature_kind_name(c.feature));
    cj["method"] = std::string(weight_method_name(c.method));
    cj["same_domain"] = c.same_domain();
    cj["auc"] = c.auc;
    cj["spearman_gold"] = c.spearman_gold ? json(*c.spearman_gold) : json(nullptr);
    cj["degenerate_folds"] = c.degenerate_folds;
    cj["nonconverged_fits"] = c.nonconverged_fits;
    json scores = json::array();
    for (const auto& b : c.scores)
      scores.push_back({{"bag", b.bag_id},
                        {"label", to_int(b.label)},
                        {"gold", b.gold ? json(*b.gold) : json(nullptr)},
                        {"posterior", b.posterior}});
    cj["posteriors"] = scores;
    json weights = json::array();
    for (const auto& w : c.source_weights) weights.push_back({{"bag", w.source_bag}, {"mean", w.mean}, {"sd", w.sd}});
    cj["source_weights"] = weights;
    cells.push_back(cj);
  }
  j["cells"] = cells;
  json dl = json::array();
  for (const auto& e : r.delong)
    dl.push_back({{"source", e.source},
                  {"target", e.target},
                  {"feature", std::string(feature_kind_name(e.feature))},
                  {"method", std::string(weight_method_name(e.method))},
                  {"best", std::string(weight_method_name(e.best))},
                  {"z", e.test.z},
                  {"p", e.test.p},
                  {"bold", e.bold}});
  j["delong"] = dl;
  json wr = json::array();
  for (const auto& e : r.weight_ranks) wr.push_back(rank_to_json(e));
  j["weighting_ranks"] = wr;
  json fr = json::array();
  for (const auto& e : r.feature_ranks) fr.push_back(rank_to_json(e));
  j["feature_ranks"] = fr;
  j["warnings"] = r.warnings;
  return j;
}

void write_report(const ExperimentReport& r, const fs::path& out) {
  fs::create_directories(out);
  write_text_file(out / "report.json", to_json(r).dump(2) + "\n");
  std::ostringstream ws;
  for (const auto& c : r.cells) {
    if (c.method == WeightMethod::none) continue;
    for (std::size_t t = 0; t < c.raw_weights.size(); ++t)
      for (std::size_t s = 0; s < c.source_ids.size(); ++s) {
        const double w = c.raw_weights[t][s];
        if (std::isnan(w)) continue;
        json line{{"source", c.source},
                  {"target", c.target},
                  {"feature", std::string(feature_kind_name(c.feature))},
                  {"method", std::string(weight_method_name(c.method))},
                  {"target_bag", c.scores[t].bag_id},
                  {"source_bag", c.source_ids[s]},
                  {"weight", w}};
        ws << line.dump() << "\n";
      }
  }
  write_text_file(out / "weights.jsonl", ws.str());
}

// ---------------------------------------------------------------------------
// On-disk layout:
//   gen-data: <out>/<domain>/subjects.json + volumes, <out>/calibration/...
//   extract:  <out>/bins.json, <out>/<domain>/<feature>/manifest.json
//   run:      <out>/report.json, <out>/weights.jsonl

namespace {

void write_cohort(const Cohort& cohort, const fs::path& dir) {
  fs::create_directories(dir);
  json subjects = json::array();
  for (std::size_t i = 0; i < cohort.subjects.size(); ++i) {
    const auto& d = cohort.draws[i];
    const auto& s = cohort.subjects[i];
    const std::string vol = d.id + ".vol.f32", lung = d.id + ".lung.u8", tr = d.id + ".trachea.u8";
    write_volume(s.volume, dir / vol);
    write_mask(s.lung, s.volume.spacing, dir / lung);
    write_mask(s.trachea, s.volume.spacing, dir / tr);
    subjects.push_back({{"id", d.id},
                        {"seed", d.spec.seed},
                        {"severity", d.spec.severity},
                        {"label", to_int(d.label)},
                        {"gold", d.gold},
                        {"volume", vol},
                        {"lung", lung},
                        {"trachea", tr}});
  }
  const auto& p = cohort.draws.empty() ? DomainProfile{} : cohort.draws.front().spec.domain;
  json j;
  j["version"] = 1;
  j["domain"] = cohort.domain.name();
  j["profile"] = {{"intensity_offset", p.intensity_offset},
                  {"noise_sigma", p.noise_sigma},
                  {"spacing", spacing_to_json(p.spacing)},
                  {"blur_sigma", p.blur_sigma},
                  {"class_prior", p.class_prior}};
  j["subjects"] = subjects;
  write_text_file(dir / "subjects.json", j.dump(2) + "\n");
}

Cohort read_cohort(const fs::path& dir, const ExperimentConfig& c, const DomainProfile& profile) {
  const fs::path manifest = dir / "subjects.json";
  if (!fs::exists(manifest)) throw DataError("missing " + manifest.string() + " (run gen-data first)");
  json j;
  try {
    j = json::parse(read_text_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + manifest.string() + ": " + e.what());
  }
  Cohort out;
  out.domain = profile.name;
  try {
    const auto& subs = j.at("subjects");
    out.draws.resize(subs.size());
    out.subjects.resize(subs.size());
    for (std::size_t i = 0; i < subs.size(); ++i) {
      const auto& s = subs[i];
      SubjectDraw& d = out.draws[i];
      d.id = s.at("id").get<std::string>();
      d.spec.seed = s.at("seed").get<std::uint64_t>();
      d.spec.severity = s.at("severity").get<double>();
      d.spec.domain = profile;
      d.label = label_from_int(s.at("label").get<int>());
      d.gold = s.at("gold").get<int>();
    }
    parallel_for(subs.size(), c.threads, [&](std::size_t i) {
      const auto& s = subs[i];
      Subject& sub = out.subjects[i];
      sub.volume = read_volume(dir / s.at("volume").get<std::string>());
      sub.lung = read_mask(dir / s.at("lung").get<std::string>());
      sub.trachea = read_mask(dir / s.at("trachea").get<std::string>());
      sub.gold = out.draws[i].gold;
      if (!(sub.lung.dims == sub.volume.dims) || !(sub.trachea.dims == sub.volume.dims))
        throw DataError("mask dimensions differ from volume for subject " + out.draws[i].id);
    });
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed " + manifest.string() + ": " + e.what());
  }
  return out;
}

}  // namespace

void cmd_gen_data(const ExperimentConfig& c, const fs::path& out) {
  validate_config(c);
  for (const auto& cohort : generate_cohorts(c)) write_cohort(cohort, out / cohort.domain.name());
  write_cohort(generate_calibration_cohort(c), out / "calibration");
}

void cmd_extract(const ExperimentConfig& c, const fs::path& data_dir, const fs::path& out) {
  validate_config(c);
  const bool want_gss = std::any_of(c.features.begin(), c.features.end(),
                                    [](FeatureKind k) { return k != FeatureKind::kde_i; });
  std::optional<BinEdges> bins;
  if (want_gss) {
    if (!fs::exists(data_dir / "calibration" / "subjects.json"))
      throw DataError("missing calibration cohort in " + data_dir.string());
    const Cohort cal = read_cohort(data_dir / "calibration", c, find_domain(c, calibration_name(c)).profile);
    bins = fit_calibration_bins(c, cal);
    fs::create_directories(out);
    write_text_file(out / "bins.json", to_json(*bins).dump(2) + "\n");
  }
  std::vector<Cohort> cohorts;
  for (const auto& d : c.domains) cohorts.push_back(read_cohort(data_dir / d.profile.name.name(), c, d.profile));
  const FeatureStore store = extract_features(c, cohorts, bins ? &*bins : nullptr);
  for (const auto& [domain, kinds] : store)
    for (const auto& [kind, ds] : kinds) save_dataset(ds, out / domain / std::string(feature_kind_name(kind)) / "manifest.json");
}

ExperimentReport cmd_run(const ExperimentConfig& c, const fs::path& features_dir, const fs::path& out) {
  validate_config(c);
  FeatureStore store;
  for (const auto& d : c.domains)
    for (FeatureKind k : c.features) {
      const fs::path m = features_dir / d.profile.name.name() / std::string(feature_kind_name(k)) / "manifest.json";
      if (!fs::exists(m)) throw DataError("missing " + m.string() + " (run extract first)");
      store[d.profile.name.name()][k] = load_dataset(m);
    }
  ExperimentReport r = run_experiments(c, store);
  write_report(r, out);
  return r;
}

// ---------------------------------------------------------------------------

namespace {

std::string fmt(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

ScoredLabels scored_from_json(const json& cell) {
  ScoredLabels s;
  for (const auto& p : cell.at("posteriors")) {
    s.scores.push_back(p.at("posterior").get<double>());
    s.labels.push_back(label_from_int(p.at("label").get<int>()));
  }
  return s;
}

}  // namespace

RenderedReport render_report(const json& report) {
  RenderedReport out;
  try {
    if (report.at("schema").get<std::string>() != "crossmil-report" || report.at("version").get<int>() != 1)
      throw DataError("unsupported report schema");
    const auto& cells = report.at("cells");
    std::ostringstream md;
    md << "# Results\n\nMode: " << report.at("mode").get<std::string>() << "\n\n";

    // Ordered groups as they appear in the report.
    std::vector<std::string> features, methods, columns;
    auto push_unique = [](std::vector<std::string>& v, const std::string& s) {
      if (std::find(v.begin(), v.end(), s) == v.end()) v.push_back(s);
    };
    for (const auto& c : cells) {
      push_unique(features, c.at("feature").get<std::string>());
      if (!c.at("same_domain").get<bool>()) {
        push_unique(methods, c.at("method").get<std::string>());
        push_unique(columns, c.at("source").get<std::string>() + "->" + c.at("target").get<std::string>());
      }
    }
    auto find_cell = [&](const std::string& col, const std::string& f, const std::string& m) -> const json* {
      for (const auto& c : cells)
        if (c.at("feature") == f && c.at("method") == m &&
            c.at("source").get<std::string>() + "->" + c.at("target").get<std::string>() == col)
          return &c;
      return nullptr;
    };

    std::vector<const json*> same;
    for (const auto& c : cells)
      if (c.at("same_domain").get<bool>()) same.push_back(&c);
    if (!same.empty()) {
      md << "## Same-domain AUC x100 (leave-one-bag-out)\n\n| Feature | Domain | AUC |\n|---|---|---|\n";
      for (const json* c : same)
        md << "| " << c->at("feature").get<std::string>() << " | " << c->at("source").get<std::string>() << " | "
           << fmt(100.0 * c->at("auc").get<double>(), 1) << " |\n";
      md << "\n";
    }

    if (!columns.empty()) {
      md << "## Cross-domain AUC x100\n\nBold: best in column or not significantly worse (DeLong p >= 0.05).\n\n";
      for (const auto& f : features) {
        md << "### " << f << "\n\n| Method |";
        for (const auto& col : columns) md << " " << col << " |";
        md << "\n|---|";
        for (std::size_t i = 0; i < columns.size(); ++i) md << "---|";
        md << "\n";
        // Bold marks per column, recomputed from stored posteriors.
        std::map<std::pair<std::string, std::string>, bool> bold;
        for (const auto& col : columns) {
          const json* best = nullptr;
          for (const auto& m : methods) {
            const json* c = find_cell(col, f, m);
            if (c && (!best || c->at("auc").get<double>() > best->at("auc").get<double>())) best = c;
          }
          if (!best) continue;
          const ScoredLabels bs = scored_from_json(*best);
          for (const auto& m : methods) {
            const json* c = find_cell(col, f, m);
            if (!c) continue;
            bool b = c == best || !has_both_classes(bs);
            if (!b) b = !(delong_test(scored_from_json(*c), bs).p < 0.05);
            bold[{col, m}] = b;
          }
        }
        for (const auto& m : methods) {
          md << "| " << m << " |";
          for (const auto& col : columns) {
            const json* c = find_cell(col, f, m);
            if (!c) {
              md << " - |";
              continue;
            }
            const std::string v = fmt(100.0 * c->at("auc").get<double>(), 1);
            md << " " << (bold[{col, m}] ? "**" + v + "**" : v) << " |";
          }
          md << "\n";
        }
        md << "\n";
      }
    }

    auto ranks = [&](const char* key, const char* title) {
      if (!report.contains(key) || report.at(key).empty()) return;
      md << "## " << title << "\n\n";
      for (const auto& e : report.at(key)) {
        md << "### " << e.at("group").get<std::string>() << "\n\n| | Average rank |\n|---|---|\n";
        const auto cols = e.at("columns").get<std::vector<std::string>>();
        const auto avg = e.at("average_ranks").get<std::vector<double>>();
        for (std::size_t i = 0; i < cols.size() && i < avg.size(); ++i)
          md << "| " << cols[i] << " | " << fmt(avg[i], 2) << " |\n";
        md << "\nFriedman chi2 = " << fmt(e.at("friedman_chi2").get<double>(), 3)
           << ", p = " << fmt(e.at("friedman_p").get<double>(), 4)
           << ", critical difference = " << fmt(e.at("critical_difference").get<double>(), 2) << "\n\n";
      }
    };
    ranks("weighting_ranks", "Ranks of weighting methods per feature");
    ranks("feature_ranks", "Ranks of features per weighting method");
    out.tables_markdown = md.str();

    struct Row {
      std::string group, bag;
      double mean, sd;
    };
    std::vector<Row> rows;
    for (const auto& c : cells) {
      if (!c.contains("source_weights")) continue;
      const std::string group = c.at("source").get<std::string>() + "," + c.at("target").get<std::string>() + "," +
                                c.at("feature").get<std::string>() + "," + c.at("method").get<std::string>();
      std::vector<Row> g;
      for (const auto& w : c.at("source_weights"))
        g.push_back({group, w.at("bag").get<std::string>(), w.at("mean").get<double>(), w.at("sd").get<double>()});
      std::stable_sort(g.begin(), g.end(), [](const Row& a, const Row& b) { return a.mean < b.mean; });
      rows.insert(rows.end(), g.begin(), g.end());
    }
    std::ostringstream csv;
    csv << "source,target,feature,method,rank,source_bag,mean_weight,sd_weight\n";
    std::string last;
    int rank = 0;
    char buf[64];
    for (const auto& r : rows) {
      rank = r.group == last ? rank + 1 : 0;
      last = r.group;
      csv << r.group << "," << rank << "," << r.bag << ",";
      std::snprintf(buf, sizeof buf, "%.10g,%.10g", r.mean, r.sd);
      csv << buf << "\n";
    }
    out.weights_csv = csv.str();
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw DataError(std::string("malformed report: ") + e.what());
  }
  return out;
}

void cmd_report(const fs::path& report_path, const fs::path& out) {
  if (!fs::exists(report_path)) throw DataError("missing report " + report_path.string());
  json j;
  try {
    j = json::parse(read_text_file(report_path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed report: " + std::string(e.what()));
  }
  const RenderedReport r = render_report(j);
  fs::create_directories(out);
  write_text_file(out / "tables.md", r.tables_markdown);
  write_text_file(out / "weights.csv", r.weights_csv);
}

}  // namespace crossmil
