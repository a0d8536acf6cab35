#include "cli.hpp"

#include "lpsa/estimators.hpp"
#include "lpsa/io.hpp"
#include "lpsa/pipeline.hpp"
#include "lpsa/simulation.hpp"
#include "lpsa/tuning.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

namespace lpsa::cli {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

namespace {

struct Flags {
  std::string config;
  std::string out;
  int threads = 0;
  std::optional<std::uint64_t> seed_override;
};

// ---- config access -------------------------------------------------------

[[noreturn]] void config_error(const std::string& msg) { throw DataError("config error: " + msg); }

template <class T>
T value_or(const json& j, const char* key, T fallback) {
  if (!j.is_object() || !j.contains(key) || j.at(key).is_null()) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    config_error(std::string("key '") + key + "' has the wrong type");
  }
}

const json& section(const json& root, const char* key) {
  static const json empty = json::object();
  if (!root.contains(key)) return empty;
  const json& s = root.at(key);
  if (!s.is_object()) config_error(std::string("'") + key + "' must be an object");
  return s;
}

MetricKind parse_metric(const std::string& name) {
  if (name == "euclidean") return MetricKind::euclidean;
  if (name == "pseudo_max") return MetricKind::pseudo_max;
  config_error("unknown metric '" + name + "'");
}

SplitMode parse_split(const std::string& name) {
  if (name == "none") return SplitMode::none;
  if (name == "random") return SplitMode::random;
  if (name == "contiguous_halves") return SplitMode::contiguous_halves;
  config_error("unknown split scheme '" + name + "'");
}

OutcomeBackend parse_outcome(const std::string& name) {
  if (name == "local_ls") return OutcomeBackend::local_ls;
  if (name == "local_average") return OutcomeBackend::local_average;
  if (name == "local_logit") return OutcomeBackend::local_logit;
  config_error("unknown outcome backend '" + name + "'");
}

PropensityBackend parse_propensity(const std::string& name) {
  if (name == "local_ls") return PropensityBackend::local_ls;
  if (name == "local_average") return PropensityBackend::local_average;
  if (name == "local_logit") return PropensityBackend::local_logit;
  config_error("unknown propensity backend '" + name + "'");
}

MultiplierKind parse_multiplier(const std::string& name) {
  if (name == "rademacher") return MultiplierKind::rademacher;
  if (name == "mammen") return MultiplierKind::mammen;
  if (name == "gaussian") return MultiplierKind::gaussian;
  config_error("unknown multiplier '" + name + "'");
}

EigenSolverKind parse_solver(const std::string& name) {
  if (name == "dense") return EigenSolverKind::dense;
  if (name == "subspace_iteration") return EigenSolverKind::subspace_iteration;
  config_error("unknown eigen solver '" + name + "'");
}

struct Estimand {
  int level = 0;
  int group = 0;
};

Estimand parse_estimand(const json& j) {
  if (!j.is_object() || !j.contains("level") || !j.contains("group")) {
    config_error("estimands need integer 'level' and 'group'");
  }
  return {value_or<int>(j, "level", 0), value_or<int>(j, "group", 0)};
}

struct RunConfig {
  fs::path data_path;
  DatasetSchema schema;
  ExtractionConfig extraction;
  NuisanceConfig nuisance;
  json k_spec;
  std::uint64_t tuning_seed = 0;
  json d_lambda_spec;
  std::vector<Estimand> estimands;
  struct Effect {
    int level_a = 0;
    int level_b = 0;
    int group = 0;
  };
  std::vector<Effect> effects;
  std::vector<Estimand> cdfs;
  int cdf_points = 17;
  std::vector<double> cdf_tau;
  Index boot_draws = 1000;
  std::uint64_t boot_seed = 0;
  MultiplierKind multiplier = MultiplierKind::rademacher;
  std::vector<std::pair<Estimand, Estimand>> sd_tests;
  bool write_fits = false;
  json diagnose;
  json simulate;
  int threads = 0;
};

RunConfig parse_config(const json& root, const fs::path& base_dir, const Flags& flags) {
  if (!root.is_object()) config_error("top level must be an object");
  RunConfig cfg;
  cfg.threads = flags.threads;
  const auto seed = [&](const json& j, const char* key) {
    return flags.seed_override ? *flags.seed_override : value_or<std::uint64_t>(j, key, 0);
  };

  const json& data = section(root, "data");
  const std::string path = value_or<std::string>(data, "path", "");
  if (!path.empty()) cfg.data_path = fs::path(path).is_absolute() ? fs::path(path) : base_dir / path;
  cfg.schema.id_column = value_or<std::string>(data, "id_column", "");
  cfg.schema.outcome = value_or<std::string>(data, "outcome", "y");
  cfg.schema.treatment = value_or<std::string>(data, "treatment", "s");
  cfg.schema.controls = value_or<std::vector<std::string>>(data, "controls", {});
  cfg.schema.measurements = value_or<std::vector<std::string>>(data, "measurements", {});
  cfg.schema.measurement_prefix = value_or<std::string>(data, "measurement_prefix", "");
  cfg.schema.high_rank = value_or<std::vector<std::vector<std::string>>>(data, "high_rank", {});
  cfg.schema.high_rank_prefixes = value_or<std::vector<std::string>>(data, "high_rank_prefixes", {});
  cfg.schema.num_levels = value_or<int>(data, "num_levels", 0);

  auto& ex = cfg.extraction;
  ex.threads = flags.threads;
  ex.metric.kind = parse_metric(value_or<std::string>(section(root, "matching"), "metric", "euclidean"));
  const json& split = section(root, "split");
  ex.split = parse_split(value_or<std::string>(split, "scheme", "contiguous_halves"));
  ex.split_seed = seed(split, "seed");
  const json& eigen = section(root, "eigen");
  ex.eigen.kind = parse_solver(value_or<std::string>(eigen, "solver", "dense"));
  ex.eigen.seed = seed(eigen, "seed");

  const json& hr = section(root, "high_rank");
  ex.high_rank = value_or<bool>(hr, "enabled", false);
  ex.high_rank_k = value_or<Index>(hr, "k", 0);
  ex.high_rank_d_lambda = value_or<std::vector<Index>>(hr, "d_lambda", {});
  if (hr.contains("seed")) ex.split_seed = seed(hr, "seed");

  cfg.k_spec = root.contains("k") ? root.at("k") : json();
  if (cfg.k_spec.is_object()) cfg.tuning_seed = seed(cfg.k_spec, "seed");
  cfg.d_lambda_spec = root.contains("d_lambda") ? root.at("d_lambda") : json(1);

  cfg.nuisance.outcome = parse_outcome(value_or<std::string>(root, "outcome", "local_ls"));
  const json& prop = section(root, "propensity");
  cfg.nuisance.propensity = parse_propensity(value_or<std::string>(prop, "backend", "local_ls"));
  cfg.nuisance.regression.p_clip = value_or<double>(prop, "clip", 0.01);
  if (!(cfg.nuisance.regression.p_clip >= 0.0 && cfg.nuisance.regression.p_clip < 0.5)) {
    config_error("propensity clip must lie in [0, 0.5)");
  }
  cfg.nuisance.regression.add_intercept = value_or<bool>(root, "add_intercept", false);
  cfg.nuisance.regression.threads = flags.threads;

  if (root.contains("estimands")) {
    for (const auto& e : root.at("estimands")) cfg.estimands.push_back(parse_estimand(e));
  }
  if (root.contains("effects")) {
    for (const auto& e : root.at("effects")) {
      cfg.effects.push_back({value_or<int>(e, "level_a", 1), value_or<int>(e, "level_b", 0),
                             value_or<int>(e, "group", 1)});
    }
  }
  const json& cdf = section(root, "cdf");
  if (cdf.contains("estimands")) {
    for (const auto& e : cdf.at("estimands")) cfg.cdfs.push_back(parse_estimand(e));
  }
  cfg.cdf_points = value_or<int>(cdf, "points", 17);
  cfg.cdf_tau = value_or<std::vector<double>>(cdf, "tau", {});
  const json& boot = section(root, "bootstrap");
  cfg.boot_draws = value_or<Index>(boot, "draws", 1000);
  cfg.boot_seed = seed(boot, "seed");
  cfg.multiplier = parse_multiplier(value_or<std::string>(boot, "multiplier", "rademacher"));
  if (root.contains("sd_tests")) {
    for (const auto& t : root.at("sd_tests")) {
      if (!t.contains("a") || !t.contains("b")) config_error("sd_tests entries need 'a' and 'b'");
      cfg.sd_tests.emplace_back(parse_estimand(t.at("a")), parse_estimand(t.at("b")));
    }
  }
  cfg.write_fits = value_or<bool>(section(root, "output"), "nuisance_fits", false);
  cfg.diagnose = section(root, "diagnose");
  cfg.simulate = section(root, "simulate");
  return cfg;
}

// ---- output staging ------------------------------------------------------

// Files are written into a sibling staging directory and moved into place
// only when the command succeeds; the staging directory is removed otherwise.
class OutputDir {
 public:
  explicit OutputDir(fs::path target) : target_(std::move(target)) {
    const fs::path parent = target_.has_parent_path() ? target_.parent_path() : fs::path(".");
    fs::create_directories(parent);
    staging_ = parent / ("." + target_.filename().string() + ".partial");
    fs::remove_all(staging_);
    fs::create_directories(staging_);
  }
  ~OutputDir() {
    if (!committed_) {
      std::error_code ec;
      fs::remove_all(staging_, ec);
    }
  }
  OutputDir(const OutputDir&) = delete;
  OutputDir& operator=(const OutputDir&) = delete;

  void add(const std::string& name, const std::string& content) {
    std::ofstream out(staging_ / name, std::ios::binary);
    out << content;
    if (!out) throw std::runtime_error("cannot write " + (staging_ / name).string());
    names_.push_back(name);
  }

  void commit() {
    if (!fs::exists(target_)) {
      fs::rename(staging_, target_);
    } else {
      for (const auto& name : names_) fs::rename(staging_ / name, target_ / name);
      fs::remove_all(staging_);
    }
    committed_ = true;
  }

  const fs::path& target() const { return target_; }

 private:
  fs::path target_;
  fs::path staging_;
  std::vector<std::string> names_;
  bool committed_ = false;
};

fs::path default_out_dir(const std::string& command) {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  localtime_r(&now, &tm);
  std::ostringstream os;
  os << "lpsa-" << command << "-" << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return os.str();
}

json num(double v) { return std::isfinite(v) ? json(v) : json(); }

json vec_json(const VectorXd& v) {
  json out = json::array();
  for (Index i = 0; i < v.size(); ++i) out.push_back(num(v(i)));
  return out;
}

json vec_json(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(num(x));
  return out;
}

json estimate_json(const DrEstimate& e) {
  return json{{"level", e.level},
              {"group", e.group},
              {"theta", num(e.theta)},
              {"sigma", num(e.sigma)},
              {"ci95", {num(e.ci95.lower), num(e.ci95.upper)}},
              {"clipped_share", num(e.clipped_share)},
              {"clipping_warning", e.clipping_warning}};
}

// ---- pipeline plumbing ---------------------------------------------------

Dataset load(const RunConfig& cfg) {
  if (cfg.data_path.empty()) config_error("data.path is required");
  return load_dataset(cfg.data_path, cfg.schema);
}

TuningSetup tuning_setup(const RunConfig& cfg, Index d_lambda) {
  TuningSetup setup;
  setup.extraction = cfg.extraction;
  setup.extraction.d_lambda = d_lambda;
  setup.nuisance = cfg.nuisance;
  return setup;
}

int default_level(const RunConfig& cfg) { return cfg.estimands.empty() ? 0 : cfg.estimands.front().level; }

// K from a literal or a power rule; nullopt for data-driven rules.
std::optional<Index> literal_k(const json& spec, Index n) {
  if (spec.is_null()) return resolve_k(KRule{KRule::Kind::power, 0, 1.0, 2.0 / 3.0}, n);
  if (spec.is_number_integer()) return spec.get<Index>();
  if (!spec.is_object()) config_error("'k' must be an integer or an object");
  const std::string rule = value_or<std::string>(spec, "rule", "power");
  if (rule == "fixed") return value_or<Index>(spec, "value", 0);
  if (rule == "power") {
    return resolve_k(KRule{KRule::Kind::power, 0, value_or<double>(spec, "constant", 1.0),
                           value_or<double>(spec, "exponent", 2.0 / 3.0)},
                     n);
  }
  if (rule == "cv" || rule == "dpi") return std::nullopt;
  config_error("unknown K rule '" + rule + "'");
}

struct Selected {
  Index k = 0;
  Index d_lambda = 0;
  std::optional<TuningResult> tuning;
  json d_lambda_info = json::object();
  std::vector<std::string> warnings;
};

Index pilot_k(const RunConfig& cfg, Index n) {
  if (auto k = literal_k(cfg.k_spec, n)) return *k;
  if (cfg.k_spec.contains("initial")) return value_or<Index>(cfg.k_spec, "initial", 1);
  return resolve_k(KRule{KRule::Kind::power, 0, 1.0, 2.0 / 3.0}, n);
}

Index resolve_d_lambda(const RunConfig& cfg, const Dataset& data, Index k, json& info,
                       std::vector<std::string>& warnings) {
  const json& spec = cfg.d_lambda_spec;
  if (spec.is_number_integer()) {
    info = {{"rule", "fixed"}, {"d_lambda", spec.get<Index>()}};
    return spec.get<Index>();
  }
  if (!spec.is_object()) config_error("'d_lambda' must be an integer or an object");
  const std::string rule = value_or<std::string>(spec, "rule", "fixed_order");

  ExtractionConfig pilot = cfg.extraction;
  pilot.k = k;
  pilot.d_lambda = 0;
  const Extraction ex = extract_latent(data.panel, pilot);
  const Index rank_bound = std::min<Index>(ex.pca_rows.rows(), k);
  const Index q = std::min<Index>(value_or<Index>(spec, "q", 10), rank_bound);
  std::vector<Index> units;
  const Index n = data.panel.units();
  const Index probe = std::min<Index>(n, 500);
  for (Index r = 0; r < probe; ++r) units.push_back(r * n / probe);
  const EigenDiagnostics diag = eigen_diagnostics(ex.pca_rows, ex.neighborhoods, units, q);

  if (rule == "bias_minimizing") {
    const auto choice = select_num_factors(BiasMinimizing{value_or<double>(spec, "threshold", 5.0)}, diag, rank_bound);
    info = {{"rule", rule}, {"d_lambda", choice.d_lambda}, {"capped", choice.capped}};
    return choice.d_lambda;
  }
  if (rule != "fixed_order") config_error("unknown d_lambda rule '" + rule + "'");
  const int m = value_or<int>(spec, "m", 2);
  int d_alpha = 1;
  if (spec.contains("d_alpha") && spec.at("d_alpha").is_number_integer()) {
    d_alpha = spec.at("d_alpha").get<int>();
  } else {
    const auto est = estimate_num_latent(diag, value_or<double>(spec, "ratio_threshold", 5.0));
    if (est.d_alpha) {
      d_alpha = static_cast<int>(*est.d_alpha);
    } else {
      warnings.push_back("no eigenvalue gap above the ratio threshold; using d_alpha = 1");
    }
  }
  const auto choice = select_num_factors(FixedOrder{d_alpha, m}, rank_bound);
  info = {{"rule", rule}, {"d_alpha", d_alpha}, {"m", m}, {"d_lambda", choice.d_lambda}, {"capped", choice.capped}};
  return choice.d_lambda;
}

TuningResult run_tuning(const RunConfig& cfg, const Dataset& data, Index d_lambda) {
  const json& spec = cfg.k_spec;
  const std::string rule = value_or<std::string>(spec, "rule", "");
  const int level = value_or<int>(spec, "level", default_level(cfg));
  const Index n = data.panel.units();
  if (rule == "cv") {
    const int d_alpha = value_or<int>(spec, "d_alpha", 1);
    const int m = value_or<int>(spec, "m", 2);
    auto candidates = value_or<std::vector<Index>>(spec, "candidates", {});
    if (candidates.empty()) candidates = default_k_candidates(n, d_alpha, m);
    return cross_validate_k(data.panel, data.sample, level, candidates, value_or<int>(spec, "folds", 5),
                            cfg.tuning_seed,
                            tuning_setup(cfg, d_lambda));
  }
  if (rule == "dpi") {
    DpiOptions opt;
    opt.d_alpha = value_or<int>(spec, "d_alpha", 1);
    opt.m = value_or<int>(spec, "m", 2);
    const std::string proxy = value_or<std::string>(spec, "proxy", "polynomial");
    if (proxy == "polynomial") {
      opt.proxy = BiasProxy::polynomial;
    } else if (proxy == "extra_components") {
      opt.proxy = BiasProxy::extra_components;
    } else {
      config_error("unknown bias proxy '" + proxy + "'");
    }
    Index initial = value_or<Index>(spec, "initial", 0);
    if (initial == 0) {
      initial = resolve_k(KRule{KRule::Kind::power, 0, value_or<double>(spec, "constant", 1.5),
                                value_or<double>(spec, "exponent", 2.0 * opt.m / (2.0 * opt.m + opt.d_alpha))},
                          n);
    }
    return dpi_k(data.panel, data.sample, level, initial, opt, tuning_setup(cfg, d_lambda));
  }
  config_error("'k' does not request cv or dpi tuning");
}

Selected select_tuning(const RunConfig& cfg, const Dataset& data) {
  Selected out;
  const Index n = data.panel.units();
  out.d_lambda = resolve_d_lambda(cfg, data, pilot_k(cfg, n), out.d_lambda_info, out.warnings);
  if (auto k = literal_k(cfg.k_spec, n)) {
    out.k = *k;
  } else {
    out.tuning = run_tuning(cfg, data, out.d_lambda);
    out.k = out.tuning->k_selected;
    for (const auto& w : out.tuning->warnings) out.warnings.push_back(w);
  }
  return out;
}

json tuning_json(const TuningResult& t) {
  json curve = json::array();
  for (const auto& [k, v] : t.criterion_curve) curve.push_back({k, num(v)});
  json out{{"method", t.method == TuningMethod::cv ? "cv" : "dpi"}, {"k_selected", t.k_selected}};
  if (t.method == TuningMethod::dpi) {
    out["k_initial"] = t.k_initial;
    out["sum_variance"] = num(t.sum_variance);
    out["sum_bias"] = num(t.sum_bias);
  } else {
    out["criterion_curve"] = curve;
  }
  out["warnings"] = t.warnings;
  return out;
}

std::string cdf_csv(const CdfProcess& p) {
  CsvWriter w({"tau", "theta_raw", "theta", "sigma", "band_lower", "band_upper"});
  for (std::size_t t = 0; t < p.tau.size(); ++t) {
    const auto k = static_cast<Index>(t);
    w.add_row({format_double(p.tau[t]), format_double(p.theta_raw(k)), format_double(p.theta(k)),
               format_double(p.sigma(k)), format_double(p.band_lower(k)), format_double(p.band_upper(k))});
  }
  return w.str();
}

// ---- subcommands ---------------------------------------------------------

void cmd_estimate(const RunConfig& cfg, OutputDir& out) {
  const Dataset data = load(cfg);
  const int levels = data.sample.num_levels();
  auto check_level = [&](int level, const char* what) {
    if (level < 0 || level >= levels) {
      throw DataError(std::string("estimand error: ") + what + " level " + std::to_string(level) +
                      " is outside 0.." + std::to_string(levels - 1));
    }
    data.sample.require_level(level);
  };
  std::vector<int> needed;
  for (const auto& e : cfg.estimands) {
    check_level(e.level, "outcome");
    check_level(e.group, "group");
    needed.push_back(e.level);
    needed.push_back(e.group);
  }
  for (const auto& e : cfg.effects) {
    check_level(e.level_a, "effect");
    check_level(e.level_b, "effect");
    check_level(e.group, "group");
    needed.insert(needed.end(), {e.level_a, e.level_b, e.group});
  }
  std::vector<Estimand> processes = cfg.cdfs;
  for (const auto& [a, b] : cfg.sd_tests) {
    processes.push_back(a);
    processes.push_back(b);
  }
  for (const auto& e : processes) {
    check_level(e.level, "distribution");
    check_level(e.group, "group");
    needed.push_back(e.level);
    needed.push_back(e.group);
  }
  if (needed.empty()) config_error("no estimands requested");

  Selected sel = select_tuning(cfg, data);
  ExtractionConfig ex_cfg = cfg.extraction;
  ex_cfg.k = sel.k;
  ex_cfg.d_lambda = sel.d_lambda;
  if (ex_cfg.high_rank && !data.panel.has_high_rank()) {
    sel.warnings.push_back("high-rank adjustment requested but no covariates were loaded; skipped");
  }
  const Extraction extraction = extract_latent(data.panel, ex_cfg);
  const NuisanceResult nuisance = fit_nuisance(data.sample, extraction, needed, cfg.nuisance);

  json results = json::object();
  results["n"] = data.panel.units();
  results["T"] = data.panel.periods();
  results["k"] = sel.k;
  results["d_lambda"] = sel.d_lambda;
  results["d_lambda_selection"] = sel.d_lambda_info;
  if (sel.tuning) results["tuning"] = tuning_json(*sel.tuning);
  if (extraction.split) {
    results["split"] = {{"matching_rows", extraction.split->matching.size()},
                        {"pca_rows", extraction.split->pca.size()}};
  }
  if (extraction.high_rank) results["high_rank_theta"] = vec_json(extraction.high_rank->theta);

  CsvWriter est_csv({"kind", "level", "level_b", "group", "theta", "sigma", "ci_lower", "ci_upper"});
  json estimates = json::array();
  std::map<std::pair<int, int>, DrEstimate> cache;
  auto estimate = [&](int level, int group) -> const DrEstimate& {
    auto it = cache.find({level, group});
    if (it == cache.end()) {
      it = cache.emplace(std::make_pair(level, group), dr_counterfactual_mean(data.sample, nuisance.fits, level, group))
               .first;
    }
    return it->second;
  };
  for (const auto& e : cfg.estimands) {
    const DrEstimate& est = estimate(e.level, e.group);
    estimates.push_back(estimate_json(est));
    if (est.clipping_warning) {
      sel.warnings.push_back("propensity clipping affects " + format_double(est.clipped_share) +
                             " of level-" + std::to_string(e.level) + " units");
    }
    est_csv.add_row({"mean", std::to_string(e.level), "", std::to_string(e.group), format_double(est.theta),
                     format_double(est.sigma), format_double(est.ci95.lower), format_double(est.ci95.upper)});
  }
  results["estimates"] = estimates;

  json effects = json::array();
  for (const auto& e : cfg.effects) {
    const DrEstimate te = treatment_effect(estimate(e.level_a, e.group), estimate(e.level_b, e.group));
    json j = estimate_json(te);
    j.erase("level");
    j["level_a"] = e.level_a;
    j["level_b"] = e.level_b;
    effects.push_back(j);
    est_csv.add_row({"effect", std::to_string(e.level_a), std::to_string(e.level_b), std::to_string(e.group),
                     format_double(te.theta), format_double(te.sigma), format_double(te.ci95.lower),
                     format_double(te.ci95.upper)});
  }
  results["effects"] = effects;

  if (!processes.empty()) {
    const std::vector<double> tau = cfg.cdf_tau.empty() ? default_tau_grid(data.sample, cfg.cdf_points) : cfg.cdf_tau;
    const OutcomeRefit refit = make_outcome_refit(extraction, cfg.nuisance);
    std::map<std::pair<int, int>, CdfProcess> cdfs;
    auto process = [&](const Estimand& e) -> const CdfProcess& {
      auto it = cdfs.find({e.level, e.group});
      if (it == cdfs.end()) {
        CdfProcess p = counterfactual_cdf(data.sample, nuisance.fits, refit, e.level, e.group, tau, cfg.threads);
        const auto draws = multiplier_bootstrap(p.influence, cfg.boot_draws, cfg.multiplier,
                                                derive_seed(cfg.boot_seed, cdfs.size()));
        attach_uniform_band(p, draws);
        it = cdfs.emplace(std::make_pair(e.level, e.group), std::move(p)).first;
      }
      return it->second;
    };
    json cdf_json = json::array();
    for (const auto& e : cfg.cdfs) {
      const CdfProcess& p = process(e);
      cdf_json.push_back({{"level", p.level},
                          {"group", p.group},
                          {"tau", vec_json(p.tau)},
                          {"theta", vec_json(p.theta)},
                          {"band_lower", vec_json(p.band_lower)},
                          {"band_upper", vec_json(p.band_upper)}});
      out.add("cdf_" + std::to_string(p.level) + "_" + std::to_string(p.group) + ".csv", cdf_csv(p));
    }
    results["cdfs"] = cdf_json;
    json tests = json::array();
    std::uint64_t stream = 0;
    for (const auto& [a, b] : cfg.sd_tests) {
      const CdfProcess& pa = process(a);
      const CdfProcess& pb = process(b);
      const auto test =
          sd_test(pa, pb, cfg.boot_draws, derive_seed(cfg.boot_seed, 1000003 + stream++), cfg.multiplier);
      tests.push_back({{"a", {{"level", a.level}, {"group", a.group}}},
                       {"b", {{"level", b.level}, {"group", b.group}}},
                       {"statistic", num(test.statistic)},
                       {"critical_value", num(test.critical_value)},
                       {"reject", test.reject}});
    }
    results["sd_tests"] = tests;
  }

  results["warnings"] = sel.warnings;
  for (const auto& w : sel.warnings) std::cerr << "warning: " << w << "\n";
  out.add("estimates.csv", est_csv.str());
  if (cfg.write_fits) {
    out.add("outcome_fits.csv", fit_dump_csv(nuisance.outcome_records, "outcome"));
    out.add("propensity_fits.csv", fit_dump_csv(nuisance.propensity_records, "propensity"));
  }
  out.add("results.json", results.dump(2) + "\n");
}

void cmd_tune(const RunConfig& cfg, OutputDir& out) {
  const Dataset data = load(cfg);
  if (literal_k(cfg.k_spec, data.panel.units())) config_error("tune needs 'k' with rule cv or dpi");
  Selected sel = select_tuning(cfg, data);
  json results{{"d_lambda", sel.d_lambda}, {"d_lambda_selection", sel.d_lambda_info}};
  results["tuning"] = tuning_json(*sel.tuning);
  results["warnings"] = sel.warnings;
  for (const auto& w : sel.warnings) std::cerr << "warning: " << w << "\n";
  out.add("criterion_curve.csv", criterion_curve_csv(*sel.tuning));
  out.add("tuning.json", results.dump(2) + "\n");
}

void cmd_diagnose(const RunConfig& cfg, OutputDir& out) {
  const Dataset data = load(cfg);
  const Index n = data.panel.units();
  ExtractionConfig ex_cfg = cfg.extraction;
  ex_cfg.k = pilot_k(cfg, n);
  ex_cfg.d_lambda = 0;
  Extraction ex = extract_latent(data.panel, ex_cfg);
  const MatchingDiagnostics md = matching_diagnostics(ex.neighborhoods, ex.distances, data.sample.s());
  out.add("matching_table.csv", matching_table_csv(md));

  const Index rank_bound = std::min<Index>(ex.pca_rows.rows(), ex_cfg.k);
  const Index q = std::min<Index>(value_or<Index>(cfg.diagnose, "q", 10), rank_bound);
  std::vector<Index> units = value_or<std::vector<Index>>(cfg.diagnose, "units", {});
  if (units.empty()) {
    const Index probe = std::min<Index>(n, 500);
    for (Index r = 0; r < probe; ++r) units.push_back(r * n / probe);
  }
  for (Index u : units) {
    if (u < 0 || u >= n) throw DataError("diagnose unit " + std::to_string(u) + " out of range");
  }
  const EigenDiagnostics diag = eigen_diagnostics(ex.pca_rows, ex.neighborhoods, units, q);
  out.add("scree.csv", scree_csv(diag));

  json results{{"k", ex_cfg.k}, {"q", q}};
  results["matching"] = {{"pair_std", num(md.pair_std)},
                         {"degenerate_std", md.degenerate_std},
                         {"median_normalized_radius", num(md.overall.median)},
                         {"max_normalized_radius", num(md.overall.max)}};
  results["mean_spectrum"] = vec_json(diag.mean_spectrum());
  if (q >= 3) {
    const double thr = value_or<double>(cfg.diagnose, "ratio_threshold", 5.0);
    const auto latent = estimate_num_latent(diag, thr);
    results["d_alpha_estimate"] = latent.d_alpha ? json(*latent.d_alpha) : json();
    const int m = value_or<int>(cfg.diagnose, "m", 2);
    const int d_alpha = latent.d_alpha ? static_cast<int>(*latent.d_alpha) : 1;
    results["d_lambda_fixed_order"] = select_num_factors(FixedOrder{d_alpha, m}, rank_bound).d_lambda;
    results["d_lambda_bias_minimizing"] = select_num_factors(BiasMinimizing{thr}, diag, rank_bound).d_lambda;
  }
  out.add("diagnostics.json", results.dump(2) + "\n");
}

EstimatorConfig parse_mc_estimator(const json& run) {
  const std::string backend = value_or<std::string>(run, "backend", "local_linear");
  McBackend kind;
  if (backend == "local_linear") {
    kind = McBackend::local_linear;
  } else if (backend == "local_constant") {
    kind = McBackend::local_constant;
  } else if (backend == "oracle") {
    kind = McBackend::oracle;
  } else {
    config_error("unknown simulation backend '" + backend + "'");
  }
  EstimatorConfig est = default_estimator_config(kind);
  est.label = value_or<std::string>(run, "label", est.label);
  est.d_lambda = value_or<Index>(run, "d_lambda", est.d_lambda);
  if (run.contains("split")) est.split = parse_split(run.at("split").get<std::string>());
  if (run.contains("propensity")) est.propensity = parse_propensity(run.at("propensity").get<std::string>());
  if (run.contains("metric")) est.metric.kind = parse_metric(run.at("metric").get<std::string>());
  est.p_clip = value_or<double>(run, "clip", est.p_clip);
  if (run.contains("k")) {
    const json& k = run.at("k");
    if (k.is_number_integer()) {
      est.k = {KRule::Kind::fixed, k.get<Index>(), 1.0, 0.0};
    } else {
      const std::string rule = value_or<std::string>(k, "rule", "power");
      est.k.constant = value_or<double>(k, "constant", rule == "dpi" ? 1.5 : 1.0);
      est.k.exponent = value_or<double>(k, "exponent", est.k.exponent);
      if (rule == "power") {
        est.k.kind = KRule::Kind::power;
      } else if (rule == "dpi") {
        est.k.kind = KRule::Kind::dpi;
        est.dpi.d_alpha = value_or<int>(k, "d_alpha", est.dpi.d_alpha);
        est.dpi.m = value_or<int>(k, "m", est.dpi.m);
      } else {
        config_error("unknown simulation K rule '" + rule + "'");
      }
    }
  }
  return est;
}

void cmd_simulate(const RunConfig& cfg, const Flags& flags, OutputDir& out) {
  if (!cfg.simulate.contains("runs") || !cfg.simulate.at("runs").is_array() || cfg.simulate.at("runs").empty()) {
    config_error("simulate.runs must be a non-empty array");
  }
  std::vector<McReport> reports;
  json runs = json::array();
  for (const auto& run : cfg.simulate.at("runs")) {
    DgpSpec spec;
    const std::string model = value_or<std::string>(run, "model", "model1");
    if (model == "model1") {
      spec.model = DgpModel::model1;
    } else if (model == "model2") {
      spec.model = DgpModel::model2;
    } else {
      config_error("unknown model '" + model + "'");
    }
    spec.n = value_or<Index>(run, "n", 500);
    spec.periods = value_or<Index>(run, "T", spec.n);
    const Index reps = value_or<Index>(run, "reps", 100);
    const std::uint64_t seed = flags.seed_override ? *flags.seed_override : value_or<std::uint64_t>(run, "seed", 0);
    const EstimatorConfig est = parse_mc_estimator(run);
    McReport rep = run_monte_carlo(spec, est, reps, seed, cfg.threads);
    for (const auto& msg : rep.failure_messages) std::cerr << "warning: " << msg << "\n";
    runs.push_back({{"model", model},
                    {"backend", backend_name(est.backend)},
                    {"label", est.label},
                    {"k_rule", k_rule_name(est.k)},
                    {"n", spec.n},
                    {"T", spec.periods},
                    {"seed", seed},
                    {"reps", reps},
                    {"failures", rep.failures},
                    {"truth", num(rep.truth)},
                    {"bias", num(rep.bias)},
                    {"sd", num(rep.sd)},
                    {"rmse", num(rep.rmse)},
                    {"cr", num(rep.cr)},
                    {"al", num(rep.al)},
                    {"mean_k", num(rep.mean_k)}});
    reports.push_back(std::move(rep));
  }
  out.add("mc_table.csv", mc_table_csv(reports));
  out.add("simulation.json", json{{"runs", runs}}.dump(2) + "\n");
}

int dispatch(const std::string& command, const Flags& flags) {
  std::ifstream in(flags.config);
  if (!in) throw DataError("cannot open config file '" + flags.config + "'");
  json root;
  try {
    root = json::parse(in);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("config parse error: ") + e.what());
  }
  const RunConfig cfg = parse_config(root, fs::path(flags.config).parent_path(), flags);
  OutputDir out(flags.out.empty() ? default_out_dir(command) : fs::path(flags.out));
  if (command == "estimate") {
    cmd_estimate(cfg, out);
  } else if (command == "tune") {
    cmd_tune(cfg, out);
  } else if (command == "diagnose") {
    cmd_diagnose(cfg, out);
  } else {
    cmd_simulate(cfg, flags, out);
  }
  out.commit();
  std::cout << "wrote " << out.target().string() << "\n";
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"Causal inference with latent confounders measured through a panel"};
  app.require_subcommand(1);
  Flags flags;
  std::uint64_t seed = 0;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", flags.config, "JSON run configuration")->required()->check(CLI::ExistingFile);
    sub->add_option("--out", flags.out, "output directory (default: timestamped directory)");
    sub->add_option("--threads", flags.threads, "worker threads (default: LPSA_THREADS, else all cores)")
        ->check(CLI::Range(1, 4096));
    sub->add_option("--seed-override", seed, "replace every seed in the config");
  };
  std::vector<CLI::App*> subs{app.add_subcommand("estimate", "point estimates, effects, distributions and tests"),
                              app.add_subcommand("tune", "select K by cross-validation or direct plug-in"),
                              app.add_subcommand("diagnose", "matching quality table and eigenvalue scree"),
                              app.add_subcommand("simulate", "Monte Carlo harness")};
  for (auto* sub : subs) add_common(sub);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitDataError;
  }
  std::string command;
  for (auto* sub : subs) {
    if (sub->parsed()) {
      command = sub->get_name();
      if (sub->count("--seed-override") > 0) flags.seed_override = seed;
    }
  }
  if (flags.threads == 0) {
    if (const char* env = std::getenv("LPSA_THREADS")) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      if (end == env || *end != '\0' || v < 1 || v > 4096) {
        std::cerr << "error: LPSA_THREADS must be an integer in [1, 4096], got '" << env << "'\n";
        return kExitDataError;
      }
      flags.threads = static_cast<int>(v);
    }
  }
  try {
    return dispatch(command, flags);
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitDataError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return kExitNumericalError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

int run(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size());
  for (const auto& a : args) argv.push_back(a.c_str());
  return run(static_cast<int>(argv.size()), argv.data());
}

}  // namespace lpsa::cli
