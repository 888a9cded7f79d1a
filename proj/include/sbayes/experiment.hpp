#ifndef SBAYES_EXPERIMENT_HPP
#define SBAYES_EXPERIMENT_HPP

#include "sbayes/adapt.hpp"
#include "sbayes/coreset.hpp"
#include "sbayes/diagnostics.hpp"
#include "sbayes/distributed.hpp"
#include "sbayes/flow.hpp"
#include "sbayes/io.hpp"
#include "sbayes/mcmc.hpp"
#include "sbayes/model.hpp"
#include "sbayes/varinf.hpp"

#include <chrono>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace sbayes {

/// JSON object view that records which keys were read, so unknown keys can be rejected.
class ConfigSection {
 public:
  ConfigSection(const Json& j, std::string path) : j_(&j), path_(std::move(path)) {
    if (!j.is_object()) throw ConfigError(where() + " must be a JSON object");
  }

  bool has(const std::string& key) const {
    used_->insert(key);
    return j_->contains(key);
  }

  template <class T>
  T get(const std::string& key) const {
    if (!has(key)) throw ConfigError(where() + ": missing required key '" + key + "'");
    return convert<T>(key);
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    return has(key) ? convert<T>(key) : fallback;
  }

  ConfigSection sub(const std::string& key) const {
    if (!has(key)) throw ConfigError(where() + ": missing required section '" + key + "'");
    return ConfigSection(j_->at(key), path_ + "." + key);
  }

  std::optional<ConfigSection> maybe_sub(const std::string& key) const {
    if (!has(key)) return std::nullopt;
    return ConfigSection(j_->at(key), path_ + "." + key);
  }

  const Json& raw(const std::string& key) const {
    if (!has(key)) throw ConfigError(where() + ": missing required key '" + key + "'");
    return j_->at(key);
  }

  /// Throws on keys that were never read.
  void finish() const {
    for (auto it = j_->begin(); it != j_->end(); ++it)
      if (!used_->count(it.key())) throw ConfigError(where() + ": unknown key '" + it.key() + "'");
  }

  const std::string& path() const { return path_; }

 private:
  std::string where() const { return "config " + path_; }

  template <class T>
  T convert(const std::string& key) const {
    try {
      return j_->at(key).get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(where() + ": key '" + key + "' has the wrong type");
    }
  }

  const Json* j_;
  std::string path_;
  std::shared_ptr<std::set<std::string>> used_ = std::make_shared<std::set<std::string>>();
};

struct ExperimentConfig {
  Json doc;
  fs::path base_dir = ".";  ///< relative data/checkpoint paths resolve against this
  std::string engine;
  std::uint64_t seed = 0;
  int threads = 1;
};

inline const std::set<std::string>& experiment_engines() {
  static const std::set<std::string> e{"sample", "adapt", "coreset", "distribute", "vb", "diagnose"};
  return e;
}

inline ExperimentConfig make_experiment_config(Json doc, const fs::path& base_dir = ".") {
  ExperimentConfig cfg;
  cfg.doc = std::move(doc);
  const ConfigSection root(cfg.doc, "root");
  cfg.engine = root.get<std::string>("engine");
  if (!experiment_engines().count(cfg.engine)) throw ConfigError("unknown engine '" + cfg.engine + "'");
  if (!cfg.doc.contains("seed")) throw ConfigError("config root: every experiment needs an explicit 'seed'");
  cfg.seed = root.get<std::uint64_t>("seed");
  cfg.threads = root.get<int>("threads", 1);
  if (cfg.threads < 1) throw ConfigError("threads must be at least 1");
  cfg.base_dir = base_dir;
  return cfg;
}

inline Json parse_config_json(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
}

inline ExperimentConfig parse_experiment_config(const std::string& text, const fs::path& base_dir = ".") {
  return make_experiment_config(parse_config_json(text), base_dir);
}

inline ExperimentConfig load_experiment_config(const fs::path& path) {
  return parse_experiment_config(read_text(path), path.has_parent_path() ? path.parent_path() : fs::path("."));
}

/// Structured error record for failed runs.
inline Json error_record(const std::exception& e) {
  std::string kind = "Error";
  if (dynamic_cast<const ConfigError*>(&e)) kind = "ConfigError";
  else if (dynamic_cast<const InputError*>(&e)) kind = "InputError";
  else if (dynamic_cast<const UnsupportedModelError*>(&e)) kind = "UnsupportedModelError";
  else if (dynamic_cast<const NumericError*>(&e)) kind = "NumericError";
  return Json{{"error", {{"type", kind}, {"message", e.what()}}}};
}

namespace detail {

inline Json to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector vector_from(const Json& j, const std::string& what) {
  try {
    const auto v = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
  } catch (const Json::exception&) {
    throw ConfigError(what + " must be an array of numbers");
  }
}

inline std::string csv_of(const Matrix& m, const std::string& prefix = "x") {
  std::ostringstream s;
  write_matrix_csv(s, m, prefix);
  return s.str();
}

inline std::string csv_column(const std::vector<double>& v, const std::string& name) {
  std::ostringstream s;
  s << name << '\n';
  for (double x : v) s << format_double(x) << '\n';
  return s.str();
}

// ---------------------------------------------------------------- models

inline Dataset load_data(const ConfigSection& s, const fs::path& base, bool labels_needed,
                         const std::function<Dataset(const ConfigSection&, Rng&)>& synth) {
  if (s.has("data")) {
    const fs::path p = base / s.get<std::string>("data");
    Dataset d = read_dataset_csv(p.string());
    if (labels_needed && !d.has_labels()) throw ConfigError("data file " + p.string() + " needs a 'y' column");
    return d;
  }
  const ConfigSection syn = s.sub("synthetic");
  Rng rng(syn.get<std::uint64_t>("seed"));
  Dataset d = synth(syn, rng);
  syn.finish();
  return d;
}

inline Dataset synthetic_location(const ConfigSection& s, Rng& rng) {
  const auto n = s.get<Eigen::Index>("n");
  const Vector mean = vector_from(s.raw("mean"), "synthetic.mean");
  const double sd = s.get<double>("sd", 1.0);
  require(n >= 1, "synthetic n must be positive");
  Matrix y(n, mean.size());
  for (Eigen::Index i = 0; i < n; ++i) y.row(i) = (mean + sd * standard_normal_vector(mean.size(), rng)).transpose();
  return Dataset(y);
}

inline Dataset synthetic_regression(const ConfigSection& s, Rng& rng, bool logistic) {
  const auto n = s.get<Eigen::Index>("n");
  const Vector coef = vector_from(s.raw("coef"), "synthetic.coef");
  const double noise = logistic ? 0.0 : s.get<double>("noise_sd", 1.0);
  require(n >= 1, "synthetic n must be positive");
  Matrix x(n, coef.size());
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x.row(i) = standard_normal_vector(coef.size(), rng).transpose();
    const double eta = x.row(i).dot(coef);
    y[i] = logistic ? (uniform01(rng) < sigmoid(eta) ? 1.0 : 0.0) : eta + noise * standard_normal_vector(1, rng)[0];
  }
  return Dataset(x, y);
}

inline Dataset synthetic_polynomial(const ConfigSection& s, Rng& rng) {
  const auto n = s.get<Eigen::Index>("n");
  const Vector coef = vector_from(s.raw("coef"), "synthetic.coef");
  const double noise = s.get<double>("noise_sd", 1.0);
  Matrix x(n, 1);
  Vector y(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    x(i, 0) = 2 * uniform01(rng) - 1;
    double p = 1, v = 0;
    for (Eigen::Index j = 0; j < coef.size(); ++j, p *= x(i, 0)) v += coef[j] * p;
    y[i] = v + noise * standard_normal_vector(1, rng)[0];
  }
  return Dataset(x, y);
}

/// Either a Bayesian data model or a fixed density.
struct BuiltModel {
  std::optional<BayesModel> bayes;
  std::optional<NormalGammaModel> normal_gamma;
  TargetModel target;
  std::optional<GaussianPosterior> exact;
};

inline BuiltModel build_model(const ConfigSection& s, const fs::path& base) {
  const auto type = s.get<std::string>("type");
  BuiltModel b;
  auto with_bayes = [&](BayesModel m) {
    b.target = posterior_target(m);
    if (m.is_conjugate()) b.exact = conjugate_posterior(m);
    b.bayes = std::move(m);
  };
  if (type == "standard_normal") {
    b.target = make_standard_normal_target(s.get<Eigen::Index>("dim"));
    b.exact = GaussianPosterior(Vector::Zero(b.target.dim), Matrix::Identity(b.target.dim, b.target.dim));
  } else if (type == "gaussian_mixture") {
    std::vector<Vector> means;
    for (const auto& mj : s.raw("means")) means.push_back(vector_from(mj, "model.means"));
    b.target = make_gaussian_mixture_target(means, vector_from(s.raw("weights"), "model.weights"), s.get<double>("scale", 1.0));
  } else if (type == "gaussian_location") {
    const Dataset d = load_data(s, base, false, synthetic_location);
    with_bayes(make_gaussian_location(d.obs_dim(), d));
  } else if (type == "linear_regression") {
    const Dataset d = load_data(s, base, true, [](const ConfigSection& c, Rng& r) { return synthetic_regression(c, r, false); });
    with_bayes(make_linear_regression(d, s.get<double>("noise_sd"), s.get<double>("prior_scale", 1.0)));
  } else if (type == "logistic_regression") {
    const Dataset d = load_data(s, base, true, [](const ConfigSection& c, Rng& r) { return synthetic_regression(c, r, true); });
    with_bayes(make_logistic_regression(d, s.get<double>("prior_scale", 1.0)));
  } else if (type == "normal_gamma") {
    const Dataset d = load_data(s, base, false, synthetic_location);
    b.normal_gamma = NormalGammaModel(d, s.get<double>("mu0", 0.0), s.get<double>("lambda0", 1.0), s.get<double>("a0", 1.0),
                                      s.get<double>("b0", 1.0));
  } else {
    throw ConfigError("unknown model type '" + type + "'");
  }
  s.finish();
  return b;
}

inline const BayesModel& need_bayes(const BuiltModel& b, const std::string& engine) {
  if (!b.bayes) throw ConfigError(engine + " needs a data model (gaussian_location, linear_regression or logistic_regression)");
  return *b.bayes;
}

inline const TargetModel& need_target(const BuiltModel& b, const std::string& engine) {
  if (!b.target.potential) throw ConfigError(engine + " cannot sample a normal_gamma model; use the vb engine");
  return b.target;
}

// ---------------------------------------------------------------- kernels

inline ComposedFlow fresh_flow(const ConfigSection& s, Eigen::Index dim, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x666c6f77ULL));
  return ComposedFlow::identity_random_directions(dim, s.get<std::size_t>("layers", 8), s.get<double>("init_scale", 0.1), rng);
}

inline ComposedFlow flow_from(const ConfigSection& s, const fs::path& base, Eigen::Index dim, std::uint64_t seed) {
  if (s.has("checkpoint")) {
    ComposedFlow f = load_flow((base / s.get<std::string>("checkpoint")).string());
    if (f.dim() != dim) throw ConfigError("flow checkpoint dimension does not match the target");
    return f;
  }
  return fresh_flow(s, dim, seed);
}

inline LocalKernel local_kernel(const ConfigSection& s) {
  const auto type = s.get<std::string>("type");
  LocalKernel k;
  if (type == "mala") k = MalaKernel(s.get<double>("eps"));
  else if (type == "hmc") k = HmcKernel(s.get<double>("eps"), s.get<int>("n_leapfrog", 10));
  else throw ConfigError("local kernel must be mala or hmc, got '" + type + "'");
  s.finish();
  return k;
}

inline AnyKernel build_kernel(const ConfigSection& s, const fs::path& base, Eigen::Index dim, std::uint64_t seed) {
  const auto type = s.get<std::string>("type");
  AnyKernel k;
  if (type == "hmc") {
    k = HmcKernel(s.get<double>("eps"), s.get<int>("n_leapfrog", 10));
  } else if (type == "mala") {
    k = MalaKernel(s.get<double>("eps"));
  } else if (type == "independent_flow") {
    k = IndependentFlowKernel{flow_from(s, base, dim, seed)};
  } else if (type == "mixture") {
    const LocalKernel local = local_kernel(s.sub("local"));
    k = MixtureKernel(local, IndependentFlowKernel{flow_from(s, base, dim, seed)}, s.get<int>("r", 10));
  } else if (type == "augmented_hmc") {
    k = AugmentedHmcKernel::zero(HmcKernel(s.get<double>("eps"), s.get<int>("n_leapfrog", 10)), dim);
  } else if (type == "involutive_flow") {
    Rng rng(derive_seed(seed, 0x696e76ULL));
    const auto noise = s.get<Eigen::Index>("noise_dim", dim);
    k = InvolutiveFlowKernel(make_shear_flow(dim, noise, s.get<std::size_t>("layers", 4), s.get<double>("scale", 0.5), rng),
                             dim, derive_seed(seed, 0x70726fULL));
  } else {
    throw ConfigError("unknown kernel type '" + type + "'");
  }
  s.finish();
  return k;
}

inline TunedHmcConfig hmc_config(const std::optional<ConfigSection>& s, TunedHmcConfig d) {
  if (!s) return d;
  d.initial_eps = s->get<double>("initial_eps", d.initial_eps);
  d.n_leapfrog = s->get<int>("n_leapfrog", d.n_leapfrog);
  d.n_warmup = s->get<int>("n_warmup", d.n_warmup);
  d.n_samples = s->get<int>("n_samples", d.n_samples);
  s->finish();
  if (!(d.initial_eps > 0) || d.n_leapfrog < 1 || d.n_warmup < 0 || d.n_samples < 1)
    throw ConfigError("invalid hmc settings");
  return d;
}

inline StepSchedule schedule_from(const std::optional<ConfigSection>& s, StepSchedule d) {
  if (!s) return d;
  d.a = s->get<double>("a", d.a);
  d.b = s->get<double>("b", d.b);
  d.gamma = s->get<double>("gamma", d.gamma);
  s->finish();
  return d;
}

// ---------------------------------------------------------------- diagnostics

inline Json opt(const std::optional<double>& v) { return v ? Json(*v) : Json(nullptr); }

/// Per-chain summary over draws after `burn_in`.
inline Json chain_summary(const Chain& c, Eigen::Index burn_in) {
  const Eigen::Index keep = std::max<Eigen::Index>(0, c.draws.rows() - burn_in);
  const Matrix d = c.draws.bottomRows(keep);
  Json j;
  j["n_steps"] = c.draws.rows();
  j["n_kept"] = keep;
  j["acceptance_rate"] = c.acceptance_rate();
  j["divergences"] = c.divergences();
  if (keep >= 100) {
    const auto ess = effective_sample_sizes(d);
    j["ess"] = ess ? to_json(*ess) : Json(nullptr);
    j["ess_min"] = ess ? Json(ess->minCoeff()) : Json(nullptr);
  } else {
    j["ess"] = nullptr;
    j["ess_min"] = nullptr;
  }
  j["lag1_autocorrelation"] = keep >= 2 ? opt(autocorrelation(d, 1)) : Json(nullptr);
  j["esjd"] = keep >= 2 ? Json(esjd(d)) : Json(nullptr);
  if (keep >= 2) {
    const Vector mean = d.colwise().mean();
    j["mean"] = to_json(mean);
    j["var"] = to_json(((d.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(keep - 1)).matrix().transpose());
  }
  return j;
}

inline Json aggregate_summary(const std::vector<Chain>& chains, Eigen::Index burn_in) {
  Json a;
  a["n_chains"] = chains.size();
  if (chains.size() >= 2) {
    std::vector<Matrix> kept;
    for (const auto& c : chains) kept.push_back(c.draws.bottomRows(std::max<Eigen::Index>(0, c.draws.rows() - burn_in)));
    bool equal = kept.front().rows() >= 2;
    for (const auto& k : kept) equal = equal && k.rows() == kept.front().rows();
    if (equal) {
      const GelmanRubin gr = gelman_rubin(kept);
      a["rhat"] = std::isfinite(gr.rhat) ? Json(gr.rhat) : Json(nullptr);
      a["rhat_degenerate"] = gr.degenerate;
      if (gr.degenerate) a["rhat_note"] = gr.reason;
    } else {
      a["rhat"] = nullptr;
      a["rhat_note"] = "chains differ in length";
    }
  }
  return a;
}

inline void write_chains(const AtomicOutputDir& out, const std::vector<Chain>& chains, const std::string& stem) {
  fs::create_directories(out / "chains");
  for (std::size_t c = 0; c < chains.size(); ++c) {
    std::ostringstream js;
    write_chain_jsonl(js, chains[c]);
    write_text(out.path() / "chains" / (stem + std::to_string(c) + ".jsonl"), js.str());
    write_text(out.path() / "chains" / (stem + std::to_string(c) + ".csv"), csv_of(chains[c].draws));
  }
}

inline Json exact_json(const std::optional<GaussianPosterior>& e) {
  if (!e) return nullptr;
  return Json{{"mean", to_json(e->mean())}, {"var", to_json(e->covariance().diagonal())}};
}

inline std::vector<Vector> chain_inits(const ConfigSection& s, int n_chains, Eigen::Index dim, std::uint64_t seed) {
  std::vector<Vector> inits;
  if (s.has("inits")) {
    for (const auto& v : s.raw("inits")) inits.push_back(vector_from(v, "inits"));
    if (static_cast<int>(inits.size()) != n_chains) throw ConfigError("need one init per chain");
    for (const auto& v : inits)
      if (v.size() != dim) throw ConfigError("init dimension does not match the target");
    return inits;
  }
  const double scale = s.get<double>("init_scale", 1.0);
  for (int c = 0; c < n_chains; ++c) {
    Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(c)));
    inits.push_back(scale * standard_normal_vector(dim, rng));
  }
  return inits;
}

// ---------------------------------------------------------------- engines

inline Json run_sample(const ExperimentConfig& cfg, const ConfigSection& root, const AtomicOutputDir& out) {
  const BuiltModel bm = build_model(root.sub("model"), cfg.base_dir);
  const TargetModel& target = need_target(bm, "sample");
  const ConfigSection s = root.sub("sample");
  const int n_chains = s.get<int>("n_chains", 4);
  const auto n_steps = s.get<std::int64_t>("n_steps");
  const auto burn_in = s.get<Eigen::Index>("burn_in", 0);
  if (n_chains < 1 || n_steps < 1 || burn_in < 0) throw ConfigError("sample needs n_chains >= 1, n_steps >= 1, burn_in >= 0");
  const ConfigSection ks = s.sub("kernel");
  const bool tuned = ks.get<std::string>("type") == "tuned_hmc";
  std::optional<AnyKernel> kernel;
  TunedHmcConfig tcfg;
  if (tuned) {
    tcfg.initial_eps = ks.get<double>("initial_eps", 0.1);
    tcfg.n_leapfrog = ks.get<int>("n_leapfrog", 10);
    tcfg.n_warmup = ks.get<int>("n_warmup", 500);
    tcfg.n_samples = 0;
    ks.finish();
  } else {
    kernel = build_kernel(ks, cfg.base_dir, target.dim, cfg.seed);
  }
  const auto inits = chain_inits(s, n_chains, target.dim, cfg.seed);
  s.finish();

  std::vector<Chain> chains(static_cast<std::size_t>(n_chains));
  std::vector<double> eps(chains.size(), 0.0);
  parallel_for(chains.size(), cfg.threads, [&](std::size_t c) {
    const std::uint64_t seed = derive_seed(cfg.seed, c);
    Vector x0 = inits[c];
    AnyKernel k;
    if (tuned) {
      const TunedHmcRun warm = run_tuned_hmc(target, x0, tcfg, derive_seed(seed, 0x77ULL));
      k = HmcKernel(warm.eps, tcfg.n_leapfrog);
      x0 = warm.last;
      eps[c] = warm.eps;
    } else {
      k = *kernel;
    }
    ChainState st = ChainState::start(target, x0, seed);
    chains[c] = run_chain(k, target, st, n_steps);
  });
  write_chains(out, chains, "chain_");
  Json rep;
  for (std::size_t c = 0; c < chains.size(); ++c) {
    Json j = chain_summary(chains[c], burn_in);
    if (tuned) j["tuned_eps"] = eps[c];
    rep["chains"].push_back(j);
  }
  rep["aggregate"] = aggregate_summary(chains, burn_in);
  rep["exact"] = exact_json(bm.exact);
  return rep;
}

inline Json run_adapt(const ExperimentConfig& cfg, const ConfigSection& root, const AtomicOutputDir& out) {
  const BuiltModel bm = build_model(root.sub("model"), cfg.base_dir);
  const TargetModel& target = need_target(bm, "adapt");
  const ConfigSection s = root.sub("adapt");
  const AnyKernel initial = build_kernel(s.sub("kernel"), cfg.base_dir, target.dim, cfg.seed);
  const ConfigSection ls = s.sub("loss");
  const auto loss_type = ls.get<std::string>("type");
  LossSpec loss;
  if (loss_type == "forward_kl") loss = LossSpec::forward_kl();
  else if (loss_type == "esjd") loss = LossSpec::esjd(ls.get<double>("lambda", 1.0));
  else throw ConfigError("loss type must be forward_kl or esjd");
  ls.finish();
  AdaptConfig ac;
  ac.steps_per_round = s.get<int>("steps_per_round", ac.steps_per_round);
  ac.learning_rate = s.get<double>("learning_rate", ac.learning_rate);
  ac.batch_size = s.get<int>("batch_size", ac.batch_size);
  ac.fd_step = s.get<double>("fd_step", ac.fd_step);
  ac.buffer_capacity = s.get<std::size_t>("buffer_capacity", ac.buffer_capacity);
  ac.seed = cfg.seed;
  if (s.has("inits"))
    for (const auto& v : s.raw("inits")) ac.inits.push_back(vector_from(v, "adapt.inits"));
  const int n_rounds = s.get<int>("n_rounds");
  const auto post_steps = s.get<std::int64_t>("post_steps", 0);
  s.finish();

  const AdaptResult r = adapt(initial, target, loss, n_rounds, ac);
  write_chains(out, r.chains, "adapt_chain_");
  write_text(out / "loss_trace.csv", csv_column(r.loss_trace, "loss"));
  const Vector p = kernel_params(r.kernel);
  write_text(out / "kernel_params.csv", csv_column(std::vector<double>(p.data(), p.data() + p.size()), "param"));
  if (const ComposedFlow* f = density_flow(r.kernel)) save_flow((out / "flow.bin").string(), *f);

  std::vector<Chain> post;
  if (post_steps > 0) {
    std::vector<Vector> inits = ac.inits.empty() ? std::vector<Vector>{Vector::Zero(target.dim)} : ac.inits;
    post.resize(inits.size());
    parallel_for(inits.size(), cfg.threads, [&](std::size_t c) {
      ChainState st = ChainState::start(target, inits[c], derive_seed(cfg.seed, 0x706f7374ULL + c));
      post[c] = run_chain(r.kernel, target, st, post_steps);
    });
    write_chains(out, post, "post_chain_");
  }
  Json rep;
  rep["loss_first"] = r.loss_trace.empty() ? Json(nullptr) : Json(r.loss_trace.front());
  rep["loss_last"] = r.loss_trace.empty() ? Json(nullptr) : Json(r.loss_trace.back());
  rep["n_params"] = p.size();
  for (const auto& c : r.chains) rep["chains"].push_back(chain_summary(c, 0));
  for (const auto& c : post) rep["post_chains"].push_back(chain_summary(c, 0));
  rep["aggregate"] = aggregate_summary(post.empty() ? r.chains : post, 0);
  return rep;
}

inline Json run_coreset(const ExperimentConfig& cfg, const ConfigSection& root, const AtomicOutputDir& out) {
  const BuiltModel bm = build_model(root.sub("model"), cfg.base_dir);
  const BayesModel& m = need_bayes(bm, "coreset");
  const ConfigSection s = root.sub("coreset");
  const auto builder = s.get<std::string>("builder");
  CoresetBuildConfig cc;
  cc.budget = s.get<Eigen::Index>("M");
  cc.n_draws = s.get<int>("n_draws", cc.n_draws);
  cc.n_opt_steps = s.get<int>("n_opt_steps", cc.n_opt_steps);
  cc.step_size = s.get<double>("step_size", cc.step_size);
  const auto optim = s.get<std::string>("optimizer", "quasi_newton");
  if (optim == "quasi_newton") cc.optimizer = CoresetBuildConfig::Optimizer::kQuasiNewton;
  else if (optim == "first_order") cc.optimizer = CoresetBuildConfig::Optimizer::kFirstOrder;
  else throw ConfigError("optimizer must be quasi_newton or first_order");
  cc.hmc = hmc_config(s.maybe_sub("hmc"), cc.hmc);
  cc.seed = derive_seed(cfg.seed, 2);
  const auto support_from = s.get<std::string>("support", "uniform");
  s.finish();

  auto reference_draws = [&] {
    return run_tuned_hmc(posterior_target(m), Vector::Zero(m.dim()), cc.hmc, derive_seed(cfg.seed, 1)).draws;
  };
  Json rep;
  CoresetWeights w;
  if (builder == "uniform") {
    w = uniform_coreset(m, cc.budget, derive_seed(cfg.seed, 0));
  } else if (builder == "sparse_regression") {
    const auto r = sparse_regression_coreset(m, cc.budget, reference_draws());
    w = r.weights;
    rep["residual"] = r.residual;
  } else if (builder == "optimized") {
    CoresetWeights start;
    if (support_from == "uniform") start = uniform_coreset(m, cc.budget, derive_seed(cfg.seed, 0));
    else if (support_from == "sparse_regression") start = sparse_regression_coreset(m, cc.budget, reference_draws()).weights;
    else throw ConfigError("support must be uniform or sparse_regression");
    const auto r = optimize_weights(m, start.support(), cc, start.w);
    w = r.weights;
    write_text(out / "grad_norm_trace.csv", csv_column(r.grad_norm_trace, "grad_norm"));
    if (!r.exact_kl_trace.empty()) write_text(out / "exact_kl_trace.csv", csv_column(r.exact_kl_trace, "kl"));
    rep["hmc_divergences"] = r.hmc_divergences;
  } else {
    throw ConfigError("builder must be uniform, sparse_regression or optimized");
  }
  const std::string hash = model_hash(m);
  std::ostringstream cs;
  write_coreset_csv(cs, w, hash);
  write_text(out / "coreset.csv", cs.str());
  rep["N"] = m.n_obs();
  rep["M"] = w.size();
  rep["model_hash"] = hash;
  rep["weight_sum"] = w.w.sum();
  if (m.is_conjugate()) rep["exact_kl"] = exact_gaussian_coreset_kl(m, w.w);
  return rep;
}

inline Json combined_summary(const Matrix& d, const std::optional<GaussianPosterior>& exact) {
  Json j;
  const Vector mean = d.colwise().mean();
  j["mean"] = to_json(mean);
  j["var"] = to_json(((d.rowwise() - mean.transpose()).array().square().colwise().sum() / static_cast<double>(d.rows() - 1))
                         .matrix()
                         .transpose());
  j["exact"] = exact_json(exact);
  return j;
}

inline Json run_distribute(const ExperimentConfig& cfg, const ConfigSection& root, const AtomicOutputDir& out) {
  const BuiltModel bm = build_model(root.sub("model"), cfg.base_dir);
  const BayesModel& m = need_bayes(bm, "distribute");
  const ConfigSection s = root.sub("distribute");
  const auto method = s.get<std::string>("method", "combine");
  const int k = s.get<int>("K");
  const auto shards = partition(m.data(), k, s.get<std::uint64_t>("partition_seed", derive_seed(cfg.seed, 7)));
  Json rep;
  rep["method"] = method;
  rep["K"] = k;

  if (method == "combine") {
    const SubsetMode mode = parse_subset_mode(s.get<std::string>("mode", "tempered_prior"));
    const auto combiner = s.get<std::string>("combiner", "consensus");
    const TunedHmcConfig hc = hmc_config(s.maybe_sub("hmc"), {0.1, 10, 500, 2000, 0.6, 0.8});
    const int grid = s.get<int>("alpha_grid", 1000);
    s.finish();
    std::vector<std::uint64_t> seeds;
    for (int j = 0; j < k; ++j) seeds.push_back(derive_seed(cfg.seed, 100 + static_cast<std::uint64_t>(j)));
    const WorkerDraws wd = run_subset_chains(m, shards, mode, hc, seeds, cfg.threads);
    write_worker_draws(out / "workers", wd);
    rep["mode"] = to_string(mode);
    rep["combiner"] = combiner;
    rep["communication_events"] = k;  // one result upload per worker
    if (combiner == "consensus" || combiner == "recentered_mixture") {
      const Matrix c = combiner == "consensus" ? consensus_gaussian(wd) : recentered_mixture(wd);
      write_text(out / "combined.csv", csv_of(c));
      rep["combined"] = combined_summary(c, bm.exact);
      if (m.dim() == 1 && m.is_conjugate()) {
        const TvBoundReport tv = tv_bound_check(c, m, shards);
        rep["tv_estimate"] = tv.tv_estimate;
        rep["mle_gap"] = tv.mle_gap;
      }
    } else if (combiner == "quantile_average" || combiner == "wasserstein_median") {
      const Vector alpha = uniform_alpha_grid(grid);
      std::ostringstream q;
      q << "alpha,quantile\n";
      Vector quant;
      if (combiner == "quantile_average") {
        quant = quantile_average(wd, alpha);
      } else {
        const WassersteinMedian med = wasserstein_median(wd, alpha);
        quant = med.quantiles;
        rep["subset_weights"] = to_json(med.subset_weights);
        rep["iterations"] = med.iterations;
      }
      for (Eigen::Index i = 0; i < alpha.size(); ++i) q << format_double(alpha[i]) << ',' << format_double(quant[i]) << '\n';
      write_text(out / "combined_quantiles.csv", q.str());
      rep["combined_median"] = quant[alpha.size() / 2];
    } else {
      throw ConfigError("combiner must be consensus, recentered_mixture, quantile_average or wasserstein_median");
    }
  } else if (method == "sgld" || method == "dsgld") {
    const auto batch = s.get<Eigen::Index>("batch_size");
    const StepSchedule sch = schedule_from(s.maybe_sub("schedule"), {});
    const auto steps = s.get<std::int64_t>("n_steps");
    const auto burn = s.get<Eigen::Index>("burn_in", 0);
    Matrix draws;
    if (method == "sgld") {
      s.finish();
      draws = sgld_run(m, {batch, sch, steps, {}}, cfg.seed).draws;
    } else {
      DsgldConfig dc;
      dc.p = s.has("p") ? vector_from(s.raw("p"), "distribute.p") : Vector::Constant(k, 1.0 / k);
      dc.batch_size = batch;
      dc.block_len = s.get<int>("block_len", 10);
      dc.schedule = sch;
      dc.n_steps = steps;
      s.finish();
      const DsgldRun r = dsgld_run(m, shards, dc, cfg.seed);
      draws = r.draws;
      rep["communication_events"] = r.communication_events;
      std::ostringstream v;
      v << "block,subset\n";
      for (std::size_t i = 0; i < r.visits.size(); ++i) v << i << ',' << r.visits[i] << '\n';
      write_text(out / "visits.csv", v.str());
    }
    write_text(out / "draws.csv", csv_of(draws));
    if (burn >= draws.rows() - 1) throw ConfigError("burn_in leaves fewer than 2 draws");
    rep["combined"] = combined_summary(draws.bottomRows(draws.rows() - burn), bm.exact);
  } else if (method == "axda") {
    const double rho = s.get<double>("rho");
    const auto iters = s.get<std::int64_t>("iters");
    const auto burn = s.get<std::int64_t>("burn_in", iters / 10);
    s.finish();
    if (burn >= iters - 1) throw ConfigError("burn_in leaves fewer than 2 draws");
    const AxdaRun r = axda_gibbs(m, shards, rho, iters, cfg.seed);
    write_text(out / "theta.csv", csv_of(r.theta));
    rep["rho"] = rho;
    rep["combined"] = combined_summary(r.theta.bottomRows(iters - burn), bm.exact);
    const GaussianPosterior marg = axda_theta_marginal(m, shards, rho);
    rep["theta_marginal"] = Json{{"mean", to_json(marg.mean())}, {"var", to_json(marg.covariance().diagonal())}};
    if (bm.exact) rep["marginal_kl_to_exact"] = gaussian_kl(marg, *bm.exact);
  } else {
    throw ConfigError("distribute method must be combine, sgld, dsgld or axda");
  }
  return rep;
}

inline VbModel vb_model_of(const BuiltModel& b) {
  if (b.normal_gamma) return *b.normal_gamma;
  if (b.bayes) return *b.bayes;
  throw ConfigError("vb needs a data model");
}

inline Json run_vb(const ExperimentConfig& cfg, const ConfigSection& root, const AtomicOutputDir& out) {
  const ConfigSection s = root.sub("vb");
  const auto method = s.get<std::string>("method", "cavi");
  CaviConfig cc;
  cc.tol = s.get<double>("tol", cc.tol);
  cc.max_sweeps = s.get<int>("max_sweeps", cc.max_sweeps);
  cc.random_order = s.get<bool>("random_order", false);
  cc.seed = derive_seed(cfg.seed, 3);
  Json rep;
  auto state_csv = [](const MeanFieldState& q) {
    std::ostringstream o;
    write_vb_state_csv(o, q);
    return o.str();
  };

  if (method == "adaptive") {
    const ConfigSection ds = s.sub("data");
    const Dataset data = load_data(ds, cfg.base_dir, true, synthetic_polynomial);
    ds.finish();
    const ConfigSection cs = s.sub("collection");
    const auto type = cs.get<std::string>("type");
    if (type != "polynomial") throw ConfigError("collection type must be polynomial");
    const ModelCollection col =
        polynomial_collection(cs.get<int>("max_degree"), cs.get<double>("noise_sd"), cs.get<double>("prior_scale", 1.0));
    cs.finish();
    s.finish();
    root.finish();
    const AdaptiveVbResult r = adaptive_vb(col, data, cc, cfg.threads);
    for (std::size_t i = 0; i < r.fits.size(); ++i) {
      write_text(out / ("fit_" + r.names[i] + ".csv"), state_csv(r.fits[i]));
      rep["models"].push_back(Json{{"name", r.names[i]}, {"alpha", col.members[i].alpha},
                                   {"psi", r.psi[static_cast<Eigen::Index>(i)]}, {"gamma", r.gamma[static_cast<Eigen::Index>(i)]}});
    }
    rep["selected"] = r.names[r.best()];
    return rep;
  }

  const BuiltModel bm = build_model(root.sub("model"), cfg.base_dir);
  const VbModel model = vb_model_of(bm);
  MeanFieldState q;
  if (method == "cavi") {
    s.finish();
    q = cavi_fit(model, prior_state(model), cc);
  } else if (method == "svi") {
    SviConfig sc;
    sc.batch_size = s.get<Eigen::Index>("batch_size", sc.batch_size);
    sc.schedule = schedule_from(s.maybe_sub("schedule"), sc.schedule);
    sc.n_iters = s.get<std::int64_t>("n_iters", sc.n_iters);
    s.finish();
    q = svi_fit(model, sc, derive_seed(cfg.seed, 4));
    rep["projections"] = q.projections;
  } else {
    throw ConfigError("vb method must be cavi, svi or adaptive");
  }
  write_text(out / "fit.csv", state_csv(q));
  write_text(out / "elbo_trace.csv", csv_column(q.elbo_trace, "elbo"));
  rep["elbo"] = q.elbo_trace.empty() ? elbo(model, q) : q.elbo_trace.back();
  rep["sweeps"] = q.elbo_trace.empty() ? std::size_t{0} : q.elbo_trace.size() - 1;
  try {
    rep["log_evidence"] = log_evidence(model);
  } catch (const UnsupportedModelError&) {
    rep["log_evidence"] = nullptr;
  }
  Json factors = Json::array();
  for (const auto& f : q.factors) {
    if (const auto* n = std::get_if<NormalFactor>(&f)) factors.push_back(Json{{"family", "normal"}, {"mean", n->mean}, {"var", n->var}});
    else {
      const auto& g = std::get<GammaFactor>(f);
      factors.push_back(Json{{"family", "gamma"}, {"shape", g.shape}, {"rate", g.rate}});
    }
  }
  rep["factors"] = factors;
  return rep;
}

inline Json run_diagnose(const ExperimentConfig& cfg, const ConfigSection& root, const AtomicOutputDir&) {
  const ConfigSection s = root.sub("diagnose");
  const auto burn = s.get<Eigen::Index>("burn_in", 0);
  std::vector<Chain> chains;
  Json files = Json::array();
  for (const auto& p : s.raw("chains")) {
    const fs::path path = cfg.base_dir / p.get<std::string>();
    std::istringstream in(read_text(path));
    chains.push_back(read_chain_jsonl(in, path.string()));
    files.push_back(path.string());
  }
  s.finish();
  if (chains.empty()) throw ConfigError("diagnose needs at least one chain file");
  Json rep;
  rep["files"] = files;
  for (const auto& c : chains) rep["chains"].push_back(chain_summary(c, burn));
  rep["aggregate"] = aggregate_summary(chains, burn);
  return rep;
}

}  // namespace detail

/// Runs one experiment into `out_dir` (created atomically) and returns the report.
/// report.json holds diagnostics, seeds and timings; every other output is a pure function of the config.
inline Json run_experiment(const ExperimentConfig& cfg, const fs::path& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  const ConfigSection root(cfg.doc, "root");
  root.get<std::string>("engine");
  root.get<std::uint64_t>("seed");
  root.get<int>("threads", 1);
  AtomicOutputDir out(out_dir);
  Json rep;
  if (cfg.engine == "sample") rep = detail::run_sample(cfg, root, out);
  else if (cfg.engine == "adapt") rep = detail::run_adapt(cfg, root, out);
  else if (cfg.engine == "coreset") rep = detail::run_coreset(cfg, root, out);
  else if (cfg.engine == "distribute") rep = detail::run_distribute(cfg, root, out);
  else if (cfg.engine == "vb") rep = detail::run_vb(cfg, root, out);
  else if (cfg.engine == "diagnose") rep = detail::run_diagnose(cfg, root, out);
  else throw ConfigError("unknown engine '" + cfg.engine + "'");
  root.finish();
  rep["engine"] = cfg.engine;
  rep["seed"] = cfg.seed;
  rep["config"] = cfg.doc;
  rep["timings"] = {{"total_seconds", std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()}};
  write_text(out / "report.json", rep.dump(2) + "\n");
  out.commit();
  return rep;
}

}  // namespace sbayes

#endif  // SBAYES_EXPERIMENT_HPP
