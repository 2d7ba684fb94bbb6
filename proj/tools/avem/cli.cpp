#include "cli.hpp"

#include "io.hpp"

#include "avem/error.hpp"
#include "avem/oracles.hpp"

#include <filesystem>
#include <limits>
#include <ostream>
#include <set>
#include <sstream>

#include "CLI11.hpp"

namespace avem::cli {

namespace fs = std::filesystem;

namespace {

const std::set<std::string> kModels{"gaussian", "bernoulli", "localized", "messm"};
const std::set<std::string> kFitMethods{"avem", "qem", "mcem", "pavem"};

std::string join(const std::string& path, const std::string& key) {
  return path.empty() ? key : path + "." + key;
}

void check_keys(const json& obj, const std::string& path, const std::set<std::string>& allowed) {
  if (!obj.is_object())
    throw ConfigError("'" + (path.empty() ? std::string("<root>") : path) + "' must be an object",
                      path);
  for (const auto& [key, value] : obj.items())
    if (!allowed.count(key)) throw ConfigError("unknown key '" + join(path, key) + "'", join(path, key));
}

template <typename T>
void take(const json& obj, const std::string& path, const std::string& key, T& dst) {
  const auto it = obj.find(key);
  if (it == obj.end()) return;
  const std::string field = join(path, key);
  const json& v = *it;
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) throw ConfigError("'" + field + "' must be a boolean", field);
    dst = v.get<bool>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) throw ConfigError("'" + field + "' must be a string", field);
    dst = v.get<std::string>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) throw ConfigError("'" + field + "' must be a number", field);
    dst = v.get<T>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer()) throw ConfigError("'" + field + "' must be an integer", field);
    if (std::is_unsigned_v<T> && !v.is_number_unsigned())
      throw ConfigError("'" + field + "' must be nonnegative", field);
    dst = v.get<T>();
  } else {
    if (!v.is_array()) throw ConfigError("'" + field + "' must be an array", field);
    T out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      typename T::value_type x{};
      json wrap = json::object();
      wrap["v"] = v[i];
      take(wrap, field + "[" + std::to_string(i) + "]", "v", x);
      out.push_back(x);
    }
    dst = std::move(out);
  }
}

}  // namespace

json Settings::to_json() const {
  json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["replicate"] = replicate;
  const sim::ScenarioSpec& s = scenario;
  j["scenario"] = {{"variant", sim::to_string(s.variant)},
                   {"n", s.n},
                   {"T", s.T},
                   {"K", s.K},
                   {"d", s.d},
                   {"tau2", s.tau2},
                   {"gamma_diag", s.gamma_diag},
                   {"tau_a2", s.tau_a2},
                   {"tau_b2", s.tau_b2},
                   {"t0", s.t0},
                   {"separation", s.separation},
                   {"messm_sigma", s.messm_sigma},
                   {"messm_r", s.messm_r},
                   {"messm_stationary", s.messm_stationary}};
  j["model"] = {{"type", model}, {"states", states}, {"latent_dim", latent_dim}, {"t0", t0}};
  j["estimation"] = {{"method", method},         {"max_iter", max_iter},
                     {"tol", tol},               {"e_step", e_step},
                     {"quad_nodes", quad_nodes}, {"mc_samples", mc_samples},
                     {"sign_align", sign_align}, {"update_sigma", update_sigma}};
  j["experiment"] = {{"methods", methods},
                     {"n_reps", n_reps},
                     {"grid", {{"n", grid_n}, {"T", grid_T}, {"tau2", grid_tau2}}}};
  return j;
}

std::string Settings::hash() const { return hex64(fnv1a(to_json().dump())); }

void Settings::validate() const {
  sim::ScenarioSpec s = scenario;
  s.seed = seed;
  s.validate();
  if (!kModels.count(model)) throw ConfigError("unknown model type '" + model + "'", "model.type");
  if (states < 1) throw ConfigError("model.states must be positive", "model.states");
  if (latent_dim < 1) throw ConfigError("model.latent_dim must be positive", "model.latent_dim");
  if (t0 < 0) throw ConfigError("model.t0 must be nonnegative", "model.t0");
  if (!kFitMethods.count(method))
    throw ConfigError("unknown method '" + method + "'", "estimation.method");
  if (max_iter < 1) throw ConfigError("max_iter must be positive", "estimation.max_iter");
  if (!(tol > 0.0)) throw ConfigError("tol must be positive", "estimation.tol");
  mhmm::parse_e_step_method(e_step);
  if (quad_nodes < 1) throw ConfigError("quad_nodes must be positive", "estimation.quad_nodes");
  if (mc_samples < 1) throw ConfigError("mc_samples must be positive", "estimation.mc_samples");
  if (methods.empty()) throw ConfigError("at least one method is required", "experiment.methods");
  for (const auto& m : methods) sim::parse_method(m);
  if (n_reps < 1) throw ConfigError("n_reps must be positive", "experiment.n_reps");
  for (Index v : grid_n)
    if (v < 1) throw ConfigError("grid sizes must be positive", "experiment.grid.n");
  for (Index v : grid_T)
    if (v < 1) throw ConfigError("grid lengths must be positive", "experiment.grid.T");
  for (double v : grid_tau2)
    if (!(v >= 0.0)) throw ConfigError("grid variances must be nonnegative", "experiment.grid.tau2");
}

Settings settings_from_json(const json& doc) {
  check_keys(doc, "", {"schema_version", "seed", "threads", "replicate", "scenario", "model",
                       "estimation", "experiment"});
  if (!doc.contains("schema_version"))
    throw ConfigError("missing 'schema_version'", "schema_version");
  int version = 0;
  take(doc, "", "schema_version", version);
  if (version != 1) throw ConfigError("unsupported schema_version " + std::to_string(version),
                                      "schema_version");
  Settings s;
  take(doc, "", "seed", s.seed);
  take(doc, "", "threads", s.threads);
  take(doc, "", "replicate", s.replicate);
  if (doc.contains("scenario")) {
    const json& sc = doc["scenario"];
    check_keys(sc, "scenario", {"variant", "n", "T", "K", "d", "tau2", "gamma_diag", "tau_a2",
                                "tau_b2", "t0", "separation", "messm_sigma", "messm_r",
                                "messm_stationary"});
    std::string variant = sim::to_string(s.scenario.variant);
    take(sc, "scenario", "variant", variant);
    try {
      s.scenario.variant = sim::parse_variant(variant);
    } catch (const ConfigError& e) {
      throw ConfigError(e.what(), "scenario.variant");
    }
    take(sc, "scenario", "n", s.scenario.n);
    take(sc, "scenario", "T", s.scenario.T);
    take(sc, "scenario", "K", s.scenario.K);
    take(sc, "scenario", "d", s.scenario.d);
    take(sc, "scenario", "tau2", s.scenario.tau2);
    take(sc, "scenario", "gamma_diag", s.scenario.gamma_diag);
    take(sc, "scenario", "tau_a2", s.scenario.tau_a2);
    take(sc, "scenario", "tau_b2", s.scenario.tau_b2);
    take(sc, "scenario", "t0", s.scenario.t0);
    take(sc, "scenario", "separation", s.scenario.separation);
    take(sc, "scenario", "messm_sigma", s.scenario.messm_sigma);
    take(sc, "scenario", "messm_r", s.scenario.messm_r);
    take(sc, "scenario", "messm_stationary", s.scenario.messm_stationary);
  }
  if (doc.contains("model")) {
    const json& m = doc["model"];
    check_keys(m, "model", {"type", "states", "latent_dim", "t0"});
    take(m, "model", "type", s.model);
    take(m, "model", "states", s.states);
    take(m, "model", "latent_dim", s.latent_dim);
    take(m, "model", "t0", s.t0);
  }
  if (doc.contains("estimation")) {
    const json& e = doc["estimation"];
    check_keys(e, "estimation", {"method", "max_iter", "tol", "e_step", "quad_nodes", "mc_samples",
                                 "sign_align", "update_sigma"});
    take(e, "estimation", "method", s.method);
    take(e, "estimation", "max_iter", s.max_iter);
    take(e, "estimation", "tol", s.tol);
    take(e, "estimation", "e_step", s.e_step);
    take(e, "estimation", "quad_nodes", s.quad_nodes);
    take(e, "estimation", "mc_samples", s.mc_samples);
    take(e, "estimation", "sign_align", s.sign_align);
    take(e, "estimation", "update_sigma", s.update_sigma);
  }
  if (doc.contains("experiment")) {
    const json& x = doc["experiment"];
    check_keys(x, "experiment", {"methods", "n_reps", "grid"});
    take(x, "experiment", "methods", s.methods);
    take(x, "experiment", "n_reps", s.n_reps);
    if (x.contains("grid")) {
      const json& g = x["grid"];
      check_keys(g, "experiment.grid", {"n", "T", "tau2"});
      take(g, "experiment.grid", "n", s.grid_n);
      take(g, "experiment.grid", "T", s.grid_T);
      take(g, "experiment.grid", "tau2", s.grid_tau2);
    }
  }
  return s;
}

namespace {

struct Flags {
  std::string config;
  std::string out;
  std::string data;
  std::uint64_t seed = 0;
  unsigned threads = 1;
  int max_iter = 0;
  double tol = 0.0;
  std::string method;
  int quad_nodes = 0;
  int mc_samples = 0;
  bool no_sign_align = false;
  std::string model;
  Index states = 0;
  Index latent_dim = 0;
  Index t0 = 0;
  std::string suite = "all";
};

struct Options {
  CLI::Option* seed = nullptr;
  CLI::Option* threads = nullptr;
  CLI::Option* max_iter = nullptr;
  CLI::Option* tol = nullptr;
  CLI::Option* method = nullptr;
  CLI::Option* quad_nodes = nullptr;
  CLI::Option* mc_samples = nullptr;
  CLI::Option* model = nullptr;
  CLI::Option* states = nullptr;
  CLI::Option* latent_dim = nullptr;
  CLI::Option* t0 = nullptr;
};

Options add_common(CLI::App* app, Flags& f) {
  Options o;
  app->add_option("--config", f.config, "JSON config file");
  o.seed = app->add_option("--seed", f.seed, "master seed");
  o.threads = app->add_option("--threads", f.threads, "worker threads (0 = auto)");
  o.max_iter = app->add_option("--max-iter", f.max_iter, "maximum EM iterations");
  o.tol = app->add_option("--tol", f.tol, "relative ELBO tolerance");
  o.method = app->add_option("--method", f.method, "avem, qem, mcem or pavem");
  o.quad_nodes = app->add_option("--quad-nodes", f.quad_nodes, "quadrature nodes per dimension");
  o.mc_samples = app->add_option("--mc-samples", f.mc_samples, "Monte Carlo samples per iteration");
  app->add_flag("--no-sign-align", f.no_sign_align, "disable latent sign alignment");
  return o;
}

Settings load(const Flags& f, const Options& o) {
  Settings s;
  if (!f.config.empty()) s = settings_from_json(parse_config_text(read_text(f.config), f.config));
  if (o.seed && o.seed->count()) s.seed = f.seed;
  if (o.threads && o.threads->count()) s.threads = f.threads;
  if (o.max_iter && o.max_iter->count()) s.max_iter = f.max_iter;
  if (o.tol && o.tol->count()) s.tol = f.tol;
  if (o.method && o.method->count()) s.method = f.method;
  if (o.quad_nodes && o.quad_nodes->count()) s.quad_nodes = f.quad_nodes;
  if (o.mc_samples && o.mc_samples->count()) s.mc_samples = f.mc_samples;
  if (f.no_sign_align) s.sign_align = false;
  if (o.model && o.model->count()) s.model = f.model;
  if (o.states && o.states->count()) s.states = f.states;
  if (o.latent_dim && o.latent_dim->count()) s.latent_dim = f.latent_dim;
  if (o.t0 && o.t0->count()) s.t0 = f.t0;
  s.validate();
  return s;
}

json emission_json(const EmissionModel& em) {
  json j;
  j["type"] = em.name();
  if (const auto* lg = dynamic_cast<const LinearGaussianEmission*>(&em)) {
    j["mu"] = to_json(lg->mu());
    j["sigma2"] = to_json(lg->sigma2());
    if (const auto* loc = dynamic_cast<const pavem::LocalizedGaussianEmission*>(&em))
      j["t0"] = loc->t0();
  } else if (const auto* b = dynamic_cast<const BernoulliEmission*>(&em)) {
    j["beta"] = to_json(b->beta());
  } else {
    j["parameters"] = to_json(em.parameter_vector());
  }
  return j;
}

json mhmm_params_json(const mhmm::MhmmParams& p) {
  return {{"pi", to_json(p.chain.pi)},
          {"gamma", to_json(p.chain.gamma)},
          {"emission", emission_json(*p.emission)},
          {"sigma", to_json(p.sigma)}};
}

json header(const Settings& s) {
  return {{"config_hash", s.hash()}, {"master_seed", s.seed}, {"config", s.to_json()}};
}

std::string dump(const json& j) { return j.dump(2) + "\n"; }

std::string elbo_csv(const std::vector<double>& trace, double scale, const std::string& prov) {
  std::ostringstream out;
  out << prov << "\niteration,elbo,normalized_elbo\n";
  for (std::size_t i = 0; i < trace.size(); ++i)
    out << i + 1 << ',' << format_double(trace[i]) << ',' << format_double(trace[i] / scale)
        << '\n';
  return out.str();
}

int cmd_simulate(const Settings& s, const fs::path& out_dir, std::ostream& out) {
  sim::ScenarioSpec spec = s.scenario;
  spec.seed = s.seed;
  const sim::Simulated sm = sim::generate(spec, s.replicate);
  const sim::Truth& tr = sm.truth;
  fs::create_directories(out_dir);
  const std::string prov = provenance_line(s.hash(), s.seed);
  const std::vector<std::string> ids = default_ids(sm.data.size());
  write_dataset_csv(out_dir / "dataset.csv", {sm.data, ids}, prov);

  json truth = header(s);
  truth["variant"] = sim::to_string(spec.variant);
  truth["replicate"] = s.replicate;
  if (spec.variant == sim::Variant::messm) {
    truth["G"] = to_json(tr.G);
    truth["H"] = to_json(tr.H);
    truth["r"] = to_json(tr.r);
  } else {
    truth["pi"] = to_json(tr.chain.pi);
    truth["gamma"] = to_json(tr.chain.gamma);
    truth["emission"] = emission_json(*tr.emission);
    truth["sigma"] = to_json(tr.sigma);
  }
  write_text(out_dir / "truth.json", dump(truth));

  if (!tr.states.empty()) {
    std::ostringstream st;
    st << prov << "\nsubject_id,t,state\n";
    for (std::size_t i = 0; i < tr.states.size(); ++i)
      for (std::size_t t = 0; t < tr.states[i].size(); ++t)
        st << ids[i] << ',' << t << ',' << tr.states[i][t] << '\n';
    write_text(out_dir / "truth_states.csv", st.str());
  }
  std::ostringstream ef;
  ef << prov << "\nsubject_id";
  if (!tr.effects.empty()) {
    for (Index j = 0; j < tr.effects.front().size(); ++j) ef << ",f" << j + 1;
    ef << '\n';
    for (std::size_t i = 0; i < tr.effects.size(); ++i) {
      ef << ids[i];
      for (Index j = 0; j < tr.effects[i].size(); ++j) ef << ',' << format_double(tr.effects[i](j));
      ef << '\n';
    }
  } else {
    const Index ng = tr.G_i.front().size();
    const Index nh = messm::vecl_size(tr.H_i.front().rows(), tr.H_i.front().cols());
    for (Index j = 0; j < ng; ++j) ef << ",g" << j + 1;
    for (Index j = 0; j < nh; ++j) ef << ",h" << j + 1;
    ef << '\n';
    for (std::size_t i = 0; i < tr.G_i.size(); ++i) {
      ef << ids[i];
      const VectorXd g = messm::vec(tr.G_i[i]);
      const VectorXd h = messm::vecl(tr.H_i[i]);
      for (Index j = 0; j < g.size(); ++j) ef << ',' << format_double(g(j));
      for (Index j = 0; j < h.size(); ++j) ef << ',' << format_double(h(j));
      ef << '\n';
    }
    std::ostringstream lt;
    lt << prov << "\nsubject_id,t";
    for (Index j = 0; j < tr.latent.front().cols(); ++j) lt << ",x" << j + 1;
    lt << '\n';
    for (std::size_t i = 0; i < tr.latent.size(); ++i)
      for (Index t = 0; t < tr.latent[i].rows(); ++t) {
        lt << ids[i] << ',' << t;
        for (Index j = 0; j < tr.latent[i].cols(); ++j)
          lt << ',' << format_double(tr.latent[i](t, j));
        lt << '\n';
      }
    write_text(out_dir / "truth_latent.csv", lt.str());
  }
  write_text(out_dir / "truth_effects.csv", ef.str());
  out << "simulated " << sm.data.size() << " subjects (" << sim::to_string(spec.variant)
      << ") into " << out_dir.string() << '\n';
  return ok;
}

json subjects_json(const std::vector<std::string>& ids, const mhmm::FitReport& fit) {
  json a = json::array();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    json sub = {{"subject_id", ids[i]},
                {"nu", to_json(fit.q_factors[i].nu)},
                {"omega", to_json(fit.q_factors[i].omega)}};
    if (i < fit.anchors.size()) sub["anchor"] = to_json(fit.anchors[i]);
    a.push_back(std::move(sub));
  }
  return a;
}

int cmd_fit(const Settings& s, const fs::path& data_path, const fs::path& out_dir,
            std::ostream& out) {
  const LabeledDataset ds = read_dataset_csv(data_path);
  const Dataset& data = ds.data;
  mhmm::AvemConfig ac;
  ac.max_iter = s.max_iter;
  ac.rel_tol = s.tol;
  ac.e_step = mhmm::parse_e_step_method(s.e_step);
  ac.n_quad = s.quad_nodes;
  ac.seed = s.seed;
  ac.threads = s.threads;
  ac.update_sigma = s.update_sigma;

  json doc = header(s);
  doc["model"] = s.model;
  doc["method"] = s.method;
  doc["n_subjects"] = data.size();
  std::vector<double> trace;
  std::vector<std::string> warnings;
  double wall = 0.0;
  int n_iter = 0;
  bool converged = false;

  auto finish_mhmm = [&](const mhmm::FitReport& fit) {
    doc["params"] = mhmm_params_json(fit.params);
    doc["subjects"] = subjects_json(ds.subject_ids, fit);
    doc["forward_passes_per_iteration"] = fit.forward_passes;
    trace = fit.elbo_trace;
    warnings = fit.warnings;
    wall = fit.wall_time_seconds;
    n_iter = fit.n_iter;
    converged = fit.converged;
  };

  if (s.model == "messm") {
    if (s.method != "avem") throw ConfigError("the messm model supports only avem", "estimation.method");
    messm::MessmConfig mc;
    mc.max_iter = s.max_iter;
    mc.rel_tol = s.tol;
    mc.threads = s.threads;
    mc.sign_align = s.sign_align;
    mc.update_sigma = s.update_sigma;
    mc.seed = s.seed;
    const messm::MessmFitReport fit =
        messm::fit_messm(data, messm::default_init_messm(data, s.latent_dim), mc);
    const messm::MessmParams& p = fit.params;
    doc["params"] = {{"m0", to_json(p.m0)},       {"P0", to_json(p.P0)},
                     {"r", to_json(p.r)},         {"mu_g", to_json(p.mu_g)},
                     {"sigma_g", to_json(p.sigma_g)}, {"mu_h", to_json(p.mu_h)},
                     {"sigma_h", to_json(p.sigma_h)}, {"G_mean", to_json(p.mean_G())},
                     {"H_mean", to_json(p.mean_H())}};
    json subs = json::array();
    for (std::size_t i = 0; i < data.size(); ++i) {
      const messm::SubjectEffects& e = fit.effects[i];
      subs.push_back({{"subject_id", ds.subject_ids[i]},
                      {"g_mean", to_json(e.q_g.nu)},
                      {"g_cov", to_json(e.q_g.omega)},
                      {"h_mean", to_json(e.q_h.nu)},
                      {"h_cov", to_json(e.q_h.omega)},
                      {"g_anchor", to_json(e.g0)},
                      {"h_anchor", to_json(e.h0)}});
    }
    doc["subjects"] = std::move(subs);
    doc["smoother_passes_per_iteration"] = fit.smoother_passes;
    trace = fit.elbo_trace;
    warnings = fit.warnings;
    wall = fit.wall_time_seconds;
    n_iter = fit.n_iter;
    converged = fit.converged;
  } else if (s.model == "localized") {
    mhmm::MhmmParams base = mhmm::default_init_gaussian(data, s.states);
    if (s.method == "avem") {
      const auto& g = dynamic_cast<const GaussianEmission&>(*base.emission);
      base.emission = std::make_shared<pavem::LocalizedGaussianEmission>(g.mu(), g.sigma2(), s.t0,
                                                                         1.0, 1.0);
      base.sigma = MatrixXd::Identity(2, 2);
      finish_mhmm(mhmm::fit_mhmm(data, base, ac));
    } else if (s.method == "pavem") {
      pavem::PavemConfig pc;
      pc.avem = ac;
      pc.n_nodes = s.quad_nodes;
      const pavem::PavemReport rep = pavem::fit_pavem(data, {base, s.t0, 1.0}, pc);
      finish_mhmm(rep.fit);
      doc["tau_b2"] = rep.tau_b2;
      doc["grid_nodes"] = to_json(rep.grids.front().nodes);
      for (std::size_t i = 0; i < data.size(); ++i) {
        doc["subjects"][i]["fb_hat"] = rep.fb_hat[i];
        doc["subjects"][i]["grid_weights"] = to_json(rep.grids[i].weights);
      }
    } else {
      throw ConfigError("the localized model supports avem and pavem", "estimation.method");
    }
  } else {
    const mhmm::MhmmParams init = s.model == "bernoulli"
                                      ? mhmm::default_init_bernoulli(data, s.states)
                                      : mhmm::default_init_gaussian(data, s.states);
    if (s.method == "avem") finish_mhmm(mhmm::fit_mhmm(data, init, ac));
    else if (s.method == "qem") finish_mhmm(exact::fit_qem(data, init, s.quad_nodes, ac));
    else if (s.method == "mcem") finish_mhmm(exact::fit_mcem(data, init, s.mc_samples, ac));
    else throw ConfigError("pavem needs the localized model", "estimation.method");
  }

  doc["n_iter"] = n_iter;
  doc["converged"] = converged;
  doc["final_elbo"] = trace.empty() ? 0.0 : trace.back();
  doc["warnings"] = warnings;
  fs::create_directories(out_dir);
  const std::string prov = provenance_line(s.hash(), s.seed);
  write_text(out_dir / "fit.json", dump(doc));
  write_text(out_dir / "elbo_trace.csv",
             elbo_csv(trace, static_cast<double>(data.total_length()), prov));
  write_text(out_dir / "timing.json", dump({{"config_hash", s.hash()},
                                            {"master_seed", s.seed},
                                            {"wall_time_seconds", wall}}));
  out << s.method << " fit: " << n_iter << " iterations, "
      << (converged ? "converged" : "not converged") << ", final ELBO "
      << format_double(doc["final_elbo"].get<double>()) << '\n';
  for (const auto& w : warnings) out << "warning: " << w << '\n';
  return ok;
}

using Metric = std::optional<double> sim::ReplicateResult::*;
const std::vector<std::pair<std::string, Metric>> kMetrics{
    {"rmse_mu", &sim::ReplicateResult::rmse_mu},
    {"rmse_sigma2", &sim::ReplicateResult::rmse_sigma2},
    {"gamma_abs_err", &sim::ReplicateResult::gamma_abs_err},
    {"mse_f", &sim::ReplicateResult::mse_f},
    {"rmse_beta", &sim::ReplicateResult::rmse_beta},
    {"mse_fb", &sim::ReplicateResult::mse_fb},
    {"rmse_G", &sim::ReplicateResult::rmse_G},
    {"rmse_H", &sim::ReplicateResult::rmse_H},
    {"rmse_R", &sim::ReplicateResult::rmse_R}};

std::string cell_prefix(Index n, Index T, double tau2) {
  return std::to_string(n) + ',' + std::to_string(T) + ',' + format_double(tau2);
}

int cmd_experiment(const Settings& s, const fs::path& out_dir, std::ostream& out) {
  std::vector<sim::MethodSpec> methods;
  for (const auto& m : s.methods) methods.push_back(sim::parse_method(m));
  const std::vector<Index> ns = s.grid_n.empty() ? std::vector<Index>{s.scenario.n} : s.grid_n;
  const std::vector<Index> Ts = s.grid_T.empty() ? std::vector<Index>{s.scenario.T} : s.grid_T;
  const std::vector<double> taus =
      s.grid_tau2.empty() ? std::vector<double>{s.scenario.tau2} : s.grid_tau2;

  const std::string prov = provenance_line(s.hash(), s.seed);
  std::ostringstream res, sum, tim;
  res << prov << "\nn,T,tau2,replicate,method";
  for (const auto& m : kMetrics) res << ',' << m.first;
  res << ",n_iter,converged\n";
  sum << prov << "\nn,T,tau2,method,n_reps";
  for (const auto& m : kMetrics) sum << ",median_" << m.first;
  sum << '\n';
  tim << prov << "\nn,T,tau2,replicate,method,wall_time_seconds\n";

  std::size_t n_rows = 0;
  for (Index n : ns)
    for (Index T : Ts)
      for (double tau2 : taus) {
        sim::MonteCarloConfig mc;
        mc.scenario = s.scenario;
        mc.scenario.n = n;
        mc.scenario.T = T;
        mc.scenario.tau2 = tau2;
        mc.scenario.seed = s.seed;
        mc.methods = methods;
        mc.n_reps = s.n_reps;
        mc.first_replicate = s.replicate;
        mc.max_iter = s.max_iter;
        mc.rel_tol = s.tol;
        mc.sign_align = s.sign_align;
        mc.threads = s.threads;
        const auto rows = sim::run_monte_carlo(mc);
        const std::string cell = cell_prefix(n, T, tau2);
        for (const auto& r : rows) {
          res << cell << ',' << r.replicate << ',' << r.method;
          for (const auto& m : kMetrics) {
            res << ',';
            if ((r.*(m.second)).has_value()) res << format_double(*(r.*(m.second)));
          }
          res << ',' << r.n_iter << ',' << (r.converged ? 1 : 0) << '\n';
          tim << cell << ',' << r.replicate << ',' << r.method << ',' << format_double(r.wall_time)
              << '\n';
        }
        n_rows += rows.size();
        for (const auto& m : methods) {
          const std::string label = m.label();
          sum << cell << ',' << label << ',' << s.n_reps;
          for (const auto& metric : kMetrics) {
            sum << ',';
            const double v = sim::median_metric(rows, label, metric.second);
            if (!std::isnan(v)) sum << format_double(v);
          }
          sum << '\n';
        }
      }
  fs::create_directories(out_dir);
  write_text(out_dir / "results.csv", res.str());
  write_text(out_dir / "summary.csv", sum.str());
  write_text(out_dir / "timing.csv", tim.str());
  out << "experiment: " << n_rows << " rows written to " << (out_dir / "results.csv").string()
      << '\n';
  return ok;
}

int cmd_validate(const Settings& s, const std::string& suite, const std::string& out_file,
                 std::ostream& out) {
  std::vector<std::string> names;
  if (suite == "all") {
    names = oracle::suite_names();
  } else {
    names.push_back(suite);
  }
  json cfg = s.to_json();
  cfg["suite"] = suite;
  const std::string hash = hex64(fnv1a(cfg.dump()));
  json report = {{"config_hash", hash}, {"master_seed", s.seed}, {"suites", json::array()}};
  bool all_passed = true;
  for (const auto& name : names) {
    const oracle::SuiteReport r = oracle::run_suite(name, s.seed);
    all_passed = all_passed && r.passed();
    out << name << ": " << r.instances << " instances, max deviation "
        << format_double(r.max_deviation) << " (tolerance " << format_double(r.tolerance) << "), "
        << format_double(r.seconds) << " s, " << (r.passed() ? "PASS" : "FAIL") << '\n';
    report["suites"].push_back({{"suite", r.suite},
                                {"instances", r.instances},
                                {"max_deviation", r.max_deviation},
                                {"tolerance", r.tolerance},
                                {"passed", r.passed()}});
  }
  if (!out_file.empty()) {
    const fs::path p(out_file);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    write_text(p, dump(report));
  }
  return all_passed ? ok : validation_failed;
}

void report_error(std::ostream& err, const std::string& kind, const std::string& message,
                  const std::string& field = {}) {
  json j = {{"error", kind}, {"message", message}};
  if (!field.empty()) j["field"] = field;
  err << j.dump() << '\n';
}

}  // namespace

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Anchored variational EM for mixed HMMs and mixed-effects state-space models", "avem"};
  app.require_subcommand(1);
  Flags f;

  CLI::App* simulate = app.add_subcommand("simulate", "generate a scenario dataset and its truth");
  Options o_sim = add_common(simulate, f);
  simulate->add_option("--out", f.out, "output directory")->required();

  CLI::App* fit = app.add_subcommand("fit", "fit a model to a dataset CSV");
  Options o_fit = add_common(fit, f);
  fit->add_option("--data", f.data, "dataset CSV")->required();
  fit->add_option("--out", f.out, "output directory")->required();
  o_fit.model = fit->add_option("--model", f.model, "gaussian, bernoulli, localized or messm");
  o_fit.states = fit->add_option("--states", f.states, "number of hidden states");
  o_fit.latent_dim = fit->add_option("--latent-dim", f.latent_dim, "state-space latent dimension");
  o_fit.t0 = fit->add_option("--t0", f.t0, "localized effect cutoff");

  CLI::App* experiment = app.add_subcommand("experiment", "run a Monte Carlo grid");
  Options o_exp = add_common(experiment, f);
  experiment->add_option("--out", f.out, "output directory")->required();

  CLI::App* validate = app.add_subcommand("validate", "run oracle validation suites");
  Options o_val;
  validate->add_option("--config", f.config, "JSON config file");
  o_val.seed = validate->add_option("--seed", f.seed, "master seed");
  validate->add_option("suite", f.suite, "oracle-hmm, oracle-kalman, gaussian-estep or all");
  validate->add_option("--out", f.out, "write a JSON report to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    report_error(err, "usage", e.what());
    return config_error;
  }

  try {
    if (simulate->parsed()) return cmd_simulate(load(f, o_sim), f.out, out);
    if (fit->parsed()) return cmd_fit(load(f, o_fit), f.data, f.out, out);
    if (experiment->parsed()) return cmd_experiment(load(f, o_exp), f.out, out);
    if (validate->parsed()) return cmd_validate(load(f, o_val), f.suite, f.out, out);
  } catch (const ConfigError& e) {
    report_error(err, "config", e.what(), e.field());
    return config_error;
  } catch (const DimensionError& e) {
    report_error(err, "input", e.what());
    return config_error;
  } catch (const NumericalError& e) {
    report_error(err, "numerical", e.what());
    return numerical_error;
  } catch (const IoError& e) {
    report_error(err, "io", e.what());
    return io_error;
  } catch (const fs::filesystem_error& e) {
    report_error(err, "io", e.what());
    return io_error;
  } catch (const std::exception& e) {
    report_error(err, "internal", e.what());
    return numerical_error;
  }
  return config_error;
}

}  // namespace avem::cli
