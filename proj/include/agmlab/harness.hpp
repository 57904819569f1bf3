#pragma once

#include "agmlab/harness_io.hpp"
#include "agmlab/slowdyn.hpp"

#include <functional>
#include <numbers>

namespace agmlab {

inline const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> n{"ellipse", "diagnet",       "matfac",      "track",
                                          "converge", "project_check", "fixed_point", "shampoo_curl"};
  return n;
}

// ---------------------------------------------------------------- default configs

inline json default_config(const std::string& experiment) {
  json common = {{"experiment", experiment}, {"seeds", 4}, {"seed_base", 0}, {"output_dir", "out"}};
  json c;
  if (experiment == "ellipse") {
    c = {{"problem", {{"a", 1.25}, {"b", 1.0}, {"noise", 0.5}, {"batch", 1}}},
         {"optimizers",
          json::array({{{"kind", "sgd"}, {"label", "sgd"}, {"eta", 0.05}},
                       {{"kind", "adam"}, {"label", "adam"}, {"eta", 0.05}, {"beta1", 0.9}, {"c", 0.4}, {"eps", 1e-8}}})},
         {"steps", 200000},
         {"record_every", 1000},
         {"init_radius_jitter", 0.05},
         {"checks", {{"tip_angle", 0.2}, {"tip_fraction", 0.9}, {"axis_ratio", 0.5}, {"divergence", 1e6}}}};
  } else if (experiment == "diagnet") {
    c = {{"problem", {{"d", 1000}, {"kappa", 10}, {"noise_std", 1.0}, {"signal", 1.0}, {"batch", 1}, {"data_seed_base", 1000}}},
         {"n_train", json::array({60, 70, 80})},
         {"optimizers",
          json::array({{{"kind", "sgd"}, {"label", "sgd"}, {"eta", 0.002}},
                       {{"kind", "adam"}, {"label", "adam"}, {"eta", 0.002}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}},
                       {{"kind", "adame"}, {"label", "adame0.1"}, {"eta", 0.002}, {"beta1", 0.9}, {"beta2", 0.999},
                        {"eps", 1e-8}, {"lambda", 0.1}}})},
         {"steps", 400000},
         {"record_every", 50000},
         {"init", 0.1},
         {"checks",
          {{"recovery_loss", 1.0},
           {"n_star", 70},
           {"adam_label", "adam"},
           {"adam_min", 0.9},
           {"sgd_label", "sgd"},
           {"sgd_max", 0.1},
           {"adame_label", "adame0.1"},
           {"adame_min", 0.8},
           {"divergence", 1e6}}}};
  } else if (experiment == "matfac") {
    c = {{"problem", {{"dims", json::array({8, 8, 8})}, {"rank", 2}, {"n_meas", 50}, {"batch", 8}, {"sigma", 0.5},
                      {"data_seed_base", 2000}}},
         {"optimizers",
          json::array({{{"kind", "sgd"}, {"label", "sgd"}, {"eta", 0.01}},
                       {{"kind", "adam"}, {"label", "adam"}, {"eta", 1e-3}, {"beta1", 0.9}, {"beta2", 0.999}, {"eps", 1e-8}}})},
         {"steps", 200000},
         {"record_every", 20000},
         {"init_scale", 0.3},
         {"hutchinson_probes", 256},
         {"exact_diag_max_dim", 400},
         {"smoke", {{"dims", json::array({6, 6, 6, 6, 6, 6})}, {"steps", 2000}}},
         {"checks", {{"fraction", 0.75}, {"train_ratio", 2.0}, {"divergence", 1e6}}}};
  } else if (experiment == "track") {
    c = {{"problem", {{"a", 1.25}, {"b", 1.0}, {"noise", 0.5}, {"batch", 1}}},
         {"optimizer", {{"kind", "adam"}, {"label", "adam"}, {"beta1", 0.9}, {"c", 1.0}, {"eps", 1e-8}}},
         {"etas", json::array({0.02, 0.01, 0.005})},
         {"T", 1.0},
         {"phi0", 0.6},
         {"schedule_points", 10},
         {"slow_dt", 0.005},
         {"k0_max_steps", 100000},
         {"checks", {{"ratio", 0.6}, {"max_projection_failure", 0.05}}}};
    common["seeds"] = 64;
  } else if (experiment == "converge") {
    c = {{"problem", {{"h", json::array({1.0, 0.5, 0.25, 0.125})}, {"alpha", 1.0}}},
         {"optimizer", {{"kind", "adam"}, {"label", "adam"}, {"beta1", 0.9}, {"c", 1.0}, {"eps", 1e-8}}},
         {"etas", json::array({0.04, 0.02, 0.01})},
         {"horizon", 4.0},
         {"theta0", 1.0},
         {"C", 1.0},
         {"record_every", 50},
         {"zero_noise_steps", 20000},
         {"checks", {{"slope_lo", 0.7}, {"slope_hi", 1.3}, {"khit_ratio", 2.5}, {"zero_noise_loss", 1e-12}}}};
    common["seeds"] = 16;
  } else if (experiment == "project_check") {
    c = {{"ellipse", {{"a", 1.25}, {"b", 1.0}, {"noise", 0.5}}},
         {"diagnet", {{"d", 6}, {"n", 3}, {"kappa", 2}, {"noise_std", 1.0}, {"data_seed", 7}}},
         {"points", 10},
         {"offset", 1e-2},
         {"checks", {{"fd_tol", 1e-4}, {"closed_tol", 1e-6}}}};
    common["seeds"] = 1;
  } else if (experiment == "fixed_point") {
    c = {{"mode", "slow_ode"},
         {"problem", {{"a", 1.25}, {"b", 1.0}, {"noise", 0.5}}},
         {"phi0", 0.6},
         {"T", 100.0},
         {"dt", 0.02},
         {"stationary_tol", 1e-9},
         {"runs", json::array()},
         {"match", json::array()},
         {"argmin", {{"Z", json::array({1, 1, -1, 1, -1, 1})}, {"w_star", json::array({1.0, 0.0, 0.0})},
                      {"exponents", json::array({0.5, 0.25, 1.0})}, {"s_grid", 801}, {"s_range", 3.0},
                      {"b_grid", 201}, {"b_max", 2.0}}},
         {"checks", {{"grad_tol", 1e-4}, {"match_tol", 1e-3}}}};
    common["seeds"] = 1;
  } else if (experiment == "shampoo_curl") {
    c = {{"rows", 2},
         {"cols", 2},
         {"equivalence", {{"steps", 100}, {"eta", 0.01}, {"beta2", 0.99}, {"eps", 1e-6}}},
         {"quartic", {{"y", json::array({0.5, 1.0, 2.0, 4.0})}, {"noise_std", 1.0}}},
         {"shampoo_eps", 0.1},
         {"h", 1e-3},
         {"checks", {{"equiv_tol", 1e-10}, {"curl_factor", 10.0}}}};
    common["seeds"] = 1;
  } else {
    throw std::invalid_argument("unknown experiment '" + experiment + "'");
  }
  for (auto it = c.begin(); it != c.end(); ++it) common[it.key()] = it.value();
  return common;
}

// Merges a user config into the experiment defaults and validates it.
inline json resolve_config(const json& user, const std::string& experiment_hint = "") {
  std::string exp = user.value("experiment", experiment_hint);
  if (exp.empty()) throw std::invalid_argument("config: missing 'experiment'");
  if (!experiment_hint.empty() && exp != experiment_hint)
    throw std::invalid_argument("config: experiment '" + exp + "' does not match command '" + experiment_hint + "'");
  json cfg = default_config(exp);
  merge_strict(cfg, user, "");
  return cfg;
}

inline void validate_config(const json& cfg) {
  seed_list(cfg);
  for (const char* k : {"steps", "record_every"})
    if (cfg.contains(k) && cfg.at(k).get<long>() < 1) throw std::invalid_argument(std::string("config: ") + k + " must be >= 1");
  if (cfg.contains("optimizers")) {
    if (!cfg.at("optimizers").is_array() || cfg.at("optimizers").empty())
      throw std::invalid_argument("config: optimizers must be a non-empty list");
    std::set<std::string> labels;
    for (const auto& o : cfg.at("optimizers")) {
      AgmSpec s = spec_from_config(o, 2);
      if (!labels.insert(s.name).second) throw std::invalid_argument("config: duplicate optimizer label " + s.name);
    }
  }
  if (cfg.contains("etas")) {
    for (const auto& e : cfg.at("etas"))
      if (!(e.get<double>() > 0)) throw std::invalid_argument("config: etas must be positive");
  }
}

namespace detail {

inline AgmSpec optimizer_for(const json& o, int d) {
  AgmSpec s = spec_from_config(o, d);
  s.validate();
  return s;
}

inline std::shared_ptr<EllipseProblem> ellipse_from(const json& p) {
  auto e = make_ellipse(p.at("a"), p.at("b"), p.at("noise"));
  e->set_batch(p.value("batch", 1));
  return e;
}

inline double wrap_angle(double a) {
  a = std::fmod(a + std::numbers::pi, 2 * std::numbers::pi);
  if (a < 0) a += 2 * std::numbers::pi;
  return a - std::numbers::pi;
}

// Ellipse geometry: tips at angle 0 and pi; axis crossings where one coordinate vanishes.
struct EllipseGeometry {
  std::array<Vec, 4> crossings;
  explicit EllipseGeometry(const EllipseProblem& p) {
    int k = 0;
    for (int axis = 0; axis < 2; ++axis)
      for (double sgn : {1.0, -1.0}) {
        Vec e = Vec::Zero(2);
        e(axis) = sgn;
        crossings[k++] = e / std::sqrt(p.f(e));
      }
  }
  double tip_angle(const EllipseProblem& p, const Vec& t) const {
    double a = std::abs(wrap_angle(p.angle(t)));
    return std::min(a, std::numbers::pi - a);
  }
  double axis_distance(const Vec& t) const {
    double best = 1e300;
    for (const auto& c : crossings) best = std::min(best, (t - c).norm());
    return best;
  }
};

inline double tr_sqrt_diag(const Vec& hdiag) { return hdiag.cwiseMax(0.0).cwiseSqrt().sum(); }

struct SeedRun {
  std::vector<CsvRow> rows;
  json final = json::object();
  bool failed = false;
};

}  // namespace detail

// ---------------------------------------------------------------- ellipse

inline RunSummary run_ellipse(const json& cfg) {
  RunSummary s;
  s.experiment = "ellipse";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  auto prob = detail::ellipse_from(cfg.at("problem"));
  const detail::EllipseGeometry geo(*prob);
  const long steps = cfg.at("steps"), every = cfg.at("record_every");
  const double div = cfg.at("checks").at("divergence");
  const double jitter = cfg.at("init_radius_jitter");
  std::vector<AgmSpec> specs;
  for (const auto& o : cfg.at("optimizers")) specs.push_back(detail::optimizer_for(o, 2));
  const std::size_t no = specs.size(), ns = s.seeds.size();

  auto runs = parallel_map<detail::SeedRun>(no * ns, [&](std::size_t job) {
    const std::size_t oi = job / ns, si = job % ns;
    const std::uint64_t seed = s.seeds[si];
    const AgmSpec& spec = specs[oi];
    Rng init = Rng(seed).child(0);
    double phi = 2 * std::numbers::pi * init.uniform();
    Vec theta0 = prob->point(phi) * (1.0 + jitter * (2 * init.uniform() - 1));
    Rng rng = Rng(seed).child(oi + 1);
    detail::SeedRun out;
    AgmState st = init_state(spec, theta0);
    auto emit = [&](long k, const Vec& t) {
      Vec hd = prob->hessian_diag(t);
      const std::string p = spec.name + ".";
      out.rows.push_back({k, seed, p + "loss", prob->loss(t)});
      out.rows.push_back({k, seed, p + "angle", prob->angle(t)});
      out.rows.push_back({k, seed, p + "tip_distance", geo.tip_angle(*prob, t)});
      out.rows.push_back({k, seed, p + "axis_distance", geo.axis_distance(t)});
      out.rows.push_back({k, seed, p + "trH", hd.sum()});
      out.rows.push_back({k, seed, p + "tr_diag_sqrtH", detail::tr_sqrt_diag(hd)});
    };
    emit(0, st.theta);
    for (long k = 1; k <= steps; ++k) {
      agm_update(spec, st, prob->sample_grad(st.theta, rng));
      if (!st.theta.allFinite() || prob->loss(st.theta) > div) {
        out.failed = true;
        break;
      }
      if (k % every == 0 || k == steps) emit(k, st.theta);
    }
    const Vec& t = st.theta;
    out.final = {{"seed", seed},
                 {"optimizer", spec.name},
                 {"failed", out.failed},
                 {"phi0", phi},
                 {"angle", prob->angle(t)},
                 {"tip_distance", geo.tip_angle(*prob, t)},
                 {"axis_distance", geo.axis_distance(t)},
                 {"loss", prob->loss(t)},
                 {"theta", to_json(t)}};
    return out;
  });

  std::map<std::string, std::vector<double>> tip, axis;
  std::map<std::string, int> near_tip, ok;
  std::map<std::string, Series> mean_axis;
  for (std::size_t job = 0; job < runs.size(); ++job) {
    auto& r = runs[job];
    s.rows.insert(s.rows.end(), r.rows.begin(), r.rows.end());
    s.per_seed.push_back(r.final);
    const std::string name = specs[job / ns].name;
    if (r.failed) continue;
    ok[name]++;
    double ta = r.final.at("tip_distance");
    tip[name].push_back(ta);
    axis[name].push_back(r.final.at("axis_distance"));
    if (ta <= cfg.at("checks").at("tip_angle").get<double>()) near_tip[name]++;
  }
  for (const auto& sp : specs) {
    s.aggregates[sp.name] = {{"tip_distance", to_json(aggregate(tip[sp.name]))},
                             {"axis_distance", to_json(aggregate(axis[sp.name]))},
                             {"near_tip", near_tip[sp.name]},
                             {"completed", ok[sp.name]}};
  }
  // Mean axis-distance over time per optimizer.
  Plot pl{"ellipse_axis_distance", "Distance to nearest axis crossing (seed mean)", "step", "axis distance"};
  for (const auto& sp : specs) {
    std::map<long, std::pair<double, int>> acc;
    for (const auto& row : s.rows)
      if (row.metric == sp.name + ".axis_distance") {
        acc[row.step].first += row.value;
        acc[row.step].second++;
      }
    Series se{sp.name, {}, {}};
    for (auto& [k, v] : acc) {
      se.x.push_back(static_cast<double>(k));
      se.y.push_back(v.first / v.second);
    }
    pl.series.push_back(se);
  }
  s.plots.push_back(pl);

  const auto& ch = cfg.at("checks");
  if (specs.size() >= 2) {
    const std::string a = specs[0].name, b = specs[1].name;
    double frac = static_cast<double>(near_tip[a]) / static_cast<double>(ns);
    s.checks.push_back({a + "_near_tip_fraction", frac >= ch.at("tip_fraction").get<double>(), frac,
                        ch.at("tip_fraction"), "fraction of seeds within tip_angle rad of a tip"});
    double ma = aggregate(axis[b]).mean, mb = aggregate(axis[a]).mean;
    double ratio = mb > 0 ? ma / mb : std::numeric_limits<double>::infinity();
    s.checks.push_back({b + "_over_" + a + "_axis_distance", ok[b] > 0 && ratio < ch.at("axis_ratio").get<double>(),
                        ratio, ch.at("axis_ratio"), "mean axis distance ratio"});
  }
  return s;
}

// ---------------------------------------------------------------- diagnet

inline double quasi_norm(const Vec& w, double p) {
  double acc = 0;
  for (Eigen::Index i = 0; i < w.size(); ++i) acc += std::pow(std::abs(w(i)), p);
  return std::pow(acc, 1.0 / p);
}

inline RunSummary run_diagnet(const json& cfg) {
  RunSummary s;
  s.experiment = "diagnet";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  const json& pc = cfg.at("problem");
  const int d = pc.at("d"), kappa = pc.at("kappa");
  const long steps = cfg.at("steps"), every = cfg.at("record_every");
  const double init = cfg.at("init"), div = cfg.at("checks").at("divergence");
  const double rec = cfg.at("checks").at("recovery_loss");
  std::vector<int> ns_list = cfg.at("n_train").get<std::vector<int>>();
  std::vector<AgmSpec> specs;
  for (const auto& o : cfg.at("optimizers")) specs.push_back(detail::optimizer_for(o, 2 * d));
  const std::size_t no = specs.size(), nseed = s.seeds.size(), nn = ns_list.size();

  auto runs = parallel_map<detail::SeedRun>(nn * nseed * no, [&](std::size_t job) {
    const std::size_t ni = job / (nseed * no), si = (job / no) % nseed, oi = job % no;
    const int n = ns_list[ni];
    const std::uint64_t seed = s.seeds[si];
    const AgmSpec& spec = specs[oi];
    DiagNetProblem prob(d, n, kappa, pc.at("noise_std"), pc.at("data_seed_base").get<std::uint64_t>() + seed,
                        pc.at("signal"));
    prob.set_batch(pc.at("batch"));
    Rng rng = Rng(seed).child(oi + 1);
    AgmState st = init_state(spec, Vec::Constant(2 * d, init));
    detail::SeedRun out;
    const std::string p = "n" + std::to_string(n) + "." + spec.name + ".";
    const double floor2 = 2 * prob.noise_floor();
    int streak = 0;
    long converged_at = -1;
    auto emit = [&](long k) {
      Vec w = prob.w_hat(st.theta);
      double tr = prob.loss(st.theta);
      out.rows.push_back({k, seed, p + "train_loss", tr});
      out.rows.push_back({k, seed, p + "test_loss", prob.test_loss(st.theta)});
      out.rows.push_back({k, seed, p + "l1", w.lpNorm<1>()});
      out.rows.push_back({k, seed, p + "l05", quasi_norm(w, 0.5)});
      if (k > 0) {
        streak = tr <= floor2 ? streak + 1 : 0;
        if (streak >= 5 && converged_at < 0) converged_at = k;
      }
    };
    emit(0);
    for (long k = 1; k <= steps; ++k) {
      agm_update(spec, st, prob.sample_grad(st.theta, rng));
      if (k % every == 0 || k == steps) {
        if (!st.theta.allFinite() || prob.loss(st.theta) > div) {
          out.failed = true;
          break;
        }
        emit(k);
      }
    }
    Vec w = prob.w_hat(st.theta);
    double tl = out.failed ? std::numeric_limits<double>::infinity() : prob.test_loss(st.theta);
    out.final = {{"seed", seed},
                 {"n", n},
                 {"optimizer", spec.name},
                 {"failed", out.failed},
                 {"test_loss", out.failed ? json(nullptr) : json(tl)},
                 {"train_loss", out.failed ? json(nullptr) : json(prob.loss(st.theta))},
                 {"recovered", !out.failed && tl < rec},
                 {"converged_step", converged_at},
                 {"l1", w.lpNorm<1>()},
                 {"l05", quasi_norm(w, 0.5)}};
    return out;
  });

  std::map<std::string, std::map<int, std::vector<double>>> tl;
  std::map<std::string, std::map<int, int>> recovered;
  for (auto& r : runs) {
    s.rows.insert(s.rows.end(), r.rows.begin(), r.rows.end());
    s.per_seed.push_back(r.final);
    const std::string o = r.final.at("optimizer");
    const int n = r.final.at("n");
    if (!r.failed) tl[o][n].push_back(r.final.at("test_loss"));
    if (r.final.at("recovered").get<bool>()) recovered[o][n]++;
  }
  Plot rate{"diagnet_recovery", "Recovery rate vs n_train", "n_train", "fraction recovered"};
  Plot loss{"diagnet_test_loss", "Final test loss (seed median) vs n_train", "n_train", "test loss"};
  loss.logy = true;
  for (const auto& sp : specs) {
    json per_n = json::object();
    Series sr{sp.name, {}, {}}, sl{sp.name, {}, {}};
    for (int n : ns_list) {
      double frac = static_cast<double>(recovered[sp.name][n]) / static_cast<double>(nseed);
      per_n[std::to_string(n)] = {{"recovery_rate", frac}, {"test_loss", to_json(aggregate(tl[sp.name][n]))}};
      sr.x.push_back(n);
      sr.y.push_back(frac);
      sl.x.push_back(n);
      sl.y.push_back(median(tl[sp.name][n]));
    }
    s.aggregates[sp.name] = per_n;
    rate.series.push_back(sr);
    loss.series.push_back(sl);
  }
  s.plots.push_back(rate);
  s.plots.push_back(loss);

  const auto& ch = cfg.at("checks");
  const int nstar = ch.at("n_star");
  if (std::find(ns_list.begin(), ns_list.end(), nstar) != ns_list.end()) {
    auto frac = [&](const std::string& label) {
      return static_cast<double>(recovered[label][nstar]) / static_cast<double>(nseed);
    };
    auto add = [&](const char* lab_key, const char* thr_key, bool at_least) {
      std::string lab = ch.at(lab_key);
      bool known = std::any_of(specs.begin(), specs.end(), [&](const AgmSpec& sp) { return sp.name == lab; });
      if (!known) return;
      double f = frac(lab), thr = ch.at(thr_key);
      s.checks.push_back({lab + "_recovery_at_n" + std::to_string(nstar), at_least ? f >= thr : f <= thr, f, thr,
                          at_least ? "recovery rate must be at least threshold" : "recovery rate must be at most threshold"});
    };
    add("adam_label", "adam_min", true);
    add("sgd_label", "sgd_max", false);
    add("adame_label", "adame_min", true);
  }
  return s;
}

// ---------------------------------------------------------------- matfac

// Hessian diagonal: exact up to max_exact parameters, Rademacher probes z*(Hz) beyond.
inline std::pair<Vec, double> hessian_diag_estimate(const Problem& p, const Vec& t, int max_exact, int probes,
                                                    std::uint64_t seed) {
  if (p.dim() <= max_exact) return {p.hessian_diag(t), 0.0};
  Mat H = p.hessian(t);
  Rng rng(seed);
  Vec acc = Vec::Zero(p.dim()), acc2 = Vec::Zero(p.dim());
  for (int k = 0; k < probes; ++k) {
    Vec z(p.dim());
    for (int i = 0; i < p.dim(); ++i) z(i) = rng.sign();
    Vec e = z.cwiseProduct(H * z);
    acc += e;
    acc2 += e.cwiseAbs2();
  }
  Vec mean = acc / probes;
  double var = ((acc2 / probes - mean.cwiseAbs2()) / probes).sum();
  return {mean, var};
}

inline RunSummary run_matfac(const json& cfg) {
  RunSummary s;
  s.experiment = "matfac";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  const json& pc = cfg.at("problem");
  const long steps = cfg.at("steps"), every = cfg.at("record_every");
  const double div = cfg.at("checks").at("divergence"), init = cfg.at("init_scale");
  const int probes = cfg.at("hutchinson_probes"), max_exact = cfg.at("exact_diag_max_dim");
  auto make = [&](const std::vector<int>& dims, std::uint64_t seed) {
    return make_matfac(dims, pc.at("rank"), pc.at("n_meas"), pc.at("batch"), pc.at("sigma"),
                       pc.at("data_seed_base").get<std::uint64_t>() + seed);
  };
  const auto dims = pc.at("dims").get<std::vector<int>>();
  std::vector<AgmSpec> specs;
  int dim0 = make(dims, 0)->dim();
  for (const auto& o : cfg.at("optimizers")) specs.push_back(detail::optimizer_for(o, dim0));
  const std::size_t no = specs.size(), ns = s.seeds.size();

  auto runs = parallel_map<detail::SeedRun>(no * ns, [&](std::size_t job) {
    const std::size_t si = job / no, oi = job % no;
    const std::uint64_t seed = s.seeds[si];
    const AgmSpec& spec = specs[oi];
    auto prob = make(dims, seed);
    Rng init_rng = Rng(seed).child(0);
    Vec theta0 = init * init_rng.normal_vec(prob->dim());
    Rng rng = Rng(seed).child(oi + 1);
    AgmState st = init_state(spec, theta0);
    detail::SeedRun out;
    const std::string p = spec.name + ".";
    double hvar = 0;
    auto emit = [&](long k) {
      auto [hd, var] = hessian_diag_estimate(*prob, st.theta, max_exact, probes, seed ^ static_cast<std::uint64_t>(k));
      hvar = var;
      out.rows.push_back({k, seed, p + "train_mse", prob->train_mse(st.theta)});
      out.rows.push_back({k, seed, p + "test_mse", prob->test_mse(st.theta)});
      out.rows.push_back({k, seed, p + "trH", hd.sum()});
      out.rows.push_back({k, seed, p + "tr_diag_sqrtH", detail::tr_sqrt_diag(hd)});
    };
    emit(0);
    for (long k = 1; k <= steps; ++k) {
      agm_update(spec, st, prob->sample_grad(st.theta, rng));
      if (k % every == 0 || k == steps) {
        if (!st.theta.allFinite() || prob->loss(st.theta) > div) {
          out.failed = true;
          break;
        }
        emit(k);
      }
    }
    auto [hd, var] = hessian_diag_estimate(*prob, st.theta, max_exact, probes, seed);
    out.final = {{"seed", seed},
                 {"optimizer", spec.name},
                 {"failed", out.failed},
                 {"train_mse", prob->train_mse(st.theta)},
                 {"test_mse", prob->test_mse(st.theta)},
                 {"trH", hd.sum()},
                 {"tr_diag_sqrtH", detail::tr_sqrt_diag(hd)},
                 {"hessian_diag_variance", var},
                 {"exact_hessian_diag", prob->dim() <= max_exact}};
    (void)hvar;
    return out;
  });

  std::map<std::string, std::map<std::uint64_t, json>> fin;
  std::map<std::string, std::map<std::string, std::vector<double>>> agg;
  for (auto& r : runs) {
    s.rows.insert(s.rows.end(), r.rows.begin(), r.rows.end());
    s.per_seed.push_back(r.final);
    const std::string o = r.final.at("optimizer");
    if (r.failed) continue;
    fin[o][r.final.at("seed").get<std::uint64_t>()] = r.final;
    for (const char* m : {"train_mse", "test_mse", "trH", "tr_diag_sqrtH"}) agg[o][m].push_back(r.final.at(m));
  }
  for (const auto& sp : specs) {
    json a = json::object();
    for (auto& [m, xs] : agg[sp.name]) a[m] = to_json(aggregate(xs));
    s.aggregates[sp.name] = a;
  }
  for (const char* m : {"test_mse", "trH", "tr_diag_sqrtH"}) {
    Plot pl{std::string("matfac_") + m, std::string(m) + " (seed mean)", "step", m};
    pl.logy = std::string(m) == "test_mse";
    for (const auto& sp : specs) {
      std::map<long, std::pair<double, int>> acc;
      for (const auto& row : s.rows)
        if (row.metric == sp.name + "." + m) {
          acc[row.step].first += row.value;
          acc[row.step].second++;
        }
      Series se{sp.name, {}, {}};
      for (auto& [k, v] : acc) {
        se.x.push_back(static_cast<double>(k));
        se.y.push_back(v.first / v.second);
      }
      pl.series.push_back(se);
    }
    s.plots.push_back(pl);
  }

  // Smoke run at a second depth: every optimizer must stay finite.
  const json& sm = cfg.at("smoke");
  const long smoke_steps = sm.at("steps");
  if (smoke_steps > 0) {
    auto sdims = sm.at("dims").get<std::vector<int>>();
    auto sp0 = make(sdims, s.seeds[0]);
    bool finite = true;
    json depth_res = json::object();
    for (std::size_t oi = 0; oi < no; ++oi) {
      AgmSpec spec = detail::optimizer_for(cfg.at("optimizers")[oi], sp0->dim());
      Rng init_rng = Rng(s.seeds[0]).child(0);
      Vec theta0 = init * init_rng.normal_vec(sp0->dim());
      Rng rng = Rng(s.seeds[0]).child(oi + 1);
      Trajectory tr = run(spec, *sp0, theta0, smoke_steps, smoke_steps, rng);
      double l = sp0->loss(tr.final_state.theta);
      finite = finite && std::isfinite(l);
      depth_res[spec.name] = {{"train_mse", sp0->train_mse(tr.final_state.theta)}, {"loss0", sp0->loss(theta0)}};
    }
    s.extra["smoke"] = {{"depth", sdims.size() - 1}, {"results", depth_res}};
    s.checks.push_back({"smoke_depth_" + std::to_string(sdims.size() - 1) + "_finite", finite, finite ? 1.0 : 0.0, 1.0,
                        "second-depth run stays finite"});
  }

  const auto& ch = cfg.at("checks");
  if (specs.size() >= 2) {
    const std::string sg = specs[0].name, ad = specs[1].name;
    int good = 0, c1 = 0, c2 = 0, c3 = 0, c4 = 0;
    json per = json::array();
    for (auto seed : s.seeds) {
      if (!fin[sg].count(seed) || !fin[ad].count(seed)) {
        per.push_back({{"seed", seed}, {"ok", false}});
        continue;
      }
      const json &a = fin[ad][seed], &b = fin[sg][seed];
      bool o1 = a.at("trH").get<double>() > b.at("trH").get<double>();
      bool o2 = a.at("tr_diag_sqrtH").get<double>() < b.at("tr_diag_sqrtH").get<double>();
      bool o3 = a.at("test_mse").get<double>() > b.at("test_mse").get<double>();
      double ta = a.at("train_mse"), tb = b.at("train_mse");
      double r = std::max(ta, tb) / std::max(std::min(ta, tb), 1e-300);
      bool o4 = r <= ch.at("train_ratio").get<double>();
      bool ok = o1 && o2 && o3 && o4;
      good += ok;
      c1 += o1, c2 += o2, c3 += o3, c4 += o4;
      per.push_back({{"seed", seed}, {"trH", o1}, {"tr_diag_sqrtH", o2}, {"test", o3}, {"train_ratio", r}, {"ok", ok}});
    }
    s.extra["ordering"] = per;
    const double ns = static_cast<double>(s.seeds.size());
    s.extra["clause_fractions"] = {{"trH", c1 / ns}, {"tr_diag_sqrtH", c2 / ns}, {"test", c3 / ns}, {"train_ratio", c4 / ns}};
    double frac = good / ns;
    s.checks.push_back({"ordering_fraction", frac >= ch.at("fraction").get<double>(), frac, ch.at("fraction"),
                        ad + " vs " + sg + ": larger trH, smaller tr diag sqrtH, larger test MSE, train within ratio"});
  }
  return s;
}

// ---------------------------------------------------------------- track

namespace detail {

inline double ellipse_g(const EllipseProblem& p, const Vec& z) { return tr_sqrt_diag(p.hessian_diag(z)); }

struct TrackSeed {
  long k0 = 0;
  std::vector<Vec> proj;  // projected points on the schedule
  std::vector<bool> ok;
  Vec z_start, v_start;
};

}  // namespace detail

inline RunSummary run_track(const json& cfg) {
  RunSummary s;
  s.experiment = "track";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  auto prob = detail::ellipse_from(cfg.at("problem"));
  const auto etas = cfg.at("etas").get<std::vector<double>>();
  const double T = cfg.at("T"), phi0 = cfg.at("phi0"), slow_dt = cfg.at("slow_dt");
  const int npts = cfg.at("schedule_points");
  const long k0_max = cfg.at("k0_max_steps");
  if (npts < 1) throw std::invalid_argument("track: schedule_points must be >= 1");
  const Vec z0 = prob->point(phi0);
  const std::size_t ns = s.seeds.size();
  SlowConfig scfg;
  json gaps = json::object();
  std::vector<double> gap_g;
  Plot pl{"track_g", "E tr(Diag H^1/2): projected discrete vs slow ODE", "slow time t", "g"};

  for (std::size_t ei = 0; ei < etas.size(); ++ei) {
    json oc = cfg.at("optimizer");
    oc["eta"] = etas[ei];
    AgmSpec spec = detail::optimizer_for(oc, 2);
    const long K = static_cast<long>(std::llround(T / (etas[ei] * etas[ei])));
    std::vector<long> sched;
    for (int i = 1; i <= npts; ++i) sched.push_back(K * i / npts);

    auto seeds = parallel_map<detail::TrackSeed>(ns, [&](std::size_t si) {
      Rng rng = Rng(s.seeds[si]).child(ei + 1);
      AgmState st = init_state(spec, z0);
      st.v = spec.vmap_matrix(prob->alpha() * prob->hessian(z0));
      detail::TrackSeed out;
      // K0: first step with loss <= 2 * noise floor.
      while (prob->loss(st.theta) > 2 * prob->noise_floor()) {
        if (st.k >= k0_max) throw std::runtime_error("track: K0 not reached within k0_max_steps");
        agm_update(spec, st, prob->sample_grad(st.theta, rng));
      }
      out.k0 = st.k;
      ProjectionResult r0 = phi_s(*prob, spec.smap(st.v).materialize(), st.theta, scfg.proj);
      out.z_start = r0.point;
      out.v_start = st.v;
      const long base = st.k;
      std::size_t next = 0;
      for (long k = 1; k <= K && next < sched.size(); ++k) {
        agm_update(spec, st, prob->sample_grad(st.theta, rng));
        if (k == sched[next]) {
          ProjectionResult r = phi_s(*prob, spec.smap(st.v).materialize(), st.theta, scfg.proj);
          out.proj.push_back(r.point);
          out.ok.push_back(r.converged);
          ++next;
        }
      }
      (void)base;
      return out;
    });

    // Slow ODE from each distinct matched initial state; identical starts share one solve.
    std::map<std::string, std::vector<Vec>> slow_cache;
    auto slow_path = [&](const Vec& zs, const Vec& vs) {
      std::string key = to_json(zs).dump() + to_json(vs).dump();
      auto it = slow_cache.find(key);
      if (it != slow_cache.end()) return it->second;
      std::vector<Vec> pts;
      SlowState ss{zs, vs, 0};
      for (int i = 1; i <= npts; ++i) {
        double target = T * i / npts;
        while (ss.t < target - 1e-12) ss = slow_ode_step(*prob, spec, ss, std::min(slow_dt, target - ss.t), scfg);
        pts.push_back(ss.zeta);
      }
      slow_cache[key] = pts;
      return pts;
    };

    std::vector<double> dg(npts, 0.0), dg2(npts, 0.0), sg(npts, 0.0);
    std::vector<Vec> dx(npts, Vec::Zero(2)), sx(npts, Vec::Zero(2));
    std::vector<int> cnt(npts, 0);
    int failures = 0, total = 0;
    long k0max = 0;
    for (std::size_t si = 0; si < ns; ++si) {
      const auto& sd = seeds[si];
      k0max = std::max(k0max, sd.k0);
      auto sp = slow_path(sd.z_start, sd.v_start);
      for (int i = 0; i < npts; ++i) {
        ++total;
        double gs = detail::ellipse_g(*prob, sp[i]);
        sg[i] += gs / static_cast<double>(ns);
        sx[i] += sp[i] / static_cast<double>(ns);
        if (!sd.ok[i]) {
          ++failures;
          continue;
        }
        double g = detail::ellipse_g(*prob, sd.proj[i]);
        dg[i] += g;
        dg2[i] += g * g;
        dx[i] += sd.proj[i];
        cnt[i]++;
        s.rows.push_back({sched[i], s.seeds[si], "eta" + fmt_double(etas[ei]) + ".g_projected", g});
        s.rows.push_back({sched[i], s.seeds[si], "eta" + fmt_double(etas[ei]) + ".x_projected", sd.proj[i](0)});
        s.rows.push_back({sched[i], s.seeds[si], "eta" + fmt_double(etas[ei]) + ".y_projected", sd.proj[i](1)});
      }
    }
    double gap = 0, ci = 0, gapx = 0, gapy = 0;
    Series sd_series{"discrete eta=" + fmt_double(etas[ei]), {}, {}}, sl_series{"slow eta=" + fmt_double(etas[ei]), {}, {}};
    json series = json::array();
    for (int i = 0; i < npts; ++i) {
      if (cnt[i] == 0) continue;
      double m = dg[i] / cnt[i];
      double var = cnt[i] > 1 ? (dg2[i] - cnt[i] * m * m) / (cnt[i] - 1) : 0.0;
      double half = 1.96 * std::sqrt(std::max(var, 0.0) / cnt[i]);
      double e = std::abs(m - sg[i]);
      if (e > gap) gap = e, ci = half;
      Vec mx = dx[i] / cnt[i];
      gapx = std::max(gapx, std::abs(mx(0) - sx[i](0)));
      gapy = std::max(gapy, std::abs(mx(1) - sx[i](1)));
      double t = T * (i + 1) / npts;
      sd_series.x.push_back(t);
      sd_series.y.push_back(m);
      sl_series.x.push_back(t);
      sl_series.y.push_back(sg[i]);
      series.push_back({{"step", sched[i]}, {"slow_time", t}, {"discrete_mean", m}, {"ci95", half}, {"slow", sg[i]}});
    }
    pl.series.push_back(sd_series);
    if (ei == 0) pl.series.push_back(sl_series);
    double fail_rate = static_cast<double>(failures) / std::max(total, 1);
    gaps[fmt_double(etas[ei])] = {{"gap_g", gap},     {"gap_g_ci95", ci},     {"gap_x", gapx},
                                  {"gap_y", gapy},    {"steps", K},           {"k0_max", k0max},
                                  {"beta2", spec.beta2()}, {"projection_failure_rate", fail_rate},
                                  {"flagged", fail_rate > cfg.at("checks").at("max_projection_failure").get<double>()},
                                  {"series", series}};
    gap_g.push_back(gap);
  }
  s.aggregates = gaps;
  s.plots.push_back(pl);

  bool mono = true;
  for (std::size_t i = 1; i < gap_g.size(); ++i) mono = mono && gap_g[i] < gap_g[i - 1];
  s.checks.push_back({"gap_g_monotone", mono, gap_g.empty() ? 0 : gap_g.back(), 0, "gap decreases with eta"});
  if (gap_g.size() >= 2) {
    double r = gap_g.back() / gap_g.front();
    double thr = cfg.at("checks").at("ratio");
    s.checks.push_back({"gap_g_ratio", r <= thr, r, thr, "gap(smallest eta) / gap(largest eta)"});
  }
  bool flagged = false;
  for (auto& [k, v] : gaps.items()) flagged = flagged || v.at("flagged").get<bool>();
  s.checks.push_back({"projection_failure_rate", !flagged, flagged ? 1.0 : 0.0, cfg.at("checks").at("max_projection_failure"),
                      "projection non-convergence rate within limit for every eta"});
  return s;
}

// ---------------------------------------------------------------- converge

inline RunSummary run_converge(const json& cfg) {
  RunSummary s;
  s.experiment = "converge";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  const auto h = cfg.at("problem").at("h").get<std::vector<double>>();
  const double alpha = cfg.at("problem").at("alpha");
  const int d = static_cast<int>(h.size());
  Mat H0 = Mat::Zero(d, d);
  for (int i = 0; i < d; ++i) H0(i, i) = h[i];
  auto prob = make_quadratic_label_noise(H0, alpha);
  const auto etas = cfg.at("etas").get<std::vector<double>>();
  const double horizon = cfg.at("horizon"), C = cfg.at("C");
  const long every = cfg.at("record_every");
  const Vec theta0 = Vec::Constant(d, cfg.at("theta0").get<double>());
  const std::size_t ns = s.seeds.size();
  std::vector<double> plateaus, khits;
  json per_eta = json::object();
  Plot pl{"converge_loss", "Seed-mean loss", "step", "loss"};
  pl.logx = true;
  pl.logy = true;

  struct Out {
    std::vector<std::pair<long, double>> trace;
    double plateau = 0;
    long khit = -1;
  };
  for (std::size_t ei = 0; ei < etas.size(); ++ei) {
    const double eta = etas[ei];
    json oc = cfg.at("optimizer");
    oc["eta"] = eta;
    AgmSpec spec = detail::optimizer_for(oc, d);
    const long K = static_cast<long>(std::ceil(horizon / (eta * eta)));
    const double thr = C * eta * std::log(1.0 / eta);
    auto outs = parallel_map<Out>(ns, [&](std::size_t si) {
      Rng rng = Rng(s.seeds[si]).child(ei + 1);
      AgmState st = init_state(spec, theta0);
      Out o;
      double acc = 0;
      long cnt = 0;
      for (long k = 1; k <= K; ++k) {
        agm_update(spec, st, prob->sample_grad(st.theta, rng));
        double l = prob->loss(st.theta);
        if (o.khit < 0 && l <= thr) o.khit = k;
        if (k > K / 2) acc += l, ++cnt;
        if (k % every == 0) o.trace.push_back({k, l});
      }
      o.plateau = acc / static_cast<double>(cnt);
      return o;
    });
    std::vector<double> pls, kh;
    int censored = 0;
    std::map<long, double> mean_trace;
    for (std::size_t si = 0; si < ns; ++si) {
      pls.push_back(outs[si].plateau);
      if (outs[si].khit < 0)
        ++censored;
      else
        kh.push_back(static_cast<double>(outs[si].khit));
      const std::string p = "eta" + fmt_double(eta) + ".";
      for (auto& [k, l] : outs[si].trace) {
        s.rows.push_back({k, s.seeds[si], p + "loss", l});
        mean_trace[k] += l / static_cast<double>(ns);
      }
      s.per_seed.push_back({{"seed", s.seeds[si]}, {"eta", eta}, {"plateau", outs[si].plateau},
                            {"k_hit", outs[si].khit < 0 ? json(nullptr) : json(outs[si].khit)}});
    }
    Series se{"eta=" + fmt_double(eta), {}, {}};
    for (auto& [k, l] : mean_trace) se.x.push_back(static_cast<double>(k)), se.y.push_back(l);
    pl.series.push_back(se);
    double plateau = aggregate(pls).mean;
    double khit = censored == static_cast<int>(ns) ? std::numeric_limits<double>::quiet_NaN() : median(kh);
    plateaus.push_back(plateau);
    khits.push_back(khit);
    per_eta[fmt_double(eta)] = {{"plateau", to_json(aggregate(pls))}, {"k_hit_median", std::isnan(khit) ? json(nullptr) : json(khit)},
                                {"censored", censored}, {"steps", K}, {"threshold", thr}, {"beta2", spec.beta2()}};
  }
  s.aggregates = per_eta;
  s.plots.push_back(pl);

  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < etas.size(); ++i) {
    lx.push_back(std::log(etas[i]));
    ly.push_back(std::log(plateaus[i]));
  }
  const auto& ch = cfg.at("checks");
  double slope = etas.size() >= 2 ? fit_slope(lx, ly) : std::numeric_limits<double>::quiet_NaN();
  s.extra["plateau_slope"] = slope;
  s.checks.push_back({"plateau_slope", slope >= ch.at("slope_lo").get<double>() && slope <= ch.at("slope_hi").get<double>(),
                      slope, 1.0, "log-log slope of plateau loss vs eta"});
  // Halving eta: K_hit grows by at most khit_ratio.
  double worst = 0;
  bool khit_ok = true;
  for (std::size_t i = 0; i + 1 < etas.size(); ++i) {
    if (std::abs(etas[i + 1] - etas[i] / 2) > 1e-12 * etas[i]) continue;
    double r = khits[i + 1] / khits[i];
    if (std::isnan(r)) khit_ok = false;
    worst = std::max(worst, r);
  }
  khit_ok = khit_ok && worst <= ch.at("khit_ratio").get<double>();
  s.checks.push_back({"k_hit_ratio", khit_ok, worst, ch.at("khit_ratio"), "K_hit(eta/2) / K_hit(eta)"});

  // Noiseless run with the same optimizer and the smallest eta.
  const long zsteps = cfg.at("zero_noise_steps");
  if (zsteps > 0) {
    auto clean = make_quadratic(H0, Mat::Zero(d, d));
    json oc = cfg.at("optimizer");
    oc["eta"] = etas.back();
    AgmSpec spec = detail::optimizer_for(oc, d);
    Rng rng(s.seeds[0]);
    Trajectory tr = run(spec, *clean, theta0, zsteps, zsteps, rng);
    double l = clean->loss(tr.final_state.theta);
    s.extra["zero_noise_final_loss"] = l;
    s.checks.push_back({"zero_noise_converges", l < ch.at("zero_noise_loss").get<double>(), l, ch.at("zero_noise_loss"),
                        "noiseless final loss"});
  }
  return s;
}

// ---------------------------------------------------------------- projection identities

inline RunSummary run_project_check(const json& cfg) {
  RunSummary s;
  s.experiment = "project_check";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  const int npts = cfg.at("points");
  const double off = cfg.at("offset");
  const double fd_tol = cfg.at("checks").at("fd_tol"), cf_tol = cfg.at("checks").at("closed_tol");
  ProjectionConfig pc;
  const json& dc = cfg.at("diagnet");
  std::vector<std::pair<std::string, ProblemPtr>> probs{
      {"ellipse", make_ellipse(cfg.at("ellipse").at("a"), cfg.at("ellipse").at("b"), cfg.at("ellipse").at("noise"))},
      {"diagnet", make_diagnet(dc.at("d"), dc.at("n"), dc.at("kappa"), dc.at("noise_std"), dc.at("data_seed"))}};

  for (auto& [name, prob] : probs) {
    const int D = prob->dim();
    Rng rng = Rng(s.seeds[0]).child(name == "ellipse" ? 1 : 2);
    double worst_fd[3] = {0, 0, 0}, worst_cf[3] = {0, 0, 0};
    int got = 0;
    for (int attempt = 0; got < npts && attempt < 20 * npts; ++attempt) {
      // Diagonal preconditioner with spread-out entries, as an adaptive method would produce.
      Vec sd(D);
      for (int i = 0; i < D; ++i) sd(i) = std::exp(rng.uniform() * 2 - 1);
      Mat S = sd.asDiagonal();
      Vec x0 = name == "ellipse" ? Vec(std::static_pointer_cast<const EllipseProblem>(prob)->point(2 * std::numbers::pi * rng.uniform()))
                                 : Vec(rng.normal_vec(D));
      ProjectionResult pr = phi_s(*prob, S, x0, pc);
      if (!pr.converged) continue;
      const Vec zeta = pr.point;
      SpectralSplit sp = split_spectrum(prob->hessian(zeta));
      if (sp.ambiguous || sp.null_basis.cols() == 0) continue;
      Mat P = dphi_s_on_manifold(*prob, S, zeta, pc);
      Mat Pfd = dphi_s_fd(*prob, S, zeta, pc);
      Mat H = prob->hessian(zeta);
      const double hs = std::max((S * H).norm(), 1e-300);
      // (b) dPhi S H = 0 on Gamma.
      worst_cf[1] = std::max(worst_cf[1], (P * S * H).norm() / hs);
      worst_fd[1] = std::max(worst_fd[1], (Pfd * S * H).norm() / hs);
      // (c) dPhi t = t for tangent t.
      Mat Tb = sp.null_basis;
      worst_cf[2] = std::max(worst_cf[2], (P * Tb - Tb).norm() / std::max(Tb.norm(), 1e-300));
      worst_fd[2] = std::max(worst_fd[2], (Pfd * Tb - Tb).norm() / std::max(Tb.norm(), 1e-300));
      // (a) dPhi(x) S grad L(x) = 0 at a nearby off-manifold x.
      Vec dir = rng.normal_vec(D);
      Vec x = zeta + off * dir / dir.norm();
      ProjectionResult px = phi_s(*prob, S, x, pc);
      if (!px.converged) continue;
      Mat Px = dphi_s_fd(*prob, S, x, pc);
      Vec sg = S * prob->grad(x);
      double ra = (Px * sg).norm() / std::max(sg.norm(), 1e-300);
      worst_fd[0] = std::max(worst_fd[0], ra);
      // Closed form for (a) on Gamma: dPhi S grad L = 0 to first order along the normal flow,
      // i.e. dPhi S H (x - zeta) = 0.
      Vec lin = S * H * (x - zeta);
      worst_cf[0] = std::max(worst_cf[0], (P * lin).norm() / std::max(lin.norm(), 1e-300));
      s.rows.push_back({got, s.seeds[0], name + ".fd_a", ra});
      s.rows.push_back({got, s.seeds[0], name + ".fd_b", (Pfd * S * H).norm() / hs});
      s.rows.push_back({got, s.seeds[0], name + ".fd_c", (Pfd * Tb - Tb).norm() / std::max(Tb.norm(), 1e-300)});
      s.rows.push_back({got, s.seeds[0], name + ".cf_b", (P * S * H).norm() / hs});
      s.rows.push_back({got, s.seeds[0], name + ".cf_c", (P * Tb - Tb).norm() / std::max(Tb.norm(), 1e-300)});
      ++got;
    }
    s.aggregates[name] = {{"points", got},
                          {"fd", {{"a", worst_fd[0]}, {"b", worst_fd[1]}, {"c", worst_fd[2]}}},
                          {"closed", {{"a", worst_cf[0]}, {"b", worst_cf[1]}, {"c", worst_cf[2]}}}};
    s.checks.push_back({name + "_points", got == npts, static_cast<double>(got), static_cast<double>(npts),
                        "manifold points sampled"});
    const char* lab[3] = {"grad", "hessian", "tangent"};
    for (int i = 0; i < 3; ++i) {
      s.checks.push_back({name + "_fd_" + lab[i], worst_fd[i] <= fd_tol, worst_fd[i], fd_tol, "finite-difference identity"});
      s.checks.push_back({name + "_closed_" + lab[i], worst_cf[i] <= cf_tol, worst_cf[i], cf_tol, "closed-form identity"});
    }
  }
  return s;
}

// ---------------------------------------------------------------- fixed points

namespace detail {

inline RegularizerKind regularizer_for(const json& r, const AgmSpec& spec, double alpha) {
  std::string k = r.at("regularizer");
  if (k == "trH") return RegularizerKind::sgd();
  if (k == "adam_sqrt") return RegularizerKind::adam();
  if (k == "adame") return RegularizerKind::adame(spec.lambda);
  if (k == "adam_eps") return RegularizerKind::adam_eps(spec.eps, alpha);
  throw std::invalid_argument("fixed_point: unknown regularizer '" + k + "'");
}

inline RunSummary fixed_point_slow_ode(const json& cfg, RunSummary s) {
  auto prob = ellipse_from(cfg.at("problem"));
  const double T = cfg.at("T"), dt = cfg.at("dt"), stat = cfg.at("stationary_tol"), phi0 = cfg.at("phi0");
  const double tol = cfg.at("checks").at("grad_tol");
  const Vec z0 = prob->point(phi0);
  SlowConfig scfg;
  const json& runs_cfg = cfg.at("runs");
  for (const auto& r : runs_cfg)
    for (auto it = r.begin(); it != r.end(); ++it)
      if (it.key() != "label" && it.key() != "optimizer" && it.key() != "regularizer" && it.key() != "check")
        throw std::invalid_argument("fixed_point: unknown run key '" + it.key() + "'");
  struct Out {
    Vec zeta;
    double t = 0, grad = 0, value = 0, speed = 0, slope_left = 0, slope_right = 0;
    std::vector<CsvRow> rows;
  };
  auto outs = parallel_map<Out>(runs_cfg.size(), [&](std::size_t i) {
    const json& r = runs_cfg[i];
    AgmSpec spec = optimizer_for(r.at("optimizer"), 2);
    SlowState st{z0, label_noise_v(*prob, spec, z0), 0};
    Out o;
    long step = 0;
    while (st.t < T - 1e-12) {
      Vec before = st.zeta;
      st = slow_ode_step(*prob, spec, st, std::min(dt, T - st.t), scfg);
      o.speed = (st.zeta - before).norm() / dt;
      if (++step % 50 == 0) o.rows.push_back({step, 0, r.at("label").get<std::string>() + ".angle", prob->angle(st.zeta)});
      if (o.speed < stat) break;
    }
    const RegularizerKind rk = regularizer_for(r, spec, prob->alpha());
    RegularizerReport rep = regularizer(*prob, st.zeta, rk, scfg.proj);
    // One-sided slopes of R along the ellipse angle; a kink minimum has left <= 0 <= right.
    const double phi = prob->angle(st.zeta), dphi = 1e-6;
    auto R = [&](double ph) { return regularizer_value(prob->hessian_diag(prob->point(ph)), rk).first; };
    const double r0 = R(phi);
    o.slope_right = (R(phi + dphi) - r0) / dphi;
    o.slope_left = (r0 - R(phi - dphi)) / dphi;
    o.zeta = st.zeta;
    o.t = st.t;
    o.grad = rep.residual_norm;
    o.value = rep.value;
    return o;
  });
  std::map<std::string, Vec> terminal;
  for (std::size_t i = 0; i < outs.size(); ++i) {
    const json& r = runs_cfg[i];
    const std::string lab = r.at("label");
    const auto& o = outs[i];
    s.rows.insert(s.rows.end(), o.rows.begin(), o.rows.end());
    terminal[lab] = o.zeta;
    s.per_seed.push_back({{"label", lab}, {"regularizer", r.at("regularizer")}, {"terminal", to_json(o.zeta)},
                          {"angle", prob->angle(o.zeta)}, {"slow_time", o.t}, {"final_speed", o.speed},
                          {"regularizer_value", o.value}, {"grad_norm", o.grad},
                          {"slope_left", o.slope_left}, {"slope_right", o.slope_right},
                          {"one_sided_local_min", o.slope_left <= 1e-6 && o.slope_right >= -1e-6},
                          {"min_hessian_diag", prob->hessian_diag(o.zeta).minCoeff()}});
    if (r.value("check", true))
      s.checks.push_back({lab + "_grad", o.grad <= tol, o.grad, tol,
                          "projected regularizer gradient at the slow-ODE terminal point"});
  }
  const double mtol = cfg.at("checks").at("match_tol");
  for (const auto& m : cfg.at("match")) {
    const std::string a = m.at(0), b = m.at(1);
    if (!terminal.count(a) || !terminal.count(b)) throw std::invalid_argument("fixed_point: match refers to unknown run label");
    double dist = (terminal[a] - terminal[b]).norm();
    s.checks.push_back({a + "_matches_" + b, dist <= mtol, dist, mtol, "terminal point distance"});
  }
  return s;
}

// Brute force over Gamma = {(u, v): Z(u^2 - v^2) = y}: w = w0 + s n along the solution line,
// and per coordinate u^2 - v^2 = w_j parameterized by b = v_j >= sqrt(max(-w_j, 0)).
inline RunSummary fixed_point_argmin(const json& cfg, RunSummary s) {
  const json& lc = cfg.at("argmin");
  auto zv = lc.at("Z").get<std::vector<double>>();
  auto wv = lc.at("w_star").get<std::vector<double>>();
  const int d = static_cast<int>(wv.size());
  if (d < 1 || zv.size() % static_cast<std::size_t>(d) != 0) throw std::invalid_argument("argmin: Z shape mismatch");
  const int n = static_cast<int>(zv.size()) / d;
  Mat Z(n, d);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) Z(i, j) = zv[static_cast<std::size_t>(i * d + j)];
  Vec wstar = Eigen::Map<Vec>(wv.data(), d);
  DiagNetProblem prob(Z, wstar, 1.0);
  SpectralSplit sp = split_spectrum(Z.transpose() * Z);
  if (sp.null_basis.cols() != 1) throw std::invalid_argument("argmin: Z must have a one-dimensional null space");
  Vec nvec = sp.null_basis.col(0);
  const int sg = lc.at("s_grid"), bg = lc.at("b_grid");
  const double srange = lc.at("s_range"), bmax = lc.at("b_max");
  const double ds = 2 * srange / (sg - 1);
  for (double e : lc.at("exponents").get<std::vector<double>>()) {
    double best_reg = 1e300, best_norm = 1e300, s_reg = 0, s_norm = 0;
    for (int i = 0; i < sg; ++i) {
      const double sv = -srange + ds * i;
      Vec w = wstar + sv * nvec;
      double nrm = 0;
      for (int j = 0; j < d; ++j) nrm += std::pow(std::abs(w(j)), e);
      // Per-coordinate grid over b = v_j with u_j = sqrt(w_j + b^2); the regularizer is separable.
      Vec theta(2 * d);
      double total = 0;
      for (int j = 0; j < d; ++j) {
        double best_j = 1e300;
        const double bmin = std::sqrt(std::max(-w(j), 0.0));
        for (int k = 0; k < bg; ++k) {
          double b = bmin + bmax * k / (bg - 1);
          double u2 = std::max(w(j) + b * b, 0.0);
          theta.setZero();
          theta(j) = std::sqrt(u2);
          theta(d + j) = b;
          Vec hd = prob.hessian_diag(theta);
          double val = std::pow(std::max(hd(j), 0.0), e) + std::pow(std::max(hd(d + j), 0.0), e);
          best_j = std::min(best_j, val);
        }
        total += best_j;
      }
      s.rows.push_back({i, 0, "e" + fmt_double(e) + ".reg", total});
      s.rows.push_back({i, 0, "e" + fmt_double(e) + ".norm", nrm});
      if (total < best_reg) best_reg = total, s_reg = sv;
      if (nrm < best_norm) best_norm = nrm, s_norm = sv;
    }
    double dist = std::abs(s_reg - s_norm);
    s.per_seed.push_back({{"exponent", e}, {"argmin_regularizer", s_reg}, {"argmin_norm", s_norm}, {"grid_step", ds}});
    s.checks.push_back({"argmin_agree_e" + fmt_double(e), dist <= ds + 1e-12, dist, ds,
                        "argmin of tr(Diag H^e) vs argmin of ||w||_e along the solution line"});
  }
  return s;
}

}  // namespace detail

inline RunSummary run_fixed_point(const json& cfg) {
  RunSummary s;
  s.experiment = "fixed_point";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  const std::string mode = cfg.at("mode");
  if (mode == "slow_ode") return detail::fixed_point_slow_ode(cfg, std::move(s));
  if (mode == "argmin") return detail::fixed_point_argmin(cfg, std::move(s));
  throw std::invalid_argument("fixed_point: unknown mode '" + mode + "'");
}

// ---------------------------------------------------------------- shampoo

inline RunSummary run_shampoo_curl(const json& cfg) {
  RunSummary s;
  s.experiment = "shampoo_curl";
  s.config = cfg;
  s.seeds = seed_list(cfg);
  const int rows = cfg.at("rows"), cols = cfg.at("cols");
  const json& ec = cfg.at("equivalence");
  const long steps = ec.at("steps");
  const double eta = ec.at("eta"), beta2 = ec.at("beta2"), eps = ec.at("eps");
  // Vectorized AGM vs matrix-form Shampoo on shared random gradients.
  AgmSpec spec = shampoo_spec(rows, cols, eta, beta2, eps);
  Rng rng(s.seeds[0]);
  Mat Theta0 = rng.normal_mat(rows, cols);
  AgmState st = init_state(spec, vec_rm(Theta0));
  ShampooMatrixState ms{Theta0, Mat::Zero(rows, rows), Mat::Zero(cols, cols)};
  double worst = 0;
  for (long k = 1; k <= steps; ++k) {
    Mat G = rng.normal_mat(rows, cols);
    agm_update(spec, st, vec_rm(G));
    shampoo_matrix_step(ms, G, eta, beta2, eps);
    double diff = (st.theta - vec_rm(ms.Theta)).cwiseAbs().maxCoeff();
    worst = std::max(worst, diff);
    s.rows.push_back({k, s.seeds[0], "equivalence.max_abs_diff", diff});
  }
  const double etol = cfg.at("checks").at("equiv_tol");
  s.checks.push_back({"vectorized_equals_matrix", worst <= etol, worst, etol, "max |theta_vec - vec(Theta_mat)|"});

  // Curl of T[S] at a point of Gamma for the separable quartic (diagonal Hessian everywhere).
  auto yv = cfg.at("quartic").at("y").get<std::vector<double>>();
  auto prob = make_quartic(Eigen::Map<Vec>(yv.data(), static_cast<Eigen::Index>(yv.size())), cfg.at("quartic").at("noise_std"));
  if (prob->dim() != rows * cols) throw std::invalid_argument("shampoo_curl: quartic dimension must equal rows*cols");
  const Vec zeta = prob->y().cwiseSqrt();
  const double h = cfg.at("h"), fac = cfg.at("checks").at("curl_factor");
  AgmSpec sh = shampoo_spec(rows, cols, 1e-3, 0.999, cfg.at("shampoo_eps"));
  AgmSpec ad = adam_spec(prob->dim(), 1e-3, 0.9, 0.999, cfg.at("shampoo_eps"));
  double sh_best = 0, ad_worst = 0;
  json pairs = json::array();
  for (int i = 0; i < prob->dim(); ++i)
    for (int j = i + 1; j < prob->dim(); ++j) {
      CurlEstimate cs = curl_estimate(*prob, sh, zeta, i, j, h);
      CurlEstimate ca = curl_estimate(*prob, ad, zeta, i, j, h);
      double rs = std::abs(cs.value) / cs.floor;
      double ra = ca.floor > 0 ? std::abs(ca.value) / ca.floor : (ca.value == 0 ? 0.0 : 1e300);
      sh_best = std::max(sh_best, rs);
      ad_worst = std::max(ad_worst, ra);
      pairs.push_back({{"i", i}, {"j", j}, {"shampoo", {{"curl", cs.value}, {"floor", cs.floor}}},
                       {"adam", {{"curl", ca.value}, {"floor", ca.floor}}}});
    }
  s.extra["curl_pairs"] = pairs;
  s.extra["point"] = to_json(zeta);
  s.checks.push_back({"shampoo_curl_above_floor", sh_best > fac, sh_best, fac, "max |curl| / noise floor for Shampoo"});
  s.checks.push_back({"adam_curl_below_floor", ad_worst < 1.0, ad_worst, 1.0, "max |curl| / noise floor for Adam"});
  return s;
}

// ---------------------------------------------------------------- dispatch

inline RunSummary run_experiment(const json& cfg) {
  validate_config(cfg);
  const std::string e = cfg.at("experiment");
  if (e == "ellipse") return run_ellipse(cfg);
  if (e == "diagnet") return run_diagnet(cfg);
  if (e == "matfac") return run_matfac(cfg);
  if (e == "track") return run_track(cfg);
  if (e == "converge") return run_converge(cfg);
  if (e == "project_check") return run_project_check(cfg);
  if (e == "fixed_point") return run_fixed_point(cfg);
  if (e == "shampoo_curl") return run_shampoo_curl(cfg);
  throw std::invalid_argument("unknown experiment '" + e + "'");
}

inline json load_json_file(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config '" + path.string() + "'");
  try {
    return json::parse(f);
  } catch (const json::parse_error& e) {
    throw std::runtime_error("config '" + path.string() + "': " + e.what());
  }
}

}  // namespace agmlab
