#pragma once

#include "agmlab/agm.hpp"
#include "agmlab/manifold.hpp"

namespace agmlab {

// Corrected: drift dPhi_S b + 1/2 d2Phi_S[Sigma_par] with b = -1/2 S T[R V_{RHR}(R Sigma R) R], R = S^{1/2};
//            under label noise this is -(alpha/4) dPhi_S S T[S].
// Literal:   drift S(dPhi_S b + 1/2 d2Phi_S[Sigma_par]) with b = -1/2 S T[Sigma_diamond];
//            under label noise -(alpha/2) S dPhi_S S T[S].
enum class DriftForm { Corrected, Literal };

struct SlowConfig {
  double dt = 1e-3;
  int max_halvings = 10;
  double label_noise_tol = 1e-6;
  DriftForm form = DriftForm::Corrected;
  ProjectionConfig proj;
};

struct SlowState {
  Vec zeta, v;
  double t = 0;
};

inline Vec label_noise_v(const Problem& problem, const AgmSpec& spec, const Vec& zeta) {
  return spec.vmap_matrix(problem.alpha() * problem.hessian(zeta));
}

inline void require_label_noise(const Problem& problem, const Vec& zeta, double tol) {
  if (std::isnan(problem.alpha()))
    throw std::invalid_argument("slow_ode_step: problem has no label-noise scale alpha");
  Mat aH = problem.alpha() * problem.hessian(zeta);
  double gap = (problem.noise_cov(zeta) - aH).norm();
  if (!(gap <= tol * std::max(1.0, aH.norm())))
    throw std::invalid_argument("slow_ode_step: label-noise condition Sigma = alpha H fails (gap " +
                                std::to_string(gap) + ")");
}

// Right-hand side of the label-noise slow ODE at an on-manifold zeta.
inline std::pair<Vec, Vec> slow_ode_rhs(const Problem& problem, const AgmSpec& spec, const Vec& zeta, const Vec& v,
                                        const SlowConfig& cfg) {
  Mat S = spec.smap(v).materialize();
  Mat P = dphi_s_on_manifold(problem, S, zeta, cfg.proj);
  Vec T = problem.third_dir(zeta, S);
  const double a = problem.alpha();
  Vec dz = cfg.form == DriftForm::Corrected ? Vec(-(a / 4) * (P * (S * T))) : Vec(-(a / 2) * (S * (P * (S * T))));
  Vec dv = spec.c * (label_noise_v(problem, spec, zeta) - v);
  if (spec.kind == AgmKind::SGD) dv.setZero();
  return {dz, dv};
}

namespace detail {

inline bool retract(const Problem& problem, const AgmSpec& spec, Vec& zeta, const Vec& v, const ProjectionConfig& pc) {
  ProjectionResult r = phi_s(problem, spec.smap(v).materialize(), zeta, pc);
  if (!r.converged) return false;
  zeta = r.point;
  return true;
}

}  // namespace detail

// One RK4 step of the label-noise slow ODE; stage points are retracted onto Gamma.
inline SlowState slow_ode_step(const Problem& problem, const AgmSpec& spec, const SlowState& st, double dt,
                               const SlowConfig& cfg = {}) {
  require_label_noise(problem, st.zeta, cfg.label_noise_tol);
  for (int halving = 0; halving <= cfg.max_halvings; ++halving, dt *= 0.5) {
    auto stage = [&](const Vec& z0, const Vec& v0, const Vec& dz, const Vec& dv, double h, Vec& zs, Vec& vs) {
      zs = z0 + h * dz;
      vs = (v0 + h * dv).cwiseMax(0.0);
      return detail::retract(problem, spec, zs, vs, cfg.proj);
    };
    Vec z2, v2, z3, v3, z4, v4;
    auto [k1z, k1v] = slow_ode_rhs(problem, spec, st.zeta, st.v, cfg);
    if (!stage(st.zeta, st.v, k1z, k1v, dt / 2, z2, v2)) continue;
    auto [k2z, k2v] = slow_ode_rhs(problem, spec, z2, v2, cfg);
    if (!stage(st.zeta, st.v, k2z, k2v, dt / 2, z3, v3)) continue;
    auto [k3z, k3v] = slow_ode_rhs(problem, spec, z3, v3, cfg);
    if (!stage(st.zeta, st.v, k3z, k3v, dt, z4, v4)) continue;
    auto [k4z, k4v] = slow_ode_rhs(problem, spec, z4, v4, cfg);
    SlowState next;
    next.zeta = st.zeta + dt / 6 * (k1z + 2 * k2z + 2 * k3z + k4z);
    next.v = (st.v + dt / 6 * (k1v + 2 * k2v + 2 * k3v + k4v)).cwiseMax(0.0);
    next.t = st.t + dt;
    if (!detail::retract(problem, spec, next.zeta, next.v, cfg.proj)) continue;
    return next;
  }
  throw std::runtime_error("slow_ode_step: retraction failed after " + std::to_string(cfg.max_halvings) +
                           " step halvings");
}

// Drift and diffusion factor of the slow SDE at an on-manifold zeta with preconditioner S.
struct SlowCoefficients {
  Vec drift;
  Mat diffusion;  // dPhi_S A with A = Sigma_par^{1/2}
  Mat P;
};

inline SlowCoefficients slow_sde_coefficients(const Problem& problem, const Mat& S, const Vec& zeta,
                                              const Mat& Sigma, const SlowConfig& cfg) {
  SlowCoefficients out;
  out.P = dphi_s_on_manifold(problem, S, zeta, cfg.proj);
  SigmaSplit sp = sigma_decompose(problem, S, zeta, Sigma, cfg.proj);
  Mat A = sqrt_psd(sp.par);
  out.diffusion = out.P * A;
  Vec curv = d2phi_s_matrix(problem, S, zeta, A * A.transpose(), cfg.proj, (S * Sigma * S).norm());
  if (cfg.form == DriftForm::Corrected) {
    Mat R = sqrt_psd(S);
    Mat H = problem.hessian(zeta);
    Mat M = R * vh_operator(R * H * R, R * Sigma * R, cfg.proj.null_threshold) * R;
    Vec b = -0.5 * (S * problem.third_dir(zeta, M));
    out.drift = out.P * b + 0.5 * curv;
  } else {
    Vec b = -0.5 * (S * problem.third_dir(zeta, sp.diamond));
    out.drift = S * (out.P * b + 0.5 * curv);
  }
  return out;
}

// Euler-Maruyama step of the slow SDE with v-dynamics dv = c(V(Sigma) - v) dt, then retraction.
inline SlowState slow_sde_step(const Problem& problem, const AgmSpec& spec, const SlowState& st, double dt, Rng& rng,
                               const SlowConfig& cfg = {}, bool freeze_v = false) {
  const Eigen::Index d = st.zeta.size();
  Vec dW = rng.normal_vec(d);
  Mat Sigma = problem.noise_cov(st.zeta);
  for (int halving = 0; halving <= cfg.max_halvings; ++halving, dt *= 0.5) {
    Mat S = spec.smap(st.v).materialize();
    SlowCoefficients co = slow_sde_coefficients(problem, S, st.zeta, Sigma, cfg);
    SlowState next;
    next.zeta = st.zeta + co.drift * dt + co.diffusion * (std::sqrt(dt) * dW);
    next.v = st.v;
    if (!freeze_v && spec.kind != AgmKind::SGD)
      next.v = (st.v + dt * spec.c * (spec.vmap_matrix(Sigma) - st.v)).cwiseMax(0.0);
    next.t = st.t + dt;
    if (!detail::retract(problem, spec, next.zeta, next.v, cfg.proj)) continue;
    return next;
  }
  throw std::runtime_error("slow_sde_step: retraction failed after " + std::to_string(cfg.max_halvings) +
                           " step halvings");
}

// Slow SDE for SGD: dPhi (A dW - 1/2 T[V_H(Sigma_diamond)] dt) + 1/2 d2Phi[A A'] dt.
inline Vec sgd_slow_sde_step(const Problem& problem, const Vec& zeta, double dt, Rng& rng, const SlowConfig& cfg = {}) {
  const Eigen::Index d = zeta.size();
  Vec dW = rng.normal_vec(d);
  Mat I = Mat::Identity(d, d);
  Mat Sigma = problem.noise_cov(zeta);
  for (int halving = 0; halving <= cfg.max_halvings; ++halving, dt *= 0.5) {
    Mat P = dphi_s_on_manifold(problem, I, zeta, cfg.proj);
    SigmaSplit sp = sigma_decompose(problem, I, zeta, Sigma, cfg.proj);
    Mat A = sqrt_psd(sp.par);
    Mat Vd = vh_operator(problem.hessian(zeta), sp.diamond, cfg.proj.null_threshold);
    Vec drift = P * (-0.5 * problem.third_dir(zeta, Vd)) + 0.5 * d2phi_s_matrix(problem, I, zeta, A * A.transpose(), cfg.proj, Sigma.norm());
    Vec z = zeta + drift * dt + P * A * (std::sqrt(dt) * dW);
    ProjectionResult r = phi_s(problem, I, z, cfg.proj);
    if (r.converged) return r.point;
  }
  throw std::runtime_error("sgd_slow_sde_step: retraction failed");
}

// ---------------------------------------------------------------- implicit regularizers

struct RegularizerKind {
  enum class Type { SGD_trH, Adam_sqrt, AdamE, Partitioned, Adam_eps };
  Type type = Type::Adam_sqrt;
  double lambda = 0.5;
  double eps = 0;
  double alpha = 1;
  std::vector<std::vector<int>> blocks;

  static RegularizerKind sgd() { return {Type::SGD_trH}; }
  static RegularizerKind adam() { return {Type::Adam_sqrt}; }
  static RegularizerKind adame(double lambda) {
    if (!(lambda >= 0 && lambda < 1)) throw std::invalid_argument("regularizer: AdamE lambda must lie in [0, 1)");
    RegularizerKind k{Type::AdamE};
    k.lambda = lambda;
    return k;
  }
  static RegularizerKind partitioned(std::vector<std::vector<int>> blocks) {
    RegularizerKind k{Type::Partitioned};
    k.blocks = std::move(blocks);
    return k;
  }
  static RegularizerKind adam_eps(double eps, double alpha) {
    if (!(eps > 0 && alpha > 0)) throw std::invalid_argument("regularizer: Adam_eps needs eps > 0 and alpha > 0");
    RegularizerKind k{Type::Adam_eps};
    k.eps = eps;
    k.alpha = alpha;
    return k;
  }

  std::string name() const {
    switch (type) {
      case Type::SGD_trH: return "trH";
      case Type::Adam_sqrt: return "tr_diag_sqrtH";
      case Type::AdamE: return "tr_diag_H^(1-" + std::to_string(lambda).substr(0, 4) + ")";
      case Type::Partitioned: return "partitioned_sqrt";
      case Type::Adam_eps: return "adam_eps";
    }
    return "?";
  }
};

struct RegularizerReport {
  std::string name;
  double value = 0;
  Vec gradient_on_gamma;
  double residual_norm = 0;
};

// Value and dR/dH_jj; coefficients at H_jj = 0 with unbounded derivative are set to 0 (a subgradient choice).
inline std::pair<double, Vec> regularizer_value(const Vec& hdiag_in, const RegularizerKind& kind) {
  const Eigen::Index d = hdiag_in.size();
  Vec h = hdiag_in;
  for (Eigen::Index j = 0; j < d; ++j) {
    if (h(j) < -1e-10 * std::max(1.0, hdiag_in.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("regularizer: negative Hessian diagonal entry " + std::to_string(h(j)));
    h(j) = std::max(h(j), 0.0);
  }
  constexpr double tiny = 1e-300;
  double val = 0;
  Vec coef = Vec::Zero(d);
  using T = RegularizerKind::Type;
  switch (kind.type) {
    case T::SGD_trH:
      val = h.sum();
      coef.setOnes();
      break;
    case T::Adam_sqrt:
      for (Eigen::Index j = 0; j < d; ++j) {
        val += std::sqrt(h(j));
        coef(j) = h(j) > tiny ? 0.5 / std::sqrt(h(j)) : 0.0;
      }
      break;
    case T::AdamE: {
      const double p = 1.0 - kind.lambda;
      for (Eigen::Index j = 0; j < d; ++j) {
        val += p == 1.0 ? h(j) : std::pow(h(j), p);
        coef(j) = p == 1.0 ? 1.0 : (h(j) > tiny ? p * std::pow(h(j), p - 1) : 0.0);
      }
      break;
    }
    case T::Partitioned: {
      std::vector<int> of = block_index(static_cast<int>(d), kind.blocks);
      for (const auto& B : kind.blocks) {
        double tr = 0;
        for (int j : B) tr += h(j);
        double nb = static_cast<double>(B.size());
        val += std::sqrt(nb * tr);
        for (int j : B) coef(j) = tr > tiny ? 0.5 * std::sqrt(nb / tr) : 0.0;
      }
      break;
    }
    case T::Adam_eps: {
      const double ra = std::sqrt(kind.alpha), e = kind.eps;
      for (Eigen::Index j = 0; j < d; ++j) {
        double s = std::sqrt(h(j));
        val += s - (e / ra) * std::log1p((ra / e) * s);
        coef(j) = ra / (2 * (ra * s + e));
      }
      break;
    }
  }
  return {val, coef};
}

// Gradient of R(H(theta)) via the third-derivative contraction, projected with dPhi (S = I).
inline RegularizerReport regularizer(const Problem& problem, const Vec& zeta, const RegularizerKind& kind,
                                     const ProjectionConfig& pc = {}) {
  auto [val, coef] = regularizer_value(problem.hessian_diag(zeta), kind);
  Vec g = problem.third_diag(zeta, coef);
  Mat P = dphi_s_on_manifold(problem, Mat::Identity(zeta.size(), zeta.size()), zeta, pc);
  RegularizerReport r;
  r.name = kind.name();
  r.value = val;
  r.gradient_on_gamma = P * g;
  r.residual_norm = r.gradient_on_gamma.norm();
  return r;
}

inline double fixed_point_residual(const Problem& problem, const AgmSpec& spec, const Vec& zeta,
                                   const ProjectionConfig& pc = {}) {
  Vec v = label_noise_v(problem, spec, zeta);
  Mat S = spec.smap(v).materialize();
  Mat P = dphi_s_on_manifold(problem, S, zeta, pc);
  return (S * (P * (S * problem.third_dir(zeta, S)))).norm();
}

// ---------------------------------------------------------------- preconditioned third-derivative fields

// A(theta) = T(theta)[S(V(alpha H(theta)))], with Sigma extended off Gamma as alpha H.
inline Vec preconditioned_field(const Problem& problem, const AgmSpec& spec, const Vec& theta) {
  Mat S = spec.smap(spec.vmap_matrix(problem.alpha() * problem.hessian(theta))).materialize();
  return problem.third_dir(theta, S);
}

inline Vec shampoo_field(const Problem& problem, const Vec& zeta, int rows, int cols, double eps = 1e-8) {
  if (rows * cols != problem.dim()) throw std::invalid_argument("shampoo_field: Kronecker dims do not match dim");
  return preconditioned_field(problem, shampoo_spec(rows, cols, 1e-3, 0.999, eps), zeta);
}

struct CurlEstimate {
  double value = 0;   // Richardson-extrapolated from steps h and h/2
  double coarse = 0;  // plain central difference at step h
  double floor = 0;   // |coarse - fine| + rounding bound
};

inline CurlEstimate curl_estimate(const Problem& problem, const AgmSpec& spec, const Vec& zeta, int i, int j, double h) {
  const int d = problem.dim();
  if (i < 0 || j < 0 || i >= d || j >= d || i == j) throw std::invalid_argument("curl_estimate: bad index pair");
  if (!(h > 0)) throw std::invalid_argument("curl_estimate: h must be positive");
  double amax = 0;
  auto central = [&](double step) {
    Vec ei = Vec::Unit(d, i) * step, ej = Vec::Unit(d, j) * step;
    Vec pi = preconditioned_field(problem, spec, zeta + ei), mi = preconditioned_field(problem, spec, zeta - ei);
    Vec pj = preconditioned_field(problem, spec, zeta + ej), mj = preconditioned_field(problem, spec, zeta - ej);
    amax = std::max({amax, pi.cwiseAbs().maxCoeff(), mi.cwiseAbs().maxCoeff(), pj.cwiseAbs().maxCoeff(),
                     mj.cwiseAbs().maxCoeff()});
    return (pi(j) - mi(j)) / (2 * step) - (pj(i) - mj(i)) / (2 * step);
  };
  CurlEstimate c;
  c.coarse = central(h);
  double fine = central(h / 2);
  c.value = (4 * fine - c.coarse) / 3;
  c.floor = std::abs(c.coarse - fine) + 64 * std::numeric_limits<double>::epsilon() * amax / h;
  return c;
}

}  // namespace agmlab
