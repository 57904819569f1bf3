#pragma once

#include "agmlab/numerics.hpp"
#include "agmlab/problems.hpp"

#include <array>

namespace agmlab {

struct ProjectionConfig {
  double ode_rel_tol = 1e-12;
  double ode_abs_tol = 1e-14;
  double grad_stop_tol = 1e-10;
  double move_tol = 1e-12;
  double max_flow_time = 1e6;
  long max_steps = 2'000'000;
  double null_threshold = kRankRelTol;

  void validate() const {
    if (!(ode_rel_tol > 0 && ode_abs_tol > 0 && grad_stop_tol > 0 && move_tol > 0 && max_flow_time > 0 &&
          max_steps > 0 && null_threshold > 0))
      throw std::invalid_argument("ProjectionConfig: all tolerances must be positive");
  }
};

// converged == false means the flow did not reach Gamma; point then holds the last iterate
// and must not be used as a manifold point.
struct ProjectionResult {
  Vec point;
  bool converged = false;
  double flow_time_used = 0;
  int tangent_dim = -1;
  long steps = 0;
};

namespace detail {

// Dormand-Prince 5(4) tableau.
struct DP45 {
  static constexpr double c[7] = {0, 1.0 / 5, 3.0 / 10, 4.0 / 5, 8.0 / 9, 1, 1};
  static constexpr double a[7][6] = {
      {},
      {1.0 / 5},
      {3.0 / 40, 9.0 / 40},
      {44.0 / 45, -56.0 / 15, 32.0 / 9},
      {19372.0 / 6561, -25360.0 / 2187, 64448.0 / 6561, -212.0 / 729},
      {9017.0 / 3168, -355.0 / 33, 46732.0 / 5247, 49.0 / 176, -5103.0 / 18656},
      {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84}};
  static constexpr double b5[7] = {35.0 / 384, 0, 500.0 / 1113, 125.0 / 192, -2187.0 / 6784, 11.0 / 84, 0};
  static constexpr double b4[7] = {5179.0 / 57600,    0,          7571.0 / 16695, 393.0 / 640,
                                   -92097.0 / 339200, 187.0 / 2100, 1.0 / 40};
};

inline int tangent_dim_at(const Problem& p, const Vec& x, double rel) {
  SpectralSplit s = split_spectrum(p.hessian(x), rel);
  return static_cast<int>(s.null_basis.cols());
}

}  // namespace detail

// Integrates dx/dt = -S grad L(x) to its limit.
inline ProjectionResult phi_s(const Problem& problem, const Mat& S, const Vec& x, const ProjectionConfig& cfg = {}) {
  cfg.validate();
  problem.check_dim(x, "phi_s");
  if (S.rows() != x.size() || S.cols() != x.size()) throw std::invalid_argument("phi_s: S dimension mismatch");
  using T = detail::DP45;
  ProjectionResult res;
  Vec y = x;
  auto rhs = [&](const Vec& z) -> Vec { return -(S * problem.grad(z)); };
  std::array<Vec, 7> k;
  k[0] = rhs(y);
  double t = 0;
  double scale = std::max(k[0].lpNorm<Eigen::Infinity>(), 1e-300);
  double h = std::min(1e-2 * (1.0 + y.lpNorm<Eigen::Infinity>()) / scale, 1.0);
  long steps = 0;
  while (t < cfg.max_flow_time && steps < cfg.max_steps) {
    if (!y.allFinite()) break;
    Vec yn;
    for (int s = 1; s < 7; ++s) {
      Vec ys = y;
      for (int r = 0; r < s; ++r)
        if (T::a[s][r] != 0) ys += h * T::a[s][r] * k[r];
      k[s] = rhs(ys);
      if (s == 6) yn = ys;
    }
    Vec err = Vec::Zero(y.size());
    for (int s = 0; s < 7; ++s) err += h * (T::b5[s] - T::b4[s]) * k[s];
    double en = 0;
    for (Eigen::Index i = 0; i < y.size(); ++i) {
      double sc = cfg.ode_abs_tol + cfg.ode_rel_tol * std::max(std::abs(y(i)), std::abs(yn(i)));
      en = std::max(en, std::abs(err(i)) / sc);
    }
    if (!std::isfinite(en)) {
      h *= 0.1;
      if (h < 1e-300) break;
      continue;
    }
    if (en <= 1.0) {
      double moved = (yn - y).norm();
      t += h;
      y = yn;
      k[0] = k[6];  // first-same-as-last
      ++steps;
      if (problem.grad(y).norm() <= cfg.grad_stop_tol && moved <= cfg.move_tol) {
        res.converged = true;
        break;
      }
    }
    double fac = en == 0 ? 5.0 : std::clamp(0.9 * std::pow(en, -0.2), 0.2, 5.0);
    h *= fac;
    if (h < 1e-14 * std::max(1.0, t)) break;  // step underflow: report non-convergence
  }
  res.point = y;
  res.flow_time_used = t;
  res.steps = steps;
  if (res.converged) res.tangent_dim = detail::tangent_dim_at(problem, y, cfg.null_threshold);
  return res;
}

// Oblique projector onto null(H) along S range(H); exact on Gamma.
inline Mat dphi_s_on_manifold(const Problem& problem, const Mat& S, const Vec& zeta, const ProjectionConfig& cfg = {}) {
  problem.check_dim(zeta, "dphi_s_on_manifold");
  SpectralSplit sp = split_spectrum(problem.hessian(zeta), cfg.null_threshold);
  if (sp.ambiguous) throw std::runtime_error("dphi_s_on_manifold: rank split of the Hessian is ambiguous");
  return oblique_projector(sp.null_basis, S * sp.range_basis);
}

// Central-difference Jacobian of phi_s, for points off Gamma.
inline Mat dphi_s_fd(const Problem& problem, const Mat& S, const Vec& x, const ProjectionConfig& cfg = {}) {
  const double h = 1e-5 * (1.0 + x.norm());
  const Eigen::Index d = x.size();
  Mat J(d, d);
  for (Eigen::Index i = 0; i < d; ++i) {
    Vec e = Vec::Zero(d);
    e(i) = h;
    ProjectionResult p = phi_s(problem, S, x + e, cfg), m = phi_s(problem, S, x - e, cfg);
    if (!p.converged || !m.converged) throw std::runtime_error("dphi_s_fd: projection did not converge");
    J.col(i) = (p.point - m.point) / (2 * h);
  }
  return J;
}

inline Vec third_sym(const Problem& problem, const Vec& zeta, const Vec& a, const Vec& b) {
  Mat M = 0.5 * (a * b.transpose() + b * a.transpose());
  return problem.third_dir(zeta, M);
}

// Second derivative d^2 Phi_S(zeta)[u, w] for w tangent.
// Split u = P u + S H y with y = H^+ S^{-1} (I - P) u.  Tangent-tangent part:
// -S H (H S H)^+ T[Pu, w]; normal part: -P S T[y, w], with T the third-derivative tensor.
inline Vec d2phi_s_rank1(const Problem& problem, const Mat& S, const Vec& zeta, const Vec& u, const Vec& w,
                         const ProjectionConfig& cfg = {}) {
  problem.check_dim(zeta, "d2phi_s_rank1");
  Mat H = problem.hessian(zeta);
  Mat P = dphi_s_on_manifold(problem, S, zeta, cfg);
  double wn = w.norm();
  if (wn > 0 && (w - P * w).norm() > 1e-6 * wn)
    throw std::invalid_argument("d2phi_s_rank1: w has a normal component (tangency hypothesis violated)");
  Mat Hp = pinv_psd(0.5 * (H + H.transpose()), cfg.null_threshold);
  Mat HSH = H * S * H;
  Mat HSHp = pinv_psd(0.5 * (HSH + HSH.transpose()), cfg.null_threshold);
  Vec pu = P * u;
  Vec y = Hp * S.ldlt().solve(u - pu);
  return -(S * H * (HSHp * third_sym(problem, zeta, pu, w))) - P * (S * third_sym(problem, zeta, y, w));
}

// d^2 Phi_S[Sigma] for symmetric Sigma whose range is tangent. Eigenvalues at or below
// 1e-12 * max(|lambda|_max, scale) are rounding noise and skipped.
inline Vec d2phi_s_matrix(const Problem& problem, const Mat& S, const Vec& zeta, const Mat& Sigma,
                          const ProjectionConfig& cfg = {}, double scale = 0) {
  Vec out = Vec::Zero(zeta.size());
  SymEig e = sym_eig(0.5 * (Sigma + Sigma.transpose()));
  double lmax = e.values.size() ? e.values.cwiseAbs().maxCoeff() : 0.0;
  double cut = 1e-12 * std::max(lmax, scale);
  for (Eigen::Index k = 0; k < e.values.size(); ++k) {
    if (std::abs(e.values(k)) <= cut || e.values(k) == 0) continue;
    Vec q = e.vectors.col(k);
    out += e.values(k) * d2phi_s_rank1(problem, S, zeta, q, q, cfg);
  }
  return out;
}

struct SigmaSplit {
  Mat par;      // dPhi S Sigma S dPhi'
  Mat diamond;  // S Sigma S - par
};

inline SigmaSplit sigma_decompose(const Problem& problem, const Mat& S, const Vec& zeta, const Mat& Sigma,
                                  const ProjectionConfig& cfg = {}) {
  Mat P = dphi_s_on_manifold(problem, S, zeta, cfg);
  Mat SSS = S * Sigma * S;
  SigmaSplit out;
  out.par = P * SSS * P.transpose();
  out.par = 0.5 * (out.par + out.par.transpose());
  out.diamond = SSS - out.par;
  return out;
}

inline SigmaSplit sigma_decompose(const Problem& problem, const Mat& S, const Vec& zeta,
                                  const ProjectionConfig& cfg = {}) {
  return sigma_decompose(problem, S, zeta, problem.noise_cov(zeta), cfg);
}

// V_H(Sigma): entries Sigma~_ij / (l_i + l_j) in H's eigenbasis, zero where l_i + l_j vanishes.
inline Mat vh_operator(const Mat& H, const Mat& Sigma, double rel_threshold = kRankRelTol) {
  SymEig e = sym_eig(H);
  const Eigen::Index n = H.rows();
  if (Sigma.rows() != n || Sigma.cols() != n) throw std::invalid_argument("vh_operator: dimension mismatch");
  double lmax = n ? e.values.cwiseAbs().maxCoeff() : 0.0;
  Vec l = e.values.unaryExpr([&](double x) { return x > rel_threshold * lmax ? x : 0.0; });
  Mat St = e.vectors.transpose() * Sigma * e.vectors;
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) {
      double s = l(i) + l(j);
      St(i, j) = s > 0 ? St(i, j) / s : 0.0;
    }
  return e.vectors * St * e.vectors.transpose();
}

}  // namespace agmlab
