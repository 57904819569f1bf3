#include "agmlab/problems.hpp"

#include <gtest/gtest.h>

using namespace agmlab;

namespace {

Vec fd_grad(const Problem& p, const Vec& t, double h) {
  Vec g(t.size());
  for (int i = 0; i < t.size(); ++i) {
    Vec tp = t, tm = t;
    tp(i) += h;
    tm(i) -= h;
    g(i) = (p.loss(tp) - p.loss(tm)) / (2 * h);
  }
  return g;
}

Mat fd_hess(const Problem& p, const Vec& t, double h) {
  Mat H(t.size(), t.size());
  for (int i = 0; i < t.size(); ++i) {
    Vec tp = t, tm = t;
    tp(i) += h;
    tm(i) -= h;
    H.col(i) = (p.grad(tp) - p.grad(tm)) / (2 * h);
  }
  return 0.5 * (H + H.transpose());
}

Vec fd_third(const Problem& p, const Vec& t, const Mat& M, double h) {
  Vec out(t.size());
  for (int i = 0; i < t.size(); ++i) {
    Vec tp = t, tm = t;
    tp(i) += h;
    tm(i) -= h;
    out(i) = (p.hessian(tp).cwiseProduct(M).sum() - p.hessian(tm).cwiseProduct(M).sum()) / (2 * h);
  }
  return out;
}

void check_chain(const Problem& p, Rng& rng, double scale, int points = 20) {
  for (int k = 0; k < points; ++k) {
    Vec t = scale * rng.normal_vec(p.dim());
    Vec g = p.grad(t);
    EXPECT_LE((g - fd_grad(p, t, 1e-6)).norm(), 1e-5 * (1 + g.norm())) << p.kind() << " grad, point " << k;
    Mat H = p.hessian(t);
    EXPECT_LE((H - fd_hess(p, t, 1e-5)).norm(), 1e-4 * (1 + H.norm())) << p.kind() << " hessian, point " << k;
    EXPECT_LE((p.hessian_diag(t) - H.diagonal()).norm(), 1e-10 * (1 + H.norm())) << p.kind();
    Mat M = rng.normal_mat(p.dim(), p.dim());
    M = 0.5 * (M + M.transpose());
    Vec T = p.third_dir(t, M);
    EXPECT_LE((T - fd_third(p, t, M, 1e-4)).norm(), 1e-3 * (1 + T.norm())) << p.kind() << " third, point " << k;
    Vec s = rng.normal_vec(p.dim());
    Mat S = s.asDiagonal();
    EXPECT_LE((p.third_diag(t, s) - p.third_dir(t, S)).norm(), 1e-7 * (1 + T.norm())) << p.kind();
  }
}

// Monte-Carlo mean of sample_grad within 4 standard errors per coordinate.
void check_unbiased(const Problem& p, const Vec& t, int batch, std::uint64_t seed, int draws = 100000) {
  Rng rng(seed);
  const int d = p.dim();
  Vec s = Vec::Zero(d), s2 = Vec::Zero(d);
  for (int k = 0; k < draws; ++k) {
    Vec g = p.sample_grad(t, batch, rng);
    s += g;
    s2 += g.cwiseAbs2();
  }
  Vec mean = s / draws;
  Vec var = s2 / draws - mean.cwiseAbs2();
  Vec g = p.grad(t);
  for (int i = 0; i < d; ++i) {
    double se = std::sqrt(std::max(var(i), 0.0) / draws);
    EXPECT_LE(std::abs(mean(i) - g(i)), 4 * se + 1e-12) << p.kind() << " coordinate " << i;
  }
}

// A second manifold point of an underdetermined diagonal net: w* plus a null-space shift of Z.
Vec diagnet_manifold_point(const DiagNetProblem& p, Rng& rng) {
  Eigen::FullPivLU<Mat> lu(p.Z());
  Mat N = lu.kernel();
  Vec w = p.w_star() + 0.3 * N * rng.normal_vec(N.cols());
  Vec t(2 * p.d());
  for (int j = 0; j < p.d(); ++j) {
    t(j) = std::sqrt(std::max(w(j), 0.0));
    t(p.d() + j) = std::sqrt(std::max(-w(j), 0.0));
  }
  return t;
}

std::shared_ptr<MatFacProblem> small_matfac(double sigma, int batch = 1) {
  return make_matfac({3, 3, 2}, 1, 8, batch, sigma, 17);
}

// Exact factorization W2 W1 = M* from the SVD.
Vec matfac_exact(const MatFacProblem& p) {
  Eigen::JacobiSVD<Mat> svd(p.M_star(), Eigen::ComputeFullU | Eigen::ComputeFullV);
  const auto& dims = p.dims();
  Vec sv = svd.singularValues().cwiseSqrt();
  std::vector<Mat> W(3);
  W[1] = Mat::Zero(dims[1], dims[0]);
  W[2] = Mat::Zero(dims[2], dims[1]);
  int k = std::min<int>(dims[1], static_cast<int>(sv.size()));
  W[1].topRows(k) = sv.head(k).asDiagonal() * svd.matrixV().leftCols(k).transpose();
  W[2].leftCols(k) = svd.matrixU().leftCols(k) * sv.head(k).asDiagonal();
  return p.pack(W);
}

}  // namespace

TEST(Ellipse, LossAtManifoldIsHalfNoiseSquared) {
  auto p = make_ellipse(1, 1);
  Vec t(2);
  t << 1, 0;
  EXPECT_NEAR(p->loss(t), 0.125, 1e-15);
  EXPECT_NEAR(p->grad(t).norm(), 0, 1e-15);
  EXPECT_DOUBLE_EQ(p->alpha(), 0.25);
  EXPECT_THROW(make_ellipse(0, 1), std::invalid_argument);
  EXPECT_THROW(make_ellipse(1, -1), std::invalid_argument);
}

TEST(Ellipse, PointAndAngleRoundTrip) {
  auto p = make_ellipse(1.25, 1);
  for (double phi : {-2.0, -0.3, 0.0, 0.6, 1.5, 3.0}) {
    Vec t = p->point(phi);
    EXPECT_LE(p->manifold_residual(t), 1e-14);
    EXPECT_NEAR(p->angle(t), phi, 1e-12);
  }
}

TEST(Ellipse, DerivativeChain) {
  Rng rng(1);
  check_chain(*make_ellipse(1.25, 1), rng, 1.0);
}

TEST(Ellipse, ThirdDirIdentityMatchesGradTraceH) {
  auto p = make_ellipse(1.25, 1);
  Mat I = Mat::Identity(2, 2);
  for (double phi : {0.1, 0.7, 2.0}) {
    Vec t = p->point(phi);
    Vec fd(2);
    for (int i = 0; i < 2; ++i) {
      Vec tp = t, tm = t;
      tp(i) += 1e-5;
      tm(i) -= 1e-5;
      fd(i) = (p->hessian(tp).trace() - p->hessian(tm).trace()) / 2e-5;
    }
    EXPECT_LE((p->third_dir(t, I) - fd).norm(), 1e-3);
  }
}

TEST(Ellipse, LabelNoiseIdentityOnManifold) {
  auto p = make_ellipse(1.25, 1);
  for (double phi : {0.0, 0.4, 1.1, 2.5, -1.0}) {
    Vec t = p->point(phi);
    Mat H = p->hessian(t);
    EXPECT_LE((p->noise_cov(t) - p->alpha() * H).norm(), 1e-6 * H.norm());
  }
}

TEST(Ellipse, NoiseIsTwoPointAndUnbiased) {
  auto p = make_ellipse(1.25, 1);
  Vec t = p->point(0.3);
  Rng rng(4);
  // On the manifold each draw is +-0.5 grad f.
  for (int k = 0; k < 50; ++k) {
    Vec g = p->sample_grad(t, 1, rng);
    EXPECT_NEAR(g.norm(), 0.5 * p->grad_f(t).norm(), 1e-12);
  }
  Vec off = 1.1 * t;
  check_unbiased(*p, off, 1, 5);
}

TEST(DiagNet, ConstructionAndExactFit) {
  auto p = make_diagnet(12, 6, 3, 1.0, 9);
  EXPECT_EQ((p->w_star().array() != 0).count(), 3);
  EXPECT_EQ(p->Z().cwiseAbs().minCoeff(), 1.0);
  EXPECT_EQ(p->Z().cwiseAbs().maxCoeff(), 1.0);
  Vec t = p->exact_fit();
  EXPECT_EQ(p->manifold_residual(t), 0.0);
  EXPECT_NEAR(p->train_mse(t), 0, 1e-15);
  EXPECT_NEAR(p->test_loss(t), 0, 1e-15);
  EXPECT_NEAR(p->loss(t), p->noise_floor(), 1e-15);
  EXPECT_THROW(make_diagnet(3, 4, 4, 1.0, 1), std::invalid_argument);
  // Same seed, same data.
  auto q = make_diagnet(12, 6, 3, 1.0, 9);
  EXPECT_EQ(p->Z(), q->Z());
  EXPECT_EQ(p->to_json()["checksum"], q->to_json()["checksum"]);
}

TEST(DiagNet, DerivativeChain) {
  Rng rng(2);
  check_chain(*make_diagnet(5, 4, 2, 0.7, 3), rng, 0.8);
}

TEST(DiagNet, HessianOnManifoldIsOuterProductSum) {
  auto p = make_diagnet(6, 4, 2, 1.0, 11);
  Rng rng(3);
  for (int k = 0; k < 5; ++k) {
    Vec t = diagnet_manifold_point(*p, rng);
    ASSERT_LE(p->manifold_residual(t), 1e-10);
    const int d = p->d();
    Mat expect = Mat::Zero(2 * d, 2 * d);
    for (int i = 0; i < p->n(); ++i) {
      Vec z = p->Z().row(i).transpose();
      Vec u(2 * d);
      u.head(d) = z.cwiseProduct(t.head(d));
      u.tail(d) = -z.cwiseProduct(t.tail(d));
      expect += (4.0 / p->n()) * u * u.transpose();
    }
    Mat H = p->hessian(t);
    EXPECT_LE((H - expect).norm(), 1e-9 * (1 + H.norm()));
    EXPECT_LE((H - fd_hess(*p, t, 1e-5)).norm(), 1e-4 * (1 + H.norm()));
    // Diagonal is 4 a_j^2, 4 b_j^2 since z^2 = 1.
    Vec dg(2 * d);
    dg << 4 * t.head(d).cwiseAbs2(), 4 * t.tail(d).cwiseAbs2();
    EXPECT_LE((H.diagonal() - dg).norm(), 1e-9);
  }
}

TEST(DiagNet, ThirdDirIdentityOnManifold) {
  auto p = make_diagnet(6, 4, 2, 1.0, 11);
  Vec t = p->exact_fit();
  const int d = p->d();
  Vec expect(2 * d);
  expect << 8 * t.head(d), 8 * t.tail(d);
  Mat I = Mat::Identity(2 * d, 2 * d);
  EXPECT_LE((p->third_dir(t, I) - expect).norm(), 1e-10);
  EXPECT_LE((p->third_dir(t, I) - fd_third(*p, t, I, 1e-4)).norm(), 1e-3);
}

TEST(DiagNet, LabelNoiseIdentity) {
  auto p = make_diagnet(6, 4, 2, 0.8, 13);
  Rng rng(6);
  for (int k = 0; k < 5; ++k) {
    Vec t = diagnet_manifold_point(*p, rng);
    Mat H = p->hessian(t);
    EXPECT_LE((p->noise_cov(t) - p->alpha() * H).norm(), 1e-6 * H.norm());
  }
}

TEST(DiagNet, Unbiased) {
  auto p = make_diagnet(5, 7, 2, 1.0, 21);
  Rng rng(1);
  check_unbiased(*p, 0.5 * rng.normal_vec(p->dim()), 2, 8);
}

TEST(DiagNet, ExplicitDesign) {
  Mat Z(2, 3);
  Z << 1, 1, -1, 1, -1, 1;
  Vec w(3);
  w << 1, 0, 0;
  DiagNetProblem p(Z, w, 0.5);
  EXPECT_EQ(p.kappa(), 1);
  EXPECT_EQ(p.manifold_residual(p.exact_fit()), 0.0);
  auto q = problem_from_json(p.to_json());
  EXPECT_EQ(q->to_json(), p.to_json());
}

TEST(MatFac, ExactFactorizationHasZeroLoss) {
  auto p = small_matfac(0.0);
  Vec t = matfac_exact(*p);
  EXPECT_LE((p->product(t) - p->M_star()).norm(), 1e-12);
  EXPECT_NEAR(p->loss(t), 0, 1e-20);
  EXPECT_NEAR(p->test_mse(t), 0, 1e-20);
  EXPECT_THROW(make_matfac({3, 1, 3}, 1, 4, 1, 0.1, 1), std::invalid_argument);
  EXPECT_THROW(make_matfac({3, 3}, 1, 4, 1, 0.1, 1), std::invalid_argument);
  EXPECT_THROW(make_matfac({3, 3, 3}, 4, 4, 1, 0.1, 1), std::invalid_argument);
}

TEST(MatFac, DerivativeChainDepthTwoAndFive) {
  Rng rng(3);
  check_chain(*small_matfac(0.3), rng, 0.7, 6);
  check_chain(*make_matfac({2, 2, 2, 2, 2, 2}, 1, 5, 1, 0.3, 5), rng, 0.9, 3);
}

TEST(MatFac, InnerGradientMatchesFiniteDifferences) {
  auto p = make_matfac({3, 4, 2, 2}, 1, 5, 1, 0.1, 8);
  Rng rng(2);
  Vec t = rng.normal_vec(p->dim());
  Mat A = rng.normal_mat(2, 3);
  Vec g = p->grad_inner(p->layers(t), A);
  Vec fd(p->dim());
  for (int i = 0; i < p->dim(); ++i) {
    Vec tp = t, tm = t;
    tp(i) += 1e-6;
    tm(i) -= 1e-6;
    fd(i) = (A.cwiseProduct(p->product(tp)).sum() - A.cwiseProduct(p->product(tm)).sum()) / 2e-6;
  }
  EXPECT_LE((g - fd).norm(), 1e-6 * (1 + g.norm()));
}

TEST(MatFac, LabelNoiseIdentityMonteCarlo) {
  auto p = small_matfac(0.5, 2);
  Vec t = matfac_exact(*p);
  ASSERT_LE(p->manifold_residual(t), 1e-10);
  Mat H = p->hessian(t);
  Mat analytic = p->noise_cov(t);
  EXPECT_LE((analytic - p->alpha() * H).norm(), 1e-6 * H.norm());
  // Empirical covariance from 1e5 draws; entrywise 3 sigma using the fourth-moment estimate.
  Rng rng(12);
  const int N = 100000, d = p->dim();
  Mat S = Mat::Zero(d, d), S4 = Mat::Zero(d, d);
  for (int k = 0; k < N; ++k) {
    Vec g = p->sample_grad(t, rng);
    Mat o = g * g.transpose();
    S += o;
    S4 += o.cwiseAbs2();
  }
  S /= N;
  S4 /= N;
  Mat se = ((S4 - S.cwiseAbs2()).cwiseMax(0.0) / N).cwiseSqrt();
  Mat target = p->alpha() * H;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) EXPECT_LE(std::abs(S(i, j) - target(i, j)), 3 * se(i, j) + 1e-12) << i << "," << j;
}

TEST(MatFac, Unbiased) {
  auto p = small_matfac(0.4, 3);
  Rng rng(7);
  check_unbiased(*p, 0.6 * rng.normal_vec(p->dim()), 3, 9);
}

TEST(Quadratic, ThirdDirIsZeroAndHessianConstant) {
  Mat H = Vec((Vec(3) << 2, 1, 0).finished()).asDiagonal();
  auto p = make_quadratic_label_noise(H, 0.5);
  Rng rng(1);
  for (int k = 0; k < 5; ++k) {
    Vec t = rng.normal_vec(3);
    Mat M = rng.normal_mat(3, 3);
    M = M + M.transpose();
    EXPECT_EQ(p->third_dir(t, M), Vec::Zero(3));
    EXPECT_EQ(p->hessian(t), H);
  }
  EXPECT_THROW(p->third_dir(Vec::Zero(2), Mat::Zero(2, 2)), std::invalid_argument);
  EXPECT_LE((p->noise_cov(Vec::Zero(3)) - 0.5 * H).norm(), 1e-15);
  check_chain(*p, rng, 1.0, 3);
  check_unbiased(*p, rng.normal_vec(3), 1, 3);
}

TEST(Quartic, ChainAndLabelNoise) {
  Vec y(4);
  y << 0.5, 1, 2, 4;
  auto p = make_quartic(y, 0.6);
  Rng rng(8);
  check_chain(*p, rng, 1.0, 5);
  Vec t = y.cwiseSqrt();
  t(1) = -t(1);
  Mat H = p->hessian(t);
  EXPECT_LE((H - Mat((4.0 / 4) * y.asDiagonal())).norm(), 1e-12);
  EXPECT_LE((p->noise_cov(t) - p->alpha() * H).norm(), 1e-6 * H.norm());
  check_unbiased(*p, 0.8 * t, 2, 4);
}

TEST(ProblemJson, RoundTrip) {
  std::vector<ProblemPtr> ps = {make_ellipse(1.25, 1, 0.5), make_diagnet(6, 4, 2, 1.0, 3),
                                small_matfac(0.5, 2), make_quartic(Vec::Ones(3), 0.5)};
  for (const auto& p : ps) {
    auto q = problem_from_json(p->to_json());
    EXPECT_EQ(q->to_json(), p->to_json()) << p->kind();
  }
}
