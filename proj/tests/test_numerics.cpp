#include "agmlab/numerics.hpp"

#include <gtest/gtest.h>

using namespace agmlab;

namespace {

Mat random_sym(int n, Rng& rng) {
  Mat A = rng.normal_mat(n, n);
  return 0.5 * (A + A.transpose());
}

Mat mat2(double a, double b, double c, double d) {
  Mat M(2, 2);
  M << a, b, c, d;
  return M;
}

}  // namespace

TEST(SymEig, DiagonalInputSortsAndPermutes) {
  Mat A = Vec((Vec(3) << 3, 1, 2).finished()).asDiagonal();
  SymEig e = sym_eig(A);
  EXPECT_NEAR(e.values(0), 1, 1e-14);
  EXPECT_NEAR(e.values(1), 2, 1e-14);
  EXPECT_NEAR(e.values(2), 3, 1e-14);
  EXPECT_NEAR(std::abs(e.vectors(1, 0)), 1, 1e-14);
  EXPECT_NEAR(std::abs(e.vectors(2, 1)), 1, 1e-14);
  EXPECT_NEAR(std::abs(e.vectors(0, 2)), 1, 1e-14);
}

TEST(SymEig, SwapMatrix) {
  SymEig e = sym_eig(mat2(0, 1, 1, 0));
  EXPECT_NEAR(e.values(0), -1, 1e-14);
  EXPECT_NEAR(e.values(1), 1, 1e-14);
  const double r = 1 / std::sqrt(2.0);
  EXPECT_NEAR(std::abs(e.vectors(0, 0)), r, 1e-14);
  EXPECT_NEAR(e.vectors(0, 0) * e.vectors(1, 0), -0.5, 1e-14);
  EXPECT_NEAR(e.vectors(0, 1) * e.vectors(1, 1), 0.5, 1e-14);
}

TEST(SymEig, ConstructedRankTwoDeficiency) {
  Rng rng(3);
  Mat Q = random_orthogonal(3, rng);
  Mat A = Q * Vec((Vec(3) << 0, 0, 5).finished()).asDiagonal() * Q.transpose();
  A = 0.5 * (A + A.transpose());
  SymEig e = sym_eig(A);
  EXPECT_NEAR(e.values(0), 0, 1e-9);
  EXPECT_NEAR(e.values(1), 0, 1e-9);
  EXPECT_NEAR(e.values(2), 5, 1e-9);
}

TEST(SymEig, RejectsAsymmetric) { EXPECT_THROW(sym_eig(mat2(1, 2, 0, 1)), std::invalid_argument); }

TEST(SymEig, ReconstructionProperty) {
  Rng rng(11);
  for (int n : {1, 2, 5, 17, 50}) {
    Mat A = random_sym(n, rng);
    SymEig e = sym_eig(A);
    Mat R = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
    EXPECT_LE((R - A).norm(), 1e-8 * (1 + A.norm()));
    EXPECT_LE((e.vectors.transpose() * e.vectors - Mat::Identity(n, n)).norm(), 1e-10 * n);
    for (int i = 1; i < n; ++i) EXPECT_LE(e.values(i - 1), e.values(i));
  }
}

TEST(PinvPsd, Examples) {
  Mat D = mat2(2, 0, 0, 0);
  Mat P = pinv_psd(D, 1e-8);
  EXPECT_NEAR(P(0, 0), 0.5, 1e-15);
  EXPECT_NEAR(P(1, 1), 0.0, 1e-15);
  EXPECT_LE((pinv_psd(Mat::Identity(4, 4)) - Mat::Identity(4, 4)).norm(), 1e-14);
  Vec x(3);
  x << 2, 0, 0;
  Rng rng(5);
  x = random_orthogonal(3, rng) * x;  // ||x|| = 2
  Mat X = x * x.transpose();
  EXPECT_LE((pinv_psd(0.5 * (X + X.transpose())) - X / 16).norm(), 1e-12);
}

TEST(PinvPsd, RejectsNegative) { EXPECT_THROW(pinv_psd(mat2(1, 0, 0, -1)), std::invalid_argument); }

TEST(PinvPsd, PenroseOnRetainedSubspace) {
  Rng rng(8);
  Mat B = rng.normal_mat(6, 3);
  Mat A = B * B.transpose();
  A = 0.5 * (A + A.transpose());
  Mat Ap = pinv_psd(A);
  EXPECT_LE((A * Ap * A - A).norm(), 1e-9 * A.norm());
}

TEST(Kron, Examples) {
  EXPECT_EQ(kron(Mat::Identity(2, 2), Mat::Identity(3, 3)), Mat::Identity(6, 6));
  Mat a(1, 1), b(1, 1);
  a << 2;
  b << 3;
  EXPECT_EQ(kron(a, b)(0, 0), 6);
  Mat K = kron(mat2(1, 0, 0, 2), mat2(3, 0, 0, 4));
  Vec expect(4);
  expect << 3, 4, 6, 8;
  EXPECT_EQ(Mat(K.diagonal().asDiagonal()), K);
  EXPECT_EQ(K.diagonal(), expect);
}

TEST(Kron, VecIdentityProperty) {
  // Row-major vec: vec(A X B') = (A kron B) vec(X).
  Rng rng(21);
  for (int t = 0; t < 10; ++t) {
    Mat A = rng.normal_mat(3, 4), B = rng.normal_mat(2, 5), X = rng.normal_mat(4, 5);
    Vec lhs = vec_rm(A * X * B.transpose());
    Vec rhs = kron(A, B) * vec_rm(X);
    EXPECT_LE((lhs - rhs).norm(), 1e-10 * (1 + lhs.norm()));
    EXPECT_EQ(unvec_rm(vec_rm(X), 4, 5), X);
  }
}

TEST(InvSqrtPsd, Examples) {
  EXPECT_LE((inv_sqrt_psd(Mat::Identity(3, 3)) - Mat::Identity(3, 3)).norm(), 1e-14);
  Mat R = inv_sqrt_psd(mat2(4, 0, 0, 9));
  EXPECT_NEAR(R(0, 0), 0.5, 1e-14);
  EXPECT_NEAR(R(1, 1), 1.0 / 3, 1e-14);
  Mat F = inv_sqrt_psd(mat2(0, 0, 0, 1), 1e-12);
  EXPECT_NEAR(F(0, 0), 1e6, 1e-6);
  EXPECT_NEAR(F(1, 1), 1, 1e-14);
  EXPECT_THROW(inv_sqrt_psd(Mat::Identity(2, 2), 0.0), std::invalid_argument);
}

TEST(InvSqrtPsd, ConsistencyProperty) {
  Rng rng(4);
  for (int n : {2, 5, 12}) {
    Mat B = rng.normal_mat(n, n);
    Mat A = B * B.transpose() + 0.1 * Mat::Identity(n, n);
    A = 0.5 * (A + A.transpose());
    Mat R = inv_sqrt_psd(A);
    EXPECT_LE((R * A * R - Mat::Identity(n, n)).norm(), 1e-7);
    EXPECT_LE((R - R.transpose()).norm(), 1e-12);
    Mat Q = sqrt_psd(A);
    EXPECT_LE((Q * Q - A).norm(), 1e-9 * A.norm());
  }
}

TEST(ObliqueProjector, Examples) {
  Mat e1 = Vec::Unit(2, 0), e2 = Vec::Unit(2, 1);
  Mat P = oblique_projector(e2, e1);
  EXPECT_LE((P - mat2(0, 0, 0, 1)).norm(), 1e-14);
  Mat ones = Vec::Ones(2);
  Mat Q = oblique_projector(e2, ones);
  EXPECT_LE((Q - mat2(0, 0, -1, 1)).norm(), 1e-14);
  Mat empty(2, 0);
  EXPECT_EQ(oblique_projector(empty, Mat::Identity(2, 2)), Mat::Zero(2, 2));
  EXPECT_THROW(oblique_projector(e1, e1), std::invalid_argument);
}

TEST(ObliqueProjector, Property) {
  Rng rng(9);
  for (int t = 0; t < 20; ++t) {
    int n = 2 + t % 6, k = 1 + t % (n - 1);
    Mat T = rng.normal_mat(n, k), B = rng.normal_mat(n, n - k);
    Mat P = oblique_projector(T, B);
    EXPECT_LE((P * P - P).norm(), 1e-8);
    EXPECT_LE((P * T - T).norm(), 1e-8);
    EXPECT_LE((P * B).norm(), 1e-8);
  }
}

TEST(SplitSpectrum, FlagsAmbiguousGap) {
  Vec d(3);
  d << 1.0, 5e-8, 0.0;  // one eigenvalue within 10x of the threshold
  EXPECT_TRUE(split_spectrum(Mat(d.asDiagonal()), 1e-8).ambiguous);
  d << 1.0, 0.5, 0.0;
  SpectralSplit s = split_spectrum(Mat(d.asDiagonal()), 1e-8);
  EXPECT_FALSE(s.ambiguous);
  EXPECT_EQ(s.null_basis.cols(), 1);
  EXPECT_EQ(s.range_basis.cols(), 2);
}

TEST(Rng, DeterministicAndSplittable) {
  Rng a(42), b(42);
  for (int i = 0; i < 1000; ++i) ASSERT_EQ(a.next_u64(), b.next_u64());
  Rng c(42);
  for (int i = 0; i < 7; ++i) c.normal();
  // Children depend only on the seed and index.
  EXPECT_EQ(Rng(42).child(3).next_u64(), c.child(3).next_u64());
  auto kids = Rng(42).split(4);
  EXPECT_NE(kids[0].next_u64(), kids[1].next_u64());
  Rng d(42), e(42);
  Vec x = d.normal_vec(100), y = e.normal_vec(100);
  EXPECT_EQ(x, y);
}

TEST(Rng, MomentsAreSane) {
  Rng r(1);
  const int n = 200000;
  double s = 0, s2 = 0, sg = 0;
  for (int i = 0; i < n; ++i) {
    double z = r.normal();
    s += z;
    s2 += z * z;
    sg += r.sign();
  }
  EXPECT_NEAR(s / n, 0, 4 / std::sqrt(double(n)));
  EXPECT_NEAR(s2 / n, 1, 0.02);
  EXPECT_NEAR(sg / n, 0, 4 / std::sqrt(double(n)));
}
