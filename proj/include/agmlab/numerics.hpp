#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace agmlab {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

inline constexpr double kRankRelTol = 1e-8;
inline constexpr double kEigFloor = 1e-12;

struct SymEig {
  Vec values;   // ascending
  Mat vectors;  // columns orthonormal
};

inline double max_asymmetry(const Mat& A) {
  double worst = 0.0;
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = i + 1; j < A.cols(); ++j) {
      double gap = std::abs(A(i, j) - A(j, i)) / (1.0 + std::abs(A(i, j)));
      worst = std::max(worst, gap);
    }
  return worst;
}

inline void require_symmetric(const Mat& A, const char* who) {
  if (A.rows() != A.cols())
    throw std::invalid_argument(std::string(who) + ": matrix is not square");
  double asym = max_asymmetry(A);
  if (asym > 1e-10) {
    std::ostringstream os;
    os << who << ": matrix not symmetric (max relative asymmetry " << asym << ")";
    throw std::invalid_argument(os.str());
  }
}

inline SymEig sym_eig(const Mat& A) {
  require_symmetric(A, "sym_eig");
  Mat sym = 0.5 * (A + A.transpose());
  Eigen::SelfAdjointEigenSolver<Mat> es(sym);
  if (es.info() != Eigen::Success) throw std::runtime_error("sym_eig: eigensolver failed");
  return {es.eigenvalues(), es.eigenvectors()};
}

// Eigenvalues below rel_threshold * lambda_max count as zero.
inline Mat pinv_psd(const Mat& A, double rel_threshold = kRankRelTol) {
  SymEig e = sym_eig(A);
  const Eigen::Index n = A.rows();
  double lmax = n ? std::max(e.values.cwiseAbs().maxCoeff(), 0.0) : 0.0;
  if (n && e.values(0) < -1e-10 * std::max(1.0, lmax))
    throw std::invalid_argument("pinv_psd: matrix has a negative eigenvalue " +
                                std::to_string(e.values(0)));
  Vec inv = Vec::Zero(n);
  for (Eigen::Index i = 0; i < n; ++i)
    if (e.values(i) > rel_threshold * lmax && e.values(i) > 0) inv(i) = 1.0 / e.values(i);
  return e.vectors * inv.asDiagonal() * e.vectors.transpose();
}

inline Mat kron(const Mat& A, const Mat& B) {
  Mat K(A.rows() * B.rows(), A.cols() * B.cols());
  for (Eigen::Index i = 0; i < A.rows(); ++i)
    for (Eigen::Index j = 0; j < A.cols(); ++j)
      K.block(i * B.rows(), j * B.cols(), B.rows(), B.cols()) = A(i, j) * B;
  return K;
}

// Row-major vectorization: x[i*q + j] = X(i, j).
inline Vec vec_rm(const Mat& X) {
  Vec x(X.size());
  for (Eigen::Index i = 0; i < X.rows(); ++i)
    for (Eigen::Index j = 0; j < X.cols(); ++j) x(i * X.cols() + j) = X(i, j);
  return x;
}

inline Mat unvec_rm(const Vec& x, Eigen::Index rows, Eigen::Index cols) {
  if (x.size() != rows * cols) throw std::invalid_argument("unvec_rm: size mismatch");
  Mat X(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) X(i, j) = x(i * cols + j);
  return X;
}

inline Mat sym_power(const Mat& A, double p, double eig_floor) {
  SymEig e = sym_eig(A);
  Vec d = e.values.unaryExpr([&](double l) { return std::pow(std::max(l, eig_floor), p); });
  return e.vectors * d.asDiagonal() * e.vectors.transpose();
}

inline Mat inv_sqrt_psd(const Mat& A, double eig_floor = kEigFloor) {
  if (!(eig_floor > 0)) throw std::invalid_argument("inv_sqrt_psd: eig_floor must be positive");
  Mat R = sym_power(A, -0.5, eig_floor);
  return 0.5 * (R + R.transpose());
}

// Symmetric PSD square root; negative rounding noise clamps to zero.
inline Mat sqrt_psd(const Mat& A) {
  SymEig e = sym_eig(A);
  Vec d = e.values.unaryExpr([](double l) { return std::sqrt(std::max(l, 0.0)); });
  Mat R = e.vectors * d.asDiagonal() * e.vectors.transpose();
  return 0.5 * (R + R.transpose());
}

// Projector P with P t = t on span(tangent) and P b = 0 on span(oblique).
inline Mat oblique_projector(const Mat& tangent, const Mat& oblique) {
  const Eigen::Index n = std::max(tangent.rows(), oblique.rows());
  if (tangent.cols() == 0) return Mat::Zero(n, n);
  if (oblique.cols() > 0 && tangent.rows() != oblique.rows())
    throw std::invalid_argument("oblique_projector: basis row mismatch");
  Mat C(n, tangent.cols() + oblique.cols());
  C << tangent, oblique;
  Eigen::FullPivLU<Mat> lu(C);
  lu.setThreshold(1e-10);
  if (C.cols() != n || lu.rank() != n)
    throw std::invalid_argument("oblique_projector: combined basis is rank deficient");
  Mat E = Mat::Zero(n, n);
  E.topLeftCorner(tangent.cols(), tangent.cols()).setIdentity();
  return C * E * lu.inverse();
}

// Orthonormal bases of null(H) and range(H) split at rel_threshold * lambda_max.
struct SpectralSplit {
  Mat null_basis;
  Mat range_basis;
  Vec range_values;
  bool ambiguous = false;
};

inline SpectralSplit split_spectrum(const Mat& H, double rel_threshold = kRankRelTol) {
  SymEig e = sym_eig(H);
  const Eigen::Index n = H.rows();
  double lmax = n ? e.values.cwiseAbs().maxCoeff() : 0.0;
  double cut = rel_threshold * lmax;
  std::vector<Eigen::Index> nul, rng;
  SpectralSplit s;
  for (Eigen::Index i = 0; i < n; ++i) {
    double l = e.values(i);
    if (l > cut) rng.push_back(i); else nul.push_back(i);
    if (l > 0.1 * cut && l < 10 * cut) s.ambiguous = true;
  }
  s.null_basis.resize(n, nul.size());
  s.range_basis.resize(n, rng.size());
  s.range_values.resize(rng.size());
  for (size_t k = 0; k < nul.size(); ++k) s.null_basis.col(k) = e.vectors.col(nul[k]);
  for (size_t k = 0; k < rng.size(); ++k) {
    s.range_basis.col(k) = e.vectors.col(rng[k]);
    s.range_values(k) = e.values(rng[k]);
  }
  return s;
}

inline std::uint64_t splitmix64(std::uint64_t& x) {
  std::uint64_t z = (x += 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed) {
    std::uint64_t s = seed;
    engine_.seed(splitmix64(s));
  }

  std::uint64_t seed() const { return seed_; }

  // Children depend only on (seed, i), never on how much this stream was consumed.
  Rng child(std::uint64_t i) const {
    std::uint64_t s = (seed_ ^ 0xD1B54A32D192ED03ull) + i * 0xA0761D6478BD642Full;
    return Rng(splitmix64(s));
  }

  std::vector<Rng> split(int k) const {
    std::vector<Rng> out;
    out.reserve(k);
    for (int i = 0; i < k; ++i) out.push_back(child(i));
    return out;
  }

  std::uint64_t next_u64() { return engine_(); }

  // 53-bit uniform in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  std::size_t index(std::size_t n) { return static_cast<std::size_t>(uniform() * n); }

  double sign() { return (engine_() >> 63) ? 1.0 : -1.0; }

  // Marsaglia polar method; self-contained so draws match across standard libraries.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  Vec normal_vec(Eigen::Index n) {
    Vec x(n);
    for (Eigen::Index i = 0; i < n; ++i) x(i) = normal();
    return x;
  }

  Mat normal_mat(Eigen::Index r, Eigen::Index c) {
    Mat X(r, c);
    for (Eigen::Index j = 0; j < c; ++j)
      for (Eigen::Index i = 0; i < r; ++i) X(i, j) = normal();
    return X;
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

inline Mat random_orthogonal(Eigen::Index n, Rng& rng) {
  Eigen::HouseholderQR<Mat> qr(rng.normal_mat(n, n));
  return qr.householderQ() * Mat::Identity(n, n);
}

inline bool all_finite(const Vec& x) { return x.allFinite(); }

}  // namespace agmlab
