#pragma once

#include "agmlab/numerics.hpp"

#include <json.hpp>

#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace agmlab {

using json = nlohmann::json;

// FNV-1a over raw doubles; used to pin datasets in serialized problems.
inline std::uint64_t checksum(const double* p, std::size_t n, std::uint64_t h = 1469598103934665603ull) {
  const unsigned char* b = reinterpret_cast<const unsigned char*>(p);
  for (std::size_t i = 0; i < n * sizeof(double); ++i) {
    h ^= b[i];
    h *= 1099511628211ull;
  }
  return h;
}

class Problem {
 public:
  virtual ~Problem() = default;

  virtual std::string kind() const = 0;
  virtual int dim() const = 0;
  // Expected training loss, label noise included.
  virtual double loss(const Vec& theta) const = 0;
  virtual Vec grad(const Vec& theta) const = 0;
  virtual Mat hessian(const Vec& theta) const = 0;
  virtual Vec hessian_diag(const Vec& theta) const { return hessian(theta).diagonal(); }
  // Returns sum_i <d^2(grad L)_i, M> e_i.
  virtual Vec third_dir(const Vec& theta, const Mat& M) const = 0;
  // third_dir with M = Diag(s); equals sum_j s_j grad(H_jj).
  virtual Vec third_diag(const Vec& theta, const Vec& s) const {
    Mat M = s.asDiagonal();
    return third_dir(theta, M);
  }
  virtual Vec sample_grad(const Vec& theta, int batch, Rng& rng) const = 0;
  Vec sample_grad(const Vec& theta, Rng& rng) const { return sample_grad(theta, batch_, rng); }
  virtual Mat noise_cov(const Vec& theta) const = 0;
  // Sigma = alpha * H on the manifold; NaN when the problem has no label-noise structure.
  virtual double alpha() const = 0;
  virtual double manifold_residual(const Vec& theta) const = 0;
  // Loss value attained on the manifold.
  virtual double noise_floor() const { return 0.0; }
  virtual json to_json() const = 0;

  int batch() const { return batch_; }
  void set_batch(int b) {
    if (b < 1) throw std::invalid_argument("batch must be >= 1");
    batch_ = b;
  }

  void check_dim(const Vec& theta, const char* who) const {
    if (theta.size() != dim())
      throw std::invalid_argument(std::string(who) + ": expected dimension " + std::to_string(dim()) +
                                  ", got " + std::to_string(theta.size()));
  }
  void check_square(const Mat& M, const char* who) const {
    if (M.rows() != dim() || M.cols() != dim())
      throw std::invalid_argument(std::string(who) + ": matrix shape does not match dimension " +
                                  std::to_string(dim()));
  }

 protected:
  int batch_ = 1;
};

using ProblemPtr = std::shared_ptr<const Problem>;

// ---------------------------------------------------------------- ellipse

class EllipseProblem final : public Problem {
 public:
  EllipseProblem(double a, double b, double noise) : a_(a), b_(b), noise_(noise) {
    if (!(a > 0) || !(b > 0)) throw std::invalid_argument("make_ellipse: semi-axes must be positive");
    if (noise < 0) throw std::invalid_argument("make_ellipse: noise must be non-negative");
    double p = 1.0 / (a * a), q = 1.0 / (b * b);
    F_ << p + q, p - q, p - q, p + q;
  }

  using Problem::sample_grad;
  std::string kind() const override { return "ellipse"; }
  int dim() const override { return 2; }
  double a() const { return a_; }
  double b() const { return b_; }
  double noise() const { return noise_; }

  double f(const Vec& t) const {
    double s = t(0) + t(1), d = t(1) - t(0);
    return s * s / (2 * a_ * a_) + d * d / (2 * b_ * b_);
  }
  Vec grad_f(const Vec& t) const { return F_ * t; }
  const Eigen::Matrix2d& hess_f() const { return F_; }

  double loss(const Vec& t) const override {
    check_dim(t, "ellipse.loss");
    double r = f(t) - 1;
    return 0.5 * r * r + 0.5 * noise_ * noise_;
  }
  Vec grad(const Vec& t) const override {
    check_dim(t, "ellipse.grad");
    return (f(t) - 1) * grad_f(t);
  }
  Mat hessian(const Vec& t) const override {
    check_dim(t, "ellipse.hessian");
    Vec g = grad_f(t);
    Mat H = g * g.transpose() + (f(t) - 1) * Mat(F_);
    return H;
  }
  Vec third_dir(const Vec& t, const Mat& M) const override {
    check_dim(t, "ellipse.third_dir");
    check_square(M, "ellipse.third_dir");
    Vec g = grad_f(t);
    Mat F = F_;
    Mat Ms = 0.5 * (M + M.transpose());
    return 2.0 * F * Ms * g + (F.cwiseProduct(Ms)).sum() * g;
  }
  Vec sample_grad(const Vec& t, int batch, Rng& rng) const override {
    check_dim(t, "ellipse.sample_grad");
    double r = f(t) - 1, acc = 0;
    for (int k = 0; k < batch; ++k) acc += r - noise_ * rng.sign();
    return (acc / batch) * grad_f(t);
  }
  Mat noise_cov(const Vec& t) const override {
    Vec g = grad_f(t);
    return (noise_ * noise_ / batch_) * g * g.transpose();
  }
  double alpha() const override { return noise_ * noise_ / batch_; }
  double manifold_residual(const Vec& t) const override { return std::abs(f(t) - 1); }
  double noise_floor() const override { return 0.5 * noise_ * noise_; }

  // Manifold point at ellipse angle phi: (x+y)/sqrt2 = a cos phi, (y-x)/sqrt2 = b sin phi.
  Vec point(double phi) const {
    double p = a_ * std::cos(phi), q = b_ * std::sin(phi);
    Vec t(2);
    t << (p - q) / std::sqrt(2.0), (p + q) / std::sqrt(2.0);
    return t;
  }
  double angle(const Vec& t) const {
    double p = (t(0) + t(1)) / std::sqrt(2.0), q = (t(1) - t(0)) / std::sqrt(2.0);
    return std::atan2(q / b_, p / a_);
  }

  json to_json() const override {
    return {{"kind", kind()}, {"a", a_}, {"b", b_}, {"noise", noise_}, {"batch", batch_}};
  }

 private:
  double a_, b_, noise_;
  Eigen::Matrix2d F_;
};

inline std::shared_ptr<EllipseProblem> make_ellipse(double a, double b, double noise = 0.5) {
  return std::make_shared<EllipseProblem>(a, b, noise);
}

// ---------------------------------------------------------------- diagonal net

// theta = (a, b) in R^{2d}; estimate w = a*a - b*b.
class DiagNetProblem final : public Problem {
 public:
  DiagNetProblem(int d, int n, int kappa, double noise_std, std::uint64_t seed, double signal = 1.0)
      : d_(d), n_(n), kappa_(kappa), noise_std_(noise_std), seed_(seed), signal_(signal) {
    if (d < 1 || n < 1) throw std::invalid_argument("make_diagnet: d and n must be positive");
    if (kappa < 0 || kappa > d) throw std::invalid_argument("make_diagnet: kappa must lie in [0, d]");
    if (noise_std < 0) throw std::invalid_argument("make_diagnet: noise_std must be non-negative");
    Rng rng(seed);
    Rng support_rng = rng.child(0), data_rng = rng.child(1);
    w_star_ = Vec::Zero(d);
    std::vector<int> idx(d);
    for (int i = 0; i < d; ++i) idx[i] = i;
    for (int i = 0; i < kappa; ++i) {
      int j = i + static_cast<int>(support_rng.index(d - i));
      std::swap(idx[i], idx[j]);
      w_star_(idx[i]) = signal * support_rng.sign();
    }
    Z_.resize(n, d);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) Z_(i, j) = data_rng.sign();
    y_ = Z_ * w_star_;
    Zt_ = Z_.transpose();
  }

  // Explicit design and target.
  DiagNetProblem(Mat Z, Vec w_star, double noise_std)
      : d_(static_cast<int>(Z.cols())), n_(static_cast<int>(Z.rows())), kappa_(0), noise_std_(noise_std),
        seed_(0), signal_(0), explicit_(true), Z_(std::move(Z)), w_star_(std::move(w_star)) {
    if (d_ < 1 || n_ < 1) throw std::invalid_argument("make_diagnet: empty design");
    if (w_star_.size() != d_) throw std::invalid_argument("make_diagnet: w_star dimension mismatch");
    if (noise_std < 0) throw std::invalid_argument("make_diagnet: noise_std must be non-negative");
    kappa_ = static_cast<int>((w_star_.array() != 0).count());
    y_ = Z_ * w_star_;
    Zt_ = Z_.transpose();
  }

  using Problem::sample_grad;
  std::string kind() const override { return "diagnet"; }
  int dim() const override { return 2 * d_; }
  int d() const { return d_; }
  int n() const { return n_; }
  int kappa() const { return kappa_; }
  double noise_std() const { return noise_std_; }
  const Mat& Z() const { return Z_; }
  const Vec& y() const { return y_; }
  const Vec& w_star() const { return w_star_; }

  Vec w_hat(const Vec& t) const {
    auto a = t.head(d_), b = t.tail(d_);
    return a.cwiseProduct(a) - b.cwiseProduct(b);
  }
  Vec residuals(const Vec& t) const { return Z_ * w_hat(t) - y_; }

  double loss(const Vec& t) const override {
    check_dim(t, "diagnet.loss");
    return 0.5 * residuals(t).squaredNorm() / n_ + 0.5 * noise_std_ * noise_std_;
  }
  Vec grad(const Vec& t) const override {
    check_dim(t, "diagnet.grad");
    Vec q = Z_.transpose() * residuals(t) / n_;
    Vec g(2 * d_);
    g.head(d_) = 2.0 * t.head(d_).cwiseProduct(q);
    g.tail(d_) = -2.0 * t.tail(d_).cwiseProduct(q);
    return g;
  }
  // Rows are grad r_i = (2 z_i * a, -2 z_i * b).
  Mat jacobian(const Vec& t) const {
    Mat J(n_, 2 * d_);
    J.leftCols(d_) = 2.0 * Z_ * t.head(d_).asDiagonal();
    J.rightCols(d_) = -2.0 * Z_ * t.tail(d_).asDiagonal();
    return J;
  }
  Mat hessian(const Vec& t) const override {
    check_dim(t, "diagnet.hessian");
    Mat J = jacobian(t);
    Vec q = Z_.transpose() * residuals(t) / n_;
    Mat H = J.transpose() * J / n_;
    H.diagonal().head(d_) += 2.0 * q;
    H.diagonal().tail(d_) -= 2.0 * q;
    return H;
  }
  Vec hessian_diag(const Vec& t) const override {
    check_dim(t, "diagnet.hessian_diag");
    Vec q = Z_.transpose() * residuals(t) / n_;
    Vec h(2 * d_);
    // z_ij^2 = 1
    h.head(d_) = 4.0 * t.head(d_).cwiseAbs2() + 2.0 * q;
    h.tail(d_) = 4.0 * t.tail(d_).cwiseAbs2() - 2.0 * q;
    return h;
  }
  Vec third_dir(const Vec& t, const Mat& M) const override {
    check_dim(t, "diagnet.third_dir");
    check_square(M, "diagnet.third_dir");
    Mat Ms = 0.5 * (M + M.transpose());
    Mat J = jacobian(t);
    Mat MJ = Ms * J.transpose();  // 2d x n
    Vec m = Ms.diagonal().head(d_) - Ms.diagonal().tail(d_);
    Vec c = Z_ * m;  // n
    Vec out(2 * d_);
    for (int k = 0; k < d_; ++k) {
      double sa = 0, sb = 0;
      for (int i = 0; i < n_; ++i) {
        sa += Z_(i, k) * MJ(k, i);
        sb += Z_(i, k) * MJ(d_ + k, i);
      }
      out(k) = 4.0 * sa / n_;
      out(d_ + k) = -4.0 * sb / n_;
    }
    out += 2.0 * J.transpose() * c / n_;
    return out;
  }
  Vec third_diag(const Vec& t, const Vec& s) const override {
    check_dim(t, "diagnet.third_diag");
    auto a = t.head(d_), b = t.tail(d_);
    Vec c = Z_ * (s.head(d_) - s.tail(d_));
    Vec zc = Z_.transpose() * c / n_;
    Vec out(2 * d_);
    out.head(d_) = 8.0 * s.head(d_).cwiseProduct(a) + 4.0 * a.cwiseProduct(zc);
    out.tail(d_) = 8.0 * s.tail(d_).cwiseProduct(b) - 4.0 * b.cwiseProduct(zc);
    return out;
  }
  Vec sample_grad(const Vec& t, int batch, Rng& rng) const override {
    check_dim(t, "diagnet.sample_grad");
    Vec w = w_hat(t);
    Vec q = Vec::Zero(d_);
    for (int k = 0; k < batch; ++k) {
      std::size_t i = rng.index(n_);
      double r = Zt_.col(i).dot(w) - y_(i) + noise_std_ * rng.normal();
      q += r * Zt_.col(i);
    }
    q /= batch;
    Vec g(2 * d_);
    g.head(d_) = 2.0 * t.head(d_).cwiseProduct(q);
    g.tail(d_) = -2.0 * t.tail(d_).cwiseProduct(q);
    return g;
  }
  Mat noise_cov(const Vec& t) const override {
    Mat J = jacobian(t);
    Vec r = residuals(t);
    Vec wts = (r.cwiseAbs2().array() + noise_std_ * noise_std_).matrix() / n_;
    Mat C = J.transpose() * wts.asDiagonal() * J;
    Vec g = grad(t);
    C -= g * g.transpose();
    return C / batch_;
  }
  double alpha() const override { return noise_std_ * noise_std_ / batch_; }
  double manifold_residual(const Vec& t) const override { return residuals(t).cwiseAbs().maxCoeff(); }
  double noise_floor() const override { return 0.5 * noise_std_ * noise_std_; }

  // Expected test loss over fresh Rademacher inputs: 0.5 * ||w - w*||^2.
  double test_loss(const Vec& t) const { return 0.5 * (w_hat(t) - w_star_).squaredNorm(); }
  double train_mse(const Vec& t) const { return 0.5 * residuals(t).squaredNorm() / n_; }

  // Exact-fit point: a = sqrt(w*_+), b = sqrt(w*_-).
  Vec exact_fit() const {
    Vec t(2 * d_);
    for (int j = 0; j < d_; ++j) {
      t(j) = std::sqrt(std::max(w_star_(j), 0.0));
      t(d_ + j) = std::sqrt(std::max(-w_star_(j), 0.0));
    }
    return t;
  }

  json to_json() const override {
    std::uint64_t h = checksum(Z_.data(), Z_.size());
    h = checksum(w_star_.data(), w_star_.size(), h);
    json j{{"kind", kind()}, {"d", d_},           {"n", n_},         {"kappa", kappa_}, {"noise_std", noise_std_},
           {"seed", seed_},  {"signal", signal_}, {"batch", batch_}, {"checksum", h}};
    if (explicit_) {
      j["Z"] = std::vector<double>(Z_.data(), Z_.data() + Z_.size());
      j["w_star"] = std::vector<double>(w_star_.data(), w_star_.data() + w_star_.size());
    }
    return j;
  }

 private:
  int d_, n_, kappa_;
  double noise_std_;
  std::uint64_t seed_;
  double signal_;
  bool explicit_ = false;
  Mat Z_, Zt_;  // Zt_ keeps samples contiguous
  Vec y_, w_star_;
};

inline std::shared_ptr<DiagNetProblem> make_diagnet(int d, int n, int kappa, double noise_std,
                                                    std::uint64_t seed) {
  return std::make_shared<DiagNetProblem>(d, n, kappa, noise_std, seed);
}

// ---------------------------------------------------------------- deep matrix factorization

// theta = (vec W_1, ..., vec W_L), W_j in R^{d_j x d_{j-1}}, row-major; product P = W_L ... W_1.
// Per-sample loss (<A_i, P> - b_i + xi)^2, no 1/2 factor.
class MatFacProblem final : public Problem {
 public:
  MatFacProblem(std::vector<int> dims, int rank, int n_meas, int batch, double sigma, std::uint64_t seed)
      : dims_(std::move(dims)), rank_(rank), n_(n_meas), sigma_(sigma), seed_(seed) {
    if (dims_.size() < 3) throw std::invalid_argument("make_matfac: need at least two layers");
    int lo = std::min(dims_.front(), dims_.back());
    for (int di : dims_)
      if (di < 1 || di < lo) throw std::invalid_argument("make_matfac: every d_i must be >= min(d_0, d_L)");
    if (rank < 1 || rank > lo) throw std::invalid_argument("make_matfac: rank must lie in [1, min(d_0, d_L)]");
    if (n_meas < 1) throw std::invalid_argument("make_matfac: need at least one measurement");
    if (sigma < 0) throw std::invalid_argument("make_matfac: sigma must be non-negative");
    set_batch(batch);
    L_ = static_cast<int>(dims_.size()) - 1;
    offsets_.push_back(0);
    for (int j = 1; j <= L_; ++j) offsets_.push_back(offsets_.back() + dims_[j] * dims_[j - 1]);
    Rng rng(seed);
    Rng gt = rng.child(0), meas = rng.child(1);
    Mat U = gt.normal_mat(dims_.back(), rank), V = gt.normal_mat(dims_.front(), rank);
    M_star_ = U * V.transpose() / std::sqrt(static_cast<double>(rank));
    A_.reserve(n_);
    b_.resize(n_);
    for (int i = 0; i < n_; ++i) {
      A_.push_back(meas.normal_mat(dims_.back(), dims_.front()));
      b_(i) = (A_.back().cwiseProduct(M_star_)).sum();
    }
  }

  using Problem::sample_grad;
  std::string kind() const override { return "matfac"; }
  int dim() const override { return offsets_.back(); }
  int depth() const { return L_; }
  const std::vector<int>& dims() const { return dims_; }
  const Mat& M_star() const { return M_star_; }
  int n() const { return n_; }

  std::vector<Mat> layers(const Vec& t) const {
    std::vector<Mat> W(L_ + 1);
    for (int j = 1; j <= L_; ++j)
      W[j] = unvec_rm(t.segment(offsets_[j - 1], dims_[j] * dims_[j - 1]), dims_[j], dims_[j - 1]);
    return W;
  }
  Vec pack(const std::vector<Mat>& W) const {
    Vec t(dim());
    for (int j = 1; j <= L_; ++j) t.segment(offsets_[j - 1], W[j].size()) = vec_rm(W[j]);
    return t;
  }
  Mat product(const Vec& t) const { return product(layers(t)); }
  Mat product(const std::vector<Mat>& W) const {
    Mat P = W[1];
    for (int j = 2; j <= L_; ++j) P = W[j] * P;
    return P;
  }

  // Gradient of <G, W_L...W_1> with respect to theta.
  Vec grad_inner(const std::vector<Mat>& W, const Mat& G) const {
    std::vector<Mat> R(L_ + 1), Lf(L_ + 2);
    R[1] = Mat::Identity(dims_[0], dims_[0]);
    for (int j = 1; j < L_; ++j) R[j + 1] = W[j] * R[j];
    Lf[L_] = Mat::Identity(dims_[L_], dims_[L_]);
    for (int j = L_; j > 1; --j) Lf[j - 1] = Lf[j] * W[j];
    Vec g(dim());
    for (int j = 1; j <= L_; ++j)
      g.segment(offsets_[j - 1], W[j].size()) = vec_rm(Lf[j].transpose() * G * R[j].transpose());
    return g;
  }

  // Hessian of theta -> <G, W_L...W_1> for fixed G; zero diagonal blocks.
  Mat hess_inner(const std::vector<Mat>& W, const Mat& G) const {
    const int D = dim();
    Mat Hm = Mat::Zero(D, D);
    for (int j = 1; j <= L_; ++j) {
      Mat Rj = Mat::Identity(dims_[0], dims_[0]);
      for (int s = 1; s < j; ++s) Rj = W[s] * Rj;
      for (int k = j + 1; k <= L_; ++k) {
        Mat Lk = Mat::Identity(dims_[L_], dims_[L_]);
        for (int s = L_; s > k; --s) Lk = Lk * W[s];
        Mat Mid = Mat::Identity(dims_[j], dims_[j]);
        for (int s = j + 1; s < k; ++s) Mid = W[s] * Mid;  // d_{k-1} x d_j
        Mat X = Lk.transpose() * G * Rj.transpose();      // d_k x d_{j-1}
        const int rk = dims_[k], ck = dims_[k - 1], rj = dims_[j], cj = dims_[j - 1];
        for (int p = 0; p < rk; ++p)
          for (int q = 0; q < ck; ++q)
            for (int s = 0; s < rj; ++s)
              for (int t = 0; t < cj; ++t) {
                double v = X(p, t) * Mid(q, s);
                int ik = offsets_[k - 1] + p * ck + q, ij = offsets_[j - 1] + s * cj + t;
                Hm(ik, ij) = v;
                Hm(ij, ik) = v;
              }
      }
    }
    return Hm;
  }

  Vec residuals(const Vec& t) const {
    Mat P = product(t);
    Vec r(n_);
    for (int i = 0; i < n_; ++i) r(i) = A_[i].cwiseProduct(P).sum() - b_(i);
    return r;
  }
  Mat jacobian(const Vec& t) const {
    auto W = layers(t);
    Mat J(n_, dim());
    for (int i = 0; i < n_; ++i) J.row(i) = grad_inner(W, A_[i]).transpose();
    return J;
  }
  Mat weighted_A(const Vec& w) const {
    Mat G = Mat::Zero(dims_.back(), dims_.front());
    for (int i = 0; i < n_; ++i) G += w(i) * A_[i];
    return G;
  }

  double loss(const Vec& t) const override {
    check_dim(t, "matfac.loss");
    return residuals(t).squaredNorm() / n_ + sigma_ * sigma_;
  }
  Vec grad(const Vec& t) const override {
    check_dim(t, "matfac.grad");
    return grad_inner(layers(t), weighted_A(2.0 * residuals(t) / n_));
  }
  Mat hessian(const Vec& t) const override {
    check_dim(t, "matfac.hessian");
    auto W = layers(t);
    Mat J = jacobian(t);
    Mat H = 2.0 * J.transpose() * J / n_;
    H += hess_inner(W, weighted_A(2.0 * residuals(t) / n_));
    return 0.5 * (H + H.transpose());
  }
  // Diagonal blocks of the product Hessian vanish, so only J contributes.
  Vec hessian_diag(const Vec& t) const override {
    check_dim(t, "matfac.hessian_diag");
    Mat J = jacobian(t);
    return 2.0 * J.cwiseAbs2().colwise().sum().transpose() / n_;
  }
  Vec third_dir(const Vec& t, const Mat& M) const override {
    check_dim(t, "matfac.third_dir");
    check_square(M, "matfac.third_dir");
    Mat Ms = 0.5 * (M + M.transpose());
    if (L_ == 2) {
      auto W = layers(t);
      Mat J = jacobian(t);
      Vec out = Vec::Zero(dim());
      for (int i = 0; i < n_; ++i) {
        Mat Hi = hess_inner(W, A_[i]);
        Vec Ji = J.row(i).transpose();
        out += (4.0 / n_) * (Hi * (Ms * Ji));
        out += (2.0 / n_) * Hi.cwiseProduct(Ms).sum() * Ji;
      }
      return out;
    }
    // Deeper products: central differences of <H, M>.
    Vec out(dim());
    for (int k = 0; k < dim(); ++k) {
      double h = 1e-5 * (1.0 + std::abs(t(k)));
      Vec tp = t, tm = t;
      tp(k) += h;
      tm(k) -= h;
      out(k) = (hessian(tp).cwiseProduct(Ms).sum() - hessian(tm).cwiseProduct(Ms).sum()) / (2 * h);
    }
    return out;
  }
  Vec sample_grad(const Vec& t, int batch, Rng& rng) const override {
    check_dim(t, "matfac.sample_grad");
    auto W = layers(t);
    Mat P = product(W);
    Mat G = Mat::Zero(dims_.back(), dims_.front());
    for (int k = 0; k < batch; ++k) {
      std::size_t i = rng.index(n_);
      double r = A_[i].cwiseProduct(P).sum() - b_(i) + sigma_ * rng.normal();
      G += (2.0 / batch) * r * A_[i];
    }
    return grad_inner(W, G);
  }
  // Exact covariance of one minibatch gradient under uniform sampling with replacement.
  Mat noise_cov(const Vec& t) const override {
    Mat J = jacobian(t);
    Vec r = residuals(t);
    Vec wts = 4.0 * (r.cwiseAbs2().array() + sigma_ * sigma_).matrix() / n_;
    Mat C = J.transpose() * wts.asDiagonal() * J;
    Vec g = grad(t);
    C -= g * g.transpose();
    return C / batch_;
  }
  double alpha() const override { return 2.0 * sigma_ * sigma_ / batch_; }
  double manifold_residual(const Vec& t) const override { return residuals(t).cwiseAbs().maxCoeff(); }
  double noise_floor() const override { return sigma_ * sigma_; }

  double train_mse(const Vec& t) const { return residuals(t).squaredNorm() / n_; }
  // Expected squared error on a fresh Gaussian measurement.
  double test_mse(const Vec& t) const { return (product(t) - M_star_).squaredNorm(); }

  json to_json() const override {
    std::uint64_t h = checksum(M_star_.data(), M_star_.size());
    for (const auto& A : A_) h = checksum(A.data(), A.size(), h);
    return {{"kind", kind()}, {"dims", dims_}, {"rank", rank_}, {"n_meas", n_}, {"batch", batch_},
            {"sigma", sigma_}, {"seed", seed_}, {"checksum", h}};
  }

 private:
  std::vector<int> dims_;
  int rank_, n_, L_ = 0;
  double sigma_;
  std::uint64_t seed_;
  std::vector<int> offsets_;
  Mat M_star_;
  std::vector<Mat> A_;
  Vec b_;
};

inline std::shared_ptr<MatFacProblem> make_matfac(std::vector<int> dims, int rank, int n_meas, int batch,
                                                  double sigma, std::uint64_t seed) {
  return std::make_shared<MatFacProblem>(std::move(dims), rank, n_meas, batch, sigma, seed);
}

// ---------------------------------------------------------------- quadratic

// L = 1/2 theta' H0 theta; stochastic gradient H0 theta + Sigma0^{1/2} xi.
class QuadraticProblem final : public Problem {
 public:
  QuadraticProblem(Mat H0, Mat Sigma0, double alpha = std::numeric_limits<double>::quiet_NaN())
      : H0_(std::move(H0)), Sigma0_(std::move(Sigma0)), alpha_(alpha) {
    require_symmetric(H0_, "make_quadratic");
    if (Sigma0_.size() == 0) Sigma0_ = Mat::Zero(H0_.rows(), H0_.cols());
    require_symmetric(Sigma0_, "make_quadratic");
    if (Sigma0_.rows() != H0_.rows()) throw std::invalid_argument("make_quadratic: Sigma0 shape mismatch");
    root_ = sqrt_psd(Sigma0_);
  }

  using Problem::sample_grad;
  std::string kind() const override { return "quadratic"; }
  int dim() const override { return static_cast<int>(H0_.rows()); }
  const Mat& H0() const { return H0_; }
  const Mat& Sigma0() const { return Sigma0_; }

  double loss(const Vec& t) const override { return 0.5 * t.dot(H0_ * t); }
  Vec grad(const Vec& t) const override { return H0_ * t; }
  Mat hessian(const Vec&) const override { return H0_; }
  Vec third_dir(const Vec& t, const Mat& M) const override {
    check_dim(t, "quadratic.third_dir");
    check_square(M, "quadratic.third_dir");
    return Vec::Zero(dim());
  }
  Vec sample_grad(const Vec& t, int batch, Rng& rng) const override {
    check_dim(t, "quadratic.sample_grad");
    return H0_ * t + root_ * rng.normal_vec(dim()) / std::sqrt(static_cast<double>(batch));
  }
  Mat noise_cov(const Vec&) const override { return Sigma0_ / batch_; }
  double alpha() const override { return alpha_ / batch_; }
  double manifold_residual(const Vec& t) const override {
    return dim() ? (H0_ * t).cwiseAbs().maxCoeff() : 0.0;
  }

  json to_json() const override {
    json j{{"kind", kind()}, {"H0", std::vector<double>(H0_.data(), H0_.data() + H0_.size())},
           {"Sigma0", std::vector<double>(Sigma0_.data(), Sigma0_.data() + Sigma0_.size())},
           {"dim", dim()}, {"batch", batch_}};
    if (!std::isnan(alpha_)) j["alpha"] = alpha_;
    return j;
  }

 private:
  Mat H0_, Sigma0_, root_;
  double alpha_;
};

inline std::shared_ptr<QuadraticProblem> make_quadratic(const Mat& H0, const Mat& Sigma0) {
  return std::make_shared<QuadraticProblem>(H0, Sigma0);
}

// Label-noise quadratic: Sigma0 = alpha * H0 everywhere.
inline std::shared_ptr<QuadraticProblem> make_quadratic_label_noise(const Mat& H0, double alpha) {
  return std::make_shared<QuadraticProblem>(H0, alpha * H0, alpha);
}

// ---------------------------------------------------------------- separable quartic

// L = (1/2d) sum_j (theta_j^2 - y_j)^2 + sigma^2/2: an entrywise factorization with a diagonal Hessian
// everywhere; Gamma = {theta_j = +-sqrt(y_j)} with H = Diag(4 y / d) there.
class QuarticProblem final : public Problem {
 public:
  QuarticProblem(Vec y, double noise_std) : y_(std::move(y)), noise_std_(noise_std) {
    if (y_.size() < 1) throw std::invalid_argument("make_quartic: empty target");
    if (noise_std < 0) throw std::invalid_argument("make_quartic: noise_std must be non-negative");
  }

  using Problem::sample_grad;
  std::string kind() const override { return "quartic"; }
  int dim() const override { return static_cast<int>(y_.size()); }
  const Vec& y() const { return y_; }

  Vec residuals(const Vec& t) const { return t.cwiseAbs2() - y_; }

  double loss(const Vec& t) const override {
    check_dim(t, "quartic.loss");
    return 0.5 * residuals(t).squaredNorm() / dim() + 0.5 * noise_std_ * noise_std_;
  }
  Vec grad(const Vec& t) const override { return (2.0 / dim()) * residuals(t).cwiseProduct(t); }
  Mat hessian(const Vec& t) const override { return hessian_diag(t).asDiagonal(); }
  Vec hessian_diag(const Vec& t) const override {
    check_dim(t, "quartic.hessian");
    return (6.0 * t.cwiseAbs2() - 2.0 * y_) / dim();
  }
  Vec third_dir(const Vec& t, const Mat& M) const override {
    check_square(M, "quartic.third_dir");
    return (12.0 / dim()) * t.cwiseProduct(M.diagonal());
  }
  Vec third_diag(const Vec& t, const Vec& s) const override { return (12.0 / dim()) * t.cwiseProduct(s); }
  Vec sample_grad(const Vec& t, int batch, Rng& rng) const override {
    check_dim(t, "quartic.sample_grad");
    Vec g = Vec::Zero(dim());
    for (int k = 0; k < batch; ++k) {
      std::size_t i = rng.index(dim());
      double r = t(i) * t(i) - y_(i) + noise_std_ * rng.normal();
      g(i) += 2.0 * r * t(i);
    }
    return g / batch;
  }
  Mat noise_cov(const Vec& t) const override {
    Vec r = residuals(t);
    Vec e = (4.0 / dim()) * t.cwiseAbs2().cwiseProduct((r.cwiseAbs2().array() + noise_std_ * noise_std_).matrix());
    Vec g = grad(t);
    Mat C = Mat(e.asDiagonal()) - g * g.transpose();
    return C / batch_;
  }
  double alpha() const override { return noise_std_ * noise_std_ / batch_; }
  double manifold_residual(const Vec& t) const override { return residuals(t).cwiseAbs().maxCoeff(); }
  double noise_floor() const override { return 0.5 * noise_std_ * noise_std_; }

  json to_json() const override {
    return {{"kind", kind()},
            {"y", std::vector<double>(y_.data(), y_.data() + y_.size())},
            {"noise_std", noise_std_},
            {"batch", batch_},
            {"checksum", checksum(y_.data(), y_.size())}};
  }

 private:
  Vec y_;
  double noise_std_;
};

inline std::shared_ptr<QuarticProblem> make_quartic(const Vec& y, double noise_std = 1.0) {
  return std::make_shared<QuarticProblem>(y, noise_std);
}

inline ProblemPtr problem_from_json(const json& j) {
  const std::string kind = j.at("kind");
  std::shared_ptr<Problem> p;
  if (kind == "ellipse") {
    p = make_ellipse(j.at("a"), j.at("b"), j.value("noise", 0.5));
  } else if (kind == "diagnet" && j.contains("Z")) {
    int n = j.at("n"), d = j.at("d");
    auto z = j.at("Z").get<std::vector<double>>();
    auto w = j.at("w_star").get<std::vector<double>>();
    p = std::make_shared<DiagNetProblem>(Mat(Eigen::Map<Mat>(z.data(), n, d)), Vec(Eigen::Map<Vec>(w.data(), d)),
                                         j.value("noise_std", 1.0));
  } else if (kind == "diagnet") {
    p = std::make_shared<DiagNetProblem>(j.at("d"), j.at("n"), j.at("kappa"), j.value("noise_std", 1.0),
                                         j.at("seed").get<std::uint64_t>(), j.value("signal", 1.0));
  } else if (kind == "matfac") {
    p = make_matfac(j.at("dims").get<std::vector<int>>(), j.at("rank"), j.at("n_meas"), j.value("batch", 1),
                    j.value("sigma", 1.0), j.at("seed").get<std::uint64_t>());
  } else if (kind == "quartic") {
    auto y = j.at("y").get<std::vector<double>>();
    p = make_quartic(Eigen::Map<Vec>(y.data(), static_cast<Eigen::Index>(y.size())), j.value("noise_std", 1.0));
  } else if (kind == "quadratic") {
    int n = j.at("dim");
    auto h = j.at("H0").get<std::vector<double>>();
    auto s = j.at("Sigma0").get<std::vector<double>>();
    Mat H0 = Eigen::Map<Mat>(h.data(), n, n), S0 = Eigen::Map<Mat>(s.data(), n, n);
    p = std::make_shared<QuadraticProblem>(H0, S0, j.value("alpha", std::numeric_limits<double>::quiet_NaN()));
  } else {
    throw std::invalid_argument("problem_from_json: unknown kind '" + kind + "'");
  }
  p->set_batch(j.value("batch", 1));
  if (j.contains("checksum") && p->to_json().at("checksum") != j.at("checksum"))
    throw std::runtime_error("problem_from_json: data checksum mismatch for " + kind);
  return p;
}

}  // namespace agmlab
