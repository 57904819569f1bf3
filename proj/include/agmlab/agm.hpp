#pragma once

#include "agmlab/numerics.hpp"
#include "agmlab/problems.hpp"

#include <functional>
#include <map>
#include <ostream>
#include <string>
#include <vector>

namespace agmlab {

class Preconditioner {
 public:
  enum class Rep { Diagonal, Block, Kronecker };

  static Preconditioner diagonal(Vec s, bool clamped = false) {
    Preconditioner p;
    p.rep_ = Rep::Diagonal;
    p.diag_ = std::move(s);
    p.clamped_ = clamped;
    return p;
  }
  // block_of[j] is the block index of coordinate j.
  static Preconditioner block(std::vector<int> block_of, Vec scale, bool clamped = false) {
    Preconditioner p;
    p.rep_ = Rep::Block;
    p.block_of_ = std::move(block_of);
    p.diag_ = std::move(scale);
    p.clamped_ = clamped;
    return p;
  }
  // S vec(X) = vec(left X right) with row-major vec, X of shape left.rows() x right.rows().
  static Preconditioner kronecker(Mat left, Mat right) {
    Preconditioner p;
    p.rep_ = Rep::Kronecker;
    p.left_ = std::move(left);
    p.right_ = std::move(right);
    return p;
  }

  Rep rep() const { return rep_; }
  bool clamped() const { return clamped_; }
  const Vec& scales() const { return diag_; }
  const std::vector<int>& block_of() const { return block_of_; }
  const Mat& left() const { return left_; }
  const Mat& right() const { return right_; }

  int dim() const {
    switch (rep_) {
      case Rep::Diagonal: return static_cast<int>(diag_.size());
      case Rep::Block: return static_cast<int>(block_of_.size());
      case Rep::Kronecker: return static_cast<int>(left_.rows() * right_.rows());
    }
    return 0;
  }

  Vec apply(const Vec& x) const {
    switch (rep_) {
      case Rep::Diagonal: return diag_.cwiseProduct(x);
      case Rep::Block: {
        Vec y(x.size());
        for (Eigen::Index j = 0; j < x.size(); ++j) y(j) = diag_(block_of_[j]) * x(j);
        return y;
      }
      case Rep::Kronecker:
        return vec_rm(left_ * unvec_rm(x, left_.rows(), right_.rows()) * right_);
    }
    return x;
  }

  Mat materialize() const {
    switch (rep_) {
      case Rep::Diagonal: return diag_.asDiagonal();
      case Rep::Block: {
        Vec d(block_of_.size());
        for (size_t j = 0; j < block_of_.size(); ++j) d(j) = diag_(block_of_[j]);
        return d.asDiagonal();
      }
      case Rep::Kronecker: return kron(left_, right_);
    }
    return {};
  }

  // True when the operator is a positive multiple of the identity.
  bool is_scalar() const {
    if (rep_ == Rep::Kronecker) return false;
    return diag_.size() > 0 && (diag_.array() == diag_(0)).all();
  }

 private:
  Rep rep_ = Rep::Diagonal;
  Vec diag_;
  std::vector<int> block_of_;
  Mat left_, right_;
  bool clamped_ = false;
};

enum class AgmKind { SGD, Adam, RMSProp, AdamE, AdamMini, Adalayer, Shampoo };

inline std::string to_string(AgmKind k) {
  switch (k) {
    case AgmKind::SGD: return "sgd";
    case AgmKind::Adam: return "adam";
    case AgmKind::RMSProp: return "rmsprop";
    case AgmKind::AdamE: return "adame";
    case AgmKind::AdamMini: return "adam_mini";
    case AgmKind::Adalayer: return "adalayer";
    case AgmKind::Shampoo: return "shampoo";
  }
  return "?";
}

inline AgmKind agm_kind_from_string(const std::string& s) {
  for (AgmKind k : {AgmKind::SGD, AgmKind::Adam, AgmKind::RMSProp, AgmKind::AdamE, AgmKind::AdamMini,
                    AgmKind::Adalayer, AgmKind::Shampoo})
    if (to_string(k) == s) return k;
  throw std::invalid_argument("unknown optimizer kind '" + s + "'");
}

inline constexpr double kZeroDivisorClamp = 1e-30;

struct AgmSpec {
  std::string name;
  AgmKind kind = AgmKind::SGD;
  int d = 0;  // parameter dimension
  int D = 0;  // second-moment dimension
  double beta1 = 0.0;
  double eta = 0.1;
  double c = 0.0;  // beta2 = 1 - c * eta^2
  double eps = 1e-8;
  double lambda = 0.5;              // AdamE exponent
  std::vector<int> block_of;        // AdamMini / Adalayer partition
  int rows = 0, cols = 0;           // Shampoo parameter shape

  double beta2() const { return 1.0 - c * eta * eta; }

  // Same c, new eta: beta2 follows 1 - c eta^2.
  AgmSpec with_eta(double new_eta) const {
    AgmSpec s = *this;
    s.eta = new_eta;
    s.validate();
    return s;
  }

  void validate() const {
    if (d < 1) throw std::invalid_argument(name + ": dimension must be positive");
    if (!(eta > 0)) throw std::invalid_argument(name + ": eta must be positive");
    if (beta1 < 0 || beta1 > 0.9) throw std::invalid_argument(name + ": beta1 must lie in [0, 0.9]");
    if (kind != AgmKind::SGD && !(c > 0)) throw std::invalid_argument(name + ": c must be positive");
    if (kind != AgmKind::SGD && !(beta2() >= 0 && beta2() < 1))
      throw std::invalid_argument(name + ": beta2 = 1 - c eta^2 must lie in [0, 1)");
    if (eps < 0) throw std::invalid_argument(name + ": eps must be non-negative");
    if (kind == AgmKind::AdamE && !(lambda >= 0 && lambda < 1))
      throw std::invalid_argument(name + ": AdamE lambda must lie in [0, 1)");
  }

  int num_blocks() const { return D; }

  // V(g g') computed from g directly.
  Vec vmap(const Vec& g) const {
    switch (kind) {
      case AgmKind::SGD: return Vec::Ones(D);
      case AgmKind::Adam:
      case AgmKind::RMSProp:
      case AgmKind::AdamE: return g.cwiseAbs2();
      case AgmKind::AdamMini:
      case AgmKind::Adalayer: {
        Vec v = Vec::Zero(D), cnt = Vec::Zero(D);
        for (int j = 0; j < d; ++j) {
          v(block_of[j]) += g(j) * g(j);
          cnt(block_of[j]) += 1;
        }
        return v.cwiseQuotient(cnt);
      }
      case AgmKind::Shampoo: {
        Mat G = unvec_rm(g, rows, cols);
        Vec v(D);
        v.head(rows * rows) = vec_rm(G * G.transpose());
        v.tail(cols * cols) = vec_rm(G.transpose() * G);
        return v;
      }
    }
    return {};
  }

  // V applied to a general symmetric matrix (linear extension of vmap).
  Vec vmap_matrix(const Mat& M) const {
    switch (kind) {
      case AgmKind::SGD: return Vec::Ones(D);
      case AgmKind::Adam:
      case AgmKind::RMSProp:
      case AgmKind::AdamE: return M.diagonal();
      case AgmKind::AdamMini:
      case AgmKind::Adalayer: {
        Vec v = Vec::Zero(D), cnt = Vec::Zero(D);
        for (int j = 0; j < d; ++j) {
          v(block_of[j]) += M(j, j);
          cnt(block_of[j]) += 1;
        }
        return v.cwiseQuotient(cnt);
      }
      case AgmKind::Shampoo: {
        Mat VL = Mat::Zero(rows, rows), VR = Mat::Zero(cols, cols);
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < rows; ++j)
            for (int s = 0; s < cols; ++s) VL(i, j) += M(i * cols + s, j * cols + s);
        for (int i = 0; i < cols; ++i)
          for (int j = 0; j < cols; ++j)
            for (int s = 0; s < rows; ++s) VR(i, j) += M(s * cols + i, s * cols + j);
        Vec v(D);
        v.head(rows * rows) = vec_rm(VL);
        v.tail(cols * cols) = vec_rm(VR);
        return v;
      }
    }
    return {};
  }

  Preconditioner smap(const Vec& v) const {
    bool clamped = false;
    auto divisor = [&](double x) {
      if (x <= 0 && eps == 0) {
        clamped = true;
        return kZeroDivisorClamp;
      }
      return x + eps;
    };
    switch (kind) {
      case AgmKind::SGD: return Preconditioner::diagonal(Vec::Ones(d));
      case AgmKind::Adam:
      case AgmKind::RMSProp: {
        Vec s(d);
        for (int j = 0; j < d; ++j) s(j) = 1.0 / divisor(std::sqrt(std::max(v(j), 0.0)));
        return Preconditioner::diagonal(s, clamped);
      }
      case AgmKind::AdamE: {
        Vec s(d);
        for (int j = 0; j < d; ++j) {
          double x = std::max(v(j), 0.0);
          s(j) = 1.0 / divisor(lambda == 0 ? 1.0 : std::pow(x, lambda));
        }
        return Preconditioner::diagonal(s, clamped);
      }
      case AgmKind::AdamMini:
      case AgmKind::Adalayer: {
        Vec s(D);
        for (int b = 0; b < D; ++b) s(b) = 1.0 / divisor(std::sqrt(std::max(v(b), 0.0)));
        return Preconditioner::block(block_of, s, clamped);
      }
      case AgmKind::Shampoo: {
        Mat VL = unvec_rm(v.head(rows * rows), rows, rows), VR = unvec_rm(v.tail(cols * cols), cols, cols);
        VL = 0.5 * (VL + VL.transpose()) + eps * Mat::Identity(rows, rows);
        VR = 0.5 * (VR + VR.transpose()) + eps * Mat::Identity(cols, cols);
        return Preconditioner::kronecker(inv_sqrt_psd(VL), inv_sqrt_psd(VR));
      }
    }
    return {};
  }
};

struct AgmParams {
  double eta = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;  // sets c = (1 - beta2) / eta^2
  double eps = 1e-8;
  double lambda = 0.5;
  std::vector<std::vector<int>> blocks;
  int rows = 0, cols = 0;
};

inline std::vector<int> block_index(int d, const std::vector<std::vector<int>>& blocks) {
  std::vector<int> of(d, -1);
  for (size_t b = 0; b < blocks.size(); ++b) {
    if (blocks[b].empty()) throw std::invalid_argument("partition has an empty block");
    for (int j : blocks[b]) {
      if (j < 0 || j >= d) throw std::invalid_argument("partition index out of range");
      if (of[j] != -1) throw std::invalid_argument("partition blocks overlap");
      of[j] = static_cast<int>(b);
    }
  }
  for (int j = 0; j < d; ++j)
    if (of[j] == -1) throw std::invalid_argument("partition does not cover every coordinate");
  return of;
}

inline AgmSpec make_spec(AgmKind kind, int d, const AgmParams& p) {
  AgmSpec s;
  s.kind = kind;
  s.name = to_string(kind);
  s.d = d;
  s.D = d;
  s.eta = p.eta;
  s.beta1 = p.beta1;
  s.c = (1.0 - p.beta2) / (p.eta * p.eta);
  s.eps = p.eps;
  switch (kind) {
    case AgmKind::SGD:
      s.beta1 = 0.0;
      s.c = 1.0 / (p.eta * p.eta);  // beta2 = 0; v is constant
      break;
    case AgmKind::Adam: break;
    case AgmKind::RMSProp: s.beta1 = 0.0; break;
    case AgmKind::AdamE:
      s.lambda = p.lambda;
      s.name = "adame(" + std::to_string(p.lambda).substr(0, 5) + ")";
      break;
    case AgmKind::AdamMini:
    case AgmKind::Adalayer:
      s.block_of = block_index(d, p.blocks);
      s.D = static_cast<int>(p.blocks.size());
      break;
    case AgmKind::Shampoo:
      if (p.rows * p.cols != d) throw std::invalid_argument("shampoo: rows * cols must equal d");
      s.rows = p.rows;
      s.cols = p.cols;
      s.D = p.rows * p.rows + p.cols * p.cols;
      s.beta1 = 0.0;
      break;
  }
  s.validate();
  return s;
}

inline AgmSpec sgd_spec(int d, double eta) {
  AgmParams p;
  p.eta = eta;
  return make_spec(AgmKind::SGD, d, p);
}

inline AgmSpec adam_spec(int d, double eta, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8) {
  AgmParams p;
  p.eta = eta;
  p.beta1 = beta1;
  p.beta2 = beta2;
  p.eps = eps;
  return make_spec(AgmKind::Adam, d, p);
}

inline AgmSpec adame_spec(int d, double eta, double lambda, double beta1 = 0.9, double beta2 = 0.999,
                          double eps = 1e-8) {
  AgmParams p;
  p.eta = eta;
  p.beta1 = beta1;
  p.beta2 = beta2;
  p.eps = eps;
  p.lambda = lambda;
  return make_spec(AgmKind::AdamE, d, p);
}

inline AgmSpec shampoo_spec(int rows, int cols, double eta, double beta2 = 0.999, double eps = 1e-8) {
  AgmParams p;
  p.eta = eta;
  p.beta2 = beta2;
  p.eps = eps;
  p.rows = rows;
  p.cols = cols;
  return make_spec(AgmKind::Shampoo, rows * cols, p);
}

struct AgmState {
  Vec theta, m, v;
  long k = 0;
  long clamp_events = 0;
};

inline AgmState init_state(const AgmSpec& spec, const Vec& theta0) {
  if (theta0.size() != spec.d) throw std::invalid_argument("init_state: theta dimension mismatch");
  AgmState s;
  s.theta = theta0;
  s.m = Vec::Zero(spec.d);
  s.v = spec.kind == AgmKind::SGD ? Vec::Ones(spec.D) : Vec::Zero(spec.D);
  return s;
}

// One step given an explicit stochastic gradient.
inline void agm_update(const AgmSpec& spec, AgmState& st, const Vec& g) {
  if (!g.allFinite())
    throw std::runtime_error(spec.name + ": non-finite gradient at step " + std::to_string(st.k));
  const double b1 = spec.beta1, b2 = spec.beta2();
  const bool elementwise = spec.kind == AgmKind::Adam || spec.kind == AgmKind::RMSProp || spec.kind == AgmKind::AdamE;
  if (elementwise || spec.kind == AgmKind::SGD) {
    // Array form of the coordinatewise instances; same arithmetic as vmap/smap below up to pow rounding.
    st.m = b1 * st.m + (1.0 - b1) * g;
    if (spec.kind == AgmKind::SGD) {
      st.theta -= spec.eta * st.m;
      ++st.k;
      return;
    }
    st.v = b2 * st.v + (1.0 - b2) * g.cwiseAbs2();
    auto x = st.v.array().max(0.0);
    Eigen::ArrayXd r;
    if (spec.kind != AgmKind::AdamE || spec.lambda == 0.5)
      r = x.sqrt();
    else if (spec.lambda == 0)
      r = Eigen::ArrayXd::Ones(x.size());
    else
      r = (spec.lambda * x.log()).exp();
    if (spec.eps == 0 && (r <= 0).any()) {
      ++st.clamp_events;
      r = (r <= 0).select(kZeroDivisorClamp, r);
    }
    st.theta.array() -= spec.eta * ((r + spec.eps).inverse() * st.m.array());
    ++st.k;
    return;
  }
  st.m = b1 * st.m + (1.0 - b1) * g;
  if (spec.kind != AgmKind::SGD) st.v = b2 * st.v + (1.0 - b2) * spec.vmap(g);
  Preconditioner S = spec.smap(st.v);
  if (S.clamped()) ++st.clamp_events;
  st.theta -= spec.eta * S.apply(st.m);
  ++st.k;
}

inline AgmState agm_step(const AgmSpec& spec, const AgmState& state, const Problem& problem, int batch, Rng& rng) {
  if (state.theta.size() != spec.d || problem.dim() != spec.d || state.v.size() != spec.D)
    throw std::invalid_argument("agm_step: state, spec and problem dimensions disagree");
  AgmState next = state;
  agm_update(spec, next, problem.sample_grad(state.theta, batch, rng));
  return next;
}

// Matrix-form Shampoo (EMA Gram factors, exponent 1/2 on each side).
struct ShampooMatrixState {
  Mat Theta, S1, S2;
};

inline void shampoo_matrix_step(ShampooMatrixState& st, const Mat& G, double eta, double beta2, double eps) {
  st.S1 = beta2 * st.S1 + (1.0 - beta2) * G * G.transpose();
  st.S2 = beta2 * st.S2 + (1.0 - beta2) * G.transpose() * G;
  Mat L = st.S1 + eps * Mat::Identity(st.S1.rows(), st.S1.cols());
  Mat R = st.S2 + eps * Mat::Identity(st.S2.rows(), st.S2.cols());
  st.Theta -= eta * inv_sqrt_psd(L) * G * inv_sqrt_psd(R);
}

// (v_L, v_R) with mat_L(v_L) = G G' and mat_R(v_R) = G' G, via the 4-index sums on vec(G)vec(G)'.
inline std::pair<Vec, Vec> shampoo_vectorize(const Mat& G) {
  const Eigen::Index d1 = G.rows(), d2 = G.cols();
  Vec g = vec_rm(G);
  Vec vl = Vec::Zero(d1 * d1), vr = Vec::Zero(d2 * d2);
  for (Eigen::Index i = 0; i < d1; ++i)
    for (Eigen::Index j = 0; j < d1; ++j)
      for (Eigen::Index s = 0; s < d2; ++s) vl(i * d1 + j) += g(i * d2 + s) * g(j * d2 + s);
  for (Eigen::Index i = 0; i < d2; ++i)
    for (Eigen::Index j = 0; j < d2; ++j)
      for (Eigen::Index s = 0; s < d1; ++s) vr(i * d2 + j) += g(s * d2 + i) * g(s * d2 + j);
  return {vl, vr};
}

struct Record {
  long step = 0;
  Vec theta;
  double loss = 0;
  std::map<std::string, double> metrics;
};

struct Trajectory {
  std::vector<Record> records;
  AgmState final_state;
};

using MetricFn = std::function<std::map<std::string, double>(const Vec& theta, const AgmState&)>;

inline Trajectory run(const AgmSpec& spec, const Problem& problem, const Vec& theta0, long steps,
                      long record_every, Rng& rng, const MetricFn& metrics = {}, int batch = -1) {
  if (steps < 1) throw std::invalid_argument("run: steps must be >= 1");
  if (record_every < 1) throw std::invalid_argument("run: record_every must be >= 1");
  if (batch < 0) batch = problem.batch();
  Trajectory tr;
  AgmState st = init_state(spec, theta0);
  auto record = [&](const AgmState& s) {
    Record r;
    r.step = s.k;
    r.theta = s.theta;
    r.loss = problem.loss(s.theta);
    if (metrics) r.metrics = metrics(s.theta, s);
    tr.records.push_back(std::move(r));
  };
  for (long k = 0; k < steps; ++k) {
    agm_update(spec, st, problem.sample_grad(st.theta, batch, rng));
    if (st.k % record_every == 0 || st.k == steps) record(st);
  }
  tr.final_state = st;
  return tr;
}

// ---------------------------------------------------------------- serialization

inline json to_json(const Vec& x) { return std::vector<double>(x.data(), x.data() + x.size()); }

inline Vec vec_from_json(const json& j) {
  auto v = j.get<std::vector<double>>();
  return Eigen::Map<Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline json to_json(const AgmSpec& s) {
  json j{{"name", s.name}, {"kind", to_string(s.kind)}, {"d", s.d}, {"D", s.D},   {"beta1", s.beta1},
         {"eta", s.eta},   {"c", s.c},                  {"eps", s.eps}, {"lambda", s.lambda}};
  if (!s.block_of.empty()) j["block_of"] = s.block_of;
  if (s.kind == AgmKind::Shampoo) {
    j["rows"] = s.rows;
    j["cols"] = s.cols;
  }
  return j;
}

inline AgmSpec spec_from_json(const json& j) {
  AgmSpec s;
  s.name = j.at("name");
  s.kind = agm_kind_from_string(j.at("kind"));
  s.d = j.at("d");
  s.D = j.at("D");
  s.beta1 = j.at("beta1");
  s.eta = j.at("eta");
  s.c = j.at("c");
  s.eps = j.at("eps");
  s.lambda = j.value("lambda", 0.5);
  if (j.contains("block_of")) s.block_of = j.at("block_of").get<std::vector<int>>();
  s.rows = j.value("rows", 0);
  s.cols = j.value("cols", 0);
  s.validate();
  return s;
}

inline json to_json(const AgmState& s) {
  return {{"theta", to_json(s.theta)}, {"m", to_json(s.m)}, {"v", to_json(s.v)}, {"k", s.k},
          {"clamp_events", s.clamp_events}};
}

inline AgmState state_from_json(const json& j) {
  AgmState s;
  s.theta = vec_from_json(j.at("theta"));
  s.m = vec_from_json(j.at("m"));
  s.v = vec_from_json(j.at("v"));
  s.k = j.at("k");
  s.clamp_events = j.value("clamp_events", 0L);
  return s;
}

// Long-format CSV rows: step,seed,metric,value.
inline void write_csv_header(std::ostream& os) { os << "step,seed,metric,value\n"; }

inline void write_csv(std::ostream& os, const Trajectory& tr, std::uint64_t seed) {
  for (const auto& r : tr.records) {
    os << r.step << ',' << seed << ",loss," << r.loss << '\n';
    for (const auto& [k, v] : r.metrics) os << r.step << ',' << seed << ',' << k << ',' << v << '\n';
  }
}

}  // namespace agmlab
