#include "agmlab/agm.hpp"
#include "agmlab/manifold.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace agmlab;

namespace {

// Reference step through vmap/smap, bypassing the array fast path.
void reference_update(const AgmSpec& spec, AgmState& st, const Vec& g) {
  st.m = spec.beta1 * st.m + (1 - spec.beta1) * g;
  if (spec.kind != AgmKind::SGD) st.v = spec.beta2() * st.v + (1 - spec.beta2()) * spec.vmap(g);
  st.theta -= spec.eta * spec.smap(st.v).apply(st.m);
  ++st.k;
}

std::vector<Vec> random_grads(int d, int n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<Vec> gs;
  for (int i = 0; i < n; ++i) gs.push_back(rng.normal_vec(d));
  return gs;
}

AgmState drive(const AgmSpec& spec, const std::vector<Vec>& gs, const Vec& theta0) {
  AgmState st = init_state(spec, theta0);
  for (const auto& g : gs) agm_update(spec, st, g);
  return st;
}

AgmSpec partitioned(AgmKind kind, int d, std::vector<std::vector<int>> blocks, double eta = 0.01) {
  AgmParams p;
  p.eta = eta;
  p.blocks = std::move(blocks);
  return make_spec(kind, d, p);
}

}  // namespace

TEST(AgmStep, SgdIsPlainGradientStep) {
  AgmSpec s = sgd_spec(3, 0.1);
  AgmState st = init_state(s, Vec::Ones(3));
  Vec g(3);
  g << 1, -2, 0.5;
  agm_update(s, st, g);
  EXPECT_EQ(st.theta, Vec::Ones(3) - 0.1 * g);
  EXPECT_EQ(st.k, 1);
}

TEST(AgmStep, AdamHandExample) {
  AgmSpec s = adam_spec(2, 0.1, 0.9, 0.999, 0.0);
  AgmState st = init_state(s, Vec::Zero(2));
  Vec g(2);
  g << 1, 0;
  agm_update(s, st, g);
  EXPECT_NEAR(st.m(0), 0.1, 1e-15);
  EXPECT_NEAR(st.v(0), 0.001, 1e-15);
  EXPECT_NEAR(st.theta(0), -0.1 * 0.1 / std::sqrt(0.001), 1e-12);
  EXPECT_NEAR(st.theta(0), -0.316227766016838, 1e-12);
  EXPECT_EQ(st.theta(1), 0.0);
  // v = 0 with eps = 0: the divisor is clamped and the event counted.
  EXPECT_EQ(st.clamp_events, 1);
}

TEST(AgmStep, NonFiniteGradientAborts) {
  AgmSpec s = adam_spec(2, 0.1);
  AgmState st = init_state(s, Vec::Zero(2));
  Vec g(2);
  g << 1, std::nan("");
  EXPECT_THROW(agm_update(s, st, g), std::runtime_error);
}

TEST(AgmStep, FastPathMatchesReference) {
  const int d = 5;
  auto gs = random_grads(d, 200, 3);
  Vec th0 = Vec::LinSpaced(d, -1, 1);
  std::vector<AgmSpec> specs = {sgd_spec(d, 0.05), adam_spec(d, 0.01), adam_spec(d, 0.01, 0.9, 0.99, 0.0),
                                adame_spec(d, 0.01, 0.25), adame_spec(d, 0.01, 0.0), adame_spec(d, 0.01, 0.7)};
  AgmParams rp;
  rp.eta = 0.01;
  specs.push_back(make_spec(AgmKind::RMSProp, d, rp));
  for (const auto& s : specs) {
    AgmState a = drive(s, gs, th0);
    AgmState b = init_state(s, th0);
    for (const auto& g : gs) reference_update(s, b, g);
    EXPECT_LE((a.theta - b.theta).norm(), 1e-12 * (1 + b.theta.norm())) << s.name;
    EXPECT_LE((a.v - b.v).norm(), 1e-15) << s.name;
  }
}

TEST(MakeSpec, RmspropIsAdamWithoutMomentum) {
  AgmParams p;
  p.eta = 0.02;
  AgmSpec r = make_spec(AgmKind::RMSProp, 4, p);
  EXPECT_EQ(r.beta1, 0.0);
  auto gs = random_grads(4, 100, 5);
  AgmState a = drive(r, gs, Vec::Ones(4));
  AgmState b = drive(adam_spec(4, 0.02, 0.0), gs, Vec::Ones(4));
  EXPECT_EQ(a.theta, b.theta);
}

TEST(MakeSpec, AdamEHalfIsAdam) {
  auto gs = random_grads(6, 300, 7);
  AgmState a = drive(adame_spec(6, 0.01, 0.5), gs, Vec::Ones(6));
  AgmState b = drive(adam_spec(6, 0.01), gs, Vec::Ones(6));
  EXPECT_EQ(a.theta, b.theta);
  // Through the generic maps too.
  Vec v = Vec::LinSpaced(6, 0.1, 2.0);
  EXPECT_LE((adame_spec(6, 0.01, 0.5).smap(v).materialize() - adam_spec(6, 0.01).smap(v).materialize()).norm(),
            1e-12);
}

TEST(MakeSpec, AdamMiniSingletonsIsAdam) {
  const int d = 4;
  AgmSpec mini = partitioned(AgmKind::AdamMini, d, {{0}, {1}, {2}, {3}});
  auto gs = random_grads(d, 200, 9);
  AgmState a = drive(mini, gs, Vec::Ones(d));
  AgmState b = drive(adam_spec(d, 0.01), gs, Vec::Ones(d));
  EXPECT_LE((a.theta - b.theta).norm(), 1e-12);
}

TEST(MakeSpec, GlobalBlockIsScalarPreconditioner) {
  const int d = 5;
  AgmSpec one = partitioned(AgmKind::AdamMini, d, {{0, 1, 2, 3, 4}});
  AgmState st = init_state(one, Vec::Zero(d));
  for (const auto& g : random_grads(d, 20, 1)) {
    agm_update(one, st, g);
    Preconditioner S = one.smap(st.v);
    EXPECT_TRUE(S.is_scalar());
    Mat M = S.materialize();
    EXPECT_GT(M(0, 0), 0);
    EXPECT_LE((M - M(0, 0) * Mat::Identity(d, d)).norm(), 0);
  }
}

TEST(MakeSpec, BlockVmapAveragesSquares) {
  AgmSpec s = partitioned(AgmKind::Adalayer, 4, {{0, 1}, {2, 3}});
  Vec g(4);
  g << 1, 3, 2, 0;
  Vec v = s.vmap(g);
  ASSERT_EQ(v.size(), 2);
  EXPECT_DOUBLE_EQ(v(0), 5);
  EXPECT_DOUBLE_EQ(v(1), 2);
  EXPECT_THROW(partitioned(AgmKind::AdamMini, 3, {{0, 1}, {}}), std::invalid_argument);
}

TEST(MakeSpec, Validation) {
  EXPECT_THROW(adame_spec(3, 0.01, 1.0), std::invalid_argument);
  EXPECT_THROW(adame_spec(3, 0.01, -0.1), std::invalid_argument);
  EXPECT_THROW(adam_spec(3, 0.01, 0.95), std::invalid_argument);
  EXPECT_THROW(adam_spec(3, 0.0), std::invalid_argument);
  EXPECT_THROW(adam_spec(3, 0.01, 0.9, 0.999, -1e-3), std::invalid_argument);
  EXPECT_THROW(agm_kind_from_string("lion"), std::invalid_argument);
  for (auto k : {AgmKind::SGD, AgmKind::Adam, AgmKind::RMSProp, AgmKind::AdamE, AgmKind::AdamMini, AgmKind::Adalayer,
                 AgmKind::Shampoo})
    EXPECT_EQ(agm_kind_from_string(to_string(k)), k);
}

TEST(MakeSpec, TwoScheme) {
  AgmSpec s = adam_spec(3, 0.01, 0.9, 0.999);
  EXPECT_NEAR(s.c, 10.0, 1e-9);
  for (double eta : {0.02, 0.005, 0.001}) {
    AgmSpec t = s.with_eta(eta);
    EXPECT_EQ(t.c, s.c);
    EXPECT_DOUBLE_EQ(t.beta2(), 1 - s.c * eta * eta);
  }
  EXPECT_THROW(s.with_eta(0.5), std::invalid_argument);  // beta2 < 0
}

TEST(Vmap, NonnegativeAndQuadratic) {
  Rng rng(4);
  std::vector<AgmSpec> specs = {adam_spec(6, 0.01), partitioned(AgmKind::AdamMini, 6, {{0, 1, 2}, {3, 4}, {5}}),
                                shampoo_spec(2, 3, 0.01)};
  for (const auto& s : specs) {
    for (int t = 0; t < 20; ++t) {
      Vec g = rng.normal_vec(6), h = rng.normal_vec(6);
      if (s.kind != AgmKind::Shampoo) EXPECT_GE(s.vmap(g).minCoeff(), 0.0) << s.name;
      EXPECT_LE((s.vmap(2.0 * g) - 4.0 * s.vmap(g)).norm(), 1e-12 * (1 + s.vmap(g).norm())) << s.name;
      Mat M = g * g.transpose() + h * h.transpose();
      EXPECT_LE((s.vmap_matrix(M) - s.vmap(g) - s.vmap(h)).norm(), 1e-12 * (1 + M.norm())) << s.name;
    }
  }
}

TEST(Trajectory, SecondMomentStaysNonnegative) {
  auto p = make_ellipse(1.25, 1);
  std::vector<AgmSpec> specs = {adam_spec(2, 0.05), adame_spec(2, 0.05, 0.2),
                                partitioned(AgmKind::AdamMini, 2, {{0, 1}}, 0.05)};
  for (const auto& s : specs) {
    Rng rng(2);
    AgmState st = init_state(s, p->point(0.4));
    for (int k = 0; k < 2000; ++k) {
      st = agm_step(s, st, *p, 1, rng);
      ASSERT_GE(st.v.minCoeff(), 0.0) << s.name;
      ASSERT_TRUE(st.theta.allFinite());
    }
  }
}

TEST(Shampoo, VectorizeExamples) {
  Mat G = Mat::Zero(2, 2);
  G(0, 0) = 1;
  auto [vl, vr] = shampoo_vectorize(G);
  EXPECT_EQ(unvec_rm(vl, 2, 2), G * G.transpose());
  EXPECT_EQ(unvec_rm(vr, 2, 2), G.transpose() * G);
  auto [il, ir] = shampoo_vectorize(Mat::Identity(2, 2));
  EXPECT_EQ(unvec_rm(il, 2, 2), Mat::Identity(2, 2));
  EXPECT_EQ(unvec_rm(ir, 2, 2), Mat::Identity(2, 2));
  Rng rng(1);
  Mat R = rng.normal_mat(3, 2);
  auto [rl, rr] = shampoo_vectorize(R);
  EXPECT_LE((unvec_rm(rl, 3, 3) - R * R.transpose()).norm(), 1e-12);
  EXPECT_LE((unvec_rm(rr, 2, 2) - R.transpose() * R).norm(), 1e-12);
  // vmap agrees with the four-index sums.
  AgmSpec s = shampoo_spec(3, 2, 0.01);
  Vec v = s.vmap(vec_rm(R));
  EXPECT_LE((v.head(9) - rl).norm() + (v.tail(4) - rr).norm(), 1e-12);
}

TEST(Shampoo, KroneckerApplyMatchesDense) {
  Rng rng(3);
  Mat A = rng.normal_mat(3, 3), B = rng.normal_mat(2, 2);
  A = A * A.transpose() + Mat::Identity(3, 3);
  B = B * B.transpose() + Mat::Identity(2, 2);
  Preconditioner P = Preconditioner::kronecker(A, B);
  Vec x = rng.normal_vec(6);
  EXPECT_LE((P.apply(x) - kron(A, B) * x).norm(), 1e-12);
  EXPECT_LE((P.materialize() - kron(A, B)).norm(), 1e-12);
}

TEST(Shampoo, MatchesMatrixFormOverHundredSteps) {
  for (auto [r, c] : {std::pair{2, 2}, std::pair{3, 2}}) {
    const double eta = 0.01, beta2 = 0.99, eps = 1e-3;
    AgmSpec s = shampoo_spec(r, c, eta, beta2, eps);
    Rng rng(11);
    Mat Theta0 = rng.normal_mat(r, c);
    AgmState st = init_state(s, vec_rm(Theta0));
    ShampooMatrixState ms{Theta0, Mat::Zero(r, r), Mat::Zero(c, c)};
    for (int k = 0; k < 100; ++k) {
      Mat G = rng.normal_mat(r, c);
      agm_update(s, st, vec_rm(G));
      shampoo_matrix_step(ms, G, eta, beta2, eps);
      ASSERT_LE((unvec_rm(st.theta, r, c) - ms.Theta).norm(), 1e-10) << "step " << k;
    }
  }
}

TEST(Run, RecordScheduleAlwaysKeepsFinalState) {
  auto p = make_ellipse(1, 1);
  Rng rng(1);
  Trajectory t = run(sgd_spec(2, 0.01), *p, p->point(0.3), 10, 100, rng);
  ASSERT_EQ(t.records.size(), 1u);
  EXPECT_EQ(t.records[0].step, 10);
  Rng rng2(1);
  Trajectory u = run(sgd_spec(2, 0.01), *p, p->point(0.3), 25, 10, rng2);
  ASSERT_EQ(u.records.size(), 3u);
  EXPECT_EQ(u.records[0].step, 10);
  EXPECT_EQ(u.records[2].step, 25);
  EXPECT_THROW(run(sgd_spec(2, 0.01), *p, p->point(0.3), 0, 1, rng), std::invalid_argument);
}

TEST(Run, DeterministicGivenSeed) {
  auto p = make_diagnet(8, 5, 2, 1.0, 3);
  auto go = [&] {
    Rng rng(77);
    return run(adam_spec(16, 0.01), *p, 0.1 * Vec::Ones(16), 500, 100, rng).final_state.theta;
  };
  EXPECT_EQ(go(), go());
}

TEST(Run, SgdOnNoiselessQuadraticIsGeometric) {
  Mat H = Vec((Vec(3) << 2, 1, 0.5).finished()).asDiagonal();
  auto p = make_quadratic(H, Mat::Zero(3, 3));
  const double eta = 0.1, lmin = 0.5;
  Vec th0 = Vec::Ones(3);
  Rng rng(0);
  Trajectory t = run(sgd_spec(3, eta), *p, th0, 50, 1, rng);
  for (const auto& r : t.records)
    EXPECT_LE(r.loss, std::pow(1 - eta * lmin, 2 * r.step) * p->loss(th0) * (1 + 1e-12));
}

TEST(Json, SpecAndStateRoundTrip) {
  AgmSpec s = partitioned(AgmKind::AdamMini, 4, {{0, 1}, {2, 3}});
  AgmSpec t = spec_from_json(to_json(s));
  EXPECT_EQ(to_json(t), to_json(s));
  AgmState st = drive(s, random_grads(4, 5, 1), Vec::Ones(4));
  AgmState back = state_from_json(to_json(st));
  EXPECT_EQ(back.theta, st.theta);
  EXPECT_EQ(back.v, st.v);
  EXPECT_EQ(back.k, st.k);
  std::ostringstream os;
  write_csv_header(os);
  EXPECT_EQ(os.str(), "step,seed,metric,value\n");
}

// Momentum does not move the limiting point: Adam and RMSProp land at the same projected angle.
TEST(Momentum, DoesNotChangeProjectedPosition) {
  auto p = make_ellipse(1.25, 1);
  const double eta = 0.02;
  const int seeds = 32;
  const long steps = 40000, burn = 20000, every = 1000;
  AgmSpec adam = adam_spec(2, eta, 0.9, 1 - eta * eta);
  AgmSpec rms = adam_spec(2, eta, 0.0, 1 - eta * eta);
  auto projected_mean = [&](const AgmSpec& s, std::vector<double>& per_seed) {
    for (int i = 0; i < seeds; ++i) {
      Rng rng = Rng(500).child(i);
      AgmState st = init_state(s, p->point(0.4));
      st.v = Vec::Constant(2, 0.5);
      double acc = 0;
      int cnt = 0;
      for (long k = 1; k <= steps; ++k) {
        agm_update(s, st, p->sample_grad(st.theta, 1, rng));
        if (k > burn && k % every == 0) {
          ProjectionResult pr = phi_s(*p, s.smap(st.v).materialize(), st.theta);
          EXPECT_TRUE(pr.converged);
          acc += p->angle(pr.point);
          ++cnt;
        }
      }
      per_seed.push_back(acc / cnt);
    }
  };
  std::vector<double> a, b;
  projected_mean(adam, a);
  projected_mean(rms, b);
  auto mean_se = [](const std::vector<double>& x) {
    double m = 0, s2 = 0;
    for (double v : x) m += v;
    m /= x.size();
    for (double v : x) s2 += (v - m) * (v - m);
    return std::pair{m, std::sqrt(s2 / (x.size() - 1) / x.size())};
  };
  auto [ma, sa] = mean_se(a);
  auto [mb, sb] = mean_se(b);
  EXPECT_LE(std::abs(ma - mb), 4 * std::hypot(sa, sb)) << ma << " vs " << mb;
}
