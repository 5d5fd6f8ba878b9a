#include <gtest/gtest.h>

#include "approxmpc/errors.hpp"
#include "approxmpc/excitation.hpp"
#include "approxmpc/model_io.hpp"
#include "approxmpc/subspace_id.hpp"
#include "helpers.hpp"

using namespace approxmpc;

namespace {

struct Record {
  Matrix u, y;
};

Record simulate(const LinearStateSpaceModel& m, int n, std::uint64_t seed) {
  MultiLevelSpec s;
  s.u_lower = Vector::Constant(m.inputs(), -1.0);
  s.u_upper = Vector::Constant(m.inputs(), 1.0);
  s.hold_min = 1;
  s.hold_max = 3;
  s.seed = seed;
  Record r;
  r.u = multilevel_signal(s, n);
  r.y = simulate_lti(m, Vector::Zero(m.order()), r.u);
  return r;
}

double markov_error(const LinearStateSpaceModel& a, const LinearStateSpaceModel& b) {
  const Matrix ma = a.markov_parameters(21), mb = b.markov_parameters(21);
  return (ma - mb).norm() / mb.norm();
}

}  // namespace

TEST(Hankel, ScalarLayout) {
  Matrix u(1, 6);
  u << 1, 2, 3, 4, 5, 6;
  const HankelSet h = build_hankel(u, u, 2);
  EXPECT_EQ(h.j, 3);
  Matrix up(2, 3);
  up << 1, 2, 3, 2, 3, 4;
  Matrix uf(2, 3);
  uf << 3, 4, 5, 4, 5, 6;
  EXPECT_EQ(h.up, up);
  EXPECT_EQ(h.uf, uf);
  EXPECT_EQ(h.zp().rows(), 4);
}

TEST(Hankel, SingleBlockRow) {
  Matrix u(1, 8);
  u << 1, 2, 3, 4, 5, 6, 7, 8;
  const HankelSet h = build_hankel(u, u, 1);
  EXPECT_EQ(h.up.rows(), 1);
  EXPECT_EQ(h.up.row(0), u.leftCols(h.j));
}

TEST(Hankel, SpotChecksAndShapes) {
  SplitMix64 rng(3);
  const Matrix u = testutil::random_matrix(rng, 2, 50), y = testutil::random_matrix(rng, 3, 50);
  const int i = 4;
  const HankelSet h = build_hankel(u, y, i);
  EXPECT_EQ(h.up.rows(), 2 * i);
  EXPECT_EQ(h.yf.rows(), 3 * i);
  EXPECT_EQ(h.up.cols(), 50 - 2 * i + 1);
  for (int b = 0; b < i; ++b) {
    for (Eigen::Index c = 0; c < h.j; c += 7) {
      EXPECT_EQ(h.up.block(2 * b, c, 2, 1), u.col(b + c));
      EXPECT_EQ(h.yf.block(3 * b, c, 3, 1), y.col(i + b + c));
    }
  }
}

TEST(Hankel, LengthBoundary) {
  const Matrix u = Matrix::Ones(1, 7);  // 2i + j - 1 with i = 2, j = 4
  EXPECT_NO_THROW(build_hankel(u, u, 2, 4));
  EXPECT_THROW(build_hankel(u, u, 2, 5), DatasetTooShort);
}

TEST(Oblique, AnnihilatesFutureInputComponent) {
  SplitMix64 rng(4);
  HankelSet h;
  h.i = 2;
  h.uf = testutil::random_matrix(rng, 2, 40);
  h.up = testutil::random_matrix(rng, 2, 40);
  h.yp = testutil::random_matrix(rng, 2, 40);
  h.yf = testutil::random_matrix(rng, 3, 2) * h.uf;
  h.j = 40;
  EXPECT_LE(oblique_project(h).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Oblique, CopyOfPastIsReproduced) {
  SplitMix64 rng(5);
  HankelSet h;
  h.i = 2;
  h.j = 60;
  h.uf = testutil::random_matrix(rng, 2, 60);
  h.up = testutil::random_matrix(rng, 2, 60);
  h.yp = testutil::random_matrix(rng, 2, 60);
  h.yf = h.zp();
  EXPECT_LE((oblique_project(h) - h.zp()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Oblique, DegenerateExcitationThrows) {
  HankelSet h;
  h.i = 1;
  h.j = 10;
  h.uf = Matrix::Ones(1, 10);
  h.up = Matrix::Ones(1, 10);
  h.yp = Matrix::Ones(1, 10) * 2.0;
  h.yf = Matrix::Ones(1, 10);
  EXPECT_THROW(oblique_project(h), PersistenceOfExcitation);
}

TEST(Identify, FourthOrderSystemMarkovParameters) {
  SplitMix64 rng(42);
  const LinearStateSpaceModel truth = testutil::random_stable_lti(rng, 4, 2, 2);
  const Record rec = simulate(truth, 2000, 9);
  // Zero-state noise-free data fit the true system only without mean removal.
  IdentifyOptions o;
  o.block_rows = 10;
  o.remove_means = false;
  const LinearStateSpaceModel m = identify(rec.u, rec.y, 1.0, o);
  EXPECT_EQ(m.order(), 4);
  EXPECT_LE(markov_error(m, truth), 1e-6);
  EXPECT_TRUE(m.stable);

  o.order = 4;
  const LinearStateSpaceModel fixed = identify(rec.u, rec.y, 1.0, o);
  EXPECT_LE(fixed.singular_values(4) / fixed.singular_values(0), 1e-8);
  // Noise-free data: rank of O_i equals the true order.
  const HankelSet h = build_hankel(rec.u, rec.y, 10);
  EXPECT_EQ(numerical_rank(oblique_project(h), 1e-6), 4);
}

TEST(Identify, RandomSystemsSmallSuite) {
  SplitMix64 rng(7);
  for (int trial = 0; trial < 15; ++trial) {
    const int s = 1 + static_cast<int>(rng.uniform_int(0, 5));
    const int r = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const int l = 1 + static_cast<int>(rng.uniform_int(0, 2));
    const LinearStateSpaceModel truth = testutil::random_stable_lti(rng, s, r, l);
    const Record rec = simulate(truth, 2000, 100 + trial);
    IdentifyOptions o;
    o.remove_means = false;
    const LinearStateSpaceModel m = identify(rec.u, rec.y, 1.0, o);
    EXPECT_LE(markov_error(m, truth), 1e-6) << "trial " << trial << " s " << s;
  }
}

TEST(Identify, SignConventionDoesNotChangeMarkovParameters) {
  SplitMix64 rng(11);
  const LinearStateSpaceModel truth = testutil::random_stable_lti(rng, 3, 1, 2);
  const Record rec = simulate(truth, 1000, 3);
  IdentifyOptions o;
  o.order = 3;
  const LinearStateSpaceModel a = identify(rec.u, rec.y, 1.0, o);
  o.sign_flip_mask = 0b101;
  const LinearStateSpaceModel b = identify(rec.u, rec.y, 1.0, o);
  EXPECT_GT((a.c - b.c).norm(), 1e-6);  // different bases
  const Matrix ma = a.markov_parameters(21), mb = b.markov_parameters(21);
  EXPECT_LE((ma - mb).norm() / ma.norm(), 1e-8);
}

TEST(Identify, MeansRestoredForConstantSignal) {
  SplitMix64 rng(12);
  const LinearStateSpaceModel truth = testutil::random_stable_lti(rng, 2, 1, 1);
  Record rec = simulate(truth, 800, 4);
  rec.u.array() += 5.0;
  rec.y = simulate_lti(truth, Vector::Zero(2), rec.u);
  rec.y.array() += 3.0;
  const LinearStateSpaceModel m = identify(rec.u, rec.y, 1.0);
  // Constant input at the data mean from the matching steady state.
  const Matrix u = m.u_mean.replicate(1, 20);
  const Matrix y = simulate_lti(m, Vector::Zero(m.order()), u);
  for (Eigen::Index k = 0; k < y.cols(); ++k) EXPECT_DOUBLE_EQ(y(0, k), m.y_mean(0));
}

TEST(Identify, OrderAboveRankThrows) {
  SplitMix64 rng(13);
  const LinearStateSpaceModel truth = testutil::random_stable_lti(rng, 2, 1, 1);
  const Record rec = simulate(truth, 500, 5);
  IdentifyOptions o;
  o.order = 6;
  EXPECT_THROW(identify(rec.u, rec.y, 1.0, o), RankDeficiency);
}

TEST(SimulateLti, ZeroInputMatrix) {
  LinearStateSpaceModel m;
  m.a = Matrix::Identity(2, 2) * 0.5;
  m.b = Matrix::Zero(2, 1);
  m.c = Matrix::Ones(1, 2);
  m.d = Matrix::Constant(1, 1, 2.0);
  m.u_mean = Vector::Zero(1);
  m.y_mean = Vector::Zero(1);
  Matrix u(1, 4);
  u << 1, -1, 3, 0.5;
  EXPECT_TRUE(simulate_lti(m, Vector::Zero(2), u).isApprox(2.0 * u));
}

TEST(SimulateLti, OneStepMemory) {
  SplitMix64 rng(14);
  LinearStateSpaceModel m = testutil::random_stable_lti(rng, 3, 2, 2);
  m.a.setZero();
  const Matrix u = testutil::random_matrix(rng, 2, 10);
  const Matrix y = simulate_lti(m, Vector(), u);
  for (int k = 1; k < 10; ++k) {
    EXPECT_LE((y.col(k) - (m.c * m.b * u.col(k - 1) + m.d * u.col(k))).norm(), 1e-12);
  }
}

TEST(EstimateState, RecoversInitialState) {
  SplitMix64 rng(15);
  const LinearStateSpaceModel m = testutil::random_stable_lti(rng, 3, 1, 2);
  const Vector z0 = testutil::random_matrix(rng, 3, 1);
  const Matrix u = testutil::random_matrix(rng, 1, 30);
  const Matrix y = simulate_lti(m, z0, u);
  EXPECT_LE((estimate_initial_state(m, u, y) - z0).norm(), 1e-8);
  const Vector zn = simulate_lti_states(m, z0, u).col(30);
  EXPECT_LE((estimate_current_state(m, u, y) - zn).norm(), 1e-8);
}

TEST(LtiModelFile, RoundTrip) {
  SplitMix64 rng(16);
  const LinearStateSpaceModel truth = testutil::random_stable_lti(rng, 2, 1, 1);
  const Record rec = simulate(truth, 500, 5);
  const LinearStateSpaceModel m = identify(rec.u, rec.y, 2.0);
  const std::string path = testutil::fresh_dir("lti") + "/m.json";
  save_lti(path, m);
  const LinearStateSpaceModel b = load_lti(path);
  EXPECT_EQ(b.a, m.a);
  EXPECT_EQ(b.b, m.b);
  EXPECT_EQ(b.c, m.c);
  EXPECT_EQ(b.d, m.d);
  EXPECT_EQ(b.u_mean, m.u_mean);
  EXPECT_EQ(b.dt, 2.0);
}
