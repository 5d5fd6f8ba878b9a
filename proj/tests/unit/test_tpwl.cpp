#include <gtest/gtest.h>

#include <cmath>

#include "approxmpc/errors.hpp"
#include "approxmpc/excitation.hpp"
#include "approxmpc/model_io.hpp"
#include "approxmpc/tpwl.hpp"
#include "helpers.hpp"

using namespace approxmpc;

namespace {

/// Multilevel run around u0; `spread` applies to the largest channel, the
/// others scale with their nominal size.
Trajectory excited(const PlantModel& p, int steps, std::uint64_t seed, double spread = 1.0) {
  const Vector size = p.u0.cwiseAbs().cwiseMax(1.0);
  const Vector delta = spread * size / size.maxCoeff();
  MultiLevelSpec s;
  s.u_lower = p.u0 - delta;
  s.u_upper = p.u0 + delta;
  s.hold_min = 3;
  s.hold_max = 6;
  s.seed = seed;
  return integrate(p, p.x0, multilevel_signal(s, steps), 0.5, 5);
}

}  // namespace

TEST(Linearize, LinearPlantIsExact) {
  SplitMix64 rng(10);
  const PlantModel p = testutil::random_linear_plant(rng, 4, 2, 3);
  const Vector x = testutil::random_matrix(rng, 4, 1) * 5.0;
  const Vector u = testutil::random_matrix(rng, 2, 1);
  const LocalAffineModel lm = linearize(p, x, u);
  Matrix a(4, 4), b(4, 2), c(3, 4), d(3, 2);
  for (int i = 0; i < 4; ++i) a.col(i) = p.derivative(Vector::Unit(4, i), Vector::Zero(2));
  for (int i = 0; i < 2; ++i) b.col(i) = p.derivative(Vector::Zero(4), Vector::Unit(2, i));
  for (int i = 0; i < 4; ++i) c.col(i) = p.output(Vector::Unit(4, i), Vector::Zero(2));
  for (int i = 0; i < 2; ++i) d.col(i) = p.output(Vector::Zero(4), Vector::Unit(2, i));
  EXPECT_LE((lm.a - a).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE((lm.b - b).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE((lm.c - c).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE((lm.d - d).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LE((lm.f - p.derivative(x, u)).norm(), 1e-12);
}

TEST(Linearize, SquareMap) {
  PlantModel p;
  p.n = p.r = p.l = 1;
  p.rhs = [](const Vector& x, const Vector&, Vector& dx) { dx(0) = x(0) * x(0); };
  p.out = [](const Vector& x, const Vector&, Vector& y) { y(0) = x(0); };
  const LocalAffineModel lm = linearize(p, Vector::Constant(1, 2.0), Vector::Zero(1));
  EXPECT_NEAR(lm.a(0, 0), 4.0, 1e-6);
  EXPECT_NEAR(lm.f(0), 4.0, 1e-15);
}

TEST(Linearize, BenchmarkSteadyStateIsStable) {
  const PlantModel p = two_cstr_plant();
  const LocalAffineModel lm = linearize(p, p.x0, p.u0);
  const Eigen::VectorXcd ev = lm.a.eigenvalues();
  for (Eigen::Index i = 0; i < ev.size(); ++i) EXPECT_LT(ev(i).real(), 0.0);
  EXPECT_LE(lm.jacobian_check_error, 1e-4);
}

TEST(SelectPoints, SinglePointIsStart) {
  const PlantModel p = two_cstr_plant();
  const Trajectory tr = excited(p, 100, 1, 300.0);
  const PointSelection sel = select_points(tr, 1);
  ASSERT_EQ(sel.indices.size(), 1u);
  EXPECT_EQ(sel.indices[0], 0);
}

TEST(SelectPoints, ConstantTrajectory) {
  Trajectory tr;
  tr.dt = 1.0;
  tr.t = Vector::LinSpaced(10, 0, 9);
  tr.x = Vector::Constant(2, 1.5).replicate(1, 10);
  tr.u = Matrix::Zero(1, 10);
  tr.y = Matrix::Zero(1, 10);
  const PointSelection sel = select_points(tr, 1);
  EXPECT_EQ(sel.indices, std::vector<Eigen::Index>{0});
  EXPECT_THROW(select_points(tr, 2), InvalidArgument);
}

TEST(SelectPoints, StraightLineThreePoints) {
  // Walking a segment, the greedy rule with threshold d places points at
  // 0, d, 2d; exactly three points need d in [L/3, L/2).
  Trajectory tr;
  const int n = 201;
  tr.dt = 1.0;
  tr.t = Vector::LinSpaced(n, 0, n - 1);
  Vector p(2), q(2);
  p << 0.0, 0.0;
  q << 3.0, 4.0;
  tr.x.resize(2, n);
  for (int k = 0; k < n; ++k) tr.x.col(k) = p + (q - p) * (k / double(n - 1));
  tr.u = Matrix::Zero(1, n);
  tr.y = Matrix::Zero(1, n);
  const Vector unit = Vector::Ones(2);
  const PointSelection sel = select_points(tr, 3, &unit);
  ASSERT_EQ(sel.achieved, 3);
  const double length = (q - p).norm(), h = length / (n - 1);
  EXPECT_EQ(sel.indices[0], 0);
  const double d1 = (tr.x.col(sel.indices[1]) - tr.x.col(sel.indices[0])).norm();
  const double d2 = (tr.x.col(sel.indices[2]) - tr.x.col(sel.indices[1])).norm();
  EXPECT_NEAR(d1, d2, 2 * h);
  EXPECT_GE(d1, length / 3 - h);
  EXPECT_LE(d1, length / 2 + h);
}

TEST(TpwlWeights, PartitionOfUnityAndLocality) {
  const PlantModel p = two_cstr_plant();
  const Trajectory tr = excited(p, 400, 2, 400.0);
  const TpwlModel m = build_tpwl(p, tr, 5);
  ASSERT_EQ(m.locals().size(), 5u);
  SplitMix64 rng(20);
  const Vector spread = m.distance_scale();
  for (int trial = 0; trial < 1000; ++trial) {
    Vector x = p.x0;
    for (int i = 0; i < 4; ++i) x(i) += spread(i) * rng.uniform(-3.0, 3.0);
    const Vector w = m.weights(x, TpwlMode::Full);
    EXPECT_GE(w.minCoeff(), 0.0);
    EXPECT_NEAR(w.sum(), 1.0, 1e-12);
  }
  for (std::size_t j = 0; j < 5; ++j) {
    const Vector w = m.weights(m.locals()[j].x, TpwlMode::Full);
    const double bound = 1.0 / (1.0 + 4.0 * std::exp(-25.0));
    EXPECT_GE(w(static_cast<Eigen::Index>(j)), bound);
    EXPECT_GE(w(static_cast<Eigen::Index>(j)), 0.99999);
  }
}

TEST(TpwlEvaluate, SinglePointEqualsLocalModel) {
  const PlantModel p = two_cstr_plant();
  const Trajectory tr = excited(p, 100, 3, 300.0);
  const TpwlModel m = build_tpwl(p, tr, 1);
  const LocalAffineModel& lm = m.locals().front();
  SplitMix64 rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const Vector x = p.x0 + testutil::random_matrix(rng, 4, 1);
    const Vector u = p.u0 + testutil::random_matrix(rng, 3, 1);
    const TpwlEvaluation e = evaluate(m, x, u);
    EXPECT_LE((e.derivative - (lm.a * (x - lm.x) + lm.b * (u - lm.u) + lm.f)).norm(), 1e-10);
    EXPECT_LE((e.output - (lm.c * (x - lm.x) + lm.d * (u - lm.u) + lm.g)).norm(), 1e-10);
  }
}

TEST(TpwlEvaluate, LinearPlantExactForAnyPointCount) {
  SplitMix64 rng(30);
  const PlantModel p = testutil::random_linear_plant(rng, 4, 2, 2);
  const Trajectory tr = excited(p, 200, 5, 2.0);
  for (int s : {1, 3, 5}) {
    const TpwlModel m = build_tpwl(p, tr, s);
    for (int trial = 0; trial < 50; ++trial) {
      const Vector x = testutil::random_matrix(rng, 4, 1) * 3.0;
      const Vector u = testutil::random_matrix(rng, 2, 1);
      const TpwlEvaluation e = evaluate(m, x, u);
      EXPECT_LE((e.derivative - p.derivative(x, u)).norm(), 1e-8);
      EXPECT_LE((e.output - p.output(x, u)).norm(), 1e-8);
    }
  }
}

TEST(TpwlSimulate, SteadyPointStaysPut) {
  const PlantModel p = two_cstr_plant();
  Trajectory tr = integrate(p, p.x0, p.u0.replicate(1, 10), 2.0, 10);
  tr.x.col(1) *= 1.01;  // second distinct state so selection is well defined
  const TpwlModel m = build_tpwl(p, tr, 1);
  const Trajectory sim = simulate_tpwl(m, p.x0, p.u0.replicate(1, 50), 2.0);
  for (Eigen::Index k = 0; k < sim.size(); ++k) {
    EXPECT_LE((sim.x.col(k) - p.x0).lpNorm<Eigen::Infinity>(), 1e-8);
  }
}

TEST(TpwlSimulate, IdentityBasisMatchesFullModel) {
  const PlantModel p = two_cstr_plant();
  const Trajectory tr = excited(p, 300, 6, 400.0);
  TpwlModel m = build_tpwl(p, tr, 3);
  PodOptions o;
  o.order = 4;
  m.attach_basis(compute_basis(tr.x, o));
  const Matrix u = excited(p, 60, 7, 300.0).u;
  const Trajectory full = simulate_tpwl(m, p.x0, u, 0.5, TpwlMode::Full, 5);
  const Trajectory red = simulate_tpwl(m, m.basis()->project(p.x0), u, 0.5, TpwlMode::Reduced, 5);
  EXPECT_LE((full.y - red.y).cwiseAbs().maxCoeff(), 1e-10 * full.y.cwiseAbs().maxCoeff());
}

TEST(TpwlReduced, GalerkinConsistency) {
  const PlantModel p = two_cstr_plant();
  const Trajectory tr = excited(p, 300, 8, 400.0);
  TpwlModel m = build_tpwl(p, tr, 4);
  for (bool standardize : {false, true}) {
    PodOptions o;
    o.order = 2;
    o.standardize = standardize;
    const PodBasis b = compute_basis(tr.x, o);
    m.attach_basis(b);
    SplitMix64 rng(9);
    for (int trial = 0; trial < 50; ++trial) {
      const Vector z = b.project(tr.x.col(rng.uniform_int(0, tr.size() - 1))) +
                       0.1 * testutil::random_matrix(rng, 2, 1);
      const Vector u = p.u0 + 100.0 * testutil::random_matrix(rng, 3, 1);
      const Vector w = m.weights(z, TpwlMode::Reduced);
      Vector dx, y;
      m.evaluate_with_weights(b.lift(z), u, w, dx, y);
      const TpwlEvaluation e = evaluate(m, z, u, TpwlMode::Reduced);
      EXPECT_LE((e.derivative - b.project_matrix() * dx).norm(), 1e-10 * std::max(1.0, dx.norm()));
      EXPECT_LE((e.output - y).norm(), 1e-10 * std::max(1.0, y.norm()));
    }
  }
}

TEST(TpwlReduced, RequiresBasis) {
  const PlantModel p = two_cstr_plant();
  const TpwlModel m = build_tpwl(p, excited(p, 50, 1, 300.0), 1);
  EXPECT_THROW(evaluate(m, Vector::Zero(2), p.u0, TpwlMode::Reduced), InvalidArgument);
}

TEST(TpwlModelFile, RoundTrip) {
  const PlantModel p = two_cstr_plant();
  const Trajectory tr = excited(p, 200, 2, 400.0);
  TpwlModel m = build_tpwl(p, tr, 3);
  PodOptions o;
  o.order = 3;
  o.standardize = true;
  m.attach_basis(compute_basis(tr.x, o));
  const std::string path = testutil::fresh_dir("tpwl") + "/m.json";
  save_tpwl(path, m);
  EXPECT_EQ(model_file_kind(path), "tpwl");
  const TpwlModel back = load_tpwl(path);
  ASSERT_TRUE(back.basis().has_value());
  const Vector z = m.basis()->project(tr.x.col(50));
  const TpwlEvaluation a = evaluate(m, z, p.u0, TpwlMode::Reduced);
  const TpwlEvaluation b = evaluate(back, z, p.u0, TpwlMode::Reduced);
  EXPECT_TRUE((a.derivative.array() == b.derivative.array()).all());
  EXPECT_TRUE((a.output.array() == b.output.array()).all());
  EXPECT_THROW(load_lti(path), Error);
}
