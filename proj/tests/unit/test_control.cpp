#include <gtest/gtest.h>

#include <cmath>

#include "approxmpc/control.hpp"
#include "approxmpc/errors.hpp"
#include "approxmpc/pod.hpp"
#include "helpers.hpp"

using namespace approxmpc;

namespace {

LinearStateSpaceModel scalar_lti(double a, double b, double c, double d) {
  LinearStateSpaceModel m;
  m.a = Matrix::Constant(1, 1, a);
  m.b = Matrix::Constant(1, 1, b);
  m.c = Matrix::Constant(1, 1, c);
  m.d = Matrix::Constant(1, 1, d);
  m.u_mean = Vector::Zero(1);
  m.y_mean = Vector::Zero(1);
  return m;
}

ControlProblem tracking_problem(std::shared_ptr<PredictionModel> model, int horizon, double lo,
                                double hi) {
  const int r = model->inputs(), l = model->outputs();
  ControlProblem p;
  p.horizon = horizon;
  p.dt = 0.5;
  p.u_lower = Vector::Constant(r, lo);
  p.u_upper = Vector::Constant(r, hi);
  p.tracking.q = Vector::Ones(l);
  p.tracking.r = Vector::Zero(r);
  p.tracking.p_f = Vector::Ones(l);
  p.tracking.y_s = Vector::Zero(l);
  p.tracking.u_s = Vector::Zero(r);
  p.penalty_weight = 0.0;
  p.model = std::move(model);
  p.solver.tolerance = 1e-12;
  p.solver.max_iterations = 2000;
  return p;
}

Measurement lti_history(int r, int l, int len, double y_value) {
  Measurement m;
  m.u_past = Matrix::Zero(r, len);
  m.y_past = Matrix::Constant(l, len, y_value);
  return m;
}

double quadratic_min_check(const Matrix& h, const Vector& c, const Vector& lo, const Vector& hi) {
  const BoxObjective f = [&](const Vector& x, Vector* g) {
    const Vector d = x - c;
    if (g) *g = h * d;
    return 0.5 * d.dot(h * d);
  };
  const BoxSolverResult res = minimize_box(f, Vector::Zero(c.size()), lo, hi, {1e-12, 500});
  EXPECT_TRUE(res.converged);
  return (res.x - c.cwiseMax(lo).cwiseMin(hi)).cwiseAbs().maxCoeff();
}

}  // namespace

TEST(BoxSolver, DiagonalQuadraticGivesClippedMinimizer) {
  Vector c(4);
  c << 2.0, -3.0, 0.5, 10.0;
  Matrix h = Vector::LinSpaced(4, 1.0, 100.0).asDiagonal();
  EXPECT_LE(quadratic_min_check(h, c, Vector::Constant(4, -1.0), Vector::Constant(4, 1.0)), 1e-8);
}

TEST(BoxSolver, InteriorRosenbrock) {
  const BoxObjective f = [](const Vector& x, Vector* g) {
    const double a = 1.0 - x(0), b = x(1) - x(0) * x(0);
    if (g) {
      g->resize(2);
      (*g)(0) = -2.0 * a - 400.0 * x(0) * b;
      (*g)(1) = 200.0 * b;
    }
    return a * a + 100.0 * b * b;
  };
  Vector x0(2);
  x0 << -1.2, 1.0;
  const BoxSolverResult res = minimize_box(f, x0, Vector::Constant(2, -5), Vector::Constant(2, 5),
                                           {1e-12, 2000});
  EXPECT_NEAR(res.x(0), 1.0, 1e-5);
  EXPECT_NEAR(res.x(1), 1.0, 1e-5);
}

TEST(BoxSolver, NeverWorseThanStartAndStaysInBox) {
  SplitMix64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Matrix a = testutil::random_matrix(rng, 5, 5);
    const Matrix h = a * a.transpose() + 0.1 * Matrix::Identity(5, 5);
    const Vector c = 3.0 * testutil::random_matrix(rng, 5, 1);
    const BoxObjective f = [&](const Vector& x, Vector* g) {
      const Vector d = x - c;
      if (g) *g = h * d;
      return 0.5 * d.dot(h * d);
    };
    const Vector lo = Vector::Constant(5, -1.0), hi = Vector::Constant(5, 1.0);
    const Vector x0 = 0.5 * testutil::random_matrix(rng, 5, 1);
    const BoxSolverResult res = minimize_box(f, x0, lo, hi, {1e-6, 5});
    EXPECT_LE(res.f, f(x0, nullptr));
    EXPECT_TRUE((res.x.array() >= lo.array()).all() && (res.x.array() <= hi.array()).all());
  }
}

TEST(BoxSolver, RejectsBadBounds) {
  const BoxObjective f = [](const Vector& x, Vector*) { return x.squaredNorm(); };
  EXPECT_THROW(minimize_box(f, Vector::Zero(2), Vector::Ones(2), Vector::Zero(2)), InvalidArgument);
}

TEST(Mpc, DeadbeatOnIntegrator) {
  // y+ = y + u: with R = 0 the first move closes the gap and the rest are zero.
  auto model = std::make_shared<LtiPrediction>(scalar_lti(1.0, 1.0, 1.0, 0.0), 4);
  ControlProblem p = tracking_problem(model, 5, -10.0, 10.0);
  p.tracking.y_s(0) = 3.0;
  const double y0 = 0.5;
  const StepResult res = solve_mpc_step(p, lti_history(1, 1, 4, y0));
  EXPECT_NEAR(res.u_first(0), 3.0 - y0, 1e-6);
  for (int j = 1; j < 5; ++j) EXPECT_NEAR(res.u_sequence(0, j), 0.0, 1e-6);
  EXPECT_NEAR(res.objective, 0.0, 1e-10);
}

TEST(Mpc, LinearQuadraticClosedForm) {
  SplitMix64 rng(2);
  LinearStateSpaceModel m = testutil::random_stable_lti(rng, 3, 2, 2);
  m.d.setZero();
  const int n_h = 6;
  auto model = std::make_shared<LtiPrediction>(m, 10);
  ControlProblem p = tracking_problem(model, n_h, -1e3, 1e3);
  p.tracking.q << 1.0, 2.0;
  p.tracking.r << 0.5, 0.1;
  p.tracking.p_f << 3.0, 1.0;
  p.tracking.y_s << 0.7, -0.4;
  p.tracking.u_s << 0.2, 0.1;
  const Vector z0 = testutil::random_matrix(rng, 3, 1);

  // Independent stacked prediction Y = Phi z0 + Gamma U.
  const int l = 2, r = 2;
  Matrix phi(l * n_h, 3), gamma = Matrix::Zero(l * n_h, r * n_h);
  Matrix apow = m.a;
  for (int j = 0; j < n_h; ++j) {
    phi.middleRows(l * j, l) = m.c * apow;
    apow = m.a * apow;
    Matrix ai = Matrix::Identity(3, 3);
    for (int i = j; i >= 0; --i) {
      gamma.block(l * j, r * i, l, r) = m.c * ai * m.b;
      ai = m.a * ai;
    }
  }
  Vector w(l * n_h), rw(r * n_h), ys(l * n_h), us(r * n_h);
  for (int j = 0; j < n_h; ++j) {
    w.segment(l * j, l) = j + 1 < n_h ? p.tracking.q : Vector(p.tracking.q + p.tracking.p_f);
    rw.segment(r * j, r) = p.tracking.r;
    ys.segment(l * j, l) = p.tracking.y_s;
    us.segment(r * j, r) = p.tracking.u_s;
  }
  const Matrix hess = gamma.transpose() * w.asDiagonal() * gamma + Matrix(rw.asDiagonal());
  const Vector rhs = gamma.transpose() * w.asDiagonal() * (ys - phi * z0) + rw.asDiagonal() * us;
  const Vector u_star = hess.ldlt().solve(rhs);

  model->set_state(z0);
  Matrix u_mat = Eigen::Map<const Matrix>(u_star.data(), r, n_h);
  const double j_star = horizon_objective(p, u_mat);
  const Vector res_y = phi * z0 + gamma * u_star - ys;
  const double expect = res_y.dot(w.asDiagonal() * res_y) + (u_star - us).dot(rw.asDiagonal() * (u_star - us));
  EXPECT_NEAR(j_star, expect, 1e-10 * std::max(1.0, expect));

  // Solver from the model: initialize via the exact state path.
  Measurement meas;
  meas.u_past = testutil::random_matrix(rng, 2, 10);
  const Matrix z_hist = simulate_lti_states(m, Vector::Zero(3), meas.u_past);
  meas.y_past = simulate_lti(m, Vector::Zero(3), meas.u_past);
  const Vector z_now = z_hist.col(10);
  const Vector rhs_now = gamma.transpose() * w.asDiagonal() * (ys - phi * z_now) + rw.asDiagonal() * us;
  const Vector u_now = hess.ldlt().solve(rhs_now);
  const StepResult step = solve_mpc_step(p, meas);
  const Vector got = Eigen::Map<const Vector>(step.u_sequence.data(), r * n_h);
  EXPECT_LE((got - u_now).cwiseAbs().maxCoeff(), 1e-6);
}

namespace {

void check_gradient(const ControlProblem& p, const Matrix& u, double tol) {
  Matrix g;
  const double f = horizon_objective_gradient(p, u, g);
  EXPECT_NEAR(f, horizon_objective(p, u), 1e-10 * std::max(1.0, std::abs(f)));
  double worst = 0.0;
  for (Eigen::Index i = 0; i < u.size(); ++i) {
    Matrix up = u, um = u;
    const double h = 1e-5 * std::max(1.0, std::abs(u(i)));
    up(i) += h;
    um(i) -= h;
    const double fd = (horizon_objective(p, up) - horizon_objective(p, um)) / (2 * h);
    worst = std::max(worst, std::abs(fd - g(i)) / std::max(1.0, std::abs(fd)));
  }
  EXPECT_LE(worst, tol) << p.model->tag();
}

ControlProblem economic_problem(std::shared_ptr<PredictionModel> model, int horizon) {
  ControlProblem p = tracking_problem(std::move(model), horizon, -2.0, 2.0);
  p.mode = ControllerMode::Economic;
  const int l = p.model->outputs(), r = p.model->inputs();
  p.economic.y_linear = Vector::LinSpaced(l, -1.0, 1.0);
  p.economic.u_linear = Vector::LinSpaced(r, 0.5, -0.5);
  p.economic.y_quad = Vector::Constant(l, 0.3);
  p.economic.y_ref = Vector::Constant(l, 0.1);
  p.economic.u_abs_weight = Vector::Constant(r, 0.2);
  p.economic.u_abs_offset = Vector::Constant(r, 0.05);
  p.penalty_weight = 10.0;
  p.y_min = Vector::Constant(l, -0.2);
  return p;
}

}  // namespace

TEST(Gradient, AllBackendsMatchFiniteDifferences) {
  SplitMix64 rng(3);
  const PlantModel plant = testutil::random_linear_plant(rng, 4, 2, 2);
  const int n_h = 4;
  const Matrix u = 0.8 * testutil::random_matrix(rng, 2, n_h);
  Measurement meas;
  meas.x = 0.3 * testutil::random_matrix(rng, 4, 1);
  meas.u_past = testutil::random_matrix(rng, 2, 12);
  meas.y_past = testutil::random_matrix(rng, 2, 12);

  // Training record for the reduced-order and data-driven backends.
  MultiLevelSpec spec;
  spec.u_lower = Vector::Constant(2, -1.0);
  spec.u_upper = Vector::Constant(2, 1.0);
  spec.hold_min = 2;
  spec.hold_max = 4;
  const Dataset data = collect_dataset(plant, multilevel_signal(spec, 300), 0.5, 4);

  auto tpwl = std::make_shared<TpwlModel>(build_tpwl(plant, data.trajectory, 3, 5.0));
  PodOptions po;
  po.order = 2;
  tpwl->attach_basis(compute_basis(data.snapshots(), po));
  IdentifyOptions io;
  io.order = 4;
  const LinearStateSpaceModel lti = identify(data, io);
  const TrainingSet ts = build_training_set(data, 3, n_h + 1);
  const NNPredictor nn = init_network(ts, {{6}, {Activation::Swish}}, 4);

  std::vector<std::shared_ptr<PredictionModel>> backends{
      make_plant_prediction(plant, 0.5, 4),
      make_tpwl_prediction(tpwl, TpwlMode::Full, 0.5, 4, "tpwl"),
      make_tpwl_prediction(tpwl, TpwlMode::Reduced, 0.5, 4, "pod_tpwl"),
      std::make_shared<LtiPrediction>(lti, 12),
      std::make_shared<NnPrediction>(nn)};
  for (const auto& b : backends) {
    b->initialize(meas);
    const double tol = b->kind() == ModelKind::Lti || b->kind() == ModelKind::Nn ? 1e-6 : 1e-5;
    ControlProblem track = tracking_problem(b, n_h, -2.0, 2.0);
    track.tracking.r = Vector::Constant(2, 0.1);
    track.tracking.y_s = Vector::Constant(2, 0.2);
    check_gradient(track, u, tol);
    check_gradient(economic_problem(b, n_h), u, tol);
  }
}

TEST(Economic, TrackingFormEqualsMpcWithoutTerminalWeight) {
  SplitMix64 rng(4);
  auto model = std::make_shared<LtiPrediction>(testutil::random_stable_lti(rng, 3, 2, 2), 6);
  model->set_state(testutil::random_matrix(rng, 3, 1));
  ControlProblem mpc = tracking_problem(model, 7, -5.0, 5.0);
  mpc.tracking.q << 2.0, 0.5;
  mpc.tracking.r << 0.3, 0.7;
  mpc.tracking.p_f.setZero();
  mpc.tracking.y_s << 0.4, -1.0;
  mpc.tracking.u_s << 1.0, 0.0;
  ControlProblem empc = mpc;
  empc.mode = ControllerMode::Economic;
  empc.economic = EconomicCost::from_tracking(mpc.tracking);
  for (int trial = 0; trial < 5; ++trial) {
    const Matrix u = testutil::random_matrix(rng, 2, 7);
    const double a = horizon_objective(mpc, u), b = horizon_objective(empc, u);
    EXPECT_NEAR(a, b, 1e-9 * std::max(1.0, std::abs(a)));
  }
}

TEST(Economic, ThroughputEnergyForm) {
  const EconomicCost c = EconomicCost::throughput_energy(2.0, 0.5, 3.0, 2, 3, 0, 2, {0, 1});
  Vector y(2), u(3);
  y << 0.4, 7.0;
  u << -2.0, 1.0, 5.0;
  EXPECT_NEAR(c.value(y, u), -2.0 * 3.0 * (5.0 - 0.4) + 0.5 * (2.0 + 1.0), 1e-12);
  Vector gy = Vector::Zero(2), gu = Vector::Zero(3);
  c.accumulate_gradient(y, u, gy, gu);
  EXPECT_NEAR(gy(0), 6.0, 1e-12);
  EXPECT_NEAR(gu(0), -0.5, 1e-12);
  EXPECT_NEAR(gu(2), -6.0, 1e-12);
  // Right derivative at the kink.
  u(1) = 0.0;
  gy.setZero();
  gu.setZero();
  c.accumulate_gradient(y, u, gy, gu);
  EXPECT_NEAR(gu(1), 0.5, 1e-12);
}

TEST(Empc, NoWorseThanSteadyCandidate) {
  SplitMix64 rng(5);
  const PlantModel plant = testutil::random_linear_plant(rng, 3, 2, 2);
  auto model = make_plant_prediction(plant, 0.5, 4);
  ControlProblem p = economic_problem(model, 6);
  p.u_steady = Vector::Constant(2, 0.3);
  p.solver.tolerance = 1e-8;
  p.solver.max_iterations = 50;
  Controller ctl(p);
  Measurement m;
  m.x = plant.x0;
  for (int k = 0; k < 4; ++k) {
    const StepResult res = ctl.step(m);
    EXPECT_LE(res.objective, res.steady_objective + 1e-9);
    EXPECT_LE(res.objective, res.shifted_objective + 1e-9);
    if (k > 0) EXPECT_TRUE(std::isfinite(res.shifted_objective));
    for (int j = 0; j < 6; ++j) {
      EXPECT_TRUE((res.u_sequence.col(j).array() >= p.u_lower.array()).all());
      EXPECT_TRUE((res.u_sequence.col(j).array() <= p.u_upper.array()).all());
    }
    m.x = integrate(plant, m.x, res.u_first, 0.5, 4).final_state;
  }
}

TEST(SteadyState, QuadraticOutputTarget) {
  Matrix a(1, 1), b(1, 1), c(1, 1), d(1, 1);
  a << -1.0;
  b << 1.0;
  c << 1.0;
  d << 0.0;
  const PlantModel plant = linear_plant(a, b, c, d, Vector::Zero(1), Vector::Zero(1));
  EconomicCost cost;
  cost.y_quad = Vector::Ones(1);
  cost.y_ref = Vector::Constant(1, 0.7);
  const SteadyStateResult res =
      steady_state_optimize(plant, cost, Vector::Constant(1, -2.0), Vector::Constant(1, 2.0));
  EXPECT_NEAR(res.u_s(0), 0.7, 1e-6);
  EXPECT_NEAR(res.y_s(0), 0.7, 1e-6);
  EXPECT_NEAR(res.cost, 0.0, 1e-10);

  EconomicCost lin;
  lin.u_linear = Vector::Ones(1);
  const SteadyStateResult low =
      steady_state_optimize(plant, lin, Vector::Constant(1, -2.0), Vector::Constant(1, 2.0));
  EXPECT_NEAR(low.u_s(0), -2.0, 1e-9);
}

TEST(SteadyState, BenchmarkOptimumIsLocallyOptimal) {
  const PlantModel plant = two_cstr_plant();
  const EconomicCost cost = EconomicCost::throughput_energy(200.0, 5e-4, 0.2, 2, 3, 0, 2, {0, 1});
  Vector lo(3), hi(3);
  lo << 0.0, 0.0, 2.0;
  hi << 4000.0, 2000.0, 6.0;
  const SteadyStateResult res = steady_state_optimize(plant, cost, lo, hi);
  ASSERT_GE(res.feasible_starts, 1);
  EXPECT_LE(plant.derivative(res.x_s, res.u_s).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LE((plant.output(res.x_s, res.u_s) - res.y_s).norm(), 1e-9);
  const Vector span = hi - lo;
  for (int i = 0; i < 3; ++i) {
    for (double sgn : {-1.0, 1.0}) {
      Vector u = res.u_s;
      u(i) = std::clamp(u(i) + sgn * 0.01 * span(i), lo(i), hi(i));
      if (u(i) == res.u_s(i)) continue;
      const auto xs = find_steady_state(plant, u, res.x_s);
      if (!xs) continue;
      EXPECT_GE(cost.value(plant.output(*xs, u), u), res.cost - 1e-6 * std::abs(res.cost))
          << "channel " << i << " sign " << sgn;
    }
  }
}

TEST(ClosedLoop, BookkeepingAndBoxFeasibility) {
  SplitMix64 rng(6);
  const PlantModel plant = testutil::random_linear_plant(rng, 3, 2, 2);
  auto model = make_plant_prediction(plant, 0.5, 4);
  ControlProblem p = tracking_problem(model, 5, -1.0, 1.0);
  p.tracking.y_s = Vector::Constant(2, 0.3);
  p.tracking.r = Vector::Constant(2, 0.05);
  p.economic.u_linear = Vector::Ones(2);
  p.solver.tolerance = 1e-8;
  p.solver.max_iterations = 50;
  Controller ctl(p);
  ClosedLoopOptions opt;
  opt.substeps = 4;
  const SimulationResult sim = run_closed_loop(plant, ctl, 8, opt);
  ASSERT_EQ(sim.steps(), 8);
  double stage = 0.0;
  for (Eigen::Index k = 0; k < sim.steps(); ++k) {
    EXPECT_TRUE((sim.u.col(k).array() >= -1.0).all() && (sim.u.col(k).array() <= 1.0).all());
    EXPECT_NEAR(sim.stage_cost(k), p.tracking.stage(sim.y.col(k), sim.u.col(k)), 1e-12);
    stage += sim.stage_cost(k);
    EXPECT_LE((plant.output(sim.x.col(k), sim.u.col(k)) - sim.y.col(k)).norm(), 1e-12);
    EXPECT_NEAR(sim.t(k), 0.5 * static_cast<double>(k), 1e-12);
  }
  EXPECT_NEAR(sim.accumulated_stage_cost(), stage, 1e-12);
  EXPECT_GE(sim.max_solve_seconds(), sim.mean_solve_seconds());
  // Plant moves as the applied inputs say.
  const Trajectory replay = integrate(plant, sim.x.col(0), sim.u, 0.5, 4);
  EXPECT_LE((replay.x - sim.x).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(ClosedLoop, ExactLinearModelConvergesToTarget) {
  SplitMix64 rng(7);
  const PlantModel plant = testutil::random_linear_plant(rng, 2, 2, 2);
  auto model = make_plant_prediction(plant, 0.5, 4);
  ControlProblem p = tracking_problem(model, 6, -5.0, 5.0);
  // Reachable target: output of a steady input.
  const Vector u_t = Vector::Constant(2, 0.4);
  const auto xs = find_steady_state(plant, u_t, plant.x0);
  ASSERT_TRUE(xs.has_value());
  p.tracking.y_s = plant.output(*xs, u_t);
  p.tracking.u_s = u_t;
  p.tracking.r = Vector::Constant(2, 1e-3);
  p.solver.tolerance = 1e-10;
  Controller ctl(p);
  ClosedLoopOptions opt;
  opt.substeps = 4;
  const SimulationResult sim = run_closed_loop(plant, ctl, 30, opt);
  EXPECT_LE((sim.y.col(29) - p.tracking.y_s).norm(), 1e-3);
}

TEST(ControlProblem, ValidationErrors) {
  auto model = std::make_shared<LtiPrediction>(scalar_lti(0.5, 1.0, 1.0, 0.0), 2);
  ControlProblem p = tracking_problem(model, 3, -1.0, 1.0);
  EXPECT_NO_THROW(p.validate());
  ControlProblem bad = p;
  bad.u_lower = Vector::Constant(1, 2.0);
  EXPECT_THROW(bad.validate(), InvalidArgument);
  bad = p;
  bad.tracking.q = Vector::Ones(3);
  EXPECT_THROW(bad.validate(), DimensionMismatch);
  EXPECT_THROW(solve_empc_step(p, lti_history(1, 1, 2, 0.0)), InvalidArgument);
}
