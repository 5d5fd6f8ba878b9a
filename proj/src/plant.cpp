#include "approxmpc/plant.hpp"

#include <cmath>
#include <sstream>

#include "approxmpc/errors.hpp"

namespace approxmpc {

Vector PlantModel::derivative(const Vector& x, const Vector& u) const {
  Vector dx(n);
  rhs(x, u, dx);
  return dx;
}

Vector PlantModel::output(const Vector& x, const Vector& u) const {
  Vector y(l);
  out(x, u, y);
  return y;
}

bool PlantModel::inside_box(const Vector& x) const {
  if (!x.allFinite()) return false;
  if (!state_box) return true;
  return (x.array() >= state_box->lower.array()).all() &&
         (x.array() <= state_box->upper.array()).all();
}

void Trajectory::validate() const {
  const auto len = t.size();
  if (u.cols() != len || y.cols() != len || (x.size() > 0 && x.cols() != len)) {
    throw InvalidArgument("trajectory sequences have inconsistent lengths");
  }
  if (dt <= 0.0) throw InvalidArgument("trajectory sampling interval must be positive");
  for (Eigen::Index k = 1; k < len; ++k) {
    const double gap = t(k) - t(k - 1);
    if (std::abs(gap - dt) > 1e-12 * std::max(dt, std::abs(t(k)))) {
      throw InvalidArgument("trajectory time grid is not uniform at sample " + std::to_string(k));
    }
  }
}

Rk4Stepper::Rk4Stepper(const PlantModel& model, double dt, int substeps)
    : model_(&model), dt_(dt), substeps_(substeps) {
  if (!(dt > 0.0)) throw InvalidArgument("dt must be positive");
  if (substeps < 1) throw InvalidArgument("substeps must be >= 1");
  k1_.resize(model.n);
  k2_.resize(model.n);
  k3_.resize(model.n);
  k4_.resize(model.n);
  tmp_.resize(model.n);
}

void Rk4Stepper::advance(Vector& x, const Vector& u, std::size_t step_index) {
  const double h = dt_ / substeps_;
  const auto& f = model_->rhs;
  for (int s = 0; s < substeps_; ++s) {
    f(x, u, k1_);
    tmp_ = x + 0.5 * h * k1_;
    f(tmp_, u, k2_);
    tmp_ = x + 0.5 * h * k2_;
    f(tmp_, u, k3_);
    tmp_ = x + h * k3_;
    f(tmp_, u, k4_);
    x += (h / 6.0) * (k1_ + 2.0 * k2_ + 2.0 * k3_ + k4_);
    if (!x.allFinite()) throw IntegrationDiverged(step_index, "non-finite state");
  }
  if (!model_->inside_box(x)) {
    std::ostringstream msg;
    msg << "state left the plant box: [" << x.transpose() << "]";
    throw IntegrationDiverged(step_index, msg.str());
  }
}

Trajectory integrate(const PlantModel& model, const Vector& x_init, const Matrix& u_seq, double dt,
                     int substeps) {
  if (x_init.size() != model.n) throw DimensionMismatch("x_init has wrong dimension");
  if (u_seq.rows() != model.r) throw DimensionMismatch("input sequence has wrong row count");
  if (!model.inside_box(x_init)) throw IntegrationDiverged(0, "initial state outside the plant box");
  Rk4Stepper stepper(model, dt, substeps);
  const auto steps = u_seq.cols();
  Trajectory traj;
  traj.dt = dt;
  traj.t.resize(steps);
  traj.u = u_seq;
  traj.x.resize(model.n, steps);
  traj.y.resize(model.l, steps);
  Vector x = x_init;
  Vector u(model.r);
  Vector y(model.l);
  for (Eigen::Index k = 0; k < steps; ++k) {
    traj.t(k) = static_cast<double>(k) * dt;
    traj.x.col(k) = x;
    u = u_seq.col(k);
    model.out(x, u, y);
    traj.y.col(k) = y;
    stepper.advance(x, u, static_cast<std::size_t>(k));
  }
  traj.final_state = x;
  return traj;
}

Trajectory step_response(const PlantModel& model, int channel, double magnitude, int horizon,
                         double dt, int substeps) {
  if (channel < 0 || channel >= model.r) throw InvalidArgument("step channel out of range");
  if (horizon < 1) throw InvalidArgument("horizon must be >= 1");
  Vector u = model.u0;
  u(channel) += magnitude;
  Matrix u_seq = u.replicate(1, horizon);
  return integrate(model, model.x0, u_seq, dt, substeps);
}

namespace {

std::optional<Vector> newton(const PlantModel& model, const Vector& u, Vector x,
                             const SteadyStateOptions& opt) {
  Vector f(model.n);
  auto residual = [&](const Vector& v, Vector& out) { model.rhs(v, u, out); };
  model.rhs(x, u, f);
  for (int it = 0; it < opt.max_newton_iterations; ++it) {
    if (!f.allFinite()) return std::nullopt;
    if (f.lpNorm<Eigen::Infinity>() <= opt.tolerance) break;
    const Matrix jac = central_difference_jacobian(residual, x, model.n);
    const Vector dx = jac.colPivHouseholderQr().solve(-f);
    if (!dx.allFinite()) return std::nullopt;
    double step = 1.0;
    const double f0 = f.norm();
    Vector trial(model.n), ftrial(model.n);
    bool accepted = false;
    for (int ls = 0; ls < 30; ++ls) {
      trial = x + step * dx;
      model.rhs(trial, u, ftrial);
      if (ftrial.allFinite() && ftrial.norm() < f0) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted) return std::nullopt;
    x = trial;
    f = ftrial;
  }
  if (!f.allFinite() || f.lpNorm<Eigen::Infinity>() > opt.tolerance) return std::nullopt;
  if (!model.inside_box(x)) return std::nullopt;
  return x;
}

}  // namespace

std::optional<Vector> find_steady_state(const PlantModel& model, const Vector& u,
                                        const Vector& x_guess, const SteadyStateOptions& options) {
  if (u.size() != model.r || x_guess.size() != model.n) {
    throw DimensionMismatch("find_steady_state: dimension mismatch");
  }
  if (auto x = newton(model, u, x_guess, options)) return x;
  // Settle by simulation, then polish.
  try {
    const int steps = static_cast<int>(std::ceil(options.settle_time / options.settle_dt));
    Vector x = x_guess;
    Rk4Stepper stepper(model, options.settle_dt, 4);
    for (int k = 0; k < steps; ++k) stepper.advance(x, u, static_cast<std::size_t>(k));
    return newton(model, u, x, options);
  } catch (const IntegrationDiverged&) {
    return std::nullopt;
  }
}

PlantModel two_cstr_plant(const TwoCstrParams& p) {
  if (p.nominal_input.size() != 3) throw InvalidArgument("two_cstr: nominal input needs 3 entries");
  PlantModel m;
  m.name = "two_cstr";
  m.n = 4;
  m.r = 3;
  m.l = 2;
  m.param_table = {
      {"flow", {p.flow_m3_per_min, "m3/min"}},
      {"volume1", {p.volume1_m3, "m3"}},
      {"volume2", {p.volume2_m3, "m3"}},
      {"feed_temperature", {p.feed_temperature_k, "K"}},
      {"density", {p.density_kg_per_m3, "kg/m3"}},
      {"heat_capacity", {p.heat_capacity_kj_per_kg_k, "kJ/(kg K)"}},
      {"reaction_enthalpy", {p.reaction_enthalpy_kj_per_kmol, "kJ/kmol"}},
      {"activation_temperature", {p.activation_temperature_k, "K"}},
      {"preexponential", {p.preexponential_per_min, "1/min"}},
  };
  const double q = p.flow_m3_per_min;
  const double v1 = p.volume1_m3;
  const double v2 = p.volume2_m3;
  const double t0 = p.feed_temperature_k;
  const double rho_cp = p.density_kg_per_m3 * p.heat_capacity_kj_per_kg_k;
  const double heat = -p.reaction_enthalpy_kj_per_kmol / rho_cp;
  const double e_over_r = p.activation_temperature_k;
  const double k0 = p.preexponential_per_min;
  m.rhs = [=](const Vector& x, const Vector& u, Vector& dx) {
    const double ca1 = x(0), t1 = x(1), ca2 = x(2), t2 = x(3);
    const double r1 = k0 * std::exp(-e_over_r / t1) * ca1;
    const double r2 = k0 * std::exp(-e_over_r / t2) * ca2;
    dx(0) = q / v1 * (u(2) - ca1) - r1;
    dx(1) = q / v1 * (t0 - t1) + heat * r1 + u(0) / (rho_cp * v1);
    dx(2) = q / v2 * (ca1 - ca2) - r2;
    dx(3) = q / v2 * (t1 - t2) + heat * r2 + u(1) / (rho_cp * v2);
  };
  m.out = [](const Vector& x, const Vector&, Vector& y) {
    y(0) = x(2);
    y(1) = x(3);
  };
  m.state_box = PlantModel::Box{
      Vector::Constant(4, 0.0), Vector::Constant(4, p.concentration_max_kmol_per_m3)};
  m.state_box->lower(1) = m.state_box->lower(3) = p.temperature_min_k;
  m.state_box->upper(1) = m.state_box->upper(3) = p.temperature_max_k;
  m.state_names = {"C_A1", "T_1", "C_A2", "T_2"};
  m.input_names = {"Q_1", "Q_2", "C_A0"};
  m.output_names = {"C_A2", "T_2"};
  m.u0 = Eigen::Map<const Vector>(p.nominal_input.data(), 3);
  Vector guess(4);
  guess << m.u0(2) / 2, t0 + 30.0, m.u0(2) / 4, t0 + 40.0;
  auto xs = find_steady_state(m, m.u0, guess);
  if (!xs) throw Infeasible("two_cstr: no steady state at the nominal input");
  m.x0 = *xs;
  return m;
}

PlantModel linear_plant(const Matrix& a, const Matrix& b, const Matrix& c, const Matrix& d,
                        const Vector& x0, const Vector& u0) {
  if (a.rows() != a.cols() || b.rows() != a.rows() || c.cols() != a.rows() ||
      d.rows() != c.rows() || d.cols() != b.cols() || x0.size() != a.rows() ||
      u0.size() != b.cols()) {
    throw DimensionMismatch("linear_plant: inconsistent matrix dimensions");
  }
  PlantModel m;
  m.name = "linear";
  m.n = static_cast<int>(a.rows());
  m.r = static_cast<int>(b.cols());
  m.l = static_cast<int>(c.rows());
  m.rhs = [a, b](const Vector& x, const Vector& u, Vector& dx) { dx.noalias() = a * x + b * u; };
  m.out = [c, d](const Vector& x, const Vector& u, Vector& y) { y.noalias() = c * x + d * u; };
  m.x0 = x0;
  m.u0 = u0;
  for (int i = 0; i < m.n; ++i) m.state_names.push_back("x_" + std::to_string(i + 1));
  for (int i = 0; i < m.r; ++i) m.input_names.push_back("u_" + std::to_string(i + 1));
  for (int i = 0; i < m.l; ++i) m.output_names.push_back("y_" + std::to_string(i + 1));
  return m;
}

}  // namespace approxmpc
