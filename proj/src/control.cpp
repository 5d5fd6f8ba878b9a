#include "approxmpc/control.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <deque>
#include <limits>

#include "approxmpc/csv.hpp"
#include "approxmpc/errors.hpp"
#include "approxmpc/rng.hpp"

namespace approxmpc {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

Vector clamp(const Vector& x, const Vector& lo, const Vector& hi) {
  return x.cwiseMax(lo).cwiseMin(hi);
}

Matrix reshape(const Vector& v, Eigen::Index rows, Eigen::Index cols) {
  return Eigen::Map<const Matrix>(v.data(), rows, cols);
}

Vector flatten(const Matrix& m) { return Eigen::Map<const Vector>(m.data(), m.size()); }

}  // namespace

// ---------------------------------------------------------------------------
// Box solver

BoxSolverResult minimize_box(const BoxObjective& fun, const Vector& x0, const Vector& lower,
                             const Vector& upper, const BoxSolverSettings& st) {
  const auto n = x0.size();
  if (lower.size() != n || upper.size() != n) throw DimensionMismatch("minimize_box: bound sizes");
  if ((lower.array() > upper.array()).any()) throw InvalidArgument("minimize_box: lower > upper");

  BoxSolverResult res;
  Vector x = clamp(x0, lower, upper);
  Vector g(n);
  double f = fun(x, &g);
  ++res.evaluations;
  res.x = x;
  res.f = f;
  if (!std::isfinite(f)) return res;

  std::deque<Vector> s_hist, y_hist;
  std::deque<double> rho_hist;
  Vector xn(n), gn(n), d(n);

  for (int it = 0; it < st.max_iterations; ++it) {
    const double pg = (x - clamp(x - g, lower, upper)).lpNorm<Eigen::Infinity>();
    res.projected_gradient = pg;
    if (pg <= st.tolerance * std::max(1.0, std::abs(f))) {
      res.converged = true;
      break;
    }
    // Variables held at a bound by the gradient are fixed for this iteration.
    Eigen::Array<bool, Eigen::Dynamic, 1> free(n);
    for (Eigen::Index i = 0; i < n; ++i) {
      free(i) = !((x(i) <= lower(i) && g(i) > 0.0) || (x(i) >= upper(i) && g(i) < 0.0));
    }
    auto mask = [&](Vector& v) {
      for (Eigen::Index i = 0; i < n; ++i) {
        if (!free(i)) v(i) = 0.0;
      }
    };

    // Two-loop recursion on the free subspace.
    Vector q = g;
    mask(q);
    const auto m = s_hist.size();
    std::vector<double> alpha(m);
    for (std::size_t k = m; k-- > 0;) {
      Vector sk = s_hist[k];
      mask(sk);
      Vector yk = y_hist[k];
      mask(yk);
      alpha[k] = rho_hist[k] * sk.dot(q);
      q -= alpha[k] * yk;
    }
    if (m > 0) {
      Vector sk = s_hist.back(), yk = y_hist.back();
      mask(sk);
      mask(yk);
      const double yy = yk.squaredNorm();
      if (yy > 0.0 && sk.dot(yk) > 0.0) q *= sk.dot(yk) / yy;
    }
    for (std::size_t k = 0; k < m; ++k) {
      Vector sk = s_hist[k];
      mask(sk);
      Vector yk = y_hist[k];
      mask(yk);
      const double beta = rho_hist[k] * yk.dot(q);
      q += sk * (alpha[k] - beta);
    }
    d = -q;
    mask(d);
    if (!(g.dot(d) < 0.0) || !d.allFinite()) {
      d = -g;
      mask(d);
      s_hist.clear();
      y_hist.clear();
      rho_hist.clear();
    }
    if (m == 0 || s_hist.empty()) {
      // Steepest descent start: limit the first move to a tenth of the box.
      const Eigen::Index big = n;
      double span = 0.0;
      for (Eigen::Index i = 0; i < big; ++i) span = std::max(span, upper(i) - lower(i));
      const double dn = d.lpNorm<Eigen::Infinity>();
      if (dn > 0.0 && std::isfinite(span) && span > 0.0) d *= std::min(1.0, 0.1 * span / dn);
    }

    double step = 1.0;
    bool accepted = false;
    double fn = kInf;
    for (int bt = 0; bt < st.max_backtracks; ++bt) {
      xn = clamp(x + step * d, lower, upper);
      fn = fun(xn, nullptr);
      ++res.evaluations;
      if (std::isfinite(fn) && fn <= f + st.armijo * g.dot(xn - x)) {
        accepted = true;
        break;
      }
      step *= 0.5;
    }
    if (!accepted || (xn - x).lpNorm<Eigen::Infinity>() == 0.0) break;

    fn = fun(xn, &gn);
    ++res.evaluations;
    ++res.iterations;
    const Vector sk = xn - x;
    const Vector yk = gn - g;
    const double sy = sk.dot(yk);
    if (sy > 1e-12 * sk.norm() * yk.norm()) {
      s_hist.push_back(sk);
      y_hist.push_back(yk);
      rho_hist.push_back(1.0 / sy);
      if (static_cast<int>(s_hist.size()) > st.memory) {
        s_hist.pop_front();
        y_hist.pop_front();
        rho_hist.pop_front();
      }
    }
    const double old_f = f;
    x = xn;
    f = fn;
    g = gn;
    res.x = x;
    res.f = f;
    if (std::abs(old_f - f) <= 1e-15 * std::max(1.0, std::abs(f))) {
      res.projected_gradient = (x - clamp(x - g, lower, upper)).lpNorm<Eigen::Infinity>();
      res.converged = res.projected_gradient <= st.tolerance * std::max(1.0, std::abs(f));
      break;
    }
  }
  if (!res.converged) {
    res.projected_gradient = (x - clamp(x - g, lower, upper)).lpNorm<Eigen::Infinity>();
    res.converged = res.projected_gradient <= st.tolerance * std::max(1.0, std::abs(f));
  }
  return res;
}

// ---------------------------------------------------------------------------
// Costs

void TrackingCost::validate(int l, int r_dim) const {
  if (q.size() != l || p_f.size() != l || y_s.size() != l || r.size() != r_dim ||
      u_s.size() != r_dim) {
    throw DimensionMismatch("tracking cost: weight or target dimensions do not match the model");
  }
  if ((q.array() < 0).any() || (r.array() < 0).any() || (p_f.array() < 0).any()) {
    throw InvalidArgument("tracking cost: weights must be non-negative");
  }
  if (q.sum() + r.sum() + p_f.sum() <= 0.0) {
    throw InvalidArgument("tracking cost: at least one weight must be positive");
  }
}

double TrackingCost::stage(const Vector& y, const Vector& u) const {
  return (y - y_s).cwiseAbs2().dot(q) + (u - u_s).cwiseAbs2().dot(r);
}

double TrackingCost::terminal(const Vector& y) const { return (y - y_s).cwiseAbs2().dot(p_f); }

void EconomicCost::validate(int l, int r) const {
  auto check = [](const Vector& v, int dim, const char* what) {
    if (v.size() != 0 && v.size() != dim) {
      throw DimensionMismatch(std::string("economic cost: ") + what + " has wrong dimension");
    }
  };
  check(y_linear, l, "y_linear");
  check(u_linear, r, "u_linear");
  check(u_abs_weight, r, "u_abs_weight");
  check(u_abs_offset, r, "u_abs_offset");
  check(y_quad, l, "y_quad");
  check(y_ref, l, "y_ref");
  check(u_quad, r, "u_quad");
  check(u_ref, r, "u_ref");
  if (y_quad.size() != y_ref.size() || u_quad.size() != u_ref.size()) {
    throw InvalidArgument("economic cost: quadratic weights need matching references");
  }
  if (empty()) {
    throw InvalidArgument("economic cost: no terms declared");
  }
}

bool EconomicCost::empty() const {
  return y_linear.size() + u_linear.size() + u_abs_weight.size() + y_quad.size() +
             u_quad.size() ==
         0 && constant == 0.0;
}

double EconomicCost::value(const Vector& y, const Vector& u) const {
  double v = constant;
  if (y_linear.size()) v += y_linear.dot(y);
  if (u_linear.size()) v += u_linear.dot(u);
  if (u_abs_weight.size()) {
    const Vector off = u_abs_offset.size() ? u_abs_offset : Vector::Zero(u.size());
    v += u_abs_weight.dot((u - off).cwiseAbs());
  }
  if (y_quad.size()) v += y_quad.dot((y - y_ref).cwiseAbs2());
  if (u_quad.size()) v += u_quad.dot((u - u_ref).cwiseAbs2());
  return v;
}

void EconomicCost::accumulate_gradient(const Vector& y, const Vector& u, Vector& gy,
                                       Vector& gu) const {
  if (y_linear.size()) gy += y_linear;
  if (u_linear.size()) gu += u_linear;
  if (u_abs_weight.size()) {
    for (Eigen::Index i = 0; i < u.size(); ++i) {
      const double off = u_abs_offset.size() ? u_abs_offset(i) : 0.0;
      gu(i) += u_abs_weight(i) * (u(i) - off >= 0.0 ? 1.0 : -1.0);
    }
  }
  if (y_quad.size()) gy += 2.0 * y_quad.cwiseProduct(y - y_ref);
  if (u_quad.size()) gu += 2.0 * u_quad.cwiseProduct(u - u_ref);
}

EconomicCost EconomicCost::throughput_energy(double alpha, double beta, double flow, int l, int r,
                                             int product_output, int feed_input,
                                             const std::vector<int>& energy_inputs) {
  if (product_output < 0 || product_output >= l || feed_input < 0 || feed_input >= r) {
    throw InvalidArgument("throughput_energy: channel index out of range");
  }
  EconomicCost c;
  c.y_linear = Vector::Zero(l);
  c.u_linear = Vector::Zero(r);
  c.u_abs_weight = Vector::Zero(r);
  c.u_abs_offset = Vector::Zero(r);
  c.y_linear(product_output) = alpha * flow;
  c.u_linear(feed_input) = -alpha * flow;
  std::string energy;
  for (int i : energy_inputs) {
    if (i < 0 || i >= r) throw InvalidArgument("throughput_energy: energy input out of range");
    c.u_abs_weight(i) = beta;
    energy += (energy.empty() ? "|u_" : " + |u_") + std::to_string(i + 1) + "|";
  }
  c.expression = "-" + format_double(alpha) + "*" + format_double(flow) + "*(u_" +
                 std::to_string(feed_input + 1) + " - y_" + std::to_string(product_output + 1) +
                 ") + " + format_double(beta) + "*(" + energy + ")";
  return c;
}

EconomicCost EconomicCost::from_tracking(const TrackingCost& t) {
  EconomicCost c;
  c.y_quad = t.q;
  c.y_ref = t.y_s;
  c.u_quad = t.r;
  c.u_ref = t.u_s;
  c.expression = "|y - y_s|_Q^2 + |u - u_s|_R^2";
  return c;
}

// ---------------------------------------------------------------------------
// Prediction models

std::string to_string(ModelKind kind) {
  switch (kind) {
    case ModelKind::Plant:
      return "plant";
    case ModelKind::Tpwl:
      return "tpwl";
    case ModelKind::PodTpwl:
      return "pod_tpwl";
    case ModelKind::Lti:
      return "subspace";
    case ModelKind::Nn:
      return "nn";
  }
  return "unknown";
}

Matrix PredictionModel::prediction_jacobian(const Matrix& u) const {
  const Eigen::Index rows = static_cast<Eigen::Index>(outputs()) * u.cols();
  return central_difference_jacobian(
      [&](const Vector& v, Vector& out) { out = flatten(predict(reshape(v, u.rows(), u.cols()))); },
      flatten(u), rows);
}

SimulatedPrediction::SimulatedPrediction(PlantModel model, ModelKind kind, std::string tag,
                                         double dt, int substeps,
                                         std::function<Vector(const Vector&)> to_state)
    : model_(std::move(model)),
      kind_(kind),
      tag_(std::move(tag)),
      dt_(dt),
      substeps_(substeps),
      to_state_(std::move(to_state)),
      state0_(model_.x0) {
  if (!(dt > 0.0) || substeps < 1) throw InvalidArgument("prediction model: bad dt or substeps");
}

void SimulatedPrediction::initialize(const Measurement& m) {
  state0_ = to_state_ ? to_state_(m.x) : m.x;
  if (state0_.size() != model_.n) throw DimensionMismatch("prediction model: state dimension");
}

Matrix SimulatedPrediction::simulate(const Matrix& u, std::vector<Vector>* states) const {
  if (u.rows() != model_.r || u.cols() < 1) throw DimensionMismatch("predict: input sequence shape");
  const auto n_steps = u.cols();
  Rk4Stepper stepper(model_, dt_, substeps_);
  Matrix y(model_.l, n_steps);
  Vector x = state0_;
  Vector yk(model_.l);
  if (states) {
    states->assign(1, x);
    states->reserve(static_cast<std::size_t>(n_steps) + 1);
  }
  for (Eigen::Index j = 0; j < n_steps; ++j) {
    stepper.advance(x, u.col(j), static_cast<std::size_t>(j));
    if (states) states->push_back(x);
    model_.out(x, u.col(std::min<Eigen::Index>(j + 1, n_steps - 1)), yk);
    y.col(j) = yk;
  }
  return y;
}

Matrix SimulatedPrediction::predict(const Matrix& u) const { return simulate(u, nullptr); }

Matrix SimulatedPrediction::prediction_jacobian(const Matrix& u) const {
  std::vector<Vector> states;
  simulate(u, &states);
  const auto n_steps = u.cols();
  const int n = model_.n;
  const int l = model_.l;
  const int r = model_.r;
  Rk4Stepper stepper(model_, dt_, substeps_);

  // Jacobian of one sample map x+ = phi(x, u) by central differences, falling
  // back to one side when a perturbed step leaves the state box.
  Matrix phi(n, n + r);
  Vector xp(n), xm(n), base_next(n);
  auto step_jacobian = [&](Eigen::Index j) {
    const Vector& xj = states[static_cast<std::size_t>(j)];
    const Vector& xn = states[static_cast<std::size_t>(j) + 1];
    Vector uj = u.col(j);
    Vector xv = xj;
    for (int c = 0; c < n + r; ++c) {
      double& v = c < n ? xv(c) : uj(c - n);
      const double base = v;
      const double h = 1e-6 * std::max(1.0, std::abs(base));
      bool ok_plus = true, ok_minus = true;
      v = base + h;
      xp = xv;
      try {
        stepper.advance(xp, uj, static_cast<std::size_t>(j));
      } catch (const IntegrationDiverged&) {
        ok_plus = false;
      }
      v = base - h;
      xm = xv;
      try {
        stepper.advance(xm, uj, static_cast<std::size_t>(j));
      } catch (const IntegrationDiverged&) {
        ok_minus = false;
      }
      v = base;
      if (ok_plus && ok_minus) {
        phi.col(c) = (xp - xm) / (2.0 * h);
      } else if (ok_plus) {
        phi.col(c) = (xp - xn) / h;
      } else if (ok_minus) {
        phi.col(c) = (xn - xm) / h;
      } else {
        throw IntegrationDiverged(static_cast<std::size_t>(j),
                                  "both finite-difference perturbations diverged");
      }
    }
  };
  auto out_jacobian = [&](const Vector& x, const Vector& uu) {
    Vector xu(n + r);
    xu << x, uu;
    return central_difference_jacobian(
        [&](const Vector& v, Vector& y) { model_.out(v.head(n), v.tail(r), y); }, xu, l);
  };

  // sens holds dx_{j+1} / du_m for m <= j, stacked as n x (r N).
  Matrix jac = Matrix::Zero(l * n_steps, r * n_steps);
  Matrix sens = Matrix::Zero(n, r * n_steps);
  for (Eigen::Index j = 0; j < n_steps; ++j) {
    step_jacobian(j);
    const Eigen::Index cols = r * j;
    if (cols > 0) sens.leftCols(cols) = phi.leftCols(n) * sens.leftCols(cols);
    sens.middleCols(r * j, r) = phi.rightCols(r);
    const Eigen::Index ju = std::min<Eigen::Index>(j + 1, n_steps - 1);
    const Matrix cd = out_jacobian(states[static_cast<std::size_t>(j) + 1], u.col(ju));
    jac.block(j * l, 0, l, r * (j + 1)) = cd.leftCols(n) * sens.leftCols(r * (j + 1));
    jac.block(j * l, ju * r, l, r) += cd.rightCols(r);
  }
  return jac;
}

std::shared_ptr<SimulatedPrediction> make_plant_prediction(const PlantModel& plant, double dt,
                                                           int substeps) {
  return std::make_shared<SimulatedPrediction>(plant, ModelKind::Plant, "plant", dt, substeps);
}

std::shared_ptr<SimulatedPrediction> make_tpwl_prediction(std::shared_ptr<const TpwlModel> tpwl,
                                                          TpwlMode mode, double dt, int substeps,
                                                          const std::string& tag) {
  if (!tpwl) throw InvalidArgument("make_tpwl_prediction: null model");
  const ModelKind kind = mode == TpwlMode::Full ? ModelKind::Tpwl : ModelKind::PodTpwl;
  std::function<Vector(const Vector&)> to_state;
  if (mode == TpwlMode::Reduced) {
    if (!tpwl->basis()) throw InvalidArgument("POD-TPWL prediction needs a basis");
    to_state = [tpwl](const Vector& x) { return tpwl->basis()->project(x); };
  }
  return std::make_shared<SimulatedPrediction>(tpwl->as_plant(mode), kind,
                                               tag.empty() ? to_string(kind) : tag, dt, substeps,
                                               to_state);
}

LtiPrediction::LtiPrediction(LinearStateSpaceModel model, int history, std::string tag)
    : model_(std::move(model)), history_(history), tag_(std::move(tag)) {
  if (history_ < 1) throw InvalidArgument("LtiPrediction: history must be >= 1");
  if (model_.u_mean.size() != model_.inputs()) model_.u_mean = Vector::Zero(model_.inputs());
  if (model_.y_mean.size() != model_.outputs()) model_.y_mean = Vector::Zero(model_.outputs());
  z0_ = Vector::Zero(model_.order());
}

void LtiPrediction::initialize(const Measurement& m) {
  if (m.u_past.cols() < history_ || m.y_past.cols() < history_) {
    throw DatasetTooShort("LtiPrediction: measurement history shorter than " +
                          std::to_string(history_) + " samples");
  }
  z0_ = estimate_current_state(model_, m.u_past.rightCols(history_), m.y_past.rightCols(history_));
}

Matrix LtiPrediction::predict(const Matrix& u) const {
  if (u.rows() != inputs() || u.cols() < 1) throw DimensionMismatch("predict: input sequence shape");
  const auto n_steps = u.cols();
  Matrix y(outputs(), n_steps);
  Vector z = z0_;
  for (Eigen::Index j = 0; j < n_steps; ++j) {
    z = model_.a * z + model_.b * (u.col(j) - model_.u_mean);
    const Eigen::Index uj = std::min<Eigen::Index>(j + 1, n_steps - 1);
    y.col(j) = model_.c * z + model_.d * (u.col(uj) - model_.u_mean) + model_.y_mean;
  }
  return y;
}

Matrix LtiPrediction::prediction_jacobian(const Matrix& u) const {
  const auto n_steps = u.cols();
  const int l = outputs();
  const int r = inputs();
  Matrix jac = Matrix::Zero(l * n_steps, r * n_steps);
  // markov[q] = C A^q B
  std::vector<Matrix> markov;
  Matrix ab = model_.b;
  for (Eigen::Index q = 0; q < n_steps; ++q) {
    markov.push_back(model_.c * ab);
    ab = model_.a * ab;
  }
  for (Eigen::Index j = 0; j < n_steps; ++j) {  // output y_{j+1}
    for (Eigen::Index m = 0; m <= j; ++m) {
      jac.block(j * l, m * r, l, r) += markov[static_cast<std::size_t>(j - m)];
    }
    const Eigen::Index uj = std::min<Eigen::Index>(j + 1, n_steps - 1);
    jac.block(j * l, uj * r, l, r) += model_.d;
  }
  return jac;
}

NnPrediction::NnPrediction(NNPredictor model, std::string tag)
    : model_(std::move(model)), tag_(std::move(tag)) {
  model_.validate();
  past_u_ = Matrix::Zero(model_.r, model_.n_past);
  past_y_ = Matrix::Zero(model_.l, model_.n_past);
}

void NnPrediction::initialize(const Measurement& m) {
  if (m.u_past.cols() < model_.n_past || m.y_past.cols() < model_.n_past) {
    throw DatasetTooShort("NnPrediction: measurement history shorter than N_past = " +
                          std::to_string(model_.n_past));
  }
  past_u_ = m.u_past.rightCols(model_.n_past);
  past_y_ = m.y_past.rightCols(model_.n_past);
}

Matrix NnPrediction::predict(const Matrix& u) const {
  if (u.rows() != model_.r || u.cols() < 1) throw DimensionMismatch("predict: input sequence shape");
  const auto n_steps = u.cols();
  if (model_.n_future < n_steps + 1) {
    throw InvalidArgument("NnPrediction: N_future = " + std::to_string(model_.n_future) +
                          " is too short for horizon " + std::to_string(n_steps) +
                          " (needs N + 1)");
  }
  Matrix future(model_.r, model_.n_future - 1);
  for (Eigen::Index j = 0; j < future.cols(); ++j) {
    future.col(j) = u.col(std::min<Eigen::Index>(j, n_steps - 1));
  }
  const Vector out = model_.forward(model_.assemble_input(past_u_, past_y_, future));
  Matrix y(model_.l, n_steps);
  for (Eigen::Index j = 0; j < n_steps; ++j) y.col(j) = out.segment((j + 1) * model_.l, model_.l);
  return y;
}

// ---------------------------------------------------------------------------
// Controllers

void ControlProblem::validate() const {
  if (horizon < 1) throw InvalidArgument("control problem: horizon must be >= 1");
  if (!(dt > 0.0)) throw InvalidArgument("control problem: dt must be positive");
  if (!model) throw InvalidArgument("control problem: no prediction model");
  const int r_dim = model->inputs();
  const int l = model->outputs();
  if (u_lower.size() != r_dim || u_upper.size() != r_dim) {
    throw DimensionMismatch("control problem: input bounds do not match the model");
  }
  if ((u_lower.array() > u_upper.array()).any()) {
    throw InvalidArgument("control problem: u_lower > u_upper");
  }
  if (y_min.size() != 0 && y_min.size() != l) throw DimensionMismatch("control problem: y_min");
  if (mode == ControllerMode::Tracking) {
    tracking.validate(l, r_dim);
  } else {
    economic.validate(l, r_dim);
  }
  const Vector& us = steady_input();
  if (us.size() != r_dim) throw DimensionMismatch("control problem: steady input dimension");
  if (!(penalty_weight >= 0.0)) throw InvalidArgument("control problem: penalty weight < 0");
}

const Vector& ControlProblem::steady_input() const {
  return u_steady.size() ? u_steady : tracking.u_s;
}

namespace {

double floor_penalty(const ControlProblem& p, const Vector& y) {
  if (p.penalty_weight == 0.0) return 0.0;
  double v = 0.0;
  for (Eigen::Index i = 0; i < y.size(); ++i) {
    const double floor = p.y_min.size() ? p.y_min(i) : 0.0;
    const double gap = floor - y(i);
    if (gap > 0.0) v += gap * gap;
  }
  return p.penalty_weight * v;
}

// Objective with optional derivatives dJ/dY, dJ/dU (partial, Y treated as free).
double objective_parts(const ControlProblem& p, const Matrix& u, const Matrix& y, Matrix* gy,
                       Matrix* gu) {
  const auto n_steps = u.cols();
  if (y.cols() != n_steps) throw DimensionMismatch("objective: prediction length != horizon");
  double total = 0.0;
  if (gy) gy->setZero(y.rows(), n_steps);
  if (gu) gu->setZero(u.rows(), n_steps);
  for (Eigen::Index j = 0; j < n_steps; ++j) {
    const Vector yj = y.col(j);
    const Vector uj = u.col(j);
    if (p.mode == ControllerMode::Tracking) {
      total += p.tracking.stage(yj, uj);
      if (gy) gy->col(j) += 2.0 * p.tracking.q.cwiseProduct(yj - p.tracking.y_s);
      if (gu) gu->col(j) += 2.0 * p.tracking.r.cwiseProduct(uj - p.tracking.u_s);
    } else {
      total += p.economic.value(yj, uj);
      if (gy) {
        Vector gyj = Vector::Zero(yj.size());
        Vector guj = Vector::Zero(uj.size());
        p.economic.accumulate_gradient(yj, uj, gyj, guj);
        gy->col(j) += gyj;
        gu->col(j) += guj;
      }
    }
    total += floor_penalty(p, yj);
    if (gy && p.penalty_weight > 0.0) {
      for (Eigen::Index i = 0; i < yj.size(); ++i) {
        const double floor = p.y_min.size() ? p.y_min(i) : 0.0;
        const double gap = floor - yj(i);
        if (gap > 0.0) (*gy)(i, j) -= 2.0 * p.penalty_weight * gap;
      }
    }
  }
  if (p.mode == ControllerMode::Tracking) {
    const Vector yn = y.col(n_steps - 1);
    total += p.tracking.terminal(yn);
    if (gy) gy->col(n_steps - 1) += 2.0 * p.tracking.p_f.cwiseProduct(yn - p.tracking.y_s);
  }
  return total;
}

}  // namespace

double horizon_objective(const ControlProblem& problem, const Matrix& u, const Matrix& y) {
  return objective_parts(problem, u, y, nullptr, nullptr);
}

double horizon_objective(const ControlProblem& problem, const Matrix& u) {
  Matrix y;
  try {
    y = problem.model->predict(u);
  } catch (const IntegrationDiverged&) {
    return kInf;
  }
  if (!y.allFinite()) return kInf;
  return objective_parts(problem, u, y, nullptr, nullptr);
}

double horizon_objective_gradient(const ControlProblem& problem, const Matrix& u, Matrix& grad) {
  const Matrix y = problem.model->predict(u);
  Matrix gy, gu;
  const double f = objective_parts(problem, u, y, &gy, &gu);
  const Matrix jac = problem.model->prediction_jacobian(u);
  const Vector g = flatten(gu) + jac.transpose() * flatten(gy);
  grad = reshape(g, u.rows(), u.cols());
  return f;
}

namespace {

StepResult solve_step(const ControlProblem& p, const Measurement& m, const Matrix* previous) {
  p.validate();
  const auto start_time = std::chrono::steady_clock::now();
  p.model->initialize(m);
  const int r = p.r();
  const int n_steps = p.horizon;
  const Vector range = (p.u_upper - p.u_lower).cwiseMax(1e-300);
  const Vector lo_s = Vector::Zero(r * n_steps);
  const Vector hi_s = Vector::Ones(r * n_steps);
  // Fixed inputs (zero-width bounds) stay at their bound.
  auto to_u = [&](const Vector& v) {
    Matrix u = reshape(v, r, n_steps);
    for (int j = 0; j < n_steps; ++j) {
      u.col(j) = p.u_lower + range.cwiseProduct(u.col(j));
      u.col(j) = u.col(j).cwiseMin(p.u_upper);
    }
    return u;
  };
  auto to_v = [&](const Matrix& u) {
    Matrix v(r, n_steps);
    for (int j = 0; j < n_steps; ++j) {
      v.col(j) = (u.col(j) - p.u_lower).cwiseQuotient(range);
    }
    return clamp(flatten(v), lo_s, hi_s);
  };

  BoxObjective fun = [&](const Vector& v, Vector* grad) -> double {
    const Matrix u = to_u(v);
    try {
      if (!grad) return horizon_objective(p, u);
      Matrix g;
      const double f = horizon_objective_gradient(p, u, g);
      for (int j = 0; j < n_steps; ++j) g.col(j) = g.col(j).cwiseProduct(range);
      *grad = flatten(g);
      if (!std::isfinite(f) || !grad->allFinite()) return kInf;
      return f;
    } catch (const IntegrationDiverged&) {
      return kInf;
    }
  };

  StepResult res;
  Matrix steady(r, n_steps);
  for (int j = 0; j < n_steps; ++j) steady.col(j) = clamp(p.steady_input(), p.u_lower, p.u_upper);
  const Vector v_steady = to_v(steady);
  res.steady_objective = fun(v_steady, nullptr);
  res.shifted_objective = kInf;
  Vector v_start = v_steady;
  double f_start = res.steady_objective;
  res.start = "steady";
  if (previous && previous->rows() == r && previous->cols() >= 1) {
    Matrix shifted(r, n_steps);
    for (int j = 0; j < n_steps; ++j) {
      shifted.col(j) = previous->col(std::min<Eigen::Index>(j + 1, previous->cols() - 1));
    }
    const Vector v_shift = to_v(shifted);
    res.shifted_objective = fun(v_shift, nullptr);
    if (res.shifted_objective < f_start) {
      v_start = v_shift;
      f_start = res.shifted_objective;
      res.start = "shifted";
    }
  }
  if (!std::isfinite(f_start)) {
    throw IntegrationDiverged(0, "every start candidate makes the prediction diverge");
  }
  const BoxSolverResult sol = minimize_box(fun, v_start, lo_s, hi_s, p.solver);
  res.u_sequence = to_u(sol.x);
  res.u_first = res.u_sequence.col(0);
  res.objective = sol.f;
  res.iterations = sol.iterations;
  res.converged = sol.converged;
  res.solve_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start_time).count();
  return res;
}

}  // namespace

StepResult solve_mpc_step(const ControlProblem& problem, const Measurement& m,
                          const Matrix* previous) {
  if (problem.mode != ControllerMode::Tracking) {
    throw InvalidArgument("solve_mpc_step needs a tracking problem");
  }
  return solve_step(problem, m, previous);
}

StepResult solve_empc_step(const ControlProblem& problem, const Measurement& m,
                           const Matrix* previous) {
  if (problem.mode != ControllerMode::Economic) {
    throw InvalidArgument("solve_empc_step needs an economic problem");
  }
  return solve_step(problem, m, previous);
}

Controller::Controller(ControlProblem problem) : problem_(std::move(problem)) {
  problem_.validate();
}

StepResult Controller::step(const Measurement& m) {
  const Matrix* prev = previous_ ? &*previous_ : nullptr;
  StepResult res = problem_.mode == ControllerMode::Tracking ? solve_mpc_step(problem_, m, prev)
                                                              : solve_empc_step(problem_, m, prev);
  previous_ = res.u_sequence;
  return res;
}

// ---------------------------------------------------------------------------
// Steady-state optimization

SteadyStateResult steady_state_optimize(const PlantModel& plant, const EconomicCost& cost,
                                        const Vector& u_lower, const Vector& u_upper,
                                        const SteadyStateSettings& settings) {
  cost.validate(plant.l, plant.r);
  if (u_lower.size() != plant.r || u_upper.size() != plant.r) {
    throw DimensionMismatch("steady_state_optimize: bound dimensions");
  }
  if ((u_lower.array() > u_upper.array()).any()) {
    throw InvalidArgument("steady_state_optimize: u_lower > u_upper");
  }
  const Vector range = (u_upper - u_lower).cwiseMax(1e-300);
  auto to_u = [&](const Vector& v) -> Vector {
    return (u_lower + range.cwiseProduct(v)).cwiseMin(u_upper);
  };
  Vector x_warm = plant.x0;

  auto steady = [&](const Vector& u) -> std::optional<Vector> {
    auto xs = find_steady_state(plant, u, x_warm, settings.root);
    if (!xs) xs = find_steady_state(plant, u, plant.x0, settings.root);
    return xs;
  };
  auto value = [&](const Vector& v) -> double {
    const Vector u = to_u(v);
    const auto xs = steady(u);
    if (!xs) return kInf;
    x_warm = *xs;
    return cost.value(plant.output(*xs, u), u);
  };
  BoxObjective fun = [&](const Vector& v, Vector* grad) -> double {
    const double f = value(v);
    if (!grad || !std::isfinite(f)) return f;
    const Vector center_state = x_warm;
    grad->resize(v.size());
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      const double h = 1e-6;
      Vector vp = v, vm = v;
      vp(i) = std::min(1.0, v(i) + h);
      vm(i) = std::max(0.0, v(i) - h);
      x_warm = center_state;
      const double fp = value(vp);
      x_warm = center_state;
      const double fm = value(vm);
      if (!std::isfinite(fp) || !std::isfinite(fm) || vp(i) == vm(i)) {
        (*grad)(i) = 0.0;
      } else {
        (*grad)(i) = (fp - fm) / (vp(i) - vm(i));
      }
    }
    x_warm = center_state;
    return f;
  };

  std::vector<Vector> starts;
  const Vector lo = Vector::Zero(plant.r), hi = Vector::Ones(plant.r);
  starts.push_back(clamp((plant.u0 - u_lower).cwiseQuotient(range), lo, hi));
  starts.push_back(Vector::Constant(plant.r, 0.5));
  SplitMix64 rng(settings.seed);
  for (int s = 2; s < settings.starts; ++s) {
    Vector v(plant.r);
    for (int i = 0; i < plant.r; ++i) v(i) = rng.uniform();
    starts.push_back(v);
  }

  SteadyStateResult best;
  best.cost = kInf;
  for (const auto& v0 : starts) {
    x_warm = plant.x0;
    const BoxSolverResult sol = minimize_box(fun, v0, lo, hi, settings.solver);
    if (!std::isfinite(sol.f)) continue;
    ++best.feasible_starts;
    if (sol.f < best.cost) {
      const Vector u = to_u(sol.x);
      x_warm = plant.x0;
      const auto xs = steady(u);
      if (!xs) continue;
      best.cost = sol.f;
      best.u_s = u;
      best.x_s = *xs;
      best.y_s = plant.output(*xs, u);
    }
  }
  if (!std::isfinite(best.cost)) {
    throw Infeasible("steady_state_optimize: no steady state found inside the bounds from any start");
  }
  best.cost = cost.value(best.y_s, best.u_s);
  return best;
}

// ---------------------------------------------------------------------------
// Closed loop

double SimulationResult::mean_solve_seconds() const {
  return solve_seconds.size() ? solve_seconds.mean() : 0.0;
}

double SimulationResult::max_solve_seconds() const {
  return solve_seconds.size() ? solve_seconds.maxCoeff() : 0.0;
}

SimulationResult run_closed_loop(const PlantModel& plant, Controller& controller, int steps,
                                 const ClosedLoopOptions& opt) {
  if (steps < 1) throw InvalidArgument("run_closed_loop: steps must be >= 1");
  const ControlProblem& p = controller.problem();
  if (p.model->inputs() != plant.r || p.model->outputs() != plant.l) {
    throw DimensionMismatch("run_closed_loop: model and plant channel counts differ");
  }
  // Without declared economic terms the tracking stage cost is recorded instead.
  const EconomicCost econ = p.economic.empty() ? EconomicCost::from_tracking(p.tracking) : p.economic;

  Vector x = opt.x_init.size() ? opt.x_init : plant.x0;
  if (x.size() != plant.n) throw DimensionMismatch("run_closed_loop: x_init dimension");
  const Vector u_hist_input = opt.u_history.size() ? opt.u_history : plant.u0;
  const int hist = std::max(opt.history_length, p.model->history_needed());

  Rk4Stepper stepper(plant, p.dt, opt.substeps);
  // Pre-loop record: u_history held from x_init; the loop starts where it ends.
  Measurement meas;
  meas.u_past.resize(plant.r, hist);
  meas.y_past.resize(plant.l, hist);
  for (int k = 0; k < hist; ++k) {
    meas.u_past.col(k) = u_hist_input;
    meas.y_past.col(k) = plant.output(x, u_hist_input);
    stepper.advance(x, u_hist_input, static_cast<std::size_t>(k));
  }

  SimulationResult res;
  res.model_tag = p.model->tag();
  res.mode = p.mode;
  res.dt = p.dt;
  res.t.resize(steps);
  res.x.resize(plant.n, steps);
  res.u.resize(plant.r, steps);
  res.y.resize(plant.l, steps);
  res.stage_cost.resize(steps);
  res.economic_cost.resize(steps);
  res.objective.resize(steps);
  res.solve_seconds.resize(steps);

  for (int k = 0; k < steps; ++k) {
    meas.x = x;
    StepResult sr;
    try {
      sr = controller.step(meas);
    } catch (const IntegrationDiverged& e) {
      throw IntegrationDiverged(static_cast<std::size_t>(k),
                                std::string("controller prediction at closed-loop step: ") +
                                    e.what());
    }
    const Vector u = sr.u_first.cwiseMax(p.u_lower).cwiseMin(p.u_upper);
    const Vector y = plant.output(x, u);
    res.t(k) = k * p.dt;
    res.x.col(k) = x;
    res.u.col(k) = u;
    res.y.col(k) = y;
    res.stage_cost(k) =
        p.mode == ControllerMode::Tracking ? p.tracking.stage(y, u) : p.economic.value(y, u);
    res.economic_cost(k) = econ.value(y, u);
    res.objective(k) = sr.objective;
    res.solve_seconds(k) = sr.solve_seconds;
    res.iterations.push_back(sr.iterations);
    res.converged.push_back(sr.converged);

    stepper.advance(x, u, static_cast<std::size_t>(k));
    if (hist > 0) {
      meas.u_past.leftCols(hist - 1) = meas.u_past.rightCols(hist - 1).eval();
      meas.y_past.leftCols(hist - 1) = meas.y_past.rightCols(hist - 1).eval();
      meas.u_past.col(hist - 1) = u;
      meas.y_past.col(hist - 1) = y;
    }
  }
  res.final_state = x;
  return res;
}

void write_simulation_csv(const std::string& path, const SimulationResult& r,
                          const PlantModel& plant) {
  std::vector<std::string> header{"step", "t"};
  for (int i = 0; i < plant.r; ++i) header.push_back("u_" + std::to_string(i + 1));
  for (int i = 0; i < plant.l; ++i) header.push_back("y_" + std::to_string(i + 1));
  for (int i = 0; i < plant.n; ++i) header.push_back("x_" + std::to_string(i + 1));
  for (const char* h : {"stage_cost", "economic_cost", "objective", "iterations", "converged",
                        "solve_time_s"}) {
    header.emplace_back(h);
  }
  CsvWriter w(path, header);
  for (Eigen::Index k = 0; k < r.steps(); ++k) {
    std::vector<double> row{static_cast<double>(k), r.t(k)};
    for (Eigen::Index i = 0; i < r.u.rows(); ++i) row.push_back(r.u(i, k));
    for (Eigen::Index i = 0; i < r.y.rows(); ++i) row.push_back(r.y(i, k));
    for (Eigen::Index i = 0; i < r.x.rows(); ++i) row.push_back(r.x(i, k));
    row.push_back(r.stage_cost(k));
    row.push_back(r.economic_cost(k));
    row.push_back(r.objective(k));
    row.push_back(r.iterations[static_cast<std::size_t>(k)]);
    row.push_back(r.converged[static_cast<std::size_t>(k)] ? 1.0 : 0.0);
    row.push_back(r.solve_seconds(k));
    w.write_row(row);
  }
}

void write_simulation_summary(const std::string& path, const SimulationResult& r) {
  CsvWriter w(path, {"key", "value"});
  int nonconverged = 0;
  for (bool c : r.converged) nonconverged += c ? 0 : 1;
  w.write_row(std::vector<std::string>{"model", r.model_tag});
  w.write_row(std::vector<std::string>{
      "mode", r.mode == ControllerMode::Tracking ? std::string("mpc") : std::string("empc")});
  w.write_row(std::vector<std::string>{"steps", std::to_string(r.steps())});
  w.write_row(std::vector<std::string>{"accumulated_stage_cost",
                                       format_double(r.accumulated_stage_cost())});
  w.write_row(std::vector<std::string>{"accumulated_economic_cost",
                                       format_double(r.accumulated_economic_cost())});
  w.write_row(std::vector<std::string>{"nonconverged_steps", std::to_string(nonconverged)});
  w.write_row(std::vector<std::string>{"mean_solve_time_s", format_double(r.mean_solve_seconds())});
  w.write_row(std::vector<std::string>{"max_solve_time_s", format_double(r.max_solve_seconds())});
}

}  // namespace approxmpc
