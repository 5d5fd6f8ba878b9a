#include "approxmpc/tpwl.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "approxmpc/errors.hpp"
#include "approxmpc/rng.hpp"

namespace approxmpc {

LocalAffineModel linearize(const PlantModel& model, const Vector& x, const Vector& u) {
  if (x.size() != model.n || u.size() != model.r) {
    throw DimensionMismatch("linearize: point has wrong dimension");
  }
  LocalAffineModel lm;
  lm.x = x;
  lm.u = u;
  lm.f = model.derivative(x, u);
  lm.g = model.output(x, u);
  lm.a = central_difference_jacobian([&](const Vector& v, Vector& o) { model.rhs(v, u, o); }, x,
                                     model.n);
  lm.b = central_difference_jacobian([&](const Vector& v, Vector& o) { model.rhs(x, v, o); }, u,
                                     model.n);
  lm.c = central_difference_jacobian([&](const Vector& v, Vector& o) { model.out(v, u, o); }, x,
                                     model.l);
  lm.d = central_difference_jacobian([&](const Vector& v, Vector& o) { model.out(x, v, o); }, u,
                                     model.l);
  if (!lm.a.allFinite() || !lm.b.allFinite() || !lm.c.allFinite() || !lm.d.allFinite()) {
    throw LinearizationError("linearize: non-finite Jacobian entries");
  }

  // Directional-derivative check on the state equation.
  SplitMix64 rng(0x7A3F1E5DULL);
  const Eigen::Index nv = model.n + model.r;
  Vector v(nv), dir(nv);
  v << x, u;
  Vector fp(model.n), fm(model.n);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    for (Eigen::Index j = 0; j < nv; ++j) dir(j) = rng.normal() * std::max(1.0, std::abs(v(j)));
    dir /= dir.norm();
    const double eps = 1e-4 * std::max(1.0, v.norm());
    const Vector vp = v + eps * dir;
    const Vector vm = v - eps * dir;
    model.rhs(vp.head(model.n), vp.tail(model.r), fp);
    model.rhs(vm.head(model.n), vm.tail(model.r), fm);
    const Vector fd = (fp - fm) / (2.0 * eps);
    const Vector lin = lm.a * dir.head(model.n) + lm.b * dir.tail(model.r);
    const double denom = std::max({lin.norm(), fd.norm(), 1e-8});
    worst = std::max(worst, (fd - lin).norm() / denom);
  }
  lm.jacobian_check_error = worst;
  if (!(worst <= 1e-4)) {
    throw LinearizationError("linearize: Jacobian fails the directional check (rel. error " +
                             std::to_string(worst) + ")");
  }
  return lm;
}

Vector state_scale(const Matrix& snapshots) {
  const auto n = snapshots.rows();
  Vector scale = Vector::Ones(n);
  if (snapshots.cols() < 2) return scale;
  const Vector mean = snapshots.rowwise().mean();
  for (Eigen::Index i = 0; i < n; ++i) {
    const double var = (snapshots.row(i).array() - mean(i)).square().mean();
    if (var > 0.0) scale(i) = std::sqrt(var);
  }
  return scale;
}

namespace {

// Greedy pass; stops early once more than `cap` points are found.
std::vector<Eigen::Index> greedy_points(const Matrix& xs, double threshold, std::size_t cap) {
  std::vector<Eigen::Index> pts{0};
  for (Eigen::Index k = 1; k < xs.cols(); ++k) {
    double dmin = std::numeric_limits<double>::infinity();
    for (auto p : pts) dmin = std::min(dmin, (xs.col(k) - xs.col(p)).norm());
    if (dmin > threshold) {
      pts.push_back(k);
      if (pts.size() > cap) break;
    }
  }
  return pts;
}

Eigen::Index distinct_states(const Matrix& xs, Eigen::Index enough) {
  std::vector<Eigen::Index> seen;
  for (Eigen::Index k = 0; k < xs.cols(); ++k) {
    bool dup = false;
    for (auto p : seen) {
      if (xs.col(k) == xs.col(p)) {
        dup = true;
        break;
      }
    }
    if (!dup) {
      seen.push_back(k);
      if (static_cast<Eigen::Index>(seen.size()) >= enough) break;
    }
  }
  return static_cast<Eigen::Index>(seen.size());
}

}  // namespace

PointSelection select_points(const Trajectory& trajectory, int s, const Vector* scale) {
  if (s < 1) throw InvalidArgument("select_points: s must be >= 1");
  if (trajectory.size() == 0 || trajectory.x.cols() == 0) {
    throw InvalidArgument("select_points: empty trajectory");
  }
  PointSelection sel;
  sel.requested = s;
  const Vector sc = scale ? *scale : state_scale(trajectory.x);
  if (sc.size() != trajectory.x.rows()) throw DimensionMismatch("select_points: scale has wrong size");
  const Matrix xs = sc.cwiseInverse().asDiagonal() * trajectory.x;

  if (distinct_states(xs, s) < s) {
    throw InvalidArgument("select_points: trajectory has fewer than " + std::to_string(s) +
                          " distinct states");
  }
  if (s == 1) {
    sel.indices = {0};
    sel.achieved = 1;
    return sel;
  }

  double hi = 0.0;
  for (Eigen::Index k = 0; k < xs.cols(); ++k) hi = std::max(hi, (xs.col(k) - xs.col(0)).norm());
  double lo = 0.0;
  const auto cap = static_cast<std::size_t>(s);
  std::vector<Eigen::Index> best = {0};
  double best_threshold = hi;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    auto pts = greedy_points(xs, mid, cap);
    const auto count = static_cast<int>(pts.size());
    if (count <= s && std::abs(count - s) < std::abs(static_cast<int>(best.size()) - s)) {
      best = pts;
      best_threshold = mid;
    }
    if (count == s) break;
    if (count > s) {
      lo = mid;
    } else {
      hi = mid;
    }
    if (hi - lo <= 1e-15 * std::max(1.0, hi)) break;
  }
  sel.indices = best;
  sel.achieved = static_cast<int>(best.size());
  sel.threshold = best_threshold;
  return sel;
}

TpwlModel::TpwlModel(std::vector<LocalAffineModel> locals, Vector distance_scale,
                     double weight_sharpness)
    : locals_(std::move(locals)), scale_(std::move(distance_scale)), sharpness_(weight_sharpness) {
  if (locals_.empty()) throw InvalidArgument("TpwlModel needs at least one local model");
  if (!(sharpness_ > 0.0)) throw InvalidArgument("weight sharpness must be positive");
  if (scale_.size() != locals_.front().x.size() || !(scale_.array() > 0.0).all()) {
    throw InvalidArgument("TpwlModel: distance scale must be positive with one entry per state");
  }
}

void TpwlModel::attach_basis(const PodBasis& basis) {
  if (basis.full_dim() != n()) throw DimensionMismatch("attach_basis: basis has wrong state dimension");
  basis_ = basis;
  if (basis_->scale.size() != basis_->basis.rows()) basis_->scale = Vector::Ones(basis_->basis.rows());
  lift_ = basis_->lift_matrix();
  const Matrix proj = basis_->project_matrix();
  z_points_.clear();
  ar_.clear();
  br_.clear();
  cr_.clear();
  fr_.clear();
  gr_.clear();
  for (const auto& lm : locals_) {
    z_points_.push_back(basis_->project(lm.x));
    const Vector offset = basis_->center - lm.x;
    ar_.push_back(proj * lm.a * lift_);
    br_.push_back(proj * lm.b);
    fr_.push_back(proj * (lm.f + lm.a * offset));
    cr_.push_back(lm.c * lift_);
    gr_.push_back(lm.g + lm.c * offset);
  }
}

int TpwlModel::state_dim(TpwlMode mode) const {
  if (mode == TpwlMode::Reduced) {
    require_reduced(mode);
    return basis_->k;
  }
  return n();
}

void TpwlModel::require_reduced(TpwlMode mode) const {
  if (mode == TpwlMode::Reduced && !basis_) {
    throw InvalidArgument("TPWL reduced-mode evaluation requires a POD basis");
  }
}

void TpwlModel::fill_weights(const Vector& dist, Vector& w) const {
  const double dmin = dist.minCoeff();
  if (dmin == 0.0) {
    w = (dist.array() == 0.0).cast<double>();
  } else {
    // exp(-beta d_i / d_min), shifted by the nearest point to avoid underflow.
    w = (-sharpness_ * (dist.array() / dmin - 1.0)).exp();
  }
  w /= w.sum();
}

Vector TpwlModel::weights(const Vector& state, TpwlMode mode) const {
  require_reduced(mode);
  const auto s = static_cast<Eigen::Index>(locals_.size());
  Vector dist(s);
  if (mode == TpwlMode::Full) {
    if (state.size() != n()) throw DimensionMismatch("TPWL: state has wrong dimension");
    for (Eigen::Index i = 0; i < s; ++i) {
      dist(i) = (state - locals_[static_cast<std::size_t>(i)].x).cwiseQuotient(scale_).norm();
    }
  } else {
    if (state.size() != basis_->k) throw DimensionMismatch("TPWL: reduced state has wrong dimension");
    for (Eigen::Index i = 0; i < s; ++i) {
      const Vector diff = lift_ * (state - z_points_[static_cast<std::size_t>(i)]);
      dist(i) = diff.cwiseQuotient(scale_).norm();
    }
  }
  Vector w(s);
  fill_weights(dist, w);
  return w;
}

void TpwlModel::derivative(const Vector& state, const Vector& u, TpwlMode mode,
                           Vector& dstate) const {
  const Vector w = weights(state, mode);
  dstate.setZero();
  for (std::size_t i = 0; i < locals_.size(); ++i) {
    const double wi = w(static_cast<Eigen::Index>(i));
    if (wi == 0.0) continue;
    const auto& lm = locals_[i];
    if (mode == TpwlMode::Full) {
      dstate.noalias() += wi * (lm.a * (state - lm.x) + lm.b * (u - lm.u) + lm.f);
    } else {
      dstate.noalias() += wi * (ar_[i] * state + br_[i] * (u - lm.u) + fr_[i]);
    }
  }
}

void TpwlModel::output(const Vector& state, const Vector& u, TpwlMode mode, Vector& y) const {
  const Vector w = weights(state, mode);
  y.setZero();
  for (std::size_t i = 0; i < locals_.size(); ++i) {
    const double wi = w(static_cast<Eigen::Index>(i));
    if (wi == 0.0) continue;
    const auto& lm = locals_[i];
    if (mode == TpwlMode::Full) {
      y.noalias() += wi * (lm.c * (state - lm.x) + lm.d * (u - lm.u) + lm.g);
    } else {
      y.noalias() += wi * (cr_[i] * state + lm.d * (u - lm.u) + gr_[i]);
    }
  }
}

void TpwlModel::evaluate_with_weights(const Vector& x, const Vector& u, const Vector& w, Vector& dx,
                                      Vector& y) const {
  if (w.size() != static_cast<Eigen::Index>(locals_.size())) {
    throw DimensionMismatch("evaluate_with_weights: one weight per local model required");
  }
  dx.setZero(n());
  y.setZero(l());
  for (std::size_t i = 0; i < locals_.size(); ++i) {
    const auto& lm = locals_[i];
    const double wi = w(static_cast<Eigen::Index>(i));
    dx.noalias() += wi * (lm.a * (x - lm.x) + lm.b * (u - lm.u) + lm.f);
    y.noalias() += wi * (lm.c * (x - lm.x) + lm.d * (u - lm.u) + lm.g);
  }
}

PlantModel TpwlModel::as_plant(TpwlMode mode) const {
  require_reduced(mode);
  auto shared = std::make_shared<const TpwlModel>(*this);
  PlantModel p;
  p.name = mode == TpwlMode::Full ? "tpwl" : "pod_tpwl";
  p.n = state_dim(mode);
  p.r = r();
  p.l = l();
  p.rhs = [shared, mode](const Vector& x, const Vector& u, Vector& dx) {
    shared->derivative(x, u, mode, dx);
  };
  p.out = [shared, mode](const Vector& x, const Vector& u, Vector& y) {
    shared->output(x, u, mode, y);
  };
  p.x0 = mode == TpwlMode::Full ? locals_.front().x : z_points_.front();
  p.u0 = locals_.front().u;
  for (int i = 0; i < p.n; ++i) p.state_names.push_back("x_" + std::to_string(i + 1));
  for (int i = 0; i < p.r; ++i) p.input_names.push_back("u_" + std::to_string(i + 1));
  for (int i = 0; i < p.l; ++i) p.output_names.push_back("y_" + std::to_string(i + 1));
  return p;
}

TpwlEvaluation evaluate(const TpwlModel& model, const Vector& state, const Vector& u,
                        TpwlMode mode) {
  if (u.size() != model.r()) throw DimensionMismatch("TPWL: input has wrong dimension");
  TpwlEvaluation ev;
  ev.derivative.resize(model.state_dim(mode));
  ev.output.resize(model.l());
  model.derivative(state, u, mode, ev.derivative);
  model.output(state, u, mode, ev.output);
  return ev;
}

Trajectory simulate_tpwl(const TpwlModel& model, const Vector& state0, const Matrix& u_seq,
                         double dt, TpwlMode mode, int substeps) {
  const PlantModel p = model.as_plant(mode);
  return integrate(p, state0, u_seq, dt, substeps);
}

TpwlModel build_tpwl(const PlantModel& plant, const Trajectory& trajectory, int s,
                     double weight_sharpness, PointSelection* selection) {
  const Vector scale = state_scale(trajectory.x);
  PointSelection sel = select_points(trajectory, s, &scale);
  std::vector<LocalAffineModel> locals;
  for (auto idx : sel.indices) {
    locals.push_back(linearize(plant, trajectory.x.col(idx), trajectory.u.col(idx)));
  }
  if (selection) *selection = sel;
  return TpwlModel(std::move(locals), scale, weight_sharpness);
}

}  // namespace approxmpc
