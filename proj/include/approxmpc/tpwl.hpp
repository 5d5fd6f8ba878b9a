#pragma once

#include <memory>
#include <optional>
#include <vector>

#include "approxmpc/plant.hpp"
#include "approxmpc/pod.hpp"

namespace approxmpc {

/// First-order expansion of (f, g) around (x_i, u_i).
struct LocalAffineModel {
  Vector x, u;
  Matrix a, b, c, d;  ///< df/dx, df/du, dg/dx, dg/du
  Vector f, g;        ///< f(x_i, u_i), g(x_i, u_i)
  double jacobian_check_error = 0.0;
};

/// Central-difference Jacobians with h_j = 1e-6 max(1, |v_j|), verified
/// against directional differences in 5 random directions.
LocalAffineModel linearize(const PlantModel& model, const Vector& x, const Vector& u);

struct PointSelection {
  std::vector<Eigen::Index> indices;  ///< trajectory sample of every point
  int requested = 0;
  int achieved = 0;
  double threshold = 0.0;  ///< final scaled distance threshold
};

/// Greedy distance-based selection along a trajectory: a state becomes a new
/// point when its scaled distance to every existing point exceeds a threshold,
/// which is bisected until `s` points result (or the closest reachable count).
/// `scale` defaults to the per-component standard deviation of the states.
PointSelection select_points(const Trajectory& trajectory, int s, const Vector* scale = nullptr);

/// Per-component standard deviation of snapshot columns; zero spread maps to 1.
Vector state_scale(const Matrix& snapshots);

enum class TpwlMode { Full, Reduced };

/// Weighted blend of local affine models, optionally Galerkin-projected onto
/// a POD basis.
class TpwlModel {
 public:
  TpwlModel(std::vector<LocalAffineModel> locals, Vector distance_scale,
            double weight_sharpness = 25.0);

  /// Enables reduced mode: z_i = project(x_i).
  void attach_basis(const PodBasis& basis);

  const std::vector<LocalAffineModel>& locals() const { return locals_; }
  const Vector& distance_scale() const { return scale_; }
  double weight_sharpness() const { return sharpness_; }
  const std::optional<PodBasis>& basis() const { return basis_; }
  const std::vector<Vector>& reduced_points() const { return z_points_; }
  int n() const { return static_cast<int>(locals_.front().x.size()); }
  int r() const { return static_cast<int>(locals_.front().u.size()); }
  int l() const { return static_cast<int>(locals_.front().g.size()); }
  int state_dim(TpwlMode mode) const;

  /// Normalized blending weights (partition of unity).
  Vector weights(const Vector& state, TpwlMode mode) const;

  void derivative(const Vector& state, const Vector& u, TpwlMode mode, Vector& dstate) const;
  void output(const Vector& state, const Vector& u, TpwlMode mode, Vector& y) const;

  /// Full-order blend with externally supplied weights.
  void evaluate_with_weights(const Vector& x, const Vector& u, const Vector& w, Vector& dx,
                             Vector& y) const;

  /// Continuous-time model in the chosen coordinates (shares this model).
  PlantModel as_plant(TpwlMode mode) const;

 private:
  void require_reduced(TpwlMode mode) const;
  void fill_weights(const Vector& dist, Vector& w) const;

  std::vector<LocalAffineModel> locals_;
  Vector scale_;
  double sharpness_;
  std::optional<PodBasis> basis_;
  std::vector<Vector> z_points_;
  Matrix lift_;
  // Projected local models: zdot = sum w_i (ar z + br (u - u_i) + fr), y = sum w_i (cr z + d (u - u_i) + gr)
  std::vector<Matrix> ar_, br_, cr_;
  std::vector<Vector> fr_, gr_;
};

struct TpwlEvaluation {
  Vector derivative;
  Vector output;
};

TpwlEvaluation evaluate(const TpwlModel& model, const Vector& state, const Vector& u,
                        TpwlMode mode = TpwlMode::Full);

/// Open-loop simulation. Reduced mode integrates z; outputs come from the
/// projected output map.
Trajectory simulate_tpwl(const TpwlModel& model, const Vector& state0, const Matrix& u_seq,
                         double dt, TpwlMode mode = TpwlMode::Full, int substeps = 10);

/// select_points + linearize on a representative trajectory.
TpwlModel build_tpwl(const PlantModel& plant, const Trajectory& trajectory, int s,
                     double weight_sharpness = 25.0, PointSelection* selection = nullptr);

}  // namespace approxmpc
