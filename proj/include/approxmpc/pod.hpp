#pragma once

#include <optional>

#include "approxmpc/numerics.hpp"

namespace approxmpc {

struct PodOptions {
  /// Explicit order k; takes precedence over the energy threshold.
  std::optional<int> order;
  /// Smallest k with captured energy >= threshold.
  std::optional<double> energy_threshold;
  /// Subtract the snapshot mean before the SVD.
  bool center = false;
  /// Divide every state by its snapshot standard deviation before the SVD
  /// (implies centering). Needed when states differ by orders of magnitude.
  bool standardize = false;
};

/// Truncated left singular basis of a snapshot matrix.
struct PodBasis {
  Matrix basis;             ///< U_k, n x k, orthonormal columns
  Vector singular_values;   ///< all of them, descending
  int k = 0;
  double energy_captured = 0.0;
  Vector center;            ///< snapshot mean, or zeros when not centered
  Vector scale;             ///< per-state divisor, ones unless standardized

  Eigen::Index full_dim() const { return basis.rows(); }

  /// S U_k (n x k): maps reduced coordinates to state deviations.
  Matrix lift_matrix() const;
  /// U_k^T S^{-1} (k x n).
  Matrix project_matrix() const;

  /// z = U_k^T S^{-1} (x - center)
  Vector project(const Vector& x) const;
  /// x = S U_k z + center
  Vector lift(const Vector& z) const;
  Matrix project_columns(const Matrix& xs) const;
  Matrix lift_columns(const Matrix& zs) const;
};

PodBasis compute_basis(const Matrix& snapshots, const PodOptions& options);

/// Energy captured by the first k singular values.
double captured_energy(const Vector& singular_values, int k);

}  // namespace approxmpc
