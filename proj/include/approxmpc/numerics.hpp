#pragma once

#include <Eigen/Dense>
#include <functional>

namespace approxmpc {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Moore-Penrose pseudo-inverse; singular values below
/// `relative_cutoff * sigma_max` are treated as zero.
Matrix pinv(const Matrix& m, double relative_cutoff = 1e-10);

/// Number of singular values above `relative_cutoff * sigma_max`.
int numerical_rank(const Matrix& m, double relative_cutoff = 1e-10);

/// Central-difference Jacobian of `fun` at `v` with per-component step
/// h_j = rel_step * max(1, |v_j|).
Matrix central_difference_jacobian(const std::function<void(const Vector&, Vector&)>& fun,
                                   const Vector& v, Eigen::Index out_dim, double rel_step = 1e-6);

/// Largest |eigenvalue|.
double spectral_radius(const Matrix& a);

}  // namespace approxmpc
