#include "approxmpc/pod.hpp"

#include <cmath>
#include <limits>

#include "approxmpc/errors.hpp"

namespace approxmpc {

double captured_energy(const Vector& singular_values, int k) {
  const double total = singular_values.squaredNorm();
  if (total == 0.0) return 0.0;
  return singular_values.head(k).squaredNorm() / total;
}

PodBasis compute_basis(const Matrix& snapshots, const PodOptions& options) {
  const auto n = snapshots.rows();
  const auto cols = snapshots.cols();
  if (n == 0 || cols < n) {
    throw InvalidArgument("compute_basis: need a non-empty n x N snapshot matrix with N >= n");
  }
  if (!snapshots.allFinite()) throw InvalidArgument("compute_basis: snapshots are not finite");

  PodBasis out;
  const bool center = options.center || options.standardize;
  out.center = center ? Vector(snapshots.rowwise().mean()) : Vector::Zero(n);
  out.scale = Vector::Ones(n);
  Matrix centered = snapshots.colwise() - out.center;
  if (options.standardize) {
    for (Eigen::Index i = 0; i < n; ++i) {
      const double sd = std::sqrt(centered.row(i).squaredNorm() / static_cast<double>(cols));
      if (sd > 0.0) out.scale(i) = sd;
    }
    centered = out.scale.cwiseInverse().asDiagonal() * centered;
  }

  Eigen::BDCSVD<Matrix> svd(centered, Eigen::ComputeThinU);
  out.singular_values = svd.singularValues();
  const Vector& s = out.singular_values;

  const double tol = s(0) * static_cast<double>(std::max(n, cols)) *
                     std::numeric_limits<double>::epsilon();
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > tol) ++rank;
  }
  if (rank == 0) throw RankDeficiency(0, "compute_basis: snapshot matrix is zero");

  int k = static_cast<int>(n);
  if (options.order) {
    k = *options.order;
    if (k < 1 || k > n) throw InvalidArgument("compute_basis: order must lie in [1, n]");
    if (k > rank) throw RankDeficiency(rank, "compute_basis: requested order exceeds rank");
  } else if (options.energy_threshold) {
    const double theta = *options.energy_threshold;
    if (!(theta > 0.0 && theta <= 1.0)) throw InvalidArgument("energy threshold must lie in (0, 1]");
    k = 1;
    // Relative slack absorbs rounding in the partial sums (theta = 1 on a rank-deficient X).
    while (k < rank && captured_energy(s, k) < theta * (1.0 - 1e-14)) ++k;
  }

  out.k = k;
  out.energy_captured = captured_energy(s, k);
  out.basis = svd.matrixU().leftCols(k);
  // Canonical sign: first non-negligible entry of every column is non-negative.
  for (int c = 0; c < k; ++c) {
    auto col = out.basis.col(c);
    const double scale = col.cwiseAbs().maxCoeff();
    for (Eigen::Index i = 0; i < n; ++i) {
      if (std::abs(col(i)) > 1e-12 * scale) {
        if (col(i) < 0.0) col = -col;
        break;
      }
    }
  }
  return out;
}

Matrix PodBasis::lift_matrix() const { return scale.asDiagonal() * basis; }

Matrix PodBasis::project_matrix() const {
  return basis.transpose() * scale.cwiseInverse().asDiagonal();
}

Vector PodBasis::project(const Vector& x) const {
  if (x.size() != basis.rows()) throw DimensionMismatch("project: state has wrong dimension");
  return basis.transpose() * (x - center).cwiseQuotient(scale);
}

Vector PodBasis::lift(const Vector& z) const {
  if (z.size() != basis.cols()) throw DimensionMismatch("lift: reduced state has wrong dimension");
  return scale.cwiseProduct(basis * z) + center;
}

Matrix PodBasis::project_columns(const Matrix& xs) const {
  if (xs.rows() != basis.rows()) throw DimensionMismatch("project: states have wrong dimension");
  return project_matrix() * (xs.colwise() - center);
}

Matrix PodBasis::lift_columns(const Matrix& zs) const {
  if (zs.rows() != basis.cols()) throw DimensionMismatch("lift: reduced states have wrong dimension");
  return (lift_matrix() * zs).colwise() + center;
}

}  // namespace approxmpc
