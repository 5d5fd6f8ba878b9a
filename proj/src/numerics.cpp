#include "approxmpc/numerics.hpp"

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>

namespace approxmpc {

Matrix pinv(const Matrix& m, double relative_cutoff) {
  if (m.size() == 0) return Matrix::Zero(m.cols(), m.rows());
  Eigen::BDCSVD<Matrix> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const Vector& s = svd.singularValues();
  const double cut = relative_cutoff * (s.size() > 0 ? s(0) : 0.0);
  Vector inv = Vector::Zero(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > cut && s(i) > 0.0) inv(i) = 1.0 / s(i);
  }
  return svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
}

int numerical_rank(const Matrix& m, double relative_cutoff) {
  if (m.size() == 0) return 0;
  Eigen::BDCSVD<Matrix> svd(m);
  const Vector& s = svd.singularValues();
  if (s.size() == 0 || s(0) == 0.0) return 0;
  int rank = 0;
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    if (s(i) > relative_cutoff * s(0)) ++rank;
  }
  return rank;
}

Matrix central_difference_jacobian(const std::function<void(const Vector&, Vector&)>& fun,
                                   const Vector& v, Eigen::Index out_dim, double rel_step) {
  Matrix jac(out_dim, v.size());
  Vector probe = v;
  Vector plus(out_dim), minus(out_dim);
  for (Eigen::Index j = 0; j < v.size(); ++j) {
    const double h = rel_step * std::max(1.0, std::abs(v(j)));
    probe(j) = v(j) + h;
    fun(probe, plus);
    probe(j) = v(j) - h;
    fun(probe, minus);
    probe(j) = v(j);
    jac.col(j) = (plus - minus) / (2.0 * h);
  }
  return jac;
}

double spectral_radius(const Matrix& a) {
  if (a.size() == 0) return 0.0;
  Eigen::EigenSolver<Matrix> es(a, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace approxmpc
