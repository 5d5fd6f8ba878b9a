#pragma once

#include <Eigen/Dense>
#include <filesystem>
#include <string>

#include "approxmpc/plant.hpp"
#include "approxmpc/rng.hpp"
#include "approxmpc/subspace_id.hpp"

namespace approxmpc::testutil {

inline Matrix random_matrix(SplitMix64& rng, Eigen::Index rows, Eigen::Index cols) {
  return Matrix::NullaryExpr(rows, cols, [&] { return rng.normal(); });
}

inline Matrix random_orthogonal(SplitMix64& rng, Eigen::Index n) {
  Eigen::HouseholderQR<Matrix> qr(random_matrix(rng, n, n));
  return qr.householderQ() * Matrix::Identity(n, n);
}

/// Stable discrete system with eigenvalues of modulus in [0.2, 0.9] in a random basis.
inline LinearStateSpaceModel random_stable_lti(SplitMix64& rng, int s, int r, int l) {
  Matrix lam = Matrix::Zero(s, s);
  for (int i = 0; i < s;) {
    if (i + 1 < s && rng.uniform() < 0.5) {
      const double rho = rng.uniform(0.2, 0.9), th = rng.uniform(0.1, 2.5);
      lam(i, i) = rho * std::cos(th);
      lam(i, i + 1) = rho * std::sin(th);
      lam(i + 1, i) = -rho * std::sin(th);
      lam(i + 1, i + 1) = rho * std::cos(th);
      i += 2;
    } else {
      lam(i, i) = rng.uniform(0.2, 0.9) * (rng.uniform() < 0.5 ? -1.0 : 1.0);
      ++i;
    }
  }
  const Matrix q = random_orthogonal(rng, s);
  LinearStateSpaceModel m;
  m.a = q * lam * q.transpose();
  m.b = random_matrix(rng, s, r);
  m.c = random_matrix(rng, l, s);
  m.d = random_matrix(rng, l, r);
  m.dt = 1.0;
  m.u_mean = Vector::Zero(r);
  m.y_mean = Vector::Zero(l);
  return m;
}

/// Continuous-time stable linear plant xdot = A x + B u, y = C x + D u.
inline PlantModel random_linear_plant(SplitMix64& rng, int n, int r, int l) {
  const Matrix q = random_orthogonal(rng, n);
  Vector eig(n);
  for (int i = 0; i < n; ++i) eig(i) = -rng.uniform(0.2, 1.5);
  const Matrix a = q * eig.asDiagonal() * q.transpose();
  const Matrix b = random_matrix(rng, n, r);
  const Matrix c = random_matrix(rng, l, n);
  const Matrix d = 0.1 * random_matrix(rng, l, r);
  const Vector u0 = Vector::Zero(r);
  return linear_plant(a, b, c, d, Vector::Zero(n), u0);
}

/// Scratch directory under the system temp dir, emptied on creation.
inline std::string fresh_dir(const std::string& name) {
  const auto p = std::filesystem::temp_directory_path() / ("approxmpc_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p.string();
}

}  // namespace approxmpc::testutil
