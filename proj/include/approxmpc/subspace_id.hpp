#pragma once

#include <optional>
#include <string>
#include <vector>

#include "approxmpc/excitation.hpp"

namespace approxmpc {

/// Past/future block-Hankel matrices. Block row b, column c of U_p holds
/// u(b + c); U_f starts at sample i.
struct HankelSet {
  Matrix up, uf, yp, yf;
  int i = 0;
  Eigen::Index j = 0;

  Matrix zp() const;  ///< [U_p; Y_p]
};

/// `j` defaults to N - 2i + 1.
HankelSet build_hankel(const Matrix& u, const Matrix& y, int i, std::optional<Eigen::Index> j = {});
HankelSet build_hankel(const Dataset& data, int i, std::optional<Eigen::Index> j = {});

/// O_i = Y_f /_{U_f} Z_p, with SVD pseudo-inverses (relative cutoff 1e-10).
Matrix oblique_project(const HankelSet& h);

/// Discrete LTI model z+ = A z + B (u - u_mean), y = C z + D (u - u_mean) + y_mean.
struct LinearStateSpaceModel {
  Matrix a, b, c, d;
  double dt = 1.0;
  Vector u_mean, y_mean;        ///< zeros when data were not centered
  Vector singular_values;       ///< of O_i
  double spectral_radius = 0.0;
  bool stable = false;
  double observability_condition = 0.0;  ///< cond of Gamma_i without its last block row
  int block_rows = 0;
  std::vector<std::string> warnings;

  int order() const { return static_cast<int>(a.rows()); }
  int inputs() const { return static_cast<int>(b.cols()); }
  int outputs() const { return static_cast<int>(c.rows()); }

  /// [D, CB, CAB, ..., CA^{count-2}B] stacked horizontally (l x r*count).
  Matrix markov_parameters(int count) const;
};

struct IdentifyOptions {
  int block_rows = 10;
  std::optional<int> order;         ///< explicit s
  double singular_value_cutoff = 1e-6;  ///< relative, used when order is unset
  bool remove_means = true;
  /// Flip the sign of selected left singular vectors (test hook for basis
  /// independence); bit q flips column q.
  std::uint64_t sign_flip_mask = 0;
};

LinearStateSpaceModel identify(const Matrix& u, const Matrix& y, double dt,
                               const IdentifyOptions& options = {});
LinearStateSpaceModel identify(const Dataset& data, const IdentifyOptions& options = {});

/// Output sequence (l x N) from initial state z0 (zero when empty).
Matrix simulate_lti(const LinearStateSpaceModel& model, const Vector& z0, const Matrix& u_seq);

/// State sequence z_0..z_N (s x N+1).
Matrix simulate_lti_states(const LinearStateSpaceModel& model, const Vector& z0, const Matrix& u_seq);

/// Least-squares initial state from the first `window` samples of (u, y).
Vector estimate_initial_state(const LinearStateSpaceModel& model, const Matrix& u, const Matrix& y,
                              std::optional<int> window = {});

/// State at the sample right after the last column of (u, y).
Vector estimate_current_state(const LinearStateSpaceModel& model, const Matrix& u, const Matrix& y);

}  // namespace approxmpc
