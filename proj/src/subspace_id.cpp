#include "approxmpc/subspace_id.hpp"

#include <cmath>
#include <limits>

#include "approxmpc/errors.hpp"

namespace approxmpc {

namespace {

constexpr double kPinvCutoff = 1e-10;

Matrix block_hankel(const Matrix& w, int first, int rows, Eigen::Index cols) {
  const auto m = w.rows();
  Matrix h(m * rows, cols);
  for (int b = 0; b < rows; ++b) {
    h.middleRows(b * m, m) = w.middleCols(first + b, cols);
  }
  return h;
}

// Orthonormal basis (columns, j x rank) of the row space of m.
Matrix row_space_basis(const Matrix& m) {
  Eigen::BDCSVD<Matrix> svd(m.transpose(), Eigen::ComputeThinU);
  const Vector& s = svd.singularValues();
  Eigen::Index rank = 0;
  if (s.size() > 0 && s(0) > 0.0) {
    while (rank < s.size() && s(rank) > kPinvCutoff * s(0)) ++rank;
  }
  return svd.matrixU().leftCols(rank);
}

}  // namespace

Matrix HankelSet::zp() const {
  Matrix z(up.rows() + yp.rows(), j);
  z << up, yp;
  return z;
}

HankelSet build_hankel(const Matrix& u, const Matrix& y, int i, std::optional<Eigen::Index> j) {
  if (i < 1) throw InvalidArgument("build_hankel: block rows must be >= 1");
  if (u.cols() != y.cols()) throw DimensionMismatch("build_hankel: u and y lengths differ");
  const auto n = u.cols();
  const Eigen::Index cols = j ? *j : n - 2 * i + 1;
  if (cols < 1 || n < 2 * i + cols - 1) {
    throw DatasetTooShort("build_hankel: need at least 2i + j - 1 = " +
                          std::to_string(2 * i + std::max<Eigen::Index>(cols, 1) - 1) +
                          " samples, have " + std::to_string(n));
  }
  HankelSet h;
  h.i = i;
  h.j = cols;
  h.up = block_hankel(u, 0, i, cols);
  h.uf = block_hankel(u, i, i, cols);
  h.yp = block_hankel(y, 0, i, cols);
  h.yf = block_hankel(y, i, i, cols);
  return h;
}

HankelSet build_hankel(const Dataset& data, int i, std::optional<Eigen::Index> j) {
  return build_hankel(data.inputs(), data.outputs(), i, j);
}

Matrix oblique_project(const HankelSet& h) {
  // M Pi_perp = M - (M Q) Q^T with Q an orthonormal basis of row(U_f); this
  // equals M (I - U_f^T (U_f U_f^T)^+ U_f).
  const Matrix q = row_space_basis(h.uf);
  const Matrix zp = h.zp();
  const Matrix yf_perp = h.yf - (h.yf * q) * q.transpose();
  const Matrix zp_perp = zp - (zp * q) * q.transpose();
  if (zp_perp.norm() <= kPinvCutoff * zp.norm()) {
    throw PersistenceOfExcitation(
        "oblique projection: past data carry no information outside the future-input row space");
  }
  return (yf_perp * pinv(zp_perp, kPinvCutoff)) * zp;
}

Matrix LinearStateSpaceModel::markov_parameters(int count) const {
  const auto l = c.rows();
  const auto r = b.cols();
  Matrix out(l, r * count);
  if (count < 1) return out;
  out.leftCols(r) = d;
  Matrix cak = c;  // C A^q
  for (int q = 1; q < count; ++q) {
    out.middleCols(q * r, r) = cak * b;
    cak = cak * a;
  }
  return out;
}

LinearStateSpaceModel identify(const Matrix& u_raw, const Matrix& y_raw, double dt,
                               const IdentifyOptions& options) {
  const int i = options.block_rows;
  const auto r = u_raw.rows();
  const auto l = y_raw.rows();
  LinearStateSpaceModel model;
  model.dt = dt;
  model.block_rows = i;
  model.u_mean = options.remove_means ? Vector(u_raw.rowwise().mean()) : Vector::Zero(r);
  model.y_mean = options.remove_means ? Vector(y_raw.rowwise().mean()) : Vector::Zero(l);
  const Matrix u = u_raw.colwise() - model.u_mean;
  const Matrix y = y_raw.colwise() - model.y_mean;

  const HankelSet h = build_hankel(u, y, i);
  const Matrix oi = oblique_project(h);

  Eigen::JacobiSVD<Matrix> svd(oi, Eigen::ComputeFullU);
  model.singular_values = svd.singularValues();
  const Vector& sv = model.singular_values;
  const int rank = numerical_rank(oi, kPinvCutoff);

  int s = 0;
  if (options.order) {
    s = *options.order;
    if (s < 1) throw InvalidArgument("identify: order must be >= 1");
    if (s > rank) throw RankDeficiency(rank, "identify: requested order exceeds rank of O_i");
  } else {
    while (s < sv.size() && sv(s) > options.singular_value_cutoff * sv(0)) ++s;
    if (s == 0) throw RankDeficiency(rank, "identify: no singular value above the cutoff");
  }
  const auto li = l * i;
  if (li <= s) {
    throw InvalidArgument("identify: need block_rows * outputs > order (" + std::to_string(li) +
                          " <= " + std::to_string(s) + ")");
  }

  Matrix u_left = svd.matrixU();
  for (int q = 0; q < 64 && q < u_left.cols(); ++q) {
    if (options.sign_flip_mask & (1ULL << q)) u_left.col(q) *= -1.0;
  }
  const Matrix u1 = u_left.leftCols(s);
  const Matrix gamma = u1 * sv.head(s).cwiseSqrt().asDiagonal();
  const Matrix gamma_perp = u_left.rightCols(li - s).transpose();  // (li - s) x li

  model.c = gamma.topRows(l);
  const Matrix gamma_under = gamma.topRows(li - l);
  const Matrix gamma_over = gamma.bottomRows(li - l);
  model.a = pinv(gamma_under, kPinvCutoff) * gamma_over;

  Eigen::JacobiSVD<Matrix> gsvd(gamma_under);
  const Vector& gs = gsvd.singularValues();
  model.observability_condition =
      gs(gs.size() - 1) > 0.0 ? gs(0) / gs(gs.size() - 1) : std::numeric_limits<double>::infinity();
  if (model.observability_condition > 1e10) {
    model.warnings.push_back("ill-conditioned observability matrix (cond " +
                             std::to_string(model.observability_condition) + ")");
  }

  // B and D from Gamma_perp Y_f U_f^+ = Gamma_perp H_i, written block-wise as
  // [M_1; ...; M_i] = K diag(I_l, Gamma_under) [D; B] with K block-Hankel in L_q.
  const auto rows_perp = li - s;
  const Matrix m = gamma_perp * h.yf * pinv(h.uf, kPinvCutoff);  // rows_perp x (r i)
  Matrix lhs = Matrix::Zero(i * rows_perp, li);
  Matrix rhs(i * rows_perp, r);
  for (int q = 0; q < i; ++q) {
    rhs.middleRows(q * rows_perp, rows_perp) = m.middleCols(q * r, r);
    for (int p = 0; q + p < i; ++p) {
      lhs.block(q * rows_perp, p * l, rows_perp, l) = gamma_perp.middleCols((q + p) * l, l);
    }
  }
  Matrix structure = Matrix::Zero(li, l + s);
  structure.topLeftCorner(l, l).setIdentity();
  structure.bottomRightCorner(li - l, s) = gamma_under;
  const Matrix db = (lhs * structure).colPivHouseholderQr().solve(rhs);
  model.d = db.topRows(l);
  model.b = db.bottomRows(s);

  if (!model.a.allFinite() || !model.b.allFinite() || !model.c.allFinite() || !model.d.allFinite()) {
    throw Error("identify: produced non-finite system matrices");
  }
  model.spectral_radius = approxmpc::spectral_radius(model.a);
  model.stable = model.spectral_radius < 1.0;
  return model;
}

LinearStateSpaceModel identify(const Dataset& data, const IdentifyOptions& options) {
  return identify(data.inputs(), data.outputs(), data.trajectory.dt, options);
}

Matrix simulate_lti_states(const LinearStateSpaceModel& model, const Vector& z0, const Matrix& u_seq) {
  const auto s = model.order();
  if (u_seq.rows() != model.inputs()) throw DimensionMismatch("simulate_lti: input has wrong rows");
  Matrix zs(s, u_seq.cols() + 1);
  zs.col(0) = z0.size() == 0 ? Vector::Zero(s) : z0;
  if (zs.col(0).size() != s) throw DimensionMismatch("simulate_lti: z0 has wrong dimension");
  for (Eigen::Index k = 0; k < u_seq.cols(); ++k) {
    zs.col(k + 1) = model.a * zs.col(k) + model.b * (u_seq.col(k) - model.u_mean);
  }
  return zs;
}

Matrix simulate_lti(const LinearStateSpaceModel& model, const Vector& z0, const Matrix& u_seq) {
  if (z0.size() != 0 && z0.size() != model.order()) {
    throw DimensionMismatch("simulate_lti: z0 has wrong dimension");
  }
  const Matrix zs = simulate_lti_states(model, z0, u_seq);
  Matrix y(model.outputs(), u_seq.cols());
  for (Eigen::Index k = 0; k < u_seq.cols(); ++k) {
    y.col(k) = model.c * zs.col(k) + model.d * (u_seq.col(k) - model.u_mean) + model.y_mean;
  }
  return y;
}

Vector estimate_initial_state(const LinearStateSpaceModel& model, const Matrix& u, const Matrix& y,
                              std::optional<int> window) {
  const auto s = model.order();
  const auto l = model.outputs();
  const int default_window = 2 * std::max(model.block_rows, static_cast<int>(s));
  const Eigen::Index w = std::min<Eigen::Index>(window ? *window : default_window, u.cols());
  if (w < 1 || y.cols() < w) throw DatasetTooShort("estimate_initial_state: window is empty");
  const Matrix free = simulate_lti(model, Vector(), u.leftCols(w));
  Matrix obs(w * l, s);
  Vector resid(w * l);
  Matrix cak = model.c;
  for (Eigen::Index k = 0; k < w; ++k) {
    obs.middleRows(k * l, l) = cak;
    resid.segment(k * l, l) = y.col(k) - free.col(k);
    cak = cak * model.a;
  }
  return obs.colPivHouseholderQr().solve(resid);
}

Vector estimate_current_state(const LinearStateSpaceModel& model, const Matrix& u, const Matrix& y) {
  const Vector z0 = estimate_initial_state(model, u, y, static_cast<int>(u.cols()));
  Vector z = z0;
  for (Eigen::Index k = 0; k < u.cols(); ++k) {
    z = model.a * z + model.b * (u.col(k) - model.u_mean);
  }
  return z;
}

}  // namespace approxmpc
