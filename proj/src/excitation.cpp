#include "approxmpc/excitation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "approxmpc/csv.hpp"
#include "approxmpc/errors.hpp"
#include "approxmpc/rng.hpp"

namespace approxmpc {

namespace {

void check_box(const Vector& lo, const Vector& hi) {
  if (lo.size() == 0 || lo.size() != hi.size()) {
    throw InvalidArgument("excitation bounds must be non-empty and of equal length");
  }
  if (!(lo.array() < hi.array()).all()) throw InvalidArgument("excitation requires u_lower < u_upper");
}

void check_hold(int a, int b) {
  if (a < 1 || a > b) throw InvalidArgument("excitation requires 1 <= hold_min <= hold_max");
}

// One channel of a random-level, random-hold signal.
void fill_channel(const std::vector<double>& levels, int hold_min, int hold_max, SplitMix64 rng,
                  Eigen::Ref<Eigen::RowVectorXd, 0, Eigen::InnerStride<>> out) {
  Eigen::Index k = 0;
  const auto steps = out.size();
  const auto top = static_cast<std::int64_t>(levels.size()) - 1;
  while (k < steps) {
    const double value = levels[static_cast<std::size_t>(rng.uniform_int(0, top))];
    const auto hold = rng.uniform_int(hold_min, hold_max);
    for (std::int64_t h = 0; h < hold && k < steps; ++h, ++k) out(k) = value;
  }
}

}  // namespace

void MultiLevelSpec::validate() const {
  if (levels_per_channel < 2) throw InvalidArgument("multilevel signal needs at least 2 levels");
  check_hold(hold_min, hold_max);
  check_box(u_lower, u_upper);
}

std::vector<double> MultiLevelSpec::level_set(int channel) const {
  const double lo = u_lower(channel);
  const double hi = u_upper(channel);
  std::vector<double> levels(static_cast<std::size_t>(levels_per_channel));
  const double delta = hi - lo;
  for (int m = 0; m < levels_per_channel; ++m) {
    levels[static_cast<std::size_t>(m)] = lo + delta * m / (levels_per_channel - 1);
  }
  levels.back() = hi;
  return levels;
}

void PrbsPlusStepsSpec::validate() const {
  if (!(extra_fraction >= 0.0 && extra_fraction < 1.0)) {
    throw InvalidArgument("extra_fraction must lie in [0, 1)");
  }
  check_hold(hold_min, hold_max);
  check_box(u_lower, u_upper);
  if (base_low.size() != u_lower.size() || base_high.size() != u_lower.size()) {
    throw InvalidArgument("base magnitudes must have one pair per channel");
  }
}

Matrix multilevel_signal(const MultiLevelSpec& spec, int steps) {
  spec.validate();
  if (steps < 1) throw InvalidArgument("steps must be >= 1");
  const auto r = spec.u_lower.size();
  Matrix u(r, steps);
  SplitMix64 root(spec.seed);
  for (Eigen::Index c = 0; c < r; ++c) {
    fill_channel(spec.level_set(static_cast<int>(c)), spec.hold_min, spec.hold_max,
                 root.split(static_cast<std::uint64_t>(c)), u.row(c));
  }
  return u;
}

Matrix prbs_plus_steps(const PrbsPlusStepsSpec& spec, int steps) {
  spec.validate();
  if (steps < 1) throw InvalidArgument("steps must be >= 1");
  const auto r = spec.u_lower.size();
  Matrix u(r, steps);
  Eigen::RowVectorXd extra(steps);
  SplitMix64 root(spec.seed);
  for (Eigen::Index c = 0; c < r; ++c) {
    const auto cu = static_cast<std::uint64_t>(c);
    fill_channel({spec.base_low(c), spec.base_high(c)}, spec.hold_min, spec.hold_max,
                 root.split(2 * cu), u.row(c));
    const double step = spec.extra_fraction * std::abs(spec.base_high(c) - spec.base_low(c));
    fill_channel({0.0, step}, spec.hold_min, spec.hold_max, root.split(2 * cu + 1), extra);
    u.row(c) = (u.row(c) + extra).cwiseMax(spec.u_lower(c)).cwiseMin(spec.u_upper(c));
  }
  return u;
}

Dataset Dataset::slice(Eigen::Index begin, Eigen::Index count) const {
  const auto& tr = trajectory;
  if (begin < 0 || count < 0 || begin + count > tr.size()) {
    throw InvalidArgument("dataset slice out of range");
  }
  Dataset out;
  out.trajectory.dt = tr.dt;
  out.trajectory.t = tr.t.segment(begin, count);
  out.trajectory.u = tr.u.middleCols(begin, count);
  out.trajectory.y = tr.y.middleCols(begin, count);
  if (tr.x.size() > 0) {
    out.trajectory.x = tr.x.middleCols(begin, count);
    out.trajectory.final_state =
        begin + count < tr.size() ? Vector(tr.x.col(begin + count)) : tr.final_state;
  }
  return out;
}

std::pair<Dataset, Dataset> Dataset::split(double train_fraction) const {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw InvalidArgument("train fraction must lie in (0, 1)");
  }
  const auto n_train = static_cast<Eigen::Index>(std::floor(train_fraction * size()));
  return {slice(0, n_train), slice(n_train, size() - n_train)};
}

Dataset collect_dataset(const PlantModel& model, const Matrix& u_seq, double dt, int substeps,
                        const Vector* x_init) {
  if (u_seq.cols() == 0) throw InvalidArgument("collect_dataset: empty input sequence");
  Dataset data;
  data.trajectory = integrate(model, x_init ? *x_init : model.x0, u_seq, dt, substeps);
  if (data.size() < 10 * model.n) {
    data.warnings.push_back("snapshot count " + std::to_string(data.size()) +
                            " is below 10 x state dimension");
  }
  return data;
}

void write_dataset_csv(const std::string& path, const Dataset& data, bool include_states) {
  const auto& tr = data.trajectory;
  const bool states = include_states && tr.x.size() > 0;
  std::vector<std::string> header{"t"};
  for (Eigen::Index i = 0; i < tr.u.rows(); ++i) header.push_back("u_" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < tr.y.rows(); ++i) header.push_back("y_" + std::to_string(i + 1));
  if (states) {
    for (Eigen::Index i = 0; i < tr.x.rows(); ++i) header.push_back("x_" + std::to_string(i + 1));
  }
  CsvWriter csv(path, header);
  std::vector<double> row;
  for (Eigen::Index k = 0; k < tr.size(); ++k) {
    row.clear();
    row.push_back(tr.t(k));
    for (Eigen::Index i = 0; i < tr.u.rows(); ++i) row.push_back(tr.u(i, k));
    for (Eigen::Index i = 0; i < tr.y.rows(); ++i) row.push_back(tr.y(i, k));
    if (states) {
      for (Eigen::Index i = 0; i < tr.x.rows(); ++i) row.push_back(tr.x(i, k));
    }
    csv.write_row(row);
  }
}

Dataset read_dataset_csv(const std::string& path) {
  const CsvTable table = read_csv(path);
  Eigen::Index r = 0, l = 0, n = 0;
  if (table.header.empty() || table.header[0] != "t") {
    throw InvalidArgument(path + ": dataset CSV must start with column t");
  }
  for (std::size_t c = 1; c < table.header.size(); ++c) {
    const std::string& h = table.header[c];
    const std::string expect_u = "u_" + std::to_string(r + 1);
    const std::string expect_y = "y_" + std::to_string(l + 1);
    const std::string expect_x = "x_" + std::to_string(n + 1);
    if (l == 0 && n == 0 && h == expect_u) {
      ++r;
    } else if (n == 0 && h == expect_y) {
      ++l;
    } else if (h == expect_x) {
      ++n;
    } else {
      throw InvalidArgument(path + ": unexpected dataset column '" + h + "'");
    }
  }
  const auto rows = static_cast<Eigen::Index>(table.rows.size());
  Dataset data;
  auto& tr = data.trajectory;
  tr.t.resize(rows);
  tr.u.resize(r, rows);
  tr.y.resize(l, rows);
  if (n > 0) tr.x.resize(n, rows);
  for (Eigen::Index k = 0; k < rows; ++k) {
    const auto& row = table.rows[static_cast<std::size_t>(k)];
    tr.t(k) = row[0];
    for (Eigen::Index i = 0; i < r; ++i) tr.u(i, k) = row[static_cast<std::size_t>(1 + i)];
    for (Eigen::Index i = 0; i < l; ++i) tr.y(i, k) = row[static_cast<std::size_t>(1 + r + i)];
    for (Eigen::Index i = 0; i < n; ++i) tr.x(i, k) = row[static_cast<std::size_t>(1 + r + l + i)];
  }
  tr.dt = rows > 1 ? tr.t(1) - tr.t(0) : 1.0;
  if (n > 0 && rows > 0) tr.final_state = tr.x.col(rows - 1);
  return data;
}

}  // namespace approxmpc
