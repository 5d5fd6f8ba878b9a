#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "approxmpc/plant.hpp"

namespace approxmpc {

/// Multi-level random signal: each channel holds a level drawn uniformly from
/// `levels_per_channel` equally spaced values in [u_lower, u_upper] for a
/// duration drawn uniformly from [hold_min, hold_max] samples.
struct MultiLevelSpec {
  int levels_per_channel = 5;
  int hold_min = 10;
  int hold_max = 16;
  Vector u_lower;
  Vector u_upper;
  std::uint64_t seed = 1;

  void validate() const;
  std::vector<double> level_set(int channel) const;
};

/// Two-level PRBS plus a second independent PRBS of small steps
/// {0, extra_fraction * |high - low|}, clipped to the input box.
struct PrbsPlusStepsSpec {
  Vector base_low;   ///< first base level per channel
  Vector base_high;  ///< second base level per channel
  double extra_fraction = 0.1;
  int hold_min = 10;
  int hold_max = 16;
  Vector u_lower;
  Vector u_upper;
  std::uint64_t seed = 1;

  void validate() const;
};

/// r x steps input sequence.
Matrix multilevel_signal(const MultiLevelSpec& spec, int steps);
Matrix prbs_plus_steps(const PrbsPlusStepsSpec& spec, int steps);

/// Input/output/state record from an open-loop simulation. The state columns
/// form the POD snapshot matrix X = [x(t_1) ... x(t_N)].
struct Dataset {
  Trajectory trajectory;
  std::vector<std::string> warnings;

  Eigen::Index size() const { return trajectory.size(); }
  const Matrix& snapshots() const { return trajectory.x; }
  const Matrix& inputs() const { return trajectory.u; }
  const Matrix& outputs() const { return trajectory.y; }

  /// First floor(fraction * N) samples for training, the rest for validation.
  std::pair<Dataset, Dataset> split(double train_fraction) const;
  /// Samples [begin, begin + count).
  Dataset slice(Eigen::Index begin, Eigen::Index count) const;
};

/// Simulates the plant from `x_init` (defaults to the nominal state).
Dataset collect_dataset(const PlantModel& model, const Matrix& u_seq, double dt, int substeps = 10,
                        const Vector* x_init = nullptr);

/// CSV with header `t,u_1..u_r,y_1..y_l[,x_1..x_n]`, 17 significant digits.
void write_dataset_csv(const std::string& path, const Dataset& data, bool include_states = true);
Dataset read_dataset_csv(const std::string& path);

}  // namespace approxmpc
