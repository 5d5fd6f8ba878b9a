#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "approxmpc/control.hpp"
#include "approxmpc/csv.hpp"
#include "approxmpc/excitation.hpp"
#include "approxmpc/nn_model.hpp"
#include "approxmpc/subspace_id.hpp"
#include "approxmpc/tpwl.hpp"

namespace approxmpc {

// ---------------------------------------------------------------------------
// Metric

/// (1 / y_s) sqrt(sum (p_i - r_i)^2 / n) per channel (row), averaged over channels.
double nrmse(const Matrix& predicted, const Matrix& reference, const Vector& normalizer);
double nrmse(const Vector& predicted, const Vector& reference, double normalizer);

// ---------------------------------------------------------------------------
// Configuration

struct PlantConfig {
  std::string type = "two_cstr";  ///< "two_cstr" or "linear"
  TwoCstrParams cstr;
  Matrix a, b, c, d;  ///< linear plant
  Vector x0, u0;
  int substeps = 10;
};

struct ExcitationConfig {
  std::string type = "multilevel";  ///< "multilevel" or "prbs_plus_steps"
  int samples = 5000;
  MultiLevelSpec multilevel;
  PrbsPlusStepsSpec prbs;
  double train_fraction = 0.8;
};

struct ModelSpec {
  std::string name;
  std::string type;  ///< tpwl, pod_tpwl, subspace, nn
  // tpwl / pod_tpwl
  int points = 1;
  double weight_sharpness = 25.0;
  std::optional<int> pod_order;
  std::optional<double> pod_energy;
  bool pod_standardize = true;
  // subspace
  IdentifyOptions identify;
  int history_samples = 0;  ///< LTI state window; 0 means 2 * max(block rows, order)
  // nn
  int n_past = 10;
  int n_future = 16;
  Architecture architecture;
  TrainOptions training;
};

struct ControlConfig {
  int horizon = 15;
  Vector u_lower, u_upper, y_min;
  Vector q, r, p_f;
  EconomicCost economic;
  BoxSolverSettings solver;
  double penalty_weight = 1e4;
  SteadyStateSettings steady;
  std::vector<ControllerMode> modes{ControllerMode::Tracking, ControllerMode::Economic};
  int closed_loop_samples = 100;
  int history_samples = 20;
};

struct ExperimentConfig {
  std::string source;  ///< file the config came from
  PlantConfig plant;
  double dt = 2.0;
  ExcitationConfig excitation;
  std::vector<ModelSpec> models;
  ControlConfig control;
  std::vector<std::string> plot_channels;
};

/// Parses the JSON config (comments allowed). Errors are ConfigError with
/// the line number or the key path of the offending entry.
ExperimentConfig parse_config(const std::string& text, const std::string& source = "<string>");
ExperimentConfig load_config(const std::string& path);

PlantModel make_plant(const PlantConfig& config);

// ---------------------------------------------------------------------------
// Pipeline pieces

Dataset generate_dataset(const ExperimentConfig& config, const PlantModel& plant);

struct FittedModel {
  ModelSpec spec;
  std::shared_ptr<const TpwlModel> tpwl;
  std::optional<LinearStateSpaceModel> lti;
  std::optional<NNPredictor> nn;
  std::string status = "ok";  ///< ok or failed
  std::string message;
  double fit_seconds = 0.0;

  bool ok() const { return status == "ok"; }
  /// State dimension as text ("-" for input/output models).
  std::string dimension() const;
};

/// Fits one model spec on the training part. Numerical failures are caught
/// and reported in the returned status.
FittedModel fit_model(const ModelSpec& spec, const PlantModel& plant, const Dataset& train,
                      const Dataset& validation);

/// File name under <out>/models.
std::string model_file_name(const ModelSpec& spec);
void save_fitted(const std::string& path, const FittedModel& model);
FittedModel load_fitted(const std::string& path, const ModelSpec& spec);

std::shared_ptr<PredictionModel> make_prediction(const FittedModel& model,
                                                 const ExperimentConfig& config);

/// Open-loop validation over the validation record: l x count predictions
/// with their matching reference columns.
struct OpenLoopResult {
  Matrix predicted;
  Matrix reference;
  Vector t;
};
OpenLoopResult open_loop_validate(const PlantModel& plant, const FittedModel* model,
                                  const Dataset& validation, int substeps);

ControlProblem make_problem(const ExperimentConfig& config, ControllerMode mode,
                            const SteadyStateResult& target,
                            std::shared_ptr<PredictionModel> model);

// ---------------------------------------------------------------------------
// Report

struct OpenLoopRow {
  std::string model, type, dimension;
  double nrmse = 0.0;
  std::string status = "ok", message, trajectory_file;
};

struct ClosedLoopRow {
  std::string model, type, mode, dimension;
  int steps = 0;
  double mean_solve_seconds = 0.0, max_solve_seconds = 0.0;
  double objective = 0.0;       ///< accumulated configured stage cost
  double economic_cost = 0.0;   ///< accumulated l_e
  int nonconverged = 0;
  std::string status = "ok", message, trajectory_file;
};

struct ExperimentReport {
  SteadyStateResult target;
  std::vector<OpenLoopRow> open_loop;
  std::vector<ClosedLoopRow> closed_loop;
  std::vector<std::string> files;  ///< every file written, relative to the output directory
};

struct ExperimentOptions {
  bool closed_loop = true;
  /// Reuse <out>/models/*.json when present instead of refitting.
  bool reuse_models = false;
  /// Restrict closed-loop runs to these modes (all configured when empty).
  std::vector<ControllerMode> modes;
  bool write_report = true;
};

/// excite -> fit -> open-loop validate -> closed loop (MPC, EMPC) -> report.
ExperimentReport run_experiment(const ExperimentConfig& config, const std::string& out_dir,
                                const ExperimentOptions& options = {});

/// report.csv-style tables. Timing columns are named *_time_s.
void write_report(const std::string& out_dir, const ExperimentReport& report);
std::string format_report_text(const ExperimentReport& report);

// ---------------------------------------------------------------------------
// Plot data

struct PlotSource {
  std::string label;
  CsvTable table;  ///< needs a "t" column
};

/// Long-format rows `series,t,value` with series = "<label>:<channel>".
/// Throws InvalidArgument for an empty selection or unknown channel, listing
/// the available ones. Returns the number of data rows written.
std::size_t emit_plot_data(const std::vector<PlotSource>& sources,
                           const std::vector<std::string>& channels, const std::string& path);

std::string to_string(ControllerMode mode);
ControllerMode controller_mode_from_string(const std::string& s);

}  // namespace approxmpc
