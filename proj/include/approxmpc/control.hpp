#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "approxmpc/nn_model.hpp"
#include "approxmpc/plant.hpp"
#include "approxmpc/subspace_id.hpp"
#include "approxmpc/tpwl.hpp"

namespace approxmpc {

// ---------------------------------------------------------------------------
// Box-constrained solver

struct BoxSolverSettings {
  /// Stop when ||x - P(x - grad)||_inf <= tolerance * max(1, |f|).
  double tolerance = 1e-6;
  int max_iterations = 200;
  int memory = 10;
  double armijo = 1e-4;
  int max_backtracks = 40;
};

struct BoxSolverResult {
  Vector x;
  double f = 0.0;
  double projected_gradient = 0.0;
  int iterations = 0;
  int evaluations = 0;
  bool converged = false;
};

/// Objective callback; fills `grad` when it is non-null. May return +inf.
using BoxObjective = std::function<double(const Vector& x, Vector* grad)>;

/// Projected limited-memory BFGS with Armijo backtracking along the
/// projected path. The result never has a larger objective than the start.
BoxSolverResult minimize_box(const BoxObjective& fun, const Vector& x0, const Vector& lower,
                             const Vector& upper, const BoxSolverSettings& settings = {});

// ---------------------------------------------------------------------------
// Costs

/// Tracking stage weights (diagonals) and targets.
struct TrackingCost {
  Vector q, r, p_f;
  Vector y_s, u_s;

  void validate(int l, int r_dim) const;
  double stage(const Vector& y, const Vector& u) const;
  double terminal(const Vector& y) const;
};

/// l_e(y, u) = c_y.y + c_u.u + sum beta_i |u_i - a_i|
///           + sum qy_i (y_i - yr_i)^2 + sum qu_i (u_i - ur_i)^2 + constant.
/// Empty vectors mean "term absent". The kink of |.| uses the right derivative.
struct EconomicCost {
  Vector y_linear, u_linear;
  Vector u_abs_weight, u_abs_offset;
  Vector y_quad, y_ref, u_quad, u_ref;
  double constant = 0.0;
  std::string expression;  ///< human-readable form

  void validate(int l, int r) const;
  bool empty() const;
  double value(const Vector& y, const Vector& u) const;
  /// Adds dl/dy and dl/du into gy, gu.
  void accumulate_gradient(const Vector& y, const Vector& u, Vector& gy, Vector& gu) const;

  /// -alpha * flow * (u_feed - y_product) + beta * sum_{i in energy} |u_i|.
  static EconomicCost throughput_energy(double alpha, double beta, double flow, int l, int r,
                                        int product_output, int feed_input,
                                        const std::vector<int>& energy_inputs);
  /// Tracking stage cost written in economic form.
  static EconomicCost from_tracking(const TrackingCost& tracking);
};

// ---------------------------------------------------------------------------
// Prediction models

enum class ModelKind { Plant, Tpwl, PodTpwl, Lti, Nn };

std::string to_string(ModelKind kind);

/// What the controller sees at sample k: the true state (state feedback) and
/// the measured history of (u_j, y_j), j < k, oldest column first.
struct Measurement {
  Vector x;
  Matrix u_past;
  Matrix y_past;
};

/// Uniform handle over the five backends. initialize() fixes the initial
/// condition; predict() maps u_0..u_{N-1} (r x N) to y_1..y_N (l x N) where
/// y_j = g(x_j, u_min(j, N-1)).
class PredictionModel {
 public:
  virtual ~PredictionModel() = default;

  virtual ModelKind kind() const = 0;
  virtual std::string tag() const = 0;
  /// Dimension of the internal model state (0 for input/output models).
  virtual int state_dim() const = 0;
  virtual int inputs() const = 0;
  virtual int outputs() const = 0;
  /// Number of past samples the initial condition needs.
  virtual int history_needed() const { return 0; }

  virtual void initialize(const Measurement& m) = 0;
  virtual Matrix predict(const Matrix& u) const = 0;
  /// d vec(Y) / d vec(U), (l N) x (r N), column-major stacking of Y and U.
  virtual Matrix prediction_jacobian(const Matrix& u) const;
};

/// Continuous-time model integrated with RK4 (plant, TPWL, POD-TPWL).
/// `to_state` maps the measured plant state to the model state.
class SimulatedPrediction : public PredictionModel {
 public:
  SimulatedPrediction(PlantModel model, ModelKind kind, std::string tag, double dt, int substeps,
                      std::function<Vector(const Vector&)> to_state = {});

  ModelKind kind() const override { return kind_; }
  std::string tag() const override { return tag_; }
  int state_dim() const override { return model_.n; }
  int inputs() const override { return model_.r; }
  int outputs() const override { return model_.l; }

  void initialize(const Measurement& m) override;
  Matrix predict(const Matrix& u) const override;
  /// Central differences; perturbing u_m re-simulates from the stored x_m.
  Matrix prediction_jacobian(const Matrix& u) const override;

  const Vector& initial_state() const { return state0_; }

 private:
  Matrix simulate(const Matrix& u, std::vector<Vector>* states) const;

  PlantModel model_;
  ModelKind kind_;
  std::string tag_;
  double dt_;
  int substeps_;
  std::function<Vector(const Vector&)> to_state_;
  Vector state0_;
};

std::shared_ptr<SimulatedPrediction> make_plant_prediction(const PlantModel& plant, double dt,
                                                           int substeps);
std::shared_ptr<SimulatedPrediction> make_tpwl_prediction(std::shared_ptr<const TpwlModel> tpwl,
                                                          TpwlMode mode, double dt, int substeps,
                                                          const std::string& tag = "");

/// Identified discrete LTI model; state from a least-squares fit on the
/// recent input/output window. Analytic prediction matrices.
class LtiPrediction : public PredictionModel {
 public:
  LtiPrediction(LinearStateSpaceModel model, int history, std::string tag = "subspace");

  ModelKind kind() const override { return ModelKind::Lti; }
  std::string tag() const override { return tag_; }
  int state_dim() const override { return model_.order(); }
  int inputs() const override { return model_.inputs(); }
  int outputs() const override { return model_.outputs(); }
  int history_needed() const override { return history_; }

  void initialize(const Measurement& m) override;
  void set_state(const Vector& z) { z0_ = z; }
  const Vector& state() const { return z0_; }
  Matrix predict(const Matrix& u) const override;
  Matrix prediction_jacobian(const Matrix& u) const override;

  const LinearStateSpaceModel& model() const { return model_; }

 private:
  LinearStateSpaceModel model_;
  int history_;
  std::string tag_;
  Vector z0_;
};

/// NN multi-step predictor fed with the measured history window. Needs
/// N_future >= N + 1; the prediction of the current output is discarded.
class NnPrediction : public PredictionModel {
 public:
  explicit NnPrediction(NNPredictor model, std::string tag = "nn");

  ModelKind kind() const override { return ModelKind::Nn; }
  std::string tag() const override { return tag_; }
  int state_dim() const override { return 0; }
  int inputs() const override { return model_.r; }
  int outputs() const override { return model_.l; }
  int history_needed() const override { return model_.n_past; }

  void initialize(const Measurement& m) override;
  Matrix predict(const Matrix& u) const override;

  const NNPredictor& model() const { return model_; }

 private:
  NNPredictor model_;
  std::string tag_;
  Matrix past_u_, past_y_;
};

// ---------------------------------------------------------------------------
// Controllers

enum class ControllerMode { Tracking, Economic };

struct ControlProblem {
  int horizon = 15;
  double dt = 2.0;
  Vector u_lower, u_upper;
  Vector y_min;  ///< output floor, zeros when empty
  ControllerMode mode = ControllerMode::Tracking;
  TrackingCost tracking;
  EconomicCost economic;
  std::shared_ptr<PredictionModel> model;
  BoxSolverSettings solver;
  double penalty_weight = 1e4;
  /// Steady input used as the constant start candidate (tracking.u_s when empty).
  Vector u_steady;

  void validate() const;
  int r() const { return static_cast<int>(u_lower.size()); }
  const Vector& steady_input() const;
};

/// Horizon objective after model->initialize(): tracking sums
/// |y_{j+1} - y_s|_Q^2 + |u_j - u_s|_R^2 over j < N plus |y_N - y_s|_Pf^2;
/// economic sums l_e(y_{j+1}, u_j). Both add the output-floor penalty.
double horizon_objective(const ControlProblem& problem, const Matrix& u);
double horizon_objective(const ControlProblem& problem, const Matrix& u, const Matrix& y);

/// Objective and its gradient with respect to U (r x N).
double horizon_objective_gradient(const ControlProblem& problem, const Matrix& u, Matrix& grad);

struct StepResult {
  Matrix u_sequence;  ///< r x N
  Vector u_first;
  double objective = 0.0;
  double shifted_objective = 0.0;  ///< +inf when no previous solution
  double steady_objective = 0.0;   ///< constant-u_s candidate
  std::string start;               ///< "shifted" or "steady"
  int iterations = 0;
  bool converged = false;
  double solve_seconds = 0.0;
};

/// One receding-horizon step. `previous` is the last returned sequence.
StepResult solve_mpc_step(const ControlProblem& problem, const Measurement& m,
                          const Matrix* previous = nullptr);
StepResult solve_empc_step(const ControlProblem& problem, const Measurement& m,
                           const Matrix* previous = nullptr);

/// Holds the warm start between steps.
class Controller {
 public:
  explicit Controller(ControlProblem problem);
  StepResult step(const Measurement& m);
  const ControlProblem& problem() const { return problem_; }
  void reset() { previous_.reset(); }

 private:
  ControlProblem problem_;
  std::optional<Matrix> previous_;
};

// ---------------------------------------------------------------------------
// Steady-state optimization

struct SteadyStateSettings {
  int starts = 6;
  std::uint64_t seed = 1;
  BoxSolverSettings solver{1e-9, 200, 10, 1e-4, 40};
  SteadyStateOptions root;
};

struct SteadyStateResult {
  Vector u_s, x_s, y_s;
  double cost = 0.0;
  int feasible_starts = 0;
};

/// min l_e(g(x, u), u) s.t. f(x, u) = 0, u in the box.
SteadyStateResult steady_state_optimize(const PlantModel& plant, const EconomicCost& cost,
                                        const Vector& u_lower, const Vector& u_upper,
                                        const SteadyStateSettings& settings = {});

// ---------------------------------------------------------------------------
// Closed loop

struct ClosedLoopOptions {
  int substeps = 10;
  /// Plant start; the nominal state when empty.
  Vector x_init;
  /// Input held before the loop starts to build the measurement history.
  Vector u_history;
  int history_length = 0;  ///< at least the model's need
};

struct SimulationResult {
  std::string model_tag;
  ControllerMode mode = ControllerMode::Tracking;
  double dt = 0.0;
  Vector t;
  Matrix x, u, y;  ///< per step, columns
  Vector stage_cost;     ///< configured stage cost at (y_k, u_k)
  Vector economic_cost;  ///< l_e(y_k, u_k)
  Vector objective;      ///< optimizer objective
  Vector solve_seconds;
  std::vector<int> iterations;
  std::vector<bool> converged;
  Vector final_state;

  Eigen::Index steps() const { return t.size(); }
  double accumulated_stage_cost() const { return stage_cost.sum(); }
  double accumulated_economic_cost() const { return economic_cost.sum(); }
  double mean_solve_seconds() const;
  double max_solve_seconds() const;
};

/// Applies the first optimized input to the true plant at every sample.
SimulationResult run_closed_loop(const PlantModel& plant, Controller& controller, int steps,
                                 const ClosedLoopOptions& options = {});

/// Per-step CSV and a key,value summary file.
void write_simulation_csv(const std::string& path, const SimulationResult& result,
                          const PlantModel& plant);
void write_simulation_summary(const std::string& path, const SimulationResult& result);

}  // namespace approxmpc
