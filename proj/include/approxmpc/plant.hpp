#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "approxmpc/numerics.hpp"

namespace approxmpc {

/// Continuous-time nonlinear system  xdot = f(x, u),  y = g(x, u).
///
/// Both maps write into a caller-provided vector of the right size so that
/// the integrator can run allocation-free.
struct PlantModel {
  using Rhs = std::function<void(const Vector& x, const Vector& u, Vector& dx)>;
  using Out = std::function<void(const Vector& x, const Vector& u, Vector& y)>;

  struct Parameter {
    double value = 0.0;
    std::string unit;
  };

  /// Physical box for the state; leaving it aborts a simulation.
  struct Box {
    Vector lower;
    Vector upper;
  };

  std::string name;
  int n = 0;  ///< states
  int r = 0;  ///< inputs
  int l = 0;  ///< outputs
  Rhs rhs;
  Out out;
  Vector x0;  ///< nominal (steady) state
  Vector u0;  ///< nominal input
  std::map<std::string, Parameter> param_table;
  std::optional<Box> state_box;
  std::vector<std::string> state_names;
  std::vector<std::string> input_names;
  std::vector<std::string> output_names;

  Vector derivative(const Vector& x, const Vector& u) const;
  Vector output(const Vector& x, const Vector& u) const;
  bool inside_box(const Vector& x) const;
};

/// Sampled realization of a plant. Sample k holds the state at t_k, the
/// input applied on [t_k, t_{k+1}) and y_k = g(x_k, u_k). The state after the
/// last interval is kept in `final_state`.
struct Trajectory {
  double dt = 0.0;
  Vector t;
  Matrix u;  ///< r x N
  Matrix x;  ///< n x N (may be empty for I/O-only data)
  Matrix y;  ///< l x N
  Vector final_state;

  Eigen::Index size() const { return t.size(); }
  /// Throws InvalidArgument if lengths or the time grid are inconsistent.
  void validate() const;
};

/// Fixed-step RK4 under zero-order hold. Holds its own workspace so that
/// repeated calls do not allocate.
class Rk4Stepper {
 public:
  Rk4Stepper(const PlantModel& model, double dt, int substeps);

  /// Advance `x` by one sample with input `u` held. `step_index` is only used
  /// for error reporting. Throws IntegrationDiverged.
  void advance(Vector& x, const Vector& u, std::size_t step_index);

  double dt() const { return dt_; }
  int substeps() const { return substeps_; }

 private:
  const PlantModel* model_;
  double dt_;
  int substeps_;
  Vector k1_, k2_, k3_, k4_, tmp_;
};

Trajectory integrate(const PlantModel& model, const Vector& x_init, const Matrix& u_seq, double dt,
                     int substeps = 10);

/// Response from the nominal steady state (x0, u0) to a step of `magnitude`
/// on input `channel`, applied at t = 0.
Trajectory step_response(const PlantModel& model, int channel, double magnitude, int horizon,
                         double dt, int substeps = 10);

struct SteadyStateOptions {
  double tolerance = 1e-10;  ///< on ||f(x, u)||_inf
  int max_newton_iterations = 50;
  double settle_time = 500.0;  ///< fallback simulation length before Newton restarts
  double settle_dt = 1.0;
};

/// Root of f(x, u) = 0 for fixed u by damped Newton from `x_guess`, with a
/// simulation fallback. Returns nullopt when no root inside the box is found.
std::optional<Vector> find_steady_state(const PlantModel& model, const Vector& u,
                                        const Vector& x_guess,
                                        const SteadyStateOptions& options = {});

/// Parameters of the two non-isothermal CSTRs in series (A -> B, Arrhenius).
struct TwoCstrParams {
  double flow_m3_per_min = 0.2;
  double volume1_m3 = 1.0;
  double volume2_m3 = 1.0;
  double feed_temperature_k = 300.0;
  double density_kg_per_m3 = 1000.0;
  double heat_capacity_kj_per_kg_k = 0.231;
  double reaction_enthalpy_kj_per_kmol = -2000.0;
  double activation_temperature_k = 6014.0;  ///< E / R_g
  double preexponential_per_min = 6.0e6;
  std::vector<double> nominal_input = {1000.0, 1000.0, 4.0};  ///< Q1, Q2 [kJ/min], C_A0 [kmol/m3]
  double concentration_max_kmol_per_m3 = 20.0;
  double temperature_min_k = 250.0;
  double temperature_max_k = 600.0;
};

/// States (C_A1, T_1, C_A2, T_2); inputs (Q_1, Q_2, C_A0); outputs (C_A2, T_2).
/// x0 is the steady state at the nominal input.
PlantModel two_cstr_plant(const TwoCstrParams& params = {});

/// xdot = a x + b u, y = c x + d u; x0 / u0 as given.
PlantModel linear_plant(const Matrix& a, const Matrix& b, const Matrix& c, const Matrix& d,
                        const Vector& x0, const Vector& u0);

}  // namespace approxmpc
