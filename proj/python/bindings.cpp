// Python bindings for the core library.
#include <pybind11/eigen.h>
#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "approxmpc/bench.hpp"
#include "approxmpc/errors.hpp"
#include "approxmpc/model_io.hpp"
#include "approxmpc/pod.hpp"

namespace py = pybind11;
using namespace approxmpc;

namespace {

py::dict open_row(const OpenLoopRow& r) {
  py::dict d;
  d["model"] = r.model;
  d["type"] = r.type;
  d["dimension"] = r.dimension;
  d["nrmse"] = r.nrmse;
  d["status"] = r.status;
  d["message"] = r.message;
  d["trajectory_file"] = r.trajectory_file;
  return d;
}

py::dict closed_row(const ClosedLoopRow& r) {
  py::dict d;
  d["model"] = r.model;
  d["type"] = r.type;
  d["mode"] = r.mode;
  d["dimension"] = r.dimension;
  d["steps"] = r.steps;
  d["mean_solve_time_s"] = r.mean_solve_seconds;
  d["max_solve_time_s"] = r.max_solve_seconds;
  d["objective"] = r.objective;
  d["economic_cost"] = r.economic_cost;
  d["nonconverged_steps"] = r.nonconverged;
  d["status"] = r.status;
  d["message"] = r.message;
  d["trajectory_file"] = r.trajectory_file;
  return d;
}

Activation parse_activation(const std::string& s) { return activation_from_string(s); }

}  // namespace

PYBIND11_MODULE(_approxmpc, m) {
  m.doc() = "Approximate-model MPC/EMPC: plant simulation, POD, TPWL, subspace ID, NN models, control";
  m.attr("__version__") = "0.1.0";

  // Errors
  auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);
  py::register_exception<DimensionMismatch>(m, "DimensionMismatch", PyExc_ValueError);
  py::register_exception<IntegrationDiverged>(m, "IntegrationDiverged", base.ptr());
  py::register_exception<RankDeficiency>(m, "RankDeficiency", base.ptr());
  py::register_exception<PersistenceOfExcitation>(m, "PersistenceOfExcitation", base.ptr());
  py::register_exception<DatasetTooShort>(m, "DatasetTooShort", base.ptr());
  py::register_exception<ScalingDegenerate>(m, "ScalingDegenerate", base.ptr());
  py::register_exception<TrainingDiverged>(m, "TrainingDiverged", base.ptr());

  // Plant
  py::class_<PlantModel>(m, "PlantModel")
      .def_readonly("name", &PlantModel::name)
      .def_readonly("n", &PlantModel::n)
      .def_readonly("r", &PlantModel::r)
      .def_readonly("l", &PlantModel::l)
      .def_readonly("x0", &PlantModel::x0)
      .def_readonly("u0", &PlantModel::u0)
      .def_readonly("state_names", &PlantModel::state_names)
      .def("derivative", &PlantModel::derivative, py::arg("x"), py::arg("u"))
      .def("output", &PlantModel::output, py::arg("x"), py::arg("u"));

  py::class_<TwoCstrParams>(m, "TwoCstrParams").def(py::init<>());
  m.def("two_cstr_plant", [] { return two_cstr_plant(); }, "Benchmark plant: two CSTRs in series");
  m.def("linear_plant", &linear_plant, py::arg("a"), py::arg("b"), py::arg("c"), py::arg("d"),
        py::arg("x0"), py::arg("u0"));

  py::class_<Trajectory>(m, "Trajectory")
      .def(py::init<>())
      .def_readwrite("dt", &Trajectory::dt)
      .def_readwrite("t", &Trajectory::t)
      .def_readwrite("u", &Trajectory::u)
      .def_readwrite("x", &Trajectory::x)
      .def_readwrite("y", &Trajectory::y)
      .def_readwrite("final_state", &Trajectory::final_state)
      .def("__len__", &Trajectory::size);

  m.def("integrate", &integrate, py::arg("plant"), py::arg("x_init"), py::arg("u_seq"), py::arg("dt"),
        py::arg("substeps") = 10, "RK4 under zero-order hold; one column per sample");
  m.def(
      "find_steady_state",
      [](const PlantModel& p, const Vector& u, const Vector& guess) {
        return find_steady_state(p, u, guess);
      },
      py::arg("plant"), py::arg("u"), py::arg("x_guess"));

  // Excitation
  m.def(
      "multilevel_signal",
      [](const Vector& lo, const Vector& hi, int steps, int levels, int hold_min, int hold_max,
         std::uint64_t seed) {
        MultiLevelSpec s;
        s.u_lower = lo;
        s.u_upper = hi;
        s.levels_per_channel = levels;
        s.hold_min = hold_min;
        s.hold_max = hold_max;
        s.seed = seed;
        return multilevel_signal(s, steps);
      },
      py::arg("u_lower"), py::arg("u_upper"), py::arg("steps"), py::arg("levels") = 5,
      py::arg("hold_min") = 10, py::arg("hold_max") = 16, py::arg("seed") = 1);

  // POD
  py::class_<PodBasis>(m, "PodBasis")
      .def_readonly("basis", &PodBasis::basis)
      .def_readonly("singular_values", &PodBasis::singular_values)
      .def_readonly("k", &PodBasis::k)
      .def_readonly("energy_captured", &PodBasis::energy_captured)
      .def_readonly("center", &PodBasis::center)
      .def_readonly("scale", &PodBasis::scale)
      .def("project", &PodBasis::project)
      .def("lift", &PodBasis::lift);
  m.def(
      "compute_basis",
      [](const Matrix& x, std::optional<int> order, std::optional<double> energy, bool center,
         bool standardize) {
        PodOptions o;
        o.order = order;
        o.energy_threshold = energy;
        o.center = center;
        o.standardize = standardize;
        return compute_basis(x, o);
      },
      py::arg("snapshots"), py::arg("order") = py::none(), py::arg("energy_threshold") = py::none(),
      py::arg("center") = false, py::arg("standardize") = false);

  // TPWL
  py::enum_<TpwlMode>(m, "TpwlMode").value("Full", TpwlMode::Full).value("Reduced", TpwlMode::Reduced);
  py::class_<TpwlModel>(m, "TpwlModel")
      .def_property_readonly("points", [](const TpwlModel& t) { return t.locals().size(); })
      .def("attach_basis", &TpwlModel::attach_basis)
      .def("weights", &TpwlModel::weights, py::arg("state"), py::arg("mode") = TpwlMode::Full)
      .def("state_dim", &TpwlModel::state_dim);
  m.def(
      "build_tpwl",
      [](const PlantModel& p, const Trajectory& tr, int s, double sharp) {
        return build_tpwl(p, tr, s, sharp);
      },
      py::arg("plant"), py::arg("trajectory"), py::arg("points"), py::arg("weight_sharpness") = 25.0);
  m.def("simulate_tpwl", &simulate_tpwl, py::arg("model"), py::arg("state0"), py::arg("u_seq"),
        py::arg("dt"), py::arg("mode") = TpwlMode::Full, py::arg("substeps") = 10);

  // Subspace identification
  py::class_<LinearStateSpaceModel>(m, "LinearStateSpaceModel")
      .def_readonly("a", &LinearStateSpaceModel::a)
      .def_readonly("b", &LinearStateSpaceModel::b)
      .def_readonly("c", &LinearStateSpaceModel::c)
      .def_readonly("d", &LinearStateSpaceModel::d)
      .def_readonly("dt", &LinearStateSpaceModel::dt)
      .def_readonly("u_mean", &LinearStateSpaceModel::u_mean)
      .def_readonly("y_mean", &LinearStateSpaceModel::y_mean)
      .def_readonly("singular_values", &LinearStateSpaceModel::singular_values)
      .def_readonly("stable", &LinearStateSpaceModel::stable)
      .def("order", &LinearStateSpaceModel::order)
      .def("markov_parameters", &LinearStateSpaceModel::markov_parameters, py::arg("count"));
  m.def(
      "identify",
      [](const Matrix& u, const Matrix& y, double dt, int block_rows, std::optional<int> order,
         double cutoff, bool remove_means) {
        IdentifyOptions o;
        o.block_rows = block_rows;
        o.order = order;
        o.singular_value_cutoff = cutoff;
        o.remove_means = remove_means;
        return identify(u, y, dt, o);
      },
      py::arg("u"), py::arg("y"), py::arg("dt") = 1.0, py::arg("block_rows") = 10,
      py::arg("order") = py::none(), py::arg("singular_value_cutoff") = 1e-6,
      py::arg("remove_means") = true);
  m.def("simulate_lti", &simulate_lti, py::arg("model"), py::arg("z0"), py::arg("u_seq"));

  // Neural network
  py::class_<NNPredictor>(m, "NNPredictor")
      .def_readonly("n_past", &NNPredictor::n_past)
      .def_readonly("n_future", &NNPredictor::n_future)
      .def("in_dim", &NNPredictor::in_dim)
      .def("out_dim", &NNPredictor::out_dim)
      .def("forward", &NNPredictor::forward, py::arg("raw_input"))
      .def("assemble_input", &NNPredictor::assemble_input, py::arg("past_u"), py::arg("past_y"),
           py::arg("future_u"));
  m.def(
      "train_nn",
      [](const Matrix& u, const Matrix& y, int n_past, int n_future, const std::vector<int>& hidden,
         const std::vector<std::string>& activations, int epochs, double learning_rate,
         int batch_size, std::uint64_t seed) {
        Dataset d;
        d.trajectory.u = u;
        d.trajectory.y = y;
        d.trajectory.dt = 1.0;
        d.trajectory.t = Vector::LinSpaced(u.cols(), 0.0, static_cast<double>(u.cols() - 1));
        const TrainingSet ts = build_training_set(d, n_past, n_future);
        Architecture arch;
        arch.hidden = hidden;
        for (const auto& a : activations) arch.activations.push_back(parse_activation(a));
        TrainOptions o;
        o.epochs = epochs;
        o.patience = epochs;
        o.learning_rate = learning_rate;
        o.batch_size = batch_size;
        o.seed = seed;
        const TrainResult r = train(ts, nullptr, arch, o);
        return py::make_tuple(r.model, r.train_loss);
      },
      py::arg("u"), py::arg("y"), py::arg("n_past"), py::arg("n_future"), py::arg("hidden"),
      py::arg("activations"), py::arg("epochs") = 200, py::arg("learning_rate") = 1e-3,
      py::arg("batch_size") = 32, py::arg("seed") = 1,
      "Trains on the whole record; returns (model, final training loss)");
  m.def(
      "predict_record",
      [](const NNPredictor& model, const Matrix& u, const Matrix& y) {
        const NnRollout r = predict_record(model, u, y);
        return py::make_tuple(r.first, r.predicted);
      },
      py::arg("model"), py::arg("u"), py::arg("y"));

  // Control
  m.def(
      "minimize_box",
      [](const std::function<std::pair<double, Vector>(const Vector&)>& fun, const Vector& x0,
         const Vector& lower, const Vector& upper, double tolerance, int max_iterations) {
        const BoxObjective obj = [&](const Vector& x, Vector* g) {
          const auto [f, grad] = fun(x);
          if (g) *g = grad;
          return f;
        };
        BoxSolverSettings s;
        s.tolerance = tolerance;
        s.max_iterations = max_iterations;
        const BoxSolverResult r = minimize_box(obj, x0, lower, upper, s);
        return py::make_tuple(r.x, r.f, r.converged);
      },
      py::arg("fun"), py::arg("x0"), py::arg("lower"), py::arg("upper"), py::arg("tolerance") = 1e-8,
      py::arg("max_iterations") = 500,
      "Projected L-BFGS; fun(x) returns (value, gradient). Returns (x, f, converged)");

  py::class_<SteadyStateResult>(m, "SteadyStateResult")
      .def_readonly("u_s", &SteadyStateResult::u_s)
      .def_readonly("x_s", &SteadyStateResult::x_s)
      .def_readonly("y_s", &SteadyStateResult::y_s)
      .def_readonly("cost", &SteadyStateResult::cost);

  // Metric, configuration and pipeline
  m.def("nrmse", py::overload_cast<const Matrix&, const Matrix&, const Vector&>(&nrmse),
        py::arg("predicted"), py::arg("reference"), py::arg("normalizer"));

  py::class_<ExperimentConfig>(m, "ExperimentConfig")
      .def_readonly("source", &ExperimentConfig::source)
      .def_readonly("dt", &ExperimentConfig::dt)
      .def_property_readonly("model_names",
                             [](const ExperimentConfig& c) {
                               std::vector<std::string> names;
                               for (const auto& s : c.models) names.push_back(s.name);
                               return names;
                             })
      .def_property_readonly("horizon", [](const ExperimentConfig& c) { return c.control.horizon; });
  m.def("load_config", &load_config, py::arg("path"));
  m.def("parse_config", &parse_config, py::arg("text"), py::arg("source") = "<string>");
  m.def("make_plant", [](const ExperimentConfig& c) { return make_plant(c.plant); }, py::arg("config"));
  m.def(
      "steady_state_target",
      [](const ExperimentConfig& c) {
        return steady_state_optimize(make_plant(c.plant), c.control.economic, c.control.u_lower,
                                     c.control.u_upper, c.control.steady);
      },
      py::arg("config"), "Economic steady-state optimum for the configured plant and cost");
  m.def(
      "run_experiment",
      [](const ExperimentConfig& c, const std::string& out, bool closed_loop) {
        ExperimentOptions o;
        o.closed_loop = closed_loop;
        ExperimentReport rep;
        {
          py::gil_scoped_release release;
          rep = run_experiment(c, out, o);
        }
        py::list open, closed;
        for (const auto& r : rep.open_loop) open.append(open_row(r));
        for (const auto& r : rep.closed_loop) closed.append(closed_row(r));
        py::dict d;
        d["open_loop"] = open;
        d["closed_loop"] = closed;
        d["u_s"] = rep.target.u_s;
        d["y_s"] = rep.target.y_s;
        d["files"] = rep.files;
        d["text"] = format_report_text(rep);
        return d;
      },
      py::arg("config"), py::arg("out_dir"), py::arg("closed_loop") = true,
      "Full pipeline; returns the report rows as dictionaries");
}
