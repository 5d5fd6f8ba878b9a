#include "approxmpc/bench.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <set>
#include <sstream>

#include "approxmpc/errors.hpp"
#include "approxmpc/model_io.hpp"

namespace approxmpc {

namespace fs = std::filesystem;
using nlohmann::json;

// ---------------------------------------------------------------------------
// Metric

double nrmse(const Matrix& predicted, const Matrix& reference, const Vector& normalizer) {
  if (predicted.rows() != reference.rows() || predicted.cols() != reference.cols()) {
    throw DimensionMismatch("nrmse: predicted and reference shapes differ");
  }
  if (predicted.cols() < 1 || predicted.rows() < 1) throw InvalidArgument("nrmse: empty sequence");
  if (normalizer.size() != predicted.rows()) throw DimensionMismatch("nrmse: one normalizer per channel");
  double total = 0.0;
  for (Eigen::Index i = 0; i < predicted.rows(); ++i) {
    if (normalizer(i) == 0.0) {
      throw InvalidArgument("nrmse: zero normalizer on channel " + std::to_string(i + 1));
    }
    const double mse = (predicted.row(i) - reference.row(i)).squaredNorm() /
                       static_cast<double>(predicted.cols());
    total += std::sqrt(mse) / std::abs(normalizer(i));
  }
  return total / static_cast<double>(predicted.rows());
}

double nrmse(const Vector& predicted, const Vector& reference, double normalizer) {
  return nrmse(Matrix(predicted.transpose()), Matrix(reference.transpose()),
               Vector::Constant(1, normalizer));
}

// ---------------------------------------------------------------------------
// Configuration

namespace {

// JSON object with a key path for diagnostics; flags keys that were never read.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail("expected an object");
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw ConfigError("config key '" + (path_.empty() ? std::string("<root>") : path_) + "': " + what);
  }
  [[noreturn]] void fail_key(const std::string& key, const std::string& what) const {
    throw ConfigError("config key '" + join(key) + "': " + what);
  }

  bool has(const std::string& key) const { return j_.contains(key); }

  const json& raw(const std::string& key) {
    used_.insert(key);
    if (!j_.contains(key)) fail_key(key, "missing");
    return j_.at(key);
  }

  Node object(const std::string& key) { return Node(raw(key), join(key)); }

  double number(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number()) fail_key(key, "expected a number");
    return v.get<double>();
  }
  double number(const std::string& key, double fallback) {
    return has(key) ? number(key) : (used_.insert(key), fallback);
  }

  int integer(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number_integer()) fail_key(key, "expected an integer");
    return v.get<int>();
  }
  int integer(const std::string& key, int fallback) {
    return has(key) ? integer(key) : (used_.insert(key), fallback);
  }

  std::uint64_t seed(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_number_unsigned()) {
      fail_key(key, "expected a non-negative integer seed");
    }
    return v.get<std::uint64_t>();
  }

  bool boolean(const std::string& key, bool fallback) {
    if (!has(key)) return fallback;
    const json& v = raw(key);
    if (!v.is_boolean()) fail_key(key, "expected true or false");
    return v.get<bool>();
  }

  std::string string(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_string()) fail_key(key, "expected a string");
    return v.get<std::string>();
  }
  std::string string(const std::string& key, const std::string& fallback) {
    return has(key) ? string(key) : fallback;
  }

  Vector vector(const std::string& key, Eigen::Index expected = -1) {
    const json& v = raw(key);
    if (!v.is_array()) fail_key(key, "expected an array of numbers");
    Vector out(static_cast<Eigen::Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number()) fail_key(key, "entry " + std::to_string(i) + " is not a number");
      out(static_cast<Eigen::Index>(i)) = v[i].get<double>();
    }
    if (expected >= 0 && out.size() != expected) {
      fail_key(key, "expected " + std::to_string(expected) + " entries, got " +
                        std::to_string(out.size()));
    }
    return out;
  }

  std::vector<int> ints(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail_key(key, "expected an array of integers");
    std::vector<int> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_number_integer()) fail_key(key, "entry " + std::to_string(i) + " is not an integer");
      out.push_back(v[i].get<int>());
    }
    return out;
  }

  std::vector<std::string> strings(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array()) fail_key(key, "expected an array of strings");
    std::vector<std::string> out;
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_string()) fail_key(key, "entry " + std::to_string(i) + " is not a string");
      out.push_back(v[i].get<std::string>());
    }
    return out;
  }

  Matrix matrix(const std::string& key) {
    const json& v = raw(key);
    if (!v.is_array() || v.empty()) fail_key(key, "expected a non-empty array of rows");
    const std::size_t cols = v[0].is_array() ? v[0].size() : 0;
    Matrix m(static_cast<Eigen::Index>(v.size()), static_cast<Eigen::Index>(cols));
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!v[i].is_array() || v[i].size() != cols) fail_key(key, "rows must be arrays of equal length");
      for (std::size_t k = 0; k < cols; ++k) {
        if (!v[i][k].is_number()) fail_key(key, "entries must be numbers");
        m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = v[i][k].get<double>();
      }
    }
    return m;
  }

  /// Throws on keys that were never read (typos).
  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!used_.count(it.key())) fail_key(it.key(), "unknown key");
    }
  }

  const std::string& path() const { return path_; }
  std::string join(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

TwoCstrParams parse_cstr(Node n) {
  TwoCstrParams p;
  p.flow_m3_per_min = n.number("flow_m3_per_min", p.flow_m3_per_min);
  p.volume1_m3 = n.number("volume1_m3", p.volume1_m3);
  p.volume2_m3 = n.number("volume2_m3", p.volume2_m3);
  p.feed_temperature_k = n.number("feed_temperature_k", p.feed_temperature_k);
  p.density_kg_per_m3 = n.number("density_kg_per_m3", p.density_kg_per_m3);
  p.heat_capacity_kj_per_kg_k = n.number("heat_capacity_kj_per_kg_k", p.heat_capacity_kj_per_kg_k);
  p.reaction_enthalpy_kj_per_kmol =
      n.number("reaction_enthalpy_kj_per_kmol", p.reaction_enthalpy_kj_per_kmol);
  p.activation_temperature_k = n.number("activation_temperature_k", p.activation_temperature_k);
  p.preexponential_per_min = n.number("preexponential_per_min", p.preexponential_per_min);
  if (n.has("nominal_input")) {
    const Vector u = n.vector("nominal_input", 3);
    p.nominal_input.assign(u.data(), u.data() + 3);
  }
  p.concentration_max_kmol_per_m3 =
      n.number("concentration_max_kmol_per_m3", p.concentration_max_kmol_per_m3);
  p.temperature_min_k = n.number("temperature_min_k", p.temperature_min_k);
  p.temperature_max_k = n.number("temperature_max_k", p.temperature_max_k);
  n.finish();
  return p;
}

PlantConfig parse_plant(Node n) {
  PlantConfig c;
  c.type = n.string("type");
  c.substeps = n.integer("rk4_substeps", 10);
  if (c.substeps < 1) n.fail_key("rk4_substeps", "must be >= 1");
  if (c.type == "two_cstr") {
    c.cstr = n.has("two_cstr") ? parse_cstr(n.object("two_cstr")) : TwoCstrParams{};
  } else if (c.type == "linear") {
    Node l = n.object("linear");
    c.a = l.matrix("a");
    c.b = l.matrix("b");
    c.c = l.matrix("c");
    c.d = l.matrix("d");
    c.u0 = l.vector("u0", c.b.cols());
    if (l.has("x0")) {
      c.x0 = l.vector("x0", c.a.rows());
    }
    l.finish();
    if (c.a.rows() != c.a.cols() || c.b.rows() != c.a.rows() || c.c.cols() != c.a.rows() ||
        c.d.rows() != c.c.rows() || c.d.cols() != c.b.cols()) {
      n.fail_key("linear", "inconsistent (a, b, c, d) dimensions");
    }
  } else {
    n.fail_key("type", "unknown plant type '" + c.type + "' (expected two_cstr or linear)");
  }
  n.finish();
  return c;
}

ExcitationConfig parse_excitation(Node n, int r) {
  ExcitationConfig c;
  c.type = n.string("type");
  c.samples = n.integer("samples");
  if (c.samples < 1) n.fail_key("samples", "must be >= 1");
  c.train_fraction = n.number("train_fraction", 0.8);
  if (!(c.train_fraction > 0.0 && c.train_fraction < 1.0)) {
    n.fail_key("train_fraction", "must lie in (0, 1)");
  }
  const std::uint64_t seed = n.seed("seed");
  const int hold_min = n.integer("hold_min_samples");
  const int hold_max = n.integer("hold_max_samples");
  const Vector lo = n.vector("u_lower", r);
  const Vector hi = n.vector("u_upper", r);
  if (c.type == "multilevel") {
    c.multilevel.levels_per_channel = n.integer("levels_per_channel", 5);
    c.multilevel.hold_min = hold_min;
    c.multilevel.hold_max = hold_max;
    c.multilevel.u_lower = lo;
    c.multilevel.u_upper = hi;
    c.multilevel.seed = seed;
    try {
      c.multilevel.validate();
    } catch (const Error& e) {
      n.fail(e.what());
    }
  } else if (c.type == "prbs_plus_steps") {
    c.prbs.base_low = n.vector("base_low", r);
    c.prbs.base_high = n.vector("base_high", r);
    c.prbs.extra_fraction = n.number("extra_fraction", 0.1);
    c.prbs.hold_min = hold_min;
    c.prbs.hold_max = hold_max;
    c.prbs.u_lower = lo;
    c.prbs.u_upper = hi;
    c.prbs.seed = seed;
    try {
      c.prbs.validate();
    } catch (const Error& e) {
      n.fail(e.what());
    }
  } else {
    n.fail_key("type", "unknown excitation type '" + c.type + "'");
  }
  n.finish();
  return c;
}

ModelSpec parse_model(Node n) {
  ModelSpec m;
  m.name = n.string("name");
  m.type = n.string("type");
  if (m.name.empty() || m.name == "plant") n.fail_key("name", "must be non-empty and not 'plant'");
  for (char ch : m.name) {
    if (!(std::isalnum(static_cast<unsigned char>(ch)) || ch == '_' || ch == '-')) {
      n.fail_key("name", "only letters, digits, '_' and '-' are allowed");
    }
  }
  if (m.type == "tpwl" || m.type == "pod_tpwl") {
    m.points = n.integer("points");
    if (m.points < 1) n.fail_key("points", "must be >= 1");
    m.weight_sharpness = n.number("weight_sharpness", 25.0);
    if (m.type == "pod_tpwl") {
      if (n.has("pod_order")) m.pod_order = n.integer("pod_order");
      if (n.has("pod_energy_threshold")) m.pod_energy = n.number("pod_energy_threshold");
      if (!m.pod_order && !m.pod_energy) n.fail("pod_tpwl needs pod_order or pod_energy_threshold");
      m.pod_standardize = n.boolean("pod_standardize", true);
    }
  } else if (m.type == "subspace") {
    m.identify.block_rows = n.integer("block_rows", 10);
    if (n.has("order")) m.identify.order = n.integer("order");
    m.identify.singular_value_cutoff = n.number("singular_value_cutoff", 1e-6);
    m.identify.remove_means = n.boolean("remove_means", true);
    m.history_samples = n.integer("history_samples", 0);
  } else if (m.type == "nn") {
    m.n_past = n.integer("n_past");
    m.n_future = n.integer("n_future");
    m.architecture.hidden = n.ints("hidden");
    for (const auto& a : n.strings("activations")) {
      try {
        m.architecture.activations.push_back(activation_from_string(a));
      } catch (const Error& e) {
        n.fail_key("activations", e.what());
      }
    }
    if (m.architecture.hidden.size() != m.architecture.activations.size()) {
      n.fail("'hidden' and 'activations' must have the same length");
    }
    m.training.learning_rate = n.number("learning_rate", 1e-3);
    m.training.batch_size = n.integer("batch_size", 32);
    m.training.epochs = n.integer("epochs", 500);
    m.training.patience = n.integer("patience", 50);
    m.training.seed = n.seed("seed");
  } else {
    n.fail_key("type", "unknown model type '" + m.type + "' (tpwl, pod_tpwl, subspace, nn)");
  }
  n.finish();
  return m;
}

EconomicCost parse_economic(Node n, int l, int r) {
  const std::string type = n.string("type");
  EconomicCost c;
  if (type == "throughput_energy") {
    const double alpha = n.number("alpha");
    const double beta = n.number("beta");
    const double flow = n.number("flow_m3_per_min");
    const int product = n.integer("product_output");
    const int feed = n.integer("feed_input");
    std::vector<int> energy = n.ints("energy_inputs");
    if (product < 1 || product > l) n.fail_key("product_output", "1-based output index out of range");
    if (feed < 1 || feed > r) n.fail_key("feed_input", "1-based input index out of range");
    for (int& e : energy) {
      if (e < 1 || e > r) n.fail_key("energy_inputs", "1-based input index out of range");
      --e;
    }
    c = EconomicCost::throughput_energy(alpha, beta, flow, l, r, product - 1, feed - 1, energy);
  } else if (type == "general") {
    if (n.has("y_linear")) c.y_linear = n.vector("y_linear", l);
    if (n.has("u_linear")) c.u_linear = n.vector("u_linear", r);
    if (n.has("u_abs_weight")) c.u_abs_weight = n.vector("u_abs_weight", r);
    if (n.has("u_abs_offset")) c.u_abs_offset = n.vector("u_abs_offset", r);
    if (n.has("y_quad")) c.y_quad = n.vector("y_quad", l);
    if (n.has("y_ref")) c.y_ref = n.vector("y_ref", l);
    if (n.has("u_quad")) c.u_quad = n.vector("u_quad", r);
    if (n.has("u_ref")) c.u_ref = n.vector("u_ref", r);
    c.constant = n.number("constant", 0.0);
    c.expression = "general";
    try {
      c.validate(l, r);
    } catch (const Error& e) {
      n.fail(e.what());
    }
  } else {
    n.fail_key("type", "unknown economic cost type '" + type + "'");
  }
  n.finish();
  return c;
}

ControlConfig parse_control(Node n, int l, int r) {
  ControlConfig c;
  c.horizon = n.integer("horizon_samples");
  if (c.horizon < 1) n.fail_key("horizon_samples", "must be >= 1");
  c.closed_loop_samples = n.integer("closed_loop_samples");
  if (c.closed_loop_samples < 1) n.fail_key("closed_loop_samples", "must be >= 1");
  c.history_samples = n.integer("history_samples", 20);
  c.u_lower = n.vector("u_lower", r);
  c.u_upper = n.vector("u_upper", r);
  if ((c.u_lower.array() > c.u_upper.array()).any()) n.fail("u_lower must not exceed u_upper");
  c.y_min = n.has("y_min") ? n.vector("y_min", l) : Vector(Vector::Zero(l));
  c.modes.clear();
  for (const auto& s : n.strings("modes")) {
    try {
      c.modes.push_back(controller_mode_from_string(s));
    } catch (const Error& e) {
      n.fail_key("modes", e.what());
    }
  }
  {
    Node t = n.object("tracking");
    c.q = t.vector("q", l);
    c.r = t.vector("r", r);
    c.p_f = t.vector("p_f", l);
    t.finish();
    if ((c.q.array() < 0).any() || (c.r.array() < 0).any() || (c.p_f.array() < 0).any()) {
      t.fail("weights must be non-negative");
    }
  }
  c.economic = parse_economic(n.object("economic"), l, r);
  if (n.has("solver")) {
    Node s = n.object("solver");
    c.solver.tolerance = s.number("tolerance", c.solver.tolerance);
    c.solver.max_iterations = s.integer("max_iterations", c.solver.max_iterations);
    c.solver.memory = s.integer("lbfgs_memory", c.solver.memory);
    c.penalty_weight = s.number("penalty_weight", c.penalty_weight);
    s.finish();
  }
  if (n.has("steady_state")) {
    Node s = n.object("steady_state");
    c.steady.starts = s.integer("starts", c.steady.starts);
    c.steady.seed = s.has("seed") ? s.seed("seed") : c.steady.seed;
    c.steady.solver.tolerance = s.number("tolerance", c.steady.solver.tolerance);
    c.steady.solver.max_iterations = s.integer("max_iterations", c.steady.solver.max_iterations);
    s.finish();
  }
  n.finish();
  return c;
}

std::size_t line_of(const std::string& text, std::size_t byte) {
  byte = std::min(byte, text.size());
  return static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(byte), '\n')) + 1;
}

}  // namespace

std::string to_string(ControllerMode mode) {
  return mode == ControllerMode::Tracking ? "mpc" : "empc";
}

ControllerMode controller_mode_from_string(const std::string& s) {
  if (s == "mpc") return ControllerMode::Tracking;
  if (s == "empc") return ControllerMode::Economic;
  throw InvalidArgument("unknown controller mode '" + s + "' (expected mpc or empc)");
}

ExperimentConfig parse_config(const std::string& text, const std::string& source) {
  json root;
  try {
    root = json::parse(text, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError(source + ": line " + std::to_string(line_of(text, e.byte)) + ": " + e.what());
  }
  ExperimentConfig cfg;
  cfg.source = source;
  try {
    Node n(root, "");
    cfg.plant = parse_plant(n.object("plant"));
    const PlantModel plant = make_plant(cfg.plant);
    {
      Node s = n.object("sampling");
      cfg.dt = s.number("dt_minutes");
      if (!(cfg.dt > 0.0)) s.fail_key("dt_minutes", "must be positive");
      s.finish();
    }
    cfg.excitation = parse_excitation(n.object("excitation"), plant.r);
    if (n.has("models")) {
      const json& arr = n.raw("models");
      if (!arr.is_array()) n.fail_key("models", "expected an array");
      std::set<std::string> names;
      for (std::size_t i = 0; i < arr.size(); ++i) {
        ModelSpec m = parse_model(Node(arr[i], "models[" + std::to_string(i) + "]"));
        if (!names.insert(m.name).second) {
          throw ConfigError("config key 'models[" + std::to_string(i) + "].name': duplicate model '" +
                            m.name + "'");
        }
        cfg.models.push_back(std::move(m));
      }
    }
    cfg.control = parse_control(n.object("control"), plant.l, plant.r);
    for (const auto& m : cfg.models) {
      if (m.type == "nn" && m.n_future < cfg.control.horizon + 1) {
        throw ConfigError("config model '" + m.name + "': n_future must be >= horizon_samples + 1");
      }
    }
    if (n.has("plot")) {
      Node p = n.object("plot");
      cfg.plot_channels = p.strings("channels");
      p.finish();
    }
    n.finish();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(source + ": " + e.what());
  }
  return cfg;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path);
}

PlantModel make_plant(const PlantConfig& c) {
  if (c.type == "two_cstr") return two_cstr_plant(c.cstr);
  if (c.type == "linear") {
    Vector x0 = c.x0;
    if (x0.size() == 0) {
      // Steady state of the nominal input.
      x0 = -c.a.colPivHouseholderQr().solve(c.b * c.u0);
    }
    return linear_plant(c.a, c.b, c.c, c.d, x0, c.u0);
  }
  throw ConfigError("unknown plant type '" + c.type + "'");
}

// ---------------------------------------------------------------------------
// Pipeline pieces

Dataset generate_dataset(const ExperimentConfig& cfg, const PlantModel& plant) {
  const Matrix u = cfg.excitation.type == "multilevel"
                       ? multilevel_signal(cfg.excitation.multilevel, cfg.excitation.samples)
                       : prbs_plus_steps(cfg.excitation.prbs, cfg.excitation.samples);
  return collect_dataset(plant, u, cfg.dt, cfg.plant.substeps);
}

std::string FittedModel::dimension() const {
  if (tpwl) {
    return std::to_string(spec.type == "pod_tpwl" ? tpwl->state_dim(TpwlMode::Reduced)
                                                  : tpwl->state_dim(TpwlMode::Full));
  }
  if (lti) return std::to_string(lti->order());
  return "-";
}

FittedModel fit_model(const ModelSpec& spec, const PlantModel& plant, const Dataset& train,
                      const Dataset& validation) {
  FittedModel out;
  out.spec = spec;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    if (spec.type == "tpwl" || spec.type == "pod_tpwl") {
      auto model = std::make_shared<TpwlModel>(
          build_tpwl(plant, train.trajectory, spec.points, spec.weight_sharpness));
      if (spec.type == "pod_tpwl") {
        PodOptions po;
        po.order = spec.pod_order;
        po.energy_threshold = spec.pod_energy;
        po.standardize = spec.pod_standardize;
        model->attach_basis(compute_basis(train.snapshots(), po));
      }
      out.tpwl = model;
    } else if (spec.type == "subspace") {
      out.lti = identify(train, spec.identify);
    } else if (spec.type == "nn") {
      const TrainingSet ts = build_training_set(train, spec.n_past, spec.n_future);
      std::optional<TrainingSet> vs;
      if (validation.size() >= spec.n_past + spec.n_future) {
        vs = build_training_set(validation, spec.n_past, spec.n_future, &ts.scaling);
      }
      out.nn = approxmpc::train(ts, vs ? &*vs : nullptr, spec.architecture, spec.training).model;
    } else {
      throw ConfigError("unknown model type '" + spec.type + "'");
    }
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    out.status = "failed";
    out.message = e.what();
  }
  out.fit_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

std::string model_file_name(const ModelSpec& spec) { return spec.name + ".json"; }

void save_fitted(const std::string& path, const FittedModel& m) {
  if (m.tpwl) {
    save_tpwl(path, *m.tpwl);
  } else if (m.lti) {
    save_lti(path, *m.lti);
  } else if (m.nn) {
    save_nn(path, *m.nn);
  } else {
    throw InvalidArgument("save_fitted: model '" + m.spec.name + "' has nothing to save");
  }
}

FittedModel load_fitted(const std::string& path, const ModelSpec& spec) {
  FittedModel m;
  m.spec = spec;
  if (spec.type == "tpwl" || spec.type == "pod_tpwl") {
    m.tpwl = std::make_shared<TpwlModel>(load_tpwl(path));
    if (spec.type == "pod_tpwl" && !m.tpwl->basis()) {
      throw Error("model file '" + path + "' has no POD basis");
    }
  } else if (spec.type == "subspace") {
    m.lti = load_lti(path);
  } else if (spec.type == "nn") {
    m.nn = load_nn(path);
  }
  return m;
}

std::shared_ptr<PredictionModel> make_prediction(const FittedModel& m, const ExperimentConfig& cfg) {
  const int substeps = cfg.plant.substeps;
  if (m.tpwl) {
    return make_tpwl_prediction(m.tpwl,
                                m.spec.type == "pod_tpwl" ? TpwlMode::Reduced : TpwlMode::Full,
                                cfg.dt, substeps, m.spec.name);
  }
  if (m.lti) {
    const int window = m.spec.history_samples > 0
                           ? m.spec.history_samples
                           : 2 * std::max(m.lti->block_rows, m.lti->order());
    return std::make_shared<LtiPrediction>(*m.lti, window, m.spec.name);
  }
  if (m.nn) return std::make_shared<NnPrediction>(*m.nn, m.spec.name);
  throw InvalidArgument("make_prediction: model '" + m.spec.name + "' is not fitted");
}

OpenLoopResult open_loop_validate(const PlantModel& plant, const FittedModel* m,
                                  const Dataset& va, int substeps) {
  OpenLoopResult r;
  const Trajectory& tr = va.trajectory;
  if (va.size() < 1) throw DatasetTooShort("open-loop validation: empty validation set");
  if (!m) {
    r.predicted = integrate(plant, tr.x.col(0), tr.u, tr.dt, substeps).y;
    r.reference = tr.y;
    r.t = tr.t;
  } else if (m->tpwl) {
    const bool reduced = m->spec.type == "pod_tpwl";
    const Vector s0 = reduced ? m->tpwl->basis()->project(tr.x.col(0)) : Vector(tr.x.col(0));
    r.predicted = simulate_tpwl(*m->tpwl, s0, tr.u, tr.dt,
                                reduced ? TpwlMode::Reduced : TpwlMode::Full, substeps)
                      .y;
    r.reference = tr.y;
    r.t = tr.t;
  } else if (m->lti) {
    const Vector z0 = estimate_initial_state(*m->lti, tr.u, tr.y);
    r.predicted = simulate_lti(*m->lti, z0, tr.u);
    r.reference = tr.y;
    r.t = tr.t;
  } else if (m->nn) {
    const NnRollout roll = predict_record(*m->nn, tr.u, tr.y);
    r.predicted = roll.predicted;
    r.reference = tr.y.middleCols(roll.first, roll.predicted.cols());
    r.t = tr.t.segment(roll.first, roll.predicted.cols());
  } else {
    throw InvalidArgument("open_loop_validate: model is not fitted");
  }
  if (!r.predicted.allFinite()) {
    throw IntegrationDiverged(0, "open-loop prediction is not finite");
  }
  return r;
}

ControlProblem make_problem(const ExperimentConfig& cfg, ControllerMode mode,
                            const SteadyStateResult& target, std::shared_ptr<PredictionModel> model) {
  const ControlConfig& c = cfg.control;
  ControlProblem p;
  p.horizon = c.horizon;
  p.dt = cfg.dt;
  p.u_lower = c.u_lower;
  p.u_upper = c.u_upper;
  p.y_min = c.y_min;
  p.mode = mode;
  p.tracking.q = c.q;
  p.tracking.r = c.r;
  p.tracking.p_f = c.p_f;
  p.tracking.y_s = target.y_s;
  p.tracking.u_s = target.u_s;
  p.economic = c.economic;
  p.model = std::move(model);
  p.solver = c.solver;
  p.penalty_weight = c.penalty_weight;
  p.u_steady = target.u_s;
  p.validate();
  return p;
}

// ---------------------------------------------------------------------------
// Experiment

namespace {

void write_open_loop_csv(const std::string& path, const OpenLoopResult& r) {
  std::vector<std::string> header{"t"};
  for (Eigen::Index i = 0; i < r.predicted.rows(); ++i) header.push_back("y_" + std::to_string(i + 1));
  for (Eigen::Index i = 0; i < r.reference.rows(); ++i) {
    header.push_back("ref_y_" + std::to_string(i + 1));
  }
  CsvWriter w(path, header);
  for (Eigen::Index k = 0; k < r.predicted.cols(); ++k) {
    std::vector<double> row{r.t(k)};
    for (Eigen::Index i = 0; i < r.predicted.rows(); ++i) row.push_back(r.predicted(i, k));
    for (Eigen::Index i = 0; i < r.reference.rows(); ++i) row.push_back(r.reference(i, k));
    w.write_row(row);
  }
}

void write_target_csv(const std::string& path, const SteadyStateResult& t) {
  CsvWriter w(path, {"quantity", "index", "value"});
  auto put = [&](const char* name, const Vector& v) {
    for (Eigen::Index i = 0; i < v.size(); ++i) {
      w.write_row(std::vector<std::string>{name, std::to_string(i + 1), format_double(v(i))});
    }
  };
  put("u_s", t.u_s);
  put("y_s", t.y_s);
  put("x_s", t.x_s);
  w.write_row(std::vector<std::string>{"cost", "1", format_double(t.cost)});
}

std::string sanitize(std::string s) {
  for (char& ch : s) {
    if (ch == ',' || ch == '\n' || ch == '\r' || ch == '"') ch = ';';
  }
  return s;
}

}  // namespace

ExperimentReport run_experiment(const ExperimentConfig& cfg, const std::string& out_dir,
                                const ExperimentOptions& opt) {
  ExperimentReport rep;
  const fs::path out(out_dir);
  fs::create_directories(out / "models");
  fs::create_directories(out / "trajectories");
  fs::create_directories(out / "summaries");
  const PlantModel plant = make_plant(cfg.plant);

  const Dataset data = generate_dataset(cfg, plant);
  write_dataset_csv((out / "dataset.csv").string(), data);
  rep.files.push_back("dataset.csv");
  const auto [train_set, validation] = data.split(cfg.excitation.train_fraction);
  Vector normalizer = plant.output(plant.x0, plant.u0);
  for (Eigen::Index i = 0; i < normalizer.size(); ++i) {
    if (normalizer(i) == 0.0) normalizer(i) = 1.0;
  }

  // Fit (or reload) every configured model.
  std::vector<FittedModel> fitted;
  for (const auto& spec : cfg.models) {
    const fs::path file = out / "models" / model_file_name(spec);
    FittedModel fm;
    if (opt.reuse_models && fs::exists(file)) {
      try {
        fm = load_fitted(file.string(), spec);
      } catch (const Error& e) {
        fm.spec = spec;
        fm.status = "failed";
        fm.message = e.what();
      }
    } else {
      fm = fit_model(spec, plant, train_set, validation);
      if (fm.ok()) save_fitted(file.string(), fm);
    }
    if (fm.ok()) rep.files.push_back("models/" + model_file_name(spec));
    fitted.push_back(std::move(fm));
  }

  // Open-loop validation.
  auto open_row = [&](const FittedModel* fm) {
    OpenLoopRow row;
    row.model = fm ? fm->spec.name : "plant";
    row.type = fm ? fm->spec.type : "plant";
    row.dimension = fm ? fm->dimension() : std::to_string(plant.n);
    if (fm && !fm->ok()) {
      row.status = "failed";
      row.message = fm->message;
      row.nrmse = std::nan("");
      return row;
    }
    try {
      const OpenLoopResult r = open_loop_validate(plant, fm, validation, cfg.plant.substeps);
      row.nrmse = nrmse(r.predicted, r.reference, normalizer);
      row.trajectory_file = "trajectories/open_loop_" + row.model + ".csv";
      write_open_loop_csv((out / row.trajectory_file).string(), r);
      rep.files.push_back(row.trajectory_file);
    } catch (const Error& e) {
      row.status = "failed";
      row.message = e.what();
      row.nrmse = std::nan("");
    }
    return row;
  };
  rep.open_loop.push_back(open_row(nullptr));
  for (const auto& fm : fitted) rep.open_loop.push_back(open_row(&fm));

  if (opt.closed_loop) {
    rep.target = steady_state_optimize(plant, cfg.control.economic, cfg.control.u_lower,
                                       cfg.control.u_upper, cfg.control.steady);
    write_target_csv((out / "target.csv").string(), rep.target);
    rep.files.push_back("target.csv");
    const auto& modes = opt.modes.empty() ? cfg.control.modes : opt.modes;
    for (ControllerMode mode : modes) {
      auto closed_row = [&](const FittedModel* fm) {
        ClosedLoopRow row;
        row.model = fm ? fm->spec.name : "plant";
        row.type = fm ? fm->spec.type : "plant";
        row.mode = to_string(mode);
        row.dimension = fm ? fm->dimension() : std::to_string(plant.n);
        if (fm && !fm->ok()) {
          row.status = "failed";
          row.message = fm->message;
          return row;
        }
        try {
          auto model = fm ? make_prediction(*fm, cfg)
                          : std::shared_ptr<PredictionModel>(
                                make_plant_prediction(plant, cfg.dt, cfg.plant.substeps));
          Controller ctrl(make_problem(cfg, mode, rep.target, model));
          ClosedLoopOptions clo;
          clo.substeps = cfg.plant.substeps;
          clo.x_init = plant.x0;
          clo.u_history = plant.u0;
          clo.history_length = cfg.control.history_samples;
          const SimulationResult sim =
              run_closed_loop(plant, ctrl, cfg.control.closed_loop_samples, clo);
          row.steps = static_cast<int>(sim.steps());
          row.mean_solve_seconds = sim.mean_solve_seconds();
          row.max_solve_seconds = sim.max_solve_seconds();
          row.objective = sim.accumulated_stage_cost();
          row.economic_cost = sim.accumulated_economic_cost();
          for (bool c : sim.converged) row.nonconverged += c ? 0 : 1;
          row.trajectory_file = "trajectories/closed_loop_" + row.model + "_" + row.mode + ".csv";
          write_simulation_csv((out / row.trajectory_file).string(), sim, plant);
          rep.files.push_back(row.trajectory_file);
          const std::string summary = "summaries/closed_loop_" + row.model + "_" + row.mode + ".csv";
          write_simulation_summary((out / summary).string(), sim);
          rep.files.push_back(summary);
        } catch (const ConfigError&) {
          throw;
        } catch (const Error& e) {
          row.status = "failed";
          row.message = e.what();
        }
        return row;
      };
      rep.closed_loop.push_back(closed_row(nullptr));
      for (const auto& fm : fitted) rep.closed_loop.push_back(closed_row(&fm));
    }
  }
  if (opt.write_report) {
    write_report(out_dir, rep);
    rep.files.push_back("open_loop.csv");
    if (opt.closed_loop) rep.files.push_back("closed_loop.csv");
    rep.files.push_back("report.txt");
  }
  return rep;
}

void write_report(const std::string& out_dir, const ExperimentReport& rep) {
  const fs::path out(out_dir);
  fs::create_directories(out);
  {
    CsvWriter w((out / "open_loop.csv").string(),
                {"model", "type", "dimension", "nrmse", "status", "message", "trajectory_file"});
    for (const auto& r : rep.open_loop) {
      w.write_row(std::vector<std::string>{r.model, r.type, r.dimension, format_double(r.nrmse),
                                           r.status, sanitize(r.message), r.trajectory_file});
    }
  }
  if (!rep.closed_loop.empty()) {
    CsvWriter w((out / "closed_loop.csv").string(),
                {"model", "type", "mode", "dimension", "steps", "mean_solve_time_s",
                 "max_solve_time_s", "objective", "economic_cost", "nonconverged_steps", "status",
                 "message", "trajectory_file"});
    for (const auto& r : rep.closed_loop) {
      w.write_row(std::vector<std::string>{
          r.model, r.type, r.mode, r.dimension, std::to_string(r.steps),
          format_double(r.mean_solve_seconds), format_double(r.max_solve_seconds),
          format_double(r.objective), format_double(r.economic_cost),
          std::to_string(r.nonconverged), r.status, sanitize(r.message), r.trajectory_file});
    }
  }
  std::ofstream txt(out / "report.txt");
  if (!txt) throw Error("cannot write report.txt in '" + out_dir + "'");
  txt << format_report_text(rep);
}

std::string format_report_text(const ExperimentReport& rep) {
  std::ostringstream o;
  char buf[256];
  o << "Open-loop validation\n";
  std::snprintf(buf, sizeof buf, "%-16s %-10s %-10s %-14s %s\n", "Model", "Type", "Dimension",
                "NRMSE", "Status");
  o << buf;
  for (const auto& r : rep.open_loop) {
    std::snprintf(buf, sizeof buf, "%-16s %-10s %-10s %-14.6g %s\n", r.model.c_str(),
                  r.type.c_str(), r.dimension.c_str(), r.nrmse, r.status.c_str());
    o << buf;
  }
  for (const char* mode : {"mpc", "empc"}) {
    bool any = false;
    for (const auto& r : rep.closed_loop) any = any || r.mode == mode;
    if (!any) continue;
    o << "\nClosed loop (" << (std::string(mode) == "mpc" ? "MPC" : "EMPC") << ")\n";
    std::snprintf(buf, sizeof buf, "%-16s %-10s %-26s %-22s %-22s %s\n", "Model applied",
                  "Dimension", "Time (single step) [s]", "Objective function", "Economic cost",
                  "Status");
    o << buf;
    for (const auto& r : rep.closed_loop) {
      if (r.mode != mode) continue;
      std::snprintf(buf, sizeof buf, "%-16s %-10s %-26.6g %-22.10g %-22.10g %s\n",
                    r.model.c_str(), r.dimension.c_str(), r.mean_solve_seconds, r.objective,
                    r.economic_cost, r.status.c_str());
      o << buf;
    }
  }
  return o.str();
}

// ---------------------------------------------------------------------------
// Plot data

std::size_t emit_plot_data(const std::vector<PlotSource>& sources,
                           const std::vector<std::string>& channels, const std::string& path) {
  std::set<std::string> available;
  for (const auto& s : sources) {
    for (const auto& h : s.table.header) {
      if (h != "t") available.insert(h);
    }
  }
  auto listing = [&]() {
    std::string out;
    for (const auto& a : available) out += (out.empty() ? "" : ", ") + a;
    return out;
  };
  if (sources.empty()) throw InvalidArgument("emit_plot_data: no trajectories given");
  if (channels.empty()) {
    throw InvalidArgument("emit_plot_data: empty channel selection; available channels: " + listing());
  }
  struct Pick {
    const PlotSource* src;
    std::size_t t_col, col;
    std::string channel;
  };
  std::vector<Pick> picks;
  for (const auto& s : sources) {
    const auto t_it = std::find(s.table.header.begin(), s.table.header.end(), "t");
    if (t_it == s.table.header.end()) {
      throw InvalidArgument("emit_plot_data: series '" + s.label + "' has no 't' column");
    }
    for (const auto& ch : channels) {
      const auto it = std::find(s.table.header.begin(), s.table.header.end(), ch);
      if (it == s.table.header.end()) {
        throw InvalidArgument("emit_plot_data: unknown channel '" + ch + "' in series '" + s.label +
                              "'; available channels: " + listing());
      }
      picks.push_back({&s, static_cast<std::size_t>(t_it - s.table.header.begin()),
                       static_cast<std::size_t>(it - s.table.header.begin()), ch});
    }
  }
  CsvWriter w(path, {"series", "t", "value"});
  std::size_t rows = 0;
  for (const auto& p : picks) {
    for (const auto& row : p.src->table.rows) {
      w.write_row(std::vector<std::string>{p.src->label + ":" + p.channel,
                                           format_double(row[p.t_col]), format_double(row[p.col])});
      ++rows;
    }
  }
  return rows;
}

}  // namespace approxmpc
