#include "approxmpc/model_io.hpp"

#include <fstream>
#include <json.hpp>

#include "approxmpc/errors.hpp"

namespace approxmpc {

using nlohmann::json;

namespace {

json matrix_to_json(const Matrix& m) {
  std::vector<double> data;
  data.reserve(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    for (Eigen::Index j = 0; j < m.cols(); ++j) data.push_back(m(i, j));
  }
  return json{{"rows", m.rows()}, {"cols", m.cols()}, {"data", data}};
}

json vector_to_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

Matrix matrix_from_json(const json& j, const std::string& what) {
  try {
    const auto rows = j.at("rows").get<Eigen::Index>();
    const auto cols = j.at("cols").get<Eigen::Index>();
    const auto data = j.at("data").get<std::vector<double>>();
    if (rows < 0 || cols < 0 || static_cast<Eigen::Index>(data.size()) != rows * cols) {
      throw Error("matrix '" + what + "': data length does not match rows x cols");
    }
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i) {
      for (Eigen::Index k = 0; k < cols; ++k) m(i, k) = data[static_cast<std::size_t>(i * cols + k)];
    }
    return m;
  } catch (const json::exception& e) {
    throw Error("matrix '" + what + "': " + e.what());
  }
}

Vector vector_from_json(const json& j, const std::string& what) {
  try {
    const auto data = j.get<std::vector<double>>();
    return Eigen::Map<const Vector>(data.data(), static_cast<Eigen::Index>(data.size()));
  } catch (const json::exception& e) {
    throw Error("vector '" + what + "': " + e.what());
  }
}

void write_json(const std::string& path, const json& j) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write model file '" + path + "'");
  out << j.dump(1) << '\n';
  if (!out) throw Error("failed writing model file '" + path + "'");
}

json read_json(const std::string& path, const std::string& expected_kind) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open model file '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    throw Error("model file '" + path + "' is not valid JSON: " + e.what());
  }
  const std::string kind = j.value("kind", "");
  if (!expected_kind.empty() && kind != expected_kind) {
    throw Error("model file '" + path + "' has kind '" + kind + "', expected '" + expected_kind + "'");
  }
  return j;
}

json basis_to_json(const PodBasis& b) {
  return json{{"kind", "pod_basis"},
              {"k", b.k},
              {"energy_captured", b.energy_captured},
              {"basis", matrix_to_json(b.basis)},
              {"singular_values", vector_to_json(b.singular_values)},
              {"center", vector_to_json(b.center)},
              {"scale", vector_to_json(b.scale)}};
}

PodBasis basis_from_json(const json& j) {
  PodBasis b;
  b.k = j.at("k").get<int>();
  b.energy_captured = j.at("energy_captured").get<double>();
  b.basis = matrix_from_json(j.at("basis"), "basis");
  b.singular_values = vector_from_json(j.at("singular_values"), "singular_values");
  b.center = vector_from_json(j.at("center"), "center");
  b.scale = j.contains("scale") ? vector_from_json(j.at("scale"), "scale")
                                : Vector(Vector::Ones(b.basis.rows()));
  if (b.basis.cols() != b.k || b.center.size() != b.basis.rows() ||
      b.scale.size() != b.basis.rows()) {
    throw Error("pod basis: inconsistent dimensions");
  }
  return b;
}

}  // namespace

void save_pod_basis(const std::string& path, const PodBasis& basis) {
  write_json(path, basis_to_json(basis));
}

PodBasis load_pod_basis(const std::string& path) {
  try {
    return basis_from_json(read_json(path, "pod_basis"));
  } catch (const json::exception& e) {
    throw Error("model file '" + path + "': " + e.what());
  }
}

void save_tpwl(const std::string& path, const TpwlModel& model) {
  json locals = json::array();
  for (const auto& lm : model.locals()) {
    locals.push_back(json{{"x", vector_to_json(lm.x)},
                          {"u", vector_to_json(lm.u)},
                          {"a", matrix_to_json(lm.a)},
                          {"b", matrix_to_json(lm.b)},
                          {"c", matrix_to_json(lm.c)},
                          {"d", matrix_to_json(lm.d)},
                          {"f", vector_to_json(lm.f)},
                          {"g", vector_to_json(lm.g)},
                          {"jacobian_check_error", lm.jacobian_check_error}});
  }
  json j{{"kind", "tpwl"},
         {"weight_sharpness", model.weight_sharpness()},
         {"distance_scale", vector_to_json(model.distance_scale())},
         {"points", locals}};
  if (model.basis()) j["pod_basis"] = basis_to_json(*model.basis());
  write_json(path, j);
}

TpwlModel load_tpwl(const std::string& path) {
  const json j = read_json(path, "tpwl");
  try {
    std::vector<LocalAffineModel> locals;
    for (const auto& p : j.at("points")) {
      LocalAffineModel lm;
      lm.x = vector_from_json(p.at("x"), "x");
      lm.u = vector_from_json(p.at("u"), "u");
      lm.a = matrix_from_json(p.at("a"), "a");
      lm.b = matrix_from_json(p.at("b"), "b");
      lm.c = matrix_from_json(p.at("c"), "c");
      lm.d = matrix_from_json(p.at("d"), "d");
      lm.f = vector_from_json(p.at("f"), "f");
      lm.g = vector_from_json(p.at("g"), "g");
      lm.jacobian_check_error = p.value("jacobian_check_error", 0.0);
      locals.push_back(std::move(lm));
    }
    TpwlModel model(std::move(locals), vector_from_json(j.at("distance_scale"), "distance_scale"),
                    j.at("weight_sharpness").get<double>());
    if (j.contains("pod_basis")) model.attach_basis(basis_from_json(j.at("pod_basis")));
    return model;
  } catch (const json::exception& e) {
    throw Error("model file '" + path + "': " + e.what());
  }
}

void save_lti(const std::string& path, const LinearStateSpaceModel& m) {
  json warnings = m.warnings;
  write_json(path, json{{"kind", "lti"},
                        {"dt", m.dt},
                        {"a", matrix_to_json(m.a)},
                        {"b", matrix_to_json(m.b)},
                        {"c", matrix_to_json(m.c)},
                        {"d", matrix_to_json(m.d)},
                        {"u_mean", vector_to_json(m.u_mean)},
                        {"y_mean", vector_to_json(m.y_mean)},
                        {"singular_values", vector_to_json(m.singular_values)},
                        {"spectral_radius", m.spectral_radius},
                        {"stable", m.stable},
                        {"observability_condition", m.observability_condition},
                        {"block_rows", m.block_rows},
                        {"warnings", warnings}});
}

LinearStateSpaceModel load_lti(const std::string& path) {
  const json j = read_json(path, "lti");
  try {
    LinearStateSpaceModel m;
    m.dt = j.at("dt").get<double>();
    m.a = matrix_from_json(j.at("a"), "a");
    m.b = matrix_from_json(j.at("b"), "b");
    m.c = matrix_from_json(j.at("c"), "c");
    m.d = matrix_from_json(j.at("d"), "d");
    m.u_mean = vector_from_json(j.at("u_mean"), "u_mean");
    m.y_mean = vector_from_json(j.at("y_mean"), "y_mean");
    m.singular_values = vector_from_json(j.at("singular_values"), "singular_values");
    m.spectral_radius = j.at("spectral_radius").get<double>();
    m.stable = j.at("stable").get<bool>();
    m.observability_condition = j.at("observability_condition").get<double>();
    m.block_rows = j.at("block_rows").get<int>();
    m.warnings = j.value("warnings", std::vector<std::string>{});
    if (m.a.rows() != m.a.cols() || m.b.rows() != m.a.rows() || m.c.cols() != m.a.rows() ||
        m.d.rows() != m.c.rows() || m.d.cols() != m.b.cols()) {
      throw Error("model file '" + path + "': inconsistent (A, B, C, D) dimensions");
    }
    return m;
  } catch (const json::exception& e) {
    throw Error("model file '" + path + "': " + e.what());
  }
}

void save_nn(const std::string& path, const NNPredictor& m) {
  json layers = json::array();
  for (const auto& layer : m.layers) {
    layers.push_back(json{{"weights", matrix_to_json(layer.w)},
                          {"bias", vector_to_json(layer.b)},
                          {"activation", to_string(layer.activation)}});
  }
  write_json(path, json{{"kind", "nn"},
                        {"n_past", m.n_past},
                        {"n_future", m.n_future},
                        {"inputs", m.r},
                        {"outputs", m.l},
                        {"scaling",
                         {{"u_min", vector_to_json(m.scaling.u_min)},
                          {"u_max", vector_to_json(m.scaling.u_max)},
                          {"y_min", vector_to_json(m.scaling.y_min)},
                          {"y_max", vector_to_json(m.scaling.y_max)}}},
                        {"layers", layers}});
}

NNPredictor load_nn(const std::string& path) {
  const json j = read_json(path, "nn");
  try {
    NNPredictor m;
    m.n_past = j.at("n_past").get<int>();
    m.n_future = j.at("n_future").get<int>();
    m.r = j.at("inputs").get<int>();
    m.l = j.at("outputs").get<int>();
    const auto& s = j.at("scaling");
    m.scaling.u_min = vector_from_json(s.at("u_min"), "u_min");
    m.scaling.u_max = vector_from_json(s.at("u_max"), "u_max");
    m.scaling.y_min = vector_from_json(s.at("y_min"), "y_min");
    m.scaling.y_max = vector_from_json(s.at("y_max"), "y_max");
    for (const auto& lj : j.at("layers")) {
      DenseLayer layer;
      layer.w = matrix_from_json(lj.at("weights"), "weights");
      layer.b = vector_from_json(lj.at("bias"), "bias");
      layer.activation = activation_from_string(lj.at("activation").get<std::string>());
      m.layers.push_back(std::move(layer));
    }
    m.validate();
    return m;
  } catch (const json::exception& e) {
    throw Error("model file '" + path + "': " + e.what());
  }
}

std::string model_file_kind(const std::string& path) { return read_json(path, "").value("kind", ""); }

}  // namespace approxmpc
