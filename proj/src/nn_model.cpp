#include "approxmpc/nn_model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "approxmpc/errors.hpp"
#include "approxmpc/rng.hpp"

namespace approxmpc {

std::string to_string(Activation a) {
  switch (a) {
    case Activation::Sigmoid:
      return "sigmoid";
    case Activation::Swish:
      return "swish";
    case Activation::Linear:
      return "linear";
  }
  return "linear";
}

Activation activation_from_string(const std::string& name) {
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "swish") return Activation::Swish;
  if (name == "linear") return Activation::Linear;
  throw InvalidArgument("unknown activation '" + name + "'");
}

namespace {

Matrix apply(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::Sigmoid:
      return (1.0 + (-z.array()).exp()).inverse().matrix();
    case Activation::Swish:
      return (z.array() * (1.0 + (-z.array()).exp()).inverse()).matrix();
    case Activation::Linear:
      return z;
  }
  return z;
}

// d act / dz evaluated elementwise.
Matrix derivative(Activation act, const Matrix& z) {
  switch (act) {
    case Activation::Sigmoid: {
      const Eigen::ArrayXXd s = (1.0 + (-z.array()).exp()).inverse();
      return (s * (1.0 - s)).matrix();
    }
    case Activation::Swish: {
      const Eigen::ArrayXXd s = (1.0 + (-z.array()).exp()).inverse();
      return (s * (1.0 + z.array() * (1.0 - s))).matrix();
    }
    case Activation::Linear:
      return Matrix::Ones(z.rows(), z.cols());
  }
  return Matrix::Ones(z.rows(), z.cols());
}

double to_unit(double v, double lo, double hi) { return 2.0 * (v - lo) / (hi - lo) - 1.0; }
double from_unit(double v, double lo, double hi) { return lo + 0.5 * (v + 1.0) * (hi - lo); }

}  // namespace

ChannelScaling ChannelScaling::from_data(const Matrix& u, const Matrix& y) {
  ChannelScaling s;
  s.u_min = u.rowwise().minCoeff();
  s.u_max = u.rowwise().maxCoeff();
  s.y_min = y.rowwise().minCoeff();
  s.y_max = y.rowwise().maxCoeff();
  for (Eigen::Index i = 0; i < u.rows(); ++i) {
    if (!(s.u_min(i) < s.u_max(i))) throw ScalingDegenerate("u_" + std::to_string(i + 1));
  }
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (!(s.y_min(i) < s.y_max(i))) throw ScalingDegenerate("y_" + std::to_string(i + 1));
  }
  return s;
}

double ChannelScaling::scale_u(Eigen::Index ch, double v) const {
  return to_unit(v, u_min(ch), u_max(ch));
}
double ChannelScaling::scale_y(Eigen::Index ch, double v) const {
  return to_unit(v, y_min(ch), y_max(ch));
}
double ChannelScaling::unscale_y(Eigen::Index ch, double v) const {
  return from_unit(v, y_min(ch), y_max(ch));
}

int nn_input_dim(int n_past, int n_future, int r, int l) {
  return n_past * (r + l) + (n_future - 1) * r;
}

void NNPredictor::validate() const {
  if (n_past < 1 || n_future < 1 || r < 1 || l < 1) {
    throw InvalidArgument("NNPredictor: window lengths and channel counts must be positive");
  }
  if (layers.empty()) throw InvalidArgument("NNPredictor: no layers");
  Eigen::Index width = in_dim();
  for (const auto& layer : layers) {
    if (layer.w.cols() != width || layer.b.size() != layer.w.rows()) {
      throw DimensionMismatch("NNPredictor: layer dimensions do not chain");
    }
    width = layer.w.rows();
  }
  if (width != out_dim()) throw DimensionMismatch("NNPredictor: last layer width != out_dim");
  if (scaling.u_min.size() != r || scaling.y_min.size() != l ||
      !(scaling.u_min.array() < scaling.u_max.array()).all() ||
      !(scaling.y_min.array() < scaling.y_max.array()).all()) {
    throw InvalidArgument("NNPredictor: scaling ranges must satisfy min < max per channel");
  }
}

Vector NNPredictor::scale_input(const Vector& raw) const {
  if (raw.size() != in_dim()) throw DimensionMismatch("NN input row has wrong length");
  Vector out(raw.size());
  Eigen::Index pos = 0;
  for (int k = 0; k < n_past; ++k) {
    for (int i = 0; i < r; ++i, ++pos) out(pos) = scaling.scale_u(i, raw(pos));
    for (int i = 0; i < l; ++i, ++pos) out(pos) = scaling.scale_y(i, raw(pos));
  }
  for (int k = 0; k + 1 < n_future; ++k) {
    for (int i = 0; i < r; ++i, ++pos) out(pos) = scaling.scale_u(i, raw(pos));
  }
  return out;
}

Vector NNPredictor::unscale_output(const Vector& scaled) const {
  Vector out(scaled.size());
  for (Eigen::Index k = 0; k < scaled.size(); ++k) out(k) = scaling.unscale_y(k % l, scaled(k));
  return out;
}

Matrix NNPredictor::forward_scaled(const Matrix& rows) const {
  Matrix a = rows;
  for (const auto& layer : layers) {
    Matrix z = a * layer.w.transpose();
    z.rowwise() += layer.b.transpose();
    a = apply(layer.activation, z);
  }
  return a;
}

Vector NNPredictor::forward(const Vector& raw_input) const {
  const Vector scaled = scale_input(raw_input);
  Vector a = scaled;
  for (const auto& layer : layers) {
    Vector z = layer.w * a + layer.b;
    a = apply(layer.activation, z);
  }
  return unscale_output(a);
}

Vector NNPredictor::assemble_input(const Matrix& past_u, const Matrix& past_y,
                                   const Matrix& future_u) const {
  if (past_u.rows() != r || past_y.rows() != l || past_u.cols() != n_past ||
      past_y.cols() != n_past || future_u.rows() != r || future_u.cols() != n_future - 1) {
    throw DimensionMismatch("assemble_input: window shapes do not match the predictor");
  }
  Vector row(in_dim());
  Eigen::Index pos = 0;
  for (int k = 0; k < n_past; ++k) {
    row.segment(pos, r) = past_u.col(k);
    pos += r;
    row.segment(pos, l) = past_y.col(k);
    pos += l;
  }
  for (int k = 0; k + 1 < n_future; ++k) {
    row.segment(pos, r) = future_u.col(k);
    pos += r;
  }
  return row;
}

TrainingSet build_training_set(const Dataset& data, int n_past, int n_future,
                               const ChannelScaling* scaling) {
  if (n_past < 1 || n_future < 1) throw InvalidArgument("window lengths must be >= 1");
  const Matrix& u = data.inputs();
  const Matrix& y = data.outputs();
  const auto total = data.size();
  if (total < n_past + n_future) {
    throw DatasetTooShort("build_training_set: need at least N_past + N_future samples");
  }
  TrainingSet ts;
  ts.n_past = n_past;
  ts.n_future = n_future;
  ts.r = static_cast<int>(u.rows());
  ts.l = static_cast<int>(y.rows());
  ts.scaling = scaling ? *scaling : ChannelScaling::from_data(u, y);

  Matrix us(u.rows(), total), ys(y.rows(), total);
  for (Eigen::Index k = 0; k < total; ++k) {
    for (Eigen::Index i = 0; i < u.rows(); ++i) us(i, k) = ts.scaling.scale_u(i, u(i, k));
    for (Eigen::Index i = 0; i < y.rows(); ++i) ys(i, k) = ts.scaling.scale_y(i, y(i, k));
  }
  const auto rows = total - n_past - n_future + 1;
  const int in = nn_input_dim(n_past, n_future, ts.r, ts.l);
  ts.inputs.resize(rows, in);
  ts.targets.resize(rows, static_cast<Eigen::Index>(n_future) * ts.l);
  for (Eigen::Index row = 0; row < rows; ++row) {
    const Eigen::Index k = row + n_past;  // first predicted sample
    Eigen::Index pos = 0;
    for (Eigen::Index j = k - n_past; j < k; ++j) {
      for (Eigen::Index i = 0; i < ts.r; ++i) ts.inputs(row, pos++) = us(i, j);
      for (Eigen::Index i = 0; i < ts.l; ++i) ts.inputs(row, pos++) = ys(i, j);
    }
    for (Eigen::Index j = k; j < k + n_future - 1; ++j) {
      for (Eigen::Index i = 0; i < ts.r; ++i) ts.inputs(row, pos++) = us(i, j);
    }
    pos = 0;
    for (Eigen::Index j = k; j < k + n_future; ++j) {
      for (Eigen::Index i = 0; i < ts.l; ++i) ts.targets(row, pos++) = ys(i, j);
    }
  }
  return ts;
}

NNPredictor init_network(const TrainingSet& data, const Architecture& arch, std::uint64_t seed) {
  if (arch.hidden.size() != arch.activations.size()) {
    throw InvalidArgument("architecture needs one activation per hidden layer");
  }
  NNPredictor model;
  model.n_past = data.n_past;
  model.n_future = data.n_future;
  model.r = data.r;
  model.l = data.l;
  model.scaling = data.scaling;
  SplitMix64 rng(seed);
  int fan_in = model.in_dim();
  auto add_layer = [&](int width, Activation act) {
    if (width < 1) throw InvalidArgument("hidden layer width must be >= 1");
    DenseLayer layer;
    const double bound = std::sqrt(6.0 / (fan_in + width));
    layer.w.resize(width, fan_in);
    for (Eigen::Index c = 0; c < layer.w.cols(); ++c) {
      for (Eigen::Index r = 0; r < layer.w.rows(); ++r) layer.w(r, c) = rng.uniform(-bound, bound);
    }
    layer.b = Vector::Zero(width);
    layer.activation = act;
    model.layers.push_back(std::move(layer));
    fan_in = width;
  };
  for (std::size_t i = 0; i < arch.hidden.size(); ++i) add_layer(arch.hidden[i], arch.activations[i]);
  add_layer(model.out_dim(), Activation::Linear);
  model.validate();
  return model;
}

double loss_and_gradient(const NNPredictor& model, const Matrix& inputs, const Matrix& targets,
                         std::vector<DenseLayer>* gradient) {
  const auto batch = inputs.rows();
  const auto nl = model.layers.size();
  std::vector<Matrix> acts(nl + 1), pre(nl);
  acts[0] = inputs;
  for (std::size_t i = 0; i < nl; ++i) {
    const auto& layer = model.layers[i];
    pre[i] = acts[i] * layer.w.transpose();
    pre[i].rowwise() += layer.b.transpose();
    acts[i + 1] = apply(layer.activation, pre[i]);
  }
  const Matrix err = acts[nl] - targets;
  const double count = static_cast<double>(err.size());
  const double loss = err.squaredNorm() / count;
  if (!gradient) return loss;

  gradient->resize(nl);
  Matrix delta = (2.0 / count) * err;
  for (std::size_t ii = nl; ii-- > 0;) {
    const auto& layer = model.layers[ii];
    delta = delta.cwiseProduct(derivative(layer.activation, pre[ii]));
    auto& g = (*gradient)[ii];
    g.activation = layer.activation;
    g.w = delta.transpose() * acts[ii];
    g.b = delta.colwise().sum().transpose();
    if (ii > 0) delta = delta * layer.w;
  }
  (void)batch;
  return loss;
}

TrainResult train(const TrainingSet& train_set, const TrainingSet* validation,
                  const Architecture& arch, const TrainOptions& opt) {
  const auto rows = train_set.inputs.rows();
  if (rows < 1) throw InvalidArgument("train: no training rows");
  if (opt.batch_size < 1 || opt.epochs < 1) throw InvalidArgument("train: bad batch size or epochs");

  TrainResult result;
  NNPredictor model = init_network(train_set, arch, opt.seed);
  const auto nl = model.layers.size();
  std::vector<DenseLayer> m1(nl), m2(nl), grad;
  for (std::size_t i = 0; i < nl; ++i) {
    m1[i].w = m2[i].w = Matrix::Zero(model.layers[i].w.rows(), model.layers[i].w.cols());
    m1[i].b = m2[i].b = Vector::Zero(model.layers[i].b.size());
  }

  SplitMix64 rng(opt.seed ^ 0x5DEECE66DULL);
  std::vector<Eigen::Index> order(static_cast<std::size_t>(rows));
  std::iota(order.begin(), order.end(), 0);
  const Matrix* monitor_x = validation ? &validation->inputs : &train_set.inputs;
  const Matrix* monitor_y = validation ? &validation->targets : &train_set.targets;

  double best = std::numeric_limits<double>::infinity();
  NNPredictor best_model = model;
  long step = 0;
  int since_best = 0;
  Matrix bx, by;
  for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) {
      const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    for (Eigen::Index start = 0; start < rows; start += opt.batch_size) {
      const Eigen::Index len = std::min<Eigen::Index>(opt.batch_size, rows - start);
      bx.resize(len, train_set.inputs.cols());
      by.resize(len, train_set.targets.cols());
      for (Eigen::Index k = 0; k < len; ++k) {
        const auto src = order[static_cast<std::size_t>(start + k)];
        bx.row(k) = train_set.inputs.row(src);
        by.row(k) = train_set.targets.row(src);
      }
      const double loss = loss_and_gradient(model, bx, by, &grad);
      if (!std::isfinite(loss)) {
        throw TrainingDiverged("training loss became non-finite at epoch " + std::to_string(epoch) +
                               "; try a smaller learning rate");
      }
      ++step;
      const double c1 = 1.0 - std::pow(opt.beta1, static_cast<double>(step));
      const double c2 = 1.0 - std::pow(opt.beta2, static_cast<double>(step));
      for (std::size_t i = 0; i < nl; ++i) {
        auto update = [&](auto& param, auto& g, auto& m, auto& v) {
          m = opt.beta1 * m + (1.0 - opt.beta1) * g;
          v = opt.beta2 * v + (1.0 - opt.beta2) * g.cwiseAbs2();
          param.array() -= opt.learning_rate * (m.array() / c1) /
                           ((v.array() / c2).sqrt() + opt.epsilon);
        };
        update(model.layers[i].w, grad[i].w, m1[i].w, m2[i].w);
        update(model.layers[i].b, grad[i].b, m1[i].b, m2[i].b);
      }
    }
    const double monitor = loss_and_gradient(model, *monitor_x, *monitor_y, nullptr);
    if (!std::isfinite(monitor)) {
      throw TrainingDiverged("monitored loss became non-finite at epoch " + std::to_string(epoch) +
                             "; try a smaller learning rate");
    }
    result.epochs_run = epoch;
    if (monitor < best) {
      best = monitor;
      best_model = model;
      result.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= opt.patience) {
      break;
    }
  }
  result.model = std::move(best_model);
  result.train_loss = loss_and_gradient(result.model, train_set.inputs, train_set.targets, nullptr);
  result.validation_loss =
      validation ? loss_and_gradient(result.model, validation->inputs, validation->targets, nullptr)
                 : result.train_loss;
  return result;
}

NnRollout predict_record(const NNPredictor& model, const Matrix& u, const Matrix& y) {
  model.validate();
  if (u.rows() != model.r || y.rows() != model.l || u.cols() != y.cols()) {
    throw DimensionMismatch("predict_record: record does not match the predictor");
  }
  NnRollout out;
  out.first = model.n_past;
  const auto total = u.cols();
  std::vector<Vector> chunks;
  Eigen::Index count = 0;
  for (Eigen::Index k = model.n_past; k + model.n_future <= total; k += model.n_future) {
    const Vector row = model.assemble_input(u.middleCols(k - model.n_past, model.n_past),
                                            y.middleCols(k - model.n_past, model.n_past),
                                            u.middleCols(k, model.n_future - 1));
    chunks.push_back(model.forward(row));
    count += model.n_future;
  }
  out.predicted.resize(model.l, count);
  Eigen::Index col = 0;
  for (const auto& c : chunks) {
    for (int f = 0; f < model.n_future; ++f, ++col) {
      out.predicted.col(col) = c.segment(static_cast<Eigen::Index>(f) * model.l, model.l);
    }
  }
  return out;
}

}  // namespace approxmpc
