#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "approxmpc/excitation.hpp"

namespace approxmpc {

enum class Activation { Sigmoid, Swish, Linear };

std::string to_string(Activation a);
Activation activation_from_string(const std::string& name);

struct DenseLayer {
  Matrix w;  ///< out x in
  Vector b;
  Activation activation = Activation::Linear;
};

/// Per-channel (min, max) maps raw values to [-1, 1].
struct ChannelScaling {
  Vector u_min, u_max, y_min, y_max;

  static ChannelScaling from_data(const Matrix& u, const Matrix& y);
  double scale_u(Eigen::Index ch, double v) const;
  double scale_y(Eigen::Index ch, double v) const;
  double unscale_y(Eigen::Index ch, double v) const;
};

/// Multi-step-ahead predictor. The input row is N_past pairs (u_j, y_j)
/// for j = k-N_past .. k-1, then the future inputs u_k .. u_{k+N_future-2};
/// the output is y_k .. y_{k+N_future-1}.
struct NNPredictor {
  std::vector<DenseLayer> layers;
  int n_past = 0;
  int n_future = 0;
  int r = 0;
  int l = 0;
  ChannelScaling scaling;

  int in_dim() const { return n_past * (r + l) + (n_future - 1) * r; }
  int out_dim() const { return n_future * l; }
  void validate() const;

  /// Raw units in, raw units out.
  Vector forward(const Vector& raw_input) const;
  /// Scaled rows (batch x in_dim) in, scaled rows out.
  Matrix forward_scaled(const Matrix& rows) const;

  Vector scale_input(const Vector& raw_input) const;
  Vector unscale_output(const Vector& scaled_output) const;

  /// Builds a raw input row from windows: past_u/past_y are r x N_past and
  /// l x N_past (oldest first), future_u is r x (N_future - 1).
  Vector assemble_input(const Matrix& past_u, const Matrix& past_y, const Matrix& future_u) const;
};

/// Input dimension N_past (r + l) + (N_future - 1) r.
int nn_input_dim(int n_past, int n_future, int r, int l);

struct TrainingSet {
  Matrix inputs;   ///< rows = samples, scaled
  Matrix targets;  ///< rows = samples, scaled
  ChannelScaling scaling;
  int n_past = 0, n_future = 0, r = 0, l = 0;
};

/// Sliding windows over the dataset. Scaling comes from the data extrema
/// unless `scaling` is given (e.g. reuse of the training ranges).
TrainingSet build_training_set(const Dataset& data, int n_past, int n_future,
                               const ChannelScaling* scaling = nullptr);

struct Architecture {
  std::vector<int> hidden;
  std::vector<Activation> activations;  ///< one per hidden layer
};

struct TrainOptions {
  double learning_rate = 1e-3;
  int batch_size = 32;
  int epochs = 500;
  int patience = 50;
  std::uint64_t seed = 1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainResult {
  NNPredictor model;
  double train_loss = 0.0;
  double validation_loss = 0.0;
  int epochs_run = 0;
  int best_epoch = 0;
};

/// Seeded Glorot-uniform initialization; output layer is linear.
NNPredictor init_network(const TrainingSet& data, const Architecture& arch, std::uint64_t seed);

/// Mean squared error over every target entry and its gradient with respect
/// to every weight and bias (same shapes as the layers).
double loss_and_gradient(const NNPredictor& model, const Matrix& inputs, const Matrix& targets,
                         std::vector<DenseLayer>* gradient);

/// Mini-batch Adam with early stopping on the validation loss (training loss
/// when no validation set is given). Throws TrainingDiverged on NaN/Inf loss.
TrainResult train(const TrainingSet& train_set, const TrainingSet* validation,
                  const Architecture& arch, const TrainOptions& options);

/// Open-loop prediction over a record: consecutive blocks of N_future
/// outputs starting at sample N_past, each predicted from measured history.
struct NnRollout {
  Eigen::Index first = 0;  ///< sample index of the first prediction
  Matrix predicted;        ///< l x count
};

NnRollout predict_record(const NNPredictor& model, const Matrix& u, const Matrix& y);

}  // namespace approxmpc
