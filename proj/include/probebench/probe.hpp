#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "probebench/dataset.hpp"
#include "probebench/embedding.hpp"
#include "probebench/matrix.hpp"

namespace probebench::probe {

enum class ProbeKind { linear, two_layer };
enum class Loss { bce, cce };

std::string to_string(ProbeKind kind);
std::string to_string(Loss loss);
ProbeKind parse_probe_kind(const std::string& text);
Loss parse_loss(const std::string& text);

/// Adaptive-moment (Adam) step settings.
struct OptimizerConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct ProbeConfig {
  ProbeKind kind = ProbeKind::linear;
  Loss loss = Loss::bce;
  double hidden_multiplier = 2.0;
  OptimizerConfig optimizer;
  std::size_t max_epochs = 512;
  /// Stop once the best full-batch loss has not improved by more than
  /// `tolerance` for `patience` consecutive epochs.
  double tolerance = 1e-6;
  std::size_t patience = 20;
  bool early_stopping = true;
  double weight_decay = 0.0;
  /// Multiplies the training objective. 1/C turns a one-column binary probe
  /// into the per-class slice of a C-class BCE objective.
  double loss_scale = 1.0;
  std::uint64_t init_seed = 0;

  std::size_t hidden_units(std::size_t input_dim) const;
  void validate() const;
};

inline constexpr double kBatchNormEpsilon = 1e-5;

/// Classifier over frozen embeddings. For `linear`, `weights` is
/// input_dim x C. For `two_layer`, inputs pass through frozen batch-norm
/// statistics with learned scale/shift, then `hidden_weights`
/// (input_dim x H) + ReLU, then `weights` (H x C).
struct ProbeModel {
  ProbeKind kind = ProbeKind::linear;
  Loss loss = Loss::bce;
  std::size_t input_dim = 0;
  std::vector<std::string> class_names;

  Matrix weights;
  std::vector<double> bias;

  std::vector<double> bn_mean;
  std::vector<double> bn_var;
  std::vector<double> bn_scale;
  std::vector<double> bn_shift;
  Matrix hidden_weights;
  std::vector<double> hidden_bias;

  std::size_t num_classes() const { return class_names.size(); }
  std::size_t hidden_units() const { return hidden_weights.cols(); }

  /// Trainable parameter blocks in a fixed order:
  /// linear: weights, bias; two_layer: bn_scale, bn_shift, hidden_weights,
  /// hidden_bias, weights, bias.
  std::vector<std::span<double>> parameter_blocks();
  std::vector<std::span<const double>> parameter_blocks() const;

  friend bool operator==(const ProbeModel&, const ProbeModel&) = default;
};

/// Zero-initialised linear model.
ProbeModel make_linear(std::size_t input_dim, std::vector<std::string> class_names, Loss loss = Loss::bce);

/// Two-layer model with batch-norm statistics from `inputs` and Glorot-uniform
/// weights drawn from `seed`.
ProbeModel make_two_layer(const Matrix& inputs, std::size_t hidden_units, std::vector<std::string> class_names,
                          std::uint64_t seed, Loss loss = Loss::bce);

/// Training/evaluation batch: inputs N x dim, targets N x C in {0, 1}.
struct Batch {
  Matrix inputs;
  Matrix targets;
};

std::vector<double> forward(const ProbeModel& model, std::span<const double> x);
std::vector<double> forward(const ProbeModel& model, std::span<const float> x);
Matrix forward(const ProbeModel& model, const Matrix& inputs);

/// Mean over all entries of the sigmoid cross entropy, in the stable form
/// max(z,0) - z t + log1p(exp(-|z|)).
double bce_loss(const Matrix& logits, const Matrix& targets);
double bce_loss(std::span<const double> logits, std::span<const double> targets);
/// Mean over rows of -log softmax(z)[target]. Rows must be one-hot.
double cce_loss(const Matrix& logits, const Matrix& targets);
double cce_loss(std::span<const double> logits, std::span<const double> targets);

/// Training objective: mean loss (per model.loss) times `loss_scale`, plus
/// weight_decay/2 times the squared norm of the weight matrices.
double objective(const ProbeModel& model, const Batch& batch, const ProbeConfig& config);

/// Analytic gradient of `objective`, one vector per parameter block.
std::vector<std::vector<double>> gradient(const ProbeModel& model, const Batch& batch, const ProbeConfig& config);

struct TrainingTrace {
  std::vector<double> epoch_losses;  ///< objective before each update
  double final_loss = 0.0;           ///< objective after the last update
  std::size_t epochs = 0;
};

/// Full-batch Adam from the kind's initialisation. Deterministic.
ProbeModel fit(const Matrix& inputs, const Matrix& targets, std::vector<std::string> class_names,
               const ProbeConfig& config, TrainingTrace* trace = nullptr);

/// Gathers the split's train examples into a batch and fits a probe. Class
/// order is the split's (sorted) class order.
ProbeModel train_probe(const embedding::EmbeddingTable& embeddings, const dataset::SplitSpec& split,
                       const ProbeConfig& config, TrainingTrace* trace = nullptr);

/// Sigmoid (BCE) or softmax (CCE) scores, one row per input.
Matrix scores_from_logits(const Matrix& logits, Loss loss);
Matrix predict_scores(const ProbeModel& model, const Matrix& inputs);
Matrix predict_scores(const ProbeModel& model, const embedding::EmbeddingTable& table,
                      std::span<const std::string> ids);

/// Stacks table rows for `ids` into an N x dim matrix.
Matrix gather(const embedding::EmbeddingTable& table, std::span<const std::string> ids);

std::string model_to_json(const ProbeModel& model);
ProbeModel model_from_json(const std::string& text);

}  // namespace probebench::probe
