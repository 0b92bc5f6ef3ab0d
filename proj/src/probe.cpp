#include "probebench/probe.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "json.hpp"
#include "probebench/error.hpp"

namespace probebench::probe {

namespace {

double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

double bce_term(double z, double t) { return std::max(z, 0.0) - z * t + std::log1p(std::exp(-std::abs(z))); }

double log_sum_exp(std::span<const double> z) {
  const double m = *std::max_element(z.begin(), z.end());
  double s = 0.0;
  for (double v : z) s += std::exp(v - m);
  return m + std::log(s);
}

std::size_t one_hot_index(std::span<const double> t, std::size_t row) {
  std::size_t hot = t.size();
  for (std::size_t c = 0; c < t.size(); ++c) {
    if (t[c] == 1.0) {
      if (hot != t.size()) {
        throw ValidationError("cce_loss: target row " + std::to_string(row) + " has more than one positive class");
      }
      hot = c;
    } else if (t[c] != 0.0) {
      throw ValidationError("cce_loss: target row " + std::to_string(row) + " is not binary");
    }
  }
  if (hot == t.size()) throw ValidationError("cce_loss: target row " + std::to_string(row) + " has no positive class");
  return hot;
}

/// Z = X W + b.
Matrix affine(const Matrix& x, const Matrix& w, const std::vector<double>& b) {
  Matrix z(x.rows(), w.cols());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    auto zr = z.row(n);
    std::copy(b.begin(), b.end(), zr.begin());
    const auto xr = x.row(n);
    for (std::size_t i = 0; i < x.cols(); ++i) {
      const double xi = xr[i];
      if (xi == 0.0) continue;
      const auto wr = w.row(i);
      for (std::size_t c = 0; c < w.cols(); ++c) zr[c] += xi * wr[c];
    }
  }
  return z;
}

/// Intermediate activations of the two-layer network.
struct TwoLayerPass {
  Matrix normalized;  // x_hat
  Matrix scaled;      // gamma * x_hat + beta
  Matrix pre;         // hidden pre-activation
  Matrix hidden;      // ReLU(pre)
  Matrix logits;
};

TwoLayerPass two_layer_pass(const ProbeModel& m, const Matrix& x) {
  TwoLayerPass p;
  p.normalized = Matrix(x.rows(), x.cols());
  p.scaled = Matrix(x.rows(), x.cols());
  for (std::size_t n = 0; n < x.rows(); ++n) {
    for (std::size_t i = 0; i < x.cols(); ++i) {
      const double xh = (x(n, i) - m.bn_mean[i]) / std::sqrt(m.bn_var[i] + kBatchNormEpsilon);
      p.normalized(n, i) = xh;
      p.scaled(n, i) = m.bn_scale[i] * xh + m.bn_shift[i];
    }
  }
  p.pre = affine(p.scaled, m.hidden_weights, m.hidden_bias);
  p.hidden = p.pre;
  for (auto& v : p.hidden.data()) v = std::max(v, 0.0);
  p.logits = affine(p.hidden, m.weights, m.bias);
  return p;
}

void check_inputs(const ProbeModel& m, std::size_t cols) {
  if (cols != m.input_dim) {
    throw ValidationError("probe expects input dimension " + std::to_string(m.input_dim) + ", got " +
                          std::to_string(cols));
  }
}

void check_shapes(const Matrix& logits, const Matrix& targets, const char* who) {
  if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
    throw ValidationError(std::string(who) + ": logits and targets differ in shape");
  }
  if (logits.rows() == 0 || logits.cols() == 0) throw ValidationError(std::string(who) + ": empty batch");
}

/// dObjective/dLogits for the mean loss, before loss_scale.
Matrix logit_gradient(const Matrix& logits, const Matrix& targets, Loss loss) {
  Matrix g(logits.rows(), logits.cols());
  const double n = static_cast<double>(logits.rows());
  if (loss == Loss::bce) {
    const double denom = n * static_cast<double>(logits.cols());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      for (std::size_t c = 0; c < logits.cols(); ++c) g(r, c) = (sigmoid(logits(r, c)) - targets(r, c)) / denom;
    }
  } else {
    for (std::size_t r = 0; r < logits.rows(); ++r) {
      one_hot_index(targets.row(r), r);
      const double lse = log_sum_exp(logits.row(r));
      for (std::size_t c = 0; c < logits.cols(); ++c) g(r, c) = (std::exp(logits(r, c) - lse) - targets(r, c)) / n;
    }
  }
  return g;
}

double mean_loss(const Matrix& logits, const Matrix& targets, Loss loss) {
  return loss == Loss::bce ? bce_loss(logits, targets) : cce_loss(logits, targets);
}

/// out += A^T B (A: N x p, B: N x q, out: p x q).
void add_at_b(const Matrix& a, const Matrix& b, std::span<double> out, std::size_t q) {
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const auto ar = a.row(n);
    const auto br = b.row(n);
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double ai = ar[i];
      if (ai == 0.0) continue;
      double* o = out.data() + i * q;
      for (std::size_t j = 0; j < q; ++j) o[j] += ai * br[j];
    }
  }
}

void add_column_sums(const Matrix& m, std::span<double> out) {
  for (std::size_t n = 0; n < m.rows(); ++n) {
    const auto r = m.row(n);
    for (std::size_t j = 0; j < m.cols(); ++j) out[j] += r[j];
  }
}

/// A B^T (A: N x q, B: p x q) -> N x p.
Matrix a_bt(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows(), b.rows());
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const auto ar = a.row(n);
    for (std::size_t i = 0; i < b.rows(); ++i) {
      const auto br = b.row(i);
      double s = 0.0;
      for (std::size_t j = 0; j < a.cols(); ++j) s += ar[j] * br[j];
      out(n, i) = s;
    }
  }
  return out;
}

std::vector<std::vector<double>> zero_like(const ProbeModel& m) {
  std::vector<std::vector<double>> g;
  for (auto block : m.parameter_blocks()) g.emplace_back(block.size(), 0.0);
  return g;
}

}  // namespace

std::string to_string(ProbeKind kind) { return kind == ProbeKind::linear ? "linear" : "two_layer"; }
std::string to_string(Loss loss) { return loss == Loss::bce ? "bce" : "cce"; }

ProbeKind parse_probe_kind(const std::string& text) {
  if (text == "linear" || text == "lr") return ProbeKind::linear;
  if (text == "two_layer" || text == "2lp") return ProbeKind::two_layer;
  throw ValidationError("unknown probe kind '" + text + "' (expected linear or two_layer)");
}

Loss parse_loss(const std::string& text) {
  if (text == "bce") return Loss::bce;
  if (text == "cce") return Loss::cce;
  throw ValidationError("unknown loss '" + text + "' (expected bce or cce)");
}

std::size_t ProbeConfig::hidden_units(std::size_t input_dim) const {
  return static_cast<std::size_t>(std::llround(hidden_multiplier * static_cast<double>(input_dim)));
}

void ProbeConfig::validate() const {
  if (max_epochs < 1) throw ValidationError("probe: max_epochs must be >= 1");
  if (!(optimizer.learning_rate > 0)) throw ValidationError("probe: learning rate must be > 0");
  if (kind == ProbeKind::two_layer && !(hidden_multiplier > 0)) {
    throw ValidationError("probe: hidden_multiplier must be > 0");
  }
  if (weight_decay < 0) throw ValidationError("probe: weight_decay must be >= 0");
  if (!(loss_scale > 0)) throw ValidationError("probe: loss_scale must be > 0");
}

std::vector<std::span<double>> ProbeModel::parameter_blocks() {
  if (kind == ProbeKind::linear) return {weights.data(), bias};
  return {bn_scale, bn_shift, hidden_weights.data(), hidden_bias, weights.data(), bias};
}

std::vector<std::span<const double>> ProbeModel::parameter_blocks() const {
  if (kind == ProbeKind::linear) return {weights.data(), bias};
  return {bn_scale, bn_shift, hidden_weights.data(), hidden_bias, weights.data(), bias};
}

ProbeModel make_linear(std::size_t input_dim, std::vector<std::string> class_names, Loss loss) {
  ProbeModel m;
  m.kind = ProbeKind::linear;
  m.loss = loss;
  m.input_dim = input_dim;
  m.weights = Matrix(input_dim, class_names.size());
  m.bias.assign(class_names.size(), 0.0);
  m.class_names = std::move(class_names);
  return m;
}

ProbeModel make_two_layer(const Matrix& inputs, std::size_t hidden_units, std::vector<std::string> class_names,
                          std::uint64_t seed, Loss loss) {
  if (inputs.rows() == 0) throw ValidationError("make_two_layer: no inputs for batch-norm statistics");
  if (hidden_units == 0) throw ValidationError("make_two_layer: zero hidden units");
  const std::size_t dim = inputs.cols();
  const std::size_t classes = class_names.size();
  ProbeModel m;
  m.kind = ProbeKind::two_layer;
  m.loss = loss;
  m.input_dim = dim;
  m.class_names = std::move(class_names);

  m.bn_mean.assign(dim, 0.0);
  m.bn_var.assign(dim, 0.0);
  const double n = static_cast<double>(inputs.rows());
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    for (std::size_t i = 0; i < dim; ++i) m.bn_mean[i] += inputs(r, i);
  }
  for (auto& v : m.bn_mean) v /= n;
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    for (std::size_t i = 0; i < dim; ++i) {
      const double d = inputs(r, i) - m.bn_mean[i];
      m.bn_var[i] += d * d;
    }
  }
  for (auto& v : m.bn_var) v /= n;
  m.bn_scale.assign(dim, 1.0);
  m.bn_shift.assign(dim, 0.0);

  dataset::SplitMix64 rng(seed);
  auto glorot = [&](Matrix& w) {
    const double limit = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (auto& v : w.data()) v = (2.0 * rng.uniform() - 1.0) * limit;
  };
  m.hidden_weights = Matrix(dim, hidden_units);
  glorot(m.hidden_weights);
  m.hidden_bias.assign(hidden_units, 0.0);
  m.weights = Matrix(hidden_units, classes);
  glorot(m.weights);
  m.bias.assign(classes, 0.0);
  return m;
}

Matrix forward(const ProbeModel& model, const Matrix& inputs) {
  check_inputs(model, inputs.cols());
  if (model.kind == ProbeKind::linear) return affine(inputs, model.weights, model.bias);
  return two_layer_pass(model, inputs).logits;
}

std::vector<double> forward(const ProbeModel& model, std::span<const double> x) {
  Matrix in(1, x.size());
  std::copy(x.begin(), x.end(), in.row(0).begin());
  return forward(model, in).data();
}

std::vector<double> forward(const ProbeModel& model, std::span<const float> x) {
  Matrix in(1, x.size());
  std::copy(x.begin(), x.end(), in.row(0).begin());
  return forward(model, in).data();
}

double bce_loss(const Matrix& logits, const Matrix& targets) {
  check_shapes(logits, targets, "bce_loss");
  double s = 0.0;
  for (std::size_t i = 0; i < logits.data().size(); ++i) s += bce_term(logits.data()[i], targets.data()[i]);
  return s / static_cast<double>(logits.data().size());
}

double bce_loss(std::span<const double> logits, std::span<const double> targets) {
  Matrix z(1, logits.size()), t(1, targets.size());
  std::copy(logits.begin(), logits.end(), z.row(0).begin());
  std::copy(targets.begin(), targets.end(), t.row(0).begin());
  return bce_loss(z, t);
}

double cce_loss(const Matrix& logits, const Matrix& targets) {
  check_shapes(logits, targets, "cce_loss");
  double s = 0.0;
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    const std::size_t hot = one_hot_index(targets.row(r), r);
    s += log_sum_exp(logits.row(r)) - logits(r, hot);
  }
  return s / static_cast<double>(logits.rows());
}

double cce_loss(std::span<const double> logits, std::span<const double> targets) {
  Matrix z(1, logits.size()), t(1, targets.size());
  std::copy(logits.begin(), logits.end(), z.row(0).begin());
  std::copy(targets.begin(), targets.end(), t.row(0).begin());
  return cce_loss(z, t);
}

double objective(const ProbeModel& model, const Batch& batch, const ProbeConfig& config) {
  double value = config.loss_scale * mean_loss(forward(model, batch.inputs), batch.targets, model.loss);
  if (config.weight_decay > 0) {
    double sq = 0.0;
    for (double w : model.weights.data()) sq += w * w;
    for (double w : model.hidden_weights.data()) sq += w * w;
    value += 0.5 * config.weight_decay * sq;
  }
  return value;
}

std::vector<std::vector<double>> gradient(const ProbeModel& model, const Batch& batch, const ProbeConfig& config) {
  if (batch.inputs.rows() == 0) throw ValidationError("gradient: empty batch");
  check_inputs(model, batch.inputs.cols());
  if (batch.targets.cols() != model.num_classes()) throw ValidationError("gradient: target width != class count");

  auto grads = zero_like(model);
  const std::size_t classes = model.num_classes();

  if (model.kind == ProbeKind::linear) {
    const Matrix logits = affine(batch.inputs, model.weights, model.bias);
    Matrix dz = logit_gradient(logits, batch.targets, model.loss);
    for (auto& v : dz.data()) v *= config.loss_scale;
    add_at_b(batch.inputs, dz, grads[0], classes);
    add_column_sums(dz, grads[1]);
    if (config.weight_decay > 0) {
      for (std::size_t i = 0; i < grads[0].size(); ++i) grads[0][i] += config.weight_decay * model.weights.data()[i];
    }
    return grads;
  }

  const TwoLayerPass pass = two_layer_pass(model, batch.inputs);
  Matrix dz = logit_gradient(pass.logits, batch.targets, model.loss);
  for (auto& v : dz.data()) v *= config.loss_scale;
  const std::size_t hidden = model.hidden_units();
  add_at_b(pass.hidden, dz, grads[4], classes);
  add_column_sums(dz, grads[5]);

  Matrix dh = a_bt(dz, model.weights);
  for (std::size_t i = 0; i < dh.data().size(); ++i) {
    if (pass.pre.data()[i] <= 0.0) dh.data()[i] = 0.0;
  }
  add_at_b(pass.scaled, dh, grads[2], hidden);
  add_column_sums(dh, grads[3]);

  const Matrix du = a_bt(dh, model.hidden_weights);
  for (std::size_t n = 0; n < du.rows(); ++n) {
    for (std::size_t i = 0; i < du.cols(); ++i) {
      grads[0][i] += du(n, i) * pass.normalized(n, i);
      grads[1][i] += du(n, i);
    }
  }
  if (config.weight_decay > 0) {
    for (std::size_t i = 0; i < grads[2].size(); ++i) {
      grads[2][i] += config.weight_decay * model.hidden_weights.data()[i];
    }
    for (std::size_t i = 0; i < grads[4].size(); ++i) grads[4][i] += config.weight_decay * model.weights.data()[i];
  }
  return grads;
}

ProbeModel fit(const Matrix& inputs, const Matrix& targets, std::vector<std::string> class_names,
               const ProbeConfig& config, TrainingTrace* trace) {
  config.validate();
  if (inputs.rows() == 0) throw ValidationError("fit: no training examples");
  if (targets.rows() != inputs.rows() || targets.cols() != class_names.size()) {
    throw ValidationError("fit: target matrix shape does not match inputs and classes");
  }
  for (double v : inputs.data()) {
    if (!std::isfinite(v)) throw ValidationError("fit: non-finite input value");
  }

  ProbeModel model = config.kind == ProbeKind::linear
                         ? make_linear(inputs.cols(), std::move(class_names), config.loss)
                         : make_two_layer(inputs, config.hidden_units(inputs.cols()), std::move(class_names),
                                          config.init_seed, config.loss);
  Batch batch{inputs, targets};

  auto blocks = model.parameter_blocks();
  std::vector<std::vector<double>> m1, m2;
  for (auto b : blocks) {
    m1.emplace_back(b.size(), 0.0);
    m2.emplace_back(b.size(), 0.0);
  }
  const auto& opt = config.optimizer;
  double best = std::numeric_limits<double>::infinity();
  std::size_t stale = 0;
  TrainingTrace local;

  std::size_t epoch = 0;
  for (; epoch < config.max_epochs; ++epoch) {
    const double loss = objective(model, batch, config);
    local.epoch_losses.push_back(loss);
    if (loss < best - config.tolerance) {
      best = loss;
      stale = 0;
    } else if (++stale >= config.patience && config.early_stopping) {
      break;
    }
    const auto grads = gradient(model, batch, config);
    const double t = static_cast<double>(epoch + 1);
    const double c1 = 1.0 - std::pow(opt.beta1, t);
    const double c2 = 1.0 - std::pow(opt.beta2, t);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto params = blocks[b];
      for (std::size_t i = 0; i < params.size(); ++i) {
        const double g = grads[b][i];
        m1[b][i] = opt.beta1 * m1[b][i] + (1.0 - opt.beta1) * g;
        m2[b][i] = opt.beta2 * m2[b][i] + (1.0 - opt.beta2) * g * g;
        const double mhat = m1[b][i] / c1;
        const double vhat = m2[b][i] / c2;
        params[i] -= opt.learning_rate * mhat / (std::sqrt(vhat) + opt.epsilon);
      }
    }
  }
  local.epochs = epoch;
  local.final_loss = objective(model, batch, config);
  for (auto b : model.parameter_blocks()) {
    for (double v : b) {
      if (!std::isfinite(v)) throw Error("fit: training diverged (non-finite parameter)");
    }
  }
  if (trace) *trace = std::move(local);
  return model;
}

Matrix gather(const embedding::EmbeddingTable& table, std::span<const std::string> ids) {
  Matrix x(ids.size(), table.dim());
  for (std::size_t n = 0; n < ids.size(); ++n) {
    const auto& v = table.at(ids[n]);
    if (v.size() != table.dim()) throw ValidationError("row '" + ids[n] + "' has the wrong dimension");
    std::copy(v.begin(), v.end(), x.row(n).begin());
  }
  return x;
}

ProbeModel train_probe(const embedding::EmbeddingTable& embeddings, const dataset::SplitSpec& split,
                       const ProbeConfig& config, TrainingTrace* trace) {
  std::vector<std::string> classes;
  std::vector<std::string> ids;
  std::vector<std::size_t> labels;
  for (const auto& [cls, members] : split.train) {
    const std::size_t index = classes.size();
    classes.push_back(cls);
    for (const auto& id : members) {
      ids.push_back(id);
      labels.push_back(index);
    }
  }
  if (classes.size() < 2) throw ValidationError("train_probe: need at least two classes, split has " +
                                                std::to_string(classes.size()));
  if (ids.empty()) throw ValidationError("train_probe: split has no training examples (k = 0)");
  for (const auto& id : ids) {
    if (!embeddings.rows.count(id)) throw ValidationError("train_probe: no embedding for training example '" + id + "'");
  }
  const Matrix inputs = gather(embeddings, ids);
  Matrix targets(ids.size(), classes.size());
  for (std::size_t n = 0; n < ids.size(); ++n) targets(n, labels[n]) = 1.0;
  return fit(inputs, targets, std::move(classes), config, trace);
}

Matrix scores_from_logits(const Matrix& logits, Loss loss) {
  Matrix s(logits.rows(), logits.cols());
  for (std::size_t r = 0; r < logits.rows(); ++r) {
    if (loss == Loss::bce) {
      for (std::size_t c = 0; c < logits.cols(); ++c) s(r, c) = sigmoid(logits(r, c));
    } else {
      const double lse = log_sum_exp(logits.row(r));
      for (std::size_t c = 0; c < logits.cols(); ++c) s(r, c) = std::exp(logits(r, c) - lse);
    }
  }
  return s;
}

Matrix predict_scores(const ProbeModel& model, const Matrix& inputs) {
  return scores_from_logits(forward(model, inputs), model.loss);
}

Matrix predict_scores(const ProbeModel& model, const embedding::EmbeddingTable& table,
                      std::span<const std::string> ids) {
  for (const auto& id : ids) {
    if (!table.rows.count(id)) throw ValidationError("predict_scores: no embedding for '" + id + "'");
  }
  return predict_scores(model, gather(table, ids));
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json f32_list(std::span<const double> values) {
  auto arr = nlohmann::ordered_json::array();
  for (double v : values) arr.push_back(static_cast<float>(v));
  return arr;
}

std::vector<double> read_list(const nlohmann::json& j, const char* key, std::size_t expected) {
  auto values = j.at(key).get<std::vector<double>>();
  if (values.size() != expected) {
    throw FormatError(std::string("probe model JSON: '") + key + "' has " + std::to_string(values.size()) +
                      " values, expected " + std::to_string(expected));
  }
  return values;
}

}  // namespace

std::string model_to_json(const ProbeModel& model) {
  nlohmann::ordered_json j;
  j["kind"] = to_string(model.kind);
  j["loss"] = to_string(model.loss);
  j["input_dim"] = model.input_dim;
  j["hidden_units"] = model.kind == ProbeKind::two_layer ? model.hidden_units() : 0;
  j["classes"] = model.class_names;
  if (model.kind == ProbeKind::two_layer) {
    j["bn_mean"] = f32_list(model.bn_mean);
    j["bn_var"] = f32_list(model.bn_var);
    j["bn_scale"] = f32_list(model.bn_scale);
    j["bn_shift"] = f32_list(model.bn_shift);
    j["hidden_weights"] = f32_list(model.hidden_weights.data());
    j["hidden_bias"] = f32_list(model.hidden_bias);
  }
  j["weights"] = f32_list(model.weights.data());
  j["bias"] = f32_list(model.bias);
  return j.dump() + "\n";
}

ProbeModel model_from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    ProbeModel m;
    m.kind = parse_probe_kind(j.at("kind").get<std::string>());
    m.loss = parse_loss(j.at("loss").get<std::string>());
    m.input_dim = j.at("input_dim").get<std::size_t>();
    m.class_names = j.at("classes").get<std::vector<std::string>>();
    const std::size_t c = m.class_names.size();
    std::size_t head_in = m.input_dim;
    if (m.kind == ProbeKind::two_layer) {
      const std::size_t h = j.at("hidden_units").get<std::size_t>();
      m.bn_mean = read_list(j, "bn_mean", m.input_dim);
      m.bn_var = read_list(j, "bn_var", m.input_dim);
      m.bn_scale = read_list(j, "bn_scale", m.input_dim);
      m.bn_shift = read_list(j, "bn_shift", m.input_dim);
      m.hidden_weights = Matrix(m.input_dim, h);
      m.hidden_weights.data() = read_list(j, "hidden_weights", m.input_dim * h);
      m.hidden_bias = read_list(j, "hidden_bias", h);
      head_in = h;
    }
    m.weights = Matrix(head_in, c);
    m.weights.data() = read_list(j, "weights", head_in * c);
    m.bias = read_list(j, "bias", c);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("probe model JSON: ") + e.what());
  }
}

}  // namespace probebench::probe
