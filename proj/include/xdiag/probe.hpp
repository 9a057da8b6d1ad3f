#pragma once

// Linear and MLP classifiers over embeddings: model type, forward pass,
// prediction rules, losses with analytic gradients, and the JSON model file.

#include "xdiag/common.hpp"
#include "xdiag/geometry.hpp"
#include "xdiag/store.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace xdiag {

enum class ProbeKind { linear, mlp };
enum class Task { multiclass, multilabel, quadratic };
enum class Activation { none, relu };
enum class ClassPrior { empirical, uniform };

inline std::string to_string(ProbeKind k) { return k == ProbeKind::linear ? "linear" : "mlp"; }
inline std::string to_string(Activation a) { return a == Activation::relu ? "relu" : "none"; }
inline std::string to_string(Task t) {
  switch (t) {
    case Task::multiclass: return "multiclass";
    case Task::multilabel: return "multilabel";
    case Task::quadratic: return "quadratic";
  }
  return "multiclass";
}
inline std::string to_string(ClassPrior p) { return p == ClassPrior::uniform ? "uniform" : "empirical"; }

inline ProbeKind probe_kind_from_string(const std::string& s) {
  if (s == "linear") return ProbeKind::linear;
  if (s == "mlp") return ProbeKind::mlp;
  throw ConfigError("unknown model kind '" + s + "'");
}
inline Task task_from_string(const std::string& s) {
  if (s == "multiclass") return Task::multiclass;
  if (s == "multilabel") return Task::multilabel;
  if (s == "quadratic") return Task::quadratic;
  throw ConfigError("unknown task '" + s + "'");
}
inline Activation activation_from_string(const std::string& s) {
  if (s == "none") return Activation::none;
  if (s == "relu") return Activation::relu;
  throw ConfigError("unknown activation '" + s + "'");
}

struct TrainConfig {
  double learning_rate = 1e-3;
  int epochs = 25;
  int batch_size = 256;
  std::uint64_t seed = 0;
  double ridge_lambda = 1e-3;
  ClassPrior class_prior = ClassPrior::empirical;
  std::string model_selection = "best_val_loss";

  void validate(Task task) const {
    if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (task == Task::quadratic && !(ridge_lambda > 0.0)) throw ConfigError("ridge_lambda must be > 0");
    if (model_selection != "best_val_loss") throw ConfigError("unsupported model_selection '" + model_selection + "'");
  }
};

struct Layer {
  Matrix weight;  // out x in
  std::optional<Vector> bias;
};

/// Per-modality means subtracted before the model sees an input.
struct GapClosing {
  std::optional<Vector> image;
  std::optional<Vector> text;

  const std::optional<Vector>& get(Modality m) const {
    static const std::optional<Vector> none;
    if (m == Modality::image) return image;
    if (m == Modality::text) return text;
    return none;
  }
  void set(Modality m, Vector v) {
    if (m == Modality::image) image = std::move(v);
    else if (m == Modality::text) text = std::move(v);
    else throw ConfigError("gap closing supports image and text modalities only");
  }
};

struct ProbeModel {
  ProbeKind kind = ProbeKind::linear;
  Task task = Task::multiclass;
  Activation activation = Activation::none;
  std::vector<Layer> layers;
  std::optional<GapClosing> gap_closing;
  TrainConfig config;
  std::uint64_t seed = 0;

  Eigen::Index input_dim() const { return layers.front().weight.cols(); }
  Eigen::Index n_classes() const { return layers.back().weight.rows(); }
};

inline void validate(const ProbeModel& m) {
  require(!m.layers.empty(), "model has no layers");
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    const auto& l = m.layers[k];
    require(l.weight.rows() >= 1 && l.weight.cols() >= 1, "empty weight matrix in layer " + std::to_string(k));
    if (l.bias) require(l.bias->size() == l.weight.rows(), "bias size mismatch in layer " + std::to_string(k));
    if (k > 0)
      require(l.weight.cols() == m.layers[k - 1].weight.rows(),
              "layer " + std::to_string(k) + " input does not chain with previous output");
  }
  if (m.kind == ProbeKind::linear) require(m.layers.size() == 1, "linear model must have exactly one layer");
  if (m.task == Task::quadratic) {
    require(m.kind == ProbeKind::linear, "quadratic task requires a linear model");
    require(!m.layers.front().bias, "quadratic task model must not carry a bias");
  }
}

/// Shape of a model to be trained.
struct ProbeSpec {
  ProbeKind kind = ProbeKind::linear;
  Task task = Task::multiclass;
  std::vector<int> hidden{512};  // mlp only
  Activation activation = Activation::relu;
  bool close_gap = false;
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization, seeded.
inline ProbeModel init_model(const ProbeSpec& spec, Eigen::Index input_dim, Eigen::Index n_classes, std::uint64_t seed) {
  ProbeModel m;
  m.kind = spec.kind;
  m.task = spec.task;
  m.seed = seed;
  std::vector<Eigen::Index> dims{input_dim};
  if (spec.kind == ProbeKind::mlp) {
    require(!spec.hidden.empty(), "mlp needs at least one hidden layer");
    for (int h : spec.hidden) {
      require(h >= 1, "hidden sizes must be >= 1");
      dims.push_back(h);
    }
    m.activation = spec.activation;
  } else {
    m.activation = Activation::none;
  }
  dims.push_back(n_classes);
  if (spec.task == Task::quadratic) require(spec.kind == ProbeKind::linear, "quadratic task requires a linear model");
  std::mt19937_64 rng(seed);
  for (std::size_t k = 0; k + 1 < dims.size(); ++k) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims[k]));
    std::uniform_real_distribution<double> u(-bound, bound);
    Layer l;
    l.weight.resize(dims[k + 1], dims[k]);
    for (Eigen::Index i = 0; i < l.weight.size(); ++i) l.weight.data()[i] = u(rng);
    if (spec.task != Task::quadratic) {
      l.bias = Vector(dims[k + 1]);
      for (Eigen::Index i = 0; i < l.bias->size(); ++i) (*l.bias)(i) = u(rng);
    }
    m.layers.push_back(std::move(l));
  }
  return m;
}

namespace detail {

inline Matrix affine(const Layer& l, const Matrix& in) {
  Matrix out = in * l.weight.transpose();
  if (l.bias) out.rowwise() += l.bias->transpose();
  return out;
}

inline Matrix activate(Activation a, Matrix z) {
  if (a == Activation::relu) z = z.cwiseMax(0.0);
  return z;
}

}  // namespace detail

/// Raw outputs (logits) of the model on already-preprocessed inputs.
inline Matrix forward(const ProbeModel& m, const Matrix& x) {
  require(x.cols() == m.input_dim(), "dimension mismatch: model expects " + std::to_string(m.input_dim()) +
                                         " columns, got " + std::to_string(x.cols()));
  Matrix h = x;
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    h = detail::affine(m.layers[k], h);
    if (k + 1 < m.layers.size()) h = detail::activate(m.activation, std::move(h));
  }
  return h;
}

/// Applies the model's gap-closing mean for `modality`, if the model carries any.
inline Matrix preprocess(const ProbeModel& m, const Matrix& x, std::optional<Modality> modality) {
  if (!m.gap_closing) return x;
  if (!modality) throw DataError("model uses gap closing; the input modality must be specified");
  const auto& mean = m.gap_closing->get(*modality);
  if (!mean) throw DataError("model has no gap-closing mean for modality '" + to_string(*modality) + "'");
  require(mean->size() == x.cols(), "gap-closing mean dimension mismatch");
  Matrix out = x;
  out.rowwise() -= mean->transpose();
  return out;
}

inline Matrix softmax_rows(const Matrix& z) {
  Matrix p(z.rows(), z.cols());
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    const double mx = z.row(i).maxCoeff();
    double sum = 0.0;
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
      p(i, j) = std::exp(z(i, j) - mx);
      sum += p(i, j);
    }
    p.row(i) /= sum;
  }
  return p;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

/// Index of the largest entry; ties go to the lowest index.
inline int argmax_row(const Matrix& s, Eigen::Index i) {
  int best = 0;
  for (Eigen::Index j = 1; j < s.cols(); ++j)
    if (s(i, j) > s(i, best)) best = static_cast<int>(j);
  return best;
}

struct Prediction {
  Task task = Task::multiclass;
  Matrix scores;                  // probabilities, or raw scores for quadratic
  std::vector<int> classes;       // multiclass / quadratic
  Eigen::MatrixXi positives;      // multilabel, 0/1

  Eigen::Index rows() const { return scores.rows(); }
};

/// Scores and hard predictions from model outputs.
inline Prediction predict_from_logits(Task task, const Matrix& logits) {
  Prediction p;
  p.task = task;
  switch (task) {
    case Task::multiclass: p.scores = softmax_rows(logits); break;
    case Task::multilabel: p.scores = logits.unaryExpr([](double z) { return sigmoid(z); }); break;
    case Task::quadratic: p.scores = logits; break;
  }
  if (task == Task::multilabel) {
    p.positives = (p.scores.array() >= 0.5).cast<int>().matrix();
  } else {
    p.classes.resize(static_cast<std::size_t>(logits.rows()));
    for (Eigen::Index i = 0; i < logits.rows(); ++i) p.classes[static_cast<std::size_t>(i)] = argmax_row(p.scores, i);
  }
  return p;
}

inline Prediction predict(const ProbeModel& m, const Matrix& x, std::optional<Modality> modality = std::nullopt) {
  return predict_from_logits(m.task, forward(m, preprocess(m, x, modality)));
}

inline Prediction predict(const ProbeModel& m, const EmbeddingStore& s) { return predict(m, s.matrix, s.modality); }

/// Balanced targets: one-hot(label) minus the class distribution.
inline Matrix balanced_targets(const std::vector<int>& labels, const Vector& class_distribution) {
  const auto c = class_distribution.size();
  require(std::abs(class_distribution.sum() - 1.0) <= 1e-9, "class distribution must sum to 1");
  Matrix t(static_cast<Eigen::Index>(labels.size()), c);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= c) throw DataError("label " + std::to_string(y) + " out of range");
    t.row(static_cast<Eigen::Index>(i)) = -class_distribution.transpose();
    t(static_cast<Eigen::Index>(i), y) += 1.0;
  }
  return t;
}

inline Vector empirical_distribution(const std::vector<int>& labels, Eigen::Index n_classes) {
  Vector p = Vector::Zero(n_classes);
  for (int y : labels) {
    if (y < 0 || y >= n_classes) throw DataError("label " + std::to_string(y) + " out of range");
    p(y) += 1.0;
  }
  require(!labels.empty(), "no labels");
  return p / static_cast<double>(labels.size());
}

inline Matrix one_hot(const std::vector<int>& labels, Eigen::Index n_classes) {
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y < 0 || y >= n_classes) throw DataError("label " + std::to_string(y) + " out of range");
    t(static_cast<Eigen::Index>(i), y) = 1.0;
  }
  return t;
}

inline Matrix multi_hot(const MultiLabels& labels, Eigen::Index n_classes) {
  Matrix t = Matrix::Zero(static_cast<Eigen::Index>(labels.size()), n_classes);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (int y : labels[i]) {
      if (y < 0 || y >= n_classes) throw DataError("label " + std::to_string(y) + " out of range");
      t(static_cast<Eigen::Index>(i), y) = 1.0;
    }
  }
  return t;
}

/// Mean data loss on logits: softmax cross-entropy (multiclass), sigmoid BCE
/// averaged over example x label cells (multilabel), or mean squared error
/// summed over outputs (quadratic).
inline double data_loss(Task task, const Matrix& logits, const Matrix& targets) {
  require(logits.rows() == targets.rows() && logits.cols() == targets.cols(), "loss shape mismatch");
  const auto n = static_cast<double>(logits.rows());
  double total = 0.0;
  switch (task) {
    case Task::multiclass:
      for (Eigen::Index i = 0; i < logits.rows(); ++i) {
        const double mx = logits.row(i).maxCoeff();
        double sum = 0.0;
        for (Eigen::Index j = 0; j < logits.cols(); ++j) sum += std::exp(logits(i, j) - mx);
        const double lse = mx + std::log(sum);
        for (Eigen::Index j = 0; j < logits.cols(); ++j) total += targets(i, j) * (lse - logits(i, j));
      }
      return total / n;
    case Task::multilabel:
      for (Eigen::Index i = 0; i < logits.rows(); ++i)
        for (Eigen::Index j = 0; j < logits.cols(); ++j) {
          const double z = logits(i, j);
          total += std::max(z, 0.0) - z * targets(i, j) + std::log1p(std::exp(-std::abs(z)));
        }
      return total / (n * static_cast<double>(logits.cols()));
    case Task::quadratic:
      return (logits - targets).squaredNorm() / n;
  }
  return total;
}

struct Gradients {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;  // empty vectors for bias-free layers
};

/// Loss (data term plus l2 * ||W||_F^2 over all weights) and its gradient.
inline double loss_and_gradient(const ProbeModel& m, const Matrix& x, const Matrix& targets, double l2,
                                Gradients* grad) {
  const std::size_t L = m.layers.size();
  std::vector<Matrix> inputs;  // input to each layer
  std::vector<Matrix> pre;     // pre-activation of each hidden layer
  Matrix h = x;
  for (std::size_t k = 0; k < L; ++k) {
    inputs.push_back(h);
    Matrix z = detail::affine(m.layers[k], h);
    if (k + 1 < L) {
      pre.push_back(z);
      h = detail::activate(m.activation, std::move(z));
    } else {
      h = std::move(z);
    }
  }
  const Matrix& logits = h;
  double loss = data_loss(m.task, logits, targets);
  for (const auto& l : m.layers) loss += l2 * l.weight.squaredNorm();
  if (!grad) return loss;

  const auto n = static_cast<double>(x.rows());
  Matrix delta;
  switch (m.task) {
    case Task::multiclass: delta = (softmax_rows(logits) - targets) / n; break;
    case Task::multilabel:
      delta = (logits.unaryExpr([](double z) { return sigmoid(z); }) - targets) /
              (n * static_cast<double>(logits.cols()));
      break;
    case Task::quadratic: delta = 2.0 * (logits - targets) / n; break;
  }
  grad->weight.assign(L, Matrix());
  grad->bias.assign(L, Vector());
  for (std::size_t k = L; k-- > 0;) {
    const auto& layer = m.layers[k];
    grad->weight[k] = delta.transpose() * inputs[k] + 2.0 * l2 * layer.weight;
    if (layer.bias) grad->bias[k] = delta.colwise().sum().transpose();
    if (k == 0) break;
    Matrix back = delta * layer.weight;
    if (m.activation == Activation::relu) back = back.cwiseProduct((pre[k - 1].array() > 0.0).cast<double>().matrix());
    delta = std::move(back);
  }
  return loss;
}

// ---- model file -------------------------------------------------------------

inline nlohmann::json vec_json(const Vector& v) { return std::vector<double>(v.data(), v.data() + v.size()); }

inline Vector json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"learning_rate", c.learning_rate}, {"epochs", c.epochs},           {"batch_size", c.batch_size},
          {"seed", c.seed},                   {"ridge_lambda", c.ridge_lambda}, {"class_prior", to_string(c.class_prior)},
          {"model_selection", c.model_selection}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.seed = j.value("seed", c.seed);
  c.ridge_lambda = j.value("ridge_lambda", c.ridge_lambda);
  c.class_prior = j.value("class_prior", std::string("empirical")) == "uniform" ? ClassPrior::uniform : ClassPrior::empirical;
  c.model_selection = j.value("model_selection", c.model_selection);
  return c;
}

inline nlohmann::json to_json(const ProbeModel& m) {
  nlohmann::json j;
  j["kind"] = to_string(m.kind);
  j["task"] = to_string(m.task);
  j["activation"] = to_string(m.activation);
  j["layers"] = nlohmann::json::array();
  for (const auto& l : m.layers) {
    nlohmann::json lj;
    lj["rows"] = l.weight.rows();
    lj["cols"] = l.weight.cols();
    lj["weights"] = std::vector<double>(l.weight.data(), l.weight.data() + l.weight.size());
    if (l.bias) lj["bias"] = vec_json(*l.bias);
    j["layers"].push_back(std::move(lj));
  }
  if (m.gap_closing) {
    j["gap_closing"] = {{"image", m.gap_closing->image ? vec_json(*m.gap_closing->image) : nlohmann::json(nullptr)},
                        {"text", m.gap_closing->text ? vec_json(*m.gap_closing->text) : nlohmann::json(nullptr)}};
  } else {
    j["gap_closing"] = nullptr;
  }
  j["config"] = to_json(m.config);
  j["seed"] = m.seed;
  return j;
}

inline ProbeModel model_from_json(const nlohmann::json& j) {
  ProbeModel m;
  try {
    m.kind = probe_kind_from_string(j.at("kind").get<std::string>());
    m.task = task_from_string(j.at("task").get<std::string>());
    m.activation = activation_from_string(j.value("activation", std::string("none")));
    for (const auto& lj : j.at("layers")) {
      Layer l;
      const auto rows = lj.at("rows").get<Eigen::Index>();
      const auto cols = lj.at("cols").get<Eigen::Index>();
      const auto w = lj.at("weights").get<std::vector<double>>();
      require(static_cast<Eigen::Index>(w.size()) == rows * cols, "layer weight count does not match rows*cols");
      l.weight = Eigen::Map<const Matrix>(w.data(), rows, cols);
      if (lj.contains("bias") && !lj["bias"].is_null()) l.bias = json_vec(lj["bias"]);
      m.layers.push_back(std::move(l));
    }
    if (j.contains("gap_closing") && !j["gap_closing"].is_null()) {
      GapClosing g;
      const auto& gj = j["gap_closing"];
      if (gj.contains("image") && !gj["image"].is_null()) g.image = json_vec(gj["image"]);
      if (gj.contains("text") && !gj["text"].is_null()) g.text = json_vec(gj["text"]);
      m.gap_closing = std::move(g);
    }
    if (j.contains("config")) m.config = train_config_from_json(j["config"]);
    m.seed = j.value("seed", std::uint64_t{0});
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("invalid model file: ") + e.what());
  }
  validate(m);
  return m;
}

inline void save_model(const ProbeModel& m, const std::filesystem::path& path) {
  write_file_atomic(path, to_json(m).dump(2) + "\n");
}

inline ProbeModel load_model(const std::filesystem::path& path) {
  try {
    return model_from_json(nlohmann::json::parse(read_file(path)));
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError("invalid model file " + path.string() + ": " + e.what());
  }
}

}  // namespace xdiag
